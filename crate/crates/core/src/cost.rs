//! Multiply-accumulate counts of the smoothing head for a mini-batch.

use std::fmt;

use crate::error::{arg_err, Error, Result};

/// Layer dimensions: `f` input maps, `f_prime` output maps, `n x n` pixels,
/// `s x s` receptive field, `m` samples per mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    pub f: u64,
    pub f_prime: u64,
    pub n: u64,
    pub s: u64,
    pub m: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModelReport {
    pub config: CostConfig,
    pub b12: u64,
    pub b13: u64,
    pub b14: u64,
    pub b15: u64,
}

impl CostModelReport {
    pub fn total(&self) -> u128 {
        self.b12 as u128 + self.b13 as u128 + self.b14 as u128 + self.b15 as u128
    }
}

fn product(what: &'static str, factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::Overflow(what))
}

/// b12: `f N² s² M`, b13: `f f' N² s² M`, b14 and b15: `f N² M`.
pub fn estimate_cost(config: CostConfig) -> Result<CostModelReport> {
    let CostConfig { f, f_prime, n, s, m } = config;
    for (name, v) in [("f", f), ("fprime", f_prime), ("N", n), ("s", s), ("M", m)] {
        if v == 0 {
            return Err(arg_err(format!("{name} must be a positive integer")));
        }
    }
    Ok(CostModelReport {
        config,
        b12: product("b12 count", &[f, n, n, s, s, m])?,
        b13: product("b13 count", &[f, f_prime, n, n, s, s, m])?,
        b14: product("b14 count", &[f, n, n, m])?,
        b15: product("b15 count", &[f, n, n, m])?,
    })
}

/// Four significant digits in `d.ddd×10^e` form, e.g. `1.376×10^11`.
pub fn scientific(v: u64) -> String {
    if v == 0 {
        return "0".into();
    }
    let e = (v as f64).log10().floor() as i32;
    let mant = v as f64 / 10f64.powi(e);
    // rounding can carry into the next decade
    let (mant, e) = if format!("{mant:.3}").starts_with("10") {
        (mant / 10.0, e + 1)
    } else {
        (mant, e)
    };
    format!("{mant:.3}×10^{e}")
}

impl fmt::Display for CostModelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.config;
        writeln!(
            f,
            "f={} fprime={} N={} s={} M={}",
            c.f, c.f_prime, c.n, c.s, c.m
        )?;
        for (name, v) in [
            ("b12", self.b12),
            ("b13", self.b13),
            ("b14", self.b14),
            ("b15", self.b15),
        ] {
            writeln!(f, "{name} {v} ({})", scientific(v))?;
        }
        write!(f, "total {}", self.total())
    }
}
