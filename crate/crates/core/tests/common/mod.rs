//! Shared helpers for the integration tests: random instances and a
//! straight-loop reference for one mean field step.
#![allow(dead_code)]

pub mod metrics_ref;

use dpn_core::layers::LinearActivation;
use dpn_core::meanfield::MarginalField;
use dpn_core::mrf::{ContextFilterBank, DistanceParams, PixelFeatureGrid, TripleWindow, UnaryField};
use dpn_core::tensor::Tensor;
use rand::Rng;

pub struct Case {
    pub unary: UnaryField,
    pub feats: PixelFeatureGrid,
    pub dp: DistanceParams,
    pub ctx: ContextFilterBank,
    pub tw: TripleWindow,
    pub activation: LinearActivation,
}

pub fn random_unary(rng: &mut impl Rng, h: usize, w: usize, l: usize) -> UnaryField {
    let mut data = Vec::with_capacity(h * w * l);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    UnaryField::new(Tensor::new(vec![h, w, l], data).unwrap()).unwrap()
}

pub fn random_feats(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> PixelFeatureGrid {
    let data = (0..h * w * c).map(|_| rng.gen::<u8>()).collect();
    PixelFeatureGrid::new(h, w, c, data).unwrap()
}

pub fn random_bank(rng: &mut impl Rng, k: usize, l: usize, n: usize, scale: f64) -> ContextFilterBank {
    let costs = (0..k * l * n * n * l).map(|_| rng.gen_range(-scale..scale)).collect();
    ContextFilterBank::new(k, l, n, costs).unwrap()
}

pub fn odd(rng: &mut impl Rng) -> usize {
    [1, 3, 5, 7][rng.gen_range(0..4)]
}

/// Instance with dimensions drawn from the given ranges; distance weights
/// are kept small enough that the pairwise costs stay O(1).
pub fn random_case(
    rng: &mut impl Rng,
    hw: std::ops::RangeInclusive<usize>,
    l: std::ops::RangeInclusive<usize>,
    k: std::ops::RangeInclusive<usize>,
) -> Case {
    let h = rng.gen_range(hw.clone());
    let w = rng.gen_range(hw);
    let l = rng.gen_range(l);
    let k = rng.gen_range(k);
    let c = rng.gen_range(1..=3);
    let (m, n) = (odd(rng), odd(rng));
    Case {
        unary: random_unary(rng, h, w, l),
        feats: random_feats(rng, h, w, c),
        dp: DistanceParams::new(rng.gen_range(0.0..2e-5), rng.gen_range(0.0..0.05)).unwrap(),
        ctx: random_bank(rng, k, l, n, 1.0),
        tw: TripleWindow::new(m).unwrap(),
        activation: LinearActivation::default(),
    }
}

fn dist(feats: &PixelFeatureGrid, dp: &DistanceParams, a: (i64, i64), b: (i64, i64)) -> f64 {
    let pa = feats.pixel(a.0 as usize, a.1 as usize);
    let pb = feats.pixel(b.0 as usize, b.1 as usize);
    let di: f64 = pa
        .iter()
        .zip(pb)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let ds = ((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64;
    dp.omega1 * di + dp.omega2 * ds
}

/// `Σ_{z ∈ N_j} d(j,z) p_j^v q_z^v`, the quantity the triple penalty convolves.
pub fn reference_inner(case: &Case, q: &MarginalField) -> Vec<f64> {
    let (h, w, l) = (case.unary.height(), case.unary.width(), case.unary.labels());
    let rm = (case.tw.extent() / 2) as i64;
    let mut out = vec![0.0; h * w * l];
    for jy in 0..h as i64 {
        for jx in 0..w as i64 {
            for v in 0..l {
                let mut s = 0.0;
                for zy in jy - rm..=jy + rm {
                    for zx in jx - rm..=jx + rm {
                        if zy < 0 || zx < 0 || zy >= h as i64 || zx >= w as i64 {
                            continue;
                        }
                        s += dist(&case.feats, &case.dp, (jy, jx), (zy, zx))
                            * case.unary.get(jy as usize, jx as usize, v)
                            * q.get(zy as usize, zx as usize, v);
                    }
                }
                out[(jy as usize * w + jx as usize) * l + v] = s;
            }
        }
    }
    out
}

/// One parallel, undamped update with the kernel frozen at the unary:
/// `q_i^u ∝ p_i^u exp(-min_k Σ_j Σ_v μ_k(u, j-i, v) inner(j, v))`.
pub fn reference_mf_step(case: &Case, q: &MarginalField) -> Vec<f64> {
    let (h, w, l) = (case.unary.height(), case.unary.width(), case.unary.labels());
    let inner = reference_inner(case, q);
    let n = case.ctx.window();
    let rn = (n / 2) as i64;
    let mut out = vec![0.0; h * w * l];
    for iy in 0..h as i64 {
        for ix in 0..w as i64 {
            let mut logits = vec![0.0; l];
            for (u, lg) in logits.iter_mut().enumerate() {
                let mut best = f64::INFINITY;
                for k in 0..case.ctx.components() {
                    let mut s = 0.0;
                    for dy in -rn..=rn {
                        for dx in -rn..=rn {
                            let (jy, jx) = (iy + dy, ix + dx);
                            if jy < 0 || jx < 0 || jy >= h as i64 || jx >= w as i64 {
                                continue;
                            }
                            for v in 0..l {
                                let mu = case.ctx.get(k, u, (dy + rn) as usize, (dx + rn) as usize, v);
                                s += mu * inner[(jy as usize * w + jx as usize) * l + v];
                            }
                        }
                    }
                    best = best.min(s);
                }
                *lg = case.unary.get(iy as usize, ix as usize, u).ln() - best;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for u in 0..l {
                out[(iy as usize * w + ix as usize) * l + u] = (logits[u] - max).exp() / z;
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use dpn_core::learning::{corpus_loss, grad_params, ParamSet, Stage};
use dpn_core::synth::Instance;
use dpn_core::tensor::LabelMap;

/// Finite-difference step mandated for the gradient suite.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// A 6x6 training instance plus parameters whose scales keep every
/// parameter's effect smooth at the mandated step. Intensities are drawn
/// from 0..=15 so that `omega1` has an O(0.01) characteristic scale.
pub fn gradient_case(rng: &mut impl Rng) -> (Instance, ParamSet) {
    let (h, w) = (6, 6);
    let l = rng.gen_range(2..=3);
    let k = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let feats = PixelFeatureGrid::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0..=15u8)).collect())
        .unwrap();
    let gt = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..l)).collect()).unwrap();
    let params = ParamSet {
        dp: DistanceParams::new(rng.gen_range(0.005..0.02), rng.gen_range(0.05..0.3)).unwrap(),
        activation: LinearActivation {
            a: rng.gen_range(0.5..1.5),
            b: rng.gen_range(-0.2..0.2),
        },
        ctx: random_bank(rng, k, l, 3, 0.5),
        tw: TripleWindow::new(3).unwrap(),
    };
    let inst = Instance {
        unary: random_unary(rng, h, w, l),
        feats,
        gt,
    };
    (inst, params)
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter.
pub fn gradient_check(inst: &Instance, params: &ParamSet, floor: f64) -> f64 {
    let batch = std::slice::from_ref(inst);
    let (_, g) = grad_params(batch, params, Stage::Joint, None).unwrap();
    let loss = |p: &ParamSet| corpus_loss(batch, p, None).unwrap();
    let central = |f: &dyn Fn(&mut ParamSet, f64)| {
        let mut plus = params.clone();
        f(&mut plus, FD_STEP);
        let mut minus = params.clone();
        f(&mut minus, -FD_STEP);
        (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
    };
    let mut worst = 0.0f64;
    let n1 = central(&|p, d| p.dp = DistanceParams::new(p.dp.omega1 + d, p.dp.omega2).unwrap());
    worst = worst.max(rel_err(g.omega1, n1, floor));
    let n2 = central(&|p, d| p.dp = DistanceParams::new(p.dp.omega1, p.dp.omega2 + d).unwrap());
    worst = worst.max(rel_err(g.omega2, n2, floor));
    worst = worst.max(rel_err(g.a, central(&|p, d| p.activation.a += d), floor));
    worst = worst.max(rel_err(g.b, central(&|p, d| p.activation.b += d), floor));
    let bank = &params.ctx;
    for (idx, &ga) in g.mu.iter().enumerate() {
        let shifted = |d: f64| {
            let mut costs = bank.costs().to_vec();
            costs[idx] += d;
            ContextFilterBank::new(bank.components(), bank.labels(), bank.window(), costs).unwrap()
        };
        let n = central(&|p, d| p.ctx = shifted(d));
        worst = worst.max(rel_err(ga, n, floor));
    }
    worst
}
