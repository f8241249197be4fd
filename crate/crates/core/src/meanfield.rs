//! Reference mean-field updates, written directly from the closed-form
//! update `q_i^u ∝ exp{-(Φ_i^u + Σ_j Σ_v q_j^v Ψ_ij^uv)}`.
//!
//! This module does not share code with [`crate::layers`]; the layer stack
//! is checked against it.

use std::io::Write;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::mrf::{
    argmax_labels, check_model_shapes, distance, for_window, free_energy, ContextFilterBank,
    DistanceParams, PixelFeatureGrid, TripleWindow, UnaryField, PROB_EPS,
};
use crate::tensor::{LabelMap, Tensor};

/// Normalization tolerance accepted by [`MarginalField::new`].
pub const NORM_TOL: f64 = 1e-9;

/// Per-pixel label distributions `q_i^u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField(Tensor);

impl MarginalField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (h, w, l) = t.shape3()?;
        if l < 2 {
            return Err(arg_err("marginals need at least 2 labels"));
        }
        for (i, px) in t.data().chunks_exact(l).enumerate() {
            if px.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(arg_err(format!("pixel {i} has a marginal outside [0, 1]")));
            }
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > NORM_TOL {
                return Err(arg_err(format!("pixel {i} sums to {s}, not 1")));
            }
        }
        Ok(MarginalField(Tensor::new(vec![h, w, l], t.into_data())?))
    }

    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        MarginalField(t)
    }

    pub fn from_unary(unary: &UnaryField) -> Self {
        MarginalField(unary.tensor().clone())
    }

    pub fn one_hot(labeling: &LabelMap, l: usize) -> Result<Self> {
        labeling.check_range(l, None)?;
        let (h, w) = (labeling.height(), labeling.width());
        let mut data = vec![0.0; h * w * l];
        for (i, &u) in labeling.labels().iter().enumerate() {
            data[i * l + u] = 1.0;
        }
        Ok(MarginalField(Tensor::new(vec![h, w, l], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn labels(&self) -> usize {
        self.0.dims()[2]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, u: usize) -> f64 {
        self.0.get3(y, x, u)
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let l = self.labels();
        let o = (y * self.width() + x) * l;
        &self.0.data()[o..o + l]
    }

    pub fn argmax(&self) -> LabelMap {
        argmax_labels(&self.0)
    }

    pub fn max_abs_diff(&self, other: &MarginalField) -> Result<f64> {
        self.0.max_abs_diff(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateOrder {
    /// Every pixel is updated from the same snapshot of `q`.
    #[default]
    Parallel,
    /// Pixels are updated one at a time in raster order, each seeing the
    /// already-updated values of earlier pixels.
    SequentialRaster,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfSchedule {
    pub iterations: usize,
    pub order: UpdateOrder,
    /// `new = damping * candidate + (1 - damping) * old`, then renormalized.
    pub damping: f64,
}

impl Default for MfSchedule {
    fn default() -> Self {
        MfSchedule {
            iterations: 1,
            order: UpdateOrder::Parallel,
            damping: 1.0,
        }
    }
}

impl MfSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(arg_err("mean field needs at least one iteration"));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(arg_err(format!("damping {} is outside [0, 1]", self.damping)));
        }
        Ok(())
    }
}

/// Which factor weights pixel `j` inside the triple penalty
/// `Σ_z d(j,z) w_j^v q_z^v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelSource {
    /// `w_j^v = p_j^v`, frozen at the unary (what the layer stack computes).
    #[default]
    FixedUnary,
    /// `w_j^v = q_j^v`, the literal substitution into the update.
    CurrentQ,
}

/// Supplies the expected pairwise cost `Σ_j Σ_v q_j^v Ψ_ij^uv` for each label at a pixel.
pub trait PairwiseCost: Sync {
    fn costs(&self, q: &MarginalField, y: usize, x: usize, out: &mut [f64]);
}

/// A dense pairwise table `Ψ(i, j, u, v)` evaluated over a square window.
pub struct WindowPairwise<F> {
    pub radius: usize,
    pub include_self: bool,
    pub psi: F,
}

impl<F> PairwiseCost for WindowPairwise<F>
where
    F: Fn((usize, usize), (usize, usize), usize, usize) -> f64 + Sync,
{
    fn costs(&self, q: &MarginalField, y: usize, x: usize, out: &mut [f64]) {
        let (h, w, l) = (q.height(), q.width(), q.labels());
        out.iter_mut().for_each(|c| *c = 0.0);
        for_window(y, x, self.radius, h, w, |_, _, jy, jx| {
            if !self.include_self && (jy, jx) == (y, x) {
                return;
            }
            for (u, c) in out.iter_mut().enumerate() {
                for v in 0..l {
                    *c += q.get(jy, jx, v) * (self.psi)((y, x), (jy, jx), u, v);
                }
            }
        });
    }
}

/// Triple-penalty pairwise term with a label-context mixture; the cheapest
/// component is taken per pixel and label.
pub struct TriplePairwise<'a> {
    pub unary: &'a UnaryField,
    pub ctx: &'a ContextFilterBank,
    pub tw: TripleWindow,
    pub feats: &'a PixelFeatureGrid,
    pub dp: &'a DistanceParams,
    pub source: KernelSource,
}

impl TriplePairwise<'_> {
    #[inline]
    fn weight(&self, q: &MarginalField, y: usize, x: usize, v: usize) -> f64 {
        match self.source {
            KernelSource::FixedUnary => self.unary.get(y, x, v),
            KernelSource::CurrentQ => q.get(y, x, v),
        }
    }
}

impl PairwiseCost for TriplePairwise<'_> {
    fn costs(&self, q: &MarginalField, y: usize, x: usize, out: &mut [f64]) {
        let (h, w, l) = (q.height(), q.width(), q.labels());
        let n = self.ctx.window();
        // inner[(oy * n + ox) * l + v] = Σ_{z ∈ N_j} d(j,z) w_j^v q_z^v for j = i + offset
        let mut inner = vec![0.0; n * n * l];
        let mut valid = vec![false; n * n];
        for_window(y, x, self.ctx.radius(), h, w, |oy, ox, jy, jx| {
            let slot = oy * n + ox;
            valid[slot] = true;
            let acc = &mut inner[slot * l..(slot + 1) * l];
            for_window(jy, jx, self.tw.radius(), h, w, |_, _, zy, zx| {
                let d = distance(self.feats, (jy, jx), (zy, zx), self.dp);
                for (v, a) in acc.iter_mut().enumerate() {
                    *a += d * self.weight(q, jy, jx, v) * q.get(zy, zx, v);
                }
            });
        });
        for (u, c) in out.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for k in 0..self.ctx.components() {
                let mut s = 0.0;
                for slot in 0..n * n {
                    if !valid[slot] {
                        continue;
                    }
                    let (oy, ox) = (slot / n, slot % n);
                    for v in 0..l {
                        s += self.ctx.get(k, u, oy, ox, v) * inner[slot * l + v];
                    }
                }
                best = best.min(s);
            }
            *c = best;
        }
    }
}

/// Global label co-occurrence costs `μ(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    l: usize,
    costs: Vec<f64>,
}

impl CooccurrenceTable {
    pub fn new(l: usize, costs: Vec<f64>) -> Result<Self> {
        if l < 2 || costs.len() != l * l {
            return Err(shape_err(format!(
                "co-occurrence table for {l} labels needs {} entries, got {}",
                l * l,
                costs.len()
            )));
        }
        Ok(CooccurrenceTable { l, costs })
    }

    pub fn labels(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.costs[u * self.l + v]
    }
}

/// Extracts `μ(u, v)` from a single-component, center-tap-only bank.
pub fn reduce_to_cooccurrence(ctx: &ContextFilterBank) -> Result<CooccurrenceTable> {
    if ctx.components() != 1 || ctx.window() != 1 {
        return Err(shape_err(format!(
            "co-occurrence reduction needs K = 1 and n = 1, got K = {} and n = {}",
            ctx.components(),
            ctx.window()
        )));
    }
    let l = ctx.labels();
    let costs = (0..l)
        .flat_map(|u| (0..l).map(move |v| (u, v)))
        .map(|(u, v)| ctx.get(0, u, 0, 0, v))
        .collect();
    CooccurrenceTable::new(l, costs)
}

/// Co-occurrence pairwise term over the m x m window:
/// `Σ_v μ(u,v) w_i^v Σ_{z ∈ N_i, z ≠ i} d(i,z) q_z^v`.
pub struct CooccurrencePairwise<'a> {
    pub table: &'a CooccurrenceTable,
    pub unary: &'a UnaryField,
    pub tw: TripleWindow,
    pub feats: &'a PixelFeatureGrid,
    pub dp: &'a DistanceParams,
    pub source: KernelSource,
}

impl PairwiseCost for CooccurrencePairwise<'_> {
    fn costs(&self, q: &MarginalField, y: usize, x: usize, out: &mut [f64]) {
        let (h, w, l) = (q.height(), q.width(), q.labels());
        let mut smooth = vec![0.0; l];
        for_window(y, x, self.tw.radius(), h, w, |_, _, zy, zx| {
            if (zy, zx) == (y, x) {
                return;
            }
            let d = distance(self.feats, (y, x), (zy, zx), self.dp);
            for (v, s) in smooth.iter_mut().enumerate() {
                *s += d * q.get(zy, zx, v);
            }
        });
        for (u, c) in out.iter_mut().enumerate() {
            *c = (0..l)
                .map(|v| {
                    let wv = match self.source {
                        KernelSource::FixedUnary => self.unary.get(y, x, v),
                        KernelSource::CurrentQ => q.get(y, x, v),
                    };
                    self.table.get(u, v) * wv * smooth[v]
                })
                .sum();
        }
    }
}

/// `q` initialized from the (clamped, renormalized) unary.
pub fn mf_init(unary: &UnaryField) -> MarginalField {
    MarginalField::from_unary(unary)
}

fn softmin_pixel(unary: &UnaryField, y: usize, x: usize, cost: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (u, o) in out.iter_mut().enumerate() {
        *o = -unary.phi(y, x, u) - cost[u];
        max = max.max(*o);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn blend(old: &[f64], new: &mut [f64], damping: f64) {
    if damping == 1.0 {
        return;
    }
    let mut s = 0.0;
    for (n, o) in new.iter_mut().zip(old) {
        *n = damping * *n + (1.0 - damping) * o;
        s += *n;
    }
    for n in new.iter_mut() {
        *n /= s;
    }
}

fn check_q(q: &MarginalField, unary: &UnaryField) -> Result<()> {
    if q.tensor().dims() != unary.tensor().dims() {
        return Err(shape_err(format!(
            "marginals {:?} and unary {:?} differ in shape",
            q.tensor().dims(),
            unary.tensor().dims()
        )));
    }
    Ok(())
}

/// One pass of the closed-form update under `schedule.order` and damping.
/// `schedule.iterations` is ignored here; see [`run_mf`].
pub fn mf_update_generic(
    q: &MarginalField,
    unary: &UnaryField,
    pairwise: &dyn PairwiseCost,
    schedule: &MfSchedule,
) -> Result<MarginalField> {
    schedule.validate()?;
    check_q(q, unary)?;
    let (h, w, l) = (q.height(), q.width(), q.labels());
    match schedule.order {
        UpdateOrder::Parallel => {
            let mut data = vec![0.0; h * w * l];
            let row = |(y, out_row): (usize, &mut [f64])| {
                let mut cost = vec![0.0; l];
                for (x, px) in out_row.chunks_exact_mut(l).enumerate() {
                    pairwise.costs(q, y, x, &mut cost);
                    softmin_pixel(unary, y, x, &cost, px);
                    blend(q.pixel(y, x), px, schedule.damping);
                }
            };
            #[cfg(feature = "parallel")]
            data.par_chunks_mut(w * l).enumerate().for_each(row);
            #[cfg(not(feature = "parallel"))]
            data.chunks_mut(w * l).enumerate().for_each(row);
            Ok(MarginalField(Tensor::new(vec![h, w, l], data)?))
        }
        UpdateOrder::SequentialRaster => {
            let mut cur = q.clone();
            let mut cost = vec![0.0; l];
            let mut px = vec![0.0; l];
            for y in 0..h {
                for x in 0..w {
                    pairwise.costs(&cur, y, x, &mut cost);
                    softmin_pixel(unary, y, x, &cost, &mut px);
                    blend(cur.pixel(y, x), &mut px, schedule.damping);
                    let o = (y * w + x) * l;
                    cur.0.data_mut()[o..o + l].copy_from_slice(&px);
                }
            }
            Ok(cur)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn mf_update_triple(
    q: &MarginalField,
    unary: &UnaryField,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    schedule: &MfSchedule,
    source: KernelSource,
) -> Result<MarginalField> {
    check_model_shapes(unary, feats, ctx)?;
    let pairwise = TriplePairwise {
        unary,
        ctx,
        tw,
        feats,
        dp,
        source,
    };
    mf_update_generic(q, unary, &pairwise, schedule)
}

#[allow(clippy::too_many_arguments)]
pub fn mf_update_cooccurrence(
    q: &MarginalField,
    unary: &UnaryField,
    table: &CooccurrenceTable,
    tw: TripleWindow,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    schedule: &MfSchedule,
    source: KernelSource,
) -> Result<MarginalField> {
    if table.labels() != unary.labels() {
        return Err(shape_err("co-occurrence table and unary differ in label count"));
    }
    if unary.height() != feats.height() || unary.width() != feats.width() {
        return Err(shape_err("unary and features differ in size"));
    }
    let pairwise = CooccurrencePairwise {
        table,
        unary,
        tw,
        feats,
        dp,
        source,
    };
    mf_update_generic(q, unary, &pairwise, schedule)
}

/// Result of [`run_mf`]: final marginals and the free energy after each pass.
#[derive(Debug, Clone)]
pub struct MfRun {
    pub marginals: MarginalField,
    pub free_energy: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_mf(
    q0: &MarginalField,
    unary: &UnaryField,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    schedule: &MfSchedule,
    source: KernelSource,
) -> Result<MfRun> {
    schedule.validate()?;
    let mut q = q0.clone();
    let mut trace = Vec::with_capacity(schedule.iterations);
    for _ in 0..schedule.iterations {
        q = mf_update_triple(&q, unary, ctx, tw, feats, dp, schedule, source)?;
        trace.push(free_energy(&q, unary, ctx, tw, feats, dp)?);
    }
    Ok(MfRun {
        marginals: q,
        free_energy: trace,
    })
}

/// Writes `iter,free_energy` lines, iterations numbered from 1.
pub fn write_trace_csv(trace: &[f64], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<trace>", e);
    writeln!(out, "iter,free_energy").map_err(io)?;
    for (i, f) in trace.iter().enumerate() {
        writeln!(out, "{},{:.17e}", i + 1, f).map_err(io)?;
    }
    Ok(())
}

/// Renormalizes an arbitrary non-negative field into marginals.
pub fn normalize_field(t: Tensor) -> Result<MarginalField> {
    let (_, _, l) = t.shape3()?;
    let mut data = t.clone().into_data();
    for px in data.chunks_exact_mut(l) {
        let s: f64 = px.iter().map(|v| v.max(PROB_EPS)).sum();
        for v in px.iter_mut() {
            *v = v.max(PROB_EPS) / s;
        }
    }
    Ok(MarginalField(Tensor::new(t.dims().to_vec(), data)?))
}
