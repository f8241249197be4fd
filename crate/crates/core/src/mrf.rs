//! The energy model: labels, pixel features, the pixel distance, unary and
//! pairwise terms, and the energy / free energy that mean field minimizes.
//!
//! Windows are clipped at image borders. Sums run over in-bounds pixels
//! only and are never renormalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::meanfield::MarginalField;
use crate::tensor::{LabelMap, Tensor};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace(usize);

impl LabelSpace {
    pub fn new(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(arg_err(format!("need at least 2 labels, got {l}")));
        }
        Ok(LabelSpace(l))
    }

    pub fn len(self) -> usize {
        self.0
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

/// Per-pixel integer intensities in `[0, 255]`. Pixel coordinates are implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureGrid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<u8>,
}

impl PixelFeatureGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(shape_err(format!(
                "feature grid {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(PixelFeatureGrid { h, w, c, data })
    }

    /// Accepts an H x W x C tensor whose values are integers in `[0, 255]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.shape3()?;
        let mut data = Vec::with_capacity(t.data().len());
        for &v in t.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(arg_err(format!(
                    "pixel intensity {v} is not an integer in [0, 255]"
                )));
            }
            data.push(v as u8);
        }
        PixelFeatureGrid::new(h, w, c, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.h, self.w, self.c], data).expect("grid dims are valid")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceParams {
    pub omega1: f64,
    pub omega2: f64,
}

impl DistanceParams {
    pub fn new(omega1: f64, omega2: f64) -> Result<Self> {
        let dp = DistanceParams { omega1, omega2 };
        dp.validate()?;
        Ok(dp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("omega1", self.omega1), ("omega2", self.omega2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(arg_err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn combine(&self, intensity_sq: f64, spatial_sq: f64) -> f64 {
        self.omega1 * intensity_sq + self.omega2 * spatial_sq
    }
}

#[inline]
pub fn intensity_sq(feats: &PixelFeatureGrid, a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut s = 0.0;
    for (&p, &q) in feats.pixel(a.0, a.1).iter().zip(feats.pixel(b.0, b.1)) {
        let d = p as f64 - q as f64;
        s += d * d;
    }
    s
}

#[inline]
pub fn spatial_sq(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    dy * dy + dx * dx
}

/// `omega1 * |I_a - I_b|^2 + omega2 * |pos_a - pos_b|^2`.
pub fn distance(
    feats: &PixelFeatureGrid,
    a: (usize, usize),
    b: (usize, usize),
    dp: &DistanceParams,
) -> f64 {
    dp.combine(intensity_sq(feats, a, b), spatial_sq(a, b))
}

/// Unary label probabilities, clamped to [`PROB_EPS`] and renormalized per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField(Tensor);

impl UnaryField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (h, w, l) = t.shape3()?;
        LabelSpace::new(l)?;
        if let Some(v) = t.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(arg_err(format!("unary probability {v} is negative or non-finite")));
        }
        let mut data = t.into_data();
        for px in data.chunks_exact_mut(l) {
            for v in px.iter_mut() {
                *v = v.max(PROB_EPS);
            }
            let s: f64 = px.iter().sum();
            for v in px.iter_mut() {
                *v /= s;
            }
        }
        Ok(UnaryField(Tensor::new(vec![h, w, l], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
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

    /// Unary cost `-ln p`.
    #[inline]
    pub fn phi(&self, y: usize, x: usize, u: usize) -> f64 {
        -self.get(y, x, u).max(PROB_EPS).ln()
    }

    pub fn argmax(&self) -> LabelMap {
        argmax_labels(&self.0)
    }
}

pub(crate) fn argmax_labels(t: &Tensor) -> LabelMap {
    let (h, w, l) = t.shape3().expect("rank-3 field");
    let labels = t
        .data()
        .chunks_exact(l)
        .map(|px| {
            let mut best = 0;
            for u in 1..l {
                if px[u] > px[best] {
                    best = u;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, labels).expect("dims come from a valid tensor")
}

/// K mixture components of offset-indexed label-context costs.
///
/// `cost(k, u, oy, ox, v)` is the penalty for label `u` at pixel `i` given
/// label `v` at `i + (oy - n/2, ox - n/2)` under component `k`. Storage is
/// component-major: `[K][l][n][n][l]`, which is also the DPT layout
/// `[K*l, n, n, l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFilterBank {
    k: usize,
    l: usize,
    n: usize,
    costs: Vec<f64>,
}

impl ContextFilterBank {
    pub fn new(k: usize, l: usize, n: usize, costs: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(arg_err("mixture size K must be >= 1"));
        }
        LabelSpace::new(l)?;
        if n % 2 == 0 {
            return Err(arg_err(format!("context window n must be odd, got {n}")));
        }
        if costs.len() != k * l * n * n * l {
            return Err(shape_err(format!(
                "context bank K={k} l={l} n={n} needs {} costs, got {}",
                k * l * n * n * l,
                costs.len()
            )));
        }
        if let Some(index) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ContextFilterBank { k, l, n, costs })
    }

    pub fn zeros(k: usize, l: usize, n: usize) -> Result<Self> {
        ContextFilterBank::new(k, l, n, vec![0.0; k * l * n * n * l])
    }

    /// Costs drawn uniformly from `[-scale, scale]`.
    pub fn random(k: usize, l: usize, n: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let costs = (0..k * l * n * n * l)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        ContextFilterBank::new(k, l, n, costs)
    }

    pub fn from_fn(
        k: usize,
        l: usize,
        n: usize,
        mut f: impl FnMut(usize, usize, isize, isize, usize) -> f64,
    ) -> Result<Self> {
        let r = (n / 2) as isize;
        let mut costs = Vec::with_capacity(k * l * n * n * l);
        for kk in 0..k {
            for u in 0..l {
                for oy in 0..n {
                    for ox in 0..n {
                        for v in 0..l {
                            costs.push(f(kk, u, oy as isize - r, ox as isize - r, v));
                        }
                    }
                }
            }
        }
        ContextFilterBank::new(k, l, n, costs)
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> usize {
        self.l
    }

    pub fn window(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> usize {
        self.n / 2
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub(crate) fn costs_mut(&mut self) -> &mut [f64] {
        &mut self.costs
    }

    #[inline]
    pub fn index(&self, k: usize, u: usize, oy: usize, ox: usize, v: usize) -> usize {
        (((k * self.l + u) * self.n + oy) * self.n + ox) * self.l + v
    }

    #[inline]
    pub fn get(&self, k: usize, u: usize, oy: usize, ox: usize, v: usize) -> f64 {
        self.costs[self.index(k, u, oy, ox, v)]
    }

    pub fn is_zero(&self) -> bool {
        self.costs.iter().all(|&c| c == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k * self.l, self.n, self.n, self.l], self.costs.clone())
            .expect("bank dims are valid")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); `k` disambiguates the leading axis.
    pub fn from_tensor(t: &Tensor, k: usize) -> Result<Self> {
        let d = t.dims();
        if d.len() != 4 || d[1] != d[2] || k == 0 || d[0] % k != 0 || d[0] / k != d[3] {
            return Err(shape_err(format!(
                "context bank tensor must be [K*l, n, n, l] with K={k}, got {d:?}"
            )));
        }
        ContextFilterBank::new(k, d[3], d[1], t.data().to_vec())
    }
}

/// Odd neighborhood extent `m` of the triple penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleWindow(usize);

impl TripleWindow {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m % 2 == 0 {
            return Err(arg_err(format!("triple window m must be odd and >= 1, got {m}")));
        }
        Ok(TripleWindow(m))
    }

    pub fn extent(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

/// Visits the in-bounds pixels of the `(2r+1)^2` window centered at
/// `(y, x)` in raster order, passing `(oy, ox, yy, xx)` where `oy, ox` are
/// the window offsets shifted into `0..2r+1`.
#[inline]
pub(crate) fn for_window(
    y: usize,
    x: usize,
    r: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let n = 2 * r + 1;
    for oy in 0..n {
        let yy = y as isize + oy as isize - r as isize;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for ox in 0..n {
            let xx = x as isize + ox as isize - r as isize;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            f(oy, ox, yy as usize, xx as usize);
        }
    }
}

/// Checks that unary, features, and context bank describe the same grid and labels.
pub(crate) fn check_model_shapes(
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    ctx: &ContextFilterBank,
) -> Result<()> {
    if unary.height() != feats.height() || unary.width() != feats.width() {
        return Err(shape_err(format!(
            "unary is {}x{} but features are {}x{}",
            unary.height(),
            unary.width(),
            feats.height(),
            feats.width()
        )));
    }
    if ctx.labels() != unary.labels() {
        return Err(shape_err(format!(
            "context bank has {} labels, unary has {}",
            ctx.labels(),
            unary.labels()
        )));
    }
    Ok(())
}

/// `T(j, v) = sum_{z in N_j} d(j, z) p_z^v`, the triple factor of the pairwise term.
fn triple_factor(
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    tw: TripleWindow,
) -> Vec<f64> {
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    let mut out = vec![0.0; h * w * l];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * l;
            for_window(y, x, tw.radius(), h, w, |_, _, zy, zx| {
                let d = distance(feats, (y, x), (zy, zx), dp);
                for v in 0..l {
                    out[o + v] += d * unary.get(zy, zx, v);
                }
            });
        }
    }
    out
}

/// Energy of a labeling: unary costs plus, per pixel, the cheapest mixture
/// component's summed context cost over its n x n window.
pub fn energy(
    labeling: &LabelMap,
    unary: &UnaryField,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
) -> Result<f64> {
    check_model_shapes(unary, feats, ctx)?;
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    if labeling.height() != h || labeling.width() != w {
        return Err(shape_err("labeling and unary differ in size"));
    }
    labeling.check_range(l, None)?;
    let t = triple_factor(unary, feats, dp, tw);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let u = labeling.get(y, x);
            total += unary.phi(y, x, u);
            let mut best = f64::INFINITY;
            for k in 0..ctx.components() {
                let mut s = 0.0;
                for_window(y, x, ctx.radius(), h, w, |oy, ox, jy, jx| {
                    let v = labeling.get(jy, jx);
                    s += ctx.get(k, u, oy, ox, v) * t[(jy * w + jx) * l + v];
                });
                best = best.min(s);
            }
            total += best;
        }
    }
    Ok(total)
}

/// Variational free energy of a factorized distribution `q`:
/// expected unary cost, expected pairwise cost (cheapest component per
/// pixel and label), and negative entropy.
pub fn free_energy(
    q: &MarginalField,
    unary: &UnaryField,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
) -> Result<f64> {
    check_model_shapes(unary, feats, ctx)?;
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    if q.tensor().dims() != unary.tensor().dims() {
        return Err(shape_err("marginals and unary differ in shape"));
    }
    let t = triple_factor(unary, feats, dp, tw);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for u in 0..l {
                let qu = q.get(y, x, u);
                let mut best = f64::INFINITY;
                for k in 0..ctx.components() {
                    let mut s = 0.0;
                    for_window(y, x, ctx.radius(), h, w, |oy, ox, jy, jx| {
                        for v in 0..l {
                            let tv = t[(jy * w + jx) * l + v];
                            s += q.get(jy, jx, v) * ctx.get(k, u, oy, ox, v) * tv;
                        }
                    });
                    best = best.min(s);
                }
                total += qu * (unary.phi(y, x, u) + best) + qu * qu.max(PROB_EPS).ln();
            }
        }
    }
    Ok(total)
}
