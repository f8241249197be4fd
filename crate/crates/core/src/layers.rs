//! The smoothing head: a locally-connected triple-penalty filter (b12), a
//! label-context convolution (b13), block min pooling over mixture
//! components (b14), and the softmax combination with the unary (b15).
//!
//! With `a = 1, b = 0` the stack computes exactly one parallel mean-field
//! step with kernels frozen at the unary.

use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Result};
use crate::meanfield::MarginalField;
use crate::mrf::{
    check_model_shapes, distance, for_window, ContextFilterBank, DistanceParams,
    PixelFeatureGrid, TripleWindow, UnaryField,
};
use crate::tensor::{write_tensor, Tensor};

/// `lin(x) = a * x + b`, applied to the b12 output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearActivation {
    pub a: f64,
    pub b: f64,
}

impl Default for LinearActivation {
    fn default() -> Self {
        LinearActivation { a: 1.0, b: 0.0 }
    }
}

impl LinearActivation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

/// Per-position m x m kernels `k_(j,v)[z] = d(j, z) * p_j^v`.
///
/// The spatial factor `d(j, z)` is stored once per position and shared by
/// every label channel; out-of-bounds taps are stored as zero and skipped.
#[derive(Debug, Clone)]
pub struct TriplePenaltyKernelField {
    h: usize,
    w: usize,
    l: usize,
    m: usize,
    dist: Vec<f64>,
    weights: Tensor,
    pub activation: LinearActivation,
}

impl TriplePenaltyKernelField {
    pub fn extent(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn spatial(&self, y: usize, x: usize, ky: usize, kx: usize) -> f64 {
        self.dist[((y * self.w + x) * self.m + ky) * self.m + kx]
    }

    /// Kernel element at window offset `(ky, kx)` of position `(y, x)`, channel `v`.
    #[inline]
    pub fn element(&self, y: usize, x: usize, v: usize, ky: usize, kx: usize) -> f64 {
        self.spatial(y, x, ky, kx) * self.weights.get3(y, x, v)
    }
}

pub fn build_triple_kernels(
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    tw: TripleWindow,
) -> Result<TriplePenaltyKernelField> {
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    if feats.height() != h || feats.width() != w {
        return Err(shape_err("unary and features differ in size"));
    }
    dp.validate()?;
    let m = tw.extent();
    let mut dist = vec![0.0; h * w * m * m];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * m * m;
            for_window(y, x, tw.radius(), h, w, |ky, kx, zy, zx| {
                dist[base + ky * m + kx] = distance(feats, (y, x), (zy, zx), dp);
            });
        }
    }
    Ok(TriplePenaltyKernelField {
        h,
        w,
        l,
        m,
        dist,
        weights: unary.tensor().clone(),
        activation: LinearActivation::default(),
    })
}

#[cfg(feature = "parallel")]
fn for_each_row(data: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
}

#[cfg(not(feature = "parallel"))]
fn for_each_row(data: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64])) {
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
}

/// Locally-connected filtering: `o12(j,v) = a * Σ_z k_(j,v)[z] q_z^v + b`.
pub fn lconv_b12(q: &MarginalField, kernels: &TriplePenaltyKernelField) -> Result<Tensor> {
    let (h, w, l, m) = (kernels.h, kernels.w, kernels.l, kernels.m);
    if q.tensor().dims() != [h, w, l] {
        return Err(shape_err(format!(
            "b12 input {:?} does not match kernels for {h}x{w}x{l}",
            q.tensor().dims()
        )));
    }
    let r = m / 2;
    let act = kernels.activation;
    let mut out = vec![0.0; h * w * l];
    for_each_row(&mut out, w * l, |y, row| {
        for x in 0..w {
            for v in 0..l {
                let mut acc = 0.0;
                for_window(y, x, r, h, w, |ky, kx, zy, zx| {
                    acc += kernels.element(y, x, v, ky, kx) * q.get(zy, zx, v);
                });
                row[x * l + v] = act.apply(acc);
            }
        }
    });
    Tensor::new(vec![h, w, l], out)
}

/// Squared intensity differences for every pair of 8-bit values.
pub struct IntensityLut(Vec<f64>);

impl IntensityLut {
    pub fn new() -> Self {
        let mut t = Vec::with_capacity(256 * 256);
        for a in 0..256 {
            for b in 0..256 {
                let d = a as f64 - b as f64;
                t.push(d * d);
            }
        }
        IntensityLut(t)
    }

    #[inline]
    pub fn get(&self, a: u8, b: u8) -> f64 {
        self.0[(a as usize) << 8 | b as usize]
    }
}

impl Default for IntensityLut {
    fn default() -> Self {
        Self::new()
    }
}

/// b12 with kernel coefficients looked up on the fly instead of stored.
///
/// Intensity distances come from a 256 x 256 table and spatial distances
/// from a per-offset table; the summation order matches [`lconv_b12`] so
/// the outputs are bitwise identical.
pub fn lconv_b12_lut(
    q: &MarginalField,
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    tw: TripleWindow,
    activation: LinearActivation,
) -> Result<Tensor> {
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    if feats.height() != h || feats.width() != w || q.tensor().dims() != unary.tensor().dims() {
        return Err(shape_err("b12 inputs differ in shape"));
    }
    dp.validate()?;
    let lut = IntensityLut::new();
    let m = tw.extent();
    let r = tw.radius();
    let spatial: Vec<f64> = (0..m * m)
        .map(|i| {
            let dy = (i / m) as f64 - r as f64;
            let dx = (i % m) as f64 - r as f64;
            dy * dy + dx * dx
        })
        .collect();
    let mut out = vec![0.0; h * w * l];
    for_each_row(&mut out, w * l, |y, row| {
        let mut coeff = vec![0.0; m * m];
        for x in 0..w {
            let center = feats.pixel(y, x);
            for_window(y, x, r, h, w, |ky, kx, zy, zx| {
                let mut s1 = 0.0;
                for (&a, &b) in center.iter().zip(feats.pixel(zy, zx)) {
                    s1 += lut.get(a, b);
                }
                coeff[ky * m + kx] = dp.combine(s1, spatial[ky * m + kx]);
            });
            for v in 0..l {
                let pj = unary.get(y, x, v);
                let mut acc = 0.0;
                for_window(y, x, r, h, w, |ky, kx, zy, zx| {
                    acc += coeff[ky * m + kx] * pj * q.get(zy, zx, v);
                });
                row[x * l + v] = activation.apply(acc);
            }
        }
    });
    Tensor::new(vec![h, w, l], out)
}

/// Label-context convolution with zero padding. Output channel `u * K + k`
/// holds `Σ_offset Σ_v μ_k(u, offset, v) o12(i + offset, v)`.
pub fn context_conv_b13(o12: &Tensor, ctx: &ContextFilterBank) -> Result<Tensor> {
    let (h, w, l) = o12.shape3()?;
    if l != ctx.labels() {
        return Err(shape_err(format!(
            "b13 input has {l} channels, context bank expects {}",
            ctx.labels()
        )));
    }
    let k = ctx.components();
    let n = ctx.window();
    let r = ctx.radius();
    let oc = l * k;
    let mut out = vec![0.0; h * w * oc];
    for_each_row(&mut out, w * oc, |y, row| {
        for x in 0..w {
            let px = &mut row[x * oc..(x + 1) * oc];
            for u in 0..l {
                for kk in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..n {
                        let jy = y as isize + oy as isize - r as isize;
                        if jy < 0 || jy >= h as isize {
                            continue;
                        }
                        for ox in 0..n {
                            let jx = x as isize + ox as isize - r as isize;
                            if jx < 0 || jx >= w as isize {
                                continue;
                            }
                            for v in 0..l {
                                acc += ctx.get(kk, u, oy, ox, v)
                                    * o12.get3(jy as usize, jx as usize, v);
                            }
                        }
                    }
                    px[u * k + kk] = acc;
                }
            }
        }
    });
    Tensor::new(vec![h, w, oc], out)
}

/// Minimum over each contiguous block of `k` channels, with the winning
/// component index per (pixel, block). Ties go to the lowest index.
pub fn block_argmin_b14(o13: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = o13.shape3()?;
    if k == 0 || c % k != 0 {
        return Err(arg_err(format!(
            "{c} channels cannot be pooled in blocks of {k}"
        )));
    }
    let l = c / k;
    let mut out = Vec::with_capacity(h * w * l);
    let mut arg = Vec::with_capacity(h * w * l);
    for block in o13.data().chunks_exact(k) {
        let mut best = 0;
        for (i, &v) in block.iter().enumerate().skip(1) {
            if v < block[best] {
                best = i;
            }
        }
        out.push(block[best]);
        arg.push(best);
    }
    Ok((Tensor::new(vec![h, w, l], out)?, arg))
}

pub fn block_min_b14(o13: &Tensor, k: usize) -> Result<Tensor> {
    block_argmin_b14(o13, k).map(|(t, _)| t)
}

/// `o15(i,u) = softmax_u(ln o11(i,u) - o14(i,u))`.
pub fn combine_b15(unary: &UnaryField, o14: &Tensor) -> Result<MarginalField> {
    if unary.tensor().dims() != o14.dims() {
        return Err(shape_err(format!(
            "b15 inputs differ: unary {:?}, o14 {:?}",
            unary.tensor().dims(),
            o14.dims()
        )));
    }
    let l = unary.labels();
    let mut data = Vec::with_capacity(o14.data().len());
    for (p, c) in unary
        .tensor()
        .data()
        .chunks_exact(l)
        .zip(o14.data().chunks_exact(l))
    {
        let start = data.len();
        let mut max = f64::NEG_INFINITY;
        for u in 0..l {
            let z = p[u].ln() - c[u];
            max = max.max(z);
            data.push(z);
        }
        let px = &mut data[start..];
        let mut s = 0.0;
        for z in px.iter_mut() {
            *z = (*z - max).exp();
            s += *z;
        }
        for z in px.iter_mut() {
            *z /= s;
        }
    }
    Ok(MarginalField::from_tensor_unchecked(Tensor::new(
        o14.dims().to_vec(),
        data,
    )?))
}

#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub o11: Tensor,
    pub o12: Tensor,
    pub o13: Tensor,
    pub o14: Tensor,
    pub o15: MarginalField,
    /// Winning mixture component per (pixel, label) in b14.
    pub argmin: Vec<usize>,
}

impl LayerActivations {
    /// Writes `o11.dpt` .. `o15.dpt` into `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        write_tensor(&self.o11, dir.join("o11.dpt"))?;
        write_tensor(&self.o12, dir.join("o12.dpt"))?;
        write_tensor(&self.o13, dir.join("o13.dpt"))?;
        write_tensor(&self.o14, dir.join("o14.dpt"))?;
        write_tensor(self.o15.tensor(), dir.join("o15.dpt"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum B12Path {
    /// Materialize the kernel field, then filter.
    #[default]
    Direct,
    /// Look kernel coefficients up from the intensity table.
    Lut,
}

pub fn dpn_forward(
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    activation: LinearActivation,
) -> Result<LayerActivations> {
    dpn_forward_with(unary, feats, dp, ctx, tw, activation, B12Path::Direct)
}

pub fn dpn_forward_with(
    unary: &UnaryField,
    feats: &PixelFeatureGrid,
    dp: &DistanceParams,
    ctx: &ContextFilterBank,
    tw: TripleWindow,
    activation: LinearActivation,
    path: B12Path,
) -> Result<LayerActivations> {
    check_model_shapes(unary, feats, ctx)?;
    let o11 = MarginalField::from_unary(unary);
    let o12 = match path {
        B12Path::Direct => {
            let mut kernels = build_triple_kernels(unary, feats, dp, tw)?;
            kernels.activation = activation;
            lconv_b12(&o11, &kernels)?
        }
        B12Path::Lut => lconv_b12_lut(&o11, unary, feats, dp, tw, activation)?,
    };
    let o13 = context_conv_b13(&o12, ctx)?;
    let (o14, argmin) = block_argmin_b14(&o13, ctx.components())?;
    let o15 = combine_b15(unary, &o14)?;
    Ok(LayerActivations {
        o11: o11.into_tensor(),
        o12,
        o13,
        o14,
        o15,
        argmin,
    })
}
