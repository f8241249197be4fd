//! Dense row-major tensors, the DPT container format, and bilinear resizing.
//!
//! DPT layout (all integers little-endian):
//!
//! ```text
//! "DPT1" 00 00 00 00 | rank: u8 | rank x extent: u32 | payload: f64 x prod(extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};

pub const MAGIC: [u8; 8] = *b"DPT1\0\0\0\0";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_dims(&dims)?;
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape_err(format!(
                "dims {:?} hold {} values, got {}",
                dims,
                len,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, vec![0.0; len])
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, vec![value; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Interprets the tensor as H x W x C. Rank-2 tensors are read as C = 1.
    pub fn shape3(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            d => Err(shape_err(format!("expected an H x W x C tensor, got dims {d:?}"))),
        }
    }

    #[inline]
    pub fn get3(&self, y: usize, x: usize, c: usize) -> f64 {
        let w = self.dims[1];
        let cs = if self.dims.len() > 2 { self.dims[2] } else { 1 };
        self.data[(y * w + x) * cs + c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err(format!(
                "cannot compare dims {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut out = Vec::with_capacity(9 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::InvalidDims(self.dims.clone()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rank = bytes[8] as usize;
        let header = 9 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::PayloadMismatch {
                expected: 0,
                found: 0,
            });
        }
        let dims: Vec<usize> = bytes[9..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        validate_dims(&dims)?;
        let expected: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != expected * 8 {
            return Err(Error::PayloadMismatch {
                expected,
                found: payload.len(),
            });
        }
        let mut data = Vec::with_capacity(expected);
        for (index, c) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]);
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(v);
        }
        Ok(Tensor { dims, data })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK || dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// A per-pixel label assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 || labels.len() != h * w {
            return Err(shape_err(format!(
                "label map {h}x{w} needs {} entries, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: usize) -> Result<Self> {
        LabelMap::new(h, w, vec![label; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: usize) {
        self.labels[y * self.w + x] = label;
    }

    /// Fails if any label is `>= l`, except pixels equal to `ignore`.
    pub fn check_range(&self, l: usize, ignore: Option<usize>) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&v| v >= l && Some(v) != ignore)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, labels: l }),
            None => Ok(()),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.shape3()?;
        if c != 1 {
            return Err(shape_err(format!("label map must have one channel, got {c}")));
        }
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!(
                    "label map value {v} is not a non-negative integer"
                )));
            }
            labels.push(v as usize);
        }
        LabelMap::new(h, w, labels)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.labels.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.h, self.w, 1], data).expect("label map dims are valid")
    }
}

/// Corner-aligned bilinear resampling of an H x W x C tensor, channel by channel.
pub fn bilinear_resize(t: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size {new_h}x{new_w} must be at least 1x1"
        )));
    }
    let (h, w, c) = t.shape3()?;
    let axis = |src: usize, dst: usize, i: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for oy in 0..new_h {
        let (y0, y1, fy) = axis(h, new_h, oy);
        for ox in 0..new_w {
            let (x0, x1, fx) = axis(w, new_w, ox);
            for ch in 0..c {
                let top = t.get3(y0, x0, ch) * (1.0 - fx) + t.get3(y0, x1, ch) * fx;
                let bottom = t.get3(y1, x0, ch) * (1.0 - fx) + t.get3(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}
