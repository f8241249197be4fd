//! Synthetic labeled scenes: rectangles on a background, optional planted
//! spatial contexts between label pairs, and corrupted unaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::mrf::{PixelFeatureGrid, UnaryField};
use crate::tensor::{read_tensor, write_tensor, LabelMap, Tensor};

/// Whenever `anchor` is drawn, a same-sized `partner` rectangle is drawn at
/// the anchor's corner shifted by `(dy, dx)`; the anchor is painted on top.
/// Partners never appear on their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextRule {
    pub anchor: usize,
    pub partner: usize,
    pub dy: isize,
    pub dx: isize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub channels: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub rules: Vec<ContextRule>,
    /// Probability that a pixel's unary peaks on a wrong label.
    pub flip_rate: f64,
    /// Box-blur radius applied to the unary.
    pub blur: usize,
    /// Unary mass on the (possibly flipped) peak label.
    pub confidence: f64,
    /// Intensities are `base(label) ± noise`, uniformly.
    pub intensity_noise: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            labels: 3,
            channels: 3,
            objects_min: 1,
            objects_max: 3,
            size_min: 6,
            size_max: 12,
            rules: Vec::new(),
            flip_rate: 0.0,
            blur: 0,
            confidence: 0.8,
            intensity_noise: 10,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels < 2 {
            return Err(arg_err("a scene needs at least 2 labels"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(arg_err("scene dimensions must be positive"));
        }
        if self.objects_min > self.objects_max {
            return Err(arg_err("objects_min exceeds objects_max"));
        }
        if self.size_min == 0
            || self.size_min > self.size_max
            || self.size_max > self.height.min(self.width)
        {
            return Err(arg_err(format!(
                "object sizes {}..={} do not fit a {}x{} scene",
                self.size_min, self.size_max, self.height, self.width
            )));
        }
        for r in &self.rules {
            for lab in [r.anchor, r.partner] {
                if lab == 0 || lab >= self.labels {
                    return Err(Error::LabelOutOfRange {
                        label: lab,
                        labels: self.labels,
                    });
                }
            }
            if r.anchor == r.partner {
                return Err(arg_err("a context rule cannot pair a label with itself"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(arg_err("flip_rate must lie in [0, 1]"));
        }
        if !(self.confidence > 1.0 / self.labels as f64 && self.confidence <= 1.0) {
            return Err(arg_err(format!(
                "confidence must lie in (1/{}, 1]",
                self.labels
            )));
        }
        if self.free_labels().is_empty() {
            return Err(arg_err("every object label is a context partner"));
        }
        Ok(())
    }

    /// Labels that may be drawn directly (not background, not a partner).
    fn free_labels(&self) -> Vec<usize> {
        (1..self.labels)
            .filter(|l| !self.rules.iter().any(|r| r.partner == *l))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment. Rules are written
    /// `context = anchor:partner:dy,dx`, several separated by `;`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what} '{value}'", lineno + 1));
            let int = || value.parse::<usize>().map_err(|_| bad(key));
            match key {
                "height" => spec.height = int()?,
                "width" => spec.width = int()?,
                "labels" => spec.labels = int()?,
                "channels" => spec.channels = int()?,
                "objects_min" => spec.objects_min = int()?,
                "objects_max" => spec.objects_max = int()?,
                "size_min" => spec.size_min = int()?,
                "size_max" => spec.size_max = int()?,
                "blur" => spec.blur = int()?,
                "flip_rate" => spec.flip_rate = value.parse().map_err(|_| bad(key))?,
                "confidence" => spec.confidence = value.parse().map_err(|_| bad(key))?,
                "intensity_noise" => spec.intensity_noise = value.parse().map_err(|_| bad(key))?,
                "context" => {
                    spec.rules.clear();
                    for rule in value.split(';').map(str::trim).filter(|r| !r.is_empty()) {
                        spec.rules.push(parse_rule(rule).ok_or_else(|| bad("context rule"))?);
                    }
                }
                _ => return Err(Error::Parse(format!("line {}: unknown key '{key}'", lineno + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "labels = {}", self.labels);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "objects_min = {}", self.objects_min);
        let _ = writeln!(s, "objects_max = {}", self.objects_max);
        let _ = writeln!(s, "size_min = {}", self.size_min);
        let _ = writeln!(s, "size_max = {}", self.size_max);
        let _ = writeln!(s, "flip_rate = {}", self.flip_rate);
        let _ = writeln!(s, "blur = {}", self.blur);
        let _ = writeln!(s, "confidence = {}", self.confidence);
        let _ = writeln!(s, "intensity_noise = {}", self.intensity_noise);
        let rules: Vec<String> = self
            .rules
            .iter()
            .map(|r| format!("{}:{}:{},{}", r.anchor, r.partner, r.dy, r.dx))
            .collect();
        let _ = writeln!(s, "context = {}", rules.join("; "));
        s
    }
}

fn parse_rule(s: &str) -> Option<ContextRule> {
    let mut parts = s.split(':');
    let anchor = parts.next()?.trim().parse().ok()?;
    let partner = parts.next()?.trim().parse().ok()?;
    let (dy, dx) = parts.next()?.split_once(',')?;
    if parts.next().is_some() {
        return None;
    }
    Some(ContextRule {
        anchor,
        partner,
        dy: dy.trim().parse().ok()?,
        dx: dx.trim().parse().ok()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub unary: UnaryField,
    pub feats: PixelFeatureGrid,
    pub gt: LabelMap,
}

/// The scene used to check that learned contexts beat the unary: label 2
/// only ever appears as a band under label 1, and a third of the unary
/// pixels peak on a wrong label.
pub fn planted_context_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        labels: 3,
        channels: 3,
        objects_min: 1,
        objects_max: 3,
        size_min: 6,
        size_max: 10,
        rules: vec![ContextRule {
            anchor: 1,
            partner: 2,
            dy: 5,
            dx: 0,
        }],
        flip_rate: 0.35,
        blur: 0,
        confidence: 0.6,
        intensity_noise: 40,
    }
}

fn paint(gt: &mut LabelMap, y0: isize, x0: isize, hh: usize, ww: usize, label: usize) {
    let (h, w) = (gt.height() as isize, gt.width() as isize);
    for y in y0.max(0)..(y0 + hh as isize).min(h) {
        for x in x0.max(0)..(x0 + ww as isize).min(w) {
            gt.set(y as usize, x as usize, label);
        }
    }
}

fn base_intensity(label: usize, labels: usize) -> f64 {
    30.0 + 190.0 * label as f64 / (labels - 1) as f64
}

fn generate_one(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (h, w, l) = (spec.height, spec.width, spec.labels);
    let mut gt = LabelMap::filled(h, w, 0)?;
    let free = spec.free_labels();
    let objects = rng.gen_range(spec.objects_min..=spec.objects_max);
    for _ in 0..objects {
        let label = free[rng.gen_range(0..free.len())];
        let hh = rng.gen_range(spec.size_min..=spec.size_max);
        let ww = rng.gen_range(spec.size_min..=spec.size_max);
        let y0 = rng.gen_range(0..=h - hh) as isize;
        let x0 = rng.gen_range(0..=w - ww) as isize;
        for r in spec.rules.iter().filter(|r| r.anchor == label) {
            paint(&mut gt, y0 + r.dy, x0 + r.dx, hh, ww, r.partner);
        }
        paint(&mut gt, y0, x0, hh, ww, label);
    }

    let noise = spec.intensity_noise as i32;
    let mut feats = Vec::with_capacity(h * w * spec.channels);
    for &label in gt.labels() {
        let base = base_intensity(label, l);
        for _ in 0..spec.channels {
            let jitter = if noise > 0 {
                rng.gen_range(-noise..=noise)
            } else {
                0
            };
            feats.push((base as i32 + jitter).clamp(0, 255) as u8);
        }
    }

    let off = (1.0 - spec.confidence) / (l - 1) as f64;
    let mut probs = Vec::with_capacity(h * w * l);
    for &label in gt.labels() {
        let peak = if spec.flip_rate > 0.0 && rng.gen_bool(spec.flip_rate) {
            let other = rng.gen_range(0..l - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        } else {
            label
        };
        probs.extend((0..l).map(|u| if u == peak { spec.confidence } else { off }));
    }
    if spec.blur > 0 {
        probs = box_blur(&probs, h, w, l, spec.blur);
    }
    Ok(Instance {
        unary: UnaryField::new(Tensor::new(vec![h, w, l], probs)?)?,
        feats: PixelFeatureGrid::new(h, w, spec.channels, feats)?,
        gt,
    })
}

fn box_blur(p: &[f64], h: usize, w: usize, l: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0.0;
            let o = (y * w + x) * l;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let i = (yy * w + xx) * l;
                    for u in 0..l {
                        out[o + u] += p[i + u];
                    }
                    n += 1.0;
                }
            }
            for u in 0..l {
                out[o + u] /= n;
            }
        }
    }
    out
}

/// `count` scenes; scene `i` depends only on `(spec, seed, i)`.
pub fn gen_synthetic(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<Instance>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(spec, &mut rng)
        })
        .collect()
}

pub fn instance_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("{index:04}_unary.dpt")),
        dir.join(format!("{index:04}_features.dpt")),
        dir.join(format!("{index:04}_gt.dpt")),
    ]
}

pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[Instance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, inst) in corpus.iter().enumerate() {
        let [u, f, g] = instance_paths(dir, i);
        write_tensor(inst.unary.tensor(), u)?;
        write_tensor(&inst.feats.to_tensor(), f)?;
        write_tensor(&inst.gt.to_tensor(), g)?;
    }
    Ok(())
}

/// Reads `NNNN_{unary,features,gt}.dpt` triples for consecutive indices from 0.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    loop {
        let [u, f, g] = instance_paths(dir, out.len());
        if !u.exists() {
            break;
        }
        out.push(Instance {
            unary: UnaryField::new(read_tensor(&u)?)?,
            feats: PixelFeatureGrid::from_tensor(&read_tensor(&f)?)?,
            gt: LabelMap::from_tensor(&read_tensor(&g)?)?,
        });
    }
    if out.is_empty() {
        return Err(arg_err(format!("{} holds no corpus instances", dir.display())));
    }
    Ok(out)
}
