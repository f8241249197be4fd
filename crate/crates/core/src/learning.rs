//! Pixelwise softmax loss, analytic gradients of the smoothing head, and the
//! staged training driver.
//!
//! Learnable parameters are the distance weights `omega1, omega2`, the b12
//! activation `a, b`, and the context bank `μ`. The b12 kernels themselves
//! are never updated; they only move through `omega1` and `omega2`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::layers::{dpn_forward, LayerActivations, LinearActivation};
use crate::meanfield::MarginalField;
use crate::mrf::{
    for_window, intensity_sq, spatial_sq, ContextFilterBank, DistanceParams, TripleWindow,
    PROB_EPS,
};
use crate::synth::Instance;
use crate::tensor::{read_tensor, write_tensor, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Validation pass over the given unaries; nothing is learned.
    UnaryPassthrough,
    /// Distance weights only.
    Triple,
    /// Context bank only.
    Context,
    /// Everything.
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::UnaryPassthrough,
        Stage::Triple,
        Stage::Context,
        Stage::Joint,
    ];

    pub fn live(self) -> LiveMask {
        match self {
            Stage::UnaryPassthrough => LiveMask::default(),
            Stage::Triple => LiveMask {
                omega: true,
                ..Default::default()
            },
            Stage::Context => LiveMask {
                context: true,
                ..Default::default()
            },
            Stage::Joint => LiveMask {
                omega: true,
                activation: true,
                context: true,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::UnaryPassthrough => "unary-passthrough",
            Stage::Triple => "triple",
            Stage::Context => "context",
            Stage::Joint => "joint",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveMask {
    pub omega: bool,
    pub activation: bool,
    pub context: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub dp: DistanceParams,
    pub activation: LinearActivation,
    pub ctx: ContextFilterBank,
    pub tw: TripleWindow,
}

impl ParamSet {
    pub fn labels(&self) -> usize {
        self.ctx.labels()
    }

    pub fn forward(&self, inst: &Instance) -> Result<LayerActivations> {
        dpn_forward(
            &inst.unary,
            &inst.feats,
            &self.dp,
            &self.ctx,
            self.tw,
            self.activation,
        )
    }

    /// Writes `mu.dpt` and `params.meta` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(&self.ctx.to_tensor(), dir.join("mu.dpt"))?;
        let meta = format!(
            "omega1={:?}\nomega2={:?}\na={:?}\nb={:?}\nK={}\nn={}\nm={}\nl={}\n",
            self.dp.omega1,
            self.dp.omega2,
            self.activation.a,
            self.activation.b,
            self.ctx.components(),
            self.ctx.window(),
            self.tw.extent(),
            self.ctx.labels()
        );
        let path = dir.join("params.meta");
        fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("params.meta");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta = parse_key_values(&text)?;
        let get = |k: &str| -> Result<&str> {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Parse(format!("params.meta lacks '{k}'")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("params.meta: bad value for '{k}'")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("params.meta: bad value for '{k}'")))
        };
        let ctx = ContextFilterBank::from_tensor(&read_tensor(dir.join("mu.dpt"))?, int("K")?)?;
        if ctx.window() != int("n")? || ctx.labels() != int("l")? {
            return Err(shape_err("mu.dpt disagrees with params.meta"));
        }
        Ok(ParamSet {
            dp: DistanceParams::new(float("omega1")?, float("omega2")?)?,
            activation: LinearActivation {
                a: float("a")?,
                b: float("b")?,
            },
            ctx,
            tw: TripleWindow::new(int("m")?)?,
        })
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Mean over non-ignored pixels of `-ln o15(i, gt_i)`, clamped at [`PROB_EPS`].
pub fn pixelwise_loss(o15: &MarginalField, gt: &LabelMap, ignore: Option<usize>) -> Result<f64> {
    if o15.height() != gt.height() || o15.width() != gt.width() {
        return Err(shape_err("prediction and ground truth differ in size"));
    }
    gt.check_range(o15.labels(), ignore)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let g = gt.get(y, x);
            if Some(g) == ignore {
                continue;
            }
            total -= o15.get(y, x, g).max(PROB_EPS).ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub omega1: f64,
    pub omega2: f64,
    pub a: f64,
    pub b: f64,
    pub mu: Vec<f64>,
}

impl Gradient {
    fn zeros(mu_len: usize) -> Self {
        Gradient {
            omega1: 0.0,
            omega2: 0.0,
            a: 0.0,
            b: 0.0,
            mu: vec![0.0; mu_len],
        }
    }

    fn add(&mut self, o: &Gradient) {
        self.omega1 += o.omega1;
        self.omega2 += o.omega2;
        self.a += o.a;
        self.b += o.b;
        for (m, g) in self.mu.iter_mut().zip(&o.mu) {
            *m += g;
        }
    }

    fn mask(&mut self, live: LiveMask) {
        if !live.omega {
            self.omega1 = 0.0;
            self.omega2 = 0.0;
        }
        if !live.activation {
            self.a = 0.0;
            self.b = 0.0;
        }
        if !live.context {
            self.mu.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

fn check_instance(params: &ParamSet, inst: &Instance) -> Result<()> {
    if inst.unary.labels() != params.labels() {
        return Err(shape_err(format!(
            "instance has {} labels, parameters expect {}",
            inst.unary.labels(),
            params.labels()
        )));
    }
    if inst.gt.height() != inst.unary.height() || inst.gt.width() != inst.unary.width() {
        return Err(shape_err("ground truth and unary differ in size"));
    }
    Ok(())
}

/// Loss of one instance and its gradient with respect to every parameter.
fn instance_gradient(
    params: &ParamSet,
    inst: &Instance,
    ignore: Option<usize>,
) -> Result<(f64, Gradient)> {
    check_instance(params, inst)?;
    let acts = params.forward(inst)?;
    let loss = pixelwise_loss(&acts.o15, &inst.gt, ignore)?;
    let unary = &inst.unary;
    let (h, w, l) = (unary.height(), unary.width(), unary.labels());
    let ctx = &params.ctx;
    let r = ctx.radius();

    let valid = inst
        .gt
        .labels()
        .iter()
        .filter(|&&g| Some(g) != ignore)
        .count();
    let mut grad = Gradient::zeros(ctx.costs().len());
    if valid == 0 {
        return Ok((loss, grad));
    }
    let scale = 1.0 / valid as f64;

    // d loss / d o14 = -(o15 - onehot(gt)) per pixel
    let mut g14 = vec![0.0; h * w * l];
    for y in 0..h {
        for x in 0..w {
            let g = inst.gt.get(y, x);
            if Some(g) == ignore || acts.o15.get(y, x, g) < PROB_EPS {
                continue;
            }
            let o = (y * w + x) * l;
            for u in 0..l {
                let target = if u == g { 1.0 } else { 0.0 };
                g14[o + u] = -(acts.o15.get(y, x, u) - target) * scale;
            }
        }
    }

    // b14 routes each gradient to its argmin component; b13 is linear in μ and o12.
    let mut g12 = vec![0.0; h * w * l];
    for y in 0..h {
        for x in 0..w {
            for u in 0..l {
                let gi = g14[(y * w + x) * l + u];
                if gi == 0.0 {
                    continue;
                }
                let kk = acts.argmin[(y * w + x) * l + u];
                for_window(y, x, r, h, w, |oy, ox, jy, jx| {
                    let jo = (jy * w + jx) * l;
                    for v in 0..l {
                        let idx = ctx.index(kk, u, oy, ox, v);
                        grad.mu[idx] += gi * acts.o12.data()[jo + v];
                        g12[jo + v] += gi * ctx.costs()[idx];
                    }
                });
            }
        }
    }

    // o12 = a * p_j^v * (omega1 * S1 + omega2 * S2) + b
    let (a, dp) = (params.activation.a, params.dp);
    for y in 0..h {
        for x in 0..w {
            let mut s1 = vec![0.0; l];
            let mut s2 = vec![0.0; l];
            for_window(y, x, params.tw.radius(), h, w, |_, _, zy, zx| {
                let di = intensity_sq(&inst.feats, (y, x), (zy, zx));
                let ds = spatial_sq((y, x), (zy, zx));
                for v in 0..l {
                    let q = unary.get(zy, zx, v);
                    s1[v] += di * q;
                    s2[v] += ds * q;
                }
            });
            for v in 0..l {
                let g = g12[(y * w + x) * l + v];
                let pj = unary.get(y, x, v);
                let inner = pj * (dp.omega1 * s1[v] + dp.omega2 * s2[v]);
                grad.a += g * inner;
                grad.b += g;
                grad.omega1 += g * a * pj * s1[v];
                grad.omega2 += g * a * pj * s2[v];
            }
        }
    }
    Ok((loss, grad))
}

/// Mean loss over `batch` and its gradient; parameters not live in `stage`
/// get exactly zero gradient.
pub fn grad_params(
    batch: &[Instance],
    params: &ParamSet,
    stage: Stage,
    ignore: Option<usize>,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(arg_err("empty batch"));
    }
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Gradient)>> = batch
        .par_iter()
        .map(|inst| instance_gradient(params, inst, ignore))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Gradient)>> = batch
        .iter()
        .map(|inst| instance_gradient(params, inst, ignore))
        .collect();
    let mut loss = 0.0;
    let mut grad = Gradient::zeros(params.ctx.costs().len());
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    grad.omega1 *= inv;
    grad.omega2 *= inv;
    grad.a *= inv;
    grad.b *= inv;
    grad.mu.iter_mut().for_each(|g| *g *= inv);
    grad.mask(stage.live());
    Ok((loss, grad))
}

/// Mean loss of the full stack over `corpus`.
pub fn corpus_loss(corpus: &[Instance], params: &ParamSet, ignore: Option<usize>) -> Result<f64> {
    if corpus.is_empty() {
        return Err(arg_err("empty corpus"));
    }
    let mut total = 0.0;
    for inst in corpus {
        check_instance(params, inst)?;
        total += pixelwise_loss(&params.forward(inst)?.o15, &inst.gt, ignore)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Mean loss of the unaries alone.
pub fn unary_loss(corpus: &[Instance], ignore: Option<usize>) -> Result<f64> {
    if corpus.is_empty() {
        return Err(arg_err("empty corpus"));
    }
    let mut total = 0.0;
    for inst in corpus {
        total += pixelwise_loss(&MarginalField::from_unary(&inst.unary), &inst.gt, ignore)?;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Instances per step; 0 or anything >= the corpus size means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(arg_err("learning rate must be finite and >= 0"));
        }
        if self.iterations == 0 {
            return Err(arg_err("a stage needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Per-step batch loss, evaluated before each update.
    pub trace: Vec<TraceRow>,
    /// Full-corpus loss after each stage, in stage order.
    pub stage_loss: Vec<(Stage, f64)>,
}

pub fn write_loss_csv(trace: &[TraceRow], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<loss trace>", e);
    writeln!(out, "stage,iter,loss").map_err(io)?;
    for row in trace {
        writeln!(out, "{},{},{:.17e}", row.stage, row.iter, row.loss).map_err(io)?;
    }
    Ok(())
}

fn apply_step(params: &mut ParamSet, grad: &Gradient, rate: f64, live: LiveMask) {
    if live.omega {
        // projected onto omega >= 0
        params.dp.omega1 = (params.dp.omega1 - rate * grad.omega1).max(0.0);
        params.dp.omega2 = (params.dp.omega2 - rate * grad.omega2).max(0.0);
    }
    if live.activation {
        params.activation.a -= rate * grad.a;
        params.activation.b -= rate * grad.b;
    }
    if live.context {
        for (m, g) in params.ctx.costs_mut().iter_mut().zip(&grad.mu) {
            *m -= rate * g;
        }
    }
}

fn params_finite(p: &ParamSet) -> bool {
    [p.dp.omega1, p.dp.omega2, p.activation.a, p.activation.b]
        .iter()
        .chain(p.ctx.costs())
        .all(|v| v.is_finite())
}

/// Runs the stages in the given order with plain gradient descent.
pub fn train_incremental(
    corpus: &[Instance],
    init: ParamSet,
    stages: &[TrainConfig],
    ignore: Option<usize>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(arg_err("training corpus is empty"));
    }
    let mut params = init;
    let mut trace = Vec::new();
    let mut stage_loss = Vec::new();
    for cfg in stages {
        cfg.validate()?;
        if cfg.stage == Stage::UnaryPassthrough {
            let loss = unary_loss(corpus, ignore)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: cfg.stage.to_string(),
                    iteration: 0,
                    loss,
                });
            }
            trace.push(TraceRow {
                stage: cfg.stage,
                iter: 0,
                loss,
            });
            stage_loss.push((cfg.stage, loss));
            continue;
        }
        let live = cfg.stage.live();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = if cfg.batch_size == 0 || cfg.batch_size >= corpus.len() {
            corpus.len()
        } else {
            cfg.batch_size
        };
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = corpus.len();
        let mut picked: Vec<Instance> = Vec::with_capacity(batch);
        for iter in 0..cfg.iterations {
            let (loss, grad) = if batch == corpus.len() {
                grad_params(corpus, &params, cfg.stage, ignore)?
            } else {
                picked.clear();
                for _ in 0..batch {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    picked.push(corpus[order[cursor]].clone());
                    cursor += 1;
                }
                grad_params(&picked, &params, cfg.stage, ignore)?
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: cfg.stage.to_string(),
                    iteration: iter,
                    loss,
                });
            }
            trace.push(TraceRow {
                stage: cfg.stage,
                iter,
                loss,
            });
            apply_step(&mut params, &grad, cfg.learning_rate, live);
            if !params_finite(&params) {
                return Err(Error::Divergence {
                    stage: cfg.stage.to_string(),
                    iteration: iter,
                    loss: f64::NAN,
                });
            }
        }
        let loss = corpus_loss(corpus, &params, ignore)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: cfg.stage.to_string(),
                iteration: cfg.iterations,
                loss,
            });
        }
        stage_loss.push((cfg.stage, loss));
    }
    Ok(TrainOutcome {
        params,
        trace,
        stage_loss,
    })
}
