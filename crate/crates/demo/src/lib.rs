//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every scene is a planted-context synthetic image refined with a
//! Potts-style context bank whose strength the page controls.

use dpn_core::cost::{estimate_cost, CostConfig};
use dpn_core::layers::{dpn_forward, LinearActivation};
use dpn_core::meanfield::{mf_init, run_mf, KernelSource, MfSchedule, UpdateOrder};
use dpn_core::metrics::miou;
use dpn_core::mrf::{free_energy, ContextFilterBank, DistanceParams, TripleWindow};
use dpn_core::synth::{gen_synthetic, planted_context_spec, Instance};
use dpn_core::tensor::LabelMap;
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 4] = [[32, 34, 40], [235, 140, 52], [66, 135, 245], [80, 190, 110]];

struct Model {
    dp: DistanceParams,
    ctx: ContextFilterBank,
    tw: TripleWindow,
}

fn scene(seed: u32, flip_rate: f64) -> Instance {
    let spec = dpn_core::synth::SceneSpec {
        flip_rate: flip_rate.clamp(0.0, 0.9),
        ..planted_context_spec()
    };
    gen_synthetic(&spec, seed as u64, 1)
        .expect("planted spec with clamped flip rate is valid")
        .remove(0)
}

fn potts(labels: usize, smoothing: f64) -> Model {
    let s = if smoothing.is_finite() { smoothing.max(0.0) } else { 0.0 };
    Model {
        dp: DistanceParams::new(0.0, 1.0).expect("valid weights"),
        ctx: ContextFilterBank::from_fn(1, labels, 5, |_, u, _, _, v| if u == v { 0.0 } else { s })
            .expect("valid bank"),
        tw: TripleWindow::new(3).expect("odd window"),
    }
}

fn rgba(map: &LabelMap) -> Vec<u8> {
    map.labels()
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = PALETTE[l % PALETTE.len()];
            [r, g, b, 255]
        })
        .collect()
}

/// Label maps as RGBA pixels plus the mIoU of the unary and refined maps.
#[wasm_bindgen]
pub struct Refinement {
    width: usize,
    height: usize,
    gt: Vec<u8>,
    unary: Vec<u8>,
    refined: Vec<u8>,
    unary_miou: f64,
    refined_miou: f64,
}

#[wasm_bindgen]
impl Refinement {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn gt(&self) -> Vec<u8> {
        self.gt.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn unary(&self) -> Vec<u8> {
        self.unary.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn refined(&self) -> Vec<u8> {
        self.refined.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn unary_miou(&self) -> f64 {
        self.unary_miou
    }

    #[wasm_bindgen(getter)]
    pub fn refined_miou(&self) -> f64 {
        self.refined_miou
    }
}

/// Generates scene `seed`, corrupts a `flip_rate` share of its unary, and
/// refines it with one pass of the layer stack.
#[wasm_bindgen]
pub fn refine_scene(seed: u32, flip_rate: f64, smoothing: f64) -> Refinement {
    let inst = scene(seed, flip_rate);
    let l = inst.unary.labels();
    let m = potts(l, smoothing);
    let acts = dpn_forward(&inst.unary, &inst.feats, &m.dp, &m.ctx, m.tw, LinearActivation::default())
        .expect("scene and model agree in shape");
    let (before, after) = (inst.unary.argmax(), acts.o15.argmax());
    let score = |p: &LabelMap| miou(p, &inst.gt, l, None).expect("same shape").mean;
    Refinement {
        width: inst.gt.width(),
        height: inst.gt.height(),
        gt: rgba(&inst.gt),
        unary: rgba(&before),
        refined: rgba(&after),
        unary_miou: score(&before),
        refined_miou: score(&after),
    }
}

/// Free energy of the unary initialization followed by the value after
/// each of `iterations` mean-field passes.
#[wasm_bindgen]
pub fn free_energy_trace(seed: u32, flip_rate: f64, smoothing: f64, iterations: u32, sequential: bool) -> Vec<f64> {
    let inst = scene(seed, flip_rate);
    let m = potts(inst.unary.labels(), smoothing);
    let q0 = mf_init(&inst.unary);
    let mut trace = vec![free_energy(&q0, &inst.unary, &m.ctx, m.tw, &inst.feats, &m.dp).expect("shapes agree")];
    let schedule = MfSchedule {
        iterations: iterations.clamp(1, 50) as usize,
        order: if sequential {
            UpdateOrder::SequentialRaster
        } else {
            UpdateOrder::Parallel
        },
        damping: 1.0,
    };
    let run = run_mf(&q0, &inst.unary, &m.ctx, m.tw, &inst.feats, &m.dp, &schedule, KernelSource::FixedUnary)
        .expect("valid schedule");
    trace.extend(run.free_energy);
    trace
}

/// Per-layer operation counts as text, or the reason they cannot be computed.
#[wasm_bindgen]
pub fn cost_report(f: u32, fprime: u32, n: u32, s: u32, m: u32) -> String {
    match estimate_cost(CostConfig {
        f: f.into(),
        f_prime: fprime.into(),
        n: n.into(),
        s: s.into(),
        m: m.into(),
    }) {
        Ok(r) => r.to_string(),
        Err(e) => format!("error: {e}"),
    }
}
