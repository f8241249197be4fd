use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpn_core::meanfield::{mf_init, mf_update_triple, KernelSource, MfSchedule};
use dpn_core::mrf::{ContextFilterBank, DistanceParams, PixelFeatureGrid, TripleWindow, UnaryField};
use dpn_core::learning::ParamSet;
use dpn_core::layers::LinearActivation;
use dpn_core::synth::{gen_synthetic, planted_context_spec, SceneSpec};
use dpn_core::tensor::{read_tensor, write_tensor, Tensor};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn dpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dpn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn model_args(params: &Path) -> Vec<String> {
    let f = fixtures();
    vec![
        "--unary".into(),
        f.join("unary.dpt").to_string_lossy().into(),
        "--features".into(),
        f.join("features.dpt").to_string_lossy().into(),
        "--params".into(),
        params.to_string_lossy().into(),
    ]
}

fn with(base: &[&str], model: &[String], rest: &[&str]) -> Vec<String> {
    base.iter()
        .map(|s| s.to_string())
        .chain(model.iter().cloned())
        .chain(rest.iter().map(|s| s.to_string()))
        .collect()
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

/// Rewrites the committed fixture: a 12x12 planted-context scene, a
/// random context bank, and the reference mean-field output as the golden.
#[test]
#[ignore = "regenerates committed fixtures"]
fn regenerate_fixtures() {
    let dir = fixtures();
    let spec = SceneSpec {
        height: 12,
        width: 12,
        size_min: 3,
        size_max: 6,
        ..planted_context_spec()
    };
    let inst = gen_synthetic(&spec, 5, 1).unwrap().remove(0);
    let params = ParamSet {
        dp: DistanceParams::new(2e-5, 0.05).unwrap(),
        activation: LinearActivation::default(),
        ctx: ContextFilterBank::random(2, 3, 3, 0.5, 11).unwrap(),
        tw: TripleWindow::new(3).unwrap(),
    };
    write_tensor(inst.unary.tensor(), dir.join("unary.dpt")).unwrap();
    write_tensor(&inst.feats.to_tensor(), dir.join("features.dpt")).unwrap();
    params.save(dir.join("params")).unwrap();
    let q = mf_update_triple(
        &mf_init(&inst.unary),
        &inst.unary,
        &params.ctx,
        params.tw,
        &inst.feats,
        &params.dp,
        &MfSchedule::default(),
        KernelSource::FixedUnary,
    )
    .unwrap();
    write_tensor(q.tensor(), dir.join("golden_o15.dpt")).unwrap();
}

#[test]
fn refine_matches_golden_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o15.dpt");
    let model = model_args(&fixtures().join("params"));
    run(with(&["--threads", "1", "refine"], &model, &["--output", s(&out)]));
    let got = std::fs::read(&out).unwrap();
    let want = std::fs::read(fixtures().join("golden_o15.dpt")).unwrap();
    assert_eq!(got, want);

    let lut = tmp.path().join("lut.dpt");
    run(with(&["refine"], &model, &["--output", s(&lut), "--lut"]));
    assert_eq!(std::fs::read(&lut).unwrap(), want);
}

#[test]
fn refine_writes_argmax_and_activations() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, map, acts) = (tmp.path().join("o15.dpt"), tmp.path().join("map.dpt"), tmp.path().join("acts"));
    let model = model_args(&fixtures().join("params"));
    run(with(
        &["refine"],
        &model,
        &["--output", s(&out), "--argmax", s(&map), "--dump-activations", s(&acts)],
    ));
    assert_eq!(read_tensor(&map).unwrap().dims(), &[12, 12, 1]);
    for i in 11..=15 {
        assert!(acts.join(format!("o{i}.dpt")).exists());
    }
    assert_eq!(read_tensor(acts.join("o13.dpt")).unwrap().dims(), &[12, 12, 6]);
}

#[test]
fn missing_params_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let model = model_args(&tmp.path().join("nope"));
    let args = with(&["refine"], &model, &["--output", s(&tmp.path().join("o.dpt"))]);
    let out = dpn(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn oracle_single_pass_matches_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, o, trace) = (tmp.path().join("r.dpt"), tmp.path().join("o.dpt"), tmp.path().join("fe.csv"));
    let model = model_args(&fixtures().join("params"));
    run(with(&["refine"], &model, &["--output", s(&r)]));
    run(with(&["oracle"], &model, &["--output", s(&o), "--iterations", "1", "--trace", s(&trace)]));
    let diff = read_tensor(&r).unwrap().max_abs_diff(&read_tensor(&o).unwrap()).unwrap();
    assert!(diff <= 1e-9);
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("iter,free_energy\n1,"));

    let seq = tmp.path().join("seq.csv");
    run(with(
        &["oracle"],
        &model,
        &["--output", s(&o), "--iterations", "4", "--schedule", "sequential", "--damping", "0.5", "--kernel-source", "current-q", "--trace", s(&seq)],
    ));
    assert_eq!(std::fs::read_to_string(&seq).unwrap().lines().count(), 5);
}

#[test]
fn oracle_rejects_zero_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let model = model_args(&fixtures().join("params"));
    let args = with(&["oracle"], &model, &["--output", s(&tmp.path().join("o.dpt")), "--iterations", "0"]);
    let out = dpn(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_context_returns_unary() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("params");
    let zero = ParamSet {
        dp: DistanceParams::new(1e-3, 0.5).unwrap(),
        activation: LinearActivation::default(),
        ctx: ContextFilterBank::zeros(2, 3, 5).unwrap(),
        tw: TripleWindow::new(5).unwrap(),
    };
    zero.save(&params).unwrap();
    let out = tmp.path().join("o.dpt");
    run(with(&["refine"], &model_args(&params), &["--output", s(&out)]));
    let unary = UnaryField::new(read_tensor(fixtures().join("unary.dpt")).unwrap()).unwrap();
    let got = read_tensor(&out).unwrap();
    assert!(got.max_abs_diff(unary.tensor()).unwrap() < 1e-15);
}

#[test]
fn resize_upsamples_low_resolution_unary() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small.dpt");
    write_tensor(&Tensor::filled(vec![3, 3, 3], 1.0 / 3.0).unwrap(), &small).unwrap();
    let f = fixtures();
    let out = tmp.path().join("o.dpt");
    let (feats, params) = (f.join("features.dpt"), f.join("params"));
    let base = [
        "refine", "--unary", s(&small), "--features", s(&feats), "--params", s(&params), "--output", s(&out),
    ];
    assert_eq!(dpn(&base).status.code(), Some(1));
    let mut args = base.to_vec();
    args.push("--resize");
    ok(&args);
    assert_eq!(read_tensor(&out).unwrap().dims(), &[12, 12, 3]);
    let grid = PixelFeatureGrid::from_tensor(&read_tensor(&feats).unwrap()).unwrap();
    assert_eq!(grid.height(), 12);
}

#[test]
fn cost_reports_paper_configuration() {
    let out = ok(&["cost", "--f", "21", "--fprime", "5", "--N", "512", "--s", "50", "--M", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("b12 137625600000 (1.376×10^11)"), "{text}");
    let deg = ok(&["cost", "--f", "1", "--fprime", "1", "--N", "1", "--s", "1", "--M", "1"]);
    assert!(String::from_utf8(deg.stdout).unwrap().contains("b12 1 "));
    assert_eq!(dpn(&["cost", "--f", "0", "--fprime", "1", "--N", "1", "--s", "1", "--M", "1"]).status.code(), Some(1));
    let big = u64::MAX.to_string();
    assert_eq!(dpn(&["cost", "--f", &big, "--fprime", "1", "--N", "2", "--s", "1", "--M", "1"]).status.code(), Some(1));
    assert_eq!(dpn(&["cost", "--f", "x"]).status.code(), Some(2));
}

#[test]
fn gen_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("scene.txt");
    std::fs::write(&spec, "height=10\nwidth=10\nsize_min=3\nsize_max=5\nflip_rate=0.2\n").unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["gen", "--spec", s(&spec), "--seed", "4", "--count", "4", "--out", s(&corpus)]);
    assert!(corpus.join("0003_gt.dpt").exists());

    let train = |out: &Path, rate: &str, triple: &str| {
        ok(&[
            "train", "--corpus", s(&corpus), "--out", s(out), "--rate", rate, "--stage-rates", triple,
            "--iterations", "3", "--batch", "2", "--seed", "9", "--K", "2", "--n", "3", "--m", "3",
        ])
    };
    let (a, b, z) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("z"));
    train(&a, "2", "triple=1e-10");
    train(&b, "2", "triple=1e-10");
    for f in ["mu.dpt", "params.meta", "loss.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    train(&z, "0", "triple=0");
    let zero = ParamSet::load(&z).unwrap();
    assert_eq!(zero.ctx, ContextFilterBank::random(2, 3, 3, 0.01, 9).unwrap());
    assert_eq!((zero.dp.omega2, zero.activation.a), (0.01, 1.0));
    let trace = std::fs::read_to_string(z.join("loss.csv")).unwrap();
    assert!(trace.starts_with("stage,iter,loss\nunary-passthrough,0,"));

    // Score refined predictions of the trained model against the ground truth.
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..4 {
        let name = format!("{i:04}.dpt");
        std::fs::copy(corpus.join(format!("{i:04}_gt.dpt")), gt.join(&name)).unwrap();
        ok(&[
            "refine", "--unary", s(&corpus.join(format!("{i:04}_unary.dpt"))),
            "--features", s(&corpus.join(format!("{i:04}_features.dpt"))), "--params", s(&a),
            "--output", s(&tmp.path().join("o15.dpt")), "--argmax", s(&pred.join(&name)),
        ]);
    }
    let same = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--labels", "3"]);
    let text = String::from_utf8(same.stdout).unwrap();
    assert!(text.contains("summary,miou=1.000000,ta=1.000000,la=1.000000,ba=1.000000,images=4"), "{text}");

    let report = tmp.path().join("r.csv");
    ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--labels", "3", "--output", s(&report)]);
    ok(&["eval", "--pred", s(&gt), "--gt", s(&pred), "--labels", "3", "--output", s(&tmp.path().join("swap.csv"))]);
    let miou = |p: &Path| {
        let t = std::fs::read_to_string(p).unwrap();
        t.lines().last().unwrap().split(',').nth(1).unwrap().to_string()
    };
    assert_eq!(miou(&report), miou(&tmp.path().join("swap.csv")));
    assert_eq!(dpn(&["eval", "--pred", s(&tmp.path().join("none")), "--gt", s(&gt), "--labels", "3"]).status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "f=21\nfprime=5\nN=512\ns=50\nM=10\n").unwrap();
    let out = ok(&["--config", s(&cfg), "cost"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("b12 137625600000"));
    let out = ok(&["--config", s(&cfg), "cost", "--M", "1"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("b12 13762560000 "));

    std::fs::write(&cfg, "bogus=1\n").unwrap();
    assert_eq!(dpn(&["--config", s(&cfg), "cost"]).status.code(), Some(2));
    assert_eq!(dpn(&["--config", s(&tmp.path().join("missing")), "cost"]).status.code(), Some(2));
}
