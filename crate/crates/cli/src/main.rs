//! `dpn`: batch front end over dpn-core.
//!
//! Exit codes: 0 success, 1 computation error, 2 usage or I/O error.
//! `--config FILE` supplies `flag=value` lines for the chosen subcommand;
//! flags given on the command line win.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, Parser, Subcommand, ValueEnum};
use dpn_core::cost::{estimate_cost, CostConfig};
use dpn_core::layers::{dpn_forward_with, B12Path};
use dpn_core::learning::{parse_key_values, train_incremental, write_loss_csv, ParamSet, Stage, TrainConfig};
use dpn_core::meanfield::{mf_init, run_mf, write_trace_csv, KernelSource, MfSchedule, UpdateOrder};
use dpn_core::metrics::{evaluate, DEFAULT_TAU};
use dpn_core::mrf::{ContextFilterBank, DistanceParams, PixelFeatureGrid, TripleWindow, UnaryField};
use dpn_core::synth::{gen_synthetic, planted_context_spec, read_corpus, write_corpus, SceneSpec};
use dpn_core::tensor::{bilinear_resize, read_tensor, write_tensor, LabelMap, Tensor};
use dpn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dpn", version, about = "MRF smoothing as one mean-field step of filtering layers")]
#[command(args_override_self = true)]
struct Cli {
    /// key=value file with defaults for the subcommand's flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for pixel and image parallelism (1 = bit-reproducible serial run)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the b12-b15 stack once and write o15.
    Refine(RefineArgs),
    /// Run the reference mean-field update for N passes.
    Oracle(OracleArgs),
    /// Train parameters on a corpus, stage by stage.
    Train(TrainArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Print per-layer operation counts.
    Cost(CostArgs),
    /// Write a synthetic corpus.
    Gen(GenArgs),
}

#[derive(clap::Args)]
struct ModelInputs {
    #[arg(long)]
    unary: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Directory holding mu.dpt and params.meta
    #[arg(long)]
    params: PathBuf,
    /// Bilinearly resample the unary to the feature grid when sizes differ
    #[arg(long)]
    resize: bool,
    #[arg(long)]
    omega1: Option<f64>,
    #[arg(long)]
    omega2: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    /// Triple-penalty window extent (odd)
    #[arg(long)]
    m: Option<usize>,
}

#[derive(clap::Args)]
struct RefineArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long)]
    output: PathBuf,
    /// Also write the argmax label map here
    #[arg(long)]
    argmax: Option<PathBuf>,
    /// Write o11..o15 into this directory
    #[arg(long)]
    dump_activations: Option<PathBuf>,
    /// Use the lookup-table b12 path
    #[arg(long)]
    lut: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    FixedUnary,
    CurrentQ,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    iterations: u32,
    #[arg(long, value_enum, default_value = "parallel")]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = 1.0)]
    damping: f64,
    #[arg(long, value_enum, default_value = "fixed-unary")]
    kernel_source: KernelArg,
    /// Free-energy trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory of NNNN_{unary,features,gt}.dpt files
    #[arg(long)]
    corpus: PathBuf,
    /// Output params directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated stage sequence
    #[arg(long, default_value = "unary-passthrough,triple,context,joint")]
    stages: String,
    /// Learning rate for every stage; see --stage-rates
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Per-stage overrides, e.g. "triple=1e-10,context=30"
    #[arg(long)]
    stage_rates: Option<String>,
    /// Iterations per learning stage
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    /// Instances per step; 0 = full batch
    #[arg(long, default_value_t = 0)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixture components
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    /// Context window (odd)
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Triple-penalty window (odd)
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 1e-5)]
    omega1: f64,
    #[arg(long, default_value_t = 0.01)]
    omega2: f64,
    /// Half-width of the uniform context initialization
    #[arg(long, default_value_t = 0.01)]
    init_scale: f64,
    /// Label excluded from the loss
    #[arg(long)]
    ignore: Option<usize>,
    /// Loss trace CSV (default OUT/loss.csv)
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Directory of predicted label maps
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label maps with the same file names
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    labels: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: usize,
    #[arg(long)]
    ignore: Option<usize>,
    /// Report CSV (stdout if absent)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CostArgs {
    #[arg(long)]
    f: u64,
    #[arg(long)]
    fprime: u64,
    #[arg(long = "N")]
    n: u64,
    #[arg(long)]
    s: u64,
    #[arg(long = "M")]
    m: u64,
}

#[derive(clap::Args)]
struct GenArgs {
    /// Scene spec (key=value); the planted-context scene if absent
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let argv = match with_config_defaults(std::env::args().collect()) {
        Ok(argv) => argv,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(Error::Parse("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Error::InvalidArgument(e.to_string()));
        }
    }
    let result = match cli.command {
        Command::Refine(a) => refine(a),
        Command::Oracle(a) => oracle(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cost(a) => cost(a),
        Command::Gen(a) => gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("dpn: {e}");
    ExitCode::from(if e.is_usage() { 2 } else { 1 })
}

/// Inserts `--key value` pairs from `--config FILE` right after the
/// subcommand name, so that flags given explicitly (which come later) win.
fn with_config_defaults(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone().into(),
        source: e,
    })?;
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = argv.iter().position(|a| names.contains(a)) else {
        return Ok(argv);
    };
    let sub = cmd.find_subcommand(&argv[pos]).expect("listed above");
    let mut injected = Vec::new();
    for (key, value) in parse_key_values(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Parse(format!("{path}: '{key}' is not a flag of '{}'", argv[pos])))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(Error::Parse(format!("{path}: '{key}' expects true or false"))),
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

struct Model {
    unary: UnaryField,
    feats: PixelFeatureGrid,
    params: ParamSet,
}

fn load_model(m: &ModelInputs) -> Result<Model> {
    let mut params = ParamSet::load(&m.params)?;
    let feats = PixelFeatureGrid::from_tensor(&read_tensor(&m.features)?)?;
    let mut raw = read_tensor(&m.unary)?;
    let (h, w, _) = raw.shape3()?;
    if m.resize && (h, w) != (feats.height(), feats.width()) {
        raw = bilinear_resize(&raw, feats.height(), feats.width())?;
    }
    let unary = UnaryField::new(raw)?;
    let dp = DistanceParams::new(
        m.omega1.unwrap_or(params.dp.omega1),
        m.omega2.unwrap_or(params.dp.omega2),
    )?;
    params.dp = dp;
    if let Some(a) = m.a {
        params.activation.a = a;
    }
    if let Some(b) = m.b {
        params.activation.b = b;
    }
    if let Some(extent) = m.m {
        params.tw = TripleWindow::new(extent)?;
    }
    Ok(Model { unary, feats, params })
}

fn refine(a: RefineArgs) -> Result<()> {
    let Model { unary, feats, params } = load_model(&a.model)?;
    let path = if a.lut { B12Path::Lut } else { B12Path::Direct };
    let acts = dpn_forward_with(&unary, &feats, &params.dp, &params.ctx, params.tw, params.activation, path)?;
    save(acts.o15.tensor(), &a.output)?;
    if let Some(p) = &a.argmax {
        save(&acts.o15.argmax().to_tensor(), p)?;
    }
    if let Some(dir) = &a.dump_activations {
        acts.dump(dir)?;
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let Model { unary, feats, params } = load_model(&a.model)?;
    let schedule = MfSchedule {
        iterations: a.iterations as usize,
        order: match a.schedule {
            ScheduleArg::Parallel => UpdateOrder::Parallel,
            ScheduleArg::Sequential => UpdateOrder::SequentialRaster,
        },
        damping: a.damping,
    };
    let source = match a.kernel_source {
        KernelArg::FixedUnary => KernelSource::FixedUnary,
        KernelArg::CurrentQ => KernelSource::CurrentQ,
    };
    let run = run_mf(&mf_init(&unary), &unary, &params.ctx, params.tw, &feats, &params.dp, &schedule, source)?;
    save(run.marginals.tensor(), &a.output)?;
    if let Some(p) = &a.trace {
        write_trace_csv(&run.free_energy, create(p)?)?;
    }
    Ok(())
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn save(t: &Tensor, p: &Path) -> Result<()> {
    ensure_parent(p)?;
    write_tensor(t, p)
}

fn create(p: &Path) -> Result<io::BufWriter<fs::File>> {
    ensure_parent(p)?;
    fs::File::create(p).map(io::BufWriter::new).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn parse_rates(text: &str) -> Result<Vec<(Stage, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (s, r) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("stage rate '{item}' is not stage=rate")))?;
            let rate = r
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad rate in '{item}'")))?;
            Ok((s.trim().parse()?, rate))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let l = corpus[0].unary.labels();
    let overrides = a.stage_rates.as_deref().map(parse_rates).transpose()?.unwrap_or_default();
    let mut stages = Vec::new();
    for name in a.stages.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let stage: Stage = name.parse()?;
        let rate = overrides
            .iter()
            .rev()
            .find(|(s, _)| *s == stage)
            .map_or(a.rate, |&(_, r)| r);
        stages.push(TrainConfig {
            stage,
            learning_rate: if stage == Stage::UnaryPassthrough { 0.0 } else { rate },
            iterations: if stage == Stage::UnaryPassthrough { 1 } else { a.iterations },
            batch_size: a.batch,
            seed: a.seed,
        });
    }
    if stages.is_empty() {
        return Err(Error::Parse("--stages is empty".into()));
    }
    let init = ParamSet {
        dp: DistanceParams::new(a.omega1, a.omega2)?,
        activation: Default::default(),
        ctx: ContextFilterBank::random(a.k, l, a.n, a.init_scale, a.seed)?,
        tw: TripleWindow::new(a.m)?,
    };
    let out = train_incremental(&corpus, init, &stages, a.ignore)?;
    out.params.save(&a.out)?;
    let trace = a.trace.clone().unwrap_or_else(|| a.out.join("loss.csv"));
    write_loss_csv(&out.trace, create(&trace)?)?;
    for (stage, loss) in &out.stage_loss {
        println!("{stage} loss {loss:.6}");
    }
    Ok(())
}

fn dpt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dpt"))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(a: EvalArgs) -> Result<()> {
    let gts = dpt_files(&a.gt)?;
    if gts.is_empty() {
        return Err(Error::Parse(format!("no .dpt files in {}", a.gt.display())));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for g in gts {
        let name = g.file_name().expect("listed file");
        let p = a.pred.join(name);
        pairs.push((
            LabelMap::from_tensor(&read_tensor(&p)?)?,
            LabelMap::from_tensor(&read_tensor(&g)?)?,
        ));
    }
    let report = evaluate(&pairs, a.labels, a.ignore, a.tau)?;
    match &a.output {
        Some(p) => report.write_csv(create(p)?),
        None => report.write_csv(io::stdout().lock()),
    }
}

fn cost(a: CostArgs) -> Result<()> {
    let report = estimate_cost(CostConfig {
        f: a.f,
        f_prime: a.fprime,
        n: a.n,
        s: a.s,
        m: a.m,
    })?;
    writeln!(io::stdout(), "{report}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SceneSpec::parse(&fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)?,
        None => planted_context_spec(),
    };
    write_corpus(&a.out, &gen_synthetic(&spec, a.seed, a.count)?)
}
