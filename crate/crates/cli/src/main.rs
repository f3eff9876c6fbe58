mod plot;

use std::env;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lipode_core::certify::{
    bound_bartlett_spec, bound_bartlett_tensor, bound_neural_ode, bound_param_ode, bound_resnet,
    BoundReport, NeuralOdeSpec,
};
use lipode_core::experiments::{
    atomic_write, parse_lambda, run_fig1, run_fig2, train_observed, write_checkpoint, DataSource,
    ExperimentScale, Fig1Config, Fig2Config, OutputOptions, Profile,
};
use lipode_core::lipfun::{build_cover, build_product_cover, cover_log_bound, random_member};
use lipode_core::resnet::PenaltyKind;
use lipode_core::suites::{run_suite, Suite};
use lipode_core::{Error, ParamClassSpec, WeightClassSpec, WeightTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

const VERSION: &str = env!("LIPODE_VERSION");
const DATA_DIR_ENV: &str = "LIPODE_DATA_DIR";

#[derive(Parser)]
#[command(name = "lipode", version = VERSION, about = "Generalization certificates and experiments for parameterized ODEs and deep residual networks")]
struct Cli {
    /// Worker threads for independent runs (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a generalization bound and print its report as JSON.
    Certify(CertifyArgs),
    /// Build the ε-net of Lipschitz paths and optionally verify it.
    Cover(CoverArgs),
    /// Run a randomized property suite.
    VerifyProps(VerifyArgs),
    /// Train one network and record per-epoch metrics.
    Train(TrainArgs),
    /// Weight Lipschitz constant vs generalization gap over training.
    Fig1(Fig1Args),
    /// Generalization gap as a function of the penalty factor.
    Fig2(Fig2Args),
    /// Render a CSV table as an SVG scatter or line plot.
    Plot(plot::PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundKind {
    ParamOde,
    NeuralOde,
    Resnet,
    Bartlett,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long, value_enum)]
    bound: BoundKind,
    /// JSON class spec; the all-ones spec (m = d = 1, L = 10) if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    n: u64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Margin for the Bartlett et al. bound.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Weight tensor (.odrn) for the Bartlett bound instead of the class majorant.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CoverArgs {
    #[arg(long = "R")]
    radius: f64,
    #[arg(long = "K")]
    lipschitz: f64,
    #[arg(long)]
    eps: f64,
    /// Path dimension (product cover for m = 2).
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Number of random class members to check against the cover.
    #[arg(long)]
    verify: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the first N members to `cover.txt` (m = 1 only).
    #[arg(long)]
    list: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    suite: Suite,
    /// Defaults: 1000 for prop2/prop5, 100 for isometry, 50 for gradients.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the four MNIST IDX files (also read from LIPODE_DATA_DIR);
    /// the synthetic stand-in is used when neither is set.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    /// Save weights after every epoch under `<out-dir>/checkpoints`.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scale: ScaleArgs,
    /// Penalty factor; `inf` trains a weight-tied network.
    #[arg(long, default_value = "0")]
    lambda: String,
    #[arg(long, default_value = "frob_l2")]
    penalty: PenaltyKind,
    /// Keep the input and output projections at their random initialization.
    #[arg(long)]
    frozen_projections: bool,
    #[arg(long, default_value = "out/train")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Fig1Args {
    #[command(flatten)]
    scale: ScaleArgs,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value = "out/fig1")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Fig2Args {
    #[command(flatten)]
    scale: ScaleArgs,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated penalty factors, e.g. `0,0.1,1,inf`.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<String>>,
    #[arg(long, default_value = "frob_l2")]
    penalty: PenaltyKind,
    #[arg(long, default_value = "out/fig2")]
    out_dir: PathBuf,
}

/// Whether the command's checks held.
enum Status {
    Ok,
    Failed,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    config: Value,
    outputs: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn write_manifest(path: &Path, command: &str, config: Value, outputs: &[&str]) -> anyhow::Result<()> {
    let manifest = Manifest {
        tool: "lipode",
        version: VERSION,
        command,
        argv: env::args().skip(1).collect(),
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(path, &manifest)
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_spec<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn certify(args: CertifyArgs) -> anyhow::Result<Status> {
    if args.weights.is_some() && !matches!(args.bound, BoundKind::Bartlett) {
        bail!(Error::Config("--weights applies to --bound bartlett only".into()));
    }
    let report: BoundReport = match args.bound {
        BoundKind::ParamOde => {
            let spec = match &args.spec {
                Some(p) => read_spec(p)?,
                None => ParamClassSpec::unit(1),
            };
            bound_param_ode(&spec, args.n, args.delta)?
        }
        BoundKind::NeuralOde => {
            let spec = match &args.spec {
                Some(p) => read_spec(p)?,
                None => NeuralOdeSpec::unit(1),
            };
            bound_neural_ode(&spec, args.n, args.delta)?
        }
        BoundKind::Resnet | BoundKind::Bartlett => {
            let spec: WeightClassSpec = match &args.spec {
                Some(p) => read_spec(p)?,
                None => WeightClassSpec::unit(1, 10),
            };
            match (args.bound, &args.weights) {
                (BoundKind::Resnet, _) => bound_resnet(&spec, args.n, args.delta)?,
                (_, Some(path)) => {
                    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                    let w = WeightTensor::from_bytes(&bytes)?;
                    bound_bartlett_tensor(&w, spec.r_x, args.gamma, args.n, args.delta)?
                }
                (_, None) => bound_bartlett_spec(&spec, args.gamma, args.n, args.delta)?,
            }
        }
    };
    print_json(&report)?;
    if let Some(dir) = &args.out_dir {
        write_json(&dir.join("report.json"), &report)?;
        write_manifest(
            &dir.join("manifest.json"),
            "certify",
            json!({ "n": args.n, "delta": args.delta, "gamma": args.gamma, "inputs": report.inputs_echo }),
            &["report.json"],
        )?;
    }
    Ok(if report.valid { Status::Ok } else { Status::Failed })
}

fn cover(args: CoverArgs) -> anyhow::Result<Status> {
    let (r, k, eps, m) = (args.radius, args.lipschitz, args.eps, args.m);
    let log_bound = cover_log_bound(m, r, k, eps)?;
    let mut summary = json!({ "m": m, "R": r, "K": k, "eps": eps, "log_bound": log_bound });
    let single = if m == 1 { Some(build_cover(r, k, eps)?) } else { None };
    let product = if m > 1 { Some(build_product_cover(m, r, k, eps)?) } else { None };
    match (&single, &product) {
        (Some(c), _) => {
            summary["members"] = json!(c.len());
            summary["log_members"] = json!(c.log_len());
            summary["grid_x"] = json!(c.grid_x().len());
            summary["grid_y"] = json!(c.grid_y().len());
        }
        (_, Some(p)) => {
            let per = p.coordinate_cover(0).len() as u128;
            summary["members"] = json!(per.checked_pow(m as u32).map(|v| v.to_string()));
            summary["log_members"] = json!(p.log_len());
            summary["grid_x"] = json!(p.coordinate_cover(0).grid_x().len());
            summary["grid_y"] = json!(p.coordinate_cover(0).grid_y().len());
        }
        _ => unreachable!("one of the covers is built"),
    }
    let mut status = Status::Ok;
    if let Some(samples) = args.verify {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let (mut worst, mut failures) = (0.0f64, 0usize);
        for _ in 0..samples {
            let f = random_member(m, r, k, &mut rng)?;
            let dist = match (&single, &product) {
                (Some(c), _) => c.nearest_member(&f)?.1,
                (_, Some(p)) => p.covering_member(&f)?.1,
                _ => unreachable!("one of the covers is built"),
            };
            worst = worst.max(dist);
            if dist > eps {
                failures += 1;
            }
        }
        summary["verification"] = json!({ "samples": samples, "seed": args.seed, "worst_distance": worst, "failures": failures });
        if failures > 0 {
            status = Status::Failed;
        }
    }
    print_json(&summary)?;
    if let Some(dir) = &args.out_dir {
        let mut outputs = vec!["cover.json"];
        write_json(&dir.join("cover.json"), &summary)?;
        if let (Some(limit), Some(c)) = (args.list, &single) {
            let mut text = Vec::new();
            c.write_text(&mut text, Some(limit))?;
            atomic_write(&dir.join("cover.txt"), &text)?;
            outputs.push("cover.txt");
        }
        write_manifest(&dir.join("manifest.json"), "cover", summary.clone(), &outputs)?;
    }
    Ok(status)
}

fn verify_props(args: VerifyArgs) -> anyhow::Result<Status> {
    let samples = args.samples.unwrap_or(match args.suite {
        Suite::Prop2 | Suite::Prop5 => 1000,
        Suite::Isometry => 100,
        Suite::Gradients => 50,
    });
    let report = run_suite(args.suite, samples, args.seed)?;
    print_json(&report)?;
    if let Some(dir) = &args.out_dir {
        write_json(&dir.join("report.json"), &report)?;
        write_manifest(
            &dir.join("manifest.json"),
            "verify-props",
            json!({ "suite": args.suite, "samples": samples, "seed": args.seed }),
            &["report.json"],
        )?;
    }
    Ok(if report.passed() { Status::Ok } else { Status::Failed })
}

fn data_source(args: &DataArgs) -> DataSource {
    args.data_dir
        .clone()
        .or_else(|| env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .map_or_else(DataSource::synthetic_default, |dir| DataSource::Mnist { dir })
}

fn apply_scale(scale: &mut ExperimentScale, args: &ScaleArgs) {
    if let Some(e) = args.epochs {
        scale.epochs = e;
    }
    if let Some(d) = args.width {
        scale.d = d;
    }
    if let Some(l) = args.depth {
        scale.depth = l;
    }
    if let Some(n) = args.data.train_size {
        scale.train_size = n;
    }
    if let Some(n) = args.data.test_size {
        scale.test_size = n;
    }
}

fn train(args: TrainArgs) -> anyhow::Result<Status> {
    let mut scale = match args.scale.profile {
        Profile::Desk => ExperimentScale::desk(),
        Profile::Paper => ExperimentScale::paper(30),
    };
    apply_scale(&mut scale, &args.scale);
    let lambda = parse_lambda(&args.lambda)?;
    let source = data_source(&args.scale.data);
    let (train_set, test_set) = source.load(scale.train_size, scale.test_size)?;
    let model = scale.model(train_set.dim(), train_set.classes(), args.scale.seed)?;
    let cfg = scale.train_config(lambda, args.penalty, !args.frozen_projections, args.scale.seed);
    let ckpt = args.scale.checkpoints.then(|| args.out_dir.join("checkpoints"));
    let (trained, record) = train_observed(&model, &train_set, &test_set, &cfg, |ev| {
        eprintln!(
            "epoch {:>3}  train {:.4}  test {:.4}  gap {:+.4}  lip {:.4}",
            ev.metrics.epoch, ev.metrics.train_loss, ev.metrics.test_loss, ev.metrics.gap, ev.metrics.weight_lipschitz
        );
        match &ckpt {
            Some(dir) => write_checkpoint(dir, ev),
            None => Ok(()),
        }
    })?;
    let dir = &args.out_dir;
    let mut metrics = csv::Writer::from_writer(Vec::new());
    for m in std::iter::once(&record.initial).chain(&record.epochs) {
        metrics.serialize(m)?;
    }
    atomic_write(&dir.join("metrics.csv"), &metrics.into_inner()?)?;
    write_json(&dir.join("record.json"), &record)?;
    atomic_write(&dir.join("weights.odrn"), &trained.core.to_bytes())?;
    write_manifest(
        &dir.join("manifest.json"),
        "train",
        json!({ "scale": scale, "train": cfg, "source": source }),
        &["metrics.csv", "record.json", "weights.odrn"],
    )?;
    print_json(record.last())?;
    Ok(Status::Ok)
}

fn fig1(args: Fig1Args) -> anyhow::Result<Status> {
    let source = data_source(&args.scale.data);
    let mut cfg = Fig1Config::new(args.scale.profile, source.clone());
    apply_scale(&mut cfg.scale, &args.scale);
    cfg.seed = args.scale.seed;
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    let (train_set, test_set) = source.load(cfg.scale.train_size, cfg.scale.test_size)?;
    let out = OutputOptions {
        dir: Some(args.out_dir.clone()),
        checkpoints: args.scale.checkpoints,
    };
    let result = run_fig1(&cfg, &train_set, &test_set, &out)?;
    let summary = json!({
        "pairs": result.rows.len(),
        "correlation": result.correlation,
        "by_setting": result.by_setting.iter().map(|(trained, r)| json!({ "projections_trained": trained, "correlation": r })).collect::<Vec<_>>(),
    });
    write_json(&args.out_dir.join("summary.json"), &summary)?;
    write_manifest(
        &args.out_dir.join("manifest.json"),
        "fig1",
        serde_json::to_value(&cfg)?,
        &["fig1.csv", "summary.json"],
    )?;
    print_json(&summary)?;
    Ok(Status::Ok)
}

fn fig2(args: Fig2Args) -> anyhow::Result<Status> {
    let source = data_source(&args.scale.data);
    let mut cfg = Fig2Config::new(args.scale.profile, source.clone());
    apply_scale(&mut cfg.scale, &args.scale);
    cfg.seed = args.scale.seed;
    cfg.penalty_kind = args.penalty;
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(ls) = &args.lambdas {
        cfg.lambdas = ls.iter().map(|l| parse_lambda(l)).collect::<Result<_, _>>()?;
    }
    let (train_set, test_set) = source.load(cfg.scale.train_size, cfg.scale.test_size)?;
    let out = OutputOptions {
        dir: Some(args.out_dir.clone()),
        checkpoints: args.scale.checkpoints,
    };
    let result = run_fig2(&cfg, &train_set, &test_set, &out)?;
    write_manifest(
        &args.out_dir.join("manifest.json"),
        "fig2",
        serde_json::to_value(&cfg)?,
        &["fig2.csv", "fig2_summary.csv"],
    )?;
    print_json(&result.summary)?;
    Ok(Status::Ok)
}

/// Usage and configuration mistakes exit with 2, everything else with 1.
fn is_usage_error(err: &anyhow::Error) -> bool {
    matches!(
        err.downcast_ref::<Error>(),
        Some(Error::InvalidArgument(_) | Error::Config(_))
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Certify(a) => certify(a),
        Command::Cover(a) => cover(a),
        Command::VerifyProps(a) => verify_props(a),
        Command::Train(a) => train(a),
        Command::Fig1(a) => fig1(a),
        Command::Fig2(a) => fig2(a),
        Command::Plot(a) => plot::run(a).map(|()| Status::Ok),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
