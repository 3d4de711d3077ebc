use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meca::data::{read_csv, rotated_blobs, rotated_moons, write_csv, Dataset};
use meca::error::MecaError;
use meca::network::{Activation, MlpModel};
use meca::selection::{selection_gap, sweep, write_summary_csv, SweepOptions, DEFAULT_LAMBDA_GRID};
use meca::trainer::{train_run, write_metrics_csv, Method, TrainConfig};
use meca::verify::{run_check, Check, VerifyOptions};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "meca",
    version,
    about = "Minimal-entropy correlation alignment for domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic source/target pair as CSV.
    Gen(GenArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Train every λ on a grid and pick the one with the lowest target entropy.
    Sweep(SweepArgs),
    /// Run the bundled self-checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Blobs,
    Moons,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    #[value(name = "source_only")]
    SourceOnly,
    #[value(name = "entropy_reg")]
    EntropyReg,
    Coral,
    Meca,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::SourceOnly => Method::SourceOnly,
            MethodArg::EntropyReg => Method::EntropyReg,
            MethodArg::Coral => Method::CoralEuclidean,
            MethodArg::Meca => Method::MecaGeodesic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

/// Flags shared by `train` and `sweep`.
#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "meca")]
    method: MethodArg,
    /// Entropy weight for `entropy_reg`.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Seeds both the weight initialisation and the batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
    /// Layer whose activations are aligned (0 = inputs); defaults to the
    /// last hidden layer.
    #[arg(long)]
    alignment_layer: Option<usize>,
    #[arg(long, default_value_t = meca::spd::DEFAULT_JITTER_REL)]
    jitter: f64,
    /// Divide covariances by n − 1.
    #[arg(long)]
    normalize_cov: bool,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Alignment weight for `coral` and `meca`.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDA_GRID)]
    grid: Vec<f64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Comma-separated subset of: gradients, metric-axioms, aligned-domains,
    /// dummy-classifier.
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
    /// Perturb the analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Serialize)]
struct ConfigEcho {
    method: String,
    lambda_or_gamma: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
    layer_sizes: Vec<usize>,
    activation: String,
    alignment_layer_index: usize,
    jitter_rel: f64,
    normalize_cov: bool,
}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    config: ConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_lambda: Option<f64>,
    source: PathBuf,
    target: PathBuf,
    artifacts: Vec<PathBuf>,
    wall_clock_seconds: f64,
    version: String,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<MecaError> for Failure {
    fn from(e: MecaError) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            return Failure::Numerical(msg);
        }
        match e {
            MecaError::Io(_)
            | MecaError::BadMagic { .. }
            | MecaError::TruncatedFile { .. }
            | MecaError::CountMismatch { .. }
            | MecaError::ParseError { .. } => Failure::Io(msg),
            MecaError::InsufficientRecords { .. } => Failure::Numerical(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let command_line: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a, command_line),
        Command::Sweep(a) => cmd_sweep(&a, command_line),
        Command::Verify(a) => cmd_verify(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn cmd_gen(args: &GenArgs) -> CmdResult {
    let (source, target) = match args.preset {
        Preset::Blobs => rotated_blobs(args.seed)?,
        Preset::Moons => rotated_moons(args.seed)?,
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let s = args.out_dir.join("source.csv");
    let t = args.out_dir.join("target.csv");
    write_csv(&source, &s)?;
    write_csv(&target, &t)?;
    println!("wrote {} and {}", s.display(), t.display());
    Ok(())
}

struct Prepared {
    source: Dataset,
    target: Dataset,
    model: MlpModel,
    config: TrainConfig,
}

fn prepare(run: &RunArgs, weight: f64) -> Result<Prepared, Failure> {
    let source = read_csv(&run.source)?;
    let k = source
        .num_classes()
        .ok_or_else(|| Failure::Usage(format!("{} has no labels", run.source.display())))?;
    let target = read_csv(&run.target)?;
    if target.dim() != source.dim() {
        return Err(Failure::Usage(format!(
            "source has {} features, target {}",
            source.dim(),
            target.dim()
        )));
    }
    let target = match target.num_classes() {
        Some(kt) if kt > k => {
            return Err(Failure::Usage(format!(
                "target labels reach class {}, source has {k}",
                kt - 1
            )))
        }
        Some(_) => target.with_num_classes(k)?,
        None => target,
    };
    let mut sizes = vec![source.dim()];
    sizes.extend(&run.hidden);
    sizes.push(k);
    let model = MlpModel::init(&sizes, run.activation.into(), run.seed)?;
    let config = TrainConfig {
        method: run.method.into(),
        lambda_or_gamma: weight,
        epochs: run.epochs,
        batch_size: run.batch_size,
        learning_rate: run.lr,
        momentum: run.momentum,
        seed: run.seed,
        alignment_layer_index: run.alignment_layer,
        jitter_rel: run.jitter,
        normalize_cov: run.normalize_cov,
    };
    config.validate()?;
    config.objective(&model)?;
    Ok(Prepared {
        source,
        target,
        model,
        config,
    })
}

fn weight_for(run: &RunArgs, lambda: f64) -> f64 {
    match Method::from(run.method) {
        Method::EntropyReg => run.gamma,
        _ => lambda,
    }
}

fn echo(config: &TrainConfig, model: &MlpModel) -> ConfigEcho {
    ConfigEcho {
        method: config.method.name().to_string(),
        lambda_or_gamma: config.lambda_or_gamma,
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        seed: config.seed,
        layer_sizes: model.layer_sizes().to_vec(),
        activation: model.hidden_activation().to_string(),
        alignment_layer_index: config
            .alignment_layer_index
            .unwrap_or_else(|| model.penultimate_index()),
        jitter_rel: config.jitter_rel,
        normalize_cov: config.normalize_cov,
    }
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> CmdResult {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, command: Vec<String>) -> CmdResult {
    let started = Instant::now();
    let p = prepare(&args.run, weight_for(&args.run, args.lambda))?;
    let out = &args.run.out_dir;
    std::fs::create_dir_all(out)?;
    let echo = echo(&p.config, &p.model);

    let run = train_run(p.model, &p.source, &p.target, &p.config)?;
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&run.metrics, &metrics_path)?;
    let mut artifacts = vec![metrics_path];
    if let Some(err) = run.divergence_error() {
        return Err(err.into());
    }
    let model_path = out.join("model.bin");
    run.model
        .write_to(std::io::BufWriter::new(std::fs::File::create(&model_path)?))?;
    artifacts.push(model_path);
    let manifest_path = out.join("manifest.json");
    artifacts.push(manifest_path.clone());

    if let Some(last) = run.metrics.last() {
        let acc = last
            .target_accuracy
            .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "epoch {}: h_source {:.4} e_target {:.4} pen {:.4e} target_acc {acc}",
            last.epoch, last.h_source, last.e_target, last.pen_value
        );
    }
    write_manifest(
        &manifest_path,
        &RunManifest {
            command,
            config: echo,
            grid: None,
            selected_lambda: None,
            source: args.run.source.clone(),
            target: args.run.target.clone(),
            artifacts,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )
}

fn cmd_sweep(args: &SweepArgs, command: Vec<String>) -> CmdResult {
    let started = Instant::now();
    if Method::from(args.run.method) == Method::SourceOnly {
        return Err(Failure::Usage("source_only has no weight to sweep".into()));
    }
    let p = prepare(&args.run, args.grid.first().copied().unwrap_or(0.0))?;
    let out = &args.run.out_dir;
    let result = sweep(
        &p.config,
        &args.grid,
        &p.model,
        &p.source,
        &p.target,
        &SweepOptions {
            jobs: args.jobs,
            out_dir: Some(out.clone()),
        },
    )?;
    let summary_path = out.join("summary.csv");
    write_summary_csv(&result, &summary_path)?;

    for f in &result.failures {
        eprintln!("lambda {} failed: {}", f.lambda, f.reason);
    }
    println!(
        "selected lambda: {} ({})",
        result.selected_lambda, result.selection_rule
    );
    match selection_gap(&result) {
        Ok(gap) => println!("selection gap: {gap:.4}"),
        Err(e) => println!("selection gap: n/a ({e})"),
    }

    let mut artifacts: Vec<PathBuf> = result
        .records
        .iter()
        .filter_map(|r| r.metrics_path.clone())
        .collect();
    artifacts.push(summary_path);
    let manifest_path = out.join("manifest.json");
    artifacts.push(manifest_path.clone());
    write_manifest(
        &manifest_path,
        &RunManifest {
            command,
            config: echo(&p.config, &p.model),
            grid: Some(args.grid.clone()),
            selected_lambda: Some(result.selected_lambda),
            source: args.run.source.clone(),
            target: args.run.target.clone(),
            artifacts,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let checks: Vec<Check> = if args.checks.is_empty() {
        Check::ALL.to_vec()
    } else {
        args.checks
            .iter()
            .map(|s| s.parse::<Check>())
            .collect::<Result<_, _>>()?
    };
    let opts = VerifyOptions {
        corrupt_gradient: args.corrupt_gradient,
    };
    let mut failed = 0;
    for check in checks {
        let report = run_check(check, &opts);
        let tag = if report.passed { "PASS" } else { "FAIL" };
        println!("{tag} {check}: {}", report.detail);
        failed += usize::from(!report.passed);
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} check(s) failed")));
    }
    Ok(())
}
