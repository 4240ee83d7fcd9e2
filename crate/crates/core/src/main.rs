use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use giim::case::ViewId;
use giim::checkpoint::{load_checkpoint, save_checkpoint};
use giim::data::{generate_synthetic, load_dataset, save_dataset, split_by_patient, SyntheticSpec};
use giim::experiments::{run_gradcheck, run_sweep, GRADCHECK_WIDTHS};
use giim::imputation::ImputerKind;
use giim::model::{Architecture, REFERENCE_HIDDEN};
use giim::optim::AdamConfig;
use giim::train::{derive_seed, evaluate, train, EvalMode, TrainConfig};
use giim::{Dataset, Error, Task};

/// Multi-view graph classification with missing-view imputation.
#[derive(Parser)]
#[command(name = "giim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest.json + cases.jsonl in --out).
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate over missing rates × imputers.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    patients: usize,
    #[arg(long, default_value_t = 1)]
    lesions_min: usize,
    #[arg(long, default_value_t = 3)]
    lesions_max: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Make the label depend on the combination of views 0 and 1.
    #[arg(long)]
    interaction: bool,
    #[arg(long, value_enum, default_value_t = TaskArg::Lesion)]
    task: TaskArg,
    /// Seed for the prototypes; defaults to --seed.
    #[arg(long)]
    prototype_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Lesion,
    Exam,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Lesion => Task::Lesion,
            TaskArg::Exam => Task::Exam,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Giim,
    Nn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Miss,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cases: PathBuf,
    /// Must match the manifest's task when given.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// View treated as missing, by name or index; defaults to the last view.
    #[arg(long)]
    missing_view: Option<String>,
    #[arg(long, default_value = "constant")]
    imputer: String,
    #[arg(long, value_enum, default_value_t = ArchArg::Giim)]
    arch: ArchArg,
    /// Comma-separated hidden widths (one value for the nn baseline).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Centered pseudo-inverse scoring for the covariance imputer.
    #[arg(long)]
    centered_covariance: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Separate test cases; without it the cases are split by patient.
    #[arg(long)]
    test_cases: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,0.7,1")]
    eta: Vec<f64>,
    /// Comma-separated imputers; `--imputer` is ignored by sweep.
    #[arg(long, value_delimiter = ',', default_value = "constant,learnable,rag,covariance")]
    imputers: Vec<String>,
    /// Write the JSON-lines table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut spec = SyntheticSpec::random(
        a.patients,
        (a.lesions_min, a.lesions_max),
        a.classes,
        a.views,
        a.width,
        a.noise,
        a.interaction,
        a.task.into(),
        a.prototype_seed.unwrap_or(a.seed),
    );
    spec.seed = a.seed;
    spec.validate().map_err(usage)?;
    let dataset = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::from(e).context(format!("creating {}", a.out.display())))?;
    let (manifest, cases) = data_paths(&a.out);
    save_dataset(&dataset, &manifest, &cases)?;
    println!(
        "{}",
        serde_json::json!({
            "patients": dataset.len(),
            "lesions": dataset.lesion_count(),
            "manifest": manifest.display().to_string(),
            "cases": cases.display().to_string(),
        })
    );
    Ok(())
}

fn data_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("manifest.json"), dir.join("cases.jsonl"))
}

fn load(data: &DataArgs) -> Result<Dataset, Failure> {
    let dataset = load_dataset(&data.manifest, &data.cases)?;
    check_task(&dataset, data.task)?;
    Ok(dataset)
}

fn check_task(dataset: &Dataset, task: Option<TaskArg>) -> Result<(), Failure> {
    match task.map(Task::from) {
        Some(t) if t != dataset.manifest.task => Err(usage(format!(
            "--task {t} does not match the manifest task {}",
            dataset.manifest.task
        ))),
        _ => Ok(()),
    }
}

/// Builds a training configuration from flags; every check happens here,
/// before any training.
fn train_config(m: &ModelArgs, dataset: &Dataset, eta: f64) -> Result<TrainConfig, Failure> {
    let manifest = &dataset.manifest;
    let missing_view = match &m.missing_view {
        Some(s) => manifest.resolve_view(s).map_err(usage)?,
        None => ViewId(manifest.views() - 1),
    };
    let imputer: ImputerKind = m.imputer.parse().map_err(usage)?;
    let architecture = match m.arch {
        ArchArg::Giim => Architecture::Giim {
            hidden: m.hidden.clone().unwrap_or_else(|| REFERENCE_HIDDEN.to_vec()),
        },
        ArchArg::Nn => {
            let hidden = match m.hidden.as_deref() {
                None => 64,
                Some([h]) => *h,
                Some(_) => return Err(usage("the nn baseline takes a single --hidden width")),
            };
            Architecture::Nn {
                hidden,
                input_views: Vec::new(),
            }
        }
    };
    let config = TrainConfig {
        epochs: m.epochs,
        adam: AdamConfig::with_lr(m.lr),
        eta,
        centered_covariance: m.centered_covariance,
        ..TrainConfig::new(architecture, imputer, missing_view, m.seed)
    };
    config.validate(manifest).map_err(usage)?;
    if let Architecture::Giim { hidden } = &config.architecture {
        if hidden.contains(&0) {
            return Err(usage("hidden widths must be ≥ 1"));
        }
    }
    Ok(config)
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let dataset = load(&a.data)?;
    let config = train_config(&a.model, &dataset, a.eta)?;
    let (model, history) = train(&dataset, &config)?;
    for record in &history {
        println!("{}", serde_json::to_string(record).map_err(Error::from)?);
    }
    save_checkpoint(&model, &a.checkpoint)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let dataset = load(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.manifest != dataset.manifest {
        return Err(Failure::Runtime(Error::Config(
            "dataset manifest differs from the checkpoint's manifest".into(),
        )));
    }
    let mode = match a.mode {
        ModeArg::Full => EvalMode::FullView,
        ModeArg::Miss => EvalMode::MissView,
    };
    let report = evaluate(&model, &dataset, mode)?;
    let mut record = serde_json::to_value(&report).map_err(Error::from)?;
    record["mode"] = serde_json::Value::from(mode.to_string());
    println!("{record}");
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Failure> {
    let imputers = a
        .imputers
        .iter()
        .map(|s| s.parse::<ImputerKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    if let Some(e) = a.eta.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(usage(format!("--eta value {e} outside [0, 1]")));
    }
    if a.test_cases.is_none() && !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(usage("--test-fraction must be in (0, 1)"));
    }
    let dataset = load(&a.data)?;
    let base = train_config(&a.model, &dataset, 0.0)?;
    let (train_set, test_set) = match &a.test_cases {
        Some(path) => {
            let test = load_dataset(&a.data.manifest, path)?;
            (dataset, test)
        }
        None => split_by_patient(&dataset, a.test_fraction, derive_seed(base.seed, 0x5))?,
    };
    let table = run_sweep(&train_set, &test_set, &a.eta, &imputers, &base)?;
    let lines = table.to_json_lines()?;
    match &a.out {
        Some(path) => {
            fs::write(path, &lines).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
        }
        None => print!("{lines}"),
    }
    eprint!("{}", table.render());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), Failure> {
    let widths = a.widths.unwrap_or_else(|| GRADCHECK_WIDTHS.to_vec());
    if widths.is_empty() || widths.iter().any(|&w| w == 0 || w >= 16) {
        return Err(usage("--widths must be values in 1..16"));
    }
    let report = run_gradcheck(&widths, a.seed)?;
    for g in &report.groups {
        println!("{}", serde_json::to_string(g).map_err(Error::from)?);
    }
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": report.max_rel_error,
            "passed": report.passed,
        })
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Argument(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error
        ))))
    }
}
