use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ablatron::ablation::Granularity;
use ablatron::evaluation::{emit_report, load_report, EvalReport, Method, MissingSpec};
use ablatron::nn::{grad_check, GradCheckConfig};
use ablatron::pipeline::{evaluate_models, load_model, model_stem, save_model, train_all, ExperimentConfig, Variant};
use ablatron::preprocess::{read_dataset, write_dataset};
use ablatron::synthgen::{generate_dataset, GenConfig};
use ablatron::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

/// Largest gradcheck relative error that still counts as a pass.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "ablatron", version, about = "Random channel ablation for multimodal gesture classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (container plus .meta.json sidecar).
    Generate(GenerateArgs),
    /// Train standard and ablation models for every fold and seed.
    Train(RunArgs),
    /// Score stored models under every missing-channel regime.
    Evaluate(EvaluateArgs),
    /// Train, then evaluate, in one go.
    Experiment(RunArgs),
    /// Re-render the CSV/JSON files of a stored report.
    Report(ReportArgs),
    /// Check backprop gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_ablate: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Comma-separated regimes such as fixed:0,fixed:8,up-to:8.
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<MissingSpec>>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Directory holding the trained models; defaults to <out>/models.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored report.json.
    #[arg(long)]
    report: PathBuf,
    /// Directory for the re-rendered files; must differ from the source.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

/// Failure classes, one exit code each.
enum Failure {
    Invalid(String),
    Io(String),
    GradCheck(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
            Failure::GradCheck(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) | Failure::GradCheck(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        // unreadable or corrupt files are I/O failures; everything else is a
        // problem with what was asked for
        match e.root() {
            Error::Io { .. } | Error::Format { .. } => Failure::Io(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn generate(args: GenerateArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(p) => read_json(p)?,
        None => match args.preset {
            Preset::Desk => GenConfig::default(),
            Preset::Full => GenConfig::full_scale(),
        },
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let generated = generate_dataset(&config)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_dataset(&generated.dataset, &args.out)?;
    let r = &generated.redundancy;
    println!(
        "wrote {} frames ({}x{} ultrasound) to {}",
        generated.dataset.len(),
        generated.dataset.geometry.us_rows,
        generated.dataset.geometry.us_cols,
        args.out.display()
    );
    println!(
        "redundancy: every loss of {} channels ({} subsets) leaves >= {} distinguishing channels per class pair",
        r.n_missing, r.subsets, r.min_distinguishing
    );
    Ok(())
}

/// File, then flags; validated before any work starts.
fn experiment_config(args: &ExperimentArgs) -> CliResult<ExperimentConfig> {
    let mut c: ExperimentConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if args.dataset.is_some() {
        c.dataset = args.dataset.clone();
    }
    if args.out.is_some() {
        c.out = args.out.clone();
    }
    if let Some(s) = args.seed {
        c.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        c.seeds = s.clone();
    }
    if let Some(k) = args.max_ablate {
        c.train.max_ablate = k;
    }
    if let Some(t) = args.epochs {
        c.train.epochs = t;
    }
    if let Some(f) = args.folds {
        c.folds = f;
    }
    if let Some(g) = args.granularity {
        c.train.granularity = g;
    }
    if let Some(r) = &args.regimes {
        c.regimes = r.clone();
    }
    if let Some(j) = args.jobs {
        c.jobs = j;
    }
    c.validate()?;
    if c.dataset.is_none() {
        return Err(invalid("no dataset: pass --dataset or set \"dataset\" in the config"));
    }
    if c.out.is_none() {
        return Err(invalid("no output directory: pass --out or set \"out\" in the config"));
    }
    Ok(c)
}

fn paths(c: &ExperimentConfig) -> (&Path, &Path) {
    (
        c.dataset.as_deref().expect("checked in experiment_config"),
        c.out.as_deref().expect("checked in experiment_config"),
    )
}

fn train(args: &ExperimentArgs) -> CliResult<()> {
    let config = experiment_config(args)?;
    let (dataset_path, out) = paths(&config);
    let dataset = read_dataset(dataset_path)?;
    let models = train_all(&dataset, &config)?;
    let dir = out.join("models");
    for m in &models {
        let path = save_model(m, &dir)?;
        println!(
            "fold {} seed {} {:<8} train accuracy {:6.2}%  -> {}",
            m.fold.index,
            m.config.seed,
            m.variant.to_string(),
            m.train_accuracy,
            path.display()
        );
    }
    Ok(())
}

fn print_summary(report: &EvalReport) {
    print!("{:<10}", "regime");
    for m in Method::ALL {
        print!(" {:>10}", format!("{m:?}"));
    }
    println!();
    let mut regimes: Vec<(String, usize)> = Vec::new();
    for a in &report.aggregate {
        let key = (a.regime_mode.clone(), a.regime_value);
        if !regimes.contains(&key) {
            regimes.push(key);
        }
    }
    for (mode, value) in regimes {
        print!("{:<10}", format!("{mode}:{value}"));
        for m in Method::ALL {
            match report
                .aggregate
                .iter()
                .find(|a| a.regime_mode == mode && a.regime_value == value && a.method == m)
            {
                Some(a) => print!(" {:10.2}", a.mean_acc),
                None => print!(" {:>10}", "-"),
            }
        }
        println!();
    }
}

fn write_report(report: &EvalReport, out: &Path) -> CliResult<()> {
    for p in emit_report(report, out)? {
        info!("wrote {}", p.display());
    }
    print_summary(report);
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let config = experiment_config(&args.exp)?;
    let (dataset_path, out) = paths(&config);
    let dir = args.models.clone().unwrap_or_else(|| out.join("models"));
    let dataset = read_dataset(dataset_path)?;
    let mut models = Vec::new();
    for fold in 0..config.folds {
        for &seed in &config.seeds {
            for variant in [Variant::Standard, Variant::Robust] {
                let path = dir.join(format!("{}.json", model_stem(fold, seed, variant)));
                let m = load_model(&path)?;
                if m.fold.index != fold || m.config.seed != seed || m.variant != variant {
                    return Err(invalid(format!("{} does not hold the model its name says", path.display())));
                }
                models.push(m);
            }
        }
    }
    let report = evaluate_models(&dataset, &models, &config)?;
    write_report(&report, out)
}

fn experiment(args: &ExperimentArgs) -> CliResult<()> {
    train(args)?;
    evaluate(&EvaluateArgs {
        exp: args.clone(),
        models: None,
    })
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let source_dir = args.report.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let same = match (fs::canonicalize(source_dir), fs::canonicalize(&args.out)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(invalid("--out must differ from the directory of --report; inputs are never overwritten"));
    }
    let report = load_report(&args.report)?;
    write_report(&report, &args.out)
}

fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let seeds = match (&args.seeds, args.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s],
        (None, None) => vec![0],
    };
    let config = GradCheckConfig::tiny();
    let mut failed = Vec::new();
    for seed in seeds {
        let r = grad_check::<f64>(&config, seed)?;
        println!(
            "seed {seed}: max relative error {:.3e} at {} ({} values checked, {} kink probes skipped)",
            r.max_rel_error, r.worst, r.checked, r.kinks
        );
        if !(r.max_rel_error < GRADCHECK_TOL) {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(format!(
            "gradient check above {GRADCHECK_TOL:e} for seeds {failed:?}"
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABLATRON_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // printing to a closed pipe is not worth a second error
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(&a.exp),
        Command::Evaluate(a) => evaluate(&a),
        Command::Experiment(a) => experiment(&a.exp),
        Command::Report(a) => report(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
