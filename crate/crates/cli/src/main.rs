use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use fishnet::classify::SoftmaxModel;
use fishnet::curate::{assign_labels, canonical_order, CurateError};
use fishnet::forest::kfold_cv;
use fishnet::geom::BBox;
use fishnet::pipeline::{self, observe_dataset, report_csv, PipelineConfig, PipelineError};
use fishnet::synthgen::{generate_dataset, GeneratorConfig, LightingConfig, SynthError};

/// Bad configuration or arguments (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "fishnet", version, about = "Synthetic fish measuring-board pipeline")]
struct Cli {
    /// Pipeline config (JSON); command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train the length regressor on a dataset and report k-fold CV.
    TrainLength(TrainArgs),
    /// Train the species classifier on a dataset.
    TrainSpecies(TrainArgs),
    /// Run the full pipeline on a dataset and write results and reports.
    Run(RunArgs),
    /// Rebuild reports from a results file.
    Evaluate(EvaluateArgs),
    /// Match an annotation list to fish posteriors.
    Disambiguate(DisambiguateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator settings (JSON).
    #[arg(long)]
    generator_config: Option<PathBuf>,
    /// Lighting settings (JSON).
    #[arg(long)]
    lighting_config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Where to write the model.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    length_model: Option<PathBuf>,
    #[arg(long)]
    species_model: Option<PathBuf>,
    /// Train models in-run with scene-level cross-fitting.
    #[arg(long)]
    train: bool,
    #[arg(long, env = "FISHNET_REPORT_DIR")]
    report_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, env = "FISHNET_REPORT_DIR")]
    report_dir: Option<PathBuf>,
    /// Format printed to stdout; both are always written.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct DisambiguateArgs {
    /// JSON with `posteriors`, `labels` and optional `boxes` and `epsilon`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DisambiguateInput {
    posteriors: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default)]
    boxes: Option<Vec<BBox>>,
    #[serde(default)]
    epsilon: Option<f64>,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let gen: GeneratorConfig = match &args.generator_config {
        Some(p) => load_json(p)?,
        None => GeneratorConfig::default(),
    };
    let lighting: LightingConfig = match &args.lighting_config {
        Some(p) => load_json(p)?,
        None => LightingConfig::default(),
    };
    let summary = base_config(cli)?
        .install(|| generate_dataset(&gen, &lighting, args.scenes, args.seed, &args.out))?
        .with_context(|| format!("generating into {}", args.out.display()))?;
    println!("{}", summary.manifest_path.display());
    println!("scenes: {}  fish: {}", summary.n_scenes, summary.n_fish);
    Ok(())
}

fn dataset_of(cfg: &PipelineConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone().or_else(|| cfg.dataset_dir.clone()).ok_or_else(|| config_err("--dataset is required"))
}

fn cmd_train_length(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = dataset_of(&cfg, &args.dataset)?;
    let (model, cv) = cfg.install(|| -> Result<_> {
        let obs = observe_dataset(&dataset, &cfg, false)?;
        let (x, y) = pipeline::length_rows(&obs.scenes);
        if x.len() < cfg.folds {
            bail!(PipelineError::Data(format!("{} training fish, need at least {}", x.len(), cfg.folds)));
        }
        let cv_params = fishnet::forest::ForestParams { seed: fishnet::seed::stage_seed(cfg.seed, "forest-cv", 0), ..cfg.forest.clone() };
        let cv = kfold_cv(&x, &y, cfg.folds, &cv_params, fishnet::seed::stage_seed(cfg.seed, "folds", 0))
            .map_err(PipelineError::from)?;
        let model = pipeline::train_length_model(&obs.scenes, &cfg, 0)?;
        Ok((model, cv))
    })??;
    model.save(&args.out).map_err(PipelineError::from)?;
    let summary = serde_json::json!({
        "model": args.out.display().to_string(),
        "trees": model.trees.len(),
        "folds": cv.k,
        "cv_mae_cm": cv.pooled_mae_cm,
        "cv_r2": cv.pooled_r2,
        "fold_mae_cm": cv.folds.iter().map(|f| f.mae_cm).collect::<Vec<_>>(),
        "split_counts": model.split_counts(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_train_species(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = dataset_of(&cfg, &args.dataset)?;
    let (model, accuracy) = cfg.install(|| -> Result<(SoftmaxModel, f64)> {
        let obs = observe_dataset(&dataset, &cfg, true)?;
        let model = pipeline::train_species_model(&obs.scenes, obs.n_species, &cfg, 0)?;
        let (x, y) = pipeline::species_rows(&obs.scenes);
        let mut correct = 0usize;
        for (d, &t) in x.iter().zip(&y) {
            correct += usize::from(fishnet::classify::predict_posterior(&model, d).map_err(PipelineError::from)?.argmax() == t);
        }
        Ok((model, correct as f64 / x.len() as f64))
    })??;
    model.save(&args.out).map_err(PipelineError::from)?;
    let summary = serde_json::json!({
        "model": args.out.display().to_string(),
        "classes": model.n_classes,
        "final_loss": model.final_loss(),
        "training_top1": accuracy,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(d) = &args.dataset {
        cfg.dataset_dir = Some(d.clone());
    }
    if let Some(m) = &args.length_model {
        cfg.length_model = Some(m.clone());
    }
    if let Some(m) = &args.species_model {
        cfg.species_model = Some(m.clone());
    }
    if let Some(r) = &args.report_dir {
        cfg.report_dir = Some(r.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = pipeline::run(&cfg, args.train)?;
    info!("wrote {}", out.results_path.display());
    println!("results: {}", out.results_path.display());
    for f in &out.files {
        println!("report: {}", f.display());
    }
    println!(
        "scenes: {}  evaluated: {}  discarded (no fiducial): {}  corrupt: {}",
        out.report.n_scenes,
        out.report.n_evaluated,
        out.report.n_discarded_no_fiducial,
        out.report.corrupt_scenes.len()
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let dir = args
        .report_dir
        .clone()
        .or(cfg.report_dir)
        .or_else(|| args.results.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    if !args.results.exists() {
        bail!(PipelineError::Data(format!("{}: results file not found", args.results.display())));
    }
    let (report, _) = pipeline::evaluate(&args.results, &dir)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => print!("{}", report_csv(&report)),
    }
    Ok(())
}

fn cmd_disambiguate(args: &DisambiguateArgs) -> Result<()> {
    let input: DisambiguateInput = load_json(&args.input)?;
    let n = input.posteriors.len();
    let prior = match &input.boxes {
        Some(b) if b.len() == n && n > 0 => canonical_order(b)?,
        Some(b) if b.len() != n => return Err(config_err(format!("{} boxes for {n} posteriors", b.len()))),
        _ => (0..n).collect(),
    };
    let eps = input.epsilon.unwrap_or(fishnet::curate::DEFAULT_EPSILON);
    match assign_labels(&input.posteriors, &input.labels, &prior, eps) {
        Ok(a) => {
            println!("{}", serde_json::to_string_pretty(&a)?);
            Ok(())
        }
        Err(e @ CurateError::CountMismatch { .. }) => Err(anyhow!(e).context("routed to manual review")),
        Err(e) => Err(config_err(e.to_string())),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return if p.is_config() { 2 } else { 3 };
        }
        if let Some(SynthError::Config(_)) = cause.downcast_ref::<SynthError>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, a),
        Command::TrainLength(a) => cmd_train_length(&cli, a),
        Command::TrainSpecies(a) => cmd_train_species(&cli, a),
        Command::Run(a) => cmd_run(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::Disambiguate(a) => cmd_disambiguate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
