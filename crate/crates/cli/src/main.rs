//! Command line front end: plan simulation, training, evaluation, drop-rate
//! sweeps, integrity scatter reports, and case filtering. Failures print a
//! single machine-readable JSON object to stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ifusion_core::config::{parse_config_with_overrides, DataConfig, RunConfig};
use ifusion_core::evaluation::{
    case_filter, cases_csv, compute_metrics, line_plot_svg, metrics_csv, mode_evaluation,
    modes_csv, ols_fit, predict_dataset, predictions_csv, scatter_csv, scatter_stats_csv,
    sweep_csv, sweep_drop_rates, OlsFit,
};
use ifusion_core::missingness::{mode_plan, sample_missing_plan, IntraMode, MissingPlan};
use ifusion_core::model::ModelState;
use ifusion_core::training::{load_splits, read_checkpoint, train};
use ifusion_core::{CounterRng, IfusionError, Modality, PerModality, Result};

#[derive(Parser)]
#[command(
    name = "ifusion",
    version,
    about = "Multimodal sentiment regression under missing modalities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a missingness plan and write it as JSON.
    Simulate(SimulateArgs),
    /// Run the two-stage training loop.
    Train(TrainArgs),
    /// Score one split under one missingness condition.
    Eval(EvalArgs),
    /// Score a split at drop rates 0.0 through 1.0 and under the six
    /// fixed retention modes.
    Sweep(SweepArgs),
    /// Dump integrity scatter data and regression statistics.
    Estimate(EstimateArgs),
    /// Select samples where our predictions hold up and a baseline fails.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of samples to plan for.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    drop_rate: f64,
    #[arg(long, default_value_t = 1112)]
    seed: u64,
    /// Language steps per sample.
    #[arg(long, default_value_t = 12)]
    steps_l: usize,
    /// Acoustic steps per sample.
    #[arg(long, default_value_t = 12)]
    steps_a: usize,
    /// Visual steps per sample.
    #[arg(long, default_value_t = 14)]
    steps_v: usize,
    /// Fix the surviving-step ratio instead of drawing it per sample.
    #[arg(long)]
    intra_ratio: Option<f64>,
    /// Output path for the plan JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. training.lr=2e-4.
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Output directory; falls back to out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from last.bin in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature archive directory overriding the checkpointed data source.
    #[arg(long)]
    archive: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Drop rate for the evaluation plan; the checkpointed rate applies
    /// when omitted.
    #[arg(long, conflicts_with = "mode")]
    drop_rate: Option<f64>,
    /// Fixed retention mode 0..=5 instead of a sampled plan.
    #[arg(long)]
    mode: Option<usize>,
    /// Treat every modality as complete at inference time.
    #[arg(long)]
    force_full_integrity: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    archive: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    force_full_integrity: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    archive: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    drop_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Our predictions CSV (id,label,prediction).
    #[arg(long)]
    ours: PathBuf,
    /// Baseline predictions CSV with the same ids.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    own_tol: f64,
    #[arg(long, default_value_t = 1.0)]
    base_tol: f64,
    /// Output path for cases.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| IfusionError::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, content).map_err(|e| IfusionError::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IfusionError::io(path.display().to_string(), e))
}

/// Restore a checkpointed model, optionally redirecting its data source to
/// a feature archive.
fn restore_model(checkpoint: &Path, archive: Option<String>) -> Result<(RunConfig, ModelState)> {
    let restored = read_checkpoint(checkpoint)?.restore()?;
    let mut config = restored.config;
    if let Some(dir) = archive {
        config.data = DataConfig::Archive { dir };
    }
    Ok((config, restored.model))
}

fn pick_split(config: &DataConfig, split: &str) -> Result<ifusion_core::data::Dataset> {
    let (train_set, valid_set, test_set) = load_splits(config)?;
    match split {
        "train" => Ok(train_set),
        "valid" => Ok(valid_set),
        "test" => Ok(test_set),
        other => Err(IfusionError::Config(format!(
            "unknown split {other:?}, expected train, valid, or test"
        ))),
    }
}

fn eval_plan(
    config: &RunConfig,
    dataset: &ifusion_core::data::Dataset,
    drop_rate: Option<f64>,
    mode: Option<usize>,
) -> Result<MissingPlan> {
    let steps = dataset.dims.map(|d| d.steps);
    if let Some(m) = mode {
        return mode_plan(m, dataset.len(), steps);
    }
    let rate = drop_rate.unwrap_or(config.missingness.drop_rate);
    let seed = CounterRng::new(config.seed)
        .derive_named("eval-plan")
        .next_u64();
    sample_missing_plan(dataset.len(), steps, rate, config.missingness.intra, seed)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => {
            let intra = match args.intra_ratio {
                Some(r) => IntraMode::Fixed(r),
                None => IntraMode::Uniform,
            };
            let steps = PerModality::new(args.steps_l, args.steps_a, args.steps_v);
            let plan = sample_missing_plan(args.n, steps, args.drop_rate, intra, args.seed)?;
            let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
            write_file(&args.out, &text)?;
            println!(
                "{}",
                serde_json::json!({ "samples": plan.len(), "out": args.out })
            );
            Ok(())
        }
        Command::Train(args) => {
            let document = match &args.config {
                Some(path) => read_file(path)?,
                None => String::new(),
            };
            let config = parse_config_with_overrides(&document, &args.sets)?;
            let out_dir = args
                .out
                .clone()
                .or_else(|| config.out_dir.clone().map(PathBuf::from))
                .ok_or_else(|| {
                    IfusionError::Config("no output directory: pass --out or set out_dir".into())
                })?;
            let outcome = train(&config, &out_dir, args.resume)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": outcome.out_dir,
                    "epochs_run": outcome.epochs_run,
                    "stopped_early": outcome.stopped_early,
                    "best_val_mae": outcome.best_val_mae,
                    "best_epoch": outcome.best_epoch,
                    "final_val_mae": outcome.final_val_mae,
                })
            );
            Ok(())
        }
        Command::Eval(args) => {
            let (config, model) = restore_model(&args.checkpoint, args.archive)?;
            let dataset = pick_split(&config.data, &args.split)?;
            let plan = eval_plan(&config, &dataset, args.drop_rate, args.mode)?;
            let eval = predict_dataset(
                &model,
                &dataset,
                &plan,
                config.training.batch_size,
                config.missingness.unknown_vector.as_deref(),
                args.force_full_integrity || config.ablation.force_full_integrity,
            )?;
            let metrics =
                compute_metrics(&eval.predictions, &eval.labels, config.metrics.weighted_f1)?;
            write_file(&args.out.join("resolved_config.json"), &config.to_json_pretty())?;
            write_file(&args.out.join("metrics.csv"), &metrics_csv(&metrics))?;
            write_file(&args.out.join("predictions.csv"), &predictions_csv(&eval))?;
            println!("{}", serde_json::to_string(&metrics).expect("serializes"));
            Ok(())
        }
        Command::Sweep(args) => {
            let (config, model) = restore_model(&args.checkpoint, args.archive)?;
            let dataset = pick_split(&config.data, &args.split)?;
            let unknown = config.missingness.unknown_vector.as_deref();
            let rows = sweep_drop_rates(
                &model,
                &dataset,
                config.missingness.intra,
                config.seed,
                config.training.batch_size,
                unknown,
                config.metrics.weighted_f1,
                args.force_full_integrity || config.ablation.force_full_integrity,
            )?;
            write_file(&args.out.join("sweep.csv"), &sweep_csv(&rows))?;
            let series = |f: &dyn Fn(&ifusion_core::evaluation::SweepRow) -> f64| {
                rows.iter()
                    .map(|r| (r.drop_rate, f(r)))
                    .collect::<Vec<_>>()
            };
            let mae = series(&|r| r.metrics.mae);
            let acc5 = series(&|r| r.metrics.acc5);
            let f1 = series(&|r| r.metrics.f1_nonzero.unwrap_or(f64::NAN));
            write_file(
                &args.out.join("sweep_mae.svg"),
                &line_plot_svg("MAE by modality drop rate", "MAE", &mae),
            )?;
            write_file(
                &args.out.join("sweep_acc5.svg"),
                &line_plot_svg("Acc-5 by modality drop rate", "Acc-5", &acc5),
            )?;
            write_file(
                &args.out.join("sweep_f1.svg"),
                &line_plot_svg("Nonzero F1 by modality drop rate", "F1", &f1),
            )?;
            let modes = mode_evaluation(
                &model,
                &dataset,
                config.training.batch_size,
                unknown,
                config.metrics.weighted_f1,
            )?;
            write_file(&args.out.join("modes.csv"), &modes_csv(&modes))?;
            println!(
                "{}",
                serde_json::json!({ "rates": rows.len(), "modes": modes.len(), "out": args.out })
            );
            Ok(())
        }
        Command::Estimate(args) => {
            let (config, model) = restore_model(&args.checkpoint, args.archive)?;
            let dataset = pick_split(&config.data, &args.split)?;
            let plan = eval_plan(&config, &dataset, args.drop_rate, None)?;
            let eval = predict_dataset(
                &model,
                &dataset,
                &plan,
                config.training.batch_size,
                config.missingness.unknown_vector.as_deref(),
                false,
            )?;
            let fits: PerModality<Option<OlsFit>> = PerModality::from_fn(|m| {
                ols_fit(eval.integrity_true.get(m), eval.integrity_predicted.get(m))
            });
            for m in Modality::ALL {
                write_file(
                    &args.out.join(format!("scatter_{}.csv", m.short_name())),
                    &scatter_csv(&eval, m),
                )?;
            }
            write_file(&args.out.join("scatter_stats.csv"), &scatter_stats_csv(&fits))?;
            println!("{}", serde_json::to_string(&fits).expect("serializes"));
            Ok(())
        }
        Command::Report(args) => {
            let ours = read_predictions(&args.ours)?;
            let baseline = read_predictions(&args.baseline)?;
            if ours.ids != baseline.ids {
                return Err(IfusionError::Data(
                    "prediction files cover different ids".into(),
                ));
            }
            let selected = case_filter(
                &ours.predictions,
                &baseline.predictions,
                &ours.labels,
                args.own_tol,
                args.base_tol,
            );
            let text = cases_csv(
                &ours.ids,
                &ours.labels,
                &ours.predictions,
                &baseline.predictions,
                &selected,
            );
            write_file(&args.out, &text)?;
            println!(
                "{}",
                serde_json::json!({ "selected": selected.len(), "out": args.out })
            );
            Ok(())
        }
    }
}

struct PredictionFile {
    ids: Vec<String>,
    labels: Vec<f64>,
    predictions: Vec<f64>,
}

fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| IfusionError::Data(format!("{} is empty", path.display())))?;
    if header.trim() != "id,label,prediction" {
        return Err(IfusionError::Data(format!(
            "{} must start with id,label,prediction",
            path.display()
        )));
    }
    let mut out = PredictionFile {
        ids: Vec::new(),
        labels: Vec::new(),
        predictions: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let id = parts
            .next()
            .ok_or_else(|| IfusionError::Data(format!("row {} is malformed", i + 2)))?;
        let label = parts
            .next()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| {
                IfusionError::Data(format!("row {} has an unreadable label", i + 2))
            })?;
        let pred = parts
            .next()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| {
                IfusionError::Data(format!("row {} has an unreadable prediction", i + 2))
            })?;
        out.ids.push(id.to_string());
        out.labels.push(label);
        out.predictions.push(pred);
    }
    if out.ids.is_empty() {
        return Err(IfusionError::Data(format!(
            "{} holds no prediction rows",
            path.display()
        )));
    }
    Ok(out)
}
