//! `dinomaly` command-line front end.

pub mod config;
pub mod plot;
pub mod predictions;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dinomaly_core::checkpoint::load_checkpoint;
use dinomaly_core::data::{load_mvtec_layout, synth_dataset, DatasetIndex, SampleRecord, Split};
use dinomaly_core::metrics::EvalReport;
use dinomaly_core::trainer::{predict, report_from_predictions, train, train_per_class, Prediction, TrainMode};
use dinomaly_core::{Error, ErrorCategory, Result};

use config::{parse_config_text, parse_flag_overrides, resolve, RunConfig, OUT_ENV};
use predictions::{read_predictions, write_predictions, PredictionMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const PREDICTIONS_DIR: &str = "predictions";
pub const PLOTS_DIR: &str = "plots";
pub const EVAL_STEM: &str = "eval";
pub const METRICS_STEM: &str = "metrics";

#[derive(Parser, Debug)]
#[command(
    name = "dinomaly",
    version,
    about = "Multi-class unsupervised anomaly detection by feature reconstruction",
    after_long_help = config::key_table()
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-class dataset under data.root
    Synth(Common),
    /// Train a model on the training split of data.root
    Train(Common),
    /// Score the test split and write the metric report
    Evaluate(Common),
    /// Score the test split and dump maps, heatmaps and scores only
    Predict(Common),
    /// Recompute the metric report from dumped predictions
    Metrics(Common),
    /// Render ROC curves, score histograms and heatmap panels
    Plot(Common),
}

#[derive(Args, Debug)]
pub struct Common {
    /// `key = value` configuration file
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, after all other options
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Train(c)
            | Command::Evaluate(c)
            | Command::Predict(c)
            | Command::Metrics(c)
            | Command::Plot(c) => c,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::Metrics(_) => "metrics",
            Command::Plot(_) => "plot",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Numerical => EXIT_NUMERICAL,
    }
}

/// Builds the run configuration from the file, environment and flags.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let file = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let env = std::env::var(OUT_ENV).ok();
    resolve(&file, env.as_deref(), &parse_flag_overrides(&common.overrides)?)
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = load_config(cli.command.common()).and_then(|cfg| execute(&cli.command, &cfg));
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("dinomaly {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Runs one command with a resolved configuration and returns a summary line.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<String> {
    cfg.echo(&cfg.output_dir)?;
    match command {
        Command::Synth(_) => cmd_synth(cfg),
        Command::Train(_) => cmd_train(cfg),
        Command::Evaluate(_) => cmd_evaluate(cfg),
        Command::Predict(_) => cmd_predict(cfg).map(|(n, dir)| format!("wrote {n} predictions to {}", dir.display())),
        Command::Metrics(_) => cmd_metrics(cfg),
        Command::Plot(_) => cmd_plot(cfg),
    }
}

fn dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    load_mvtec_layout(cfg.data_root()?)
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let root = cfg.data_root()?;
    let manifest = synth_dataset(&cfg.synth, root)?;
    Ok(format!(
        "wrote {} classes ({} train, {} test images each) to {}",
        manifest.classes.len(),
        cfg.synth.train_per_class,
        cfg.synth.test_per_class,
        root.display()
    ))
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let data = dataset(cfg)?;
    let out = &cfg.output_dir;
    let last_loss = |log: &[dinomaly_core::trainer::LogRow]| log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    match cfg.train.mode {
        TrainMode::Unified => {
            let o = train(&cfg.train, &data, Some(out))?;
            Ok(format!(
                "trained {} iterations on {} classes, final loss {:.6}; checkpoint {}",
                cfg.train.total_iters,
                data.classes.len(),
                last_loss(&o.log),
                out.join("final.ckpt").display()
            ))
        }
        TrainMode::ClassSeparated => {
            let runs = train_per_class(&cfg.train, &data, Some(out))?;
            let parts: Vec<String> = runs
                .iter()
                .map(|(c, o)| format!("{c}: {:.6}", last_loss(&o.log)))
                .collect();
            Ok(format!(
                "trained {} per-class models for {} iterations each; final losses {}",
                runs.len(),
                cfg.train.total_iters,
                parts.join(", ")
            ))
        }
    }
}

/// Scores every test image with the unified checkpoint, or with each class's
/// own checkpoint in class-separated mode.
fn score_test_split(cfg: &RunConfig) -> Result<(PredictionMeta, Vec<Prediction>)> {
    let data = dataset(cfg)?;
    let eval = &cfg.train.eval;
    let mut jobs: Vec<(PathBuf, Vec<&SampleRecord>)> = Vec::new();
    match cfg.train.mode {
        TrainMode::Unified => jobs.push((cfg.checkpoint.clone(), data.split(Split::Test).collect())),
        TrainMode::ClassSeparated => {
            for class in &data.classes {
                let ckpt = if cfg.entries["checkpoint"] == cfg.output_dir.join("final.ckpt").display().to_string() {
                    cfg.output_dir.join(class).join("final.ckpt")
                } else {
                    cfg.checkpoint.clone()
                };
                jobs.push((ckpt, data.class_split(class, Split::Test).collect()));
            }
        }
    }
    let mut preds = Vec::new();
    let mut preprocess = None;
    for (ckpt, samples) in jobs {
        if samples.is_empty() {
            continue;
        }
        let (model, meta) = load_checkpoint(&ckpt)?;
        preds.extend(predict(&model, &samples, &meta.preprocess, eval)?);
        preprocess = Some(meta.preprocess);
    }
    let preprocess = preprocess.ok_or_else(|| Error::data("the dataset has no test images"))?;
    let meta = PredictionMeta {
        eval_size: eval.eval_size,
        top_fraction: eval.top_fraction,
        preprocess,
        aupro: eval.aupro,
    };
    Ok((meta, preds))
}

fn cmd_predict(cfg: &RunConfig) -> Result<(usize, PathBuf)> {
    let (meta, preds) = score_test_split(cfg)?;
    let dir = cfg.output_dir.join(PREDICTIONS_DIR);
    write_predictions(&dir, &meta, &preds, true)?;
    Ok((preds.len(), dir))
}

fn summarize(report: &EvalReport, path: &Path) -> String {
    let m = &report.mean;
    format!(
        "mean I-AUROC {:.4} P-AUROC {:.4} P-AUPRO {:.4} over {} classes; report {}",
        m.i_auroc,
        m.p_auroc,
        m.p_aupro,
        report.per_class.len(),
        path.display()
    )
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let (meta, preds) = score_test_split(cfg)?;
    write_predictions(&cfg.output_dir.join(PREDICTIONS_DIR), &meta, &preds, true)?;
    let report = report_from_predictions(&preds, &meta.aupro)?;
    report.write(&cfg.output_dir, EVAL_STEM)?;
    Ok(summarize(&report, &cfg.output_dir.join(format!("{EVAL_STEM}.csv"))))
}

fn cmd_metrics(cfg: &RunConfig) -> Result<String> {
    let (meta, preds) = read_predictions(&cfg.output_dir.join(PREDICTIONS_DIR))?;
    let report = report_from_predictions(&preds, &meta.aupro)?;
    report.write(&cfg.output_dir, METRICS_STEM)?;
    Ok(summarize(&report, &cfg.output_dir.join(format!("{METRICS_STEM}.csv"))))
}

fn cmd_plot(cfg: &RunConfig) -> Result<String> {
    let pred_dir = cfg.output_dir.join(PREDICTIONS_DIR);
    let report_path = cfg.output_dir.join(format!("{EVAL_STEM}.json"));
    let mut expected = predictions::expected_files(&pred_dir);
    expected.push(report_path.clone());
    predictions::require_files(&expected)?;
    let report = EvalReport::read_json(&report_path)?;
    let (meta, preds) = read_predictions(&pred_dir)?;
    let mut by_class: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in &preds {
        by_class.entry(p.sample.class_name.as_str()).or_default().push(p);
    }
    let root = cfg.output_dir.join(PLOTS_DIR);
    for (salt, (class, items)) in by_class.iter().enumerate() {
        if !report.per_class.contains_key(*class) {
            return Err(Error::data_at(&report_path, format!("report has no row for class '{class}'")));
        }
        let dir = root.join(class);
        let scores: Vec<f64> = items.iter().map(|p| p.image_score).collect();
        let labels: Vec<bool> = items.iter().map(|p| p.sample.is_anomalous()).collect();
        let roc = plot::roc_plot(class, &scores, &labels)?;
        plot::save_with_data(&dir, "roc", &plot::render_roc(&roc), &roc)?;
        let hist = plot::score_histogram(class, &scores, &labels, plot::HISTOGRAM_BINS)?;
        plot::save_with_data(&dir, "histogram", &plot::render_histogram(&hist), &hist)?;
        let chosen = plot::choose_panel_samples(items.len(), cfg.plot_samples, cfg.train.seed, salt as u64);
        if !chosen.is_empty() {
            let picked: Vec<&Prediction> = chosen.iter().map(|&i| items[i]).collect();
            let panel = plot::PanelPlot {
                class_name: class.to_string(),
                ids: picked.iter().map(|p| p.sample.id.clone()).collect(),
            };
            let img = plot::render_panel(&picked, &meta.preprocess)?;
            plot::save_with_data(&dir, "panel", &img, &panel)?;
        }
    }
    Ok(format!("wrote plots for {} classes to {}", by_class.len(), root.display()))
}
