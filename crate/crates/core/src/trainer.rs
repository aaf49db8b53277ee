//! Training loop, evaluation and prediction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{preprocess_mask, DatasetIndex, EncoderBackend, EncoderSpec, PreprocessSpec, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{class_metrics, AuproConfig, ClassPredictions, EvalReport, MetricRow};
use crate::model::{DinomalyModel, ReconstructorConfig};
use crate::objective::{global_hm_loss, HardMiningConfig};
use crate::optim::{lr_at, OptimConfig, StableAdamW};
use crate::resample::resize_nearest;
use crate::scoring::{anomaly_map, image_score, AnomalyMap, DEFAULT_EVAL_SIZE, DEFAULT_TOP_FRACTION};
use crate::seeding::stream;
use crate::tensor::{Module, TokenGrid};

/// Consecutive non-finite losses tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: usize = 10;
/// Encoder features are cached in memory when they fit under this size.
pub const FEATURE_BANK_LIMIT_BYTES: usize = 1 << 30;

const SAMPLING_STREAM: u64 = 0x7472_6169_6e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One model for every class, batches mixed across classes.
    Unified,
    /// One model per class.
    ClassSeparated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// I.i.d. draws from the pooled training set.
    Uniform,
    /// Draw a class uniformly, then an image within it.
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub eval_size: (usize, usize),
    pub top_fraction: f64,
    pub aupro: AuproConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_size: DEFAULT_EVAL_SIZE,
            top_fraction: DEFAULT_TOP_FRACTION,
            aupro: AuproConfig::default(),
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sampling: Sampling,
    pub encoder: EncoderSpec,
    /// `None` selects the middle eight encoder layers.
    pub collected_layers: Option<Vec<usize>>,
    pub reconstructor: ReconstructorConfig,
    pub hard_mining: HardMiningConfig,
    pub optim: OptimConfig,
    pub preprocess: PreprocessSpec,
    pub eval: EvalConfig,
    /// Evaluate on the test split every this many iterations; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::unified(EncoderSpec::default(), 64)
    }
}

impl TrainConfig {
    /// Multi-class defaults for an encoder of width `dim`.
    pub fn unified(encoder: EncoderSpec, dim: usize) -> Self {
        let preprocess = match &encoder {
            EncoderSpec::ToyVit(cfg) => PreprocessSpec::square(cfg.image_size),
            EncoderSpec::FeatureCache { .. } => PreprocessSpec::default(),
        };
        Self {
            mode: TrainMode::Unified,
            total_iters: 10_000,
            batch_size: 16,
            seed: 0,
            sampling: Sampling::Uniform,
            encoder,
            collected_layers: None,
            reconstructor: ReconstructorConfig::for_dim(dim),
            hard_mining: HardMiningConfig::default(),
            optim: OptimConfig::default(),
            preprocess,
            eval: EvalConfig::default(),
            eval_every: 0,
        }
    }

    /// Per-class defaults: shorter schedule and hard-mining ramp.
    pub fn class_separated(encoder: EncoderSpec, dim: usize) -> Self {
        let mut cfg = Self::unified(encoder, dim).with_iters(5_000);
        cfg.mode = TrainMode::ClassSeparated;
        cfg.hard_mining.warmup_iters = 500;
        cfg
    }

    /// Sets the iteration count and the learning-rate schedule length together.
    pub fn with_iters(mut self, iters: usize) -> Self {
        self.total_iters = iters;
        self.optim.total_iters = iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.optim.total_iters != self.total_iters {
            return Err(Error::config(format!(
                "learning-rate schedule spans {} iterations but training runs {}",
                self.optim.total_iters, self.total_iters
            )));
        }
        if self.eval.batch_size == 0 || self.eval.eval_size.0 == 0 || self.eval.eval_size.1 == 0 {
            return Err(Error::config("evaluation batch size and size must be positive"));
        }
        if !(self.eval.top_fraction > 0.0 && self.eval.top_fraction <= 1.0) {
            return Err(Error::config("top fraction for image scores must lie in (0, 1]"));
        }
        if let EncoderSpec::ToyVit(v) = &self.encoder {
            if self.preprocess.center_crop_to != v.image_size {
                return Err(Error::config(format!(
                    "preprocessing yields {}px crops but the toy encoder takes {}px",
                    self.preprocess.center_crop_to, v.image_size
                )));
            }
        }
        self.preprocess.validate()?;
        self.reconstructor.validate()?;
        self.hard_mining.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub k: f64,
    pub lr: f64,
    pub shrunk_fraction: f64,
    pub clip_fraction: f64,
    pub effective_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestEval {
    pub iteration: usize,
    pub report: EvalReport,
}

pub struct TrainOutcome {
    pub model: DinomalyModel,
    pub log: Vec<LogRow>,
    pub best: Option<BestEval>,
    pub encoder_checksum: u64,
}

/// Draws one batch of training indices. `class_of[i]` is the class of
/// sample `i`; `members[c]` lists the samples of class `c`.
pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    class_of: &[usize],
    members: &[Vec<usize>],
    sampling: Sampling,
    batch: usize,
) -> Vec<usize> {
    (0..batch)
        .map(|_| match sampling {
            Sampling::Uniform => rng.random_range(0..class_of.len()),
            Sampling::ClassBalanced => {
                let pool = &members[rng.random_range(0..members.len())];
                pool[rng.random_range(0..pool.len())]
            }
        })
        .collect()
}

/// Collected encoder layers for the training set, either held in memory or
/// recomputed per batch when too large.
struct FeatureSource<'a> {
    samples: Vec<&'a SampleRecord>,
    bank: Option<Vec<Vec<Array2<f32>>>>,
    grid: (usize, usize),
}

impl<'a> FeatureSource<'a> {
    fn build(model: &DinomalyModel, samples: Vec<&'a SampleRecord>, cfg: &TrainConfig) -> Result<Self> {
        let grid = model.encoder.grid();
        let bytes = samples.len() * model.collected_layers.len() * grid.0 * grid.1 * model.encoder.dim() * 4;
        let bank = if bytes <= FEATURE_BANK_LIMIT_BYTES {
            let mut bank = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(cfg.eval.batch_size) {
                let layers = model.encode_collected(chunk, &cfg.preprocess)?;
                for i in 0..chunk.len() {
                    bank.push(layers.iter().map(|g| g.data().index_axis(Axis(0), i).to_owned()).collect());
                }
            }
            Some(bank)
        } else {
            None
        };
        Ok(Self { samples, bank, grid })
    }

    fn batch(&self, model: &DinomalyModel, idx: &[usize], preprocess: &PreprocessSpec) -> Result<Vec<TokenGrid<f32>>> {
        match &self.bank {
            Some(bank) => {
                let layers = bank[0].len();
                (0..layers)
                    .map(|l| {
                        let views: Vec<_> = idx.iter().map(|&i| bank[i][l].view()).collect();
                        let stacked: Array3<f32> = ndarray::stack(Axis(0), &views).expect("equal token shapes");
                        TokenGrid::new(stacked, self.grid.0, self.grid.1)
                    })
                    .collect()
            }
            None => {
                let picked: Vec<&SampleRecord> = idx.iter().map(|&i| self.samples[i]).collect();
                model.encode_collected(&picked, preprocess)
            }
        }
    }
}

struct LogSink {
    writer: Option<csv::Writer<fs::File>>,
}

impl LogSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.csv");
                Some(csv::Writer::from_path(&path)?)
            }
            None => None,
        };
        Ok(Self { writer })
    }

    fn push(&mut self, row: &LogRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row)?;
            if row.iteration % 100 == 0 {
                w.flush().map_err(|e| Error::io("train_log.csv", e))?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("train_log.csv", e))?;
        }
        Ok(())
    }
}

/// Trains one reconstructor on the training split of `dataset`.
///
/// With `out_dir` set, writes `train_log.csv`, `final.ckpt` and, when
/// periodic evaluation is on, `best.ckpt` plus `best_eval.{csv,json}`.
pub fn train(cfg: &TrainConfig, dataset: &DatasetIndex, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let encoder = EncoderBackend::from_spec(&cfg.encoder)?;
    let encoder_checksum = encoder.checksum();
    let mut model = DinomalyModel::new(encoder, cfg.collected_layers.clone(), cfg.reconstructor.clone(), cfg.seed)?;

    let samples: Vec<&SampleRecord> = dataset.split(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let class_of: Vec<usize> = samples
        .iter()
        .map(|s| dataset.classes.iter().position(|c| *c == s.class_name).expect("class listed"))
        .collect();
    let mut members = vec![Vec::new(); dataset.classes.len()];
    for (i, &c) in class_of.iter().enumerate() {
        members[c].push(i);
    }
    members.retain(|m| !m.is_empty());

    let features = FeatureSource::build(&model, samples, cfg)?;
    let mut optimizer = StableAdamW::<f32>::new(cfg.optim)?;
    let mut sink = LogSink::open(out_dir)?;
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut best: Option<BestEval> = None;
    let mut streak = 0usize;
    let mut last_finite: Option<(usize, f64)> = None;

    model.train_mode();
    for it in 0..cfg.total_iters {
        let mut rng = stream(cfg.seed, &[SAMPLING_STREAM, it as u64]);
        let idx = sample_batch(&mut rng, &class_of, &members, cfg.sampling, cfg.batch_size);
        let collected = features.batch(&model, &idx, &cfg.preprocess)?;
        let (groups, cache) = model.forward_collected(&collected, &mut rng)?;
        let lr = lr_at(it, &cfg.optim);
        let row = match global_hm_loss(&groups, it, &cfg.hard_mining) {
            Ok(out) => {
                streak = 0;
                last_finite = Some((it, out.loss as f64));
                model.reconstructor.zero_grad();
                let pair_grads: Vec<Array2<f32>> = out
                    .grads
                    .into_iter()
                    .map(|g| {
                        let (b, n, d) = g.dim();
                        g.into_shape_with_order((b * n, d)).expect("contiguous gradient")
                    })
                    .collect();
                model.reconstructor.backward(&cache, &pair_grads)?;
                let stats = optimizer.step(&mut model.reconstructor, lr)?;
                LogRow {
                    iteration: it,
                    loss: out.loss as f64,
                    k: out.k,
                    lr,
                    shrunk_fraction: out.shrunk_fraction,
                    clip_fraction: stats.clip_fraction,
                    effective_lr: stats.mean_effective_lr,
                }
            }
            Err(Error::Numerical { message, .. }) => {
                streak += 1;
                if streak >= MAX_NONFINITE_STREAK {
                    sink.finish()?;
                    let last = match last_finite {
                        Some((i, l)) => format!("last finite loss {l:.6e} at iteration {i}"),
                        None => "no finite loss was ever observed".to_string(),
                    };
                    return Err(Error::Numerical {
                        iteration: it,
                        message: format!(
                            "{MAX_NONFINITE_STREAK} consecutive non-finite losses ({message}); {last}; lr {lr:.3e}; \
                             {} gradient tensors skipped so far",
                            optimizer.skipped_total()
                        ),
                    });
                }
                LogRow {
                    iteration: it,
                    loss: f64::NAN,
                    k: crate::objective::current_k(it, &cfg.hard_mining),
                    lr,
                    shrunk_fraction: f64::NAN,
                    clip_fraction: f64::NAN,
                    effective_lr: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };
        sink.push(&row)?;
        log.push(row);

        if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            model.eval_mode();
            let (report, _) = evaluate(&model, dataset, &cfg.preprocess, &cfg.eval)?;
            model.train_mode();
            let better = best
                .as_ref()
                .map(|b| report.mean.i_auroc > b.report.mean.i_auroc)
                .unwrap_or(true);
            if better {
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), &model, &cfg.preprocess, cfg.seed, it + 1)?;
                    report.write(dir, "best_eval")?;
                }
                best = Some(BestEval {
                    iteration: it + 1,
                    report,
                });
            }
        }
    }
    model.eval_mode();
    sink.finish()?;
    if model.encoder.checksum() != encoder_checksum {
        return Err(Error::Numerical {
            iteration: cfg.total_iters,
            message: "encoder weights changed during training".to_string(),
        });
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.ckpt"), &model, &cfg.preprocess, cfg.seed, cfg.total_iters)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best,
        encoder_checksum,
    })
}

/// Class-separated training: one model per class, each written to
/// `<out_dir>/<class>/` when an output directory is given.
pub fn train_per_class(
    cfg: &TrainConfig,
    dataset: &DatasetIndex,
    out_dir: Option<&Path>,
) -> Result<Vec<(String, TrainOutcome)>> {
    dataset
        .classes
        .iter()
        .map(|class| {
            let subset = dataset.only_classes(std::slice::from_ref(class))?;
            let dir = out_dir.map(|d| d.join(class));
            Ok((class.clone(), train(cfg, &subset, dir.as_deref())?))
        })
        .collect()
}

/// Scored test sample with its ground truth at evaluation resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub sample: SampleRecord,
    pub image_score: f64,
    pub map: AnomalyMap,
    pub mask: Array2<bool>,
}

/// Ground-truth mask after the same crop as the image, resized to `size`.
pub fn eval_mask(sample: &SampleRecord, preprocess: &PreprocessSpec, size: (usize, usize)) -> Result<Array2<bool>> {
    match &sample.mask_path {
        None => Ok(Array2::from_elem(size, false)),
        Some(_) => {
            let native = sample.load_mask(0, 0)?;
            let cropped = preprocess_mask(&native, preprocess);
            Ok(if cropped.dim() == size {
                cropped
            } else {
                resize_nearest(cropped.view(), size.0, size.1)
            })
        }
    }
}

/// Eval-mode maps and image scores for the given samples, in order.
pub fn predict(
    model: &DinomalyModel,
    samples: &[&SampleRecord],
    preprocess: &PreprocessSpec,
    eval: &EvalConfig,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval.batch_size.max(1)) {
        let groups = model.infer(chunk, preprocess)?;
        let maps = anomaly_map(&groups, eval.eval_size)?;
        for (sample, map) in chunk.iter().zip(maps) {
            out.push(Prediction {
                sample: (*sample).clone(),
                image_score: image_score(&map, eval.top_fraction),
                mask: eval_mask(sample, preprocess, eval.eval_size)?,
                map,
            });
        }
    }
    Ok(out)
}

/// Per-class metrics from already scored samples.
pub fn report_from_predictions(preds: &[Prediction], aupro: &AuproConfig) -> Result<EvalReport> {
    let mut by_class: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        by_class.entry(p.sample.class_name.as_str()).or_default().push(p);
    }
    if by_class.is_empty() {
        return Err(Error::input("no predictions to evaluate"));
    }
    let mut rows = BTreeMap::new();
    for (class, items) in by_class {
        let scores: Vec<f64> = items.iter().map(|p| p.image_score).collect();
        let labels: Vec<bool> = items.iter().map(|p| p.sample.is_anomalous()).collect();
        let pred = ClassPredictions {
            image_scores: &scores,
            labels: &labels,
            maps: items.iter().map(|p| p.map.values.view()).collect(),
            masks: items.iter().map(|p| p.mask.view()).collect(),
        };
        let row: MetricRow = class_metrics(&pred, aupro).map_err(|e| with_class(e, class))?;
        rows.insert(class.to_string(), row);
    }
    EvalReport::from_classes(rows)
}

fn with_class(e: Error, class: &str) -> Error {
    match e {
        Error::Input(m) => Error::Input(format!("class '{class}': {m}")),
        Error::Data(m) => Error::Data(format!("class '{class}': {m}")),
        Error::Config(m) => Error::Config(format!("class '{class}': {m}")),
        other => other,
    }
}

/// Scores the whole test split and computes the per-class report.
pub fn evaluate(
    model: &DinomalyModel,
    dataset: &DatasetIndex,
    preprocess: &PreprocessSpec,
    eval: &EvalConfig,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let samples: Vec<&SampleRecord> = dataset.split(Split::Test).collect();
    if samples.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let preds = predict(model, &samples, preprocess, eval)?;
    Ok((report_from_predictions(&preds, &eval.aupro)?, preds))
}

/// Loads a checkpoint and evaluates it with the preprocessing it was trained with.
pub fn evaluate_checkpoint(path: &Path, dataset: &DatasetIndex, eval: &EvalConfig) -> Result<(EvalReport, Vec<Prediction>)> {
    let (model, meta) = load_checkpoint(path)?;
    evaluate(&model, dataset, &meta.preprocess, eval)
}
