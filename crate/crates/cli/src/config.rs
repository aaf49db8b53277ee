//! Flat `key = value` run configuration with dotted keys.
//!
//! Values come from, in increasing precedence: built-in defaults, the config
//! file, the `DINOMALY_OUT` environment variable (output directory only) and
//! `--key value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dinomaly_core::data::{EncoderSpec, FeatureCache, PreprocessSpec, SynthSpec, ToyVitConfig};
use dinomaly_core::metrics::AuproConfig;
use dinomaly_core::model::{AttentionKind, ConstraintScheme, NoiseKind, ReconstructorConfig};
use dinomaly_core::objective::{HardMiningConfig, MiningPool};
use dinomaly_core::optim::OptimConfig;
use dinomaly_core::trainer::{EvalConfig, Sampling, TrainConfig, TrainMode};
use dinomaly_core::{Error, Result};

pub const OUT_ENV: &str = "DINOMALY_OUT";
pub const ECHO_FILE: &str = "resolved_config.txt";
const AUTO: &str = "auto";

pub struct KeyDef {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($k:literal => $d:literal, $h:literal;)*) => {
        pub const KEYS: &[KeyDef] = &[$(KeyDef { key: $k, default: $d, help: $h }),*];
    };
}

keys! {
    "data.root" => "", "dataset directory in the MVTec layout";
    "output.dir" => "runs", "where artifacts are written";
    "checkpoint" => "auto", "checkpoint to evaluate; auto = <output.dir>/final.ckpt";
    "seed" => "0", "seed for initialization, sampling, noise and synthetic data";
    "train.mode" => "unified", "unified | class_separated";
    "train.iters" => "auto", "training iterations; auto = 10000 unified, 5000 class_separated";
    "train.batch_size" => "16", "images per step";
    "train.sampling" => "uniform", "uniform | class_balanced";
    "train.eval_every" => "0", "evaluate and keep the best checkpoint every N iterations; 0 = never";
    "encoder.kind" => "toy_vit", "toy_vit | feature_cache";
    "encoder.depth" => "12", "toy encoder layers";
    "encoder.dim" => "64", "toy encoder width";
    "encoder.patch" => "14", "toy encoder patch size";
    "encoder.image_size" => "112", "toy encoder input size";
    "encoder.seed" => "0", "toy encoder weight seed";
    "encoder.cache" => "", "feature cache directory for encoder.kind = feature_cache";
    "encoder.layers" => "auto", "collected encoder layers, comma separated; auto = middle eight";
    "noise.kind" => "dropout", "dropout | feature_jitter | patch_masking | none";
    "noise.p" => "0.2", "dropout or patch-masking rate in [0, 1)";
    "noise.scale" => "1.0", "feature jitter scale";
    "bottleneck.hidden_ratio" => "4", "bottleneck MLP expansion";
    "decoder.attention" => "linear", "linear | linear_unnormalized | softmax | softmax_masked(n) | linear_masked(n) | conv(k)";
    "decoder.heads" => "auto", "attention heads; auto = max(1, width / 64)";
    "decoder.mlp_ratio" => "4", "decoder MLP expansion";
    "decoder.init_std" => "0.02", "std of decoder weight init";
    "scheme" => "group(2)", "dense | sparse(k) | cat | group(g)";
    "loss.k_max" => "90", "final share of easy points whose gradient is shrunk, percent";
    "loss.warmup_iters" => "auto", "iterations to ramp k from 0; auto = 1000 unified, 500 class_separated";
    "loss.shrink_factor" => "0.1", "gradient factor for easy points";
    "loss.pool" => "joint", "joint | per_pair";
    "optim.lr" => "2e-3", "peak learning rate";
    "optim.lr_final" => "2e-4", "learning rate at the last iteration";
    "optim.warmup_iters" => "100", "linear learning-rate warm-up";
    "optim.beta1" => "0.9", "first-moment decay";
    "optim.beta2" => "0.999", "second-moment decay";
    "optim.weight_decay" => "1e-4", "decoupled weight decay";
    "optim.eps" => "1e-10", "denominator floor";
    "optim.amsgrad" => "true", "keep the running maximum of the second moment";
    "preprocess.resize" => "auto", "square resize before cropping; auto = toy image size, else 448";
    "preprocess.crop" => "auto", "centre crop; auto = toy image size, else 392";
    "eval.size" => "256", "anomaly map size, N or HxW";
    "eval.top_fraction" => "0.01", "share of top pixels averaged into the image score";
    "eval.fpr_limit" => "0.3", "FPR integration limit of the region-overlap metric";
    "eval.batch_size" => "16", "images per inference batch";
    "synth.classes" => "3", "synthetic texture classes";
    "synth.train" => "100", "training images per class";
    "synth.test" => "40", "test images per class";
    "synth.image_size" => "112", "synthetic image side";
    "synth.anomalous_fraction" => "0.5", "share of anomalous test images";
    "plot.samples" => "6", "panel rows per class";
}

pub fn key_def(key: &str) -> Option<&'static KeyDef> {
    KEYS.iter().find(|k| k.key == key)
}

/// Two-column listing of every key and its default.
pub fn key_table() -> String {
    let mut out = String::from("Configuration keys (default in brackets):\n");
    for k in KEYS {
        out.push_str(&format!("  {:<26} [{}] {}\n", k.key, k.default, k.help));
    }
    out
}

fn unknown(key: &str) -> Error {
    Error::config(format!("unknown configuration key '{key}'"))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value', got '{}'", n + 1, raw.trim()))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if key_def(k).is_none() {
            return Err(Error::config(format!("line {}: unknown configuration key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_flag_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected a --key flag, got '{arg}'")))?;
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("flag --{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        if key_def(&k).is_none() {
            return Err(unknown(&k));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Fully resolved and validated settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Every key with its effective value.
    pub entries: BTreeMap<String, String>,
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub plot_samples: usize,
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("every key has a value")
    }

    fn is_auto(&self, key: &str) -> bool {
        self.raw(key) == AUTO
    }

    fn get<T: FromStr>(&self, key: &str, form: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::config(format!("key '{key}': expected {form}, got '{v}'")))
    }

    fn num(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key, "a number")?;
        if !v.is_finite() {
            return Err(Error::config(format!("key '{key}': expected a finite number")));
        }
        Ok(v)
    }

    fn count(&self, key: &str) -> Result<usize> {
        self.get(key, "a non-negative integer")
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v = self.count(key)?;
        if v == 0 {
            return Err(Error::config(format!("key '{key}': expected a positive integer, got 0")));
        }
        Ok(v)
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.get(key, "true or false")
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }
}

fn keyed<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("key '{key}': {m}")),
        other => other,
    })
}

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("key '{key}': expected N or HxW with positive integers, got '{v}'"));
    let (h, w) = match v.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
        None => {
            let n: usize = v.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Merges the layers and builds every typed configuration.
pub fn resolve(
    file: &[(String, String)],
    env_out: Option<&str>,
    flags: &[(String, String)],
) -> Result<RunConfig> {
    let mut map: BTreeMap<String, String> = KEYS
        .iter()
        .map(|k| (k.key.to_string(), k.default.to_string()))
        .collect();
    for (k, v) in file {
        map.insert(k.clone(), v.clone());
    }
    if let Some(out) = env_out.filter(|s| !s.is_empty()) {
        map.insert("output.dir".into(), out.to_string());
    }
    for (k, v) in flags {
        if key_def(k).is_none() {
            return Err(unknown(k));
        }
        map.insert(k.clone(), v.clone());
    }
    let mut v = Values(map);

    let seed: u64 = v.get("seed", "a non-negative integer")?;
    let mode = match v.raw("train.mode") {
        "unified" => TrainMode::Unified,
        "class_separated" => TrainMode::ClassSeparated,
        other => {
            return Err(Error::config(format!(
                "key 'train.mode': expected unified or class_separated, got '{other}'"
            )))
        }
    };
    let sampling = match v.raw("train.sampling") {
        "uniform" => Sampling::Uniform,
        "class_balanced" => Sampling::ClassBalanced,
        other => {
            return Err(Error::config(format!(
                "key 'train.sampling': expected uniform or class_balanced, got '{other}'"
            )))
        }
    };

    let (encoder, dim, image_size) = match v.raw("encoder.kind") {
        "toy_vit" => {
            let cfg = ToyVitConfig {
                depth: v.positive("encoder.depth")?,
                dim: v.positive("encoder.dim")?,
                patch: v.positive("encoder.patch")?,
                image_size: v.positive("encoder.image_size")?,
                seed: v.get("encoder.seed", "a non-negative integer")?,
            };
            keyed("encoder", cfg.validate())?;
            (EncoderSpec::ToyVit(cfg), cfg.dim, Some(cfg.image_size))
        }
        "feature_cache" => {
            let path = v
                .path("encoder.cache")
                .ok_or_else(|| Error::config("key 'encoder.cache': required when encoder.kind = feature_cache"))?;
            let cache = FeatureCache::open(&path)?;
            (EncoderSpec::FeatureCache { path }, cache.manifest.dim, None)
        }
        other => {
            return Err(Error::config(format!(
                "key 'encoder.kind': expected toy_vit or feature_cache, got '{other}'"
            )))
        }
    };

    let mut train = match mode {
        TrainMode::Unified => TrainConfig::unified(encoder, dim),
        TrainMode::ClassSeparated => TrainConfig::class_separated(encoder, dim),
    };
    if v.is_auto("train.iters") {
        v.set("train.iters", train.total_iters);
    }
    if v.is_auto("loss.warmup_iters") {
        v.set("loss.warmup_iters", train.hard_mining.warmup_iters);
    }
    if v.is_auto("decoder.heads") {
        v.set("decoder.heads", (dim / 64).max(1));
    }
    let (resize, crop) = match image_size {
        Some(s) => (s, s),
        None => {
            let d = PreprocessSpec::default();
            (d.resize_to, d.center_crop_to)
        }
    };
    if v.is_auto("preprocess.resize") {
        v.set("preprocess.resize", resize);
    }
    if v.is_auto("preprocess.crop") {
        v.set("preprocess.crop", crop);
    }

    train = train.with_iters(v.count("train.iters")?);
    train.seed = seed;
    train.sampling = sampling;
    train.batch_size = v.positive("train.batch_size")?;
    train.eval_every = v.count("train.eval_every")?;
    if !v.is_auto("encoder.layers") {
        let layers = v
            .raw("encoder.layers")
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config("key 'encoder.layers': expected auto or comma-separated layer indices"))?;
        train.collected_layers = Some(layers);
    }

    let noise = match v.raw("noise.kind") {
        "dropout" => NoiseKind::Dropout { p: v.num("noise.p")? },
        "patch_masking" => NoiseKind::PatchMasking { p: v.num("noise.p")? },
        "feature_jitter" => NoiseKind::FeatureJitter {
            scale: v.num("noise.scale")?,
        },
        "none" => NoiseKind::None,
        other => {
            return Err(Error::config(format!(
                "key 'noise.kind': expected dropout, feature_jitter, patch_masking or none, got '{other}'"
            )))
        }
    };
    let attention: AttentionKind = keyed("decoder.attention", v.raw("decoder.attention").parse())?;
    let scheme: ConstraintScheme = keyed("scheme", v.raw("scheme").parse())?;
    let rc = ReconstructorConfig {
        num_heads: v.positive("decoder.heads")?,
        mlp_ratio: v.num("decoder.mlp_ratio")?,
        init_std: v.num("decoder.init_std")?,
        attention,
        scheme,
        ..ReconstructorConfig::for_dim(dim)
    };
    let mut rc = rc;
    rc.bottleneck.noise = noise;
    rc.bottleneck.hidden_ratio = v.num("bottleneck.hidden_ratio")?;
    keyed("scheme", rc.scheme.validate(rc.decoder_depth))?;
    keyed("decoder.attention", rc.attention.validate())?;
    keyed("noise", rc.bottleneck.validate())?;
    train.reconstructor = rc;

    train.hard_mining = HardMiningConfig {
        k_max: v.num("loss.k_max")?,
        warmup_iters: v.count("loss.warmup_iters")?,
        shrink_factor: v.num("loss.shrink_factor")?,
        pool: match v.raw("loss.pool") {
            "joint" => MiningPool::Joint,
            "per_pair" => MiningPool::PerPair,
            other => {
                return Err(Error::config(format!(
                    "key 'loss.pool': expected joint or per_pair, got '{other}'"
                )))
            }
        },
    };
    keyed("loss", train.hard_mining.validate())?;

    train.optim = OptimConfig {
        lr_peak: v.num("optim.lr")?,
        lr_final: v.num("optim.lr_final")?,
        warmup_iters: v.count("optim.warmup_iters")?,
        betas: (v.num("optim.beta1")?, v.num("optim.beta2")?),
        weight_decay: v.num("optim.weight_decay")?,
        eps: v.num("optim.eps")?,
        amsgrad: v.flag("optim.amsgrad")?,
        total_iters: train.total_iters,
    };
    keyed("optim", train.optim.validate())?;

    train.preprocess = PreprocessSpec {
        resize_to: v.positive("preprocess.resize")?,
        center_crop_to: v.positive("preprocess.crop")?,
        ..PreprocessSpec::default()
    };
    train.eval = EvalConfig {
        eval_size: parse_size("eval.size", v.raw("eval.size"))?,
        top_fraction: v.num("eval.top_fraction")?,
        aupro: AuproConfig {
            fpr_limit: v.num("eval.fpr_limit")?,
            ..AuproConfig::default()
        },
        batch_size: v.positive("eval.batch_size")?,
    };
    train.validate()?;

    let synth = SynthSpec {
        classes: v.positive("synth.classes")?,
        train_per_class: v.positive("synth.train")?,
        test_per_class: v.positive("synth.test")?,
        image_size: v.positive("synth.image_size")?,
        seed,
        anomalous_fraction: v.num("synth.anomalous_fraction")?,
    };
    keyed("synth", synth.validate())?;

    let output_dir = v.path("output.dir").unwrap_or_else(|| PathBuf::from("."));
    let checkpoint = if v.is_auto("checkpoint") {
        output_dir.join("final.ckpt")
    } else {
        v.path("checkpoint").ok_or_else(|| Error::config("key 'checkpoint': expected a path or auto"))?
    };
    v.set("checkpoint", checkpoint.display());
    let plot_samples = v.count("plot.samples")?;

    Ok(RunConfig {
        data_root: v.path("data.root"),
        entries: v.0,
        output_dir,
        checkpoint,
        train,
        synth,
        plot_samples,
    })
}

impl RunConfig {
    /// Re-parseable text listing every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{} = {}\n", k.key, self.entries[k.key]));
        }
        out
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::config("key 'data.root': a dataset directory is required for this command"))
    }

    /// Writes the resolved configuration next to the run's artifacts.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}
