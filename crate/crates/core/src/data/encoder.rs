//! Frozen feature extractors: a randomly initialised toy ViT and an on-disk
//! cache of features exported from an external backbone.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SampleRecord;
use super::preprocess::{load_and_preprocess, PreprocessSpec};
use crate::error::{Error, Result};
use crate::framed::{read_framed, write_framed};
use crate::model::layers::{normal_matrix, Linear};
use crate::model::{AttentionKind, TransformerLayer};
use crate::tensor::{param_checksum, GridShape, Module, ParamSlot, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyVitConfig {
    pub depth: usize,
    pub dim: usize,
    pub patch: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            dim: 64,
            patch: 14,
            image_size: 112,
            seed: 0,
        }
    }
}

impl ToyVitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_heads(&self) -> usize {
        (self.dim / 64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.patch == 0 {
            return Err(Error::config("toy encoder depth, width and patch must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.num_heads() != 0 {
            return Err(Error::config("toy encoder heads do not divide its width"));
        }
        Ok(())
    }
}

/// Pre-norm ViT with learned positional embeddings and random weights.
#[derive(Debug, Clone)]
pub struct ToyVit {
    pub config: ToyVitConfig,
    patch_embed: Linear<f32>,
    pos_embed: Array2<f32>,
    layers: Vec<TransformerLayer<f32>>,
}

impl ToyVit {
    pub fn new(config: ToyVitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let patch_len = 3 * config.patch * config.patch;
        let tokens = config.grid() * config.grid();
        let patch_embed = Linear::new(&mut rng, patch_len, d, 1.0 / (patch_len as f64).sqrt(), true);
        let pos_embed = normal_matrix(&mut rng, tokens, d, 0.1);
        let std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut layer = TransformerLayer::new(&mut rng, d, config.num_heads(), 4 * d, AttentionKind::Softmax, std)?;
            // narrower second projection keeps the residual branch at unit scale
            layer.mlp.fc2.weight.value.mapv_inplace(|v| v * 0.5);
            layers.push(layer);
        }
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            layers,
        })
    }

    fn patchify(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        let (c, h, w) = image.dim();
        let size = self.config.image_size;
        if c != 3 || h != size || w != size {
            return Err(Error::input(format!(
                "toy encoder expects 3x{size}x{size} input, got {c}x{h}x{w}"
            )));
        }
        let p = self.config.patch;
        let g = self.config.grid();
        let mut out = Array2::zeros((g * g, 3 * p * p));
        for gy in 0..g {
            for gx in 0..g {
                let block = image.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                out.row_mut(gy * g + gx)
                    .iter_mut()
                    .zip(block.iter())
                    .for_each(|(o, &v)| *o = v);
            }
        }
        Ok(out)
    }

    /// Every layer's patch tokens for a batch of preprocessed images.
    pub fn forward(&self, images: &[Array3<f32>]) -> Result<Vec<TokenGrid<f32>>> {
        if images.is_empty() {
            return Err(Error::input("empty image batch"));
        }
        let g = self.config.grid();
        let shape = GridShape::new(images.len(), g, g);
        let n = g * g;
        let mut x = Array2::zeros((shape.rows(), self.config.dim));
        for (b, img) in images.iter().enumerate() {
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("image {b} of the batch contains NaN or infinity")));
            }
            let tokens = self.patch_embed.forward(self.patchify(img)?.view()) + &self.pos_embed;
            x.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&tokens);
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, _) = layer.forward(x.view(), shape)?;
            outs.push(TokenGrid::from_rows(y.clone(), shape)?);
            x = y;
        }
        Ok(outs)
    }
}

/// Encoder weights are exposed read-only: `visit_params` offers nothing to
/// mutate, so no optimizer can reach them.
impl Module<f32> for ToyVit {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, ParamSlot<'_, f32>)) {}

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f32>)) {
        self.patch_embed.visit_values(&crate::tensor::join(prefix, "patch_embed"), f);
        f(&crate::tensor::join(prefix, "pos_embed"), self.pos_embed.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_values(&crate::tensor::join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub layers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureHeader {
    id: String,
    layers: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    dtype: String,
}

/// Directory of per-sample feature files plus a `cache.json` describing
/// their common shape.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub root: PathBuf,
    pub manifest: CacheManifest,
}

pub const CACHE_MANIFEST: &str = "cache.json";

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    let mut h = DefaultHasher::new();
    id.hash(&mut h);
    format!("{safe}-{:08x}.feat", h.finish() as u32)
}

impl FeatureCache {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(CACHE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data_at(&path, format!("malformed cache manifest: {e}")))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn create(root: &Path, manifest: CacheManifest) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(CACHE_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.root.join(file_name_for(id))
    }

    /// Stores one sample; `layers` are batch-1 grids.
    pub fn write(&self, id: &str, layers: &[TokenGrid<f32>]) -> Result<()> {
        let m = &self.manifest;
        if layers.len() != m.layers {
            return Err(Error::input(format!("expected {} layers, got {}", m.layers, layers.len())));
        }
        let mut payload = Vec::with_capacity(m.layers * m.grid_h * m.grid_w * m.dim);
        for (i, l) in layers.iter().enumerate() {
            if l.batch() != 1 || l.grid_h() != m.grid_h || l.grid_w() != m.grid_w || l.dim() != m.dim {
                return Err(Error::input(format!("layer {i} of '{id}' does not match the cache shape")));
            }
            payload.extend(l.data().iter().copied());
        }
        let header = FeatureHeader {
            id: id.to_string(),
            layers: m.layers,
            grid_h: m.grid_h,
            grid_w: m.grid_w,
            dim: m.dim,
            dtype: "f32le".into(),
        };
        write_framed(&self.path_for(id), &header, &payload)
    }

    /// Per-layer grids for a batch of ids.
    pub fn read(&self, ids: &[&str]) -> Result<Vec<TokenGrid<f32>>> {
        let m = &self.manifest;
        let per_layer = m.grid_h * m.grid_w * m.dim;
        let mut out: Vec<Array3<f32>> = (0..m.layers)
            .map(|_| Array3::zeros((ids.len(), m.grid_h * m.grid_w, m.dim)))
            .collect();
        for (b, id) in ids.iter().enumerate() {
            let path = self.path_for(id);
            if !path.exists() {
                return Err(Error::data_at(
                    &path,
                    format!("feature cache miss for sample '{id}' (layer 0 of {})", m.layers),
                ));
            }
            let (h, payload): (FeatureHeader, Vec<f32>) = read_framed(&path)?;
            if h.id != *id || h.grid_h != m.grid_h || h.grid_w != m.grid_w || h.dim != m.dim {
                return Err(Error::data_at(&path, format!("cached features for '{id}' do not match the cache shape")));
            }
            let available = payload.len() / per_layer;
            if h.layers < m.layers || available < m.layers {
                return Err(Error::data_at(
                    &path,
                    format!(
                        "feature cache miss for sample '{id}' layer {}",
                        h.layers.min(available)
                    ),
                ));
            }
            for (l, grid) in out.iter_mut().enumerate() {
                let block = &payload[l * per_layer..(l + 1) * per_layer];
                grid.index_axis_mut(Axis(0), b)
                    .iter_mut()
                    .zip(block)
                    .for_each(|(o, &v)| *o = v);
            }
        }
        out.into_iter().map(|a| TokenGrid::new(a, m.grid_h, m.grid_w)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    ToyVit(ToyVitConfig),
    FeatureCache { path: PathBuf },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::ToyVit(ToyVitConfig::default())
    }
}

#[derive(Debug, Clone)]
pub enum EncoderBackend {
    ToyVit(ToyVit),
    FeatureCache(FeatureCache),
}

impl EncoderBackend {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        Ok(match spec {
            EncoderSpec::ToyVit(cfg) => EncoderBackend::ToyVit(ToyVit::new(*cfg)?),
            EncoderSpec::FeatureCache { path } => EncoderBackend::FeatureCache(FeatureCache::open(path)?),
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        match self {
            EncoderBackend::ToyVit(v) => EncoderSpec::ToyVit(v.config),
            EncoderBackend::FeatureCache(c) => EncoderSpec::FeatureCache { path: c.root.clone() },
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            EncoderBackend::ToyVit(v) => v.config.depth,
            EncoderBackend::FeatureCache(c) => c.manifest.layers,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            EncoderBackend::ToyVit(v) => (v.config.grid(), v.config.grid()),
            EncoderBackend::FeatureCache(c) => (c.manifest.grid_h, c.manifest.grid_w),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderBackend::ToyVit(v) => v.config.dim,
            EncoderBackend::FeatureCache(c) => c.manifest.dim,
        }
    }

    /// Input size the toy encoder expects, if images are needed at all.
    pub fn image_size(&self) -> Option<usize> {
        match self {
            EncoderBackend::ToyVit(v) => Some(v.config.image_size),
            EncoderBackend::FeatureCache(_) => None,
        }
    }

    /// Per-layer features for a batch of samples. Images are loaded and
    /// preprocessed only for the toy encoder.
    pub fn encode(&self, samples: &[&SampleRecord], preprocess: &PreprocessSpec) -> Result<Vec<TokenGrid<f32>>> {
        match self {
            EncoderBackend::ToyVit(v) => {
                let images = samples
                    .iter()
                    .map(|s| load_and_preprocess(&s.image_path, preprocess))
                    .collect::<Result<Vec<_>>>()?;
                v.forward(&images)
            }
            EncoderBackend::FeatureCache(c) => {
                let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
                c.read(&ids)
            }
        }
    }

    /// Fingerprint of the frozen weights (0 for a cache).
    pub fn checksum(&self) -> u64 {
        match self {
            EncoderBackend::ToyVit(v) => param_checksum(v),
            EncoderBackend::FeatureCache(_) => 0,
        }
    }
}
