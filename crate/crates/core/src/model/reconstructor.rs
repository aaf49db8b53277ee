//! Trainable half of the model: noisy bottleneck plus Transformer decoder.

use ndarray::{Array2, ArrayView2, ArrayViewD};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionKind;
use super::bottleneck::{BottleneckCache, BottleneckConfig, NoisyBottleneck};
use super::layers::Linear;
use super::scheme::{build_groups, scatter_pair_grads, ConstraintScheme, GroupedFeatures};
use super::transformer::{LayerCache, TransformerLayer};
use crate::error::{Error, Result};
use crate::tensor::{join, GridShape, Module, ParamSlot, Real, TokenGrid};

pub const DECODER_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: f64,
    pub attention: AttentionKind,
    pub bottleneck: BottleneckConfig,
    pub scheme: ConstraintScheme,
    pub init_std: f64,
}

impl ReconstructorConfig {
    /// Defaults for a given feature width: one head per 64 channels.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            dim,
            num_heads: (dim / 64).max(1),
            decoder_depth: DECODER_DEPTH,
            mlp_ratio: 4.0,
            attention: AttentionKind::default(),
            bottleneck: BottleneckConfig::default(),
            scheme: ConstraintScheme::default(),
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide decoder width {}",
                self.num_heads, self.dim
            )));
        }
        if self.decoder_depth == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("decoder mlp ratio must be positive"));
        }
        self.attention.validate()?;
        self.bottleneck.validate()?;
        self.scheme.validate(self.decoder_depth)
    }

    fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct Reconstructor<F: Real> {
    pub config: ReconstructorConfig,
    pub bottleneck: NoisyBottleneck<F>,
    pub layers: Vec<TransformerLayer<F>>,
    /// Only present for [`ConstraintScheme::LayerToCatLayer`].
    pub cat_head: Option<Linear<F>>,
}

pub struct ReconstructorCache<F> {
    bottleneck: BottleneckCache<F>,
    layers: Vec<LayerCache<F>>,
    last_output: Option<Array2<F>>,
    shape: GridShape,
    training: bool,
}

impl<F: Real> ReconstructorCache<F> {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn bottleneck(&self) -> &BottleneckCache<F> {
        &self.bottleneck
    }
}

impl<F: Real> Reconstructor<F> {
    pub fn new(config: ReconstructorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let bottleneck = NoisyBottleneck::new(&mut rng, config.dim, config.bottleneck, std)?;
        let layers = (0..config.decoder_depth)
            .map(|_| {
                TransformerLayer::new(
                    &mut rng,
                    config.dim,
                    config.num_heads,
                    config.mlp_hidden(),
                    config.attention,
                    std,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let cat_head = (config.scheme == ConstraintScheme::LayerToCatLayer)
            .then(|| Linear::new(&mut rng, config.dim, config.dim * config.decoder_depth, std, true));
        Ok(Self {
            config,
            bottleneck,
            layers,
            cat_head,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs the decoder stack on bottleneck output `z`, returning every
    /// layer's output.
    pub fn decode(&self, z: ArrayView2<'_, F>, shape: GridShape) -> Result<(Vec<Array2<F>>, Vec<LayerCache<F>>)> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = z.to_owned();
        for layer in &self.layers {
            let (y, c) = layer.forward(x.view(), shape)?;
            outs.push(y.clone());
            caches.push(c);
            x = y;
        }
        Ok((outs, caches))
    }

    /// Bottleneck plus decoder. Returns the decoder-side features matched
    /// against the collected encoder layers: the layer outputs, or for the
    /// concatenation scheme, per-layer channel chunks of the projected last
    /// layer.
    pub fn forward(
        &self,
        fused: &TokenGrid<F>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<TokenGrid<F>>, ReconstructorCache<F>)> {
        if fused.dim() != self.config.dim {
            return Err(Error::config(format!(
                "fused features have width {}, decoder expects {}",
                fused.dim(),
                self.config.dim
            )));
        }
        if !fused.is_finite() {
            return Err(Error::input("encoder features contain NaN or infinite values"));
        }
        let shape = fused.shape();
        let (z, bottleneck) = self.bottleneck.forward(fused.rows(), training, rng);
        let (outs, layers) = self.decode(z.view(), shape)?;
        let (side, last_output) = match &self.cat_head {
            Some(head) => {
                let last = outs.last().expect("non-empty decoder").clone();
                let proj = head.forward(last.view());
                let d = self.config.dim;
                let chunks = (0..self.depth())
                    .map(|i| {
                        TokenGrid::from_rows(proj.slice(ndarray::s![.., i * d..(i + 1) * d]).to_owned(), shape)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (chunks, Some(last))
            }
            None => (
                outs.into_iter()
                    .map(|o| TokenGrid::from_rows(o, shape))
                    .collect::<Result<Vec<_>>>()?,
                None,
            ),
        };
        let cache = ReconstructorCache {
            bottleneck,
            layers,
            last_output,
            shape,
            training,
        };
        Ok((side, cache))
    }

    /// Noise-free pass that reports, for every decoder layer, the mixing
    /// weights `kind` would assign to that layer's actual input.
    pub fn mixing_weights(&self, fused: &TokenGrid<F>, kind: AttentionKind) -> Result<Vec<Array2<F>>> {
        let shape = fused.shape();
        // eval mode draws no randomness
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, _) = self.bottleneck.forward(fused.rows(), false, &mut rng);
        let (outs, _) = self.decode(z.view(), shape)?;
        let mut weights = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { z.view() } else { outs[i - 1].view() };
            if let Some(w) = layer.mixing_weights(kind, input, shape)? {
                weights.extend(w);
            }
        }
        Ok(weights)
    }

    /// Pairs decoder-side features with the collected encoder layers.
    pub fn group(
        &self,
        encoder_layers: &[TokenGrid<F>],
        decoder_side: &[TokenGrid<F>],
        cache: &ReconstructorCache<F>,
    ) -> Result<GroupedFeatures<F>> {
        let mut g = build_groups(encoder_layers, decoder_side, self.config.scheme)?;
        g.noise_active = cache.training && !matches!(self.config.bottleneck.noise, super::NoiseKind::None);
        Ok(g)
    }

    /// Backpropagates per-pair decoder-side gradients through the decoder and
    /// bottleneck, accumulating into parameter gradients.
    pub fn backward(&mut self, cache: &ReconstructorCache<F>, pair_grads: &[Array2<F>]) -> Result<()> {
        let depth = self.depth();
        let dim = self.config.dim;
        let mut per_layer = scatter_pair_grads(self.config.scheme, depth, dim, pair_grads)?;
        if let Some(head) = &mut self.cat_head {
            let rows = cache.shape.rows();
            let mut dproj = Array2::zeros((rows, dim * depth));
            for (i, g) in per_layer.iter_mut().enumerate() {
                if let Some(g) = g.take() {
                    dproj.slice_mut(ndarray::s![.., i * dim..(i + 1) * dim]).assign(&g);
                }
            }
            let last = cache.last_output.as_ref().expect("cat scheme caches the last output");
            per_layer[depth - 1] = Some(head.backward(last.view(), dproj.view()));
        }
        let mut running: Option<Array2<F>> = None;
        for i in (0..depth).rev() {
            let g = match (per_layer[i].take(), running.take()) {
                (Some(mut a), Some(b)) => {
                    a += &b;
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            if let Some(g) = g {
                running = Some(self.layers[i].backward(&cache.layers[i], g.view()));
            }
        }
        if let Some(g) = running {
            self.bottleneck.backward(&cache.bottleneck, g.view());
        }
        Ok(())
    }
}

impl<F: Real> Module<F> for Reconstructor<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("decoder.layer{i}")), f);
        }
        if let Some(h) = &mut self.cat_head {
            h.visit_params(&join(prefix, "decoder.cat_head"), f);
        }
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.bottleneck.visit_values(&join(prefix, "bottleneck"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_values(&join(prefix, &format!("decoder.layer{i}")), f);
        }
        if let Some(h) = &self.cat_head {
            h.visit_values(&join(prefix, "decoder.cat_head"), f);
        }
    }
}

/// Runs the decoder on bottleneck output `z` and returns one grid per layer.
pub fn decoder_forward<F: Real>(z: &TokenGrid<F>, model: &Reconstructor<F>) -> Result<Vec<TokenGrid<F>>> {
    let (outs, _) = model.decode(z.rows(), z.shape())?;
    outs.into_iter().map(|o| TokenGrid::from_rows(o, z.shape())).collect()
}

/// Element-wise sum of the selected encoder layers.
pub fn collect_and_fuse<F: Real>(encoder_features: &[TokenGrid<F>], indices: &[usize]) -> Result<TokenGrid<F>> {
    let picked = collect(encoder_features, indices)?;
    TokenGrid::sum_of(&picked)
}

pub fn collect<'a, F: Real>(encoder_features: &'a [TokenGrid<F>], indices: &[usize]) -> Result<Vec<&'a TokenGrid<F>>> {
    if indices.is_empty() {
        return Err(Error::config("no encoder layers selected"));
    }
    indices
        .iter()
        .map(|&i| {
            encoder_features.get(i).ok_or_else(|| {
                Error::config(format!(
                    "encoder layer index {i} out of range for depth {}",
                    encoder_features.len()
                ))
            })
        })
        .collect()
}

/// The eight middle layers of an encoder: `2..=9` for 12 layers and
/// `4, 6, ..., 18` for 24 layers; otherwise the centred run of eight.
pub fn default_collected_layers(encoder_depth: usize) -> Result<Vec<usize>> {
    match encoder_depth {
        24 => Ok((4..=18).step_by(2).collect()),
        d if d >= DECODER_DEPTH => {
            let start = (d - DECODER_DEPTH) / 2;
            Ok((start..start + DECODER_DEPTH).collect())
        }
        d => Err(Error::config(format!(
            "encoder depth {d} is too shallow to collect {DECODER_DEPTH} layers"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::normal_matrix;
    use crate::model::NoiseKind;

    fn small_config(scheme: ConstraintScheme) -> ReconstructorConfig {
        ReconstructorConfig {
            dim: 4,
            num_heads: 2,
            decoder_depth: 4,
            mlp_ratio: 2.0,
            attention: AttentionKind::Linear { normalize: true },
            bottleneck: BottleneckConfig {
                noise: NoiseKind::None,
                hidden_ratio: 2.0,
            },
            scheme,
            init_std: 0.4,
        }
    }

    fn grid(seed: u64, shape: GridShape, d: usize) -> TokenGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenGrid::from_rows(normal_matrix(&mut rng, shape.rows(), d, 1.0), shape).unwrap()
    }

    #[test]
    fn default_layers() {
        assert_eq!(default_collected_layers(12).unwrap(), (2..10).collect::<Vec<_>>());
        assert_eq!(default_collected_layers(24).unwrap(), vec![4, 6, 8, 10, 12, 14, 16, 18]);
        assert!(default_collected_layers(6).is_err());
    }

    #[test]
    fn fuse_single_and_double() {
        let shape = GridShape::new(1, 2, 2);
        let a = grid(1, shape, 3);
        let layers = vec![a.clone(), a.clone()];
        assert_eq!(collect_and_fuse(&layers, &[1]).unwrap(), a);
        let twice = collect_and_fuse(&layers, &[0, 1]).unwrap();
        assert_eq!(twice, a.mapv(|v| 2.0 * v));
        assert!(collect_and_fuse(&layers, &[2]).is_err());
    }

    #[test]
    fn zero_output_projections_pass_through() {
        let mut r = Reconstructor::<f64>::new(small_config(ConstraintScheme::LayerToLayerDense), 3).unwrap();
        for l in &mut r.layers {
            l.zero_output_projections();
        }
        let z = grid(2, GridShape::new(2, 2, 2), 4);
        let outs = decoder_forward(&z, &r).unwrap();
        assert_eq!(outs.len(), 4);
        assert!(outs.iter().all(|o| o == &z));
    }

    #[test]
    fn later_layers_do_not_affect_earlier_outputs() {
        let r = Reconstructor::<f64>::new(small_config(ConstraintScheme::LayerToLayerDense), 5).unwrap();
        let z = grid(6, GridShape::new(1, 2, 3), 4);
        let base = decoder_forward(&z, &r).unwrap();
        for j in 0..r.depth() {
            let mut p = r.clone();
            p.layers[j].mlp.fc1.weight.value.mapv_inplace(|v| v * 1.7 + 0.1);
            let out = decoder_forward(&z, &p).unwrap();
            for i in 0..r.depth() {
                if i < j {
                    assert_eq!(out[i], base[i], "layer {i} changed after perturbing {j}");
                } else {
                    assert_ne!(out[i], base[i]);
                }
            }
        }
    }

    /// Full reconstructor gradient against finite differences of
    /// sum(probe_i * decoder_side_i), for every scheme.
    #[test]
    fn backward_matches_finite_differences() {
        let shape = GridShape::new(1, 2, 2);
        for scheme in [
            ConstraintScheme::Group { groups: 2 },
            ConstraintScheme::LayerToLayerSparse { every_k: 2 },
            ConstraintScheme::LayerToCatLayer,
        ] {
            let r = Reconstructor::<f64>::new(small_config(scheme), 8).unwrap();
            let fused = grid(9, shape, 4);
            let enc: Vec<_> = (0..4).map(|i| grid(20 + i, shape, 4)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let objective = |r: &Reconstructor<f64>| -> f64 {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (side, cache) = r.forward(&fused, false, &mut rng).unwrap();
                let g = r.group(&enc, &side, &cache).unwrap();
                g.pairs.iter().map(|(e, d)| (e.data() * d.data()).sum()).sum()
            };
            let (side, cache) = r.forward(&fused, false, &mut rng).unwrap();
            let g = r.group(&enc, &side, &cache).unwrap();
            let grads: Vec<_> = g.pairs.iter().map(|(e, _)| e.to_rows()).collect();
            let mut r2 = r.clone();
            r2.zero_grad();
            r2.backward(&cache, &grads).unwrap();
            let h = 1e-6;
            let probe = |r: &mut Reconstructor<f64>, delta: f64| {
                r.bottleneck.mlp.fc1.weight.value[[1, 2]] += delta;
                if let Some(hd) = &mut r.cat_head {
                    hd.weight.value[[0, 5]] += delta;
                }
            };
            let mut rp = r.clone();
            probe(&mut rp, h);
            let mut rm = r.clone();
            probe(&mut rm, -h);
            let num = (objective(&rp) - objective(&rm)) / (2.0 * h);
            let mut ana = r2.bottleneck.mlp.fc1.weight.grad[[1, 2]];
            if let Some(hd) = &r2.cat_head {
                ana += hd.weight.grad[[0, 5]];
            }
            assert!((num - ana).abs() < 1e-5 * num.abs().max(1.0), "{scheme}: {num} vs {ana}");
        }
    }
}
