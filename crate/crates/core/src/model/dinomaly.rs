//! Frozen encoder plus trainable reconstructor.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionKind;
use super::reconstructor::{collect, default_collected_layers, Reconstructor, ReconstructorCache, ReconstructorConfig};
use super::scheme::GroupedFeatures;
use crate::data::{EncoderBackend, PreprocessSpec, SampleRecord};
use crate::error::{Error, Result};
use crate::tensor::TokenGrid;

#[derive(Debug, Clone)]
pub struct DinomalyModel {
    pub encoder: EncoderBackend,
    pub collected_layers: Vec<usize>,
    pub reconstructor: Reconstructor<f32>,
    pub training: bool,
}

impl DinomalyModel {
    /// `collected_layers = None` picks the middle eight encoder layers.
    pub fn new(
        encoder: EncoderBackend,
        collected_layers: Option<Vec<usize>>,
        config: ReconstructorConfig,
        seed: u64,
    ) -> Result<Self> {
        let reconstructor = Reconstructor::new(config, seed)?;
        Self::from_parts(encoder, collected_layers, reconstructor)
    }

    pub fn from_parts(
        encoder: EncoderBackend,
        collected_layers: Option<Vec<usize>>,
        reconstructor: Reconstructor<f32>,
    ) -> Result<Self> {
        let collected_layers = match collected_layers {
            Some(l) => l,
            None => default_collected_layers(encoder.layer_count())?,
        };
        let depth = reconstructor.config.decoder_depth;
        if collected_layers.len() != depth {
            return Err(Error::config(format!(
                "{} collected encoder layers but the decoder has {depth} layers",
                collected_layers.len()
            )));
        }
        if let Some(&bad) = collected_layers.iter().find(|&&i| i >= encoder.layer_count()) {
            return Err(Error::config(format!(
                "collected layer {bad} out of range for an encoder of depth {}",
                encoder.layer_count()
            )));
        }
        if encoder.dim() != reconstructor.config.dim {
            return Err(Error::config(format!(
                "encoder width {} does not match decoder width {}",
                encoder.dim(),
                reconstructor.config.dim
            )));
        }
        Ok(Self {
            encoder,
            collected_layers,
            reconstructor,
            training: false,
        })
    }

    pub fn train_mode(&mut self) {
        self.training = true;
    }

    pub fn eval_mode(&mut self) {
        self.training = false;
    }

    /// Encoder features of the collected layers, in collection order.
    pub fn encode_collected(&self, samples: &[&SampleRecord], preprocess: &PreprocessSpec) -> Result<Vec<TokenGrid<f32>>> {
        let all = self.encoder.encode(samples, preprocess)?;
        Ok(collect(&all, &self.collected_layers)?.into_iter().cloned().collect())
    }

    /// Fuse, bottleneck, decode and pair with the encoder side. Noise is on
    /// only in training mode.
    pub fn forward_collected(
        &self,
        collected: &[TokenGrid<f32>],
        rng: &mut dyn RngCore,
    ) -> Result<(GroupedFeatures<f32>, ReconstructorCache<f32>)> {
        if collected.len() != self.collected_layers.len() {
            return Err(Error::input(format!(
                "expected {} collected layers, got {}",
                self.collected_layers.len(),
                collected.len()
            )));
        }
        let refs: Vec<&TokenGrid<f32>> = collected.iter().collect();
        let fused = TokenGrid::sum_of(&refs)?;
        let (side, cache) = self.reconstructor.forward(&fused, self.training, rng)?;
        let groups = self.reconstructor.group(collected, &side, &cache)?;
        Ok((groups, cache))
    }

    /// Mixing weights `kind` would assign inside every decoder layer for these
    /// samples, one matrix per image, head and layer.
    pub fn decoder_mixing_weights(
        &self,
        samples: &[&SampleRecord],
        preprocess: &PreprocessSpec,
        kind: AttentionKind,
    ) -> Result<Vec<Array2<f32>>> {
        let collected = self.encode_collected(samples, preprocess)?;
        let refs: Vec<&TokenGrid<f32>> = collected.iter().collect();
        self.reconstructor.mixing_weights(&TokenGrid::sum_of(&refs)?, kind)
    }

    /// Eval-mode pass straight from samples.
    pub fn infer(&self, samples: &[&SampleRecord], preprocess: &PreprocessSpec) -> Result<GroupedFeatures<f32>> {
        if self.training {
            return Err(Error::config("inference requires eval mode"));
        }
        let collected = self.encode_collected(samples, preprocess)?;
        // no randomness is drawn in eval mode
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward_collected(&collected, &mut rng)?.0)
    }
}
