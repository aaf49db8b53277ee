//! MLP bottleneck between encoder and decoder with train-time noise.
//!
//! Dropout acts inside the MLP on the hidden activations and on the output,
//! using inverted scaling so the expected output equals the noiseless one.
//! Feature jitter and patch masking perturb the input tokens instead.

use ndarray::{Array2, ArrayView2, ArrayViewD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{dropout_mask, DropoutMasks, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::tensor::{join, GridShape, Module, ParamSlot, Real, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Dropout { p: f64 },
    FeatureJitter { scale: f64 },
    PatchMasking { p: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub noise: NoiseKind,
    pub hidden_ratio: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            noise: NoiseKind::Dropout { p: 0.2 },
            hidden_ratio: 4.0,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        match self.noise {
            NoiseKind::Dropout { p } | NoiseKind::PatchMasking { p } if !(0.0..1.0).contains(&p) => {
                return Err(Error::config(format!("noise rate must lie in [0, 1), got {p}")))
            }
            NoiseKind::FeatureJitter { scale } if !(scale >= 0.0 && scale.is_finite()) => {
                return Err(Error::config(format!("jitter scale must be >= 0, got {scale}")))
            }
            _ => {}
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio.is_finite()) {
            return Err(Error::config("bottleneck hidden ratio must be positive"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, dim: usize) -> usize {
        ((dim as f64 * self.hidden_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct NoisyBottleneck<F: Real> {
    pub mlp: Mlp<F>,
    pub config: BottleneckConfig,
}

pub struct BottleneckCache<F> {
    mlp: MlpCache<F>,
}

impl<F: Real> BottleneckCache<F> {
    pub fn mlp(&self) -> &MlpCache<F> {
        &self.mlp
    }
}

impl<F: Real> NoisyBottleneck<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, config: BottleneckConfig, std: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            mlp: Mlp::new(rng, dim, config.hidden_dim(dim), std),
            config,
        })
    }

    /// `training = false` disables every noise source.
    pub fn forward(
        &self,
        x: ArrayView2<'_, F>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> (Array2<F>, BottleneckCache<F>) {
        let rows = x.nrows();
        let dim = x.ncols();
        let mut masks = DropoutMasks::none();
        let mut input = x.to_owned();
        if training {
            match self.config.noise {
                NoiseKind::Dropout { p } if p > 0.0 => {
                    masks.hidden = Some(dropout_mask(rng, rows, self.mlp.hidden_dim(), p));
                    masks.output = Some(dropout_mask(rng, rows, dim, p));
                }
                NoiseKind::FeatureJitter { scale } if scale > 0.0 => {
                    let mean_norm = input
                        .rows()
                        .into_iter()
                        .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt())
                        .sum::<F>()
                        / F::from_usize(rows.max(1)).unwrap();
                    let sigma = scale * mean_norm.to_f64().unwrap() / dim as f64;
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma).expect("finite sigma");
                        input.mapv_inplace(|v| v + F::lit(normal.sample(rng)));
                    }
                }
                NoiseKind::PatchMasking { p } if p > 0.0 => {
                    for mut row in input.rows_mut() {
                        if rng.random::<f64>() < p {
                            row.fill(F::zero());
                        }
                    }
                }
                _ => {}
            }
        }
        let (y, mlp) = self.mlp.forward(input.view(), masks);
        (y, BottleneckCache { mlp })
    }

    pub fn backward(&mut self, cache: &BottleneckCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        self.mlp.backward(&cache.mlp, dy)
    }
}

impl<F: Real> Module<F> for NoisyBottleneck<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.mlp.visit_values(&join(prefix, "mlp"), f);
    }
}

/// Runs the bottleneck on a token grid with noise drawn from `seed`.
pub fn noisy_bottleneck_forward<F: Real>(
    x: &TokenGrid<F>,
    bottleneck: &NoisyBottleneck<F>,
    training: bool,
    seed: u64,
) -> Result<TokenGrid<F>> {
    if x.dim() != bottleneck.mlp.fc1.input_dim() {
        return Err(Error::config(format!(
            "bottleneck expects width {}, got {}",
            bottleneck.mlp.fc1.input_dim(),
            x.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, _) = bottleneck.forward(x.rows(), training, &mut rng);
    TokenGrid::from_rows(y, GridShape::new(x.batch(), x.grid_h(), x.grid_w()))
}
