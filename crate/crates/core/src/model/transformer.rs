//! Pre-norm Transformer layer: `x + mixer(norm1(x))`, then `h + mlp(norm2(h))`.

use ndarray::{Array2, ArrayView2, ArrayViewD};
use rand::Rng;

use super::attention::{AttentionCache, AttentionKind, AttentionParams};
use super::conv::{ConvCache, ConvMixer};
use super::layers::{DropoutMasks, LayerNorm, LayerNormCache, Mlp, MlpCache};
use crate::error::Result;
use crate::tensor::{join, GridShape, Module, ParamSlot, Real};

#[derive(Debug, Clone)]
pub enum SpatialMixer<F: Real> {
    Attention {
        params: AttentionParams<F>,
        kind: AttentionKind,
    },
    Conv(ConvMixer<F>),
}

enum MixerCache<F> {
    Attention(AttentionCache<F>),
    Conv(ConvCache<F>),
}

#[derive(Debug, Clone)]
pub struct TransformerLayer<F: Real> {
    pub norm1: LayerNorm<F>,
    pub mixer: SpatialMixer<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct LayerCache<F> {
    n1: LayerNormCache<F>,
    mixer: MixerCache<F>,
    n2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> TransformerLayer<F> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        num_heads: usize,
        mlp_hidden: usize,
        kind: AttentionKind,
        std: f64,
    ) -> Result<Self> {
        kind.validate()?;
        let mixer = match kind {
            AttentionKind::ConvMixer { kernel } => SpatialMixer::Conv(ConvMixer::new(rng, dim, kernel, std)?),
            _ => SpatialMixer::Attention {
                params: AttentionParams::new(rng, dim, num_heads, std)?,
                kind,
            },
        };
        Ok(Self {
            norm1: LayerNorm::new(dim),
            mixer,
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, mlp_hidden, std),
        })
    }

    /// Zeroes the last projection of both residual branches, turning the
    /// layer into an exact identity map.
    pub fn zero_output_projections(&mut self) {
        match &mut self.mixer {
            SpatialMixer::Attention { params, .. } => params.w_out.value.fill(F::zero()),
            SpatialMixer::Conv(c) => {
                c.project.weight.value.fill(F::zero());
                if let Some(b) = &mut c.project.bias {
                    b.value.fill(F::zero());
                }
            }
        }
        self.mlp.fc2.weight.value.fill(F::zero());
        if let Some(b) = &mut self.mlp.fc2.bias {
            b.value.fill(F::zero());
        }
    }

    /// Per-head token-mixing weights this layer's attention parameters would
    /// produce on `x` under `kind`. `None` for convolutional mixers.
    pub fn mixing_weights(
        &self,
        kind: AttentionKind,
        x: ArrayView2<'_, F>,
        shape: GridShape,
    ) -> Result<Option<Vec<Array2<F>>>> {
        match &self.mixer {
            SpatialMixer::Attention { params, .. } => {
                let (a, _) = self.norm1.forward(x);
                params.attention_weights(kind, a.view(), shape).map(Some)
            }
            SpatialMixer::Conv(_) => Ok(None),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, shape: GridShape) -> Result<(Array2<F>, LayerCache<F>)> {
        let (a, n1) = self.norm1.forward(x);
        let (mixed, mixer) = match &self.mixer {
            SpatialMixer::Attention { params, kind } => {
                let (y, c) = params.forward(*kind, a.view(), shape)?;
                (y, MixerCache::Attention(c))
            }
            SpatialMixer::Conv(conv) => {
                let (y, c) = conv.forward(a.view(), shape);
                (y, MixerCache::Conv(c))
            }
        };
        let h = &x + &mixed;
        let (b, n2) = self.norm2.forward(h.view());
        let (m, mlp) = self.mlp.forward(b.view(), DropoutMasks::none());
        let out = h + m;
        Ok((out, LayerCache { n1, mixer, n2, mlp }))
    }

    pub fn backward(&mut self, cache: &LayerCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let db = self.mlp.backward(&cache.mlp, dy);
        let mut dh = self.norm2.backward(&cache.n2, db.view());
        dh += &dy;
        let da = match (&mut self.mixer, &cache.mixer) {
            (SpatialMixer::Attention { params, .. }, MixerCache::Attention(c)) => params.backward(c, dh.view()),
            (SpatialMixer::Conv(conv), MixerCache::Conv(c)) => conv.backward(c, dh.view()),
            _ => unreachable!("cache produced by a different mixer"),
        };
        let mut dx = self.norm1.backward(&cache.n1, da.view());
        dx += &dh;
        dx
    }
}

impl<F: Real> Module<F> for TransformerLayer<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        match &mut self.mixer {
            SpatialMixer::Attention { params, .. } => params.visit_params(&join(prefix, "attn"), f),
            SpatialMixer::Conv(c) => c.visit_params(&join(prefix, "conv"), f),
        }
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.norm1.visit_values(&join(prefix, "norm1"), f);
        match &self.mixer {
            SpatialMixer::Attention { params, .. } => params.visit_values(&join(prefix, "attn"), f),
            SpatialMixer::Conv(c) => c.visit_values(&join(prefix, "conv"), f),
        }
        self.norm2.visit_values(&join(prefix, "norm2"), f);
        self.mlp.visit_values(&join(prefix, "mlp"), f);
    }
}
