//! Convolutional token mixer: pointwise expand, GELU, depthwise `k x k`
//! convolution over the token grid, pointwise project. Zero padding.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, Zip};
use rand::Rng;

use super::layers::{gelu, gelu_grad, normal_matrix, Linear};
use crate::error::{Error, Result};
use crate::tensor::{join, GridShape, Module, Param, ParamSlot, Real};

pub const CONV_EXPANSION: usize = 2;

#[derive(Debug, Clone)]
pub struct ConvMixer<F: Real> {
    pub expand: Linear<F>,
    /// `(kernel * kernel, channels)`; row `di * kernel + dj`.
    pub depthwise: Param<F, ndarray::Ix2>,
    pub depthwise_bias: Param<F, ndarray::Ix1>,
    pub project: Linear<F>,
    pub kernel: usize,
}

pub struct ConvCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
    conv: Array2<F>,
    shape: GridShape,
}

impl<F: Real> ConvMixer<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, kernel: usize, std: f64) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::config(format!("conv mixer kernel must be odd, got {kernel}")));
        }
        let hidden = dim * CONV_EXPANSION;
        Ok(Self {
            expand: Linear::new(rng, dim, hidden, std, true),
            depthwise: Param::new(normal_matrix(rng, kernel * kernel, hidden, std)),
            depthwise_bias: Param::new(Array1::zeros(hidden)),
            project: Linear::new(rng, hidden, dim, std, true),
            kernel,
        })
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let k = self.kernel;
        let r = (k / 2) as isize;
        (0..k * k).map(move |o| (o, (o / k) as isize - r, (o % k) as isize - r))
    }

    fn depthwise_forward(&self, x: &Array2<F>, shape: GridShape) -> Array2<F> {
        let (h, w, n) = (shape.grid_h as isize, shape.grid_w as isize, shape.tokens());
        let mut out = Array2::zeros(x.raw_dim());
        for b in 0..shape.batch {
            for i in 0..h {
                for j in 0..w {
                    let row = b * n + (i * w + j) as usize;
                    let mut acc = out.row_mut(row);
                    acc.assign(&self.depthwise_bias.value);
                    for (o, di, dj) in self.offsets() {
                        let (si, sj) = (i + di, j + dj);
                        if si < 0 || sj < 0 || si >= h || sj >= w {
                            continue;
                        }
                        let src = x.row(b * n + (si * w + sj) as usize);
                        Zip::from(&mut acc)
                            .and(&src)
                            .and(self.depthwise.value.row(o))
                            .for_each(|a, &s, &k| *a = *a + s * k);
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, shape: GridShape) -> (Array2<F>, ConvCache<F>) {
        let pre = self.expand.forward(x);
        let act = pre.mapv(gelu);
        let conv = self.depthwise_forward(&act, shape);
        let y = self.project.forward(conv.view());
        let cache = ConvCache {
            x: x.to_owned(),
            pre,
            act,
            conv,
            shape,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let dconv = self.project.backward(cache.conv.view(), dy);
        let shape = cache.shape;
        let (h, w, n) = (shape.grid_h as isize, shape.grid_w as isize, shape.tokens());
        let mut dact = Array2::zeros(cache.act.raw_dim());
        let offsets: Vec<_> = self.offsets().collect();
        for b in 0..shape.batch {
            for i in 0..h {
                for j in 0..w {
                    let row = b * n + (i * w + j) as usize;
                    let g = dconv.row(row);
                    self.depthwise_bias.grad += &g;
                    for &(o, di, dj) in &offsets {
                        let (si, sj) = (i + di, j + dj);
                        if si < 0 || sj < 0 || si >= h || sj >= w {
                            continue;
                        }
                        let src = b * n + (si * w + sj) as usize;
                        let mut kg = self.depthwise.grad.row_mut(o);
                        Zip::from(&mut kg)
                            .and(&cache.act.row(src))
                            .and(&g)
                            .for_each(|kg, &a, &g| *kg = *kg + a * g);
                        let mut da = dact.row_mut(src);
                        Zip::from(&mut da)
                            .and(&g)
                            .and(self.depthwise.value.row(o))
                            .for_each(|d, &g, &k| *d = *d + g * k);
                    }
                }
            }
        }
        Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| *d = *d * gelu_grad(p));
        self.expand.backward(cache.x.view(), dact.view())
    }
}

impl<F: Real> Module<F> for ConvMixer<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.expand.visit_params(&join(prefix, "expand"), f);
        f(&join(prefix, "depthwise.weight"), self.depthwise.slot());
        f(&join(prefix, "depthwise.bias"), self.depthwise_bias.slot());
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.expand.visit_values(&join(prefix, "expand"), f);
        f(&join(prefix, "depthwise.weight"), self.depthwise.value.view().into_dyn());
        f(&join(prefix, "depthwise.bias"), self.depthwise_bias.value.view().into_dyn());
        self.project.visit_values(&join(prefix, "project"), f);
    }
}
