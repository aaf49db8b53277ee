//! Dense building blocks with hand-written backward passes.
//!
//! Every layer works on `(rows, channels)` matrices. Forward returns the
//! output plus whatever the backward pass needs; backward accumulates into the
//! layer's parameter gradients and returns the input gradient.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{join, Module, Param, ParamSlot, Real};

pub fn normal_matrix<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation, written as `x * sigmoid(2u)` with
/// `u = c (x + a x^3)`, which equals `0.5 x (1 + tanh u)`.
pub fn gelu<F: Real>(x: F) -> F {
    x * gelu_gate(x)
}

fn gelu_gate<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::one() / (F::one() + (-(u + u)).exp())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let s = gelu_gate(x);
    let du = c * (F::one() + F::lit(3.0) * a * x * x);
    s + x * F::lit(2.0) * s * (F::one() - s) * du
}

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Param<F, ndarray::Ix2>,
    pub bias: Option<Param<F, ndarray::Ix1>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64, bias: bool) -> Self {
        Self {
            weight: Param::new(normal_matrix(rng, input, output, std)),
            bias: bias.then(|| Param::new(Array1::zeros(output))),
        }
    }

    pub fn from_weights(weight: Array2<F>, bias: Option<Array1<F>>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0));
        }
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        f(&join(prefix, "weight"), self.weight.slot());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b.slot());
        }
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&join(prefix, "weight"), self.weight.value.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.value.view().into_dyn());
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F: Real> {
    pub gamma: Param<F, ndarray::Ix1>,
    pub beta: Param<F, ndarray::Ix1>,
    pub eps: F,
}

pub struct LayerNormCache<F> {
    normed: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::new(Array1::zeros(dim)),
            eps: F::lit(1e-6),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::from_usize(x.ncols()).unwrap();
        let mut normed = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            let r = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * r);
            *s = r;
        }
        let y = &normed * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        self.gamma.grad += &(&dy * &cache.normed).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let d = F::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.gamma.value;
        for ((mut row, nrow), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normed.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(nrow.iter()).map(|(&g, &n)| g * n).sum::<F>() / d;
            Zip::from(&mut row)
                .and(&nrow)
                .for_each(|g, &n| *g = r * (*g - mean_g - n * mean_gx));
        }
        dx
    }
}

impl<F: Real> Module<F> for LayerNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        f(&join(prefix, "gamma"), self.gamma.slot());
        f(&join(prefix, "beta"), self.beta.slot());
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&join(prefix, "gamma"), self.gamma.value.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.value.view().into_dyn());
    }
}

/// Inverted-dropout masks for the two dropout sites of an [`Mlp`].
///
/// Each entry is either `0` (dropped) or `1 / (1 - p)` (kept).
pub struct DropoutMasks<F> {
    pub hidden: Option<Array2<F>>,
    pub output: Option<Array2<F>>,
}

impl<F> DropoutMasks<F> {
    pub fn none() -> Self {
        Self {
            hidden: None,
            output: None,
        }
    }
}

pub fn dropout_mask<F: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Array2<F> {
    let keep = F::lit(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

/// Two-layer perceptron `fc2(drop(gelu(fc1(x))))`, optionally followed by an
/// output dropout.
#[derive(Debug, Clone)]
pub struct Mlp<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    hidden: Array2<F>,
    masks: DropoutMasks<F>,
}

impl<F: Real> MlpCache<F> {
    pub fn masks(&self) -> &DropoutMasks<F> {
        &self.masks
    }
}

impl<F: Real> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize, std: f64) -> Self {
        Self {
            fc1: Linear::new(rng, dim, hidden, std, true),
            fc2: Linear::new(rng, hidden, dim, std, true),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>, masks: DropoutMasks<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x);
        let mut hidden = pre.mapv(gelu);
        if let Some(m) = &masks.hidden {
            hidden *= m;
        }
        let mut y = self.fc2.forward(hidden.view());
        if let Some(m) = &masks.output {
            y *= m;
        }
        let cache = MlpCache {
            x: x.to_owned(),
            pre,
            hidden,
            masks,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let dy = match &cache.masks.output {
            Some(m) => &dy * m,
            None => dy.to_owned(),
        };
        let mut dh = self.fc2.backward(cache.hidden.view(), dy.view());
        if let Some(m) = &cache.masks.hidden {
            dh *= m;
        }
        Zip::from(&mut dh)
            .and(&cache.pre)
            .for_each(|g, &p| *g = *g * gelu_grad(p));
        self.fc1.backward(cache.x.view(), dh.view())
    }
}

impl<F: Real> Module<F> for Mlp<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSlot<'_, F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_values(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.fc1.visit_values(&join(prefix, "fc1"), f);
        self.fc2.visit_values(&join(prefix, "fc2"), f);
    }
}
