//! StableAdamW with AMSGrad and the warmup + cosine learning-rate schedule.
//!
//! Per step and per tensor:
//!
//! ```text
//! m  = b1 m + (1 - b1) g
//! v  = b2 v + (1 - b2) g^2
//! vm = max(vm, v)                                  (AMSGrad)
//! m^ = m / (1 - b1^t),  v^ = vm / (1 - b2^t)
//! rms = sqrt(mean(g^2 / max(v^, eps^2)))
//! p  = p (1 - lr wd) - lr / max(1, rms) * m^ / (sqrt(v^) + eps)
//! ```
//!
//! Weight decay uses the schedule learning rate; only the Adam update is
//! clipped.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Module, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub lr_final: f64,
    pub amsgrad: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            eps: 1e-10,
            warmup_iters: 100,
            total_iters: 10_000,
            lr_final: 2e-4,
            amsgrad: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_peak) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < lr_final <= lr_peak, got {} and {}",
                self.lr_final, self.lr_peak
            )));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("betas must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::config("weight decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine annealing to `lr_final`
/// at `total_iters`.
pub fn lr_at(iteration: usize, cfg: &OptimConfig) -> f64 {
    if iteration < cfg.warmup_iters {
        return cfg.lr_peak * iteration as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.total_iters.saturating_sub(cfg.warmup_iters);
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = ((iteration - cfg.warmup_iters) as f64 / span as f64).min(1.0);
    cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * (1.0 + (PI * progress).cos()) / 2.0
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState<F> {
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
    pub v_max: ArrayD<F>,
    pub step: u64,
}

impl<F: Real> OptimState<F> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: ArrayD::zeros(shape),
            v: ArrayD::zeros(shape),
            v_max: ArrayD::zeros(shape),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStep {
    pub rms: f64,
    pub effective_lr: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// One StableAdamW update of a single tensor. A non-finite gradient leaves
/// parameters and state untouched and reports `skipped`.
pub fn stable_adamw_step<F: Real>(
    mut param: ArrayViewMutD<'_, F>,
    grad: ArrayViewD<'_, F>,
    state: &mut OptimState<F>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<TensorStep> {
    if param.shape() != grad.shape() || state.m.shape() != grad.shape() {
        return Err(Error::config(format!(
            "optimizer shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if lr < 0.0 {
        return Err(Error::config("learning rate must be non-negative"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(TensorStep {
            rms: f64::NAN,
            effective_lr: 0.0,
            clipped: false,
            skipped: true,
        });
    }
    state.step += 1;
    let (b1, b2) = (F::lit(cfg.betas.0), F::lit(cfg.betas.1));
    let one = F::one();
    Zip::from(&mut state.m).and(&grad).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
    Zip::from(&mut state.v).and(&grad).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
    if cfg.amsgrad {
        Zip::from(&mut state.v_max)
            .and(&state.v)
            .for_each(|vm, &v| *vm = if v > *vm { v } else { *vm });
    } else {
        state.v_max.assign(&state.v);
    }
    let t = state.step as i32;
    let bc1 = F::lit(1.0 - cfg.betas.0.powi(t));
    let bc2 = F::lit(1.0 - cfg.betas.1.powi(t));
    let eps = F::lit(cfg.eps);
    let eps2 = eps * eps;

    let n = grad.len().max(1);
    let mut acc = F::zero();
    Zip::from(&grad).and(&state.v_max).for_each(|&g, &vm| {
        let vhat = vm / bc2;
        acc += g * g / if vhat > eps2 { vhat } else { eps2 };
    });
    let rms = (acc / F::from_usize(n).unwrap()).sqrt().to_f64().unwrap();
    let clipped = rms > 1.0;
    let effective_lr = lr / rms.max(1.0);

    let step = F::lit(effective_lr);
    let decay = F::lit(1.0 - lr * cfg.weight_decay);
    Zip::from(&mut param)
        .and(&state.m)
        .and(&state.v_max)
        .for_each(|p, &m, &vm| {
            let mhat = m / bc1;
            let vhat = vm / bc2;
            *p = *p * decay - step * (mhat / (vhat.sqrt() + eps));
        });
    Ok(TensorStep {
        rms,
        effective_lr,
        clipped,
        skipped: false,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub tensors: usize,
    pub clip_fraction: f64,
    pub mean_effective_lr: f64,
    pub skipped: usize,
}

/// Optimizer over every parameter of a [`Module`], with state keyed by
/// parameter name.
#[derive(Debug, Clone)]
pub struct StableAdamW<F> {
    pub config: OptimConfig,
    states: BTreeMap<String, OptimState<F>>,
    skipped_total: usize,
}

impl<F: Real> StableAdamW<F> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: BTreeMap::new(),
            skipped_total: 0,
        })
    }

    pub fn state(&self, name: &str) -> Option<&OptimState<F>> {
        self.states.get(name)
    }

    /// Number of tensor updates skipped for non-finite gradients.
    pub fn skipped_total(&self) -> usize {
        self.skipped_total
    }

    pub fn step<M: Module<F> + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<StepStats> {
        let cfg = self.config;
        let states = &mut self.states;
        let mut stats = StepStats::default();
        let mut clipped = 0usize;
        let mut lr_sum = 0.0;
        let mut err = None;
        module.visit_params("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let state = states
                .entry(name.to_string())
                .or_insert_with(|| OptimState::new(slot.value.shape()));
            match stable_adamw_step(slot.value, slot.grad.view(), state, lr, &cfg) {
                Ok(s) => {
                    stats.tensors += 1;
                    if s.skipped {
                        stats.skipped += 1;
                    } else {
                        clipped += usize::from(s.clipped);
                        lr_sum += s.effective_lr;
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let applied = stats.tensors - stats.skipped;
        if applied > 0 {
            stats.clip_fraction = clipped as f64 / applied as f64;
            stats.mean_effective_lr = lr_sum / applied as f64;
        }
        self.skipped_total += stats.skipped;
        Ok(stats)
    }
}
