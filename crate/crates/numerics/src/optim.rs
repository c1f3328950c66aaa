//! Optimizers operating on a [`Module`]'s accumulated gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::kernels;
use crate::param::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LARS_EPS: f64 = 1e-8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Scale the learning rate by `batch / 256`.
    pub batch_scaling: bool,
}

impl OptimizerConfig {
    pub fn lars(base_lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lars,
            base_lr,
            weight_decay,
            momentum: 0.9,
            batch_scaling: true,
        }
    }

    pub fn adamw(base_lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            base_lr,
            weight_decay,
            momentum: 0.9,
            batch_scaling: false,
        }
    }

    pub fn sgd(base_lr: f64, weight_decay: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            base_lr,
            weight_decay,
            momentum,
            batch_scaling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(NumericsError::InvalidConfig(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NumericsError::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NumericsError::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Peak learning rate for a given batch size.
    pub fn effective_lr(&self, batch_size: usize) -> f64 {
        if self.batch_scaling {
            self.base_lr * batch_size as f64 / 256.0
        } else {
            self.base_lr
        }
    }
}

/// Layer-wise trust ratio `‖p‖ / (‖g‖ + wd·‖p‖ + ε)`. Falls back to 1 when
/// either norm vanishes.
pub fn lars_trust_ratio(param_norm: f64, grad_norm: f64, weight_decay: f64) -> f64 {
    let denom = grad_norm + weight_decay * param_norm;
    if param_norm > 0.0 && denom > 0.0 {
        param_norm / (denom + LARS_EPS)
    } else {
        1.0
    }
}

/// One LARS update of a single parameter tensor. Returns the trust ratio.
///
/// `d = g + wd·p`, `μ ← momentum·μ + trust·d`, `p ← p − lr·μ`.
pub fn lars_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    momentum_buf: &mut [T],
    weight_decay: f64,
    momentum: f64,
    lr: f64,
) -> Result<f64> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFinite("gradient".into()));
    }
    let pn = kernels::dot(param, param).as_f64().sqrt();
    let gn = kernels::dot(grad, grad).as_f64().sqrt();
    let trust = lars_trust_ratio(pn, gn, weight_decay);
    let (wd, m, tr, lr) = (
        T::from_f64(weight_decay),
        T::from_f64(momentum),
        T::from_f64(trust),
        T::from_f64(lr),
    );
    for ((p, &g), mu) in param.iter_mut().zip(grad).zip(momentum_buf.iter_mut()) {
        let d = g + wd * *p;
        *mu = m * *mu + tr * d;
        *p = *p - lr * *mu;
    }
    Ok(trust)
}

#[derive(Debug, Clone)]
struct SlotState<T> {
    bufs: Vec<Vec<T>>,
    t: u64,
}

/// Stateful optimizer keyed by parameter name.
///
/// Under LARS, one-dimensional tensors (biases, normalization scales) take a
/// plain momentum step without trust ratio or weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    state: BTreeMap<String, SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// of `module` that holds a gradient. Parameters are keyed by
    /// `prefix`-qualified names, so several modules can share one optimizer.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, module: &mut dyn Module<T>, prefix: &str, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NumericsError::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        let mut bad = None;
        module.visit(prefix, &mut |name, p| {
            if let Some(g) = &p.grad {
                if bad.is_none() && !g.all_finite() {
                    bad = Some(name.to_string());
                }
            }
        });
        if let Some(name) = bad {
            return Err(NumericsError::NonFinite(format!("gradient of {name}")));
        }
        let cfg = self.config.clone();
        let state = &mut self.state;
        let mut result = Ok(());
        module.visit_mut(prefix, &mut |name, p| {
            if result.is_err() || p.is_buffer() || !p.requires_grad {
                return;
            }
            let Some(grad) = p.grad.as_ref() else { return };
            let n = p.value.len();
            let nbufs = if cfg.kind == OptimizerKind::AdamW { 2 } else { 1 };
            let slot = state.entry(name.to_string()).or_insert_with(|| SlotState {
                bufs: vec![vec![T::zero(); n]; nbufs],
                t: 0,
            });
            slot.t += 1;
            let is_vector = p.value.ndim() == 1;
            let values = p.value.data_mut();
            let g = grad.data();
            match cfg.kind {
                OptimizerKind::Lars if is_vector => sgd_update(values, g, &mut slot.bufs[0], 0.0, cfg.momentum, lr),
                OptimizerKind::Lars => {
                    if let Err(e) = lars_update(values, g, &mut slot.bufs[0], cfg.weight_decay, cfg.momentum, lr) {
                        result = Err(e);
                    }
                }
                OptimizerKind::Sgd => sgd_update(values, g, &mut slot.bufs[0], cfg.weight_decay, cfg.momentum, lr),
                OptimizerKind::AdamW => {
                    let (m, rest) = slot.bufs.split_at_mut(1);
                    adamw_update(values, g, &mut m[0], &mut rest[0], slot.t, cfg.weight_decay, lr);
                }
            }
        });
        result
    }

    /// Optimizer state as named tensors, for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.state {
            for (i, b) in slot.bufs.iter().enumerate() {
                out.push((format!("{name}#buf{i}"), Tensor::from_parts(vec![b.len()], b.clone())));
            }
            out.push((format!("{name}#t"), Tensor::scalar(T::from_f64(slot.t as f64))));
        }
        out
    }

    pub fn import_state(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        self.state.clear();
        for (key, t) in tensors {
            let (name, field) = key
                .rsplit_once('#')
                .ok_or_else(|| NumericsError::InvalidConfig(format!("bad optimizer state key {key}")))?;
            let slot = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| SlotState { bufs: Vec::new(), t: 0 });
            if field == "t" {
                slot.t = t.item().as_f64() as u64;
            } else if let Some(i) = field.strip_prefix("buf").and_then(|s| s.parse::<usize>().ok()) {
                if slot.bufs.len() <= i {
                    slot.bufs.resize(i + 1, Vec::new());
                }
                slot.bufs[i] = t.data().to_vec();
            } else {
                return Err(NumericsError::InvalidConfig(format!("bad optimizer state key {key}")));
            }
        }
        Ok(())
    }
}

fn sgd_update<T: Scalar>(p: &mut [T], g: &[T], mu: &mut [T], wd: f64, momentum: f64, lr: f64) {
    let (wd, m, lr) = (T::from_f64(wd), T::from_f64(momentum), T::from_f64(lr));
    for ((p, &g), mu) in p.iter_mut().zip(g).zip(mu.iter_mut()) {
        let d = g + wd * *p;
        *mu = m * *mu + d;
        *p = *p - lr * *mu;
    }
}

fn adamw_update<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, wd: f64, lr: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    let decay = T::from_f64(1.0 - lr * wd);
    let step = T::from_f64(lr / bc1);
    let bc2 = T::from_f64(bc2);
    let eps = T::from_f64(ADAM_EPS);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        p[i] = p[i] * decay - step * m[i] / ((v[i] / bc2).sqrt() + eps);
    }
}
