//! Parameterized building blocks.

use rand::Rng;

use crate::error::Result;
use crate::init::{bias_uniform, Init};
use crate::param::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Affine map `y = x Wᵀ + b` over `x: (N, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, init: Init, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(init.sample(vec![outputs, inputs], inputs, outputs, rng)),
            bias: bias.then(|| Param::new(bias_uniform(outputs, inputs, rng))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul_t(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel;
        Conv1d {
            weight: Param::new(init.sample(vec![c_out, c_in, kernel], fan_in, c_out * kernel, rng)),
            bias: bias.then(|| Param::new(bias_uniform(c_out, fan_in, rng))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv1d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization over axis 1 with running statistics.
///
/// A training-mode call on a single sample (no batch statistics available)
/// normalizes with the running statistics instead.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Option<Param<T>>,
    pub beta: Option<Param<T>>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        BatchNorm {
            gamma: affine.then(|| Param::new(Tensor::full(vec![channels], T::one()))),
            beta: affine.then(|| Param::new(Tensor::zeros(vec![channels]))),
            running_mean: Param::buffer(Tensor::zeros(vec![channels])),
            running_var: Param::buffer(Tensor::full(vec![channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.as_ref().map(|p| tape.param(p));
        let beta = self.beta.as_ref().map(|p| tape.param(p));
        let eps = T::from_f64(self.eps);
        if mode == Mode::Train && tape.shape(x)[0] > 1 {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let unbias = T::from_f64(stats.count as f64 / (stats.count as f64 - 1.0));
            for (r, &v) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * v * unbias;
            }
            Ok(y)
        } else {
            tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                eps,
            )
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(g) = &self.gamma {
            f(&join(prefix, "gamma"), g);
        }
        if let Some(b) = &self.beta {
            f(&join(prefix, "beta"), b);
        }
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(g) = &mut self.gamma {
            f(&join(prefix, "gamma"), g);
        }
        if let Some(b) = &mut self.beta {
            f(&join(prefix, "beta"), b);
        }
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNorm {
            groups,
            gamma: Param::new(Tensor::full(vec![channels], T::one())),
            beta: Param::new(Tensor::zeros(vec![channels])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.group_norm(x, self.groups, Some(g), Some(b), T::from_f64(self.eps))
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Normalization layer selectable per model.
#[derive(Debug, Clone)]
pub enum Norm<T> {
    Batch(BatchNorm<T>),
    Group(GroupNorm<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Batch,
    Group,
}

impl<T: Scalar> Norm<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm::new(channels, true)),
            NormKind::Group => {
                let groups = [8, 4, 2].into_iter().find(|g| channels % g == 0).unwrap_or(1);
                Norm::Group(GroupNorm::new(channels, groups))
            }
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Norm::Batch(n) => n.forward(tape, x, mode),
            Norm::Group(n) => n.forward(tape, x),
        }
    }
}

impl<T: Scalar> Module<T> for Norm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Norm::Batch(n) => n.visit(prefix, f),
            Norm::Group(n) => n.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Norm::Batch(n) => n.visit_mut(prefix, f),
            Norm::Group(n) => n.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_parameter_count() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let l = Linear::<f32>::new(64, 2, true, Init::KaimingUniform, &mut rng);
        assert_eq!(l.num_trainable(), 64 * 2 + 2);
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1, false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = bn.forward(&mut tape, x, Mode::Train).unwrap();
        assert!((tape.value(y).data().iter().sum::<f64>()).abs() < 1e-12);
        assert!((bn.running_mean.value.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        let want = 0.9 + 0.1 * (5.0 / 3.0);
        assert!((bn.running_var.value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_single_sample_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(2, true);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let y = bn.forward(&mut tape, x, Mode::Train).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert_eq!(bn.running_mean.value.data(), &[0.0, 0.0]);
    }
}
