//! Projection and prediction MLPs.

use rand::Rng;
use rfssl_numerics::param::join;
use rfssl_numerics::{BatchNorm, Init, Linear, Mode, Module, Param, Scalar, Tape, Var};

use crate::error::Result;

/// `Linear → BN → ReLU → Linear → BN` (last norm without affine).
#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm<T>,
}

impl<T: Scalar> Projector<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, init: Init, rng: &mut R) -> Self {
        Projector {
            fc1: Linear::new(input, hidden, false, init, rng),
            bn1: BatchNorm::new(hidden, true),
            fc2: Linear::new(hidden, output, false, init, rng),
            bn2: BatchNorm::new(output, false),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, h)?;
        Ok(self.bn2.forward(tape, h, mode)?)
    }
}

impl<T: Scalar> Module<T> for Projector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// `Linear → BN → ReLU → Linear`, query side only.
#[derive(Debug, Clone)]
pub struct Predictor<T> {
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Predictor<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, init: Init, rng: &mut R) -> Self {
        Predictor {
            fc1: Linear::new(dim, hidden, false, init, rng),
            bn1: BatchNorm::new(hidden, true),
            fc2: Linear::new(hidden, dim, true, init, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h);
        Ok(self.fc2.forward(tape, h)?)
    }
}

impl<T: Scalar> Module<T> for Predictor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
