//! Task heads and the composed task model.

use rand::Rng;
use rfssl_numerics::param::join;
use rfssl_numerics::{Init, Linear, Module, Param, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigsynth::Modulation;
use crate::ssl::Encoder;

/// AoA head outputs are multiplied by this so raw outputs stay near unit
/// scale while predictions are in degrees.
pub const AOA_OUTPUT_SCALE: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Elevation θ and azimuth φ regression, in degrees.
    Aoa,
    /// Six-way modulation classification.
    Amc,
}

impl Task {
    pub fn out_dim(self) -> usize {
        match self {
            Task::Aoa => 2,
            Task::Amc => Modulation::ALL.len(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Aoa => "AoA",
            Task::Amc => "AMC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub task: Task,
    pub n_layers: usize,
    /// When set, the backbone's output width must equal it.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
}

impl HeadConfig {
    pub fn new(task: Task, n_layers: usize) -> Self {
        HeadConfig {
            task,
            n_layers,
            embedding_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::config(format!(
                "head n_layers must be 1 or 2, got {}",
                self.n_layers
            )));
        }
        Ok(())
    }
}

/// One linear layer, or two with a ReLU and hidden width equal to the input.
#[derive(Debug, Clone)]
pub struct TaskHead<T> {
    pub task: Task,
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> TaskHead<T> {
    pub fn new<R: Rng + ?Sized>(config: &HeadConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let out = config.task.out_dim();
        let layers = if config.n_layers == 1 {
            vec![Linear::new(input_dim, out, true, Init::KaimingUniform, rng)]
        } else {
            vec![
                Linear::new(input_dim, input_dim, true, Init::KaimingUniform, rng),
                Linear::new(input_dim, out, true, Init::KaimingUniform, rng),
            ]
        };
        Ok(TaskHead {
            task: config.task,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    /// `(N, input_dim)` → `(N, out)`; AoA outputs are in degrees.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        if self.task == Task::Aoa {
            h = tape.scale(h, T::from_f64(AOA_OUTPUT_SCALE));
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for TaskHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Per-feature affine normalization fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl Standardizer {
    /// Fits on row-major `(n, d)` features.
    pub fn fit(features: &[f32], d: usize) -> Self {
        let n = (features.len() / d).max(1) as f64;
        let mut mean = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for row in features.chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut out_mean = Vec::with_capacity(d);
        let mut inv = Vec::with_capacity(d);
        for j in 0..d {
            let m = mean[j] / n;
            let var = (sq[j] / n - m * m).max(0.0);
            out_mean.push(m as f32);
            inv.push((1.0 / (var + 1e-6).sqrt()) as f32);
        }
        Standardizer {
            mean: out_mean,
            inv_std: inv,
        }
    }

    pub fn apply(&self, features: &mut [f32]) {
        let d = self.mean.len();
        for row in features.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

/// Backbone with a task head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub backbone: Encoder<f32>,
    pub head: TaskHead<f32>,
    pub frozen: bool,
    /// Applied to backbone features before the head (frozen probes).
    pub standardizer: Option<Standardizer>,
}

/// Composes `backbone` with a fresh head. A frozen model marks every
/// backbone parameter non-trainable.
pub fn attach_head<R: Rng + ?Sized>(
    mut backbone: Encoder<f32>,
    config: &HeadConfig,
    frozen: bool,
    rng: &mut R,
) -> Result<TaskModel> {
    let dim = backbone.embedding_dim();
    if let Some(want) = config.embedding_dim {
        if want != dim {
            return Err(Error::Mismatch(format!(
                "head expects {want}-d features, backbone emits {dim}"
            )));
        }
    }
    let head = TaskHead::new(config, dim, rng)?;
    backbone.set_requires_grad(!frozen);
    Ok(TaskModel {
        backbone,
        head,
        frozen,
        standardizer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::{Capacity, EncoderConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = TaskHead::<f32>::new(&HeadConfig::new(Task::Aoa, 1), 64, &mut rng).unwrap();
        assert_eq!(h.num_trainable(), 64 * 2 + 2);
        let h = TaskHead::<f32>::new(&HeadConfig::new(Task::Amc, 2), 64, &mut rng).unwrap();
        assert_eq!(h.num_trainable(), 64 * 64 + 64 + 64 * 6 + 6);
        assert!(TaskHead::<f32>::new(&HeadConfig::new(Task::Amc, 3), 64, &mut rng).is_err());
    }

    #[test]
    fn attach_checks_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::new(Capacity::Small), Init::KaimingUniform, &mut rng).unwrap();
        let mut cfg = HeadConfig::new(Task::Amc, 1);
        cfg.embedding_dim = Some(128);
        assert!(attach_head(enc.clone(), &cfg, true, &mut rng).is_err());
        cfg.embedding_dim = Some(64);
        let m = attach_head(enc, &cfg, true, &mut rng).unwrap();
        assert_eq!(m.backbone.num_trainable(), m.backbone.num_trainable());
        let mut trainable = 0;
        m.backbone.visit("", &mut |_, p| trainable += p.requires_grad as usize);
        assert_eq!(trainable, 0);
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let x = vec![1.0f32, 10.0, 3.0, 30.0, 5.0, 50.0];
        let s = Standardizer::fit(&x, 2);
        let mut y = x.clone();
        s.apply(&mut y);
        assert!((y[0] + y[2] + y[4]).abs() < 1e-5);
        assert!((y[1] + 1.2247).abs() < 1e-3);
    }
}
