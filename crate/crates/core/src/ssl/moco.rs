//! Query and momentum encoders with their heads.

use rand::{Rng, SeedableRng};
use rfssl_numerics::param::join;
use rfssl_numerics::{
    Checkpoint, Exec, Init, Mode, Module, OptimizerConfig, Param, Scalar, ScheduleKind, Tape, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssl::encoder::{Encoder, EncoderConfig};
use crate::ssl::heads::{Predictor, Projector};
use crate::ssl::loss::contrastive_loss;
use crate::ssl::schedule::TauRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoCoConfig {
    pub mlp_hidden: usize,
    pub out_dim: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    #[serde(default)]
    pub tau_rule: TauRule,
    pub momentum_0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the run length below `epochs` worth of steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub lr_floor: f64,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        MoCoConfig {
            mlp_hidden: 1024,
            out_dim: 256,
            tau_min: 0.1,
            tau_max: 0.2,
            tau_rule: TauRule::CosineRamp,
            momentum_0: 0.996,
            batch_size: 256,
            epochs: 20,
            max_steps: None,
            optimizer: OptimizerConfig::lars(0.03, 1e-4),
            lr_schedule: ScheduleKind::CosineAnnealing,
            warmup_steps: 0,
            lr_floor: 0.0,
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < tau_min <= tau_max, got {} and {}",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.momentum_0 > 0.0 && self.momentum_0 < 1.0) {
            return Err(Error::config(format!("momentum_0 {} outside (0, 1)", self.momentum_0)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("contrastive pretraining needs batch_size >= 2"));
        }
        if self.mlp_hidden == 0 || self.out_dim == 0 {
            return Err(Error::config("MLP dimensions must be positive"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::config("set epochs or max_steps"));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// Steps in a run over `n_frames` frames.
    pub fn total_steps(&self, n_frames: usize) -> Result<usize> {
        let per_epoch = n_frames / self.batch_size;
        if per_epoch == 0 {
            return Err(Error::data(format!(
                "{n_frames} frames cannot fill one batch of {}",
                self.batch_size
            )));
        }
        let by_epochs = per_epoch * self.epochs;
        Ok(match self.max_steps {
            Some(m) if self.epochs == 0 => m,
            Some(m) => m.min(by_epochs),
            None => by_epochs,
        })
    }
}

/// Backbone plus projection MLP.
#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub backbone: Encoder<T>,
    pub projector: Projector<T>,
}

impl<T: Scalar> Branch<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.backbone.forward(tape, x, mode)?;
        self.projector.forward(tape, h, mode)
    }
}

impl<T: Scalar> Module<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

/// `g ← m·g + (1 − m)·f` over every non-buffer parameter, matched by name.
pub fn ema_update<T: Scalar>(target: &mut dyn Module<T>, source: &dyn Module<T>, m: f64) -> Result<()> {
    let mut src: Vec<(String, Tensor<T>)> = Vec::new();
    source.visit("", &mut |n, p| {
        if !p.is_buffer() {
            src.push((n.to_string(), p.value.clone()));
        }
    });
    let mut i = 0;
    let mut err = None;
    let (mt, keep) = (T::from_f64(m), T::from_f64(1.0 - m));
    target.visit_mut("", &mut |n, p| {
        if p.is_buffer() || err.is_some() {
            return;
        }
        match src.get(i) {
            Some((sn, sv)) if sn == n && sv.shape() == p.shape() => {
                for (g, &f) in p.value.data_mut().iter_mut().zip(sv.data()) {
                    *g = mt * *g + keep * f;
                }
            }
            Some((sn, sv)) => {
                err = Some(Error::Mismatch(format!(
                    "momentum tree: {n} {:?} vs {sn} {:?}",
                    p.shape(),
                    sv.shape()
                )))
            }
            None => err = Some(Error::Mismatch(format!("momentum tree: {n} has no source"))),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != src.len() {
        return Err(Error::Mismatch(format!(
            "momentum tree: {} source tensors, {i} targets",
            src.len()
        )));
    }
    Ok(())
}

/// Query encoder `f` (branch + predictor) and momentum encoder `g`.
#[derive(Debug, Clone)]
pub struct MoCoState<T> {
    pub query: Branch<T>,
    pub predictor: Predictor<T>,
    pub key: Branch<T>,
    pub step: usize,
    pub total_steps: usize,
    pub encoder_config: EncoderConfig,
    pub config: MoCoConfig,
    /// Execution mode for the gradient-free key passes.
    pub exec: Exec,
}

pub const CHECKPOINT_KIND: &str = "moco";

impl<T: Scalar> MoCoState<T> {
    /// Fresh query encoder; the momentum encoder starts as its copy.
    pub fn new<R: Rng + ?Sized>(
        encoder: &EncoderConfig,
        config: &MoCoConfig,
        total_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let init = Init::KaimingUniform;
        let backbone = Encoder::new(encoder, init, rng)?;
        let projector = Projector::new(encoder.embedding_dim, config.mlp_hidden, config.out_dim, init, rng);
        let predictor = Predictor::new(config.out_dim, config.mlp_hidden, init, rng);
        let query = Branch { backbone, projector };
        let mut key = query.clone();
        key.set_requires_grad(false);
        Ok(MoCoState {
            query,
            predictor,
            key,
            step: 0,
            total_steps,
            encoder_config: encoder.clone(),
            config: config.clone(),
            exec: Exec::default(),
        })
    }

    fn check_batch(shape: &[usize]) -> Result<()> {
        if shape.first().copied().unwrap_or(0) < 2 {
            return Err(Error::data(format!(
                "contrastive encoding needs a batch of at least 2, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Normalized query `pred(proj(f(x)))` recorded on `tape`.
    pub fn encode_query(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Self::check_batch(tape.shape(x))?;
        let z = self.query.forward(tape, x, Mode::Train)?;
        let p = self.predictor.forward(tape, z, Mode::Train)?;
        Ok(tape.l2_normalize(p)?)
    }

    /// Normalized key `proj(g(x))`, computed on a private tape.
    pub fn encode_key(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_batch(x.shape())?;
        let mut tape = Tape::with_exec(self.exec);
        let xv = tape.constant(x.clone());
        let z = self.key.forward(&mut tape, xv, Mode::Train)?;
        let k = tape.l2_normalize(z)?;
        Ok(tape.value(k).clone())
    }

    /// `L(q(v1), k(v2)) + L(q(v2), k(v1))`.
    pub fn symmetric_loss(
        &mut self,
        tape: &mut Tape<T>,
        view1: &Tensor<T>,
        view2: &Tensor<T>,
        tau: f64,
    ) -> Result<Var> {
        if view1.shape() != view2.shape() {
            return Err(Error::data(format!(
                "view batches differ: {:?} vs {:?}",
                view1.shape(),
                view2.shape()
            )));
        }
        let k1 = self.encode_key(view1)?;
        let k2 = self.encode_key(view2)?;
        let x1 = tape.constant(view1.clone());
        let x2 = tape.constant(view2.clone());
        let q1 = self.encode_query(tape, x1)?;
        let q2 = self.encode_query(tape, x2)?;
        let k1 = tape.constant(k1);
        let k2 = tape.constant(k2);
        let a = contrastive_loss(tape, q1, k2, tau)?;
        let b = contrastive_loss(tape, q2, k1, tau)?;
        Ok(tape.add(a, b)?)
    }

    /// EMA of the momentum branch toward the query branch.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        ema_update(&mut self.key, &self.query, m)
    }

    pub fn zero_grad(&mut self) {
        self.query.zero_grad();
        self.predictor.zero_grad();
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "encoder": self.encoder_config,
            "moco": self.config,
            "total_steps": self.total_steps,
        })
    }

    /// Every parameter and buffer plus the given optimizer state.
    pub fn to_checkpoint(&self, optimizer_state: Vec<(String, Tensor<T>)>) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.step as u64, self.meta());
        ck.add_module(&self.query, "query");
        ck.add_module(&self.predictor, "predictor");
        ck.add_module(&self.key, "key");
        ck.add_tensors("optim", optimizer_state);
        ck
    }

    /// Restores a state written by [`MoCoState::to_checkpoint`]. Returns the
    /// optimizer state tensors alongside.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, Vec<(String, Tensor<T>)>)> {
        let (encoder, config) = checkpoint_configs(ck)?;
        let total_steps = ck.meta.get("total_steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut state = MoCoState::new(&encoder, &config, total_steps, &mut rng)?;
        let mismatch = |e: rfssl_numerics::NumericsError| Error::Mismatch(e.to_string());
        ck.load_module(&mut state.query, "query").map_err(mismatch)?;
        ck.load_module(&mut state.predictor, "predictor").map_err(mismatch)?;
        ck.load_module(&mut state.key, "key").map_err(mismatch)?;
        state.step = ck.step as usize;
        Ok((state, ck.with_prefix("optim")))
    }
}

fn checkpoint_configs<T: Scalar>(ck: &Checkpoint<T>) -> Result<(EncoderConfig, MoCoConfig)> {
    if ck.meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(Error::Mismatch("checkpoint was not written by pretraining".into()));
    }
    let enc = ck
        .meta
        .get("encoder")
        .cloned()
        .ok_or_else(|| Error::Mismatch("checkpoint lacks an encoder config".into()))?;
    let moco = ck
        .meta
        .get("moco")
        .cloned()
        .ok_or_else(|| Error::Mismatch("checkpoint lacks a pretraining config".into()))?;
    let enc: EncoderConfig = serde_json::from_value(enc).map_err(|e| Error::Mismatch(e.to_string()))?;
    let moco: MoCoConfig = serde_json::from_value(moco).map_err(|e| Error::Mismatch(e.to_string()))?;
    Ok((enc, moco))
}

/// Encoder configuration stored in a pretraining checkpoint.
pub fn checkpoint_encoder_config<T: Scalar>(ck: &Checkpoint<T>) -> Result<EncoderConfig> {
    Ok(checkpoint_configs(ck)?.0)
}

/// The query backbone of a pretraining checkpoint. When `expected` is given
/// the stored encoder configuration must equal it.
pub fn load_backbone<T: Scalar>(ck: &Checkpoint<T>, expected: Option<&EncoderConfig>) -> Result<Encoder<T>> {
    let config = checkpoint_encoder_config(ck)?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Mismatch(format!(
                "checkpoint encoder {config:?} differs from configured {want:?}"
            )));
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut enc = Encoder::new(&config, Init::KaimingUniform, &mut rng)?;
    ck.load_module(&mut enc, "query.backbone")
        .map_err(|e| Error::Mismatch(e.to_string()))?;
    Ok(enc)
}
