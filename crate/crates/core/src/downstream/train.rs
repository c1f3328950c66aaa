//! Downstream training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfssl_numerics::{Exec, Mode, Module, Optimizer, OptimizerConfig, ScheduleConfig, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datastore::FrameSet;
use crate::downstream::head::{Standardizer, Task, TaskHead, TaskModel};
use crate::downstream::metrics::{angular_mae, classification_metrics, per_angle_errors, EvalReport, MaeConvention};
use crate::error::{Error, Result};
use crate::ssl::Encoder;
use crate::FRAME_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// Backbone fixed; only the head trains.
    Frozen,
    /// Backbone and head train together.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Backbone weights from a pretraining checkpoint.
    Pretrained,
    /// Untrained Xavier-initialized backbone.
    RandomXavier,
    /// Kaiming-initialized backbone trained end to end on labels only.
    SupervisedScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub mode: FineTuneMode,
    pub head_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Backbone learning rate relative to the head's.
    pub encoder_lr_factor: f64,
    /// Standardize frozen features with training-set statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mae_convention: MaeConvention,
    #[serde(default)]
    pub report_both_mae: bool,
}

fn yes() -> bool {
    true
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            mode: FineTuneMode::Frozen,
            head_layers: 1,
            epochs: 50,
            batch_size: 256,
            optimizer: OptimizerConfig::adamw(1e-3, 1e-2),
            warmup_epochs: 0,
            encoder_lr_factor: 0.0,
            standardize: true,
            seed: 0,
            mae_convention: MaeConvention::Mean,
            report_both_mae: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(1..=2).contains(&self.head_layers) {
            return Err(Error::config(format!(
                "head_layers must be 1 or 2, got {}",
                self.head_layers
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs exceeds epochs"));
        }
        match self.mode {
            FineTuneMode::Frozen if self.encoder_lr_factor != 0.0 => Err(Error::config(format!(
                "frozen mode requires encoder_lr_factor 0, got {}",
                self.encoder_lr_factor
            ))),
            FineTuneMode::Finetune if !(self.encoder_lr_factor >= 0.0 && self.encoder_lr_factor.is_finite()) => {
                Err(Error::config(format!(
                    "encoder_lr_factor must be finite and >= 0, got {}",
                    self.encoder_lr_factor
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Encoder learning-rate factor used when a fine-tuning run does not set one.
pub fn default_encoder_lr_factor(task: Task, label_ratio: f64) -> f64 {
    let tiny = label_ratio <= 0.001 + 1e-12;
    match (task, tiny) {
        (Task::Aoa, false) => 0.1,
        (Task::Aoa, true) => 0.01,
        (Task::Amc, false) => 10.0,
        (Task::Amc, true) => 0.001,
    }
}

/// Regression targets `[θ, φ]` (elevation, azimuth) or class indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Aoa(Vec<[f64; 2]>),
    Amc(Vec<usize>),
}

impl Targets {
    pub fn of(frames: &FrameSet, task: Task) -> Self {
        match task {
            Task::Aoa => Targets::Aoa(
                (0..frames.len())
                    .map(|i| {
                        let l = frames.labels(i);
                        [l.elevation_deg, l.azimuth_deg]
                    })
                    .collect(),
            ),
            Task::Amc => Targets::Amc((0..frames.len()).map(|i| frames.labels(i).modulation.index()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Aoa(v) => v.len(),
            Targets::Amc(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Aoa(_) => Task::Aoa,
            Targets::Amc(_) => Task::Amc,
        }
    }
}

/// Per-step losses and learning rates of one downstream run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurves {
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub head_lr: Vec<f64>,
    pub encoder_lr: Vec<f64>,
}

fn task_loss(tape: &mut Tape<f32>, out: Var, targets: &Targets, idx: &[usize]) -> Result<Var> {
    match targets {
        Targets::Aoa(t) => {
            let data: Vec<f32> = idx.iter().flat_map(|&i| [t[i][0] as f32, t[i][1] as f32]).collect();
            let target = tape.constant(Tensor::new(vec![idx.len(), 2], data)?);
            Ok(tape.mse(out, target)?)
        }
        Targets::Amc(t) => {
            let labels: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            Ok(tape.softmax_cross_entropy(out, &labels)?)
        }
    }
}

/// Batches per epoch and the batch size actually used.
fn batching(n: usize, batch_size: usize) -> (usize, usize) {
    let b = batch_size.min(n);
    (n / b, b)
}

fn schedule(cfg: &FineTuneConfig, per_epoch: usize) -> ScheduleConfig {
    ScheduleConfig::warmup_cosine(cfg.epochs * per_epoch, cfg.warmup_epochs * per_epoch)
}

/// Row-major `(N, 2·n_rx, 1024)` input batch for the frames at `idx`.
pub fn input_batch(frames: &FrameSet, idx: &[usize], exec: Exec) -> Result<Tensor<f32>> {
    let len = frames.real_len();
    let mut data = vec![0f32; idx.len() * len];
    exec.for_each_chunk(&mut data, len, |i, out| frames.write_real_view(idx[i], out));
    Ok(Tensor::new(vec![idx.len(), 2 * frames.n_rx(), FRAME_LEN], data)?)
}

/// Eval-mode backbone features, row-major `(N, d)`.
pub fn extract_features(backbone: &mut Encoder<f32>, frames: &FrameSet, batch: usize, exec: Exec) -> Result<Vec<f32>> {
    let d = backbone.embedding_dim();
    let mut out = Vec::with_capacity(frames.len() * d);
    let idx: Vec<usize> = (0..frames.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = input_batch(frames, chunk, exec)?;
        let mut tape = Tape::with_exec(exec);
        let x = tape.constant(x);
        let z = backbone.forward(&mut tape, x, Mode::Eval)?;
        out.extend_from_slice(tape.value(z).data());
    }
    Ok(out)
}

/// Trains `head` on fixed row-major `(N, d)` features.
pub fn train_head_on_features(
    head: &mut TaskHead<f32>,
    features: &[f32],
    targets: &Targets,
    cfg: &FineTuneConfig,
    exec: Exec,
) -> Result<TrainCurves> {
    cfg.validate()?;
    let d = head.input_dim();
    let n = targets.len();
    if n == 0 || features.len() != n * d {
        return Err(Error::data(format!(
            "{} features of width {d} do not match {n} targets",
            features.len()
        )));
    }
    let (per_epoch, b) = batching(n, cfg.batch_size);
    let sched = schedule(cfg, per_epoch);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = TrainCurves::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for idx in order.chunks_exact(b).take(per_epoch) {
            let lr = sched.value(cfg.optimizer.base_lr, step)?;
            let mut xs = Vec::with_capacity(b * d);
            for &i in idx {
                xs.extend_from_slice(&features[i * d..(i + 1) * d]);
            }
            let mut tape = Tape::with_exec(exec);
            let x = tape.constant(Tensor::new(vec![b, d], xs)?);
            let out = head.forward(&mut tape, x)?;
            let loss = task_loss(&mut tape, out, targets, idx)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    lr,
                    tau: f64::NAN,
                    momentum: f64::NAN,
                });
            }
            tape.backward(loss)?;
            head.zero_grad();
            head.collect_grads(&tape)?;
            opt.step(head, "head", lr)?;
            curves.step_loss.push(value);
            curves.head_lr.push(lr);
            curves.encoder_lr.push(0.0);
            epoch_sum += value;
            step += 1;
        }
        curves.epoch_loss.push(epoch_sum / per_epoch as f64);
    }
    Ok(curves)
}

/// Trains `model` on `frames`. Frozen models train the head on cached
/// eval-mode features; fine-tuned models update both parts with the backbone
/// at `encoder_lr_factor` times the head's learning rate.
pub fn train_task(model: &mut TaskModel, frames: &FrameSet, cfg: &FineTuneConfig, exec: Exec) -> Result<TrainCurves> {
    cfg.validate()?;
    if model.frozen != (cfg.mode == FineTuneMode::Frozen) {
        return Err(Error::config("model freezing does not match the fine-tune mode"));
    }
    let targets = Targets::of(frames, model.head.task);
    if model.frozen {
        let mut feats = extract_features(&mut model.backbone, frames, cfg.batch_size.max(64), exec)?;
        model.standardizer = if cfg.standardize {
            let s = Standardizer::fit(&feats, model.head.input_dim());
            s.apply(&mut feats);
            Some(s)
        } else {
            None
        };
        return train_head_on_features(&mut model.head, &feats, &targets, cfg, exec);
    }

    let n = frames.len();
    if n < 2 {
        return Err(Error::data("fine-tuning needs at least two labeled frames"));
    }
    model.standardizer = None;
    let (per_epoch, b) = batching(n, cfg.batch_size);
    let sched = schedule(cfg, per_epoch);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = TrainCurves::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for idx in order.chunks_exact(b).take(per_epoch) {
            let lr = sched.value(cfg.optimizer.base_lr, step)?;
            let enc_lr = lr * cfg.encoder_lr_factor;
            let x = input_batch(frames, idx, exec)?;
            let mut tape = Tape::with_exec(exec);
            let x = tape.constant(x);
            let z = model.backbone.forward(&mut tape, x, Mode::Train)?;
            let out = model.head.forward(&mut tape, z)?;
            let loss = task_loss(&mut tape, out, &targets, idx)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    lr,
                    tau: f64::NAN,
                    momentum: f64::NAN,
                });
            }
            tape.backward(loss)?;
            model.backbone.zero_grad();
            model.head.zero_grad();
            model.backbone.collect_grads(&tape)?;
            model.head.collect_grads(&tape)?;
            drop(tape);
            opt.step(&mut model.backbone, "encoder", enc_lr)?;
            opt.step(&mut model.head, "head", lr)?;
            curves.step_loss.push(value);
            curves.head_lr.push(lr);
            curves.encoder_lr.push(enc_lr);
            epoch_sum += value;
            step += 1;
        }
        curves.epoch_loss.push(epoch_sum / per_epoch as f64);
    }
    model.backbone.zero_grad();
    model.head.zero_grad();
    Ok(curves)
}

/// Head outputs for row-major `(N, d)` features, row-major `(N, out)`.
pub fn head_outputs(head: &TaskHead<f32>, features: &[f32], exec: Exec) -> Result<Vec<f32>> {
    let d = head.input_dim();
    let n = features.len() / d;
    let mut tape = Tape::with_exec(exec);
    let x = tape.constant(Tensor::new(vec![n, d], features.to_vec())?);
    let out = head.forward(&mut tape, x)?;
    Ok(tape.value(out).data().to_vec())
}

/// Head outputs of `model` on every frame, row-major `(N, out)`.
pub fn predict(model: &mut TaskModel, frames: &FrameSet, exec: Exec) -> Result<Vec<f32>> {
    let mut feats = extract_features(&mut model.backbone, frames, 256, exec)?;
    if let Some(s) = &model.standardizer {
        s.apply(&mut feats);
    }
    head_outputs(&model.head, &feats, exec)
}

/// Settings that shape an [`EvalReport`] beyond the predictions themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub label_ratio: f64,
    pub mae_convention: MaeConvention,
    pub report_both_mae: bool,
    pub fingerprint: String,
}

impl ReportOptions {
    pub fn from_config(cfg: &FineTuneConfig, label_ratio: f64, fingerprint: String) -> Self {
        ReportOptions {
            label_ratio,
            mae_convention: cfg.mae_convention,
            report_both_mae: cfg.report_both_mae,
            fingerprint,
        }
    }
}

/// Scores raw head outputs against `targets`.
pub fn report_from_outputs(outputs: &[f32], targets: &Targets, opts: &ReportOptions) -> Result<EvalReport> {
    let task = targets.task();
    let k = task.out_dim();
    let n = targets.len();
    if outputs.len() != n * k {
        return Err(Error::data(format!(
            "{} outputs for {n} examples of width {k}",
            outputs.len()
        )));
    }
    let mut report = EvalReport {
        task,
        n_examples: n,
        label_ratio: opts.label_ratio,
        mae_deg: None,
        mae_convention: opts.mae_convention,
        mae_alt_deg: None,
        accuracy: None,
        precision: None,
        recall: None,
        confusion: None,
        per_angle_errors: Vec::new(),
        fingerprint: opts.fingerprint.clone(),
    };
    match targets {
        Targets::Aoa(truth) => {
            let pred: Vec<[f64; 2]> = outputs.chunks_exact(2).map(|r| [r[0] as f64, r[1] as f64]).collect();
            report.mae_deg = Some(angular_mae(&pred, truth, opts.mae_convention));
            if opts.report_both_mae {
                let other = match opts.mae_convention {
                    MaeConvention::Mean => MaeConvention::Sum,
                    MaeConvention::Sum => MaeConvention::Mean,
                };
                report.mae_alt_deg = Some(angular_mae(&pred, truth, other));
            }
            report.per_angle_errors = per_angle_errors(&pred, truth);
        }
        Targets::Amc(truth) => {
            let pred: Vec<usize> = outputs
                .chunks_exact(k)
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .fold(
                            (0, f32::NEG_INFINITY),
                            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                        )
                        .0
                })
                .collect();
            let m = classification_metrics(&pred, truth, k);
            report.accuracy = Some(m.accuracy);
            report.precision = Some(m.precision);
            report.recall = Some(m.recall);
            report.confusion = Some(m.confusion);
        }
    }
    Ok(report)
}

/// Evaluates `model` on `frames`.
pub fn evaluate(model: &mut TaskModel, frames: &FrameSet, opts: &ReportOptions, exec: Exec) -> Result<EvalReport> {
    let outputs = predict(model, frames, exec)?;
    report_from_outputs(&outputs, &Targets::of(frames, model.head.task), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_requires_zero_factor() {
        let mut cfg = FineTuneConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.encoder_lr_factor = 0.1;
        assert!(cfg.validate().is_err());
        cfg.mode = FineTuneMode::Finetune;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_factors() {
        assert_eq!(default_encoder_lr_factor(Task::Aoa, 1.0), 0.1);
        assert_eq!(default_encoder_lr_factor(Task::Aoa, 0.001), 0.01);
        assert_eq!(default_encoder_lr_factor(Task::Amc, 0.1), 10.0);
        assert_eq!(default_encoder_lr_factor(Task::Amc, 0.001), 0.001);
    }

    #[test]
    fn argmax_report() {
        let outputs = [0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let opts = ReportOptions::from_config(&FineTuneConfig::default(), 1.0, String::new());
        let r = report_from_outputs(&outputs, &Targets::Amc(vec![1, 1]), &opts).unwrap();
        assert_eq!(r.accuracy, Some(0.5));
    }
}
