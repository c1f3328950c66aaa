//! The pretraining loop.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfssl_numerics::{Exec, Mode, Module, Optimizer, ScheduleConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewMask};
use crate::datastore::FrameSet;
use crate::error::{Error, Result};
use crate::sigsynth::derive_seed;
use crate::ssl::encoder::EncoderConfig;
use crate::ssl::moco::{MoCoConfig, MoCoState};
use crate::ssl::schedule::{momentum_schedule, tau_schedule};
use crate::FRAME_LEN;

const VIEW_SALT: u64 = 0x7669_6577;
const EPOCH_SALT: u64 = 0x6570_6f63;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSetup {
    pub encoder: EncoderConfig,
    pub moco: MoCoConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub m: f64,
    pub loss: f64,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean loss of the first and last tenth of a trace.
pub fn trace_deciles(trace: &[TraceRow]) -> Option<(f64, f64)> {
    let k = trace.len() / 10;
    if k == 0 {
        return None;
    }
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some((mean(&trace[..k]), mean(&trace[trace.len() - k..])))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: MoCoState<f32>,
    pub optimizer: Optimizer<f32>,
    pub trace: Vec<TraceRow>,
    /// Stopped early by the cancel flag.
    pub interrupted: bool,
    pub seconds: f64,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> rfssl_numerics::Checkpoint<f32> {
        self.state.to_checkpoint(self.optimizer.export_state())
    }
}

/// Fills two `(B, 2·n_rx, 1024)` view batches for the frames at `indices`.
/// Each element draws its masks from its own generator, keyed by step and
/// position, so the result does not depend on scheduling.
pub fn build_views(
    frames: &FrameSet,
    indices: &[usize],
    augment: &AugmentConfig,
    seed: u64,
    step: usize,
    exec: Exec,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let len = frames.real_len();
    let n_rx = frames.n_rx();
    let b = indices.len();
    let mut v1 = vec![0f32; b * len];
    let mut v2 = vec![0f32; b * len];
    exec.for_each_chunk2(&mut v1, len, &mut v2, len, |i, a, c| {
        frames.write_real_view(indices[i], a);
        c.copy_from_slice(a);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ VIEW_SALT, (step * b + i) as u64));
        ViewMask::draw(n_rx, augment, &mut rng).apply_real(a);
        ViewMask::draw(n_rx, augment, &mut rng).apply_real(c);
    });
    let shape = vec![b, 2 * n_rx, FRAME_LEN];
    Ok((Tensor::new(shape.clone(), v1)?, Tensor::new(shape, v2)?))
}

/// Runs MoCo pretraining over `frames` (labels unused). Stops at a step
/// boundary when `cancel` becomes true.
pub fn pretrain(frames: &FrameSet, setup: &PretrainSetup, cancel: Option<&AtomicBool>) -> Result<PretrainOutcome> {
    setup.moco.validate()?;
    setup.augment.validate()?;
    setup.encoder.validate()?;
    if frames.n_rx() != setup.encoder.n_rx {
        return Err(Error::config(format!(
            "frames have {} antennas, encoder expects {}",
            frames.n_rx(),
            setup.encoder.n_rx
        )));
    }
    let cfg = &setup.moco;
    let total = cfg.total_steps(frames.len())?;
    let sched = ScheduleConfig {
        kind: cfg.lr_schedule,
        total_steps: total,
        warmup_steps: cfg.warmup_steps.min(total),
        floor: cfg.lr_floor,
    };
    let peak = cfg.optimizer.effective_lr(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut state = MoCoState::<f32>::new(&setup.encoder, cfg, total, &mut rng)?;
    state.exec = setup.exec;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let per_epoch = frames.len() / cfg.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(total);
    let started = Instant::now();
    let mut interrupted = false;

    for step in 0..total {
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        if slot == 0 {
            order = (0..frames.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                setup.seed ^ EPOCH_SALT,
                epoch as u64,
            )));
        }
        let idx = &order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];
        let lr = sched.value(peak, step)?;
        let tau = tau_schedule(cfg.tau_rule, cfg.tau_min, cfg.tau_max, step, total)?;
        let m = momentum_schedule(cfg.momentum_0, step, total)?;
        let diverged = || Error::Diverged {
            step,
            lr,
            tau,
            momentum: m,
        };

        let (v1, v2) = build_views(frames, idx, &setup.augment, setup.seed, step, setup.exec)?;
        let mut tape = Tape::with_exec(setup.exec);
        let loss = state.symmetric_loss(&mut tape, &v1, &v2, tau)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(diverged());
        }
        tape.backward(loss)?;
        state.zero_grad();
        state.query.collect_grads(&tape)?;
        state.predictor.collect_grads(&tape)?;
        drop(tape);
        let stepped = optimizer
            .step(&mut state.query, "query", lr)
            .and_then(|_| optimizer.step(&mut state.predictor, "predictor", lr));
        if let Err(e) = stepped {
            log::error!("{e}");
            return Err(diverged());
        }
        state.zero_grad();
        state.momentum_update(m)?;
        state.step = step + 1;
        let row = TraceRow {
            step,
            lr,
            tau,
            m,
            loss: value,
        };
        if step % 25 == 0 || step + 1 == total {
            log::info!(
                "step {step}/{total} loss {value:.4} lr {lr:.4} tau {tau:.3} m {m:.5} ({:.0}s)",
                started.elapsed().as_secs_f64()
            );
        }
        trace.push(row);
    }
    Ok(PretrainOutcome {
        state,
        optimizer,
        trace,
        interrupted,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean cosine similarity of positive pairs minus that of mismatched pairs,
/// measured on query-branch projections of two augmented views.
pub fn alignment_gap(
    state: &mut MoCoState<f32>,
    frames: &FrameSet,
    augment: &AugmentConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let n = n.min(frames.len());
    if n < 2 {
        return Err(Error::data("alignment needs at least two frames"));
    }
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    let (v1, v2) = build_views(frames, &idx, augment, seed, 0, state.exec)?;
    let mut embed = |v: Tensor<f32>| -> Result<Vec<f32>> {
        let mut tape = Tape::with_exec(state.exec);
        let x = tape.constant(v);
        let z = state.query.forward(&mut tape, x, Mode::Eval)?;
        let z = tape.l2_normalize(z)?;
        Ok(tape.value(z).data().to_vec())
    };
    let (a, b) = (embed(v1)?, embed(v2)?);
    let d = a.len() / n;
    let cos = |i: usize, j: usize| -> f64 {
        a[i * d..(i + 1) * d]
            .iter()
            .zip(&b[j * d..(j + 1) * d])
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum()
    };
    let pos = (0..n).map(|i| cos(i, i)).sum::<f64>() / n as f64;
    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                neg += cos(i, j);
            }
        }
    }
    neg /= (n * (n - 1)) as f64;
    Ok(pos - neg)
}

/// Requires every parameter of the query branch to stay finite.
pub fn check_finite(state: &MoCoState<f32>) -> Result<()> {
    let mut bad = None;
    state.query.visit("query", &mut |n, p| {
        if bad.is_none() && !p.value.all_finite() {
            bad = Some(n.to_string());
        }
    });
    match bad {
        Some(n) => Err(Error::data(format!("parameter {n} is not finite"))),
        None => Ok(()),
    }
}
