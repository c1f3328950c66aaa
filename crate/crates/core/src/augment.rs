//! Stochastic view generation for contrastive pretraining.
//!
//! A view is `antenna_dropout(zero_mask(frame))` with each stage present only
//! when enabled. Random draws happen in a fixed order (mask blocks, then
//! antenna gates), so the complex-frame and real-view paths agree for the
//! same generator state.

use std::collections::BTreeSet;

use num_complex::Complex32;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::IQFrame;
use crate::error::{Error, Result};
use crate::FRAME_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    AntennaDropout,
    ZeroMask,
    /// Reserved name; not implemented.
    DcShift,
    /// Reserved name; not implemented.
    AmplitudeScale,
    /// Reserved name; not implemented.
    Awgn,
    /// Reserved name; not implemented.
    PhaseNoise,
}

impl Augmentation {
    pub fn is_implemented(self) -> bool {
        matches!(self, Augmentation::AntennaDropout | Augmentation::ZeroMask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_antenna_dropout: f64,
    pub p_zero_mask: f64,
    pub mask_block_len: usize,
    pub enabled: BTreeSet<Augmentation>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_antenna_dropout: 0.2,
            p_zero_mask: 0.2,
            mask_block_len: 64,
            enabled: BTreeSet::from([Augmentation::AntennaDropout, Augmentation::ZeroMask]),
        }
    }
}

impl AugmentConfig {
    /// Ablation baseline: every probability zeroed and nothing enabled.
    pub fn none() -> Self {
        AugmentConfig {
            p_antenna_dropout: 0.0,
            p_zero_mask: 0.0,
            enabled: BTreeSet::new(),
            ..AugmentConfig::default()
        }
    }

    /// Default probabilities with a single augmentation enabled.
    pub fn only(aug: Augmentation) -> Self {
        AugmentConfig {
            enabled: BTreeSet::from([aug]),
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_antenna_dropout", self.p_antenna_dropout),
            ("p_zero_mask", self.p_zero_mask),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(1..=FRAME_LEN).contains(&self.mask_block_len) {
            return Err(Error::config(format!(
                "mask_block_len {} outside [1, {FRAME_LEN}]",
                self.mask_block_len
            )));
        }
        if let Some(a) = self.enabled.iter().find(|a| !a.is_implemented()) {
            return Err(Error::config(format!("augmentation {a:?} is not implemented")));
        }
        Ok(())
    }

    pub fn is_enabled(&self, a: Augmentation) -> bool {
        self.enabled.contains(&a)
    }
}

/// Gates drawn for one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMask {
    pub rows_kept: Vec<bool>,
    pub blocks_kept: Vec<bool>,
    pub block_len: usize,
}

impl ViewMask {
    pub fn identity(n_rx: usize) -> Self {
        ViewMask {
            rows_kept: vec![true; n_rx],
            blocks_kept: vec![true],
            block_len: FRAME_LEN,
        }
    }

    pub fn draw<R: Rng + ?Sized>(n_rx: usize, config: &AugmentConfig, rng: &mut R) -> Self {
        let mut m = ViewMask::identity(n_rx);
        if config.is_enabled(Augmentation::ZeroMask) {
            m.block_len = config.mask_block_len;
            m.blocks_kept = mask_blocks(config.p_zero_mask, config.mask_block_len, rng);
        }
        if config.is_enabled(Augmentation::AntennaDropout) {
            m.rows_kept = dropout_gates(n_rx, config.p_antenna_dropout, rng).kept;
        }
        m
    }

    fn sample_kept(&self, t: usize) -> bool {
        self.blocks_kept[t / self.block_len]
    }

    pub fn apply(&self, frame: &IQFrame) -> IQFrame {
        let mut out = frame.clone();
        let zero = Complex32::new(0.0, 0.0);
        for r in 0..out.iq.rows() {
            let keep_row = self.rows_kept[r];
            for (t, c) in out.iq.row_mut(r).iter_mut().enumerate() {
                if !keep_row || !self.sample_kept(t) {
                    *c = zero;
                }
            }
        }
        out
    }

    /// Applies the mask to an `(n_rx, 2, 1024)` real view in place.
    pub fn apply_real(&self, view: &mut [f32]) {
        for (r, chunk) in view.chunks_exact_mut(2 * FRAME_LEN).enumerate() {
            if !self.rows_kept[r] {
                chunk.fill(0.0);
                continue;
            }
            if self.blocks_kept.iter().all(|&k| k) {
                continue;
            }
            for channel in chunk.chunks_exact_mut(FRAME_LEN) {
                for (b, block) in channel.chunks_mut(self.block_len).enumerate() {
                    if !self.blocks_kept[b] {
                        block.fill(0.0);
                    }
                }
            }
        }
    }
}

/// Antenna gates before and after the keep-one rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutGates {
    /// Independent Bernoulli draws: `true` means dropped.
    pub dropped: Vec<bool>,
    /// Final gates after rescuing one antenna when all were dropped.
    pub kept: Vec<bool>,
}

pub fn dropout_gates<R: Rng + ?Sized>(n_rx: usize, p1: f64, rng: &mut R) -> DropoutGates {
    let dropped: Vec<bool> = (0..n_rx).map(|_| rng.random::<f64>() < p1).collect();
    let mut kept: Vec<bool> = dropped.iter().map(|d| !d).collect();
    if n_rx > 0 && kept.iter().all(|k| !k) {
        kept[rng.random_range(0..n_rx)] = true;
    }
    DropoutGates { dropped, kept }
}

/// Per-block keep flags for the 1024-sample axis.
pub fn mask_blocks<R: Rng + ?Sized>(p2: f64, block_len: usize, rng: &mut R) -> Vec<bool> {
    (0..FRAME_LEN.div_ceil(block_len))
        .map(|_| rng.random::<f64>() >= p2)
        .collect()
}

/// Zeroes each antenna row independently with probability `p1`, keeping
/// one random row if all would be dropped.
pub fn antenna_dropout<R: Rng + ?Sized>(frame: &IQFrame, p1: f64, rng: &mut R) -> IQFrame {
    let mask = ViewMask {
        rows_kept: dropout_gates(frame.n_rx(), p1, rng).kept,
        ..ViewMask::identity(frame.n_rx())
    };
    mask.apply(frame)
}

/// Zeroes each `block_len` time block on all antennas with probability `p2`.
pub fn zero_mask<R: Rng + ?Sized>(frame: &IQFrame, p2: f64, block_len: usize, rng: &mut R) -> IQFrame {
    let mask = ViewMask {
        blocks_kept: mask_blocks(p2, block_len, rng),
        block_len,
        ..ViewMask::identity(frame.n_rx())
    };
    mask.apply(frame)
}

pub fn make_view<R: Rng + ?Sized>(frame: &IQFrame, config: &AugmentConfig, rng: &mut R) -> IQFrame {
    ViewMask::draw(frame.n_rx(), config, rng).apply(frame)
}

/// Two independent views of `frame` drawn from one generator.
pub fn make_views<R: Rng + ?Sized>(frame: &IQFrame, config: &AugmentConfig, rng: &mut R) -> (IQFrame, IQFrame) {
    let a = make_view(frame, config, rng);
    let b = make_view(frame, config, rng);
    (a, b)
}
