//! 1-D residual CNN backbone over `(N, 2·n_rx, 1024)` real views.

use rand::Rng;
use rfssl_numerics::param::join;
use rfssl_numerics::{BatchNorm, Conv1d, Init, Mode, Module, Param, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::FRAME_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Small,
    Medium,
    Large,
}

impl Capacity {
    /// Stem width and `(width, blocks)` of every stage before the last. The
    /// last stage has width `embedding_dim`.
    fn layout(self) -> (usize, Vec<(usize, usize)>, usize) {
        match self {
            Capacity::Small => (16, vec![(32, 1)], 1),
            Capacity::Medium => (16, vec![(32, 2)], 1),
            Capacity::Large => (32, vec![(64, 2), (128, 2)], 2),
        }
    }

    pub fn default_embedding_dim(self) -> usize {
        match self {
            Capacity::Small => 64,
            Capacity::Medium => 96,
            Capacity::Large => 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub capacity: Capacity,
    pub embedding_dim: usize,
    #[serde(default = "default_n_rx")]
    pub n_rx: usize,
}

fn default_n_rx() -> usize {
    4
}

/// Stem kernel and stride: non-overlapping 8-sample windows.
const STEM_KERNEL: usize = 8;

impl EncoderConfig {
    pub fn new(capacity: Capacity) -> Self {
        EncoderConfig {
            capacity,
            embedding_dim: capacity.default_embedding_dim(),
            n_rx: default_n_rx(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 32 {
            return Err(Error::config(format!("embedding_dim {} below 32", self.embedding_dim)));
        }
        if self.n_rx < 1 {
            return Err(Error::config("encoder needs at least one antenna"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        2 * self.n_rx
    }

    /// Multiply-accumulates of one forward pass on a single frame.
    pub fn macs_per_frame(&self) -> usize {
        let (stem, stages, last_blocks) = self.capacity.layout();
        let mut len = FRAME_LEN / STEM_KERNEL;
        let mut macs = stem * len * self.in_channels() * STEM_KERNEL;
        let mut c = stem;
        let all = stages
            .into_iter()
            .chain(std::iter::once((self.embedding_dim, last_blocks)));
        for (w, blocks) in all {
            for b in 0..blocks {
                let stride = if b == 0 { 2 } else { 1 };
                len /= stride;
                macs += w * len * c * 3 + w * len * w * 3;
                if stride != 1 || c != w {
                    macs += w * len * c;
                }
                c = w;
            }
        }
        macs
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub conv1: Conv1d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv1d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv1d<T>, BatchNorm<T>)>,
}

impl<T: Scalar> ResBlock<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, init: Init, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv1d::new(c_in, c_out, 1, stride, 0, false, init, rng),
                BatchNorm::new(c_out, true),
            )
        });
        ResBlock {
            conv1: Conv1d::new(c_in, c_out, 3, stride, 1, false, init, rng),
            bn1: BatchNorm::new(c_out, true),
            conv2: Conv1d::new(c_out, c_out, 3, 1, 1, false, init, rng),
            bn2: BatchNorm::new(c_out, true),
            shortcut,
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(&join(prefix, "short_conv"), f);
            b.visit(&join(prefix, "short_bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(&join(prefix, "short_conv"), f);
            b.visit_mut(&join(prefix, "short_bn"), f);
        }
    }
}

/// Stem conv, residual stages with stride-2 entry blocks, global average
/// pool. Output width is `embedding_dim`.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    pub stem: Conv1d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (stem_w, stages, last_blocks) = config.capacity.layout();
        let stem = Conv1d::new(
            config.in_channels(),
            stem_w,
            STEM_KERNEL,
            STEM_KERNEL,
            0,
            false,
            init,
            rng,
        );
        let mut blocks = Vec::new();
        let mut c = stem_w;
        let all = stages
            .into_iter()
            .chain(std::iter::once((config.embedding_dim, last_blocks)));
        for (w, n) in all {
            for b in 0..n {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(c, w, stride, init, rng));
                c = w;
            }
        }
        Ok(Encoder {
            config: config.clone(),
            stem,
            stem_bn: BatchNorm::new(stem_w, true),
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// `x: (N, 2·n_rx, 1024)` → `(N, embedding_dim)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.config.in_channels() || shape[2] != FRAME_LEN {
            return Err(Error::data(format!(
                "encoder expects (N, {}, {FRAME_LEN}) input, got {:?}",
                self.config.in_channels(),
                shape
            )));
        }
        let h = self.stem.forward(tape, x)?;
        let h = self.stem_bn.forward(tape, h, mode)?;
        let mut h = tape.relu(h);
        for b in &mut self.blocks {
            h = b.forward(tape, h, mode)?;
        }
        Ok(tape.global_avg_pool(h)?)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_bn.visit(&join(prefix, "stem_bn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rfssl_numerics::Tensor;

    #[test]
    fn output_shape_and_macs() {
        let cfg = EncoderConfig::new(Capacity::Small);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::<f32>::new(&cfg, Init::KaimingUniform, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 8, FRAME_LEN], |i| {
            ((i % 13) as f32 - 6.0) / 6.0
        }));
        let y = enc.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[3, 64]);
        assert!(cfg.macs_per_frame() > 500_000 && cfg.macs_per_frame() < 2_000_000);
        assert!(EncoderConfig::new(Capacity::Medium).macs_per_frame() > cfg.macs_per_frame());
    }

    #[test]
    fn rejects_small_embedding_and_bad_input() {
        let mut cfg = EncoderConfig::new(Capacity::Small);
        cfg.embedding_dim = 16;
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig::new(Capacity::Small);
        let mut enc = Encoder::<f32>::new(&cfg, Init::KaimingUniform, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 6, FRAME_LEN]));
        assert!(enc.forward(&mut tape, x, Mode::Eval).is_err());
    }
}
