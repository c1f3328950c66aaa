//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfssl::ssl::{Capacity, EncoderConfig, MoCoConfig, MoCoState};
use rfssl::FRAME_LEN;
use rfssl_numerics::gradcheck::relative_error;
use rfssl_numerics::{Module, Param, Tape, Tensor};

/// Outcome of [`symmetric_loss_gradcheck`].
#[derive(Debug, Clone, Copy)]
pub struct LossCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h interval crossed a ReLU kink, where the loss has
    /// no derivative for the difference to approximate.
    pub skipped: usize,
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the full symmetric loss, over `samples` randomly chosen
/// query-encoder and predictor coordinates (at least one per tensor).
pub fn symmetric_loss_gradcheck(seed: u64, batch: usize, samples: usize, h: f64) -> LossCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = EncoderConfig::new(Capacity::Small);
    enc.embedding_dim = 32;
    let moco = MoCoConfig {
        mlp_hidden: 16,
        out_dim: 8,
        batch_size: batch,
        ..MoCoConfig::default()
    };
    let mut state = MoCoState::<f64>::new(&enc, &moco, 10, &mut rng).unwrap();
    // Move the key branch away from the query so both loss terms matter.
    state.key.visit_mut("", &mut |_, p| {
        if !p.is_buffer() {
            for v in p.value.data_mut() {
                *v *= 1.0 + 0.1 * rng.random_range(-1.0..1.0);
            }
        }
    });
    let shape = vec![batch, enc.in_channels(), FRAME_LEN];
    let v1 = Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0));
    let v2 = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let tau = 0.15;

    let loss_of = |state: &mut MoCoState<f64>| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let l = state.symmetric_loss(&mut tape, &v1, &v2, tau).unwrap();
        (tape.value(l).item(), tape.relu_pattern())
    };

    let mut tape = Tape::new();
    let l = state.symmetric_loss(&mut tape, &v1, &v2, tau).unwrap();
    tape.backward(l).unwrap();
    state.zero_grad();
    state.query.collect_grads(&tape).unwrap();
    state.predictor.collect_grads(&tape).unwrap();
    drop(tape);

    // (module, tensor index, length) of every trainable tensor.
    let mut tensors: Vec<(usize, usize, usize)> = Vec::new();
    for (m, module) in [&state.query as &dyn Module<f64>, &state.predictor]
        .into_iter()
        .enumerate()
    {
        let mut t = 0;
        module.visit("", &mut |_, p| {
            if !p.is_buffer() {
                tensors.push((m, t, p.value.len()));
            }
            t += 1;
        });
    }
    let grad_at = |state: &MoCoState<f64>, m: usize, t: usize, j: usize| -> f64 {
        let module: &dyn Module<f64> = if m == 0 { &state.query } else { &state.predictor };
        let (mut i, mut g) = (0, 0.0);
        module.visit("", &mut |_, p| {
            if i == t {
                g = p.grad.as_ref().map_or(0.0, |g| g.data()[j]);
            }
            i += 1;
        });
        g
    };
    let nudge = |state: &mut MoCoState<f64>, m: usize, t: usize, j: usize, delta: f64| {
        let module: &mut dyn Module<f64> = if m == 0 { &mut state.query } else { &mut state.predictor };
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if i == t {
                p.value.data_mut()[j] += delta;
            }
            i += 1;
        });
    };

    let mut out = LossCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut k = 0;
    while out.checked < samples.max(tensors.len()) && out.skipped < 10 * samples {
        // One pass over every tensor first, then random tensors.
        let (m, t, len) = if k < tensors.len() {
            tensors[k]
        } else {
            tensors[rng.random_range(0..tensors.len())]
        };
        let j = rng.random_range(0..len);
        nudge(&mut state, m, t, j, h);
        let (plus, p_plus) = loss_of(&mut state);
        nudge(&mut state, m, t, j, -2.0 * h);
        let (minus, p_minus) = loss_of(&mut state);
        nudge(&mut state, m, t, j, h);
        if p_plus != p_minus {
            out.skipped += 1;
            continue;
        }
        k += 1;
        out.checked += 1;
        let e = relative_error(grad_at(&state, m, t, j), (plus - minus) / (2.0 * h));
        out.max_rel_error = out.max_rel_error.max(e);
    }
    out
}

/// Two scalar parameters, the smallest model the momentum update acts on.
pub struct Toy {
    pub w: Param<f64>,
    pub b: Param<f64>,
}

impl Toy {
    pub fn new(w: f64, b: f64) -> Self {
        Toy {
            w: Param::new(Tensor::new(vec![1], vec![w]).unwrap()),
            b: Param::new(Tensor::new(vec![1], vec![b]).unwrap()),
        }
    }

    pub fn values(&self) -> (f64, f64) {
        (self.w.value.data()[0], self.b.value.data()[0])
    }
}

impl Module<f64> for Toy {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        f(&format!("{prefix}w"), &self.w);
        f(&format!("{prefix}b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        f(&format!("{prefix}w"), &mut self.w);
        f(&format!("{prefix}b"), &mut self.b);
    }
}
