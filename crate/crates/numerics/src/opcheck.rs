//! Randomized finite-difference checks covering every differentiable op.
//!
//! Each case draws shapes and inputs from a seed and reduces its output to a
//! scalar, so one call of [`run_case`] is one gradient check.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::gradcheck::{check, GradCheck};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Built = (Vec<Tensor<f64>>, Loss);

pub struct OpCase {
    pub name: &'static str,
    build: fn(&mut StdRng) -> Built,
}

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduces any tensor to a scalar with a fixed random projection so every
/// output element contributes a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn dims(rng: &mut StdRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// All cases, one or more ops each.
pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add/sub/mul/scale",
            build: elementwise_ops,
        },
        OpCase {
            name: "relu",
            build: relu,
        },
        OpCase {
            name: "matmul",
            build: matmul_both_layouts,
        },
        OpCase {
            name: "transpose/reshape",
            build: transpose_and_reshape,
        },
        OpCase {
            name: "conv1d",
            build: conv1d_with_stride_and_padding,
        },
        OpCase {
            name: "add_bias",
            build: add_bias_broadcast,
        },
        OpCase {
            name: "batch_norm",
            build: batch_norm_train_and_eval,
        },
        OpCase {
            name: "batch_norm 2d",
            build: batch_norm_without_affine_on_2d,
        },
        OpCase {
            name: "group_norm",
            build: group_norm,
        },
        OpCase {
            name: "global_avg_pool/concat",
            build: pooling_and_concat,
        },
        OpCase {
            name: "l2_normalize",
            build: l2_normalize,
        },
        OpCase {
            name: "softmax_cross_entropy",
            build: softmax_cross_entropy,
        },
        OpCase {
            name: "mse/mean",
            build: mse_and_mean,
        },
        OpCase {
            name: "conv-bn-relu-pool-linear-ce",
            build: composite_network,
        },
    ]
}

/// Checks `case` on inputs drawn from `seed` with central step `h`.
pub fn run_case(case: &OpCase, seed: u64, h: f64) -> Result<GradCheck> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (inputs, f) = (case.build)(&mut rng);
    check(&inputs, h, |t, v| f(t, v))
}

fn elementwise_ops(rng: &mut StdRng) -> Built {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 5)];
    let inputs = vec![rand_tensor(rng, &s), rand_tensor(rng, &s), rand_tensor(rng, &s)];
    (
        inputs,
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[2])?;
            let c = t.sub(b, v[0])?;
            let d = t.scale(c, 1.7);
            let e = t.add_scalar(d, 0.3);
            let e = t.mul(e, e)?;
            project(t, e, 1)
        }),
    )
}

fn relu(rng: &mut StdRng) -> Built {
    let s = vec![dims(rng, 2, 5), dims(rng, 2, 6)];
    (
        vec![rand_tensor(rng, &s)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0]);
            project(t, y, 2)
        }),
    )
}

fn matmul_both_layouts(rng: &mut StdRng) -> Built {
    let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 6), dims(rng, 1, 4));
    (
        vec![
            rand_tensor(rng, &[m, k]),
            rand_tensor(rng, &[k, n]),
            rand_tensor(rng, &[n, k]),
        ],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let a = t.matmul(v[0], v[1])?;
            let b = t.matmul_t(v[0], v[2])?;
            let c = t.add(a, b)?;
            project(t, c, 3)
        }),
    )
}

fn transpose_and_reshape(rng: &mut StdRng) -> Built {
    let (r, c) = (dims(rng, 1, 4), dims(rng, 2, 5));
    (
        vec![rand_tensor(rng, &[r, c])],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let x = t.transpose(v[0])?;
            let x = t.reshape(x, &[r * c])?;
            let x = t.mul(x, x)?;
            project(t, x, 4)
        }),
    )
}

fn conv1d_with_stride_and_padding(rng: &mut StdRng) -> Built {
    let n = dims(rng, 1, 3);
    let cin = dims(rng, 1, 3);
    let cout = dims(rng, 1, 3);
    let k = dims(rng, 1, 4);
    let l = dims(rng, k + 1, 12);
    let stride = dims(rng, 1, 3);
    let pad = dims(rng, 0, 2);
    (
        vec![
            rand_tensor(rng, &[n, cin, l]),
            rand_tensor(rng, &[cout, cin, k]),
            rand_tensor(rng, &[cout]),
        ],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 5)
        }),
    )
}

fn add_bias_broadcast(rng: &mut StdRng) -> Built {
    let (n, c, l) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 5));
    (
        vec![rand_tensor(rng, &[n, c, l]), rand_tensor(rng, &[c])],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, 6)
        }),
    )
}

fn batch_norm_train_and_eval(rng: &mut StdRng) -> Built {
    let (n, c, l) = (dims(rng, 2, 4), dims(rng, 1, 3), dims(rng, 1, 5));
    let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    (
        vec![
            rand_tensor(rng, &[n, c, l]),
            rand_tensor(rng, &[c]),
            rand_tensor(rng, &[c]),
        ],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let (a, _) = t.batch_norm_train(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            let b = t.batch_norm_eval(v[0], Some(v[1]), Some(v[2]), &rm, &rv, 1e-5)?;
            let s = t.add(a, b)?;
            project(t, s, 7)
        }),
    )
}

fn batch_norm_without_affine_on_2d(rng: &mut StdRng) -> Built {
    let (n, c) = (dims(rng, 2, 6), dims(rng, 1, 4));
    (
        vec![rand_tensor(rng, &[n, c])],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let (a, _) = t.batch_norm_train(v[0], None, None, 1e-5)?;
            project(t, a, 8)
        }),
    )
}

fn group_norm(rng: &mut StdRng) -> Built {
    let groups = dims(rng, 1, 3);
    let c = groups * dims(rng, 1, 2);
    let (n, l) = (dims(rng, 1, 3), dims(rng, 2, 5));
    (
        vec![
            rand_tensor(rng, &[n, c, l]),
            rand_tensor(rng, &[c]),
            rand_tensor(rng, &[c]),
        ],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.group_norm(v[0], groups, Some(v[1]), Some(v[2]), 1e-5)?;
            project(t, y, 9)
        }),
    )
}

fn pooling_and_concat(rng: &mut StdRng) -> Built {
    let (n, c, l) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 6));
    let c2 = dims(rng, 1, 3);
    (
        vec![rand_tensor(rng, &[n, c, l]), rand_tensor(rng, &[n, c2])],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let p = t.global_avg_pool(v[0])?;
            let y = t.concat(&[p, v[1], p], 1)?;
            let y = t.mul(y, y)?;
            project(t, y, 10)
        }),
    )
}

fn l2_normalize(rng: &mut StdRng) -> Built {
    let (n, d) = (dims(rng, 1, 4), dims(rng, 2, 6));
    (
        vec![rand_tensor(rng, &[n, d])],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.l2_normalize(v[0])?;
            project(t, y, 11)
        }),
    )
}

fn softmax_cross_entropy(rng: &mut StdRng) -> Built {
    let (n, k) = (dims(rng, 1, 5), dims(rng, 2, 6));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    (
        vec![rand_tensor(rng, &[n, k])],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let s = t.scale(v[0], 3.0);
            t.softmax_cross_entropy(s, &targets)
        }),
    )
}

fn mse_and_mean(rng: &mut StdRng) -> Built {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 3)];
    (
        vec![rand_tensor(rng, &s), rand_tensor(rng, &s)],
        Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let a = t.mse(v[0], v[1])?;
            let m = t.mean(v[0]);
            let m = t.mul(m, m)?;
            t.add(a, m)
        }),
    )
}

fn composite_network(rng: &mut StdRng) -> Built {
    let (n, cin, l) = (dims(rng, 2, 3), 2, dims(rng, 6, 10));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    (
        vec![
            rand_tensor(rng, &[n, cin, l]),
            rand_tensor(rng, &[4, cin, 3]),
            rand_tensor(rng, &[4]),
            rand_tensor(rng, &[3, 4]),
        ],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv1d(v[0], v[1], None, 2, 1)?;
            let (y, _) = t.batch_norm_train(y, Some(v[2]), None, 1e-5)?;
            let y = t.relu(y);
            let y = t.global_avg_pool(y)?;
            let z = t.l2_normalize(y)?;
            let logits = t.matmul_t(z, v[3])?;
            t.softmax_cross_entropy(logits, &targets)
        }),
    )
}
