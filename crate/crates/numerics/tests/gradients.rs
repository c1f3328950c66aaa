//! Finite-difference checks (64-bit, h = 1e-5) for every differentiable op.

use rfssl_numerics::opcheck::{cases, run_case};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

#[test]
fn every_op_matches_central_differences() {
    for case in cases() {
        for seed in 0..SEEDS {
            let r = run_case(&case, seed, H).unwrap();
            assert!(
                r.max_rel_error < TOL,
                "{} seed {seed}: rel err {:.3e} at {:?}",
                case.name,
                r.max_rel_error,
                r.worst
            );
        }
    }
}

#[test]
fn suite_covers_the_op_set() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for op in [
        "conv1d",
        "batch_norm",
        "group_norm",
        "l2_normalize",
        "softmax_cross_entropy",
        "matmul",
        "relu",
    ] {
        assert!(names.iter().any(|n| n.contains(op)), "{op} missing");
    }
}
