//! Central finite-difference gradient checking.
//!
//! The numeric gradient only ever calls the forward function, so it is an
//! oracle independent of every backward rule.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences with step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.into_data()))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            col.push((plus - minus) / (2.0 * h));
        }
        numeric.push(col);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
            let e = relative_error(x, y);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
