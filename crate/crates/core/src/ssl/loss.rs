//! Temperature-scaled contrastive loss with in-batch negatives.

use rfssl_numerics::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// `mean_i CE(q_i·Kᵀ/τ, i) · 2τ` for row-normalized `q, k: (B, D)`.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(Error::data(format!(
            "contrastive loss needs equal (B, D) inputs, got {qs:?} and {ks:?}"
        )));
    }
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, T::from_f64(1.0 / tau));
    let targets: Vec<usize> = (0..qs[0]).collect();
    let ce = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(tape.scale(ce, T::from_f64(2.0 * tau)))
}

/// Value of [`contrastive_loss`] on plain tensors.
pub fn contrastive_loss_value<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (q, k) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let l = contrastive_loss(&mut tape, q, k, tau)?;
    Ok(tape.value(l).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_is_zero() {
        let q = Tensor::<f64>::from_f64(vec![1, 3], &[0.6, 0.8, 0.0]).unwrap();
        assert_eq!(contrastive_loss_value(&q, &q, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let q = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = contrastive_loss_value(&q, &q, 0.2).unwrap();
        let expected = ((5f64).exp() + 1.0).ln() - 5.0;
        assert!((l - expected * 0.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = Tensor::<f64>::zeros(vec![2, 2]);
        let k = Tensor::<f64>::zeros(vec![3, 2]);
        assert!(contrastive_loss_value(&q, &q, 0.0).is_err());
        assert!(contrastive_loss_value(&q, &k, 0.1).is_err());
    }
}
