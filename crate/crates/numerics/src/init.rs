//! Weight initializers.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)` (ReLU gain).
    #[default]
    KaimingUniform,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

impl Init {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        self,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let b = self.bound(fan_in, fan_out);
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-b..b)))
    }
}

/// Bias init matching the usual `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn bias_uniform<T: Scalar, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(vec![n], |_| T::from_f64(rng.random_range(-b..b)))
}
