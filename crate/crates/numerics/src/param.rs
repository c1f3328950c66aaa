use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A persistent tensor owned by a model.
///
/// Trainable parameters have `requires_grad` set and collect gradients in
/// `grad`. Buffers (such as running statistics) are persisted in checkpoints
/// but never receive gradients or optimizer updates.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    buffer: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
            grad: None,
            requires_grad: true,
            buffer: false,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
            grad: None,
            requires_grad: false,
            buffer: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_buffer(&self) -> bool {
        self.buffer
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, g: Tensor<T>) -> Result<()> {
        match &mut self.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                if g.shape() != self.value.shape() {
                    return Err(NumericsError::shape("accumulate_grad", self.value.shape(), g.shape()));
                }
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

/// Cloning yields an independent parameter with a fresh identity.
impl<T: Clone> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            buffer: self.buffer,
        }
    }
}

/// Anything holding named parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// `(name, shape)` of every parameter and buffer in visiting order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.shape().to_vec())));
        out
    }

    /// Number of trainable scalars.
    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if !p.is_buffer() {
                n += p.value.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_requires_grad(&mut self, flag: bool) {
        self.visit_mut("", &mut |_, p| {
            if !p.is_buffer() {
                p.requires_grad = flag
            }
        });
    }

    /// Adds the gradients recorded on `tape` into each bound parameter.
    fn collect_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |_, p| {
            if err.is_some() || !p.requires_grad {
                return;
            }
            if let Some(g) = tape.param_grad(p.id()) {
                if let Err(e) = p.accumulate_grad(g) {
                    err = Some(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
