//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records one forward computation. Each operation appends a node
//! holding its output value and whatever the backward pass needs.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into every leaf that requires them.

use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::exec::Exec;
use crate::kernels::{self, Conv1dGeom};
use crate::param::{Param, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        channels: usize,
        inner: usize,
    },
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Relu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        /// One entry per normalization group (channel for batch-norm,
        /// sample-group for group-norm).
        inv_std: Vec<T>,
        layout: NormLayout,
        /// False when statistics were fixed (running statistics), in which
        /// case the normalization is an affine map of the input.
        batch_stats: bool,
    },
    GlobalAvgPool {
        x: Var,
        len: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner_sizes: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        cols: usize,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        cols: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
enum NormLayout {
    /// Statistics per channel over batch and length.
    Batch { n: usize, c: usize, inner: usize },
    /// Statistics per (sample, group) over the group's channels and length.
    Group {
        n: usize,
        c: usize,
        inner: usize,
        groups: usize,
    },
}

impl NormLayout {
    fn dims(&self) -> (usize, usize, usize) {
        match *self {
            NormLayout::Batch { n, c, inner } | NormLayout::Group { n, c, inner, .. } => (n, c, inner),
        }
    }

    /// Index of the statistics slot owning element `(n, c)`.
    fn slot(&self, ni: usize, ci: usize) -> usize {
        match *self {
            NormLayout::Batch { .. } => ci,
            NormLayout::Group { c, groups, .. } => ni * groups + ci / (c / groups),
        }
    }

    fn slots(&self) -> usize {
        match *self {
            NormLayout::Batch { c, .. } => c,
            NormLayout::Group { n, groups, .. } => n * groups,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divisor `N·L`).
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice returns
    /// the same node so gradients from every use accumulate together.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of a leaf after [`Tape::backward`]. `None` when the leaf
    /// does not require gradients or was not reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_values(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_values(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_values(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    /// Sign of every ReLU input on the tape, in recording order. Two tapes
    /// of one graph with equal patterns lie on the same linear piece, so a
    /// finite difference between them does not straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&e| e > T::zero()));
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Adds `bias: (C,)` to `x: (N, C, ...)` broadcasting over every axis
    /// except axis 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(NumericsError::shape("add_bias", &xs, &bs));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e = *e + b[(i / inner) % channels];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            v,
            Op::AddBias {
                x,
                bias,
                channels,
                inner,
            },
            rg,
        ))
    }

    // ----- linear algebra -----

    /// `a: (m, k)` times `b: (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a: (m, k)` times the transpose of `b: (n, k)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(NumericsError::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(NumericsError::shape(op, &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::matmul_nt(self.exec, va, vb, &mut out, m, k, n);
        } else {
            kernels::matmul_nn(self.exec, va, vb, &mut out, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n, trans_b },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::invalid(
                "transpose",
                format!("expected 2-D input, got {s:?}"),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![cols, rows], out),
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    /// 1-D convolution. `x: (N, C_in, L)`, `w: (C_out, C_in, K)`,
    /// optional `b: (C_out,)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(NumericsError::shape("conv1d", &xs, &ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != ws[0] {
                return Err(NumericsError::shape("conv1d bias", &ws, bs));
            }
        }
        let geom = Conv1dGeom {
            batch: xs[0],
            c_in: xs[1],
            len_in: xs[2],
            c_out: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let lout = geom.len_out().ok_or_else(|| {
            NumericsError::invalid(
                "conv1d",
                format!(
                    "kernel {} stride {stride} padding {padding} does not fit length {}",
                    ws[2], xs[2]
                ),
            )
        })?;
        let out = kernels::conv1d_forward(
            self.exec,
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![geom.batch, geom.c_out, lout], out),
            Op::Conv1d { x, w, b, geom },
            rg,
        ))
    }

    // ----- normalization -----

    fn norm_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(NumericsError::invalid(
                op,
                format!("expected (N, C, ...) input, got {s:?}"),
            ));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Option<Var>, beta: Option<Var>) -> Result<()> {
        for p in [gamma, beta].into_iter().flatten() {
            let ps = self.shape(p);
            if ps != [c] {
                return Err(NumericsError::shape(op, &[c], ps));
            }
        }
        Ok(())
    }

    fn apply_affine(&self, xhat: &[T], c: usize, inner: usize, gamma: Option<Var>, beta: Option<Var>) -> Vec<T> {
        let g = gamma.map(|g| self.value(g).data());
        let b = beta.map(|b| self.value(b).data());
        xhat.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / inner) % c;
                let y = g.map_or(v, |g| v * g[ci]);
                b.map_or(y, |b| y + b[ci])
            })
            .collect()
    }

    fn normalize_with_batch_stats(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
        layout: NormLayout,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, inner) = layout.dims();
        self.check_affine(op, c, gamma, beta)?;
        let slots = layout.slots();
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); slots];
        let mut count = vec![0usize; slots];
        for ni in 0..n {
            for ci in 0..c {
                let s = layout.slot(ni, ci);
                let row = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                mean[s] = mean[s] + kernels::sum(row);
                count[s] += inner;
            }
        }
        for (m, &k) in mean.iter_mut().zip(&count) {
            *m = *m / T::from_f64(k as f64);
        }
        let mut var = vec![T::zero(); slots];
        for ni in 0..n {
            for ci in 0..c {
                let s = layout.slot(ni, ci);
                let row = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                let mu = mean[s];
                var[s] = var[s] + row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        for (v, &k) in var.iter_mut().zip(&count) {
            *v = *v / T::from_f64(k as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let s = layout.slot(ni, ci);
                let base = (ni * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[s]) * inv_std[s];
                }
            }
        }
        let out = self.apply_affine(&xhat, c, inner, gamma, beta);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with statistics of the current batch, per channel
    /// (axis 1) over every other axis.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.norm_dims("batch_norm", x)?;
        if n * inner < 2 {
            return Err(NumericsError::invalid(
                "batch_norm",
                "batch statistics need at least two values per channel",
            ));
        }
        let (v, mean, var) =
            self.normalize_with_batch_stats("batch_norm", x, gamma, beta, eps, NormLayout::Batch { n, c, inner })?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: n * inner,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, inner) = self.norm_dims("batch_norm", x)?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(NumericsError::shape(
                "batch_norm running stats",
                &[c],
                &[running_mean.len()],
            ));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let xhat: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / inner) % c;
                (v - running_mean[ci]) * inv_std[ci]
            })
            .collect();
        let out = self.apply_affine(&xhat, c, inner, gamma, beta);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout: NormLayout::Batch { n, c, inner },
                batch_stats: false,
            },
            rg,
        ))
    }

    /// Group normalization: statistics per sample over `C / groups`
    /// channels and the remaining axes.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        let (n, c, inner) = self.norm_dims("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(NumericsError::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let layout = NormLayout::Group { n, c, inner, groups };
        Ok(self
            .normalize_with_batch_stats("group_norm", x, gamma, beta, eps, layout)?
            .0)
    }

    // ----- shape -----

    /// Mean over the trailing axis of `x: (N, C, L)`, giving `(N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NumericsError::invalid(
                "global_avg_pool",
                format!("expected (N, C, L), got {s:?}"),
            ));
        }
        let len = s[2];
        let inv = T::one() / T::from_f64(len as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(len)
            .map(|r| kernels::sum(r) * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1]], out),
            Op::GlobalAvgPool { x, len },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| NumericsError::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(NumericsError::invalid(
                "concat",
                format!("axis {axis} out of range for {s0:?}"),
            ));
        }
        let outer: usize = s0[..axis].iter().product();
        let mut inner_sizes = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(NumericsError::shape("concat", &s0, s));
            }
            total_axis += s[axis];
            inner_sizes.push(s[axis..].iter().product::<usize>());
        }
        let mut data = Vec::with_capacity(outer * inner_sizes.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&inner_sizes) {
                data.extend_from_slice(&self.value(v).data()[o * sz..(o + 1) * sz]);
            }
        }
        let mut shape = s0;
        shape[axis] = total_axis;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner_sizes,
            },
            rg,
        ))
    }

    /// Normalizes each row of `x: (N, D)` to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::invalid(
                "l2_normalize",
                format!("expected (N, D), got {s:?}"),
            ));
        }
        let cols = s[1];
        let eps = T::from_f64(1e-12);
        let xd = self.value(x).data();
        let norms: Vec<T> = xd.chunks(cols).map(|r| kernels::dot(r, r).sqrt().max(eps)).collect();
        let out: Vec<T> = xd.iter().enumerate().map(|(i, &v)| v / norms[i / cols]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::L2Normalize { x, cols, norms }, rg))
    }

    // ----- losses -----

    /// Mean softmax cross-entropy of `logits: (N, K)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(NumericsError::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let cols = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(NumericsError::invalid(
                "softmax_cross_entropy",
                format!("target {t} out of range for {cols} classes"),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        for (i, row) in ld.chunks(cols).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let pr = &mut probs[i * cols..(i + 1) * cols];
            let mut z = T::zero();
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z = z + *p;
            }
            for p in pr.iter_mut() {
                *p = *p / z;
            }
            loss = loss + (z.ln() + mx - row[targets[i]]);
        }
        loss = loss / T::from_f64(targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::from_f64(p.len() as f64);
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = kernels::sum(d) / T::from_f64(d.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ----- backward -----

    /// Back-propagates from a scalar `loss`, populating gradients of every
    /// reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(g) = grads[i].take() {
                    self.backward_node(i, &g, &mut grads);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => kernels::axpy(T::one(), &delta, g),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let exec = self.exec;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddBias {
                x,
                bias,
                channels,
                inner,
            } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); *channels];
                    for (k, chunk) in g.chunks(*inner).enumerate() {
                        let c = k % channels;
                        db[c] = db[c] + kernels::sum(chunk);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *trans_b {
                        kernels::matmul_nn(exec, g, vb, &mut da, m, n, k);
                    } else {
                        kernels::matmul_nt(exec, g, vb, &mut da, m, n, k);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        kernels::matmul_tn(exec, g, va, &mut db, m, n, k);
                    } else {
                        kernels::matmul_tn(exec, va, g, &mut db, m, k, n);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Conv1d { x, w, b, geom } => {
                let need_dx = self.rg(*x);
                if need_dx || self.rg(*w) || b.is_some_and(|b| self.rg(b)) {
                    let cg =
                        kernels::conv1d_backward(exec, geom, self.value(*x).data(), self.value(*w).data(), g, need_dx);
                    if let Some(dx) = cg.dx {
                        self.accumulate(grads, *x, dx);
                    }
                    self.accumulate(grads, *w, cg.dw);
                    if let Some(b) = b {
                        self.accumulate(grads, *b, cg.db);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => self.norm_backward(g, grads, *x, *gamma, *beta, xhat, inv_std, layout, *batch_stats),
            Op::GlobalAvgPool { x, len } => {
                let inv = T::one() / T::from_f64(*len as f64);
                let mut dx = Vec::with_capacity(g.len() * len);
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, *len));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat {
                inputs,
                outer,
                inner_sizes,
            } => {
                let total: usize = inner_sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(inner_sizes) {
                    if self.rg(v) {
                        let mut dx = Vec::with_capacity(outer * sz);
                        for o in 0..*outer {
                            dx.extend_from_slice(&g[o * total + offset..o * total + offset + sz]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += sz;
                }
            }
            Op::L2Normalize { x, cols, norms } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let proj = kernels::dot(yr, gr);
                    for c in 0..*cols {
                        dx[r * cols + c] = (gr[c] - yr[c] * proj) / nrm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                cols,
            } => {
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * cols + t] = dl[r * cols + t] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(p.len() as f64);
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect();
                if self.rg(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: &[T],
        inv_std: &[T],
        layout: &NormLayout,
        batch_stats: bool,
    ) {
        let (n, c, inner) = layout.dims();
        let gam = gamma.map(|v| self.value(v).data());
        if let Some(gv) = gamma.filter(|&v| self.rg(v)) {
            let mut dg = vec![T::zero(); c];
            for (k, (gc, xc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                dg[k % c] = dg[k % c] + kernels::dot(gc, xc);
            }
            self.accumulate(grads, gv, dg);
        }
        if let Some(bv) = beta.filter(|&v| self.rg(v)) {
            let mut db = vec![T::zero(); c];
            for (k, gc) in g.chunks(inner).enumerate() {
                db[k % c] = db[k % c] + kernels::sum(gc);
            }
            self.accumulate(grads, bv, db);
        }
        if !self.rg(x) {
            return;
        }
        // dxhat = g * gamma
        let dxhat: Vec<T> = match gam {
            Some(gm) => g.iter().enumerate().map(|(i, &d)| d * gm[(i / inner) % c]).collect(),
            None => g.to_vec(),
        };
        let mut dx = vec![T::zero(); g.len()];
        if !batch_stats {
            for (i, d) in dx.iter_mut().enumerate() {
                *d = dxhat[i] * inv_std[(i / inner) % c];
            }
        } else {
            let slots = layout.slots();
            let mut s1 = vec![T::zero(); slots];
            let mut s2 = vec![T::zero(); slots];
            let mut count = vec![0usize; slots];
            for ni in 0..n {
                for ci in 0..c {
                    let s = layout.slot(ni, ci);
                    let base = (ni * c + ci) * inner;
                    s1[s] = s1[s] + kernels::sum(&dxhat[base..base + inner]);
                    s2[s] = s2[s] + kernels::dot(&dxhat[base..base + inner], &xhat[base..base + inner]);
                    count[s] += inner;
                }
            }
            for ni in 0..n {
                for ci in 0..c {
                    let s = layout.slot(ni, ci);
                    let m = T::from_f64(count[s] as f64);
                    let k = inv_std[s] / m;
                    let base = (ni * c + ci) * inner;
                    for i in base..base + inner {
                        dx[i] = k * (m * dxhat[i] - s1[s] - xhat[i] * s2[s]);
                    }
                }
            }
        }
        self.accumulate(grads, x, dx);
    }
}
