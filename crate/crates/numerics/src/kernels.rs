//! Inner loops shared by the tape operations.
//!
//! Reductions use a fixed number of partial accumulators so results do not
//! depend on the execution mode.

use crate::exec::Exec;
use crate::scalar::Scalar;

const LANES: usize = 8;
/// Samples per task in batched conv backward; partials are summed in chunk
/// order.
const CONV_CHUNK: usize = 8;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

#[inline]
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let rest = ca.remainder();
    for x in ca {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l];
        }
    }
    let mut tail = T::zero();
    for &x in rest {
        tail = tail + x;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c = a · b` with `a: (m, k)`, `b: (k, n)`.
pub fn matmul_nn<T: Scalar>(exec: Exec, a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    exec.for_each_chunk(c, n, |i, row| {
        row.fill(T::zero());
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], row);
            }
        }
    });
}

/// `c = a · bᵀ` with `a: (m, k)`, `b: (n, k)`.
pub fn matmul_nt<T: Scalar>(exec: Exec, a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    exec.for_each_chunk(c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c = aᵀ · b` with `a: (k, m)`, `b: (k, n)`, giving `c: (m, n)`.
pub fn matmul_tn<T: Scalar>(exec: Exec, a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    exec.for_each_chunk(c, n, |i, row| {
        row.fill(T::zero());
        for kk in 0..k {
            let av = a[kk * m + i];
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], row);
            }
        }
    });
}

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn len_out(&self) -> Option<usize> {
        let padded = self.len_in + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn cols(&self) -> usize {
        self.c_in * self.kernel
    }
}

fn im2col<T: Scalar>(g: &Conv1dGeom, lout: usize, x: &[T], cols: &mut [T]) {
    let (l_in, k, s, p) = (g.len_in as isize, g.kernel, g.stride as isize, g.padding as isize);
    for ci in 0..g.c_in {
        let xr = &x[ci * g.len_in..(ci + 1) * g.len_in];
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            let off = kk as isize - p;
            for (l, c) in row.iter_mut().enumerate() {
                let idx = l as isize * s + off;
                *c = if idx >= 0 && idx < l_in {
                    xr[idx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &Conv1dGeom, lout: usize, dcols: &[T], dx: &mut [T]) {
    let (l_in, k, s, p) = (g.len_in as isize, g.kernel, g.stride as isize, g.padding as isize);
    for ci in 0..g.c_in {
        let dxr = &mut dx[ci * g.len_in..(ci + 1) * g.len_in];
        for kk in 0..k {
            let row = &dcols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            let off = kk as isize - p;
            for (l, &d) in row.iter().enumerate() {
                let idx = l as isize * s + off;
                if idx >= 0 && idx < l_in {
                    dxr[idx as usize] = dxr[idx as usize] + d;
                }
            }
        }
    }
}

/// Forward convolution. `x: (batch, c_in, len_in)`, `w: (c_out, c_in, kernel)`.
pub fn conv1d_forward<T: Scalar>(exec: Exec, g: &Conv1dGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let lout = g.len_out().expect("validated conv geometry");
    let ncols = g.cols();
    let mut out = vec![T::zero(); g.batch * g.c_out * lout];
    exec.for_each_chunk(&mut out, g.c_out * lout, |n, y| {
        let xn = &x[n * g.c_in * g.len_in..(n + 1) * g.c_in * g.len_in];
        let mut cols = vec![T::zero(); ncols * lout];
        im2col(g, lout, xn, &mut cols);
        for co in 0..g.c_out {
            let yr = &mut y[co * lout..(co + 1) * lout];
            yr.fill(bias.map_or(T::zero(), |b| b[co]));
            let wr = &w[co * ncols..(co + 1) * ncols];
            for (r, &wv) in wr.iter().enumerate() {
                axpy(wv, &cols[r * lout..(r + 1) * lout], yr);
            }
        }
    });
    out
}

pub struct Conv1dGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Backward convolution given `dy: (batch, c_out, len_out)`.
pub fn conv1d_backward<T: Scalar>(
    exec: Exec,
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> Conv1dGrads<T> {
    let lout = g.len_out().expect("validated conv geometry");
    let ncols = g.cols();
    let x_per = g.c_in * g.len_in;
    let y_per = g.c_out * lout;
    let n_chunks = g.batch.div_ceil(CONV_CHUNK);
    let mut dx = if need_dx {
        vec![T::zero(); g.batch * x_per]
    } else {
        Vec::new()
    };

    let work = |chunk: usize, dx_chunk: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let mut dw = vec![T::zero(); g.c_out * ncols];
        let mut db = vec![T::zero(); g.c_out];
        let mut cols = vec![T::zero(); ncols * lout];
        let mut dcols = vec![T::zero(); ncols * lout];
        let start = chunk * CONV_CHUNK;
        let end = (start + CONV_CHUNK).min(g.batch);
        let mut dx_chunk = dx_chunk;
        for n in start..end {
            let xn = &x[n * x_per..(n + 1) * x_per];
            let dyn_ = &dy[n * y_per..(n + 1) * y_per];
            im2col(g, lout, xn, &mut cols);
            for co in 0..g.c_out {
                let dyr = &dyn_[co * lout..(co + 1) * lout];
                db[co] = db[co] + sum(dyr);
                let dwr = &mut dw[co * ncols..(co + 1) * ncols];
                for (r, d) in dwr.iter_mut().enumerate() {
                    *d = *d + dot(dyr, &cols[r * lout..(r + 1) * lout]);
                }
            }
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                dcols.fill(T::zero());
                for co in 0..g.c_out {
                    let dyr = &dyn_[co * lout..(co + 1) * lout];
                    let wr = &w[co * ncols..(co + 1) * ncols];
                    for (r, &wv) in wr.iter().enumerate() {
                        if wv != T::zero() {
                            axpy(wv, dyr, &mut dcols[r * lout..(r + 1) * lout]);
                        }
                    }
                }
                let local = n - start;
                col2im_add(g, lout, &dcols, &mut dxc[local * x_per..(local + 1) * x_per]);
            }
        }
        (dw, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
        let mut slots: Vec<Option<(Vec<T>, Vec<T>)>> = (0..n_chunks).map(|_| None).collect();
        exec.for_each_chunk2(&mut dx, CONV_CHUNK * x_per, &mut slots, 1, |c, dxc, slot| {
            slot[0] = Some(work(c, Some(dxc)));
        });
        slots.into_iter().map(|s| s.expect("chunk computed")).collect()
    } else {
        exec.map(n_chunks, |c| work(c, None))
    };

    let mut dw = vec![T::zero(); g.c_out * ncols];
    let mut db = vec![T::zero(); g.c_out];
    for (pw, pb) in &partials {
        axpy(T::one(), pw, &mut dw);
        axpy(T::one(), pb, &mut db);
    }
    Conv1dGrads {
        dx: need_dx.then_some(dx),
        dw,
        db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(Exec::Sequential, &a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        matmul_nt(Exec::Parallel, &a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        matmul_tn(Exec::Parallel, &at, &b, &mut c, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_all_ones_interior_is_three() {
        let g = Conv1dGeom {
            batch: 1,
            c_in: 1,
            len_in: 8,
            c_out: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let y = conv1d_forward(Exec::Sequential, &g, &[1.0f64; 8], &[1.0; 3], None);
        assert_eq!(y.len(), 8);
        assert_eq!(y[0], 2.0);
        assert_eq!(y[7], 2.0);
        assert!(y[1..7].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_backward_is_mode_independent() {
        let g = Conv1dGeom {
            batch: 19,
            c_in: 3,
            len_in: 20,
            c_out: 4,
            kernel: 5,
            stride: 2,
            padding: 2,
        };
        let lout = g.len_out().unwrap();
        let x: Vec<f32> = (0..g.batch * 3 * 20)
            .map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5)
            .collect();
        let w: Vec<f32> = (0..4 * 3 * 5).map(|i| ((i * 31) % 13) as f32 / 13.0 - 0.5).collect();
        let dy: Vec<f32> = (0..g.batch * 4 * lout)
            .map(|i| ((i * 17) % 11) as f32 / 11.0 - 0.5)
            .collect();
        let a = conv1d_backward(Exec::Sequential, &g, &x, &w, &dy, true);
        let b = conv1d_backward(Exec::Parallel, &g, &x, &w, &dy, true);
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.db, b.db);
        assert_eq!(a.dx, b.dx);
    }
}
