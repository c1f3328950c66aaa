//! Row-major complex sample matrices.

use num_complex::Complex32;

use crate::error::{Error, Result};

/// `rows × cols` complex samples, one antenna per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex32>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::data(format!(
                "matrix {rows}x{cols} needs {} samples, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex32::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[Complex32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Columns `start..start + len` of every row.
    pub fn columns(&self, start: usize, len: usize) -> ComplexMatrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        ComplexMatrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Mean of `|x|²` over all samples.
    pub fn mean_power(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|c| c.norm_sqr() as f64).sum::<f64>() / self.data.len() as f64
    }
}
