//! Minimal dense row-major matrix used by the toy network.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Gaussian entries scaled by `1/sqrt(rows)` and rounded through `f32`,
    /// so a snapshot in `f32` reloads bit-exactly.
    pub fn seeded(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * scale) as f32 as f64
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, o: &Matrix) -> Matrix {
        assert_eq!(self.cols, o.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = &mut out.data[i * o.cols..(i + 1) * o.cols];
            for (k, av) in a.iter().enumerate() {
                if *av == 0.0 {
                    continue;
                }
                let b = &o.data[k * o.cols..(k + 1) * o.cols];
                for (d, bv) in dst.iter_mut().zip(b) {
                    *d += av * bv;
                }
            }
        }
        out
    }

    /// Row-wise concatenation.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "vstack column mismatch");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix { rows, cols, data }
    }

    pub fn add_assign(&mut self, o: &Matrix) {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    /// Adds `v` to every row.
    pub fn add_row(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, o: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}
