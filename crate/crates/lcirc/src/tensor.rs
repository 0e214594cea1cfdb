//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value: operations never alias input storage into
//! output storage, and a tensor can be sent across threads freely. Gradients
//! are computed by the tape in [`crate::tape`]; the optional `grad` buffer
//! here is where a training step deposits them for inspection.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data).unwrap()
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a tensor viewed as 2-D: the last axis is the
    /// column axis, everything before it is flattened into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (0, 0),
            _ => {
                let cols = *self.shape.last().unwrap();
                let rows = if cols == 0 { 0 } else { self.numel() / cols };
                (rows, cols)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.rows_cols();
        self.data[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// C[m,n] = A[m,k] · B[k,n]. ikj loop order so the inner loop streams rows.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ — dot products of rows, used by backward passes.
pub fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl Tensor {
    /// Copy of rows [start, end) of a matrix as a new tensor.
    pub fn rows_slice(&self, start: usize, end: usize) -> Tensor {
        let (_, d) = self.rows_cols();
        Tensor::new(vec![end - start, d], self.data[start * d..end * d].to_vec())
            .expect("row slice shape is consistent")
    }
}

/// Numerically shifted softmax of one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Layer normalization of one row followed by an affine map, into `out`.
pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
    let d = row.len();
    let mean = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + eps).sqrt();
    for j in 0..d {
        out[j] = (row[j] - mean) * inv * gain[j] + bias[j];
    }
}

/// GELU, tanh approximation.
pub fn gelu_val(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Classic Adam update, in place. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn matmul_raw_reference() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul_raw(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(3);
        let (m, k, n) = (4, 5, 3);
        let a = Tensor::randn(&mut rng, &[m, k], 1.0);
        let b = Tensor::randn(&mut rng, &[k, n], 1.0);
        let c = matmul_raw(&a.data, &b.data, m, k, n);
        // nt: rebuild b transposed
        let mut bt = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b.data[i * n + j];
            }
        }
        let c_nt = matmul_nt_raw(&a.data, &bt, m, k, n);
        for (x, y) in c.iter().zip(&c_nt) {
            assert!((x - y).abs() < 1e-12);
        }
        // tn: (Aᵀ)ᵀ·B via transposing a
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a.data[i * k + j];
            }
        }
        let c_tn = matmul_tn_raw(&at, &b.data, k, m, n); // (Aᵀ)[k,m] ᵀ· B — yields A·B
        for (x, y) in c.iter().zip(&c_tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -0.5];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
    }

    #[test]
    fn randn_deterministic() {
        let a = Tensor::randn(&mut Rng::new(9).derive("w"), &[3, 3], 0.02);
        let b = Tensor::randn(&mut Rng::new(9).derive("w"), &[3, 3], 0.02);
        assert!(a.bit_eq(&b));
    }
}
