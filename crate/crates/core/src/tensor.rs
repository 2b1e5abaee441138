//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Everything here is single-threaded and uses a fixed summation order, so
//! results are bit-identical across runs on one platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// A `1 × n` matrix view of a vector, or the matrix itself.
    pub(crate) fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn ensure_finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::shape("matmul", "operands must be 2-D"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    ensure_finite(Tensor::matrix(m, n, out), "matmul")
}

/// Max-subtracted softmax of a single row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let extent = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.data.len()];
    let mut line = vec![0.0; extent];
    let mut res = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (a, l) in line.iter_mut().enumerate() {
                *l = x.data[base + a * inner];
            }
            softmax_row(&line, &mut res);
            for (a, r) in res.iter().enumerate() {
                out[base + a * inner] = *r;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Row statistics for layer normalization: `(mean, 1/sqrt(var + eps))`.
/// A zero-variance row gets an inverse std of zero, so its normalized part is 0.
pub(crate) fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        (mean, 0.0)
    } else {
        (mean, 1.0 / (var + eps).sqrt())
    }
}

/// Layer normalization over the last axis with an affine transform.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if c < 2 {
        return Err(Error::shape("layer_norm", "last axis must have length >= 2"));
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer_norm", "gain/bias length mismatch"));
    }
    let mut out = vec![0.0; x.data.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, inv) = layer_norm_stats(row, eps);
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    ensure_finite(
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        "layer_norm",
    )
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scale `x` to unit Euclidean norm.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(x);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Mean negative log-likelihood over the non-pad targets of `logits[T×V]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], pad: usize) -> Result<f64> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows vs {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        if t >= v {
            return Err(Error::IdOutOfRange { id: t, size: v });
        }
        total += -log_softmax_at(logits.row(r), t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("cross_entropy targets are all padding"));
    }
    Ok(total / count as f64)
}

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);

        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&proj, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);

        // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
        assert_eq!(matmul(&m, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(vec![1000.0; 3]).unwrap(), 0).unwrap();
        for p in s.data() {
            assert!(close(*p, 1.0 / 3.0, 1e-15));
        }

        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (p, x) in s.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!(close(*p, x.exp() / z, 1e-15));
        }
        assert!(close(s.data()[0], 0.09003, 1e-5));
        assert!(close(s.data()[1], 0.24473, 1e-5));
        assert!(close(s.data()[2], 0.66524, 1e-5));
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::vector(vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let y = layer_norm(&x, &[2.0; 2], &[1.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn layer_norm_zero_variance_returns_bias() {
        let x = Tensor::vector(vec![2.0, 2.0]).unwrap();
        let y = layer_norm(&x, &[3.0, 3.0], &[0.5, -0.5], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5]);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 7.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let u = l2_normalize(&[0.2, -0.4, 0.9]).unwrap();
        let uu = l2_normalize(&u).unwrap();
        for (a, b) in u.iter().zip(&uu) {
            assert!(close(*a, *b, 1e-15));
        }
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[1, 4]);
        assert!(close(cross_entropy(&uniform, &[2], 0).unwrap(), 4f64.ln(), 1e-12));

        let margin = Tensor::from_rows(&[vec![0.0, 1e4, 0.0]]).unwrap();
        assert!(cross_entropy(&margin, &[1], 0).unwrap() < 1e-12);

        let logits = Tensor::from_rows(&[vec![2.0, 0.0, 0.0]]).unwrap();
        // -ln(e^2 / (e^2 + 2))
        let expected = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        let got = cross_entropy(&logits, &[0], 9).unwrap();
        assert!(close(got, expected, 1e-12));
        assert!(close(got, 0.2395, 1e-4));
    }

    #[test]
    fn cross_entropy_all_pad_is_error() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 0], 0),
            Err(Error::Empty(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let s = softmax(&Tensor::vector(xs).unwrap(), 0).unwrap();
                let total: f64 = s.data().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!(s.data().iter().all(|&p| p > 0.0));
            }

            #[test]
            fn l2_normalize_unit_and_idempotent(xs in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
                prop_assume!(l2_norm(&xs) > 1e-6);
                let u = l2_normalize(&xs).unwrap();
                prop_assert!((l2_norm(&u) - 1.0).abs() <= 1e-12);
                let uu = l2_normalize(&u).unwrap();
                for (a, b) in u.iter().zip(&uu) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
