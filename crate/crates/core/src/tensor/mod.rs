//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. It carries no
//! graph state and is freely shareable. Differentiable computation happens on
//! a [`Graph`], which records every operation applied to its [`Var`] handles
//! and replays them in reverse to produce gradients.
//!
//! All row-wise kernels (matmul, layer norm, softmax) compute each output row
//! from the corresponding input row alone, in a fixed summation order. The
//! streaming decoder relies on this: evaluating a single row gives bitwise the
//! same result as evaluating it as part of a larger batch.

mod graph;
pub mod gradcheck;
mod rng;

pub use graph::{AttentionWindow, CustomOp, Gradients, Graph, Var};
pub use rng::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new([rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Width of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        Ok(self.mul(other)?.sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    /// Matrix product `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    /// Splits the shape around `axis` into `(outer, extent, inner)`.
    fn axis_split(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Log of the summed exponentials along `axis`, with the max shifted out.
    /// The reduced axis is removed from the shape.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split(axis, "logsumexp")?;
        if n == 0 {
            return Err(Error::invalid("logsumexp over an empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[(o * n + k) * inner + i];
                }
                out[o * inner + i] = logsumexp_slice(&lane);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.log_softmax(axis).map(|t| t.map(f64::exp))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = self.axis_split(axis, "log_softmax")?;
        if n == 0 {
            return Err(Error::invalid("log_softmax over an empty axis"));
        }
        let mut out = self.data.clone();
        let mut lane = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[(o * n + k) * inner + i];
                }
                let lse = logsumexp_slice(&lane);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = lane[k] - lse;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.len() != d || bias.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = row_moments(row, eps);
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gain.data[k] + bias.data[k];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Stable `ln Σ exp(x)`; `-∞` for an empty or all `-∞` slice.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// `ln(e^a + e^b)` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn logsumexp_cases() {
        let v = |xs: Vec<f64>| Tensor::vector(xs).logsumexp(0).unwrap().item().unwrap();
        assert!((v(vec![0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((v(vec![-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((v(vec![0.0, 3f64.ln()]) - 4f64.ln()).abs() < 1e-15);
        assert!(Tensor::zeros([2, 0]).logsumexp(1).is_err());
        assert!(Tensor::zeros([2]).logsumexp(1).is_err());
    }

    #[test]
    fn logsumexp_over_leading_axis() {
        let t = m(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let r = t.logsumexp(0).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert!((r.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((r.data()[1] - (1.0 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::vector(vec![0.0; 3]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::vector(vec![0.0, 2f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones([2]);
        let b = Tensor::zeros([2]);
        let out = m(&[&[1.0, 3.0]]).layer_norm(&g, &b, 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        let out = m(&[&[4.0, 4.0]]).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        let bias = Tensor::vector(vec![0.5, -2.0]);
        let out = m(&[&[1.0, 7.0], &[3.0, -1.0]])
            .layer_norm(&Tensor::zeros([2]), &bias, 1e-5)
            .unwrap();
        assert_eq!(out.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn log_add_exp_matches_direct() {
        assert!((log_add_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -3.0), -3.0);
        assert!((log_add_exp(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn shape_product_invariant() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }
}
