//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod kernels;
mod param;
pub(crate) mod tape;

pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport};
pub use param::{HasParams, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense array of `f64`.
///
/// All stored values are finite; constructors and operations that would
/// produce NaN or infinity fail instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        ensure_finite(&data, "tensor")?;
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from values already known to be finite and of the
    /// right length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensors have at least one dimension")
    }

    /// Number of rows when viewed as `(len / last_dim) x last_dim`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &s) in index.iter().zip(&self.shape) {
            assert!(i < s);
            flat = flat * s + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Replaces the contents with `values`, keeping the shape.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: self.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        ensure_finite(values, "assign")?;
        self.data.copy_from_slice(values);
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Plain matrix product of `r x k` and `k x c` matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k, c) = matmul_dims(self, other)?;
        let mut out = vec![0.0; r * c];
        kernels::gemm_nn(&self.data, &other.data, &mut out, r, k, c);
        finite(vec![r, c], out, "matmul")
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Invalid(format!(
                "transpose expects a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, op: &'static str) -> Result<Tensor> {
        finite(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
            op,
        )
    }
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; x.rows()];
    kernels::layer_norm_forward(
        &x.data,
        &gain.data,
        &bias.data,
        eps,
        d,
        &mut out,
        &mut inv_std,
    );
    finite(x.shape.clone(), out, "layer_norm")
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

pub(crate) fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn finite(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
    ensure_finite(&data, op)?;
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        assert_eq!(
            Tensor::zeros(&[2, 2]).matmul(&b).unwrap(),
            Tensor::zeros(&[2, 2])
        );
    }

    #[test]
    fn matmul_hand_example() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let flat = layer_norm(
            &Tensor::new(vec![2], vec![3.0, 3.0]).unwrap(),
            &ones,
            &zeros,
            1e-5,
        )
        .unwrap();
        assert!(flat.data().iter().all(|v| v.abs() < 1e-12));

        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let bias = Tensor::full(&[2], 7.0);
        let y = layer_norm(&x, &zeros, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
        let x = Tensor::scalar(0.0);
        assert!(x.map(|v| 1.0 / v, "recip").is_err());
    }
}
