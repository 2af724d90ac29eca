//! Dense row-major f64 tensors.
//!
//! Values are immutable after construction; every operation allocates its
//! result. Shapes are explicit and checked, and public constructors reject
//! non-finite values so NaN/Inf surfaces as an error instead of propagating.

pub(crate) mod fft;

pub use fft::{bin_multiplicity, irdft, n_bins, rdft, ComplexSpectrum};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::shape(
                "Tensor::from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::non_finite("Tensor::from_vec"));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// 2D constructor from a row-major generator.
    pub fn from_fn_2d(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2D tensor");
        self.shape[0]
    }

    /// Number of columns of a 2D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2D tensor");
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "Tensor::zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn zip_map_3(
        &self,
        b: &Tensor,
        c: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != b.shape || self.shape != c.shape {
            return Err(CoreError::shape(
                "Tensor::zip_map_3",
                format!("{:?} vs {:?} vs {:?}", self.shape, b.shape, c.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&b.data)
            .zip(&c.data)
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + s * other`, the workhorse of diffusion updates.
    pub fn add_scaled(&self, other: &Tensor, s: f64) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(CoreError::shape(
                "Tensor::matmul",
                format!("{}x{} times {}x{}", m, k, k2, n),
            ));
        }
        Ok(Tensor { shape: vec![m, n], data: matmul_raw(&self.data, &other.data, m, k, n) })
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = self.data[r * n + c];
            }
        }
        Tensor { shape: vec![n, m], data }
    }

    /// Returns an error if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::non_finite(context))
        }
    }
}

/// Row-major matmul kernel shared by the tape ops. ikj order keeps the
/// innermost loop streaming over contiguous rows of both `b` and `out`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_fn_2d(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let y = x.matmul(&eye).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_matches_manual_small_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_fn_2d(3, 5, |r, c| (r * 5 + c) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn add_scaled_matches_manual() {
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(c.data(), &[6.0, 12.0, 18.0]);
    }
}
