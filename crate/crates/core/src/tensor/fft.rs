//! One-sided discrete Fourier transform for real, channel-major series.
//!
//! Direct O(tau^2) evaluation: series here are short (tau <= 256), the code
//! doubles as its own readable reference, and the adjoint needed by the
//! autodiff tape falls out of the same tables. Bin k of a tau-point series
//! holds sum_n x[n] * exp(-2*pi*i*k*n/tau); a real input is fully described
//! by bins 0..=floor(tau/2).

use super::Tensor;
use crate::error::{CoreError, Result};

/// One-sided spectrum of a real series batch: `re` and `im` are
/// (floor(tau/2)+1) x d, channel per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn bins(&self) -> usize {
        self.re.rows()
    }

    pub fn channels(&self) -> usize {
        self.re.cols()
    }

    pub fn amplitude(&self, bin: usize, ch: usize) -> f64 {
        self.re.get(bin, ch).hypot(self.im.get(bin, ch))
    }
}

/// Number of one-sided bins for a tau-point series.
pub fn n_bins(tau: usize) -> usize {
    tau / 2 + 1
}

/// Multiplicity of a one-sided bin in the full spectrum: DC and (for even
/// tau) Nyquist are self-conjugate, every other bin has a mirrored twin.
pub fn bin_multiplicity(tau: usize, k: usize) -> f64 {
    if k == 0 || (tau % 2 == 0 && k == tau / 2) {
        1.0
    } else {
        2.0
    }
}

/// One-sided DFT of a tau x d series.
pub fn rdft(x: &Tensor) -> Result<ComplexSpectrum> {
    if x.shape().len() != 2 {
        return Err(CoreError::shape("rdft", format!("expected 2D, got {:?}", x.shape())));
    }
    let (tau, d) = (x.rows(), x.cols());
    if tau == 0 {
        return Err(CoreError::shape("rdft", "zero-length series"));
    }
    let (re, im) = rdft_raw(x.data(), tau, d);
    let bins = n_bins(tau);
    Ok(ComplexSpectrum {
        re: Tensor::from_vec(&[bins, d], re)?,
        im: Tensor::from_vec(&[bins, d], im)?,
    })
}

/// Inverse of [`rdft`]; `tau` disambiguates even/odd lengths that share a
/// bin count.
pub fn irdft(s: &ComplexSpectrum, tau: usize) -> Result<Tensor> {
    let bins = n_bins(tau);
    if s.re.shape() != s.im.shape() {
        return Err(CoreError::shape(
            "irdft",
            format!("re {:?} vs im {:?}", s.re.shape(), s.im.shape()),
        ));
    }
    if s.bins() != bins {
        return Err(CoreError::shape(
            "irdft",
            format!("{} bins incompatible with tau={}", s.bins(), tau),
        ));
    }
    let d = s.channels();
    let data = irdft_raw(s.re.data(), s.im.data(), tau, d);
    Tensor::from_vec(&[tau, d], data)
}

pub(crate) fn rdft_raw(x: &[f64], tau: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = n_bins(tau);
    let mut re = vec![0.0; bins * d];
    let mut im = vec![0.0; bins * d];
    let w = 2.0 * std::f64::consts::PI / tau as f64;
    for k in 0..bins {
        for n in 0..tau {
            let (sin, cos) = (w * k as f64 * n as f64).sin_cos();
            let row = &x[n * d..(n + 1) * d];
            for (ch, &v) in row.iter().enumerate() {
                re[k * d + ch] += v * cos;
                im[k * d + ch] -= v * sin;
            }
        }
    }
    (re, im)
}

pub(crate) fn irdft_raw(re: &[f64], im: &[f64], tau: usize, d: usize) -> Vec<f64> {
    let bins = n_bins(tau);
    let mut x = vec![0.0; tau * d];
    let w = 2.0 * std::f64::consts::PI / tau as f64;
    let inv = 1.0 / tau as f64;
    for k in 0..bins {
        let m = bin_multiplicity(tau, k) * inv;
        for n in 0..tau {
            let (sin, cos) = (w * k as f64 * n as f64).sin_cos();
            for ch in 0..d {
                x[n * d + ch] += m * (re[k * d + ch] * cos - im[k * d + ch] * sin);
            }
        }
    }
    x
}

/// Adjoint of [`rdft_raw`]: maps cotangents of (re, im) back to the series.
pub(crate) fn rdft_adjoint(dre: &[f64], dim: &[f64], tau: usize, d: usize) -> Vec<f64> {
    let bins = n_bins(tau);
    let mut dx = vec![0.0; tau * d];
    let w = 2.0 * std::f64::consts::PI / tau as f64;
    for k in 0..bins {
        for n in 0..tau {
            let (sin, cos) = (w * k as f64 * n as f64).sin_cos();
            for ch in 0..d {
                dx[n * d + ch] += dre[k * d + ch] * cos - dim[k * d + ch] * sin;
            }
        }
    }
    dx
}

/// Adjoint of [`irdft_raw`]: maps a series cotangent to (re, im) cotangents.
pub(crate) fn irdft_adjoint(dx: &[f64], tau: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = n_bins(tau);
    let mut dre = vec![0.0; bins * d];
    let mut dim = vec![0.0; bins * d];
    let w = 2.0 * std::f64::consts::PI / tau as f64;
    let inv = 1.0 / tau as f64;
    for k in 0..bins {
        let m = bin_multiplicity(tau, k) * inv;
        for n in 0..tau {
            let (sin, cos) = (w * k as f64 * n as f64).sin_cos();
            for ch in 0..d {
                dre[k * d + ch] += m * cos * dx[n * d + ch];
                dim[k * d + ch] -= m * sin * dx[n * d + ch];
            }
        }
    }
    (dre, dim)
}
