//! Discrete Fourier transforms along the third mode of a tensor.
//!
//! Convention: the forward transform is unnormalized,
//! `X[k] = sum_j x[j] * w^(jk)` with `w = exp(-2 pi i / n)`, and the inverse
//! carries the full `1/n`. The unitary `1/sqrt(n)` scaling of the DFT matrix
//! is dropped on both sides so that the facewise product of two spectra is
//! the spectrum of the T-product with no extra factor.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor3::Tensor3;

/// Largest imaginary residue (relative to the tube's real magnitude, floored
/// at 1) tolerated when returning from the frequency domain.
pub const IMAG_RESIDUE_TOL: f64 = 1e-8;

#[inline]
fn twiddle(k: usize, n: usize) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * (k as f64) / (n as f64))
}

/// Forward DFT. Power-of-two lengths use the recursive even/odd split,
/// everything else falls back to [`dft_direct`].
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    if x.len().is_power_of_two() {
        fft_radix2(x)
    } else {
        dft_direct(x)
    }
}

/// Recursive radix-2 decimation in time. Requires a power-of-two length.
pub fn fft_radix2(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
    let table: Vec<Complex64> = (0..n / 2).map(|k| twiddle(k, n)).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    radix2_into(x, 1, &table, 1, &mut out);
    out
}

/// Transforms `x[0], x[stride], ...` (`out.len()` points) into `out`. The
/// twiddle for a sub-problem of size `len` is `table[k * tw_stride]`.
fn radix2_into(x: &[Complex64], stride: usize, table: &[Complex64], tw_stride: usize, out: &mut [Complex64]) {
    let n = out.len();
    if n == 1 {
        out[0] = x[0];
        return;
    }
    let half = n / 2;
    let (even, odd) = out.split_at_mut(half);
    radix2_into(x, 2 * stride, table, 2 * tw_stride, even);
    radix2_into(&x[stride..], 2 * stride, table, 2 * tw_stride, odd);
    for k in 0..half {
        let t = table[k * tw_stride] * odd[k];
        let e = even[k];
        even[k] = e + t;
        odd[k] = e - t;
    }
}

/// Direct evaluation of the (unnormalized) DFT matrix product, O(n^2).
pub fn dft_direct(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| v * twiddle((j * k) % n, n))
                .sum()
        })
        .collect()
}

/// Inverse DFT computed as `conj(fft(conj(x))) / n`.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len() as f64;
    let conj: Vec<Complex64> = x.iter().map(Complex64::conj).collect();
    fft(&conj).into_iter().map(|v| v.conj() / n).collect()
}

pub fn complexify(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Complex `m x n x p` tensor, same layout as [`Tensor3`].
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor3 {
    m: usize,
    n: usize,
    p: usize,
    data: Vec<Complex64>,
}

impl CTensor3 {
    pub fn zeros(m: usize, n: usize, p: usize) -> Self {
        CTensor3 {
            m,
            n,
            p,
            data: vec![Complex64::new(0.0, 0.0); m * n * p],
        }
    }

    pub fn from_vec(m: usize, n: usize, p: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != m * n * p {
            return Err(Error::Shape(format!(
                "complex tensor {m}x{n}x{p} needs {} entries, got {}",
                m * n * p,
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numerical("non-finite complex entry".into()));
        }
        Ok(CTensor3 { m, n, p, data })
    }

    pub fn from_real(t: &Tensor3) -> Self {
        let (m, n, p) = t.dims();
        CTensor3 {
            m,
            n,
            p,
            data: complexify(t.data()),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.p)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.m + i) * self.n + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: Complex64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Borrowed frontal slice `k`, row-major.
    pub fn slice_data(&self, k: usize) -> &[Complex64] {
        let sz = self.m * self.n;
        &self.data[k * sz..(k + 1) * sz]
    }

    /// Conjugate tensor transpose: each slice conjugate-transposed, slices
    /// `1..p` reversed.
    pub fn conj_transpose(&self) -> CTensor3 {
        let (m, n, p) = self.dims();
        let mut out = CTensor3::zeros(n, m, p);
        for k in 0..p {
            let src = (p - k) % p;
            for i in 0..m {
                for j in 0..n {
                    out.set(j, i, k, self.get(i, j, src).conj());
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &CTensor3) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).norm()))
    }

    fn scatter_tubes(m: usize, n: usize, p: usize, tubes: Vec<Vec<Complex64>>) -> Self {
        let mut out = CTensor3::zeros(m, n, p);
        for (idx, tube) in tubes.into_iter().enumerate() {
            let (i, j) = (idx / n, idx % n);
            for (k, v) in tube.into_iter().enumerate() {
                out.set(i, j, k, v);
            }
        }
        out
    }

    fn tube(&self, i: usize, j: usize) -> Vec<Complex64> {
        (0..self.p).map(|k| self.get(i, j, k)).collect()
    }
}

/// Applies [`fft`] to every tube `A[i, j, :]`.
pub fn fft_tubes(t: &Tensor3) -> CTensor3 {
    let (m, n, p) = t.dims();
    let tubes = par::map_range(m * n, |idx| fft(&complexify(&t.tube(idx / n, idx % n))));
    CTensor3::scatter_tubes(m, n, p, tubes)
}

/// Applies [`ifft`] to every tube and returns the real part.
///
/// Fails with [`Error::Numerical`] when a tube's imaginary residue exceeds
/// [`IMAG_RESIDUE_TOL`] (scaled by the tube's real magnitude when that is
/// above 1), which means the spectrum did not come from real data.
pub fn ifft_tubes(t: &CTensor3) -> Result<Tensor3> {
    let (m, n, p) = t.dims();
    let tubes = par::map_range(m * n, |idx| ifft(&t.tube(idx / n, idx % n)));
    let mut out = Tensor3::zeros(m, n, p);
    for (idx, tube) in tubes.into_iter().enumerate() {
        let (i, j) = (idx / n, idx % n);
        let scale = tube.iter().fold(1.0f64, |acc, c| acc.max(c.re.abs()));
        let worst = tube.iter().fold(0.0f64, |acc, c| acc.max(c.im.abs()));
        if worst > IMAG_RESIDUE_TOL * scale {
            return Err(Error::Numerical(format!(
                "tube ({i}, {j}) has imaginary residue {worst:e} after inverse transform"
            )));
        }
        for (k, v) in tube.into_iter().enumerate() {
            out.set(i, j, k, v.re);
        }
    }
    Ok(out)
}
