//! The T-product `A * B` of an `m x n x p` and an `n x s x p` tensor.
//!
//! Three routes compute the same product:
//!
//! * [`tprod_naive`]: `fold(bcirc(A) . unfold(B))`, the definition itself.
//! * [`tprod_circsum`]: slice-wise circular convolution of frontal slices.
//! * [`tprod_fft`]: tube-wise DFT of both operands, an independent matrix
//!   product per frequency, tube-wise inverse DFT. Costs
//!   `O(mnsp + mnp log p + nsp log p)` against `O(mnsp^2)` for the others.
//!
//! The first two use real arithmetic only and serve as oracles for the third.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::spectral::{fft_tubes, ifft_tubes, CTensor3};
use crate::tensor3::{Matrix, Tensor3};

fn check_conformable(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a.1 != b.0 || a.2 != b.2 {
        return Err(Error::Shape(format!(
            "T-product of {}x{}x{} and {}x{}x{} is undefined",
            a.0, a.1, a.2, b.0, b.1, b.2
        )));
    }
    Ok(())
}

/// `fold(bcirc(a) . unfold(b))`.
pub fn tprod_naive(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_conformable(a.dims(), b.dims())?;
    let prod = a.bcirc().matmul(&b.unfold())?;
    Tensor3::fold(&prod, a.dims().2)
}

/// Circulant-sum form: with 1-based slice indices,
/// `C(k) = A(k) B(1) + sum_{i<k} A(i) B(k-i+1) + sum_{i>k} A(i) B(p-i+k+1)`.
pub fn tprod_circsum(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_conformable(a.dims(), b.dims())?;
    let (m, n, p) = a.dims();
    let s = b.dims().1;
    let slices = par::map_range(p, |k| {
        // 0-based: k here is k-1 in the 1-based formula above.
        let mut c = vec![0.0; m * s];
        accumulate_product(&mut c, a.slice_data(k), b.slice_data(0), m, n, s);
        for i in 0..k {
            accumulate_product(&mut c, a.slice_data(i), b.slice_data(k - i), m, n, s);
        }
        for i in k + 1..p {
            accumulate_product(&mut c, a.slice_data(i), b.slice_data(p - i + k), m, n, s);
        }
        c
    });
    Tensor3::from_vec(m, s, p, slices.concat())
}

fn accumulate_product(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, s: usize) {
    for i in 0..m {
        for l in 0..n {
            let av = a[i * n + l];
            for j in 0..s {
                c[i * s + j] += av * b[l * s + j];
            }
        }
    }
}

/// FFT route: transform both operands along tubes, multiply matching
/// frontal slices, transform back.
pub fn tprod_fft(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_conformable(a.dims(), b.dims())?;
    let spec = facewise(&fft_tubes(a), &fft_tubes(b))?;
    ifft_tubes(&spec)
}

/// Independent matrix product of each pair of frontal slices.
pub fn facewise(a: &CTensor3, b: &CTensor3) -> Result<CTensor3> {
    let (m, n, p) = a.dims();
    let (bn, s, bp) = b.dims();
    if n != bn || p != bp {
        return Err(Error::Shape(format!(
            "facewise product of {m}x{n}x{p} and {bn}x{s}x{bp}"
        )));
    }
    let slices = par::map_range(p, |k| {
        let (sa, sb) = (a.slice_data(k), b.slice_data(k));
        let mut c = vec![Complex64::new(0.0, 0.0); m * s];
        for i in 0..m {
            for l in 0..n {
                let av = sa[i * n + l];
                for j in 0..s {
                    c[i * s + j] += av * sb[l * s + j];
                }
            }
        }
        c
    });
    CTensor3::from_vec(m, s, p, slices.concat())
}

/// Tensor transpose: every frontal slice transposed, slices `1..p` reversed.
pub fn ttranspose(a: &Tensor3) -> Tensor3 {
    let (m, n, p) = a.dims();
    Tensor3::from_fn(n, m, p, |i, j, k| a.get(j, i, (p - k) % p))
}

/// `n x n x p` tensor with the identity in slice 0 and zeros elsewhere.
pub fn identity_tensor(n: usize, p: usize) -> Tensor3 {
    Tensor3::from_fn(n, n, p, |i, j, k| if k == 0 && i == j { 1.0 } else { 0.0 })
}

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }
}

/// The `p` diagonal blocks of `bcirc(a)` in the Fourier basis, i.e.
/// `bcirc(a) = (F_p^H kron I_m) diag(A_1..A_p) (F_p kron I_n)` with unitary
/// `F_p`. Under the unnormalized forward convention the blocks are exactly
/// the frontal slices of [`fft_tubes`].
pub fn block_diagonalize(a: &Tensor3) -> Vec<CMatrix> {
    let (m, n, p) = a.dims();
    let spec = fft_tubes(a);
    (0..p)
        .map(|k| CMatrix {
            rows: m,
            cols: n,
            data: spec.slice_data(k).to_vec(),
        })
        .collect()
}

/// Selects which route computes T-products inside the augmentation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TprodKernel {
    Naive,
    CircSum,
    #[default]
    Fft,
}

impl TprodKernel {
    pub fn apply(self, a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
        match self {
            TprodKernel::Naive => tprod_naive(a, b),
            TprodKernel::CircSum => tprod_circsum(a, b),
            TprodKernel::Fft => tprod_fft(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TprodKernel::Naive => "naive",
            TprodKernel::CircSum => "circsum",
            TprodKernel::Fft => "fft",
        }
    }
}

impl std::str::FromStr for TprodKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(TprodKernel::Naive),
            "circsum" => Ok(TprodKernel::CircSum),
            "fft" => Ok(TprodKernel::Fft),
            other => Err(Error::Config(format!("unknown T-product kernel `{other}`"))),
        }
    }
}

/// Convenience used by tests and the self-test: a reassembled
/// `(F^H kron I_m) diag(blocks) (F kron I_n)` as a real matrix, failing if
/// the imaginary part does not vanish.
pub fn reassemble_bcirc(blocks: &[CMatrix]) -> Result<Matrix> {
    let p = blocks.len();
    let Some(first) = blocks.first() else {
        return Err(Error::Argument("no blocks".into()));
    };
    let (m, n) = (first.rows, first.cols);
    let scale = 1.0 / p as f64;
    let mut out = Matrix::zeros(m * p, n * p);
    // Entry (r*m+i, c*n+j) = (1/p) sum_k conj(w^{rk}) A_k[i,j] w^{ck}.
    for r in 0..p {
        for c in 0..p {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (k, blk) in blocks.iter().enumerate() {
                        let phase = 2.0 * std::f64::consts::PI * ((r * k) as f64 - (c * k) as f64)
                            / p as f64;
                        acc += Complex64::from_polar(1.0, phase) * blk.get(i, j);
                    }
                    acc *= scale;
                    if acc.im.abs() > 1e-9 {
                        return Err(Error::Numerical(format!(
                            "reassembled block ({r}, {c}) has imaginary part {:e}",
                            acc.im
                        )));
                    }
                    out.set(r * m + i, c * n + j, acc.re);
                }
            }
        }
    }
    Ok(out)
}
