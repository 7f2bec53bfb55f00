//! Third-order tensors under the T-product, and a learnable augmentation
//! layer built from it that wraps an ordinary image classifier.
//!
//! Tensors are `m x n x p` with 0-based indices; frontal slice `k` holds the
//! `m x n` matrix at depth `k`.

pub mod data;
pub mod error;
pub mod framework;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod par;
pub mod selftest;
pub mod spectral;
pub mod tensor3;
pub mod tlayer;
pub mod tprod;

pub use error::{Error, Result};
pub use spectral::{fft_tubes, ifft_tubes, CTensor3};
pub use tensor3::{Matrix, Tensor3};
pub use tlayer::{augment_backward, augment_forward, Activation, BranchWeights, Preset, TAdafParams};
pub use tprod::{tprod_circsum, tprod_fft, tprod_naive, ttranspose, TprodKernel};
