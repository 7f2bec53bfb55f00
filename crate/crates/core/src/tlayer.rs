//! Learnable T-product augmentation layer.
//!
//! An `m x n x 3` image yields three views for the downstream classifier:
//!
//! * branch 0: the image itself;
//! * branch 1: the image permuted to `m x 3 x n`, T-multiplied on the right by
//!   `W1` (`3 x 3 x n`), passed through the activation and permuted back;
//! * branch 2: the image permuted to `n x 3 x m`, T-multiplied by `W2`
//!   (`3 x 3 x m`), activated and permuted back.
//!
//! Both weights start at the identity tensor, so with the identity activation
//! all three views coincide at initialization. The classifier's predictions
//! on the views are blended with fixed convex weights `(w0, w1, w2)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor3::{dump_tokens, expect_token, Tensor3};
use crate::tprod::{identity_tensor, ttranspose, TprodKernel};

/// Axis order taking an `m x n x 3` image to `m x 3 x n`.
pub const BRANCH1_AXES: [usize; 3] = [0, 2, 1];
/// Axis order taking an `m x n x 3` image to `n x 3 x m`.
pub const BRANCH2_AXES: [usize; 3] = [1, 2, 0];

const BRANCH1_INV: [usize; 3] = [0, 2, 1];
const BRANCH2_INV: [usize; 3] = [2, 0, 1];

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convex combination weights `(w0, w1, w2)` for the three branch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights([f64; 3]);

impl BranchWeights {
    pub fn new(w: [f64; 3]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("branch weights must be nonnegative: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!("branch weights sum to {sum}, not 1")));
        }
        Ok(BranchWeights(w))
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }
}

/// Named weight presets. `Off` disables the layer entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "333")]
    P333,
    #[serde(rename = "433")]
    P433,
    #[serde(rename = "525")]
    P525,
}

impl Preset {
    pub fn weights(self) -> Option<BranchWeights> {
        let w = match self {
            Preset::Off => return None,
            Preset::P333 => [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0],
            Preset::P433 => [0.4, 0.3, 0.3],
            Preset::P525 => [0.5, 0.25, 0.25],
        };
        Some(BranchWeights::new(w).expect("preset weights are convex"))
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Off => "off",
            Preset::P333 => "333",
            Preset::P433 => "433",
            Preset::P525 => "525",
        }
    }

    pub fn is_armed(self) -> bool {
        self != Preset::Off
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" | "baseline" => Ok(Preset::Off),
            "333" => Ok(Preset::P333),
            "433" => Ok(Preset::P433),
            "525" => Ok(Preset::P525),
            other => Err(Error::Config(format!("unknown weight preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Blends the three branch predictions: `w0 r0 + w1 r1 + w2 r2`.
pub fn combine(results: [&[f64]; 3], w: &[f64; 3]) -> Result<Vec<f64>> {
    let checked = BranchWeights::new(*w)?;
    let len = results[0].len();
    if results.iter().any(|r| r.len() != len) {
        return Err(Error::Shape("branch predictions differ in length".into()));
    }
    let [w0, w1, w2] = checked.get();
    Ok((0..len)
        .map(|i| w0 * results[0][i] + w1 * results[1][i] + w2 * results[2][i])
        .collect())
}

/// Learnable state of the augmentation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TAdafParams {
    pub w1: Tensor3,
    pub w2: Tensor3,
    pub weights: BranchWeights,
    pub activation: Activation,
    pub kernel: TprodKernel,
    pub frozen: bool,
}

impl TAdafParams {
    /// Identity-initialized parameters for `m x n x 3` images.
    pub fn new(m: usize, n: usize, weights: BranchWeights, activation: Activation) -> Self {
        TAdafParams {
            w1: identity_tensor(3, n),
            w2: identity_tensor(3, m),
            weights,
            activation,
            kernel: TprodKernel::default(),
            frozen: false,
        }
    }

    pub fn with_kernel(mut self, kernel: TprodKernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Image height and width the parameters were built for.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.w2.dims().2, self.w1.dims().2)
    }

    /// `9n + 9m` learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn checksum(&self) -> u64 {
        self.w1.checksum() ^ self.w2.checksum().rotate_left(1)
    }

    fn check_image(&self, img: &Tensor3) -> Result<()> {
        let (m, n, c) = img.dims();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if self.w1.dims() != (3, 3, n) || self.w2.dims() != (3, 3, m) {
            return Err(Error::Shape(format!(
                "image {m}x{n}x3 does not match W1 {:?} / W2 {:?}",
                self.w1.dims(),
                self.w2.dims()
            )));
        }
        Ok(())
    }

    /// Checkpoint section holding weights, activation and both tensors.
    pub fn to_dump(&self) -> String {
        let [w0, w1, w2] = self.weights.get();
        format!(
            "tadaf-params v1\nweights {w0:.16e} {w1:.16e} {w2:.16e}\nactivation {}\nkernel {}\nfrozen {}\nw1\n{}w2\n{}end-tadaf-params\n",
            self.activation,
            self.kernel.name(),
            self.frozen,
            self.w1.to_dump(),
            self.w2.to_dump()
        )
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut tokens = dump_tokens(text);
        let params = Self::parse_dump(&mut tokens)?;
        if tokens.next().is_some() {
            return Err(Error::Format("trailing data after parameter section".into()));
        }
        Ok(params)
    }

    pub(crate) fn parse_dump<'a>(tokens: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut next = |what: &str| {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("missing {what}")))
        };
        if next("header")? != "tadaf-params" || next("version")? != "v1" {
            return Err(Error::Format("not a v1 parameter section".into()));
        }
        if next("weights")? != "weights" {
            return Err(Error::Format("expected weights".into()));
        }
        let mut w = [0.0; 3];
        for v in &mut w {
            *v = next("weight")?
                .parse()
                .map_err(|e| Error::Format(format!("bad weight: {e}")))?;
        }
        if next("activation")? != "activation" {
            return Err(Error::Format("expected activation".into()));
        }
        let activation: Activation = next("activation name")?.parse()?;
        if next("kernel")? != "kernel" {
            return Err(Error::Format("expected kernel".into()));
        }
        let kernel: TprodKernel = next("kernel name")?.parse()?;
        if next("frozen")? != "frozen" {
            return Err(Error::Format("expected frozen".into()));
        }
        let frozen = match next("frozen flag")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Format(format!("bad frozen flag `{other}`"))),
        };
        expect_token(tokens, "w1")?;
        let w1 = Tensor3::parse_dump(tokens)?;
        expect_token(tokens, "w2")?;
        let w2 = Tensor3::parse_dump(tokens)?;
        expect_token(tokens, "end-tadaf-params")?;
        Ok(TAdafParams {
            w1,
            w2,
            weights: BranchWeights::new(w)?,
            activation,
            kernel,
            frozen,
        })
    }
}

/// Intermediates of one forward pass, consumed by [`augment_backward`].
#[derive(Debug, Clone)]
pub struct BranchCache {
    img: Tensor3,
    a1: Tensor3,
    a2: Tensor3,
    z1: Tensor3,
    z2: Tensor3,
}

impl BranchCache {
    pub fn image_dims(&self) -> (usize, usize) {
        let (m, n, _) = self.img.dims();
        (m, n)
    }
}

/// Gradients produced by [`augment_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentGrads {
    pub dw1: Tensor3,
    pub dw2: Tensor3,
    pub dimg: Tensor3,
}

/// Produces the three views of `img`.
pub fn augment_forward(img: &Tensor3, params: &TAdafParams) -> Result<([Tensor3; 3], BranchCache)> {
    params.check_image(img)?;
    let act = params.activation;

    let a1 = img.permute(BRANCH1_AXES)?;
    let z1 = params.kernel.apply(&a1, &params.w1)?;
    let b1 = z1.map(|v| act.apply(v)).permute(BRANCH1_INV)?;

    let a2 = img.permute(BRANCH2_AXES)?;
    let z2 = params.kernel.apply(&a2, &params.w2)?;
    let b2 = z2.map(|v| act.apply(v)).permute(BRANCH2_INV)?;

    let cache = BranchCache {
        img: img.clone(),
        a1,
        a2,
        z1,
        z2,
    };
    Ok(([img.clone(), b1, b2], cache))
}

/// Backward pass through one permuted branch `Y = act(A * W)`.
///
/// With `D = dY . act'(Z)` the transposed forward form `Z^T = W^T * A^T` gives
/// `dA^T = W * D^T` and `dW^T = D^T * A`; both are transposed back at the end.
fn branch_backward(
    grad_view: &Tensor3,
    axes: [usize; 3],
    inv_axes: [usize; 3],
    a: &Tensor3,
    z: &Tensor3,
    w: &Tensor3,
    params: &TAdafParams,
) -> Result<(Tensor3, Tensor3)> {
    let act = params.activation;
    let g = grad_view.permute(axes)?;
    let delta = g.hadamard(&z.map(|v| act.derivative(v)))?;
    let delta_t = ttranspose(&delta);

    let da_t = params.kernel.apply(w, &delta_t)?;
    let da = ttranspose(&da_t).permute(inv_axes)?;

    let dw = if params.frozen {
        Tensor3::zeros(3, 3, w.dims().2)
    } else {
        let dw_t = params.kernel.apply(&delta_t, a)?;
        ttranspose(&dw_t)
    };
    Ok((dw, da))
}

/// Gradients of the downstream loss with respect to `W1`, `W2` and the input
/// image, given the loss gradients with respect to each of the three views.
///
/// Branch gradients are taken as-is; any blending weight must already be
/// folded in by the caller. Frozen parameters report zero weight gradients.
pub fn augment_backward(
    grad_branches: &[Tensor3; 3],
    cache: &BranchCache,
    params: &TAdafParams,
) -> Result<AugmentGrads> {
    let (m, n) = cache.image_dims();
    if params.image_dims() != (m, n) || cache.z1.dims() != (m, 3, n) || cache.z2.dims() != (n, 3, m)
    {
        return Err(Error::State(format!(
            "cache for {m}x{n} images used with parameters for {:?}",
            params.image_dims()
        )));
    }
    if grad_branches.iter().any(|g| g.dims() != (m, n, 3)) {
        return Err(Error::State("branch gradient shape differs from cached image".into()));
    }

    let (dw1, da1) = branch_backward(
        &grad_branches[1],
        BRANCH1_AXES,
        BRANCH1_INV,
        &cache.a1,
        &cache.z1,
        &params.w1,
        params,
    )?;
    let (dw2, da2) = branch_backward(
        &grad_branches[2],
        BRANCH2_AXES,
        BRANCH2_INV,
        &cache.a2,
        &cache.z2,
        &params.w2,
        params,
    )?;

    let mut dimg = grad_branches[0].clone();
    dimg.add_assign(&da1)?;
    dimg.add_assign(&da2)?;
    Ok(AugmentGrads { dw1, dw2, dimg })
}
