//! Oracle equivalence, gradient and timing checks runnable from the command
//! line without any dataset.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::check_composed;
use crate::nn::{ModelSpec, ModelState};
use crate::tensor3::Tensor3;
use crate::tlayer::{Activation, Preset, TAdafParams};
use crate::tprod::{tprod_circsum, tprod_fft, tprod_naive};

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn random_tensor(rng: &mut impl Rng, m: usize, n: usize, p: usize) -> Tensor3 {
    Tensor3::from_fn(m, n, p, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Largest pairwise disagreement of the three T-product routes on `a * b`.
pub fn route_disagreement(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    let naive = tprod_naive(a, b)?;
    let circ = tprod_circsum(a, b)?;
    let fft = tprod_fft(a, b)?;
    Ok(naive
        .max_abs_diff(&circ)
        .max(naive.max_abs_diff(&fft))
        .max(circ.max_abs_diff(&fft)))
}

pub const ORACLE_TOL: f64 = 1e-10;

/// `instances` random products with dims up to `(m, n, s, p) = (6, 6, 6, 8)`
/// plus the two augmentation-branch shapes at 32x32.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (m, n, s, p) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=8),
        );
        let a = random_tensor(&mut rng, m, n, p);
        let b = random_tensor(&mut rng, n, s, p);
        worst = worst.max(route_disagreement(&a, &b)?);
    }
    let a = random_tensor(&mut rng, 32, 3, 32);
    let w = random_tensor(&mut rng, 3, 3, 32);
    worst = worst.max(route_disagreement(&a, &w)?);
    Ok(CheckLine {
        name: "oracle equivalence".into(),
        passed: worst <= ORACLE_TOL,
        detail: format!("{} instances, max |diff| {worst:.3e} (tol {ORACLE_TOL:e})", instances + 1),
    })
}

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// Finite-difference check of the toy classifier composed with an armed layer
/// whose weights have been moved off the identity.
pub fn gradient_suite(seed: u64) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_group = String::new();
    let mut groups = 0;
    for activation in [Activation::Identity, Activation::Tanh] {
        let model = ModelState::new(ModelSpec::toy_cnn(3), seed)?;
        let mut params = TAdafParams::new(6, 6, Preset::P525.weights().expect("armed"), activation);
        perturb(&mut params.w1, &mut rng);
        perturb(&mut params.w2, &mut rng);
        let img = random_tensor(&mut rng, 6, 6, 3);
        let label = rng.random_range(0..3);
        for r in check_composed(&img, label, &model, Some(&params), GRAD_EPS)? {
            groups += 1;
            if r.max_relative_error > worst {
                worst = r.max_relative_error;
                worst_group = format!("{}/{}", activation.name(), r.name);
            }
        }
    }
    Ok(CheckLine {
        name: "gradient check".into(),
        passed: worst <= GRAD_TOL,
        detail: format!(
            "{groups} parameter groups, max relative error {worst:.3e} at {worst_group} (tol {GRAD_TOL:e})"
        ),
    })
}

fn perturb(t: &mut Tensor3, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Scaling {
    pub fft_ratio: f64,
    pub naive_ratio: f64,
}

fn best_time(reps: usize, mut f: impl FnMut() -> Result<Tensor3>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Runtime ratios `t(p = 64) / t(p = 32)` for the FFT and naive routes at
/// `m = n = s = 16`, best of `reps` runs each.
pub fn cost_scaling(reps: usize, seed: u64) -> Result<Scaling> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratio = |route: fn(&Tensor3, &Tensor3) -> Result<Tensor3>| -> Result<f64> {
        let a32 = random_tensor(&mut rng, 16, 16, 32);
        let b32 = random_tensor(&mut rng, 16, 16, 32);
        let a64 = random_tensor(&mut rng, 16, 16, 64);
        let b64 = random_tensor(&mut rng, 16, 16, 64);
        let t32 = best_time(reps, || route(&a32, &b32))?;
        let t64 = best_time(reps, || route(&a64, &b64))?;
        Ok(t64 / t32)
    };
    Ok(Scaling {
        fft_ratio: ratio(tprod_fft)?,
        naive_ratio: ratio(tprod_naive)?,
    })
}

pub fn scaling_line(s: &Scaling) -> CheckLine {
    CheckLine {
        name: "cost scaling".into(),
        passed: s.fft_ratio <= 3.0 && s.naive_ratio >= 3.5,
        detail: format!(
            "p 32 -> 64 at m=n=s=16: fft x{:.2} (want <= 3), naive x{:.2} (want >= 3.5)",
            s.fft_ratio, s.naive_ratio
        ),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<CheckLine>> {
    Ok(vec![oracle_equivalence(100, seed)?, gradient_suite(seed)?])
}
