//! Central finite-difference checks of the hand-written gradients of the
//! composed pipeline (augmentation layer, classifier, blend, cross-entropy).

use serde::Serialize;

use crate::error::Result;
use crate::framework::{sample_grads, sample_loss};
use crate::nn::ModelState;
use crate::tensor3::Tensor3;
use crate::tlayer::TAdafParams;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst-case agreement for one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

fn report(name: &str, analytic: &[f64], numeric: &[f64]) -> GroupReport {
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GroupReport {
        name: name.to_string(),
        coordinates: analytic.len(),
        max_relative_error,
        worst_index,
    }
}

fn central<F>(values: &[f64], eps: f64, mut loss_at: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    (0..values.len())
        .map(|i| {
            let hi = loss_at(i, values[i] + eps)?;
            let lo = loss_at(i, values[i] - eps)?;
            Ok((hi - lo) / (2.0 * eps))
        })
        .collect()
}

/// Compares every coordinate of the classifier parameters, `W1`, `W2` (when
/// armed) and the input image against central differences with step `eps`.
pub fn check_composed(
    img: &Tensor3,
    label: usize,
    model: &ModelState,
    tadaf: Option<&TAdafParams>,
    eps: f64,
) -> Result<Vec<GroupReport>> {
    let grads = sample_grads(img, label, model, tadaf)?;
    let mut out = Vec::new();

    for (layer, analytic) in grads.model.0.iter().enumerate() {
        if analytic.is_empty() {
            continue;
        }
        let base = &model.params().0[layer];
        let mut probe = model.clone();
        let numeric = central(base, eps, |i, v| {
            let saved = probe.params().0[layer][i];
            probe.params_mut().0[layer][i] = v;
            let l = sample_loss(img, label, &probe, tadaf);
            probe.params_mut().0[layer][i] = saved;
            l
        })?;
        out.push(report(&format!("model.layer{layer}"), analytic, &numeric));
    }

    if let Some(params) = tadaf {
        for (name, analytic, pick) in [
            ("W1", grads.dw1.as_ref(), 1usize),
            ("W2", grads.dw2.as_ref(), 2usize),
        ] {
            let analytic = analytic.expect("armed pipeline yields weight gradients");
            let mut probe = params.clone();
            let base = if pick == 1 { params.w1.clone() } else { params.w2.clone() };
            let numeric = central(base.data(), eps, |i, v| {
                let target = if pick == 1 { &mut probe.w1 } else { &mut probe.w2 };
                let saved = target.data()[i];
                target.data_mut()[i] = v;
                let l = sample_loss(img, label, model, Some(&probe));
                let target = if pick == 1 { &mut probe.w1 } else { &mut probe.w2 };
                target.data_mut()[i] = saved;
                l
            })?;
            out.push(report(name, analytic.data(), &numeric));
        }
    }

    let mut probe = img.clone();
    let numeric = central(img.data(), eps, |i, v| {
        let saved = probe.data()[i];
        probe.data_mut()[i] = v;
        let l = sample_loss(&probe, label, model, tadaf);
        probe.data_mut()[i] = saved;
        l
    })?;
    out.push(report("image", grads.dimg.data(), &numeric));
    Ok(out)
}
