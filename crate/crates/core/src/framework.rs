//! One image through the full pipeline: optional augmentation views, the
//! classifier on each view, blended logits, cross-entropy. Used by training,
//! evaluation and gradient checks alike.

use crate::error::Result;
use crate::nn::{model_backward, model_forward, softmax_xent, ModelState, ParamSet};
use crate::tensor3::Tensor3;
use crate::tlayer::{augment_backward, augment_forward, combine, TAdafParams};

/// Final logits for `img`. With `tadaf = None` this is the bare classifier.
pub fn predict(img: &Tensor3, model: &ModelState, tadaf: Option<&TAdafParams>) -> Result<Vec<f64>> {
    let Some(params) = tadaf else {
        return Ok(model_forward(img, model)?.0);
    };
    let (views, _) = augment_forward(img, params)?;
    let mut logits = Vec::with_capacity(3);
    for v in &views {
        logits.push(model_forward(v, model)?.0);
    }
    combine([&logits[0], &logits[1], &logits[2]], &params.weights.get())
}

/// Loss and all gradients for one labelled image.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub model: ParamSet,
    pub dw1: Option<Tensor3>,
    pub dw2: Option<Tensor3>,
    pub dimg: Tensor3,
}

pub fn sample_grads(
    img: &Tensor3,
    label: usize,
    model: &ModelState,
    tadaf: Option<&TAdafParams>,
) -> Result<SampleGrads> {
    let Some(params) = tadaf else {
        let (logits, cache) = model_forward(img, model)?;
        let (loss, g) = softmax_xent(&logits, label)?;
        let (grads, dimg) = model_backward(&g, &cache, model)?;
        return Ok(SampleGrads {
            loss,
            logits,
            model: grads,
            dw1: None,
            dw2: None,
            dimg,
        });
    };

    let (views, branch_cache) = augment_forward(img, params)?;
    let mut outs = Vec::with_capacity(3);
    for v in &views {
        outs.push(model_forward(v, model)?);
    }
    let w = params.weights.get();
    let logits = combine([&outs[0].0, &outs[1].0, &outs[2].0], &w)?;
    let (loss, g) = softmax_xent(&logits, label)?;

    let mut model_grads = ParamSet::zeros_like(model.params());
    let mut dviews = Vec::with_capacity(3);
    for ((_, cache), wi) in outs.iter().zip(w) {
        let gi: Vec<f64> = g.iter().map(|v| v * wi).collect();
        let (grads, dview) = model_backward(&gi, cache, model)?;
        model_grads.add_assign(&grads);
        dviews.push(dview);
    }
    let dviews: [Tensor3; 3] = dviews.try_into().expect("three views");
    let aug = augment_backward(&dviews, &branch_cache, params)?;
    Ok(SampleGrads {
        loss,
        logits,
        model: model_grads,
        dw1: Some(aug.dw1),
        dw2: Some(aug.dw2),
        dimg: aug.dimg,
    })
}

/// Cross-entropy of the pipeline on one image.
pub fn sample_loss(
    img: &Tensor3,
    label: usize,
    model: &ModelState,
    tadaf: Option<&TAdafParams>,
) -> Result<f64> {
    Ok(softmax_xent(&predict(img, model, tadaf)?, label)?.0)
}
