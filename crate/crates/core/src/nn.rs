//! Small from-scratch classifier stack: valid convolutions, 2x2 max pooling,
//! dense layers and pointwise activations, with hand-written reverse mode,
//! softmax cross-entropy, Adam and staged learning-rate schedules.
//!
//! Activations flow as flat channel-major buffers (`c, h, w`). Image tensors
//! stored as `h x w x c` [`Tensor3`]s already use that order, so an image's
//! data is fed to the first layer as-is.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor3::{dump_tokens, expect_token, parse_usize, Matrix, Tensor3};

/// `(channels, height, width)` of an activation buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d { in_c: usize, out_c: usize, k: usize },
    MaxPool2,
    Relu,
    Tanh,
    Flatten,
    Dense { inputs: usize, outputs: usize },
}

impl LayerSpec {
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, k } => {
                if s.c != in_c || s.h < k || s.w < k {
                    return Err(Error::Config(format!(
                        "conv {in_c}->{out_c} k{k} cannot take input {s:?}"
                    )));
                }
                Ok(Shape::new(out_c, s.h - k + 1, s.w - k + 1))
            }
            LayerSpec::MaxPool2 => {
                if s.h < 2 || s.w < 2 {
                    return Err(Error::Config(format!("2x2 pooling on {s:?}")));
                }
                Ok(Shape::new(s.c, s.h / 2, s.w / 2))
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(s),
            LayerSpec::Flatten => Ok(Shape::new(s.len(), 1, 1)),
            LayerSpec::Dense { inputs, outputs } => {
                if s.len() != inputs || s.h != 1 || s.w != 1 {
                    return Err(Error::Config(format!(
                        "dense {inputs}->{outputs} cannot take input {s:?}"
                    )));
                }
                Ok(Shape::new(outputs, 1, 1))
            }
        }
    }

    /// `(weights, biases)` scalar counts.
    fn param_sizes(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, k } => (out_c * in_c * k * k, out_c),
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_c, k, .. } => in_c * k * k,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn tag(&self) -> String {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, k } => format!("conv2d {in_c} {out_c} {k}"),
            LayerSpec::MaxPool2 => "maxpool2".into(),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Tanh => "tanh".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
        }
    }
}

/// Architecture description: input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// LeNet-5 adapted to RGB input:
    /// conv(3->6, 5x5)-relu-pool-conv(6->16, 5x5)-relu-pool-dense(400->120)-relu-dense(120->84)-relu-dense(84->K).
    pub fn lenet5(h: usize, w: usize, classes: usize) -> Self {
        let fh = ((h - 4) / 2 - 4) / 2;
        let fw = ((w - 4) / 2 - 4) / 2;
        let flat = 16 * fh * fw;
        ModelSpec {
            input: Shape::new(3, h, w),
            layers: vec![
                LayerSpec::Conv2d { in_c: 3, out_c: 6, k: 5 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv2d { in_c: 6, out_c: 16, k: 5 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: flat, outputs: 120 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 120, outputs: 84 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 84, outputs: classes },
            ],
        }
    }

    /// One-hidden-layer perceptron over the flattened image.
    pub fn mlp(h: usize, w: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            input: Shape::new(3, h, w),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 3 * h * w, outputs: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: hidden, outputs: classes },
            ],
        }
    }

    /// Smooth toy CNN used for finite-difference checks on 6x6 inputs:
    /// conv(3->2, 3x3)-tanh-pool-dense(8->K).
    pub fn toy_cnn(classes: usize) -> Self {
        ModelSpec {
            input: Shape::new(3, 6, 6),
            layers: vec![
                LayerSpec::Conv2d { in_c: 3, out_c: 2, k: 3 },
                LayerSpec::Tanh,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 8, outputs: classes },
            ],
        }
    }

    /// Shapes entering each layer plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut out = vec![self.input];
        for l in &self.layers {
            let next = l.output_shape(*out.last().unwrap())?;
            out.push(next);
        }
        let last = *out.last().unwrap();
        if last.h != 1 || last.w != 1 {
            return Err(Error::Config(format!("model output {last:?} is not a vector")));
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().c)
    }
}

/// Per-layer parameter buffers (weights then biases), also used for gradients
/// and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet(pub Vec<Vec<f64>>);

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet(other.0.iter().map(|v| vec![0.0; v.len()]).collect())
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.len() == b.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for an arbitrary list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl Adam {
    pub fn new(like: &ParamSet, hyper: AdamHyper) -> Self {
        Adam {
            m: ParamSet::zeros_like(like),
            v: ParamSet::zeros_like(like),
            t: 0,
            hyper,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.0.len()
            || grads.len() != params.len()
            || params
                .iter()
                .zip(grads)
                .zip(&self.m.0)
                .any(|((p, g), m)| p.len() != m.len() || g.len() != m.len())
        {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.0.iter_mut())
            .zip(self.v.0.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Classifier parameters plus their optimizer state.
#[derive(Debug, Clone)]
pub struct ModelState {
    spec: ModelSpec,
    shapes: Vec<Shape>,
    params: ParamSet,
    adam: Adam,
    // Bumped on every mutable access; forward caches record it.
    version: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.adam == other.adam
    }
}

impl ModelState {
    /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let (nw, nb) = l.param_sizes();
            let mut buf = Vec::with_capacity(nw + nb);
            if nw > 0 {
                let bound = (1.0 / l.fan_in() as f64).sqrt();
                buf.extend((0..nw).map(|_| rng.random_range(-bound..bound)));
            }
            buf.extend(std::iter::repeat_n(0.0, nb));
            params.push(buf);
        }
        let params = ParamSet(params);
        let adam = Adam::new(&params, AdamHyper::default());
        Ok(ModelState {
            spec,
            shapes,
            params,
            adam,
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap().c
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total()
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.0.iter().flatten() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Applies one Adam update with the given rate.
    pub fn adam_step(&mut self, grads: &ParamSet, lr: f64, hyper: AdamHyper) -> Result<()> {
        if !self.params.same_layout(grads) {
            return Err(Error::Shape("gradient layout differs from model".into()));
        }
        self.adam.hyper = hyper;
        self.version += 1;
        let mut p: Vec<&mut [f64]> = self.params.0.iter_mut().map(Vec::as_mut_slice).collect();
        let g: Vec<&[f64]> = grads.0.iter().map(Vec::as_slice).collect();
        self.adam.step(&mut p, &g, lr)
    }

    /// Serializes architecture, parameters and optionally the Adam moments.
    pub fn to_checkpoint(&self, with_adam: bool) -> String {
        let mut s = String::from("tadaf-checkpoint v1\n");
        let inp = self.spec.input;
        let _ = writeln!(s, "input {} {} {}", inp.c, inp.h, inp.w);
        let _ = writeln!(s, "layers {}", self.spec.layers.len());
        for l in &self.spec.layers {
            let _ = writeln!(s, "layer {}", l.tag());
        }
        let _ = writeln!(s, "params");
        for buf in &self.params.0 {
            s.push_str(&param_matrix(buf).to_dump());
        }
        if with_adam {
            let _ = writeln!(
                s,
                "adam {} {:.16e} {:.16e} {:.16e}",
                self.adam.t, self.adam.hyper.beta1, self.adam.hyper.beta2, self.adam.hyper.eps
            );
            for buf in self.adam.m.0.iter().chain(&self.adam.v.0) {
                s.push_str(&param_matrix(buf).to_dump());
            }
        } else {
            s.push_str("adam none\n");
        }
        s.push_str("end-checkpoint\n");
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut tokens = dump_tokens(text);
        let state = Self::parse_checkpoint(&mut tokens)?;
        Ok(state)
    }

    pub(crate) fn parse_checkpoint<'a>(
        tokens: &mut impl Iterator<Item = &'a str>,
    ) -> Result<Self> {
        expect_token(tokens, "tadaf-checkpoint")?;
        expect_token(tokens, "v1")?;
        expect_token(tokens, "input")?;
        let input = Shape::new(
            parse_usize(tokens.next())?,
            parse_usize(tokens.next())?,
            parse_usize(tokens.next())?,
        );
        expect_token(tokens, "layers")?;
        let count = parse_usize(tokens.next())?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            expect_token(tokens, "layer")?;
            let spec = match tokens.next() {
                Some("conv2d") => LayerSpec::Conv2d {
                    in_c: parse_usize(tokens.next())?,
                    out_c: parse_usize(tokens.next())?,
                    k: parse_usize(tokens.next())?,
                },
                Some("dense") => LayerSpec::Dense {
                    inputs: parse_usize(tokens.next())?,
                    outputs: parse_usize(tokens.next())?,
                },
                Some("maxpool2") => LayerSpec::MaxPool2,
                Some("relu") => LayerSpec::Relu,
                Some("tanh") => LayerSpec::Tanh,
                Some("flatten") => LayerSpec::Flatten,
                other => return Err(Error::Format(format!("unknown layer {other:?}"))),
            };
            layers.push(spec);
        }
        let mut state = ModelState::new(ModelSpec { input, layers }, 0)?;
        expect_token(tokens, "params")?;
        let read_set = |tokens: &mut dyn Iterator<Item = &'a str>, like: &ParamSet| {
            like.0
                .iter()
                .map(|buf| {
                    let m = parse_matrix(tokens)?;
                    if m.data().len() != buf.len() {
                        return Err(Error::Format("parameter block has the wrong size".into()));
                    }
                    Ok(m.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()
                .map(ParamSet)
        };
        let params = read_set(tokens, &state.params)?;
        expect_token(tokens, "adam")?;
        match tokens.next() {
            Some("none") => {}
            Some(t) => {
                let t: u64 = t
                    .parse()
                    .map_err(|e| Error::Format(format!("bad step count: {e}")))?;
                let mut hyper = [0.0; 3];
                for h in &mut hyper {
                    *h = tokens
                        .next()
                        .ok_or_else(|| Error::Format("missing adam hyper".into()))?
                        .parse()
                        .map_err(|e| Error::Format(format!("bad adam hyper: {e}")))?;
                }
                let m = read_set(tokens, &state.params)?;
                let v = read_set(tokens, &state.params)?;
                state.adam = Adam {
                    m,
                    v,
                    t,
                    hyper: AdamHyper {
                        beta1: hyper[0],
                        beta2: hyper[1],
                        eps: hyper[2],
                    },
                };
            }
            None => return Err(Error::Format("missing adam section".into())),
        }
        expect_token(tokens, "end-checkpoint")?;
        state.params = params;
        Ok(state)
    }
}

fn param_matrix(buf: &[f64]) -> Matrix {
    Matrix::from_vec(1, buf.len(), buf.to_vec()).expect("row vector")
}

fn parse_matrix(tokens: &mut dyn Iterator<Item = &str>) -> Result<Matrix> {
    let mut text = String::new();
    let header: Vec<&str> = tokens.take(3).collect();
    if header.len() != 3 || header[0] != "matrix" {
        return Err(Error::Format(format!("expected matrix header, found {header:?}")));
    }
    let rows: usize = parse_usize(Some(header[1]))?;
    let cols: usize = parse_usize(Some(header[2]))?;
    let _ = write!(text, "matrix {rows} {cols}");
    for _ in 0..rows * cols {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::Format("truncated matrix".into()))?;
        text.push(' ');
        text.push_str(tok);
    }
    Matrix::from_dump(&text)
}

/// Intermediates kept by [`model_forward`] for [`model_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<usize>>,
    version: u64,
}

fn conv_forward(x: &[f64], s: Shape, params: &[f64], out_c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (s.h - k + 1, s.w - k + 1);
    let nw = out_c * s.c * k * k;
    let (weights, bias) = params.split_at(nw);
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for ci in 0..s.c {
            let src = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * s.c + ci) * k + ky) * k + kx];
                    for y in 0..oh {
                        let row = &src[(y + ky) * s.w + kx..(y + ky) * s.w + kx + ow];
                        for (d, v) in plane[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    s: Shape,
    params: &[f64],
    out_c: usize,
    k: usize,
    g: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let (oh, ow) = (s.h - k + 1, s.w - k + 1);
    let nw = out_c * s.c * k * k;
    let weights = &params[..nw];
    let (gw, gb) = grad.split_at_mut(nw);
    let mut dx = vec![0.0; x.len()];
    for o in 0..out_c {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += gplane.iter().sum::<f64>();
        for ci in 0..s.c {
            let src = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            let dsrc = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * s.c + ci) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let off = (y + ky) * s.w + kx;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        for (xv, gv) in src[off..off + ow].iter().zip(grow) {
                            acc += xv * gv;
                        }
                        for (d, gv) in dsrc[off..off + ow].iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    dx
}

fn pool_forward(x: &[f64], s: Shape) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut arg = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (c * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn dense_forward(x: &[f64], params: &[f64], inputs: usize, outputs: usize) -> Vec<f64> {
    let (w, b) = params.split_at(inputs * outputs);
    (0..outputs)
        .map(|o| {
            b[o] + w[o * inputs..(o + 1) * inputs]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
        })
        .collect()
}

/// Runs the classifier on one `h x w x c` image.
pub fn model_forward(img: &Tensor3, state: &ModelState) -> Result<(Vec<f64>, ForwardCache)> {
    let inp = state.spec.input;
    if img.dims() != (inp.h, inp.w, inp.c) {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} input, got {:?}",
            inp.h,
            inp.w,
            inp.c,
            img.dims()
        )));
    }
    let mut x = img.data().to_vec();
    let mut inputs = Vec::with_capacity(state.spec.layers.len());
    let mut pool_argmax = Vec::new();
    for (idx, layer) in state.spec.layers.iter().enumerate() {
        let s = state.shapes[idx];
        let p = &state.params.0[idx];
        let y = match *layer {
            LayerSpec::Conv2d { out_c, k, .. } => conv_forward(&x, s, p, out_c, k),
            LayerSpec::MaxPool2 => {
                let (y, arg) = pool_forward(&x, s);
                pool_argmax.push(arg);
                y
            }
            LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
            LayerSpec::Flatten => x.clone(),
            LayerSpec::Dense { inputs, outputs } => dense_forward(&x, p, inputs, outputs),
        };
        inputs.push(std::mem::replace(&mut x, y));
    }
    Ok((
        x,
        ForwardCache {
            inputs,
            pool_argmax,
            version: state.version,
        },
    ))
}

/// Reverse pass: parameter gradients and the gradient with respect to the
/// input image.
pub fn model_backward(
    grad_logits: &[f64],
    cache: &ForwardCache,
    state: &ModelState,
) -> Result<(ParamSet, Tensor3)> {
    if cache.version != state.version
        || cache.inputs.len() != state.spec.layers.len()
    {
        return Err(Error::State("forward cache is stale for this model state".into()));
    }
    if grad_logits.len() != state.num_classes() {
        return Err(Error::Shape(format!(
            "{} logit gradients for {} classes",
            grad_logits.len(),
            state.num_classes()
        )));
    }
    let mut grads = ParamSet::zeros_like(&state.params);
    let mut g = grad_logits.to_vec();
    let mut pool_idx = cache.pool_argmax.len();
    for (idx, layer) in state.spec.layers.iter().enumerate().rev() {
        let s = state.shapes[idx];
        let x = &cache.inputs[idx];
        let p = &state.params.0[idx];
        g = match *layer {
            LayerSpec::Conv2d { out_c, k, .. } => {
                conv_backward(x, s, p, out_c, k, &g, &mut grads.0[idx])
            }
            LayerSpec::MaxPool2 => {
                pool_idx -= 1;
                let mut dx = vec![0.0; x.len()];
                for (gv, &src) in g.iter().zip(&cache.pool_argmax[pool_idx]) {
                    dx[src] += gv;
                }
                dx
            }
            LayerSpec::Relu => x
                .iter()
                .zip(&g)
                .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                .collect(),
            LayerSpec::Tanh => x
                .iter()
                .zip(&g)
                .map(|(v, gv)| {
                    let t = v.tanh();
                    gv * (1.0 - t * t)
                })
                .collect(),
            LayerSpec::Flatten => g,
            LayerSpec::Dense { inputs, outputs } => {
                let (gw, gb) = grads.0[idx].split_at_mut(inputs * outputs);
                let w = &p[..inputs * outputs];
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    gb[o] += g[o];
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        grow[i] += g[o] * x[i];
                        dx[i] += g[o] * row[i];
                    }
                }
                dx
            }
        };
    }
    let inp = state.spec.input;
    let dimg = Tensor3::from_vec(inp.h, inp.w, inp.c, g)?;
    Ok((grads, dimg))
}

/// Softmax probabilities with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label` and its gradient
/// `softmax(logits) - onehot(label)`. Batch averaging is left to the caller.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Range(format!(
            "label {label} with {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = log_sum - (logits[label] - max);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Which parameter group a learning rate applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateGroup {
    Model,
    Tprod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub first: usize,
    pub last: usize,
    pub model: f64,
    pub tprod: f64,
}

/// Piecewise-constant learning rates over 1-based epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    stages: Vec<Stage>,
}

/// T-product rates are this fraction of the model rate.
pub const TPROD_RATE_RATIO: f64 = 0.2;

impl LrSchedule {
    /// Validates that `stages` cover `1..=N` contiguously and that every
    /// T-product rate is a fifth of the model rate.
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let mut expect = 1;
        for s in &stages {
            if s.first != expect || s.last < s.first {
                return Err(Error::Config(format!(
                    "schedule stage {}-{} does not continue from epoch {expect}",
                    s.first, s.last
                )));
            }
            if (s.tprod - s.model * TPROD_RATE_RATIO).abs() > 1e-12 * s.model.abs().max(1e-300) {
                return Err(Error::Config(format!(
                    "T-product rate {} is not a fifth of {}",
                    s.tprod, s.model
                )));
            }
            expect = s.last + 1;
        }
        if stages.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        Ok(LrSchedule { stages })
    }

    /// Stages at the given fractional boundaries of `epochs`, model rates
    /// `rates`, T-product rates a fifth of those. Runs shorter than the
    /// number of stages keep only the leading stages, one epoch each.
    pub fn staged(epochs: usize, cut_fractions: &[f64], rates: &[f64]) -> Result<Self> {
        if rates.len() != cut_fractions.len() + 1 || epochs == 0 {
            return Err(Error::Config(format!(
                "{} rates need {} cuts and at least one epoch (got {epochs})",
                rates.len(),
                rates.len() - 1
            )));
        }
        let keep = rates.len().min(epochs);
        let (cut_fractions, rates) = (&cut_fractions[..keep - 1], &rates[..keep]);
        let mut stages = Vec::with_capacity(rates.len());
        let mut first = 1;
        for (i, &rate) in rates.iter().enumerate() {
            let last = if i < cut_fractions.len() {
                ((cut_fractions[i] * epochs as f64).round() as usize).clamp(first, epochs - 1)
            } else {
                epochs
            };
            stages.push(Stage {
                first,
                last,
                model: rate,
                tprod: rate * TPROD_RATE_RATIO,
            });
            first = last + 1;
        }
        LrSchedule::new(stages)
    }

    /// LeNet-5 schedule: 0.1 for the first half, 0.02 after (100 epochs in
    /// the reference setup).
    pub fn lenet(epochs: usize) -> Result<Self> {
        LrSchedule::staged(epochs, &[0.5], &[0.1, 0.02])
    }

    /// Deep-model schedule: 0.1 / 0.02 / 0.004 / 0.0008 with cuts at 60, 120
    /// and 160 of 200 epochs.
    pub fn deep(epochs: usize) -> Result<Self> {
        LrSchedule::staged(epochs, &[0.3, 0.6, 0.8], &[0.1, 0.02, 0.004, 0.0008])
    }

    /// LeNet-shaped schedule rescaled to a base rate of 1e-3, which Adam
    /// tolerates on small subsets.
    pub fn desk(epochs: usize) -> Result<Self> {
        LrSchedule::staged(epochs, &[0.5], &[1e-3, 2e-4])
    }

    pub fn constant(epochs: usize, rate: f64) -> Result<Self> {
        LrSchedule::new(vec![Stage {
            first: 1,
            last: epochs,
            model: rate,
            tprod: rate * TPROD_RATE_RATIO,
        }])
    }

    pub fn epochs(&self) -> usize {
        self.stages.last().map_or(0, |s| s.last)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, which: RateGroup) -> Result<f64> {
    let stage = schedule
        .stages
        .iter()
        .find(|s| (s.first..=s.last).contains(&epoch))
        .ok_or_else(|| {
            Error::Range(format!(
                "epoch {epoch} outside 1..={}",
                schedule.epochs()
            ))
        })?;
    Ok(match which {
        RateGroup::Model => stage.model,
        RateGroup::Tprod => stage.tprod,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_model(w: [[f64; 2]; 2], b: [f64; 2]) -> ModelState {
        let spec = ModelSpec {
            input: Shape::new(1, 1, 2),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 2, outputs: 2 },
            ],
        };
        let mut s = ModelState::new(spec, 0).unwrap();
        s.params_mut().0[1] = vec![w[0][0], w[0][1], w[1][0], w[1][1], b[0], b[1]];
        s
    }

    #[test]
    fn dense_forward_and_backward_by_hand() {
        let s = dense_model([[1.0, 2.0], [3.0, -1.0]], [0.5, -0.5]);
        // 1x2x1 image: two pixels of a single channel.
        let img = Tensor3::from_vec(1, 2, 1, vec![2.0, 1.0]).unwrap();
        let (logits, cache) = model_forward(&img, &s).unwrap();
        assert_eq!(logits, vec![4.5, 4.5]);

        let (grads, dimg) = model_backward(&[1.0, -2.0], &cache, &s).unwrap();
        assert_eq!(grads.0[1], vec![2.0, 1.0, -4.0, -2.0, 1.0, -2.0]);
        assert_eq!(dimg.data(), &[1.0 - 6.0, 2.0 + 2.0]);
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut s = ModelState::new(ModelSpec::lenet5(32, 32, 10), 1).unwrap();
        for buf in &mut s.params_mut().0 {
            buf.fill(0.0);
        }
        let last = s.params().0.len() - 1;
        let nb = 10;
        let len = s.params().0[last].len();
        s.params_mut().0[last][len - nb..].fill(0.25);
        let img = Tensor3::from_fn(32, 32, 3, |i, j, c| (i + j + c) as f64 / 50.0);
        let (logits, _) = model_forward(&img, &s).unwrap();
        assert!(logits.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = ModelState::new(ModelSpec::toy_cnn(3), 2).unwrap();
        let img = Tensor3::from_fn(6, 6, 3, |i, j, c| ((i * 7 + j * 3 + c) % 5) as f64 - 2.0);
        let (_, cache) = model_forward(&img, &s).unwrap();
        let (g, d) = model_backward(&[0.0; 3], &cache, &s).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut s = ModelState::new(ModelSpec::toy_cnn(3), 2).unwrap();
        let img = Tensor3::zeros(6, 6, 3);
        let (_, cache) = model_forward(&img, &s).unwrap();
        let g = ParamSet::zeros_like(s.params());
        s.adam_step(&g, 0.1, AdamHyper::default()).unwrap();
        assert!(matches!(
            model_backward(&[0.0; 3], &cache, &s),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn wrong_input_shape_is_a_config_error() {
        let s = ModelState::new(ModelSpec::toy_cnn(3), 2).unwrap();
        assert!(matches!(
            model_forward(&Tensor3::zeros(5, 6, 3), &s),
            Err(Error::Config(_))
        ));
        let bad = ModelSpec {
            input: Shape::new(3, 6, 6),
            layers: vec![LayerSpec::Dense { inputs: 5, outputs: 2 }],
        };
        assert!(matches!(ModelState::new(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn lenet_parameter_counts() {
        let ten = ModelState::new(ModelSpec::lenet5(32, 32, 10), 0).unwrap();
        assert_eq!(ten.parameter_count(), 62_006);
        let hundred = ModelState::new(ModelSpec::lenet5(32, 32, 100), 0).unwrap();
        assert_eq!(hundred.parameter_count(), 69_656);
    }

    #[test]
    fn softmax_xent_examples() {
        let (loss, grad) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);

        let (loss, grad) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss < 1e-300);
        assert!(grad.iter().all(|g| g.is_finite()));

        assert!(matches!(softmax_xent(&[0.0, 1.0], 2), Err(Error::Range(_))));
    }

    #[test]
    fn softmax_xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = softmax_xent(&logits, 7).unwrap();
        let eps = 1e-5;
        for i in 0..10 {
            let mut hi = logits.clone();
            let mut lo = logits.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (softmax_xent(&hi, 7).unwrap().0 - softmax_xent(&lo, 7).unwrap().0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", grad[i]);
        }
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut s = ModelState::new(ModelSpec::toy_cnn(3), 4).unwrap();
        let before = s.params().clone();
        let g = ParamSet::zeros_like(s.params());
        s.adam_step(&g, 0.1, AdamHyper::default()).unwrap();
        assert_eq!(s.params(), &before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let like = ParamSet(vec![vec![0.0]]);
        let mut adam = Adam::new(&like, AdamHyper::default());
        let mut theta = [1.0];
        adam.step(&mut [&mut theta], &[&[1.0]], 0.1).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let like = ParamSet(vec![vec![0.0]]);
        let mut adam = Adam::new(&like, AdamHyper::default());
        let mut theta = [0.0];
        for _ in 0..100 {
            let g = 2.0 * (theta[0] - 3.0);
            adam.step(&mut [&mut theta], &[&[g]], 0.1).unwrap();
        }

        // Reference recurrence written out longhand.
        let (mut th, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (th - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(theta[0], th);
        assert!((theta[0] - 3.0).abs() < 0.1, "theta = {}", theta[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = ModelState::new(ModelSpec::toy_cnn(3), 4).unwrap();
        let g = ParamSet(vec![vec![0.0; 3]]);
        assert!(matches!(
            s.adam_step(&g, 0.1, AdamHyper::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bundled_schedules() {
        let t1 = LrSchedule::lenet(100).unwrap();
        assert_eq!(lr_at(&t1, 30, RateGroup::Model).unwrap(), 0.1);
        assert_eq!(lr_at(&t1, 50, RateGroup::Model).unwrap(), 0.1);
        assert_eq!(lr_at(&t1, 51, RateGroup::Model).unwrap(), 0.02);
        assert_eq!(lr_at(&t1, 60, RateGroup::Tprod).unwrap(), 0.004);
        let t2 = LrSchedule::deep(200).unwrap();
        assert_eq!(lr_at(&t2, 150, RateGroup::Model).unwrap(), 0.004);
        assert_eq!(lr_at(&t2, 60, RateGroup::Model).unwrap(), 0.1);
        assert_eq!(lr_at(&t2, 61, RateGroup::Model).unwrap(), 0.02);
        assert_eq!(lr_at(&t2, 161, RateGroup::Tprod).unwrap(), 0.00016);
        assert!(matches!(lr_at(&t1, 0, RateGroup::Model), Err(Error::Range(_))));
        assert!(matches!(lr_at(&t1, 101, RateGroup::Model), Err(Error::Range(_))));

        for sched in [
            t1,
            t2,
            LrSchedule::desk(20).unwrap(),
            LrSchedule::lenet(7).unwrap(),
            LrSchedule::deep(10).unwrap(),
        ] {
            for e in 1..=sched.epochs() {
                let m = lr_at(&sched, e, RateGroup::Model).unwrap();
                let t = lr_at(&sched, e, RateGroup::Tprod).unwrap();
                assert!((t - m / 5.0).abs() <= 1e-15 * m);
            }
        }
    }

    #[test]
    fn short_runs_keep_leading_stages() {
        let s = LrSchedule::deep(2).unwrap();
        assert_eq!(lr_at(&s, 1, RateGroup::Model).unwrap(), 0.1);
        assert_eq!(lr_at(&s, 2, RateGroup::Model).unwrap(), 0.02);
        let one = LrSchedule::lenet(1).unwrap();
        assert_eq!(one.stages().len(), 1);
        assert!(LrSchedule::lenet(0).is_err());
    }

    #[test]
    fn schedule_validation() {
        let gap = vec![
            Stage { first: 1, last: 3, model: 0.1, tprod: 0.02 },
            Stage { first: 5, last: 6, model: 0.1, tprod: 0.02 },
        ];
        assert!(LrSchedule::new(gap).is_err());
        let bad_ratio = vec![Stage { first: 1, last: 3, model: 0.1, tprod: 0.05 }];
        assert!(LrSchedule::new(bad_ratio).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ModelState::new(ModelSpec::toy_cnn(3), 9).unwrap();
        let mut g = ParamSet::zeros_like(s.params());
        g.0[0][0] = 1.0;
        s.adam_step(&g, 0.01, AdamHyper::default()).unwrap();
        let back = ModelState::from_checkpoint(&s.to_checkpoint(true)).unwrap();
        assert_eq!(back, s);

        let lean = ModelState::from_checkpoint(&s.to_checkpoint(false)).unwrap();
        assert_eq!(lean.params(), s.params());
        assert_eq!(lean.step_count(), 0);
        assert!(ModelState::from_checkpoint("tadaf-checkpoint v2").is_err());
    }
}
