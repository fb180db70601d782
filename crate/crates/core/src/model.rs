//! Toy dropout classifier: linear softmax, optionally with one ReLU hidden
//! layer, with hand-written gradients and SGD/Adam updates.
//!
//! Parameters live in one flat vector so that EMA, restoration and the
//! optimizer can treat them as a plain list of scalars. Layout:
//! `W1 (in×h1, row-major) | b1 | [W2 (h×C) | b2]`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::rng_for;
use crate::rng::standard_normal;

pub const LOGIT_CLAMP: f64 = 50.0;
pub const PROB_FLOOR: f64 = 1e-30;
const MAGIC: &[u8; 4] = b"DBMP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    /// Width of the optional ReLU hidden layer.
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl ModelDims {
    pub fn linear(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: None,
            classes,
        }
    }

    pub fn with_hidden(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: Some(hidden),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(invalid("model input dimension must be at least 1"));
        }
        if self.classes < 2 {
            return Err(invalid("model needs at least 2 classes"));
        }
        if self.hidden == Some(0) {
            return Err(invalid("hidden width must be at least 1"));
        }
        Ok(())
    }

    fn first_out(&self) -> usize {
        self.hidden.unwrap_or(self.classes)
    }

    pub fn num_params(&self) -> usize {
        let h1 = self.first_out();
        let first = self.input * h1 + h1;
        match self.hidden {
            Some(h) => first + h * self.classes + self.classes,
            None => first,
        }
    }

    /// Units subject to dropout: the inputs, then the hidden units.
    pub fn dropout_units(&self) -> usize {
        self.input + self.hidden.unwrap_or(0)
    }
}

/// Weights and biases of the classifier, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![0.0; dims.num_params()],
        })
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = rng_for(seed, &[crate::rng::tag::INIT]);
        let h1 = dims.first_out();
        let s1 = 1.0 / (dims.input as f64).sqrt();
        for w in &mut p.data[..dims.input * h1] {
            *w = s1 * standard_normal(&mut rng);
        }
        if let Some(h) = dims.hidden {
            let off = dims.input * h + h;
            let s2 = 1.0 / (h as f64).sqrt();
            for w in &mut p.data[off..off + h * dims.classes] {
                *w = s2 * standard_normal(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn from_vec(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        check_dim("parameter count", dims.num_params(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("model parameters must be finite"));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_dims(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid(format!(
                "model dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Squared Euclidean distance between two parameter vectors.
    pub fn dist_sq(&self, other: &ModelParams) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `(weights, bias)` of the first layer.
    fn layer1(&self) -> (&[f64], &[f64]) {
        let h1 = self.dims.first_out();
        let nw = self.dims.input * h1;
        (&self.data[..nw], &self.data[nw..nw + h1])
    }

    fn layer2(&self) -> Option<(&[f64], &[f64])> {
        let h = self.dims.hidden?;
        let off = self.dims.input * h + h;
        let nw = h * self.dims.classes;
        Some((
            &self.data[off..off + nw],
            &self.data[off + nw..off + nw + self.dims.classes],
        ))
    }

    /// Writes the 16-byte header followed by little-endian parameters.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.input as u32).to_le_bytes())?;
        w.write_all(&(self.dims.hidden.unwrap_or(0) as u32).to_le_bytes())?;
        w.write_all(&(self.dims.classes as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| invalid(format!("checkpoint header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(invalid("checkpoint has a bad magic number"));
        }
        let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let hidden = match field(8) {
            0 => None,
            h => Some(h),
        };
        let dims = ModelDims {
            input: field(4),
            hidden,
            classes: field(12),
        };
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.num_params());
        let mut buf = [0u8; 8];
        for _ in 0..dims.num_params() {
            r.read_exact(&mut buf)
                .map_err(|e| invalid(format!("checkpoint body: {e}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| invalid(format!("checkpoint body: {e}")))?;
        if !rest.is_empty() {
            return Err(invalid(format!(
                "checkpoint has {} trailing bytes",
                rest.len()
            )));
        }
        Self::from_vec(dims, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

/// One dropout draw over the inputs (and hidden units, if any).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    /// `true` keeps the unit.
    pub keep: Vec<bool>,
    pub rate: f64,
    pub seed: u64,
    pub draw: u64,
}

impl DropoutMask {
    /// Draws a mask deterministically from `(seed, draw)`.
    pub fn sample(dims: ModelDims, rate: f64, seed: u64, draw: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let mut rng = rng_for(seed, &[draw]);
        let keep = (0..dims.dropout_units())
            .map(|_| rng.gen::<f64>() >= rate)
            .collect();
        Ok(Self {
            keep,
            rate,
            seed,
            draw,
        })
    }

    /// Keeps every unit. Uses rate 0 so surviving units are not rescaled.
    pub fn keep_all(dims: ModelDims) -> Self {
        Self {
            keep: vec![true; dims.dropout_units()],
            rate: 0.0,
            seed: 0,
            draw: 0,
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest entry; first wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `−Σ target · log(max(student, 1e-30))`.
pub fn cross_entropy(target: &[f64], student: &[f64]) -> f64 {
    -target
        .iter()
        .zip(student)
        .map(|(t, s)| t * s.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Intermediate values kept for the backward pass.
struct Trace {
    /// Masked, rescaled input.
    x_in: Vec<f64>,
    /// Post-ReLU, post-dropout hidden activations.
    h_out: Vec<f64>,
    /// Pre-ReLU hidden activations.
    h_pre: Vec<f64>,
    raw_logits: Vec<f64>,
    pred: Prediction,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut z = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (zj, &wij) in z.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *zj += xi * wij;
        }
    }
    z
}

fn trace(params: &ModelParams, x: &[f64], mask: Option<&DropoutMask>) -> Result<Trace> {
    let dims = params.dims;
    check_dim("forward input", dims.input, x.len())?;
    if let Some(m) = mask {
        check_dim("dropout mask", dims.dropout_units(), m.keep.len())?;
        if !(0.0..1.0).contains(&m.rate) {
            return Err(invalid(format!("dropout rate {} outside [0, 1)", m.rate)));
        }
    }
    let x_in: Vec<f64> = match mask {
        Some(m) => x
            .iter()
            .zip(&m.keep)
            .map(|(&v, &k)| if k { v * m.scale() } else { 0.0 })
            .collect(),
        None => x.to_vec(),
    };
    let (w1, b1) = params.layer1();
    let z1 = affine(w1, b1, &x_in);
    let (h_pre, h_out, raw_logits) = match params.layer2() {
        Some((w2, b2)) => {
            let mut h: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
            if let Some(m) = mask {
                for (hv, &k) in h.iter_mut().zip(&m.keep[dims.input..]) {
                    *hv = if k { *hv * m.scale() } else { 0.0 };
                }
            }
            let z2 = affine(w2, b2, &h);
            (z1, h, z2)
        }
        None => (Vec::new(), Vec::new(), z1),
    };
    let logits: Vec<f64> = raw_logits
        .iter()
        .map(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        .collect();
    let probs = softmax(&logits);
    Ok(Trace {
        x_in,
        h_out,
        h_pre,
        raw_logits,
        pred: Prediction { logits, probs },
    })
}

pub fn forward(params: &ModelParams, x: &[f64], mask: Option<&DropoutMask>) -> Result<Prediction> {
    Ok(trace(params, x, mask)?.pred)
}

/// Backpropagates a gradient with respect to the (clamped) logits.
fn backprop(params: &ModelParams, t: &Trace, mask: Option<&DropoutMask>, mut dz: Vec<f64>) -> ModelParams {
    let dims = params.dims;
    for (g, z) in dz.iter_mut().zip(&t.raw_logits) {
        if z.abs() > LOGIT_CLAMP {
            *g = 0.0;
        }
    }
    let mut g = ModelParams {
        dims,
        data: vec![0.0; params.data.len()],
    };
    let outer = |dst: &mut [f64], a: &[f64], b: &[f64]| {
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (d, &bj) in dst[i * b.len()..(i + 1) * b.len()].iter_mut().zip(b) {
                *d = ai * bj;
            }
        }
    };
    match dims.hidden {
        None => {
            let nw = dims.input * dims.classes;
            outer(&mut g.data[..nw], &t.x_in, &dz);
            g.data[nw..].copy_from_slice(&dz);
        }
        Some(h) => {
            let (w2, _) = params.layer2().expect("hidden layer present");
            let off = dims.input * h + h;
            let nw2 = h * dims.classes;
            outer(&mut g.data[off..off + nw2], &t.h_out, &dz);
            g.data[off + nw2..].copy_from_slice(&dz);

            // Through W2, the hidden dropout and the ReLU.
            let mut dh: Vec<f64> = (0..h)
                .map(|i| {
                    w2[i * dims.classes..(i + 1) * dims.classes]
                        .iter()
                        .zip(&dz)
                        .map(|(w, d)| w * d)
                        .sum()
                })
                .collect();
            for (i, dhi) in dh.iter_mut().enumerate() {
                let mut scale = if t.h_pre[i] > 0.0 { 1.0 } else { 0.0 };
                if let Some(m) = mask {
                    scale *= if m.keep[dims.input + i] { m.scale() } else { 0.0 };
                }
                *dhi *= scale;
            }
            let nw1 = dims.input * h;
            outer(&mut g.data[..nw1], &t.x_in, &dh);
            g.data[nw1..nw1 + h].copy_from_slice(&dh);
        }
    }
    g
}

/// Gradient of `cross_entropy(target, forward(params, x, mask))`.
pub fn grad(
    params: &ModelParams,
    x: &[f64],
    target: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<ModelParams> {
    check_dim("target length", params.dims.classes, target.len())?;
    let t = trace(params, x, mask)?;
    Ok(backprop(params, &t, mask, ce_logit_grad(target, &t.pred.probs)))
}

/// Like [`grad`], also returning the loss and prediction.
pub fn loss_and_grad(
    params: &ModelParams,
    x: &[f64],
    target: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<(f64, Prediction, ModelParams)> {
    check_dim("target length", params.dims.classes, target.len())?;
    let t = trace(params, x, mask)?;
    let loss = cross_entropy(target, &t.pred.probs);
    let g = backprop(params, &t, mask, ce_logit_grad(target, &t.pred.probs));
    Ok((loss, t.pred, g))
}

/// `∂CE/∂z_k = Σ_y t_y·[s_y ≥ floor]·(p_k − δ_yk)`. Classes whose probability
/// sits under the log floor contribute a constant and hence no gradient.
fn ce_logit_grad(target: &[f64], probs: &[f64]) -> Vec<f64> {
    let active: Vec<bool> = probs.iter().map(|&p| p >= PROB_FLOOR).collect();
    let mass: f64 = target
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(t, _)| t)
        .sum();
    probs
        .iter()
        .zip(target)
        .zip(&active)
        .map(|((p, t), &a)| mass * p - if a { *t } else { 0.0 })
        .collect()
}

/// Entropy of the model's own prediction and its gradient.
pub fn entropy_and_grad(
    params: &ModelParams,
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<(f64, Prediction, ModelParams)> {
    let t = trace(params, x, mask)?;
    let p = &t.pred.probs;
    let h = entropy(p);
    // ∂H/∂z_k = −p_k (log p_k + H)
    let dz = p
        .iter()
        .map(|&pk| if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 })
        .collect();
    let g = backprop(params, &t, mask, dz);
    Ok((h, t.pred, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay (AdamW style); 0 disables.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("adam epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, dims: ModelDims) -> Self {
        let n = dims.num_params();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Applies one update. On a non-finite gradient nothing changes.
pub fn optimizer_step(
    params: &ModelParams,
    grad: &ModelParams,
    state: &mut OptimizerState,
) -> Result<ModelParams> {
    params.check_same_dims(grad)?;
    check_dim("optimizer moments", params.len(), state.m.len())?;
    if !grad.is_finite() {
        return Err(Error::PoisonedUpdate("non-finite gradient".into()));
    }
    let c = state.config;
    let mut out = params.clone();
    match c.kind {
        OptimizerKind::Sgd => {
            for (p, g) in out.data.iter_mut().zip(&grad.data) {
                *p -= c.lr * (g + c.weight_decay * *p);
            }
        }
        OptimizerKind::Adam => {
            let t = state.step + 1;
            let bc1 = 1.0 - c.beta1.powi(t as i32);
            let bc2 = 1.0 - c.beta2.powi(t as i32);
            for i in 0..out.data.len() {
                let g = grad.data[i];
                let m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
                let v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
                state.m[i] = m;
                state.v[i] = v;
                let p = &mut out.data[i];
                *p -= c.lr * c.weight_decay * *p;
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            }
        }
    }
    state.step += 1;
    Ok(out)
}

/// Adds `scale · g` into `acc`.
pub fn accumulate(acc: &mut ModelParams, g: &ModelParams, scale: f64) {
    for (a, b) in acc.data.iter_mut().zip(&g.data) {
        *a += scale * b;
    }
}
