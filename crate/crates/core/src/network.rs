//! Dense ReLU classifier: layout, initialization, plain SGD and base training.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::gradcore::{forward_mlp, GradVector};

/// Layer widths `(input, hidden.., classes)` and the initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self { layer_widths, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.layer_widths)
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out x fan_in` weights start here; biases follow.
    pub weight_offset: usize,
}

impl LayerLayout {
    pub fn bias_offset(&self) -> usize {
        self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

/// Flat weights and biases of an MLP, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    widths: Vec<usize>,
    values: Vec<f64>,
}

impl Parameters {
    pub fn from_values(widths: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        let expected = param_count(&widths);
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "widths {widths:?} need {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { widths, values })
    }

    pub fn zeros(widths: Vec<usize>) -> Result<Self> {
        let n = param_count(&widths);
        Self::from_values(widths, vec![0.0; n])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_classes(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let layer = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                };
                offset = layer.end();
                layer
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Exact equality including the sign of zero and NaN payloads.
    pub fn bitwise_eq(&self, other: &Parameters) -> bool {
        self.widths == other.widths
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Logits without recording a tape.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.input_width()
            )));
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = input.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let w = &self.values[layer.weight_offset..layer.bias_offset()];
            let b = &self.values[layer.bias_offset()..layer.end()];
            let mut next: Vec<f64> = w
                .chunks_exact(layer.fan_in)
                .zip(b)
                .map(|(row, bias)| row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + bias)
                .collect();
            if l != last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            h = next;
        }
        Ok(h)
    }
}

/// Bit-exact copy of a parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Parameters);

impl Snapshot {
    pub fn params(&self) -> &Parameters {
        &self.0
    }
}

pub fn snapshot(params: &Parameters) -> Snapshot {
    Snapshot(params.clone())
}

/// Overwrites `params` with the snapshotted state.
pub fn restore(params: &mut Parameters, snap: &Snapshot) -> Result<()> {
    if params.widths != snap.0.widths {
        return Err(Error::Shape(format!(
            "snapshot widths {:?} do not match parameters {:?}",
            snap.0.widths, params.widths
        )));
    }
    params.values.copy_from_slice(&snap.0.values);
    Ok(())
}

/// Normal(0, 1/sqrt(fan_in)) weights, zero biases, deterministic in `spec.seed`.
pub fn init_params(spec: &MlpSpec) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = Parameters::zeros(spec.layer_widths.clone()).expect("validated spec");
    for layer in params.layers() {
        let normal = Normal::new(0.0, 1.0 / (layer.fan_in as f64).sqrt()).expect("finite scale");
        for w in &mut params.values[layer.weight_offset..layer.bias_offset()] {
            *w = normal.sample(&mut rng);
        }
    }
    params
}

/// Shift-stabilized softmax.
pub fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax_class(logits: &[f64]) -> usize {
    assert!(!logits.is_empty(), "argmax of an empty vector");
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Factor that brings `norm` down to `clip_norm`; 1 when no clipping applies.
fn clip_factor(norm: f64, clip_norm: f64) -> f64 {
    if clip_norm > 0.0 && clip_norm.is_finite() && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// Scales `grads` in place so its L2 norm is at most `clip_norm` (0 or ∞ disables).
pub fn clip_grad_norm(grads: &mut GradVector, clip_norm: f64) {
    let f = clip_factor(grads.l2_norm(), clip_norm);
    if f != 1.0 {
        grads.scale(f);
    }
}

fn check_step_args(params: &Parameters, grads: &GradVector, lr: f64, clip_norm: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters have {}",
            grads.len(),
            params.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    if !(clip_norm >= 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm must be >= 0, got {clip_norm}")));
    }
    Ok(())
}

/// In-place `θ ← θ − lr·clip(g)`; no momentum, no weight decay.
pub fn sgd_step_in_place(params: &mut Parameters, grads: &GradVector, lr: f64, clip_norm: f64) -> Result<()> {
    check_step_args(params, grads, lr, clip_norm)?;
    if lr == 0.0 {
        return Ok(());
    }
    let step = lr * clip_factor(grads.l2_norm(), clip_norm);
    for (p, g) in params.values.iter_mut().zip(grads.as_slice()) {
        *p -= step * g;
    }
    Ok(())
}

pub fn sgd_step(params: &Parameters, grads: &GradVector, lr: f64, clip_norm: f64) -> Result<Parameters> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, lr, clip_norm)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Cross-entropy of one sample and its parameter gradient.
pub fn cross_entropy_grad(params: &Parameters, sample: &LabeledSample) -> Result<(f64, GradVector)> {
    let k = params.num_classes();
    if sample.label >= k {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {k} classes",
            sample.label
        )));
    }
    let fwd = forward_mlp(params, &sample.features)?;
    let mut tape = fwd.tape;
    let lse = tape.logsumexp(fwd.logits);
    let mut onehot = vec![0.0; k];
    onehot[sample.label] = 1.0;
    let target = tape.weighted_sum(fwd.logits, &onehot);
    let loss = tape.sub(lse, target);
    let value = tape.scalar(loss)?;
    Ok((value, tape.backward(loss)?))
}

pub fn accuracy(params: &Parameters, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        if argmax_class(&params.logits(&s.features)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch SGD on mean cross-entropy, starting from [`init_params`].
pub fn train_base(spec: &MlpSpec, data: &[LabeledSample], cfg: &TrainConfig) -> Result<(Parameters, TrainReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let k = spec.num_classes();
    if let Some(bad) = data.iter().find(|s| s.label >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {k} classes",
            bad.label
        )));
    }

    let mut params = init_params(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = GradVector::zeros(params.len());
            for &i in batch {
                let (loss, g) = cross_entropy_grad(&params, &data[i])?;
                epoch_loss += loss;
                grad.axpy(1.0, &g)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            sgd_step_in_place(&mut params, &grad, cfg.lr, cfg.clip_norm)?;
        }
        final_loss = epoch_loss / data.len() as f64;
        if !final_loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
    }

    let report = TrainReport {
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: accuracy(&params, data)?,
    };
    Ok((params, report))
}

const CHECKPOINT_MAGIC: &str = "focus-checkpoint 1";

/// Text checkpoint: magic line, `widths`, `seed`, `count`, then one value per line.
pub fn write_checkpoint<W: Write>(mut out: W, spec: &MlpSpec, params: &Parameters) -> Result<()> {
    if spec.layer_widths != params.widths {
        return Err(Error::Shape("checkpoint spec and parameters disagree on widths".into()));
    }
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
    writeln!(out, "widths {}", widths.join(" "))?;
    writeln!(out, "seed {}", spec.seed)?;
    writeln!(out, "count {}", params.len())?;
    for v in &params.values {
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(MlpSpec, Parameters)> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("missing {what}")))
    };
    if next("header")?.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a focus checkpoint".into()));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| Error::Format(format!("expected `{key} ...`, found `{line}`")))
    };
    let bad = |what: &str| Error::Format(format!("unparsable {what}"));
    let widths: Vec<usize> = field(next("widths")?, "widths")?
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| bad("width")))
        .collect::<Result<_>>()?;
    let seed: u64 = field(next("seed")?, "seed")?.trim().parse().map_err(|_| bad("seed"))?;
    let count: usize = field(next("count")?, "count")?.trim().parse().map_err(|_| bad("count"))?;
    let spec = MlpSpec::new(widths, seed).map_err(|e| Error::Format(e.to_string()))?;
    if count != spec.num_params() {
        return Err(Error::Format(format!(
            "count {count} does not match widths ({} parameters)",
            spec.num_params()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(next("parameter value")?.trim().parse::<f64>().map_err(|_| bad("parameter value"))?);
    }
    let params = Parameters::from_values(spec.layer_widths.clone(), values)?;
    Ok((spec, params))
}
