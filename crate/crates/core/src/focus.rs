//! Uncertainty-gated refinement of a single prediction.
//!
//! The model first predicts as usual. If the gap between the two most likely
//! classes is at least `d12`, that prediction stands. Otherwise the `n_f` most
//! likely classes become the focus set, a private copy of the parameters takes
//! `T` SGD steps on a focus loss, and the argmax of the refined logits is
//! returned. The caller's parameters are never left modified.
//!
//! Loss variants, all on raw logits `f`:
//!
//! - `ifo`: `-Σ_{c∈F} p̃_c f_c` (weighted) or `-(1/|F|) Σ_{c∈F} f_c`
//! - `dofo`: mean of the out-of-focus logits
//! - `entropy`: Shannon entropy of `softmax(f)`
//! - `ce_focus`: `logsumexp(f) - Σ_{c∈F} w_c f_c`, with `w_c` as for `ifo`
//!
//! `p̃` are softmax probabilities treated as constants during backpropagation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{forward_mlp, GradVector, NodeId, Tape};
use crate::network::{argmax_class, restore, sgd_step_in_place, snapshot, softmax_stable, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ifo,
    Dofo,
    Entropy,
    CeFocus,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ifo, LossKind::Dofo, LossKind::Entropy, LossKind::CeFocus];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ifo => "ifo",
            LossKind::Dofo => "dofo",
            LossKind::Entropy => "entropy",
            LossKind::CeFocus => "ce_focus",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusConfig {
    /// Learning rate of the refinement step(s).
    pub eta: f64,
    /// Number of SGD steps.
    pub iterations: usize,
    /// Number of focus classes.
    pub n_focus: usize,
    /// Samples with a top-1/top-2 probability gap at or above this are left alone.
    pub d12: f64,
    pub loss: LossKind,
    /// Weight focus logits by their detached probabilities (`ifo`, `ce_focus`).
    pub weighted: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for FocusConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            iterations: 1,
            n_focus: 2,
            d12: 0.16,
            loss: LossKind::Ifo,
            weighted: true,
            clip_norm: 1.0,
        }
    }
}

impl FocusConfig {
    /// Checks the config on its own and against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.d12) {
            return Err(Error::InvalidArgument(format!("d12 must lie in [0, 1], got {}", self.d12)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        if self.n_focus < 2 {
            return Err(Error::InvalidArgument(format!("n_f must be at least 2, got {}", self.n_focus)));
        }
        let max = if self.loss == LossKind::Dofo {
            num_classes.saturating_sub(1)
        } else {
            num_classes
        };
        if self.n_focus > max {
            return Err(Error::InvalidArgument(format!(
                "n_f = {} too large for {num_classes} classes with loss {}",
                self.n_focus, self.loss
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusOutcome {
    /// Confident sample; no optimization ran.
    pub gated: bool,
    /// A step produced non-finite values; the original prediction is returned.
    pub diverged: bool,
    pub original_prediction: usize,
    pub refined_prediction: usize,
    pub delta12: f64,
    pub focus_set: Vec<usize>,
    /// Loss at the unmodified parameters (0 when gated).
    pub loss_value: f64,
    pub steps: usize,
}

impl FocusOutcome {
    pub fn changed(&self) -> bool {
        self.refined_prediction != self.original_prediction
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("probabilities must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Top-1 minus top-2 probability.
pub fn uncertainty_gap(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(first - second)
}

/// Indices of the `n_f` largest probabilities, descending, ties to the lower index.
pub fn select_focus(probs: &[f64], n_f: usize) -> Result<Vec<usize>> {
    if n_f > probs.len() {
        return Err(Error::InvalidArgument(format!(
            "n_f = {n_f} exceeds {} classes",
            probs.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower indices first among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(n_f);
    Ok(order)
}

fn check_focus(focus: &[usize], num_classes: usize) -> Result<()> {
    if focus.is_empty() {
        return Err(Error::InvalidArgument("focus set is empty".into()));
    }
    if let Some(&c) = focus.iter().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!("focus class {c} out of range")));
    }
    Ok(())
}

/// Per-class weights `w_c` on focus logits: `p̃_c` or `1/|F|`.
fn focus_weights(num_classes: usize, focus: &[usize], probs_detached: &[f64], weighted: bool) -> Result<Vec<f64>> {
    check_focus(focus, num_classes)?;
    if weighted && probs_detached.len() != num_classes {
        return Err(Error::Shape(format!(
            "{} weights for {num_classes} logits",
            probs_detached.len()
        )));
    }
    let mut w = vec![0.0; num_classes];
    for &c in focus {
        w[c] = if weighted {
            probs_detached[c]
        } else {
            1.0 / focus.len() as f64
        };
    }
    Ok(w)
}

/// Increase focus logits.
pub fn loss_ifo(tape: &mut Tape, logits: NodeId, probs_detached: &[f64], focus: &[usize], weighted: bool) -> Result<NodeId> {
    let k = tape.value(logits).len();
    let w: Vec<f64> = focus_weights(k, focus, probs_detached, weighted)?
        .into_iter()
        .map(|v| -v)
        .collect();
    Ok(tape.weighted_sum(logits, &w))
}

/// Decrease out-of-focus logits.
pub fn loss_dofo(tape: &mut Tape, logits: NodeId, focus: &[usize], num_classes: usize) -> Result<NodeId> {
    if tape.value(logits).len() != num_classes {
        return Err(Error::Shape(format!(
            "{} logits for {num_classes} classes",
            tape.value(logits).len()
        )));
    }
    check_focus(focus, num_classes)?;
    let mut w = vec![1.0; num_classes];
    for &c in focus {
        w[c] = 0.0;
    }
    let outside = w.iter().filter(|&&v| v > 0.0).count();
    if outside == 0 {
        return Err(Error::InvalidArgument("focus set covers every class".into()));
    }
    for v in &mut w {
        *v /= outside as f64;
    }
    Ok(tape.weighted_sum(logits, &w))
}

/// Entropy of `softmax(logits)` via `log p = f - logsumexp(f)`.
pub fn loss_entropy(tape: &mut Tape, logits: NodeId) -> NodeId {
    let lse = tape.logsumexp(logits);
    let log_p = tape.sub_scalar(logits, lse);
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p);
    let s = tape.sum(plogp);
    tape.neg(s)
}

/// Cross-entropy averaged (or probability-weighted) over the focus classes.
pub fn loss_ce_focus(tape: &mut Tape, logits: NodeId, focus: &[usize], probs_detached: &[f64], weighted: bool) -> Result<NodeId> {
    let k = tape.value(logits).len();
    let w = focus_weights(k, focus, probs_detached, weighted)?;
    let lse = tape.logsumexp(logits);
    let target = tape.weighted_sum(logits, &w);
    Ok(tape.sub(lse, target))
}

/// Records the configured loss on top of `logits`.
pub fn build_loss(
    tape: &mut Tape,
    logits: NodeId,
    kind: LossKind,
    weighted: bool,
    focus: &[usize],
    probs_detached: &[f64],
) -> Result<NodeId> {
    match kind {
        LossKind::Ifo => loss_ifo(tape, logits, probs_detached, focus, weighted),
        LossKind::Dofo => {
            let k = tape.value(logits).len();
            loss_dofo(tape, logits, focus, k)
        }
        LossKind::Entropy => Ok(loss_entropy(tape, logits)),
        LossKind::CeFocus => loss_ce_focus(tape, logits, focus, probs_detached, weighted),
    }
}

/// Loss value and parameter gradient for one sample, weights taken from the current softmax.
pub fn focus_loss_grad(
    params: &Parameters,
    input: &[f64],
    kind: LossKind,
    weighted: bool,
    focus: &[usize],
) -> Result<(f64, GradVector)> {
    let fwd = forward_mlp(params, input)?;
    let probs = softmax_stable(fwd.logits());
    let mut tape = fwd.tape;
    let loss = build_loss(&mut tape, fwd.logits, kind, weighted, focus, &probs)?;
    let value = tape.scalar(loss)?;
    Ok((value, tape.backward(loss)?))
}

/// Initial forward pass: logits, probabilities and the gate quantities.
#[derive(Debug, Clone)]
pub struct Assessment {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub prediction: usize,
    pub delta12: f64,
}

pub fn assess(params: &Parameters, input: &[f64]) -> Result<Assessment> {
    let logits = params.logits(input)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument("base model produced non-finite logits".into()));
    }
    let probs = softmax_stable(&logits);
    let delta12 = uncertainty_gap(&probs)?;
    let prediction = argmax_class(&logits);
    Ok(Assessment {
        logits,
        probs,
        prediction,
        delta12,
    })
}

/// Refines one prediction, working on a private copy of `params`.
pub fn focus_predict(params: &Parameters, input: &[f64], config: &FocusConfig) -> Result<FocusOutcome> {
    let mut work = params.clone();
    focus_predict_in_place(&mut work, input, config)
}

/// Same as [`focus_predict`] but steps `params` directly and restores it before returning.
///
/// Lets a worker reuse one scratch copy of the model across many samples.
pub fn focus_predict_in_place(params: &mut Parameters, input: &[f64], config: &FocusConfig) -> Result<FocusOutcome> {
    config.validate(params.num_classes())?;
    let initial = assess(params, input)?;
    let mut outcome = FocusOutcome {
        gated: true,
        diverged: false,
        original_prediction: initial.prediction,
        refined_prediction: initial.prediction,
        delta12: initial.delta12,
        focus_set: Vec::new(),
        loss_value: 0.0,
        steps: 0,
    };
    if initial.delta12 >= config.d12 {
        return Ok(outcome);
    }
    outcome.gated = false;
    outcome.focus_set = select_focus(&initial.probs, config.n_focus)?;

    let snap = snapshot(params);
    let result = run_steps(params, input, config, &mut outcome);
    restore(params, &snap)?;

    match result {
        Ok(Some(prediction)) => outcome.refined_prediction = prediction,
        Ok(None) => {
            outcome.diverged = true;
            outcome.refined_prediction = outcome.original_prediction;
        }
        Err(e) => return Err(e),
    }
    Ok(outcome)
}

/// Runs the refinement steps; `None` means a non-finite value appeared.
fn run_steps(params: &mut Parameters, input: &[f64], config: &FocusConfig, outcome: &mut FocusOutcome) -> Result<Option<usize>> {
    for step in 0..config.iterations {
        let (loss, grad) = focus_loss_grad(params, input, config.loss, config.weighted, &outcome.focus_set)?;
        if step == 0 {
            outcome.loss_value = loss;
        }
        if !loss.is_finite() || !grad.is_finite() {
            return Ok(None);
        }
        sgd_step_in_place(params, &grad, config.eta, config.clip_norm)?;
        outcome.steps += 1;
        if !params.is_finite() {
            return Ok(None);
        }
    }
    let logits = params.logits(input)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Ok(None);
    }
    Ok(Some(argmax_class(&logits)))
}
