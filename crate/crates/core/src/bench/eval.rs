//! Metrics over the uncertain subset of a test set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::focus::{assess, focus_predict_in_place, FocusConfig, FocusOutcome};
use crate::network::Parameters;

/// Default cap on uncertain samples evaluated per configuration.
pub const DEFAULT_MAX_UNCERTAIN: usize = 20_000;

/// Splits sample indices by `Δ₁,₂ < d12` (uncertain) versus the rest.
pub fn partition_uncertain(params: &Parameters, data: &[LabeledSample], d12: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let gaps = data
        .par_iter()
        .map(|s| assess(params, &s.features).map(|a| a.delta12))
        .collect::<Result<Vec<f64>>>()?;
    let (uncertain, certain): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| gaps[i] < d12);
    Ok((uncertain, certain))
}

/// Rank of `label` among the logits, ties broken toward the lower class index.
fn label_rank(logits: &[f64], label: usize) -> usize {
    let zy = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &z)| z > zy || (z == zy && c < label))
        .count()
}

/// Fraction of samples whose label is among the `k` highest logits.
pub fn topk_accuracy(params: &Parameters, data: &[LabeledSample], k: usize) -> Result<f64> {
    let classes = params.num_classes();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={classes}, got {k}")));
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .par_iter()
        .map(|s| params.logits(&s.features).map(|z| usize::from(label_rank(&z, s.label) < k)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Top-k accuracies on the uncertain subset for each `k` in `ks`.
pub fn topk_on_uncertain(params: &Parameters, data: &[LabeledSample], d12: f64, ks: &[usize]) -> Result<TopkRow> {
    let (idx, _) = partition_uncertain(params, data, d12)?;
    let subset: Vec<LabeledSample> = idx.iter().map(|&i| data[i].clone()).collect();
    let accuracies = ks
        .iter()
        .map(|&k| topk_accuracy(params, &subset, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TopkRow {
        d12,
        n_uncertain: subset.len(),
        ks: ks.to_vec(),
        accuracies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub d12: f64,
    pub n_uncertain: usize,
    pub ks: Vec<usize>,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Gated,
    /// Optimization ran and the prediction stayed the same.
    Unchanged,
    /// Wrong before, right after.
    Fixed,
    /// Right before, wrong after.
    Broken,
    /// Changed from one wrong class to another.
    Swapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub label: usize,
    pub original: usize,
    pub refined: usize,
    pub delta12: f64,
    pub diverged: bool,
    pub verdict: Verdict,
}

impl SampleOutcome {
    pub fn from_focus(index: usize, label: usize, out: &FocusOutcome) -> Self {
        let verdict = if out.gated {
            Verdict::Gated
        } else if !out.changed() {
            Verdict::Unchanged
        } else if out.refined_prediction == label {
            Verdict::Fixed
        } else if out.original_prediction == label {
            Verdict::Broken
        } else {
            Verdict::Swapped
        };
        Self {
            index,
            label,
            original: out.original_prediction,
            refined: out.refined_prediction,
            delta12: out.delta12,
            diverged: out.diverged,
            verdict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_uncertain: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_uncertain: DEFAULT_MAX_UNCERTAIN,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub gated: usize,
    pub unchanged: usize,
    pub fixed: usize,
    pub broken: usize,
    pub swapped: usize,
    pub diverged: usize,
}

impl VerdictCounts {
    pub fn tally(outcomes: &[SampleOutcome]) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            match o.verdict {
                Verdict::Gated => c.gated += 1,
                Verdict::Unchanged => c.unchanged += 1,
                Verdict::Fixed => c.fixed += 1,
                Verdict::Broken => c.broken += 1,
                Verdict::Swapped => c.swapped += 1,
            }
            c.diverged += usize::from(o.diverged);
        }
        c
    }

    pub fn changed(&self) -> usize {
        self.fixed + self.broken + self.swapped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    /// Samples evaluated, after the cap.
    pub n_uncertain: usize,
    /// Uncertain samples before the cap.
    pub n_uncertain_available: usize,
    /// `n_uncertain_available / n_total`
    pub fraction_uncertain: f64,
    /// Nothing to evaluate; accuracies are reported as 0.
    pub empty: bool,
    pub acc_base: f64,
    pub acc_opt: f64,
    pub delta_acc: f64,
    pub counts: VerdictCounts,
    pub config: FocusConfig,
    pub options: EvalOptions,
    pub outcomes: Vec<SampleOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(
        n_total: usize,
        n_uncertain_available: usize,
        outcomes: Vec<SampleOutcome>,
        config: &FocusConfig,
        options: &EvalOptions,
    ) -> Self {
        let n = outcomes.len();
        let (acc_base, acc_opt) = if n == 0 {
            (0.0, 0.0)
        } else {
            let base = outcomes.iter().filter(|o| o.original == o.label).count();
            let opt = outcomes.iter().filter(|o| o.refined == o.label).count();
            (base as f64 / n as f64, opt as f64 / n as f64)
        };
        Self {
            n_total,
            n_uncertain: n,
            n_uncertain_available,
            fraction_uncertain: if n_total == 0 { 0.0 } else { n_uncertain_available as f64 / n_total as f64 },
            empty: n == 0,
            acc_base,
            acc_opt,
            delta_acc: acc_opt - acc_base,
            counts: VerdictCounts::tally(&outcomes),
            config: config.clone(),
            options: options.clone(),
            outcomes,
        }
    }

    /// The report without per-sample rows.
    pub fn summary(&self) -> EvalReport {
        EvalReport {
            outcomes: Vec::new(),
            ..self.clone()
        }
    }
}

/// Uncertain indices under `d12`, truncated to the first `max_uncertain` in data order.
pub fn uncertain_indices(params: &Parameters, data: &[LabeledSample], d12: f64, max_uncertain: usize) -> Result<(Vec<usize>, usize)> {
    let (mut idx, _) = partition_uncertain(params, data, d12)?;
    let available = idx.len();
    idx.truncate(max_uncertain);
    Ok((idx, available))
}

/// Runs the refinement on every uncertain sample.
///
/// Samples are processed in parallel on private copies of `params`; results
/// are merged in index order, so the report does not depend on thread count.
pub fn evaluate_config(params: &Parameters, data: &[LabeledSample], config: &FocusConfig, options: &EvalOptions) -> Result<EvalReport> {
    config.validate(params.num_classes())?;
    let (idx, available) = uncertain_indices(params, data, config.d12, options.max_uncertain)?;
    let outcomes = idx
        .par_iter()
        .map_init(
            || params.clone(),
            |work, &i| {
                let s = &data[i];
                focus_predict_in_place(work, &s.features, config).map(|o| SampleOutcome::from_focus(i, s.label, &o))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(data.len(), available, outcomes, config, options))
}

/// Runs `f` on a pool of `jobs` threads (0 picks rayon's default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
