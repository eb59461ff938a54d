//! Learning-rate sweeps and the single-step versus multi-step comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::focus::{assess, focus_loss_grad, select_focus, FocusConfig, FocusOutcome};
use crate::network::{argmax_class, clip_grad_norm, Parameters};

use super::eval::{evaluate_config, uncertain_indices, EvalOptions, EvalReport, SampleOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub lr: f64,
    pub report: EvalReport,
}

/// `base_lr · factor^j` for `j` in `0..count`.
pub fn lr_grid(base_lr: f64, factor: f64, count: usize) -> Result<Vec<f64>> {
    if !(base_lr >= 0.0 && base_lr.is_finite()) || !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need base_lr >= 0 and factor >= 1, got {base_lr} and {factor}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one learning rate".into()));
    }
    Ok((0..count).map(|j| base_lr * factor.powi(j as i32)).collect())
}

/// Outcomes of one sample at every rate in `lrs`, from a single gradient.
///
/// The clipped gradient is computed once at the base parameters; the rates
/// are visited in order and each visit adds only the increment since the
/// previous rate before a fresh forward pass.
fn replay_sample(work: &mut Parameters, input: &[f64], config: &FocusConfig, lrs: &[f64]) -> Result<Vec<FocusOutcome>> {
    let initial = assess(work, input)?;
    let base = FocusOutcome {
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
        return Ok(vec![base; lrs.len()]);
    }
    let focus = select_focus(&initial.probs, config.n_focus)?;
    let (loss, mut grad) = focus_loss_grad(work, input, config.loss, config.weighted, &focus)?;
    let started = FocusOutcome {
        gated: false,
        focus_set: focus,
        loss_value: loss,
        ..base
    };
    if !loss.is_finite() || !grad.is_finite() {
        let diverged = FocusOutcome { diverged: true, ..started };
        return Ok(vec![diverged; lrs.len()]);
    }
    clip_grad_norm(&mut grad, config.clip_norm);

    let saved = work.values().to_vec();
    let mut applied = 0.0;
    let mut out = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        for (p, g) in work.values_mut().iter_mut().zip(grad.as_slice()) {
            *p -= (lr - applied) * g;
        }
        applied = lr;
        let logits = work.logits(input)?;
        let finite = work.is_finite() && logits.iter().all(|z| z.is_finite());
        out.push(FocusOutcome {
            diverged: !finite,
            refined_prediction: if finite { argmax_class(&logits) } else { started.original_prediction },
            steps: 1,
            ..started.clone()
        });
    }
    work.values_mut().copy_from_slice(&saved);
    Ok(out)
}

/// One report per learning rate, using the single-gradient replay.
pub fn lr_sweep(
    params: &Parameters,
    data: &[LabeledSample],
    base_config: &FocusConfig,
    lrs: &[f64],
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    base_config.validate(params.num_classes())?;
    if base_config.iterations != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient replay needs a single iteration, got {}",
            base_config.iterations
        )));
    }
    if lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) || lrs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("learning rates must be finite, nonnegative and ascending".into()));
    }
    let (idx, available) = uncertain_indices(params, data, base_config.d12, options.max_uncertain)?;
    let per_sample = idx
        .par_iter()
        .map_init(|| params.clone(), |work, &i| replay_sample(work, &data[i].features, base_config, lrs))
        .collect::<Result<Vec<_>>>()?;
    Ok(lrs
        .iter()
        .enumerate()
        .map(|(j, &lr)| {
            let outcomes = idx
                .iter()
                .zip(&per_sample)
                .map(|(&i, outs)| SampleOutcome::from_focus(i, data[i].label, &outs[j]))
                .collect();
            let config = FocusConfig { eta: lr, ..base_config.clone() };
            SweepPoint {
                index: j,
                lr,
                report: EvalReport::from_outcomes(data.len(), available, outcomes, &config, options),
            }
        })
        .collect())
}

/// Reference path: an independent [`evaluate_config`] per learning rate.
pub fn lr_sweep_naive(
    params: &Parameters,
    data: &[LabeledSample],
    base_config: &FocusConfig,
    lrs: &[f64],
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    lrs.iter()
        .enumerate()
        .map(|(j, &lr)| {
            let config = FocusConfig { eta: lr, ..base_config.clone() };
            Ok(SweepPoint {
                index: j,
                lr,
                report: evaluate_config(params, data, &config, options)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub power: u32,
    pub lr: f64,
    pub delta_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleVsMulti {
    pub eta: f64,
    pub t_multi: usize,
    pub multi_delta_acc: f64,
    pub n_uncertain: usize,
    pub single: Vec<PowerPoint>,
}

/// `t_multi` steps at `eta` against one step at `eta · 2^power` for each power.
pub fn single_vs_multi(
    params: &Parameters,
    data: &[LabeledSample],
    base_config: &FocusConfig,
    eta: f64,
    t_multi: usize,
    powers: &[u32],
    options: &EvalOptions,
) -> Result<SingleVsMulti> {
    if !(eta >= 0.0 && eta.is_finite()) || t_multi == 0 {
        return Err(Error::InvalidArgument(format!("need eta >= 0 and t_multi >= 1, got {eta} and {t_multi}")));
    }
    let multi_cfg = FocusConfig {
        eta,
        iterations: t_multi,
        ..base_config.clone()
    };
    let multi = evaluate_config(params, data, &multi_cfg, options)?;
    let single_cfg = FocusConfig {
        iterations: 1,
        ..base_config.clone()
    };
    let lrs: Vec<f64> = powers.iter().map(|&p| eta * 2f64.powi(p as i32)).collect();
    let mut order: Vec<usize> = (0..lrs.len()).collect();
    order.sort_by(|&a, &b| lrs[a].total_cmp(&lrs[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| lrs[i]).collect();
    let points = lr_sweep(params, data, &single_cfg, &sorted, options)?;
    let mut single: Vec<PowerPoint> = order
        .iter()
        .zip(points)
        .map(|(&i, pt)| PowerPoint {
            power: powers[i],
            lr: lrs[i],
            delta_acc: pt.report.delta_acc,
        })
        .collect();
    single.sort_by_key(|p| powers.iter().position(|&q| q == p.power));
    Ok(SingleVsMulti {
        eta,
        t_multi,
        multi_delta_acc: multi.delta_acc,
        n_uncertain: multi.n_uncertain,
        single,
    })
}
