//! Three-class, four-feature linear model used to compare update directions.
//!
//! ```text
//! y0 = c0 x0 + c4 x3
//! y1 = c1 x1 + c5 x3
//! y2 = c2 x2 + c6 x3
//! ```
//!
//! `x3` is the feature shared by every class; `{y0, y1}` are the focus classes.
//! `c3` is carried for indexing symmetry and never enters an output.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tape;
use crate::network::softmax_stable;
use crate::output::fmt_num;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub c: [f64; 7],
    pub x: [f64; 4],
}

impl ToyModel {
    pub fn new(c: [f64; 7], x: [f64; 4]) -> Result<Self> {
        if x.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("features must be finite and >= 0, got {x:?}")));
        }
        if c[..3].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "class-specific coefficients c0..c2 must be positive, got {:?}",
                &c[..3]
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        Ok(Self { c, x })
    }
}

/// Outputs `(y0, y1, y2)`.
pub fn toy_forward(m: &ToyModel) -> [f64; 3] {
    let [c0, c1, c2, _, c4, c5, c6] = m.c;
    let [x0, x1, x2, x3] = m.x;
    [c0 * x0 + c4 * x3, c1 * x1 + c5 * x3, c2 * x2 + c6 * x3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyLoss {
    /// `-(y0 + y1)`
    IfoUnweighted,
    /// `y2`
    Dofo,
    /// `+y_i`
    SinglePlus(usize),
    /// `-y_i`
    SingleMinus(usize),
    /// Entropy of `softmax(y)`.
    Entropy,
}

impl ToyLoss {
    fn validate(self) -> Result<()> {
        match self {
            ToyLoss::SinglePlus(i) | ToyLoss::SingleMinus(i) if i > 2 => {
                Err(Error::InvalidArgument(format!("toy model has classes 0..=2, got {i}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ToyLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyLoss::IfoUnweighted => f.write_str("ifo_unweighted"),
            ToyLoss::Dofo => f.write_str("dofo"),
            ToyLoss::SinglePlus(i) => write!(f, "single_plus({i})"),
            ToyLoss::SingleMinus(i) => write!(f, "single_minus({i})"),
            ToyLoss::Entropy => f.write_str("entropy"),
        }
    }
}

impl FromStr for ToyLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let single = |prefix: &str| -> Option<Result<usize>> {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .map(|i| i.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad class in `{s}`"))))
        };
        let loss = match s {
            "ifo_unweighted" | "ifo" => ToyLoss::IfoUnweighted,
            "dofo" => ToyLoss::Dofo,
            "entropy" => ToyLoss::Entropy,
            _ => {
                if let Some(i) = single("single_plus") {
                    ToyLoss::SinglePlus(i?)
                } else if let Some(i) = single("single_minus") {
                    ToyLoss::SingleMinus(i?)
                } else {
                    return Err(Error::InvalidArgument(format!("unknown toy loss `{s}`")));
                }
            }
        };
        loss.validate()?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub loss: ToyLoss,
    /// `∂L/∂c_i`, i = 0..=6.
    pub partials: [f64; 7],
    /// Factor multiplying `∂x3/∂z` in the upstream gradient.
    pub shared_pathway: f64,
}

/// Closed-form partials of the toy losses.
pub fn toy_grad(m: &ToyModel, loss: ToyLoss) -> Result<GradReport> {
    loss.validate()?;
    let [_, _, _, _, c4, c5, c6] = m.c;
    let x = m.x;
    let mut d = [0.0; 7];
    let shared_pathway = match loss {
        ToyLoss::IfoUnweighted => {
            d[0] = -x[0];
            d[1] = -x[1];
            d[4] = -x[3];
            d[5] = -x[3];
            -(c4 + c5)
        }
        ToyLoss::Dofo => {
            d[2] = x[2];
            d[6] = x[3];
            c6
        }
        ToyLoss::SinglePlus(j) | ToyLoss::SingleMinus(j) => {
            let sign = if matches!(loss, ToyLoss::SinglePlus(_)) { 1.0 } else { -1.0 };
            d[j] = sign * x[j];
            d[4 + j] = sign * x[3];
            sign * m.c[4 + j]
        }
        ToyLoss::Entropy => {
            let g = entropy_coeffs(&softmax_stable(&toy_forward(m)))?;
            for j in 0..3 {
                d[j] = g[j] * x[j];
                d[4 + j] = g[j] * x[3];
            }
            (0..3).map(|j| g[j] * m.c[4 + j]).sum()
        }
    };
    Ok(GradReport {
        loss,
        partials: d,
        shared_pathway,
    })
}

/// Same partials, obtained by recording the toy model on a tape.
pub fn toy_grad_autodiff(m: &ToyModel, loss: ToyLoss) -> Result<[f64; 7]> {
    loss.validate()?;
    let x = m.x;
    let mut tape = Tape::new(&m.c);
    let c = tape.param(0, 7)?;
    let y: Vec<_> = (0..3)
        .map(|j| {
            let mut w = [0.0; 7];
            w[j] = x[j];
            w[4 + j] = x[3];
            tape.weighted_sum(c, &w)
        })
        .collect();
    let root = match loss {
        ToyLoss::IfoUnweighted => {
            let s = tape.add(y[0], y[1]);
            tape.neg(s)
        }
        ToyLoss::Dofo => y[2],
        ToyLoss::SinglePlus(j) => y[j],
        ToyLoss::SingleMinus(j) => tape.neg(y[j]),
        ToyLoss::Entropy => {
            let logits = tape.concat(&y);
            crate::focus::loss_entropy(&mut tape, logits)
        }
    };
    let g = tape.backward(root)?;
    let mut out = [0.0; 7];
    out.copy_from_slice(g.as_slice());
    Ok(out)
}

/// `g_k = ∂H/∂y_k = p_k (-H - ln p_k)`, with `g_k = 0` where `p_k = 0`.
pub fn entropy_coeffs(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
    }
    let plogp = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
    let h = -probs.iter().map(|&p| plogp(p)).sum::<f64>();
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { p * (-h - p.ln()) } else { 0.0 })
        .collect())
}

/// One row of the coefficient comparison; probabilities `(p, p, 1 - 2p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub p: f64,
    pub alpha_ifo: f64,
    /// `g_a / max|g_a|`
    pub g_a: f64,
    /// `g_b / max|g_b|`
    pub g_b: f64,
    pub g_a_raw: f64,
    pub g_b_raw: f64,
}

/// Lower end of the sweep: `1/3 - CURVE_MARGIN`.
pub const CURVE_MARGIN: f64 = 1.0 / 12.0;

/// Coefficients along `p0 = p1 = p`, `p2 = 1 - 2p` for `p` from `1/3 - margin` to `1/2`.
///
/// The grid is `resolution` evenly spaced points; `p = 1/3` is inserted if it
/// is not already on it. Each coefficient column is rescaled to a maximum
/// absolute value of 1.
pub fn coefficient_curve(resolution: usize) -> Result<Vec<CurveRow>> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("resolution must be >= 2, got {resolution}")));
    }
    let third = 1.0 / 3.0;
    let lo = third - CURVE_MARGIN;
    let hi = 0.5;
    let mut ps: Vec<f64> = (0..resolution)
        .map(|i| {
            if i == resolution - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (resolution - 1) as f64
            }
        })
        .collect();
    if let Some(i) = ps.iter().position(|&p| (p - third).abs() < 1e-12) {
        ps[i] = third;
    } else {
        let at = ps.partition_point(|&p| p < third);
        ps.insert(at, third);
    }

    let mut rows: Vec<CurveRow> = ps
        .into_iter()
        .map(|p| {
            let p2 = (1.0 - 2.0 * p).max(0.0);
            let g = entropy_coeffs(&[p, p, p2]).expect("valid sweep probabilities");
            CurveRow {
                p,
                alpha_ifo: 1.0,
                g_a: g[0],
                g_b: g[2],
                g_a_raw: g[0],
                g_b_raw: g[2],
            }
        })
        .collect();
    let max_a = rows.iter().map(|r| r.g_a_raw.abs()).fold(0.0, f64::max);
    let max_b = rows.iter().map(|r| r.g_b_raw.abs()).fold(0.0, f64::max);
    for r in &mut rows {
        if max_a > 0.0 {
            r.g_a = r.g_a_raw / max_a;
        }
        if max_b > 0.0 {
            r.g_b = r.g_b_raw / max_b;
        }
    }
    Ok(rows)
}

pub fn write_curve_csv<W: Write>(mut out: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(out, "p,alpha_ifo,g_a,g_b,g_a_raw,g_b_raw")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_num(r.p),
            fmt_num(r.alpha_ifo),
            fmt_num(r.g_a),
            fmt_num(r.g_b),
            fmt_num(r.g_a_raw),
            fmt_num(r.g_b_raw)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedSign {
    /// `c4` and `c5` have the same sign.
    Same,
    /// `c4 · c5 < 0`.
    Opposing,
    /// One of them is zero.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub sign: SharedSign,
    /// `|c4 + c5|`
    pub ifo_pathway: f64,
    /// `|c4|`, the single-class (`y0`) pathway.
    pub single_pathway: f64,
    /// `|Σ_j g_j c_{4+j}|` at the model's own softmax.
    pub entropy_pathway: f64,
    pub ifo_exceeds_single: bool,
    pub entropy_below_ifo: bool,
}

/// Compares how strongly each loss pushes on the shared feature `x3`.
pub fn amplification_report(m: &ToyModel) -> Result<AmplificationReport> {
    let [_, _, _, _, c4, c5, _] = m.c;
    let sign = if c4 * c5 > 0.0 {
        SharedSign::Same
    } else if c4 * c5 < 0.0 {
        SharedSign::Opposing
    } else {
        SharedSign::Degenerate
    };
    let ifo = toy_grad(m, ToyLoss::IfoUnweighted)?.shared_pathway.abs();
    let single = toy_grad(m, ToyLoss::SingleMinus(0))?.shared_pathway.abs();
    let entropy = toy_grad(m, ToyLoss::Entropy)?.shared_pathway.abs();
    Ok(AmplificationReport {
        sign,
        ifo_pathway: ifo,
        single_pathway: single,
        entropy_pathway: entropy,
        ifo_exceeds_single: ifo > single,
        entropy_below_ifo: entropy < ifo,
    })
}

pub fn write_amplification_csv<W: Write>(mut out: W, rows: &[(ToyModel, AmplificationReport)]) -> Result<()> {
    writeln!(
        out,
        "c0,c1,c2,c4,c5,c6,x0,x1,x2,x3,sign,ifo_pathway,single_pathway,entropy_pathway,ifo_exceeds_single,entropy_below_ifo"
    )?;
    for (m, r) in rows {
        let sign = match r.sign {
            SharedSign::Same => "same",
            SharedSign::Opposing => "opposing",
            SharedSign::Degenerate => "degenerate",
        };
        let nums: Vec<String> = [m.c[0], m.c[1], m.c[2], m.c[4], m.c[5], m.c[6]]
            .iter()
            .chain(m.x.iter())
            .map(|v| fmt_num(*v))
            .collect();
        writeln!(
            out,
            "{},{sign},{},{},{},{},{}",
            nums.join(","),
            fmt_num(r.ifo_pathway),
            fmt_num(r.single_pathway),
            fmt_num(r.entropy_pathway),
            r.ifo_exceeds_single,
            r.entropy_below_ifo
        )?;
    }
    Ok(())
}

/// State after one step of [`shared_growth`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthStep {
    pub step: usize,
    pub c4: f64,
    pub c5: f64,
    pub x3: f64,
    /// Total contribution of `x3` to the focus outputs, `(c4 + c5) x3`.
    pub shared_contribution: f64,
}

/// Iterated descent on `(c4, c5, x3)` treating `x3` as directly trainable.
///
/// Under `IfoUnweighted` both `c4` and `c5` grow with `x3` and `x3` grows with
/// `c4 + c5`; under `SingleMinus(0)` only `c4` feeds back into `x3`.
pub fn shared_growth(m: &ToyModel, loss: ToyLoss, eta: f64, steps: usize) -> Result<Vec<GrowthStep>> {
    if !matches!(loss, ToyLoss::IfoUnweighted | ToyLoss::SingleMinus(0)) {
        return Err(Error::InvalidArgument(format!("growth demo supports ifo_unweighted and single_minus(0), got {loss}")));
    }
    let (mut c4, mut c5, mut x3) = (m.c[4], m.c[5], m.x[3]);
    let record = |step, c4: f64, c5: f64, x3: f64| GrowthStep {
        step,
        c4,
        c5,
        x3,
        shared_contribution: (c4 + c5) * x3,
    };
    let mut out = vec![record(0, c4, c5, x3)];
    for step in 1..=steps {
        let (d4, d5, dx3) = match loss {
            ToyLoss::IfoUnweighted => (-x3, -x3, -(c4 + c5)),
            _ => (-x3, 0.0, -c4),
        };
        c4 -= eta * d4;
        c5 -= eta * d5;
        x3 = (x3 - eta * dx3).max(0.0);
        out.push(record(step, c4, c5, x3));
    }
    Ok(out)
}
