//! Multi-reference objectives over per-reference CTC log-probabilities.
//!
//! Each loss returns its scalar value together with per-reference weights
//! `w_i = -d loss / d lp_i`, so the gradient with respect to the model's
//! log-probability matrix is `sum_i w_i * ctc_grad(m, y_i)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Real};

/// Scalar loss with its per-reference gradient weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRefLoss<F> {
    pub loss: F,
    /// `-d loss / d lp_i`; zero for dropped (infeasible) references.
    pub weights: Vec<F>,
    /// Argmax reference for `max`, `None` for the other losses.
    pub selected: Option<usize>,
    /// Indices of references that were dropped for having `-inf` log-probability.
    pub dropped: Vec<usize>,
}

fn feasible<F: Real>(lp: &[F]) -> Result<Vec<usize>> {
    let dropped: Vec<usize> = (0..lp.len())
        .filter(|&i| lp[i] == F::neg_infinity())
        .collect();
    if dropped.len() == lp.len() {
        return Err(Error::InfeasibleReferences);
    }
    if !dropped.is_empty() {
        log::warn!(
            "dropping {} of {} references with no feasible alignment",
            dropped.len(),
            lp.len()
        );
    }
    Ok(dropped)
}

/// Mean negative log-likelihood over the feasible references.
pub fn loss_sum<F: Real>(lp: &[F]) -> Result<MultiRefLoss<F>> {
    let dropped = feasible(lp)?;
    let kept = F::from_count(lp.len() - dropped.len());
    let total: F = lp
        .iter()
        .copied()
        .filter(|&x| x != F::neg_infinity())
        .sum();
    let w = F::one() / kept;
    let weights = lp
        .iter()
        .map(|&x| if x == F::neg_infinity() { F::zero() } else { w })
        .collect();
    Ok(MultiRefLoss {
        loss: -total / kept,
        weights,
        selected: None,
        dropped,
    })
}

/// Negative log-likelihood of the most probable reference; ties go to the
/// smallest index.
pub fn loss_max<F: Real>(lp: &[F]) -> Result<MultiRefLoss<F>> {
    let dropped = feasible(lp)?;
    let mut best = 0;
    for (i, &x) in lp.iter().enumerate() {
        if x > lp[best] {
            best = i;
        }
    }
    let mut weights = vec![F::zero(); lp.len()];
    weights[best] = F::one();
    Ok(MultiRefLoss {
        loss: -lp[best],
        weights,
        selected: Some(best),
        dropped,
    })
}

/// Negative log of the total probability of the reference set; weights are
/// the model's posterior over references.
pub fn loss_mid<F: Real>(lp: &[F]) -> Result<MultiRefLoss<F>> {
    let dropped = feasible(lp)?;
    let z = log_sum_exp(lp.iter().copied());
    let weights = lp.iter().map(|&x| (x - z).exp()).collect();
    Ok(MultiRefLoss {
        loss: -z,
        weights,
        selected: None,
        dropped,
    })
}

/// Two-stage linear schedule `sum -> mid -> max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Fraction of training spent in the first (`sum -> mid`) stage.
    pub lambda: f64,
    pub total_steps: u64,
}

impl AnnealSchedule {
    pub fn new(lambda: f64, total_steps: u64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in (0, 1), got {lambda}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::InvalidConfig("total steps must be >= 1".into()));
        }
        Ok(Self {
            lambda,
            total_steps,
        })
    }
}

/// Mixing weights of the three losses at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealWeights<F> {
    pub sum: F,
    pub mid: F,
    pub max: F,
}

pub fn anneal_weights<F: Real>(t: u64, sched: &AnnealSchedule) -> Result<AnnealWeights<F>> {
    if t > sched.total_steps {
        return Err(Error::StepOutOfRange {
            step: t,
            total: sched.total_steps,
        });
    }
    let t_f = F::lit(t as f64);
    let total = F::lit(sched.total_steps as f64);
    let boundary = F::lit(sched.lambda) * total;
    if t_f <= boundary {
        let t1 = t_f / boundary;
        Ok(AnnealWeights {
            sum: F::one() - t1,
            mid: t1,
            max: F::zero(),
        })
    } else {
        let t2 = (t_f - boundary) / (total - boundary);
        Ok(AnnealWeights {
            sum: F::zero(),
            mid: F::one() - t2,
            max: t2,
        })
    }
}

/// Convex combination of the three losses (and their weight vectors) given by
/// [`anneal_weights`]. Terms with zero mixing weight are skipped, so the
/// schedule endpoints reproduce the pure losses exactly.
pub fn annealed_loss<F: Real>(
    lp: &[F],
    t: u64,
    sched: &AnnealSchedule,
) -> Result<MultiRefLoss<F>> {
    let mix = anneal_weights::<F>(t, sched)?;
    let mut loss = F::zero();
    let mut weights = vec![F::zero(); lp.len()];
    let mut dropped = Vec::new();
    let mut selected = None;
    let parts: [(F, fn(&[F]) -> Result<MultiRefLoss<F>>); 3] =
        [(mix.sum, loss_sum), (mix.mid, loss_mid), (mix.max, loss_max)];
    for (coef, f) in parts {
        if coef == F::zero() {
            continue;
        }
        let part = f(lp)?;
        loss += coef * part.loss;
        for (w, pw) in weights.iter_mut().zip(&part.weights) {
            *w += coef * *pw;
        }
        dropped = part.dropped;
        selected = selected.or(part.selected);
    }
    Ok(MultiRefLoss {
        loss,
        weights,
        selected,
        dropped,
    })
}

/// Training objective selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Sum,
    Mid,
    Max,
    Anneal,
}

impl LossMode {
    pub fn evaluate<F: Real>(
        self,
        lp: &[F],
        step: u64,
        sched: &AnnealSchedule,
    ) -> Result<MultiRefLoss<F>> {
        match self {
            LossMode::Sum => loss_sum(lp),
            LossMode::Mid => loss_mid(lp),
            LossMode::Max => loss_max(lp),
            LossMode::Anneal => annealed_loss(lp, step.min(sched.total_steps), sched),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Sum => "sum",
            LossMode::Mid => "mid",
            LossMode::Max => "max",
            LossMode::Anneal => "anneal",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LossMode::Sum),
            "mid" => Ok(LossMode::Mid),
            "max" => Ok(LossMode::Max),
            "anneal" => Ok(LossMode::Anneal),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss {other:?}; expected sum, mid, max or anneal"
            ))),
        }
    }
}
