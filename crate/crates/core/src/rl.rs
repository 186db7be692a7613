//! Max-reward policy-gradient fine-tuning signal for CTC models.
//!
//! A sample is drawn from the per-position alignment distribution and
//! collapsed to a sentence `y_s`. Its reward is the best sentence BLEU over
//! the references, scaled to `[0, 1]`. The per-sample loss is
//! `-r * log p(y_s)` with the sampling distribution held fixed, so the
//! gradient with respect to the log-probability matrix is
//! `r * ctc_grad(m, y_s)`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{alignment_log_prob, collapse, ctc_grad, sample_alignment, AllAlignments, LogProbMatrix};
use crate::metrics::{max_reward, BleuParams};
use crate::scalar::Real;
use crate::vocab::TokenId;

/// Largest alignment space [`rl_exhaustive`] will enumerate.
pub const EXHAUSTIVE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RLConfig {
    pub samples: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Divides BLEU before it enters the gradient.
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            steps: 100,
            lr: 2e-5,
            warmup_steps: 20,
            batch_size: 32,
            reward_scale: 100.0,
            seed: 1,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "rl samples and batch size must be >= 1".into(),
            ));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::InvalidConfig("reward scale must be positive".into()));
        }
        Ok(())
    }
}

/// One sample's contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RlSample<F> {
    pub sentence: Vec<TokenId>,
    /// Scaled reward in `[0, 1]`.
    pub reward: f64,
    pub loss: F,
    pub grad: Array2<F>,
}

fn sample_value<F: Real, R: AsRef<[TokenId]>>(
    m: &LogProbMatrix<F>,
    alignment: &[TokenId],
    refs: &[R],
    reward_scale: f64,
) -> Result<RlSample<F>> {
    let sentence = collapse(alignment);
    let (bleu, _) = max_reward(&sentence, refs, &BleuParams::default())?;
    let reward = bleu / reward_scale;
    // the drawn alignment is itself feasible, so ctc_grad cannot fail
    let (log_p, mut grad) = ctc_grad(m, &sentence)?;
    let r = F::lit(reward);
    grad.mapv_inplace(|g| g * r);
    Ok(RlSample {
        sentence,
        reward,
        loss: -r * log_p,
        grad,
    })
}

/// Single-sample estimate of the max-reward objective and its gradient.
pub fn rl_loss_and_grad<F: Real, R: AsRef<[TokenId]>, G: Rng + ?Sized>(
    m: &LogProbMatrix<F>,
    refs: &[R],
    reward_scale: f64,
    rng: &mut G,
) -> Result<RlSample<F>> {
    if refs.is_empty() {
        return Err(Error::EmptyRefs);
    }
    let alignment = sample_alignment(m, rng);
    sample_value(m, &alignment, refs, reward_scale)
}

/// Exact expectation of [`rl_loss_and_grad`] by enumerating every alignment.
pub fn rl_exhaustive<F: Real, R: AsRef<[TokenId]>>(
    m: &LogProbMatrix<F>,
    refs: &[R],
    reward_scale: f64,
) -> Result<(F, Array2<F>)> {
    if refs.is_empty() {
        return Err(Error::EmptyRefs);
    }
    let space = (m.vocab_size() as f64).powi(m.t_dec() as i32);
    if space > EXHAUSTIVE_LIMIT as f64 {
        return Err(Error::ScaleExceeded(format!(
            "{} alignments exceed the limit of {EXHAUSTIVE_LIMIT}",
            space
        )));
    }
    let mut loss = F::zero();
    let mut grad = Array2::zeros((m.t_dec(), m.vocab_size()));
    for a in AllAlignments::new(m.t_dec(), m.vocab_size()) {
        let w = alignment_log_prob(m, &a).exp();
        if w == F::zero() {
            continue;
        }
        let s = sample_value(m, &a, refs, reward_scale)?;
        loss += w * s.loss;
        grad.scaled_add(w, &s.grad);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ctc_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(path: &[TokenId], v: usize) -> LogProbMatrix<f64> {
        let mut logits = Array2::from_elem((path.len(), v), -60.0);
        for (t, &tok) in path.iter().enumerate() {
            logits[[t, tok as usize]] = 0.0;
        }
        LogProbMatrix::from_logits(logits)
    }

    #[test]
    fn degenerate_distribution_reinforces_reference() {
        let m = one_hot(&[1, 0, 2, 2], 3);
        let refs = [vec![1, 2]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rl_loss_and_grad(&m, &refs, 100.0, &mut rng).unwrap();
        assert_eq!(s.sentence, vec![1, 2]);
        assert_eq!(s.reward, 1.0);
        let (_, g) = ctc_grad(&m, &[1, 2]).unwrap();
        assert_eq!(s.grad, g);
        assert!(s.grad[[0, 1]] < 0.0);
        let (el, eg) = rl_exhaustive(&m, &refs, 100.0).unwrap();
        assert!((el - s.loss).abs() < 1e-9);
        assert!((eg - &s.grad).iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn zero_reward_gives_zero_grad() {
        let m = one_hot(&[1, 1], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rl_loss_and_grad(&m, &[vec![2, 2, 2]], 100.0, &mut rng).unwrap();
        assert_eq!(s.reward, 0.0);
        assert!(s.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn errors() {
        let m = LogProbMatrix::<f64>::uniform(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let none: [Vec<TokenId>; 0] = [];
        assert!(matches!(rl_loss_and_grad(&m, &none, 100.0, &mut rng), Err(Error::EmptyRefs)));
        assert!(matches!(rl_exhaustive(&m, &none, 100.0), Err(Error::EmptyRefs)));
        let big = LogProbMatrix::<f64>::uniform(11, 3);
        assert!(matches!(rl_exhaustive(&big, &[vec![1]], 100.0), Err(Error::ScaleExceeded(_))));
    }

    #[test]
    fn rewards_are_bounded() {
        let m = LogProbMatrix::<f64>::uniform(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = rl_loss_and_grad(&m, &[vec![1, 2], vec![2]], 100.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&s.reward));
        }
    }
}
