//! BLEU-family scores over token ids, the max-over-references reward, and
//! the rfb/pwb diversity statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuParams {
    pub max_n: usize,
    /// Add-one smoothing of the precisions of order >= 2.
    pub smooth: bool,
}

impl Default for BleuParams {
    fn default() -> Self {
        Self {
            max_n: 4,
            smooth: true,
        }
    }
}

impl BleuParams {
    pub fn unsmoothed() -> Self {
        Self {
            smooth: false,
            ..Self::default()
        }
    }
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for gram in seq.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(hyp: &[TokenId], reference: &[TokenId], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Sufficient statistics of BLEU; add them to aggregate a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
}

impl BleuStats {
    pub fn new(hyp: &[TokenId], reference: &[TokenId], max_n: usize) -> Self {
        Self {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            matches: (1..=max_n).map(|n| clipped_matches(hyp, reference, n)).collect(),
            totals: (1..=max_n)
                .map(|n| (hyp.len() + 1).saturating_sub(n))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
    }

    /// Geometric mean of precisions times the brevity penalty, in `[0, 100]`.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 || self.matches.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (i, (&m, &c)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, c) = if smooth && i >= 1 {
                (m as f64 + 1.0, c as f64 + 1.0)
            } else {
                (m as f64, c as f64)
            };
            if m == 0.0 || c == 0.0 {
                return 0.0;
            }
            log_sum += (m / c).ln();
        }
        let log_bp = if self.hyp_len < self.ref_len {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        } else {
            0.0
        };
        let n = self.matches.len() as f64;
        (100.0 * (log_bp + log_sum / n).exp()).clamp(0.0, 100.0)
    }
}

pub fn sentence_bleu(hyp: &[TokenId], reference: &[TokenId], bp: &BleuParams) -> f64 {
    BleuStats::new(hyp, reference, bp.max_n).score(bp.smooth)
}

/// Micro-averaged corpus BLEU (never smoothed), one reference per hypothesis.
pub fn corpus_bleu<H, R>(hyps: &[H], refs: &[R], bp: &BleuParams) -> Result<f64>
where
    H: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::new(h.as_ref(), r.as_ref(), bp.max_n));
    }
    Ok(total.score(false))
}

/// Best sentence BLEU over the references and the index achieving it
/// (smallest index on ties).
pub fn max_reward<R: AsRef<[TokenId]>>(
    hyp: &[TokenId],
    refs: &[R],
    bp: &BleuParams,
) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in refs.iter().enumerate() {
        let s = sentence_bleu(hyp, r.as_ref(), bp);
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, i));
        }
    }
    best.ok_or(Error::EmptyRefs)
}

/// Mean BLEU of each translation against a single reference.
pub fn rfb<T: AsRef<[TokenId]>>(translations: &[T], reference: &[TokenId], bp: &BleuParams) -> Result<f64> {
    if translations.is_empty() {
        return Err(Error::EmptyList);
    }
    let total: f64 = translations
        .iter()
        .map(|t| sentence_bleu(t.as_ref(), reference, bp))
        .sum();
    Ok(total / translations.len() as f64)
}

/// Mean BLEU over all ordered pairs `(i, j)`, `i != j`, with translation `i`
/// as hypothesis and `j` as reference.
pub fn pwb<T: AsRef<[TokenId]>>(translations: &[T], bp: &BleuParams) -> Result<f64> {
    let k = translations.len();
    if k < 2 {
        return Err(Error::NeedTwo);
    }
    let mut total = 0.0;
    for (i, hyp) in translations.iter().enumerate() {
        for (j, reference) in translations.iter().enumerate() {
            if i != j {
                total += sentence_bleu(hyp.as_ref(), reference.as_ref(), bp);
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// Google BLEU: min of n-gram precision and recall over orders 1..=4.
pub fn gleu(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    let mut matches = 0;
    let mut hyp_total = 0;
    let mut ref_total = 0;
    for n in 1..=4 {
        matches += clipped_matches(hyp, reference, n);
        hyp_total += (hyp.len() + 1).saturating_sub(n);
        ref_total += (reference.len() + 1).saturating_sub(n);
    }
    let denom = hyp_total.max(ref_total);
    if denom == 0 {
        return 0.0;
    }
    100.0 * matches as f64 / denom as f64
}

/// Evaluation summary written by `eval` and `run-all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sentences: usize,
    /// Corpus BLEU against the best-matching reference of each sentence.
    pub corpus_bleu: f64,
    /// Mean per-sentence max reward.
    pub mean_reward: f64,
    /// Share of outputs exactly equal to one of the references.
    pub validity_rate: f64,
    pub rfb: Option<f64>,
    pub pwb: Option<f64>,
    pub rewards: Vec<f64>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}
