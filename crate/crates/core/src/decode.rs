//! Greedy CTC decoding and CTC prefix beam search with optional n-gram
//! shallow fusion.
//!
//! The beam holds `(prefix, ending)` states, where the ending records whether
//! the alignments behind the state end in a blank or in the prefix's last
//! token. Pruning keeps the best `W` states; the final ranking merges both
//! endings of each prefix. With `W = 1` every candidate comes from a distinct
//! token, so the search reduces to per-position argmax; with `W` at least the
//! number of reachable states it is exact marginalization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::lattice::{collapse, LogProbMatrix};
use crate::lm::NGramModel;
use crate::scalar::{log_add, Real};
use crate::vocab::{TokenId, BLANK};

/// Per-position argmax (smallest id on ties), then collapse.
pub fn greedy_decode<F: Real>(m: &LogProbMatrix<F>) -> Vec<TokenId> {
    let path: Vec<TokenId> = (0..m.t_dec())
        .map(|t| {
            let row = m.row(t);
            let mut best = 0;
            for (v, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = v;
                }
            }
            best as TokenId
        })
        .collect();
    collapse(&path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub beam: usize,
    /// LM weight.
    pub alpha: f64,
    /// Per-token length bonus.
    pub beta: f64,
}

impl DecodeParams {
    /// Width used when decoding the training set with teachers.
    pub const TEACHER_BEAM: usize = 5;

    pub fn plain(beam: usize) -> Self {
        Self {
            beam,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    /// Width 20 with shallow fusion.
    pub fn with_lm() -> Self {
        Self {
            beam: 20,
            alpha: 0.3,
            beta: 0.5,
        }
    }
}

/// One ranked output of [`beam_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHyp<F> {
    pub prefix: Vec<TokenId>,
    /// Log mass of alignments ending in blank.
    pub log_p_blank: F,
    /// Log mass of alignments ending in the last prefix token.
    pub log_p_nonblank: F,
    /// Accumulated LM log-score of the prefix.
    pub lm_score: F,
    /// `logsumexp(p_blank, p_nonblank) + alpha * lm + beta * |prefix|`.
    pub score: F,
}

impl<F: Real> BeamHyp<F> {
    pub fn log_prob(&self) -> F {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Ending {
    Blank,
    Token,
}

struct PrefixInfo<F> {
    lm: F,
}

fn combined<F: Real>(mass: F, lm: F, len: usize, dp: &DecodeParams) -> F {
    mass + F::lit(dp.alpha) * lm + F::lit(dp.beta) * F::from_count(len)
}

/// CTC prefix beam search. Output is ranked by combined score (ties by
/// prefix), one entry per distinct prefix.
pub fn beam_search<F: Real>(
    m: &LogProbMatrix<F>,
    dp: &DecodeParams,
    lm: Option<&NGramModel>,
) -> Vec<BeamHyp<F>> {
    let width = dp.beam.max(1);
    let ninf = F::neg_infinity();
    let mut info: HashMap<Vec<TokenId>, PrefixInfo<F>> = HashMap::new();
    info.insert(Vec::new(), PrefixInfo { lm: F::zero() });
    let mut beam: Vec<((Vec<TokenId>, Ending), F)> = vec![((Vec::new(), Ending::Blank), F::zero())];

    for t in 0..m.t_dec() {
        let mut next: HashMap<(Vec<TokenId>, Ending), F> = HashMap::new();
        let mut push = |key: (Vec<TokenId>, Ending), mass: F| {
            if mass == ninf {
                return;
            }
            let slot = next.entry(key).or_insert(ninf);
            *slot = log_add(*slot, mass);
        };
        for ((prefix, ending), mass) in &beam {
            let last = prefix.last().copied();
            for v in 0..m.vocab_size() as TokenId {
                let p = m.get(t, v);
                if p == ninf {
                    continue;
                }
                let mass = *mass + p;
                if v == BLANK {
                    push((prefix.clone(), Ending::Blank), mass);
                } else if Some(v) == last && *ending == Ending::Token {
                    push((prefix.clone(), Ending::Token), mass);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(v);
                    if !info.contains_key(&ext) {
                        let step = lm.map_or(0.0, |l| l.score_continuation(prefix, v));
                        let base = info[prefix].lm;
                        info.insert(ext.clone(), PrefixInfo { lm: base + F::lit(step) });
                    }
                    push((ext, Ending::Token), mass);
                }
            }
        }
        let mut scored: Vec<((Vec<TokenId>, Ending), F, F)> = next
            .into_iter()
            .map(|(key, mass)| {
                let s = combined(mass, info[&key.0].lm, key.0.len(), dp);
                (key, mass, s)
            })
            .collect();
        scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(width);
        beam = scored.into_iter().map(|(k, mass, _)| (k, mass)).collect();
    }

    let mut merged: HashMap<Vec<TokenId>, (F, F)> = HashMap::new();
    for ((prefix, ending), mass) in beam {
        let slot = merged.entry(prefix).or_insert((ninf, ninf));
        match ending {
            Ending::Blank => slot.0 = log_add(slot.0, mass),
            Ending::Token => slot.1 = log_add(slot.1, mass),
        }
    }
    let mut out: Vec<BeamHyp<F>> = merged
        .into_iter()
        .map(|(prefix, (pb, pnb))| {
            let lm_score = info[&prefix].lm;
            let score = combined(log_add(pb, pnb), lm_score, prefix.len(), dp);
            BeamHyp {
                prefix,
                log_p_blank: pb,
                log_p_nonblank: pnb,
                lm_score,
                score,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.prefix.cmp(&b.prefix))
    });
    out
}

/// Greedy when `beam <= 1` and no LM is given, else the top beam hypothesis.
pub fn decode_best<F: Real>(
    m: &LogProbMatrix<F>,
    dp: &DecodeParams,
    lm: Option<&NGramModel>,
) -> Vec<TokenId> {
    if dp.beam <= 1 && lm.is_none() {
        return greedy_decode(m);
    }
    beam_search(m, dp, lm)
        .into_iter()
        .next()
        .map(|h| h.prefix)
        .unwrap_or_default()
}
