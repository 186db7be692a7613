//! Token n-gram language model with stupid backoff, used for shallow fusion
//! in beam search.
//!
//! Id 0 (the CTC blank, which never occurs inside sentences) doubles as the
//! sentence boundary: contexts are left-padded with it and each sentence ends
//! with one predicted boundary token. The unigram level is add-one smoothed
//! over the whole vocabulary, boundary included, so it is a proper
//! distribution.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, BLANK};

pub const LM_FORMAT_HEADER: &str = "ddrs-ngram v1";
pub const DEFAULT_BACKOFF: f64 = 0.4;

/// Sentence boundary marker inside the LM.
pub const BOUNDARY: TokenId = BLANK;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    backoff: f64,
    vocab_size: usize,
    /// `counts[k]` holds the (k+1)-grams, keyed by the full id sequence.
    counts: Vec<HashMap<Vec<TokenId>, u64>>,
    /// Summed continuation counts per context, derived from `counts`.
    context_totals: Vec<HashMap<Vec<TokenId>, u64>>,
    unigram_total: u64,
}

impl NGramModel {
    pub fn train<S: AsRef<[TokenId]>>(corpus: &[S], order: usize, vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if order == 0 {
            return Err(Error::InvalidConfig("n-gram order must be >= 1".into()));
        }
        let mut counts = vec![HashMap::new(); order];
        for sent in corpus {
            let sent = sent.as_ref();
            if let Some(&bad) = sent.iter().find(|&&t| t == BOUNDARY || t as usize >= vocab_size) {
                return Err(Error::UnknownToken(bad));
            }
            let mut padded = vec![BOUNDARY; order - 1];
            padded.extend_from_slice(sent);
            padded.push(BOUNDARY);
            for pos in (order - 1)..padded.len() {
                for n in 1..=order {
                    let gram = padded[pos + 1 - n..=pos].to_vec();
                    *counts[n - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        Ok(Self::from_counts(order, DEFAULT_BACKOFF, vocab_size, counts))
    }

    fn from_counts(
        order: usize,
        backoff: f64,
        vocab_size: usize,
        counts: Vec<HashMap<Vec<TokenId>, u64>>,
    ) -> Self {
        let context_totals = counts
            .iter()
            .map(|table| {
                let mut totals = HashMap::new();
                for (gram, &c) in table {
                    *totals.entry(gram[..gram.len() - 1].to_vec()).or_insert(0) += c;
                }
                totals
            })
            .collect();
        let unigram_total = counts[0].values().sum();
        Self {
            order,
            backoff,
            vocab_size,
            counts,
            context_totals,
            unigram_total,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn backoff(&self) -> f64 {
        self.backoff
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn count(&self, gram: &[TokenId]) -> u64 {
        if gram.is_empty() || gram.len() > self.order {
            return 0;
        }
        self.counts[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    /// Add-one smoothed unigram log-probability.
    pub fn unigram_log_prob(&self, tok: TokenId) -> f64 {
        let c = self.count(&[tok]) as f64;
        ((c + 1.0) / (self.unigram_total as f64 + self.vocab_size as f64)).ln()
    }

    /// Stupid-backoff log-score of `tok` after `context`, which is the
    /// sentence so far (boundary padding is implicit). Only the last
    /// `order - 1` tokens are used.
    pub fn score_continuation(&self, context: &[TokenId], tok: TokenId) -> f64 {
        let keep = self.order - 1;
        let mut ctx: Vec<TokenId> = vec![BOUNDARY; keep.saturating_sub(context.len())];
        ctx.extend_from_slice(&context[context.len().saturating_sub(keep)..]);
        self.score_padded(&ctx, tok)
    }

    fn score_padded(&self, ctx: &[TokenId], tok: TokenId) -> f64 {
        if ctx.is_empty() {
            return self.unigram_log_prob(tok);
        }
        let n = ctx.len() + 1;
        let total = self.context_totals[n - 1].get(ctx).copied().unwrap_or(0);
        if total > 0 {
            let mut gram = ctx.to_vec();
            gram.push(tok);
            let c = self.counts[n - 1].get(&gram).copied().unwrap_or(0);
            if c > 0 {
                return (c as f64 / total as f64).ln();
            }
        }
        self.backoff.ln() + self.score_padded(&ctx[1..], tok)
    }

    /// Log-score of a full sentence including the closing boundary.
    pub fn score_sentence(&self, sent: &[TokenId]) -> f64 {
        let mut total = 0.0;
        for i in 0..sent.len() {
            total += self.score_continuation(&sent[..i], sent[i]);
        }
        total + self.score_continuation(sent, BOUNDARY)
    }

    /// Text format: header, metadata lines, then one n-gram per line as
    /// `order ctx_1 .. ctx_{order-1} token count`, sorted for reproducibility.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let total: usize = self.counts.iter().map(HashMap::len).sum();
        let _ = writeln!(out, "{LM_FORMAT_HEADER}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "backoff {}", self.backoff);
        let _ = writeln!(out, "vocab_size {}", self.vocab_size);
        let _ = writeln!(out, "ngrams {total}");
        for (k, table) in self.counts.iter().enumerate() {
            let mut grams: Vec<_> = table.iter().collect();
            grams.sort();
            for (gram, c) in grams {
                let ids: Vec<String> = gram.iter().map(u32::to_string).collect();
                let _ = writeln!(out, "{} {} {}", k + 1, ids.join(" "), c);
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::corrupt(path, reason);
        let mut lines = text.lines();
        match lines.next() {
            Some(LM_FORMAT_HEADER) => {}
            other => return Err(bad(format!("unsupported header {other:?}"))),
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {name}")))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {name}, got {line:?}")))
        };
        let order: usize = field("order")?.parse().map_err(|e| bad(format!("order: {e}")))?;
        let backoff: f64 = field("backoff")?.parse().map_err(|e| bad(format!("backoff: {e}")))?;
        let vocab_size: usize = field("vocab_size")?
            .parse()
            .map_err(|e| bad(format!("vocab_size: {e}")))?;
        let expected: usize = field("ngrams")?.parse().map_err(|e| bad(format!("ngrams: {e}")))?;
        if order == 0 || !(backoff > 0.0 && backoff <= 1.0) {
            return Err(bad(format!("invalid order {order} or backoff {backoff}")));
        }
        let mut counts = vec![HashMap::new(); order];
        let mut seen = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let nums: Vec<u64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {line:?}: {e}")))?;
            let n = *nums.first().ok_or_else(|| bad("empty record".into()))? as usize;
            if n == 0 || n > order || nums.len() != n + 2 {
                return Err(bad(format!("malformed record {line:?}")));
            }
            let gram: Vec<TokenId> = nums[1..=n].iter().map(|&x| x as TokenId).collect();
            if gram.iter().any(|&t| t as usize >= vocab_size) {
                return Err(bad(format!("token outside vocabulary in {line:?}")));
            }
            counts[n - 1].insert(gram, nums[n + 1]);
            seen += 1;
        }
        if seen != expected {
            return Err(bad(format!("expected {expected} n-grams, found {seen}")));
        }
        Ok(Self::from_counts(order, backoff, vocab_size, counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 1;
    const B: TokenId = 2;
    const C: TokenId = 3;

    fn lm(order: usize) -> NGramModel {
        NGramModel::train(&[vec![A, B], vec![A, B], vec![B, C, A]], order, 5).unwrap()
    }

    #[test]
    fn bigram_prefers_seen_continuation() {
        let m = NGramModel::train(&[vec![A, B], vec![A, B]], 2, 4).unwrap();
        let best = (0..4)
            .max_by(|&x, &y| {
                m.score_continuation(&[A], x)
                    .partial_cmp(&m.score_continuation(&[A], y))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, B);
        assert_eq!(m.score_continuation(&[A], B), 0.0);
    }

    #[test]
    fn unigram_ignores_context() {
        let m = lm(1);
        assert_eq!(m.score_continuation(&[A, B], C), m.score_continuation(&[], C));
    }

    #[test]
    fn unseen_token_is_finite() {
        let m = lm(3);
        assert!(m.score_continuation(&[A], 4).is_finite());
        assert!(m.unigram_log_prob(4).is_finite());
    }

    #[test]
    fn unigram_normalizes() {
        let m = lm(4);
        let z: f64 = (0..5).map(|t| m.unigram_log_prob(t).exp()).sum();
        assert!((z - 1.0).abs() < 1e-9);
    }

    #[test]
    fn context_truncation() {
        let m = lm(2);
        assert_eq!(m.score_continuation(&[C, C, A], B), m.score_continuation(&[A], B));
    }

    #[test]
    fn backoff_is_exact() {
        let m = lm(3);
        // context (A, C) never seen as a trigram context
        let full = m.score_continuation(&[A, C], A);
        let lower = m.score_padded(&[C], A);
        assert_eq!(full, DEFAULT_BACKOFF.ln() + lower);
    }

    #[test]
    fn monotone_in_counts() {
        let base = NGramModel::train(&[vec![A, B], vec![A, C]], 2, 4).unwrap();
        let more = NGramModel::train(&[vec![A, B], vec![A, C], vec![A, B]], 2, 4).unwrap();
        assert!(more.score_continuation(&[A], B) >= base.score_continuation(&[A], B));
    }

    #[test]
    fn empty_corpus_and_bad_tokens() {
        assert!(matches!(
            NGramModel::train::<Vec<TokenId>>(&[], 2, 4),
            Err(Error::EmptyCorpus)
        ));
        assert!(NGramModel::train(&[vec![A, 0]], 2, 4).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        let m = lm(4);
        m.save(&path).unwrap();
        let back = NGramModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.score_sentence(&[A, B, C]), m.score_sentence(&[A, B, C]));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        lm(2).save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("v1", "v9");
        fs::write(&path, text).unwrap();
        assert!(matches!(NGramModel::load(&path), Err(Error::CorruptFile { .. })));
        fs::write(&path, format!("{LM_FORMAT_HEADER}\norder 2\nbackoff 0.4\nvocab_size 4\nngrams 1\n2 1\n")).unwrap();
        assert!(NGramModel::load(&path).is_err());
    }
}
