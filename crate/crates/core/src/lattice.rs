//! Log-space CTC lattice: collapsing, the forward-backward recursion over the
//! blank-interleaved label sequence, alignment sampling, and a brute-force
//! alignment enumerator used as a test oracle.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{log_add, log_sum_exp, Real};
use crate::vocab::{TokenId, Vocab, BLANK};

/// Tolerance on `logsumexp(row) = 0` accepted by [`LogProbMatrix::from_log_probs`].
pub const ROW_NORM_TOL: f64 = 1e-6;

/// `T_dec x V` table of natural-log probabilities, one normalized row per
/// decoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix<F> {
    values: Array2<F>,
}

impl<F: Real> LogProbMatrix<F> {
    /// Wraps log-probabilities, checking that every row is normalized.
    pub fn from_log_probs(values: Array2<F>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::InvalidMatrix(format!(
                "vocabulary width {} < 2",
                values.ncols()
            )));
        }
        for (t, row) in values.rows().into_iter().enumerate() {
            let z = log_sum_exp(row.iter().copied()).as_f64();
            if !(z.abs() <= ROW_NORM_TOL) {
                return Err(Error::InvalidMatrix(format!(
                    "row {t} has logsumexp {z}, expected 0"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Applies a row-wise log-softmax to arbitrary finite scores.
    pub fn from_logits(logits: Array2<F>) -> Self {
        let mut values = logits;
        for mut row in values.rows_mut() {
            let z = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|x| x - z);
        }
        Self { values }
    }

    /// Every entry `log(1/V)`.
    pub fn uniform(t_dec: usize, vocab_size: usize) -> Self {
        let lp = -F::from_count(vocab_size).ln();
        Self {
            values: Array2::from_elem((t_dec, vocab_size), lp),
        }
    }

    #[cfg(test)]
    pub(crate) fn from_normalized_unchecked(values: Array2<F>) -> Self {
        Self { values }
    }

    pub fn t_dec(&self) -> usize {
        self.values.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.values.ncols()
    }

    #[inline]
    pub fn get(&self, t: usize, v: TokenId) -> F {
        self.values[[t, v as usize]]
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, F> {
        self.values.row(t)
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn into_values(self) -> Array2<F> {
        self.values
    }
}

/// Merges consecutive repeats, then removes blanks.
pub fn collapse(alignment: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &tok in alignment {
        if Some(tok) != prev && tok != BLANK {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

/// Largest `T_dec` accepted by [`enumerate_alignments`].
pub const ENUM_MAX_T: usize = 8;
/// Largest vocabulary accepted by [`enumerate_alignments`].
pub const ENUM_MAX_V: usize = 5;

/// Every alignment of length `t_dec` collapsing to `y`, by exhaustive search
/// over all `V^t_dec` strings. Test oracle only.
pub fn enumerate_alignments(
    y: &[TokenId],
    t_dec: usize,
    vocab: &Vocab,
) -> Result<Vec<Vec<TokenId>>> {
    let v = vocab.size();
    if t_dec > ENUM_MAX_T || v > ENUM_MAX_V {
        return Err(Error::ScaleExceeded(format!(
            "t_dec={t_dec} (max {ENUM_MAX_T}), V={v} (max {ENUM_MAX_V})"
        )));
    }
    Ok(AllAlignments::new(t_dec, v)
        .filter(|a| collapse(a) == y)
        .collect())
}

/// Iterator over all `V^T` alignments in lexicographic order.
pub struct AllAlignments {
    current: Option<Vec<TokenId>>,
    vocab_size: TokenId,
}

impl AllAlignments {
    pub fn new(t_dec: usize, vocab_size: usize) -> Self {
        Self {
            current: (vocab_size > 0).then(|| vec![0; t_dec]),
            vocab_size: vocab_size as TokenId,
        }
    }
}

impl Iterator for AllAlignments {
    type Item = Vec<TokenId>;

    fn next(&mut self) -> Option<Vec<TokenId>> {
        let out = self.current.take()?;
        let mut next = out.clone();
        let mut carried = true;
        for slot in next.iter_mut().rev() {
            *slot += 1;
            if *slot < self.vocab_size {
                carried = false;
                break;
            }
            *slot = 0;
        }
        if !carried {
            self.current = Some(next);
        }
        Some(out)
    }
}

/// `sum_t m[t][a_t]`.
pub fn alignment_log_prob<F: Real>(m: &LogProbMatrix<F>, alignment: &[TokenId]) -> F {
    alignment
        .iter()
        .enumerate()
        .map(|(t, &tok)| m.get(t, tok))
        .sum()
}

/// Draws each position independently from `exp(m[t][.])`.
pub fn sample_alignment<F: Real, R: Rng + ?Sized>(
    m: &LogProbMatrix<F>,
    rng: &mut R,
) -> Vec<TokenId> {
    (0..m.t_dec())
        .map(|t| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let row = m.row(t);
            let mut last_live = 0;
            for (v, &lp) in row.iter().enumerate() {
                let p = lp.as_f64().exp();
                if p > 0.0 {
                    last_live = v;
                }
                acc += p;
                if u < acc {
                    return v as TokenId;
                }
            }
            // rounding left u above the accumulated mass
            last_live as TokenId
        })
        .collect()
}

/// Blank-interleaved label sequence `_ y1 _ y2 ... yL _`.
fn extended_labels(y: &[TokenId]) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(BLANK);
    for &tok in y {
        ext.push(tok);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered directly from `s - 2`.
#[inline]
fn can_skip(ext: &[TokenId], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t * S + s]`, emission at `t` included.
fn forward_vars<F: Real>(m: &LogProbMatrix<F>, ext: &[TokenId]) -> Vec<F> {
    let t_dec = m.t_dec();
    let states = ext.len();
    let ninf = F::neg_infinity();
    let mut alpha = vec![ninf; t_dec * states];
    if t_dec == 0 {
        return alpha;
    }
    alpha[0] = m.get(0, ext[0]);
    if states > 1 {
        alpha[1] = m.get(0, ext[1]);
    }
    for t in 1..t_dec {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let cur = &mut cur[..states];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc != ninf {
                cur[s] = acc + m.get(t, ext[s]);
            }
        }
    }
    alpha
}

/// Backward variables `beta[t * S + s]`, emission at `t` excluded.
fn backward_vars<F: Real>(m: &LogProbMatrix<F>, ext: &[TokenId]) -> Vec<F> {
    let t_dec = m.t_dec();
    let states = ext.len();
    let ninf = F::neg_infinity();
    let mut beta = vec![ninf; t_dec * states];
    if t_dec == 0 {
        return beta;
    }
    let last = (t_dec - 1) * states;
    beta[last + states - 1] = F::zero();
    if states > 1 {
        beta[last + states - 2] = F::zero();
    }
    for t in (0..t_dec - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let next = &next[..states];
        for s in 0..states {
            let mut acc = ninf;
            for s2 in [s, s + 1, s + 2] {
                if s2 >= states || (s2 == s + 2 && !can_skip(ext, s2)) {
                    continue;
                }
                if next[s2] != ninf {
                    acc = log_add(acc, next[s2] + m.get(t + 1, ext[s2]));
                }
            }
            cur[s] = acc;
        }
    }
    beta
}

fn total_from_alpha<F: Real>(alpha: &[F], t_dec: usize, states: usize) -> F {
    if t_dec == 0 {
        return if states == 1 { F::zero() } else { F::neg_infinity() };
    }
    let last = &alpha[(t_dec - 1) * states..];
    let mut total = last[states - 1];
    if states > 1 {
        total = log_add(total, last[states - 2]);
    }
    total
}

/// `log p(y)`: log of the summed probability of every alignment collapsing to
/// `y`. Returns `-inf` when no alignment of length `T_dec` exists.
pub fn ctc_log_prob<F: Real>(m: &LogProbMatrix<F>, y: &[TokenId]) -> F {
    let ext = extended_labels(y);
    let alpha = forward_vars(m, &ext);
    total_from_alpha(&alpha, m.t_dec(), ext.len())
}

/// `log p(y)` and the gradient of `-log p(y)` with respect to the matrix
/// entries: `grad[t][v] = -P(a_t = v | a collapses to y)`.
pub fn ctc_grad<F: Real>(m: &LogProbMatrix<F>, y: &[TokenId]) -> Result<(F, Array2<F>)> {
    let ext = extended_labels(y);
    let states = ext.len();
    let t_dec = m.t_dec();
    let alpha = forward_vars(m, &ext);
    let log_p = total_from_alpha(&alpha, t_dec, states);
    if log_p == F::neg_infinity() {
        return Err(Error::InfeasibleReference);
    }
    let beta = backward_vars(m, &ext);
    let mut grad = Array2::zeros((t_dec, m.vocab_size()));
    for t in 0..t_dec {
        for s in 0..states {
            let lp = alpha[t * states + s] + beta[t * states + s];
            if lp != F::neg_infinity() {
                grad[[t, ext[s] as usize]] -= (lp - log_p).exp();
            }
        }
    }
    Ok((log_p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: TokenId = 1;
    const B: TokenId = 2;

    fn vocab(n: usize) -> Vocab {
        Vocab::from_symbols((1..n).map(|i| format!("t{i}"))).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, t: usize, v: usize) -> LogProbMatrix<f64> {
        let logits = Array2::from_shape_fn((t, v), |_| rng.gen_range(-2.0..2.0));
        LogProbMatrix::from_logits(logits)
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[A, A, BLANK, B]), vec![A, B]);
        assert_eq!(collapse(&[BLANK, BLANK, BLANK]), Vec::<TokenId>::new());
        assert_eq!(collapse(&[A, BLANK, A]), vec![A, A]);
    }

    #[test]
    fn enumeration_examples() {
        let v = vocab(2);
        let mut got = enumerate_alignments(&[A], 2, &v).unwrap();
        got.sort();
        assert_eq!(got, vec![vec![BLANK, A], vec![A, BLANK], vec![A, A]]);
        assert_eq!(enumerate_alignments(&[], 2, &v).unwrap(), vec![vec![BLANK, BLANK]]);
        assert!(enumerate_alignments(&[A, A], 2, &v).unwrap().is_empty());
    }

    #[test]
    fn enumeration_guard() {
        assert!(matches!(
            enumerate_alignments(&[A], 9, &vocab(2)),
            Err(Error::ScaleExceeded(_))
        ));
        assert!(matches!(
            enumerate_alignments(&[A], 2, &vocab(6)),
            Err(Error::ScaleExceeded(_))
        ));
    }

    #[test]
    fn uniform_two_by_two() {
        let m = LogProbMatrix::<f64>::uniform(2, 2);
        assert!((ctc_log_prob(&m, &[A]) - 0.75f64.ln()).abs() < 1e-12);
        assert!((ctc_log_prob(&m, &[]) - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(ctc_log_prob(&m, &[A, A, A]), f64::NEG_INFINITY);
        assert_eq!(ctc_log_prob(&m, &[A, A]), f64::NEG_INFINITY);
    }

    #[test]
    fn grad_uniform_posterior() {
        let m = LogProbMatrix::<f64>::uniform(2, 2);
        let (_, g) = ctc_grad(&m, &[A]).unwrap();
        assert!((g[[0, 1]] + 2.0 / 3.0).abs() < 1e-12);
        assert!((g[[0, 0]] + 1.0 / 3.0).abs() < 1e-12);
        for row in g.rows() {
            assert!((row.sum() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_infeasible_is_error() {
        let m = LogProbMatrix::<f64>::uniform(2, 3);
        assert!(matches!(ctc_grad(&m, &[A, A]), Err(Error::InfeasibleReference)));
    }

    #[test]
    fn empty_matrix_edge() {
        let m = LogProbMatrix::<f64>::from_normalized_unchecked(Array2::zeros((0, 3)));
        assert_eq!(ctc_log_prob(&m, &[]), 0.0);
        assert_eq!(ctc_log_prob(&m, &[A]), f64::NEG_INFINITY);
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4);
            let voc = vocab(v);
            let m = random_matrix(&mut rng, t, v);
            let len = rng.gen_range(0..=t);
            let y: Vec<TokenId> = (0..len).map(|_| rng.gen_range(1..v as TokenId)).collect();
            let brute = log_sum_exp(
                enumerate_alignments(&y, t, &voc)
                    .unwrap()
                    .iter()
                    .map(|a| alignment_log_prob(&m, a)),
            );
            let dp = ctc_log_prob(&m, &y);
            if brute == f64::NEG_INFINITY {
                assert_eq!(dp, brute);
            } else {
                assert!((dp - brute).abs() < 1e-9, "{dp} vs {brute}");
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let t = rng.gen_range(2..=6);
            let v = rng.gen_range(2..=4);
            let m = random_matrix(&mut rng, t, v);
            let len = rng.gen_range(0..=t / 2);
            let y: Vec<TokenId> = (0..len).map(|_| rng.gen_range(1..v as TokenId)).collect();
            let (_, g) = ctc_grad(&m, &y).unwrap();
            let h = 1e-5;
            for i in 0..t {
                for j in 0..v {
                    let mut plus = m.values().clone();
                    plus[[i, j]] += h;
                    let mut minus = m.values().clone();
                    minus[[i, j]] -= h;
                    let fp = -ctc_log_prob(&LogProbMatrix::from_normalized_unchecked(plus), &y);
                    let fm = -ctc_log_prob(&LogProbMatrix::from_normalized_unchecked(minus), &y);
                    let fd = (fp - fm) / (2.0 * h);
                    let denom = fd.abs().max(g[[i, j]].abs()).max(1e-8);
                    assert!((fd - g[[i, j]]).abs() / denom < 1e-5, "{fd} vs {}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn sampling_one_hot_and_determinism() {
        let mut logits = Array2::from_elem((3, 3), -1e30f64);
        logits[[0, 1]] = 0.0;
        logits[[1, 0]] = 0.0;
        logits[[2, 2]] = 0.0;
        let m = LogProbMatrix::from_logits(logits);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_alignment(&m, &mut rng), vec![1, 0, 2]);
        }
        let u = LogProbMatrix::<f64>::uniform(4, 3);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_alignment(&u, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn alignment_log_prob_examples() {
        let u = LogProbMatrix::<f64>::uniform(3, 2);
        assert!((alignment_log_prob(&u, &[0, 1, 1]) - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn from_log_probs_rejects_unnormalized() {
        assert!(LogProbMatrix::from_log_probs(Array2::<f64>::zeros((2, 2))).is_err());
        assert!(LogProbMatrix::from_log_probs(Array2::from_elem((2, 2), 0.5f64.ln())).is_ok());
    }

    #[test]
    fn all_alignments_count() {
        assert_eq!(AllAlignments::new(3, 3).count(), 27);
        assert_eq!(AllAlignments::new(0, 3).count(), 1);
    }
}
