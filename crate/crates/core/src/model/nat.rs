use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis};

use super::params::{ModelConfig, ModelParams, ParamGrads};
use crate::error::{Error, Result};
use crate::lattice::LogProbMatrix;
use crate::scalar::Real;
use crate::vocab::TokenId;

/// Counts model passes; the training loop is expected to run exactly one
/// forward and one backward per example regardless of reference count.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl PassCounter {
    pub fn forward(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backward(&self) -> u64 {
        self.backward.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }
}

struct BlockCache<F> {
    h_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    ctx: Array2<F>,
    h_mid: Array2<F>,
    z1: Array2<F>,
}

/// Activations saved by [`NatModel::forward`] for the matching backward pass.
pub struct ForwardCache<F> {
    src: Vec<TokenId>,
    upsample: usize,
    blocks: Vec<BlockCache<F>>,
    h_final: Array2<F>,
    log_probs: Array2<F>,
}

impl<F> ForwardCache<F> {
    pub fn t_dec(&self) -> usize {
        self.log_probs.nrows()
    }
}

/// Minimal non-autoregressive transducer: embeddings copied uniformly to the
/// decoder length, single-head self-attention and tanh feed-forward blocks
/// with residuals, and a log-softmax output layer.
#[derive(Debug)]
pub struct NatModel<F> {
    pub cfg: ModelConfig,
    pub params: ModelParams<F>,
    passes: PassCounter,
}

impl<F: Real> Clone for NatModel<F> {
    fn clone(&self) -> Self {
        Self::new(self.cfg, self.params.clone())
    }
}

fn softmax_rows_inplace<F: Real>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
}

impl<F: Real> NatModel<F> {
    pub fn new(cfg: ModelConfig, params: ModelParams<F>) -> Self {
        Self {
            cfg,
            params,
            passes: PassCounter::default(),
        }
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new(cfg, ModelParams::init(&cfg, seed)))
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// Log-probability matrix of `T_dec = upsample * |src|` rows.
    pub fn forward(&self, src: &[TokenId]) -> Result<(LogProbMatrix<F>, ForwardCache<F>)> {
        let cfg = &self.cfg;
        if src.len() > cfg.max_src_len {
            return Err(Error::SourceTooLong {
                len: src.len(),
                max: cfg.max_src_len,
            });
        }
        if let Some(&bad) = src.iter().find(|&&t| t as usize >= cfg.src_vocab) {
            return Err(Error::UnknownToken(bad));
        }
        self.passes.forward.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let t_dec = cfg.t_dec(src.len());
        let mut h = Array2::zeros((t_dec, cfg.d_model));
        for (t, mut row) in h.rows_mut().into_iter().enumerate() {
            let tok = src[t / cfg.upsample] as usize;
            row.assign(&p.src_embed.row(tok));
            row += &p.pos_embed.row(t);
        }
        let scale = F::one() / F::from_count(cfg.d_model).sqrt();
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let q = h.dot(&b.wq);
            let k = h.dot(&b.wk);
            let v = h.dot(&b.wv);
            let mut attn = q.dot(&k.t()) * scale;
            softmax_rows_inplace(&mut attn);
            let ctx = attn.dot(&v);
            let h_mid = &h + &ctx.dot(&b.wo);
            let mut z1 = h_mid.dot(&b.w1) + &b.b1;
            z1.mapv_inplace(F::tanh);
            let h_out = &h_mid + &z1.dot(&b.w2) + &b.b2;
            blocks.push(BlockCache {
                h_in: h,
                q,
                k,
                v,
                attn,
                ctx,
                h_mid,
                z1,
            });
            h = h_out;
        }
        let logits = h.dot(&p.w_out) + &p.b_out;
        let m = LogProbMatrix::from_logits(logits);
        let cache = ForwardCache {
            src: src.to_vec(),
            upsample: cfg.upsample,
            blocks,
            h_final: h,
            log_probs: m.values().clone(),
        };
        Ok((m, cache))
    }

    /// Forward without keeping activations (inference).
    pub fn predict(&self, src: &[TokenId]) -> Result<LogProbMatrix<F>> {
        self.forward(src).map(|(m, _)| m)
    }

    /// Parameter gradients given `grad_m = d loss / d log_probs`.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_m: &Array2<F>) -> Result<ParamGrads<F>> {
        let cfg = &self.cfg;
        if grad_m.dim() != cache.log_probs.dim() {
            return Err(Error::CacheMismatch(format!(
                "gradient shape {:?} vs cached output {:?}",
                grad_m.dim(),
                cache.log_probs.dim()
            )));
        }
        if cache.blocks.len() != self.params.blocks.len()
            || cache.upsample != cfg.upsample
            || cache.h_final.ncols() != cfg.d_model
            || cache.log_probs.ncols() != cfg.tgt_vocab
        {
            return Err(Error::CacheMismatch(
                "cache was produced by a model of a different shape".into(),
            ));
        }
        self.passes.backward.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let mut g = ParamGrads::zeros(cfg);

        // log-softmax: dz = g - softmax(z) * rowsum(g)
        let row_sums = grad_m.sum_axis(Axis(1));
        let mut dz = cache.log_probs.mapv(F::exp);
        for (mut row, &s) in dz.rows_mut().into_iter().zip(row_sums.iter()) {
            row.mapv_inplace(|x| -x * s);
        }
        dz += grad_m;

        g.w_out = cache.h_final.t().dot(&dz);
        g.b_out = dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&p.w_out.t());

        let scale = F::one() / F::from_count(cfg.d_model).sqrt();
        for (bi, (b, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            // feed-forward residual
            gb.w2 = c.z1.t().dot(&dh);
            gb.b2 = dh.sum_axis(Axis(0));
            let mut du = dh.dot(&b.w2.t());
            du.zip_mut_with(&c.z1, |d, &z| *d *= F::one() - z * z);
            gb.w1 = c.h_mid.t().dot(&du);
            gb.b1 = du.sum_axis(Axis(0));
            let dh_mid = dh + du.dot(&b.w1.t());

            // attention residual
            gb.wo = c.ctx.t().dot(&dh_mid);
            let dctx = dh_mid.dot(&b.wo.t());
            let da = dctx.dot(&c.v.t());
            let dv = c.attn.t().dot(&dctx);
            let mut ds = &da * &c.attn;
            let inner = ds.sum_axis(Axis(1));
            for ((mut row, &s), arow) in ds
                .rows_mut()
                .into_iter()
                .zip(inner.iter())
                .zip(c.attn.rows())
            {
                for (x, &a) in row.iter_mut().zip(arow.iter()) {
                    *x -= a * s;
                }
            }
            ds *= scale;
            let dq = ds.dot(&c.k);
            let dk = ds.t().dot(&c.q);
            gb.wq = c.h_in.t().dot(&dq);
            gb.wk = c.h_in.t().dot(&dk);
            gb.wv = c.h_in.t().dot(&dv);
            dh = dh_mid + dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
        }

        for (t, row) in dh.rows().into_iter().enumerate() {
            let tok = cache.src[t / cfg.upsample] as usize;
            let mut pe = g.pos_embed.row_mut(t);
            pe += &row;
            let mut se = g.src_embed.row_mut(tok);
            se += &row;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ffn: 12,
            n_blocks: 2,
            src_vocab: 6,
            tgt_vocab: 5,
            max_src_len: 4,
            upsample: 3,
        }
    }

    #[test]
    fn output_shape_and_normalization() {
        let m = NatModel::<f64>::init(tiny(), 3).unwrap();
        let (lp, cache) = m.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(lp.t_dec(), 12);
        assert_eq!(cache.t_dec(), 12);
        for row in lp.values().rows() {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((z - 1.0).abs() < 1e-6);
        }
        let again = m.predict(&[1, 2, 3, 4]).unwrap();
        assert_eq!(lp, again);
    }

    #[test]
    fn forward_errors() {
        let m = NatModel::<f64>::init(tiny(), 3).unwrap();
        assert!(matches!(
            m.forward(&[1, 1, 1, 1, 1]),
            Err(Error::SourceTooLong { len: 5, max: 4 })
        ));
        assert!(matches!(m.forward(&[9]), Err(Error::UnknownToken(9))));
    }

    #[test]
    fn init_determinism() {
        let a = ModelParams::<f64>::init(&tiny(), 1);
        let b = ModelParams::<f64>::init(&tiny(), 1);
        let c = ModelParams::<f64>::init(&tiny(), 2);
        assert_eq!(a, b);
        assert_ne!(a.src_embed, c.src_embed);
        assert_ne!(a.blocks[0].wq, c.blocks[0].wq);
        assert!(a.all_finite());
    }

    #[test]
    fn zero_gradient_in_zero_gradient_out() {
        let m = NatModel::<f64>::init(tiny(), 3).unwrap();
        let (_, cache) = m.forward(&[1, 2]).unwrap();
        let g = m.backward(&cache, &Array2::zeros((6, 5))).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn cache_mismatch() {
        let m = NatModel::<f64>::init(tiny(), 3).unwrap();
        let (_, cache) = m.forward(&[1, 2]).unwrap();
        assert!(matches!(
            m.backward(&cache, &Array2::zeros((3, 5))),
            Err(Error::CacheMismatch(_))
        ));
        let mut other_cfg = tiny();
        other_cfg.n_blocks = 1;
        let other = NatModel::<f64>::init(other_cfg, 3).unwrap();
        assert!(matches!(
            other.backward(&cache, &Array2::zeros((6, 5))),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn pass_counter_counts() {
        let m = NatModel::<f64>::init(tiny(), 3).unwrap();
        let (_, cache) = m.forward(&[1]).unwrap();
        m.backward(&cache, &Array2::zeros((3, 5))).unwrap();
        assert_eq!((m.passes().forward(), m.passes().backward()), (1, 1));
        m.passes().reset();
        assert_eq!(m.passes().forward(), 0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = sum(c * log_probs) for a fixed random c
        let cfg = tiny();
        let mut model = NatModel::<f64>::init(cfg, 5).unwrap();
        let src = [3, 1, 2];
        let coef = Array2::from_shape_fn((9, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let loss = |m: &NatModel<f64>| (m.predict(&src).unwrap().values() * &coef).sum();
        let (_, cache) = model.forward(&src).unwrap();
        let g = model.backward(&cache, &coef).unwrap();
        let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-6;
        for (ti, grad) in analytic.iter().enumerate() {
            for i in (0..grad.len()).step_by(7) {
                let orig = model.params.slices()[ti][i];
                model.params.slices_mut()[ti][i] = orig + h;
                let fp = loss(&model);
                model.params.slices_mut()[ti][i] = orig - h;
                let fm = loss(&model);
                model.params.slices_mut()[ti][i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                assert!((fd - grad[i]).abs() / denom < 1e-4, "tensor {ti} idx {i}: {fd} vs {}", grad[i]);
            }
        }
    }
}
