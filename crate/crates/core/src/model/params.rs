use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Shape of the toy non-autoregressive model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_blocks: usize,
    pub src_vocab: usize,
    /// Output vocabulary size, blank included.
    pub tgt_vocab: usize,
    pub max_src_len: usize,
    /// Decoder length per source token.
    pub upsample: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_blocks", self.n_blocks),
            ("src_vocab", self.src_vocab),
            ("max_src_len", self.max_src_len),
            ("upsample", self.upsample),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.tgt_vocab < 2 {
            return Err(Error::InvalidConfig("tgt_vocab must be >= 2".into()));
        }
        Ok(())
    }

    pub fn max_t_dec(&self) -> usize {
        self.max_src_len * self.upsample
    }

    pub fn t_dec(&self, src_len: usize) -> usize {
        src_len * self.upsample
    }

    /// Expected `(name, shape)` of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut shapes = vec![
            ("src_embed".to_string(), vec![self.src_vocab, d]),
            ("pos_embed".to_string(), vec![self.max_t_dec(), d]),
        ];
        for b in 0..self.n_blocks {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![d, f]),
                ("b1", vec![f]),
                ("w2", vec![f, d]),
                ("b2", vec![d]),
            ] {
                shapes.push((format!("blocks.{b}.{name}"), shape));
            }
        }
        shapes.push(("w_out".to_string(), vec![d, self.tgt_vocab]));
        shapes.push(("b_out".to_string(), vec![self.tgt_vocab]));
        shapes
    }
}

/// One attention + feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All learnable tensors. Also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub src_embed: Array2<F>,
    pub pos_embed: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

/// Gradients share the parameter layout.
pub type ParamGrads<F> = ModelParams<F>;

impl<F: Real> ModelParams<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        Self {
            src_embed: Array2::zeros((cfg.src_vocab, d)),
            pos_embed: Array2::zeros((cfg.max_t_dec(), d)),
            blocks: (0..cfg.n_blocks)
                .map(|_| Block {
                    wq: Array2::zeros((d, d)),
                    wk: Array2::zeros((d, d)),
                    wv: Array2::zeros((d, d)),
                    wo: Array2::zeros((d, d)),
                    w1: Array2::zeros((d, f)),
                    b1: Array1::zeros(f),
                    w2: Array2::zeros((f, d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
            w_out: Array2::zeros((d, cfg.tgt_vocab)),
            b_out: Array1::zeros(cfg.tgt_vocab),
        }
    }

    /// Zero-mean uniform initialization with half-width `1/sqrt(fan_in)`;
    /// biases start at zero. Embedding tables are lookups (fan-in 1).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut Array2<F>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            a.mapv_inplace(|_| F::lit(dist.sample(&mut rng)));
        };
        let mut p = Self::zeros(cfg);
        fill(&mut p.src_embed, 1);
        fill(&mut p.pos_embed, 1);
        for b in &mut p.blocks {
            fill(&mut b.wq, cfg.d_model);
            fill(&mut b.wk, cfg.d_model);
            fill(&mut b.wv, cfg.d_model);
            fill(&mut b.wo, cfg.d_model);
            fill(&mut b.w1, cfg.d_model);
            fill(&mut b.w2, cfg.d_ffn);
        }
        fill(&mut p.w_out, cfg.d_model);
        p
    }

    /// Flat views of every tensor in [`ModelConfig::tensor_shapes`] order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![
            self.src_embed.as_slice().unwrap(),
            self.pos_embed.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            out.extend([
                b.wq.as_slice().unwrap(),
                b.wk.as_slice().unwrap(),
                b.wv.as_slice().unwrap(),
                b.wo.as_slice().unwrap(),
                b.w1.as_slice().unwrap(),
                b.b1.as_slice().unwrap(),
                b.w2.as_slice().unwrap(),
                b.b2.as_slice().unwrap(),
            ]);
        }
        out.push(self.w_out.as_slice().unwrap());
        out.push(self.b_out.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.src_embed.as_slice_mut().unwrap(),
            self.pos_embed.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.wq.as_slice_mut().unwrap(),
                b.wk.as_slice_mut().unwrap(),
                b.wv.as_slice_mut().unwrap(),
                b.wo.as_slice_mut().unwrap(),
                b.w1.as_slice_mut().unwrap(),
                b.b1.as_slice_mut().unwrap(),
                b.w2.as_slice_mut().unwrap(),
                b.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Whether tensor shapes agree with `cfg`.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        let expected = cfg.tensor_shapes();
        let actual = self.slices();
        expected.len() == actual.len()
            && expected
                .iter()
                .zip(actual)
                .all(|((_, shape), s)| shape.iter().product::<usize>() == s.len())
            && self.src_embed.dim() == (cfg.src_vocab, cfg.d_model)
            && self.w_out.dim() == (cfg.d_model, cfg.tgt_vocab)
    }
}
