use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams, ParamGrads};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `lr`, then constant. `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    first: ModelParams<F>,
    second: ModelParams<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(model_cfg: &ModelConfig, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: ModelParams::zeros(model_cfg),
            second: ModelParams::zeros(model_cfg),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &ParamGrads<F>) {
        self.step += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let eps = F::lit(self.cfg.eps);
        let lr = F::lit(self.cfg.lr_at(self.step));
        let c1 = F::one() - b1.powi(self.step as i32);
        let c2 = F::one() - b2.powi(self.step as i32);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            d_ffn: 4,
            n_blocks: 1,
            src_vocab: 3,
            tgt_vocab: 3,
            max_src_len: 2,
            upsample: 2,
        }
    }

    #[test]
    fn default_moments() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.98, 1e-8));
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = AdamConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(2), 0.5);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(100), 1.0);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = ModelParams::<f64>::init(&cfg(), 1);
        let before = p.clone();
        let mut s = AdamState::new(&cfg(), AdamConfig::default());
        s.update(&mut p, &ModelParams::zeros(&cfg()));
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step lr * sign(g)
        let mut p = ModelParams::<f64>::zeros(&cfg());
        let mut g = ModelParams::<f64>::zeros(&cfg());
        g.b_out[0] = 3.0;
        g.b_out[1] = -0.01;
        let mut s = AdamState::new(&cfg(), AdamConfig { lr: 0.1, warmup_steps: 0, ..AdamConfig::default() });
        s.update(&mut p, &g);
        assert!((p.b_out[0] + 0.1).abs() < 1e-6);
        assert!((p.b_out[1] - 0.1).abs() < 1e-5);
        assert_eq!(p.b_out[2], 0.0);
    }
}
