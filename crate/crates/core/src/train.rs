//! Training loops: multi-reference CTC training with a selectable objective,
//! and max-reward RL fine-tuning. Both run one model forward and one backward
//! per example, whatever the number of references.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiRefExample;
use crate::error::{Error, Result};
use crate::lattice::ctc_grad;
use crate::loss::{AnnealSchedule, LossMode};
use crate::model::{AdamConfig, AdamState, NatModel, ParamGrads};
use crate::rl::{rl_loss_and_grad, RLConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossMode,
    /// First-stage fraction of the annealing schedule.
    pub lambda: f64,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: LossMode::Anneal,
            lambda: 2.0 / 3.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::new(self.lambda, self.steps)
    }
}

/// Endless shuffled epochs over `0..n`, order fixed by the seed.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Loss and parameter gradient of one example under a multi-reference
/// objective. `None` when no reference is reachable at this decoder length.
pub fn example_gradient<F: Real>(
    model: &NatModel<F>,
    ex: &MultiRefExample,
    mode: LossMode,
    step: u64,
    sched: &AnnealSchedule,
) -> Result<Option<(F, ParamGrads<F>)>> {
    let (m, cache) = model.forward(&ex.src)?;
    let mut log_probs = Vec::with_capacity(ex.k());
    let mut grads = Vec::with_capacity(ex.k());
    for r in &ex.refs {
        match ctc_grad(&m, r) {
            Ok((lp, g)) => {
                log_probs.push(lp);
                grads.push(Some(g));
            }
            Err(Error::InfeasibleReference) => {
                log_probs.push(F::neg_infinity());
                grads.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let objective = match mode.evaluate(&log_probs, step, sched) {
        Ok(o) => o,
        Err(Error::InfeasibleReferences) => {
            log::warn!("skipping example with no feasible reference");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut grad_m = Array2::zeros((m.t_dec(), m.vocab_size()));
    for (w, g) in objective.weights.iter().zip(&grads) {
        if let Some(g) = g {
            if *w != F::zero() {
                grad_m.scaled_add(*w, g);
            }
        }
    }
    let grads = model.backward(&cache, &grad_m)?;
    Ok(Some((objective.loss, grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub mean_loss: f64,
    pub examples: usize,
}

/// Multi-reference trainer owning the model and optimizer state.
pub struct Trainer<F> {
    pub model: NatModel<F>,
    pub adam: AdamState<F>,
    pub cfg: TrainConfig,
    sched: AnnealSchedule,
    sampler: BatchSampler,
    step: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: NatModel<F>, cfg: TrainConfig, corpus_len: usize) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        let sched = cfg.schedule()?;
        Ok(Self {
            adam: AdamState::new(&model.cfg, cfg.adam),
            model,
            sched,
            sampler: BatchSampler::new(corpus_len, cfg.seed),
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step on an explicit batch; the annealing position is the
    /// number of steps already taken.
    pub fn train_step(&mut self, batch: &[&MultiRefExample]) -> Result<StepStats> {
        let t = self.step.min(self.sched.total_steps);
        let mut total = ParamGrads::zeros(&self.model.cfg);
        let mut loss_sum = 0.0;
        let mut used = 0;
        for ex in batch {
            if let Some((loss, g)) = example_gradient(&self.model, ex, self.cfg.loss, t, &self.sched)? {
                total.add_scaled(&g, F::one());
                loss_sum += loss.as_f64();
                used += 1;
            }
        }
        if used > 0 {
            total.scale(F::one() / F::from_count(used));
            self.adam.update(&mut self.model.params, &total);
        }
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            mean_loss: if used > 0 { loss_sum / used as f64 } else { 0.0 },
            examples: used,
        })
    }

    /// Runs the configured number of steps over shuffled batches of `corpus`.
    pub fn train(&mut self, corpus: &[MultiRefExample]) -> Result<Vec<StepStats>> {
        let mut history = Vec::with_capacity(self.cfg.steps as usize);
        while self.step < self.cfg.steps {
            let idx = self.sampler.next_batch(self.cfg.batch_size);
            let batch: Vec<&MultiRefExample> = idx.iter().map(|&i| &corpus[i]).collect();
            let stats = self.train_step(&batch)?;
            if stats.step % 100 == 0 {
                log::info!("step {} loss {:.4}", stats.step, stats.mean_loss);
            }
            history.push(stats);
        }
        Ok(history)
    }

    pub fn into_model(self) -> NatModel<F> {
        self.model
    }
}

/// Max-reward RL fine-tuning. Uses its own optimizer state; the annealing
/// schedule of pretraining is not involved.
pub fn finetune<F: Real>(
    model: NatModel<F>,
    corpus: &[MultiRefExample],
    cfg: &RLConfig,
) -> Result<(NatModel<F>, Vec<StepStats>)> {
    cfg.validate()?;
    let mut model = model;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.cfg, adam_cfg);
    let mut sampler = BatchSampler::new(corpus.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut history = Vec::new();
    for step in 1..=cfg.steps {
        let mut total = ParamGrads::zeros(&model.cfg);
        let mut loss_sum = 0.0;
        let idx = sampler.next_batch(cfg.batch_size);
        for &i in &idx {
            let ex = &corpus[i];
            let (m, cache) = model.forward(&ex.src)?;
            let mut grad_m = Array2::zeros((m.t_dec(), m.vocab_size()));
            for _ in 0..cfg.samples {
                let s = rl_loss_and_grad(&m, &ex.refs, cfg.reward_scale, &mut rng)?;
                grad_m.scaled_add(F::one() / F::from_count(cfg.samples), &s.grad);
                loss_sum += s.loss.as_f64() / cfg.samples as f64;
            }
            let g = model.backward(&cache, &grad_m)?;
            total.add_scaled(&g, F::one());
        }
        if !idx.is_empty() {
            total.scale(F::one() / F::from_count(idx.len()));
            adam.update(&mut model.params, &total);
        }
        history.push(StepStats {
            step,
            mean_loss: loss_sum / idx.len().max(1) as f64,
            examples: idx.len(),
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ffn: 8,
            n_blocks: 1,
            src_vocab: 5,
            tgt_vocab: 5,
            max_src_len: 3,
            upsample: 3,
        }
    }

    fn corpus() -> Vec<MultiRefExample> {
        vec![
            MultiRefExample::new(vec![1, 2], vec![vec![3, 4]]).unwrap(),
            MultiRefExample::new(vec![2, 1], vec![vec![4, 3]]).unwrap(),
            MultiRefExample::new(vec![1, 1, 2], vec![vec![3, 3, 4], vec![4, 4]]).unwrap(),
        ]
    }

    #[test]
    fn sampler_covers_epochs() {
        let mut s = BatchSampler::new(5, 3);
        let mut seen: Vec<usize> = s.next_batch(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(7).len(), 7);
        assert!(BatchSampler::new(0, 1).next_batch(3).is_empty());
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let model = NatModel::<f64>::init(cfg(), 1).unwrap();
        let tc = TrainConfig {
            steps: 50,
            batch_size: 3,
            adam: AdamConfig { lr: 1e-2, warmup_steps: 5, ..AdamConfig::default() },
            loss: LossMode::Sum,
            ..TrainConfig::default()
        };
        let data = corpus();
        let mut tr = Trainer::new(model, tc, data.len()).unwrap();
        let batch: Vec<&MultiRefExample> = data.iter().collect();
        let first = tr.train_step(&batch).unwrap().mean_loss;
        let mut last = first;
        for _ in 0..49 {
            last = tr.train_step(&batch).unwrap().mean_loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn one_pass_per_example() {
        let model = NatModel::<f64>::init(cfg(), 1).unwrap();
        let data = corpus();
        let mut tr = Trainer::new(model, TrainConfig { steps: 4, ..TrainConfig::default() }, data.len()).unwrap();
        tr.train_step(&[&data[2]]).unwrap();
        let p = tr.model.passes();
        assert_eq!((p.forward(), p.backward()), (1, 1));
    }

    #[test]
    fn infeasible_example_is_skipped() {
        let model = NatModel::<f64>::init(cfg(), 1).unwrap();
        let ex = MultiRefExample::new(vec![1], vec![vec![3, 3, 3]]).unwrap();
        let sched = AnnealSchedule::new(0.5, 10).unwrap();
        assert!(example_gradient(&model, &ex, LossMode::Max, 0, &sched).unwrap().is_none());
    }

    #[test]
    fn deterministic_training() {
        let run = || {
            let model = NatModel::<f64>::init(cfg(), 4).unwrap();
            let tc = TrainConfig { steps: 6, batch_size: 2, ..TrainConfig::default() };
            let data = corpus();
            let mut tr = Trainer::new(model, tc, data.len()).unwrap();
            let h = tr.train(&data).unwrap();
            (h.last().unwrap().mean_loss, tr.into_model().params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(pa, pb);
    }

    #[test]
    fn finetune_zero_lr_is_identity_and_seeded() {
        let data = corpus();
        let model = NatModel::<f64>::init(cfg(), 2).unwrap();
        let (same, h) = finetune(model.clone(), &data, &RLConfig { steps: 0, ..RLConfig::default() }).unwrap();
        assert!(h.is_empty());
        assert_eq!(same.params, model.params);
        let rc = RLConfig { steps: 3, batch_size: 2, lr: 0.0, ..RLConfig::default() };
        let (tuned, _) = finetune(model.clone(), &data, &rc).unwrap();
        assert_eq!(tuned.params, model.params);
        let rc = RLConfig { steps: 3, batch_size: 2, lr: 1e-3, ..RLConfig::default() };
        let (a, ha) = finetune(model.clone(), &data, &rc).unwrap();
        let (b, hb) = finetune(model, &data, &rc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ha, hb);
    }
}
