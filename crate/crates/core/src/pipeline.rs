//! The diverse distillation experiment on the synthetic two-mode task.
//!
//! Stages: generate data, train `k` teachers that differ only in their seed,
//! decode the training set with every teacher to build a multi-reference
//! corpus, train students under each loss mode, fine-tune with max-reward RL,
//! and evaluate. Each stage reads and writes files below one run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_corpus, save_corpus, MultiRefExample, SynthCorpus, SynthLexicon, SynthTaskConfig};
use crate::decode::{decode_best, DecodeParams};
use crate::error::{Error, Result};
use crate::lm::NGramModel;
use crate::loss::{AnnealSchedule, LossMode};
use crate::metrics::{corpus_bleu, max_reward, pwb, rfb, BleuParams, MetricReport};
use crate::model::{load_checkpoint, save_checkpoint, AdamConfig, ModelConfig, NatModel};
use crate::rl::RLConfig;
use crate::train::{finetune, TrainConfig, Trainer};
use crate::vocab::TokenId;
use crate::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mode_a_prob: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let d = SynthTaskConfig::default();
        Self {
            symbols: d.symbols,
            min_len: d.min_len,
            max_len: d.max_len,
            mode_a_prob: d.mode_a_prob,
            train_size: d.train_size,
            dev_size: d.dev_size,
            test_size: d.test_size,
        }
    }
}

impl TaskSection {
    pub fn synth_config(&self, seed: u64) -> SynthTaskConfig {
        SynthTaskConfig {
            symbols: self.symbols,
            min_len: self.min_len,
            max_len: self.max_len,
            mode_a_prob: self.mode_a_prob,
            train_size: self.train_size,
            dev_size: self.dev_size,
            test_size: self.test_size,
            seed,
        }
    }

    pub fn lexicon(&self) -> SynthLexicon {
        SynthLexicon {
            symbols: self.symbols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_blocks: usize,
    pub upsample: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ffn: 64,
            n_blocks: 2,
            upsample: 3,
        }
    }
}

/// Optimization budget of one supervised training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
        }
    }
}

impl StageConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub steps: u64,
    pub samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub reward_scale: f64,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            steps: 100,
            samples: 1,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 20,
            reward_scale: 100.0,
        }
    }
}

/// Teacher decoding for distillation. A nonzero `alpha` fuses an n-gram LM
/// of order `lm_order`, trained on the raw training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub beam: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lm_order: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            beam: DecodeParams::TEACHER_BEAM,
            alpha: 1.0,
            beta: 0.0,
            lm_order: 2,
        }
    }
}

impl DistillSection {
    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            beam: self.beam,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed: data generation, teacher `i` uses `seed + i - 1`.
    pub seed: u64,
    /// Number of teachers.
    pub k: usize,
    /// First-stage fraction of the annealing schedule.
    pub lambda: f64,
    /// Loss of the main student, which is also RL fine-tuned.
    pub loss: LossMode,
    /// Also train the single-reference baseline and every other loss mode.
    pub ablation: bool,
    /// Students trained per system, each with its own seed; rows report means.
    pub replicates: usize,
    /// Order of the LM trained on the distilled references.
    pub lm_order: usize,
    pub task: TaskSection,
    pub model: ModelDims,
    pub teacher: StageConfig,
    pub student: StageConfig,
    pub rl: RlSection,
    pub distill: DistillSection,
    /// Decoding for the ablation rows.
    pub eval: DecodeParams,
    /// Beam search with LM fusion for the final row.
    pub fused_eval: DecodeParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            k: 3,
            lambda: 2.0 / 3.0,
            loss: LossMode::Anneal,
            ablation: true,
            replicates: 3,
            lm_order: 4,
            task: TaskSection::default(),
            model: ModelDims::default(),
            teacher: StageConfig::default(),
            student: StageConfig::default(),
            rl: RlSection::default(),
            distill: DistillSection::default(),
            eval: DecodeParams::plain(1),
            fused_eval: DecodeParams::with_lm(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be >= 1".into()));
        }
        AnnealSchedule::new(self.lambda, self.student.steps.max(1))?;
        for (name, stage) in [("teacher", &self.teacher), ("student", &self.student)] {
            if stage.steps == 0 || stage.batch_size == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} steps and batch size must be >= 1"
                )));
            }
        }
        if self.lm_order == 0 || self.distill.lm_order == 0 {
            return Err(Error::InvalidConfig("n-gram order must be >= 1".into()));
        }
        if self.distill.beam == 0 || self.eval.beam == 0 || self.fused_eval.beam == 0 {
            return Err(Error::InvalidConfig("beam width must be >= 1".into()));
        }
        self.task.synth_config(self.seed).validate()?;
        self.model_config().validate()?;
        self.rl_config().validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::corrupt(path, e.message().to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::corrupt(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Shared source/target vocabulary: blank plus three tokens per symbol.
    pub fn model_config(&self) -> ModelConfig {
        let vocab = 3 * self.task.symbols + 1;
        ModelConfig {
            d_model: self.model.d_model,
            d_ffn: self.model.d_ffn,
            n_blocks: self.model.n_blocks,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_src_len: self.task.max_len,
            upsample: self.model.upsample,
        }
    }

    pub fn teacher_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64).wrapping_sub(1)
    }

    /// Replicates are numbered from 1.
    pub fn student_seed(&self, replicate: usize) -> u64 {
        self.seed.wrapping_add(999).wrapping_add(replicate as u64)
    }

    pub fn rl_config(&self) -> RLConfig {
        RLConfig {
            samples: self.rl.samples,
            steps: self.rl.steps,
            lr: self.rl.lr,
            warmup_steps: self.rl.warmup_steps,
            batch_size: self.rl.batch_size,
            reward_scale: self.rl.reward_scale,
            seed: self.seed.wrapping_add(2000),
        }
    }
}

/// File names below a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for dir in [self.root.clone(), self.root.join("teachers"), self.root.join("students"), self.root.join("reports")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    /// `train`, `dev` or `test`.
    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.jsonl"))
    }

    /// Teachers are numbered from 1.
    pub fn teacher(&self, i: usize) -> PathBuf {
        self.root.join("teachers").join(format!("teacher-{i}.json"))
    }

    pub fn distilled(&self) -> PathBuf {
        self.root.join("distill.jsonl")
    }

    pub fn distill_lm(&self) -> PathBuf {
        self.root.join("lm-distill.txt")
    }

    pub fn distill_report(&self) -> PathBuf {
        self.root.join("reports").join("distill.json")
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm.txt")
    }

    pub fn student(&self, name: &str) -> PathBuf {
        self.root.join("students").join(format!("{name}.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint(&model.params, &model.cfg, path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (params, cfg) = load_checkpoint(path)?;
    Ok(NatModel::new(cfg, params))
}

/// Checkpoint and report name of a student, e.g. `anneal-k3`.
pub fn student_name(loss: LossMode, k: usize) -> String {
    format!("{loss}-k{k}")
}

/// Replicate 1 keeps the plain student name.
pub fn replicate_name(student: &str, replicate: usize) -> String {
    if replicate <= 1 {
        student.to_string()
    } else {
        format!("{student}-r{replicate}")
    }
}

pub fn rl_name(student: &str) -> String {
    format!("{student}-rl")
}

pub fn gen_data(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<SynthCorpus> {
    let corpus = gen_corpus(&cfg.task.synth_config(cfg.seed))?;
    layout.create()?;
    corpus.vocab.save(&layout.vocab())?;
    save_corpus(&layout.split("train"), &corpus.train)?;
    save_corpus(&layout.split("dev"), &corpus.dev)?;
    save_corpus(&layout.split("test"), &corpus.test)?;
    Ok(corpus)
}

pub fn train_model(
    model_cfg: ModelConfig,
    stage: &StageConfig,
    loss: LossMode,
    lambda: f64,
    seed: u64,
    data: &[MultiRefExample],
) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tc = TrainConfig {
        steps: stage.steps,
        batch_size: stage.batch_size,
        adam: stage.adam(),
        loss,
        lambda,
        seed,
    };
    let mut trainer = Trainer::new(NatModel::init(model_cfg, seed)?, tc, data.len())?;
    trainer.train(data)?;
    Ok(trainer.into_model())
}

/// `k` teachers on the raw corpus, identical except for their seeds.
pub fn train_teachers(cfg: &ExperimentConfig, train: &[MultiRefExample]) -> Result<Vec<Model>> {
    (1..=cfg.k)
        .map(|i| {
            log::info!("training teacher {i}/{} (seed {})", cfg.k, cfg.teacher_seed(i));
            train_model(
                cfg.model_config(),
                &cfg.teacher,
                LossMode::Sum,
                cfg.lambda,
                cfg.teacher_seed(i),
                train,
            )
        })
        .collect()
}

/// Every reference of every example, in corpus order.
pub fn pooled_refs(corpus: &[MultiRefExample]) -> Vec<Vec<TokenId>> {
    corpus.iter().flat_map(|ex| ex.refs.iter().cloned()).collect()
}

pub fn train_lm(corpus: &[MultiRefExample], order: usize, vocab_size: usize) -> Result<NGramModel> {
    NGramModel::train(&pooled_refs(corpus), order, vocab_size)
}

/// Quality and diversity of the raw teacher outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub sentences: usize,
    pub teachers: usize,
    /// Mean number of distinct references per source.
    pub mean_refs: f64,
    /// Mean reference BLEU of the teacher outputs against the gold target.
    pub rfb: f64,
    /// Mean pairwise BLEU among teacher outputs; absent for one teacher.
    pub pwb: Option<f64>,
    /// Share of teacher outputs that are a valid rendering of their source.
    pub validity_rate: f64,
}

impl DistillReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::corrupt(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}

/// Decodes every training source with every teacher. References keep
/// teacher order and are deduplicated, so the first one always comes from
/// teacher 1.
pub fn distill(
    teachers: &[Model],
    train: &[MultiRefExample],
    dp: &DecodeParams,
    lm: Option<&NGramModel>,
    lexicon: &SynthLexicon,
) -> Result<(Vec<MultiRefExample>, DistillReport)> {
    if teachers.is_empty() {
        return Err(Error::InvalidConfig("distillation needs at least one teacher".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let bp = BleuParams::default();
    let mut out = Vec::with_capacity(train.len());
    let (mut rfb_total, mut pwb_total, mut valid, mut refs) = (0.0, 0.0, 0usize, 0usize);
    for ex in train {
        let outputs = teachers
            .iter()
            .map(|t| Ok(decode_best(&t.predict(&ex.src)?, dp, lm)))
            .collect::<Result<Vec<_>>>()?;
        rfb_total += rfb(&outputs, &ex.refs[0], &bp)?;
        if teachers.len() > 1 {
            pwb_total += pwb(&outputs, &bp)?;
        }
        valid += outputs.iter().filter(|y| lexicon.is_valid(&ex.src, y)).count();
        let multi = MultiRefExample::new(ex.src.clone(), outputs)?;
        refs += multi.k();
        out.push(multi);
    }
    let n = train.len() as f64;
    let report = DistillReport {
        sentences: train.len(),
        teachers: teachers.len(),
        mean_refs: refs as f64 / n,
        rfb: rfb_total / n,
        pwb: (teachers.len() > 1).then(|| pwb_total / n),
        validity_rate: valid as f64 / (n * teachers.len() as f64),
    };
    Ok((out, report))
}

/// Keeps the first `k` references of every example.
pub fn restrict_refs(corpus: &[MultiRefExample], k: usize) -> Vec<MultiRefExample> {
    corpus
        .iter()
        .map(|ex| MultiRefExample {
            src: ex.src.clone(),
            refs: ex.refs.iter().take(k.max(1)).cloned().collect(),
        })
        .collect()
}

pub fn train_student(
    cfg: &ExperimentConfig,
    distilled: &[MultiRefExample],
    loss: LossMode,
    k: usize,
    replicate: usize,
) -> Result<Model> {
    log::info!("training student {}", replicate_name(&student_name(loss, k), replicate));
    train_model(
        cfg.model_config(),
        &cfg.student,
        loss,
        cfg.lambda,
        cfg.student_seed(replicate),
        &restrict_refs(distilled, k),
    )
}

pub fn finetune_student(cfg: &ExperimentConfig, model: Model, distilled: &[MultiRefExample]) -> Result<Model> {
    let (model, _) = finetune(model, distilled, &cfg.rl_config())?;
    Ok(model)
}

pub fn decode_corpus(
    model: &Model,
    corpus: &[MultiRefExample],
    dp: &DecodeParams,
    lm: Option<&NGramModel>,
) -> Result<Vec<Vec<TokenId>>> {
    corpus
        .iter()
        .map(|ex| Ok(decode_best(&model.predict(&ex.src)?, dp, lm)))
        .collect()
}

/// Scores hypotheses against their best-matching reference. An output is
/// valid when it equals one of the references exactly.
pub fn score_hypotheses<H: AsRef<[TokenId]>>(hyps: &[H], corpus: &[MultiRefExample]) -> Result<MetricReport> {
    if hyps.len() != corpus.len() {
        return Err(Error::LengthMismatch {
            hyps: hyps.len(),
            refs: corpus.len(),
        });
    }
    let bp = BleuParams::default();
    let mut rewards = Vec::with_capacity(hyps.len());
    let mut best = Vec::with_capacity(hyps.len());
    let mut valid = 0usize;
    for (hyp, ex) in hyps.iter().zip(corpus) {
        let hyp = hyp.as_ref();
        let (reward, idx) = max_reward(hyp, &ex.refs, &bp)?;
        rewards.push(reward);
        best.push(ex.refs[idx].as_slice());
        if ex.refs.iter().any(|r| r == hyp) {
            valid += 1;
        }
    }
    let n = hyps.len().max(1) as f64;
    Ok(MetricReport {
        sentences: hyps.len(),
        corpus_bleu: corpus_bleu(hyps, &best, &BleuParams::unsmoothed())?,
        mean_reward: rewards.iter().sum::<f64>() / n,
        validity_rate: valid as f64 / n,
        rfb: None,
        pwb: None,
        rewards,
    })
}

pub fn evaluate(
    model: &Model,
    corpus: &[MultiRefExample],
    dp: &DecodeParams,
    lm: Option<&NGramModel>,
) -> Result<MetricReport> {
    score_hypotheses(&decode_corpus(model, corpus, dp, lm)?, corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub name: String,
    pub corpus_bleu: f64,
    pub validity_rate: f64,
    pub mean_reward: f64,
}

/// One system of the ablation table, averaged over its replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub corpus_bleu: f64,
    pub validity_rate: f64,
    pub mean_reward: f64,
    pub replicates: Vec<ReplicateScore>,
}

impl SummaryRow {
    pub fn from_replicates(name: &str, replicates: Vec<ReplicateScore>) -> Self {
        let n = replicates.len().max(1) as f64;
        let mean = |f: fn(&ReplicateScore) -> f64| replicates.iter().map(f).sum::<f64>() / n;
        Self {
            name: name.to_string(),
            corpus_bleu: mean(|r| r.corpus_bleu),
            validity_rate: mean(|r| r.validity_rate),
            mean_reward: mean(|r| r.mean_reward),
            replicates,
        }
    }
}

fn replicate_score(name: &str, report: &MetricReport) -> ReplicateScore {
    ReplicateScore {
        name: name.to_string(),
        corpus_bleu: report.corpus_bleu,
        validity_rate: report.validity_rate,
        mean_reward: report.mean_reward,
    }
}

/// Test-set results of one `run_all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub distill: DistillReport,
    pub rows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::corrupt(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }

    pub fn table(&self) -> String {
        let d = &self.distill;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "distillation: {} teachers, {:.2} refs/source, rfb {:.2}, pwb {}, validity {:.3}",
            d.teachers,
            d.mean_refs,
            d.rfb,
            d.pwb.map_or("-".to_string(), |p| format!("{p:.2}")),
            d.validity_rate
        );
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>9} {:>8}  BLEU per replicate",
            "system", "BLEU", "validity", "reward"
        );
        for r in &self.rows {
            let each: Vec<String> = r.replicates.iter().map(|x| format!("{:.2}", x.corpus_bleu)).collect();
            let _ = writeln!(
                out,
                "{:<20} {:>8.2} {:>9.3} {:>8.2}  {}",
                r.name,
                r.corpus_bleu,
                r.validity_rate,
                r.mean_reward,
                each.join(" ")
            );
        }
        out
    }
}

/// Students trained by [`run_all`]: the main one last.
pub fn student_plan(cfg: &ExperimentConfig) -> Vec<(LossMode, usize)> {
    let mut plan = Vec::new();
    if cfg.ablation {
        plan.push((LossMode::Sum, 1));
        for mode in [LossMode::Sum, LossMode::Mid, LossMode::Max, LossMode::Anneal] {
            plan.push((mode, cfg.k));
        }
    }
    plan.retain(|&p| p != (cfg.loss, cfg.k));
    plan.dedup();
    plan.push((cfg.loss, cfg.k));
    plan
}

/// Every stage in order, writing all artifacts under `layout`.
pub fn run_all(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<RunSummary> {
    cfg.validate()?;
    layout.create()?;
    cfg.save(&layout.config())?;
    let corpus = gen_data(cfg, layout)?;
    let vocab_size = corpus.vocab.size();

    let teachers = train_teachers(cfg, &corpus.train)?;
    for (i, t) in teachers.iter().enumerate() {
        save_model(t, &layout.teacher(i + 1))?;
    }
    let fusion = if cfg.distill.alpha != 0.0 {
        let lm = train_lm(&corpus.train, cfg.distill.lm_order, vocab_size)?;
        lm.save(&layout.distill_lm())?;
        Some(lm)
    } else {
        None
    };
    log::info!("distilling {} sources", corpus.train.len());
    let (distilled, distill_report) = distill(
        &teachers,
        &corpus.train,
        &cfg.distill.decode_params(),
        fusion.as_ref(),
        &cfg.task.lexicon(),
    )?;
    save_corpus(&layout.distilled(), &distilled)?;
    distill_report.save(&layout.distill_report())?;

    let lm = train_lm(&distilled, cfg.lm_order, vocab_size)?;
    lm.save(&layout.lm())?;

    let eval = |model: &Model, name: &str, dp: &DecodeParams, lm: Option<&NGramModel>| -> Result<ReplicateScore> {
        let report = evaluate(model, &corpus.test, dp, lm)?;
        report.save(&layout.report(name))?;
        Ok(replicate_score(name, &report))
    };
    let mut rows = Vec::new();
    let mut main = Vec::new();
    for (loss, k) in student_plan(cfg) {
        let system = student_name(loss, k);
        let mut scores = Vec::with_capacity(cfg.replicates);
        main.clear();
        for r in 1..=cfg.replicates {
            let name = replicate_name(&system, r);
            let model = train_student(cfg, &distilled, loss, k, r)?;
            save_model(&model, &layout.student(&name))?;
            scores.push(eval(&model, &name, &cfg.eval, None)?);
            main.push((name, model));
        }
        rows.push(SummaryRow::from_replicates(&system, scores));
    }

    let system = student_name(cfg.loss, cfg.k);
    let (mut tuned_scores, mut fused_scores) = (Vec::new(), Vec::new());
    for (name, model) in main {
        log::info!("fine-tuning {name}");
        let tuned = finetune_student(cfg, model, &distilled)?;
        let tuned_name = rl_name(&name);
        save_model(&tuned, &layout.student(&tuned_name))?;
        tuned_scores.push(eval(&tuned, &tuned_name, &cfg.eval, None)?);
        fused_scores.push(eval(&tuned, &format!("{tuned_name}-fused"), &cfg.fused_eval, Some(&lm))?);
    }
    rows.push(SummaryRow::from_replicates(&rl_name(&system), tuned_scores));
    rows.push(SummaryRow::from_replicates(&format!("{}-fused", rl_name(&system)), fused_scores));

    let summary = RunSummary {
        distill: distill_report,
        rows,
    };
    summary.save(&layout.summary())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSection {
                symbols: 3,
                max_len: 4,
                train_size: 12,
                dev_size: 2,
                test_size: 4,
                ..TaskSection::default()
            },
            model: ModelDims {
                d_model: 4,
                d_ffn: 4,
                n_blocks: 1,
                upsample: 2,
            },
            teacher: StageConfig {
                steps: 3,
                batch_size: 4,
                ..StageConfig::default()
            },
            student: StageConfig {
                steps: 3,
                batch_size: 4,
                ..StageConfig::default()
            },
            rl: RlSection {
                steps: 2,
                batch_size: 4,
                ..RlSection::default()
            },
            replicates: 2,
            fused_eval: DecodeParams {
                beam: 3,
                alpha: 0.3,
                beta: 0.5,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let cfg = tiny();
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
        fs::write(&path, "k = 5\n[student]\nsteps = 7\n").unwrap();
        let partial = ExperimentConfig::load(&path).unwrap();
        assert_eq!(partial.k, 5);
        assert_eq!(partial.student.steps, 7);
        assert_eq!(partial.student.lr, StageConfig::default().lr);
        fs::write(&path, "kk = 5\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn validation() {
        ExperimentConfig::default().validate().unwrap();
        let bad = ExperimentConfig { lambda: 1.5, ..ExperimentConfig::default() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda") && msg.contains("1.5"), "{msg}");
        assert!(ExperimentConfig { k: 0, ..ExperimentConfig::default() }.validate().is_err());
    }

    #[test]
    fn seeds_follow_teacher_index() {
        let cfg = ExperimentConfig::default();
        assert_eq!((1..=3).map(|i| cfg.teacher_seed(i)).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn plan_ends_with_main_student() {
        let cfg = ExperimentConfig::default();
        let plan = student_plan(&cfg);
        assert_eq!(plan.len(), 5);
        assert_eq!(plan[0], (LossMode::Sum, 1));
        assert_eq!(*plan.last().unwrap(), (LossMode::Anneal, 3));
        let single = ExperimentConfig { ablation: false, ..cfg };
        assert_eq!(student_plan(&single), vec![(LossMode::Anneal, 3)]);
        let k1 = ExperimentConfig { k: 1, loss: LossMode::Sum, ..cfg };
        assert_eq!(student_plan(&k1).iter().filter(|p| **p == (LossMode::Sum, 1)).count(), 1);
    }

    #[test]
    fn identical_teachers_collapse() {
        let cfg = tiny();
        let corpus = gen_corpus(&cfg.task.synth_config(1)).unwrap();
        let t = NatModel::init(cfg.model_config(), 9).unwrap();
        let teachers = vec![t.clone(), t.clone(), t];
        let (multi, report) =
            distill(&teachers, &corpus.train, &DecodeParams::plain(5), None, &cfg.task.lexicon()).unwrap();
        assert!(multi.iter().all(|ex| ex.k() == 1));
        assert_eq!(report.pwb, Some(100.0));
        assert_eq!(report.mean_refs, 1.0);
        assert_eq!(report.teachers, 3);
    }

    #[test]
    fn scoring_extremes() {
        let cfg = tiny();
        let corpus = gen_corpus(&cfg.task.synth_config(1)).unwrap();
        let perfect: Vec<_> = corpus.test.iter().map(|ex| ex.refs[1].clone()).collect();
        let r = score_hypotheses(&perfect, &corpus.test).unwrap();
        assert_eq!((r.validity_rate, r.corpus_bleu), (1.0, 100.0));
        let empty = vec![Vec::<TokenId>::new(); corpus.test.len()];
        let r = score_hypotheses(&empty, &corpus.test).unwrap();
        assert_eq!((r.validity_rate, r.corpus_bleu), (0.0, 0.0));
        assert!(score_hypotheses(&empty[1..], &corpus.test).is_err());
    }

    #[test]
    fn restrict_keeps_teacher_order() {
        let ex = MultiRefExample::new(vec![1], vec![vec![2], vec![3]]).unwrap();
        assert_eq!(restrict_refs(&[ex.clone()], 1)[0].refs, vec![vec![2]]);
        assert_eq!(restrict_refs(&[ex.clone()], 5)[0], ex);
    }

    #[test]
    fn tiny_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path().join("run"));
        let summary = run_all(&tiny(), &layout).unwrap();
        let names: Vec<&str> = summary.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["sum-k1", "sum-k3", "mid-k3", "max-k3", "anneal-k3", "anneal-k3-rl", "anneal-k3-rl-fused"]
        );
        for path in [layout.vocab(), layout.distilled(), layout.lm(), layout.distill_lm(), layout.teacher(3), layout.config()] {
            assert!(path.exists(), "{}", path.display());
        }
        assert_eq!(RunSummary::load(&layout.summary()).unwrap(), summary);
        let row = summary.row("anneal-k3").unwrap();
        assert_eq!(row.replicates.len(), 2);
        let a = MetricReport::load(&layout.report("anneal-k3")).unwrap().corpus_bleu;
        let b = MetricReport::load(&layout.report("anneal-k3-r2")).unwrap().corpus_bleu;
        assert_eq!(row.corpus_bleu, (a + b) / 2.0);
        assert!(layout.student("anneal-k3-r2-rl").exists());
        assert!(layout.report("anneal-k3-r2-rl-fused").exists());
    }
}
