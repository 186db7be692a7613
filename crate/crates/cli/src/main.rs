use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddrs_core::data::{load_corpus, save_corpus};
use ddrs_core::decode::DecodeParams;
use ddrs_core::lm::NGramModel;
use ddrs_core::pipeline::{self, rl_name, student_name, ExperimentConfig, RunLayout};
use ddrs_core::{LossMode, Model, Vocab};

/// Diverse distillation with reference selection for CTC-based
/// non-autoregressive models, on a synthetic two-mode translation task.
#[derive(Debug, Parser)]
#[command(name = "ddrs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Args)]
struct Opts {
    /// Experiment config (TOML). Defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of teachers, or references per example for `train-student`.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// First-stage fraction of the annealing schedule, in (0, 1).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// sum, mid, max or anneal.
    #[arg(long, global = true)]
    loss: Option<LossMode>,
    /// Step budget of the stage being run (teachers and students for `run-all`).
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// n-gram LM for shallow fusion; the output path for `train-lm`.
    #[arg(long, global = true)]
    lm_path: Option<PathBuf>,
    /// LM weight.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Length bonus per token.
    #[arg(long, global = true)]
    beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the vocabulary and the train/dev/test corpora.
    GenData,
    /// Train k teachers with seeds seed..seed+k-1 on the raw corpus.
    TrainTeachers,
    /// Decode the training set with every teacher into a multi-reference corpus.
    Distill,
    /// Train an n-gram LM on the references of a corpus.
    TrainLm {
        /// Corpus to read; defaults to the distilled corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Train a student on the distilled corpus.
    TrainStudent,
    /// Fine-tune a student with the max-reward objective.
    FinetuneRl {
        /// Student name; defaults to `<loss>-k<k>`.
        #[arg(long)]
        student: Option<String>,
    },
    /// Decode a corpus and print one hypothesis per line.
    Decode(ModelInput),
    /// Decode a corpus and write a metric report.
    Eval(ModelInput),
    /// Run every stage and print the ablation table.
    RunAll,
}

#[derive(Debug, Args)]
struct ModelInput {
    /// Student name below `<out>/students`; defaults to `<loss>-k<k>`.
    #[arg(long, conflicts_with = "checkpoint")]
    student: Option<String>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus to decode; defaults to the test split.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write the result instead of the default location.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn load_config(opts: &Opts, layout: &RunLayout) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if layout.config().exists() => ExperimentConfig::load(&layout.config())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(k) = opts.k {
        cfg.k = k;
    }
    if let Some(lambda) = opts.lambda {
        cfg.lambda = lambda;
    }
    if let Some(loss) = opts.loss {
        cfg.loss = loss;
    }
    Ok(cfg)
}

fn override_decode(dp: &mut DecodeParams, opts: &Opts) {
    if let Some(beam) = opts.beam {
        dp.beam = beam;
    }
    if let Some(alpha) = opts.alpha {
        dp.alpha = alpha;
    }
    if let Some(beta) = opts.beta {
        dp.beta = beta;
    }
}

fn run(cli: Cli) -> Result<()> {
    let opts = &cli.opts;
    let layout = RunLayout::new(&opts.out);
    let mut cfg = load_config(opts, &layout)?;
    match &cli.command {
        Command::TrainTeachers => apply_steps(&mut cfg.teacher.steps, opts),
        Command::TrainStudent => apply_steps(&mut cfg.student.steps, opts),
        Command::FinetuneRl { .. } => apply_steps(&mut cfg.rl.steps, opts),
        Command::RunAll => {
            apply_steps(&mut cfg.teacher.steps, opts);
            apply_steps(&mut cfg.student.steps, opts);
            override_decode(&mut cfg.fused_eval, opts);
        }
        Command::Distill => {
            if let Some(beam) = opts.beam {
                cfg.distill.beam = beam;
            }
            if let Some(alpha) = opts.alpha {
                cfg.distill.alpha = alpha;
            }
            if let Some(beta) = opts.beta {
                cfg.distill.beta = beta;
            }
        }
        _ => {}
    }
    cfg.validate()?;

    match cli.command {
        Command::GenData => {
            layout.create()?;
            cfg.save(&layout.config())?;
            let corpus = pipeline::gen_data(&cfg, &layout)?;
            log::info!(
                "wrote {} train, {} dev, {} test examples to {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                layout.root().display()
            );
        }
        Command::TrainTeachers => {
            layout.create()?;
            let train = read_corpus(&layout.split("train"))?;
            for (i, t) in pipeline::train_teachers(&cfg, &train)?.iter().enumerate() {
                pipeline::save_model(t, &layout.teacher(i + 1))?;
            }
        }
        Command::Distill => {
            let train = read_corpus(&layout.split("train"))?;
            let teachers = (1..=cfg.k)
                .map(|i| read_model(&layout.teacher(i)))
                .collect::<Result<Vec<_>>>()?;
            let vocab = read_vocab(&layout)?;
            let lm = if cfg.distill.alpha == 0.0 {
                None
            } else if let Some(path) = &opts.lm_path {
                Some(read_lm(path)?)
            } else {
                let lm = pipeline::train_lm(&train, cfg.distill.lm_order, vocab.size())?;
                lm.save(&layout.distill_lm())?;
                Some(lm)
            };
            let (distilled, report) = pipeline::distill(
                &teachers,
                &train,
                &cfg.distill.decode_params(),
                lm.as_ref(),
                &cfg.task.lexicon(),
            )?;
            layout.create()?;
            save_corpus(&layout.distilled(), &distilled)?;
            report.save(&layout.distill_report())?;
            println!(
                "rfb {:.2} pwb {} refs/source {:.2} validity {:.3}",
                report.rfb,
                report.pwb.map_or("-".into(), |p| format!("{p:.2}")),
                report.mean_refs,
                report.validity_rate
            );
        }
        Command::TrainLm { corpus, order } => {
            let corpus_path = corpus.unwrap_or_else(|| layout.distilled());
            let data = read_corpus(&corpus_path)?;
            let vocab = read_vocab(&layout)?;
            let lm = pipeline::train_lm(&data, order.unwrap_or(cfg.lm_order), vocab.size())?;
            let dest = opts.lm_path.clone().unwrap_or_else(|| layout.lm());
            lm.save(&dest)?;
        }
        Command::TrainStudent => {
            layout.create()?;
            let distilled = read_corpus(&layout.distilled())?;
            let model = pipeline::train_student(&cfg, &distilled, cfg.loss, cfg.k, 1)?;
            let path = layout.student(&student_name(cfg.loss, cfg.k));
            pipeline::save_model(&model, &path)?;
            log::info!("wrote {}", path.display());
        }
        Command::FinetuneRl { student } => {
            let name = student.unwrap_or_else(|| student_name(cfg.loss, cfg.k));
            let model = read_model(&layout.student(&name))?;
            let distilled = read_corpus(&layout.distilled())?;
            let tuned = pipeline::finetune_student(&cfg, model, &distilled)?;
            let path = layout.student(&rl_name(&name));
            pipeline::save_model(&tuned, &path)?;
            log::info!("wrote {}", path.display());
        }
        Command::Decode(input) => {
            let (_, model) = resolve_model(&input, &cfg, &layout)?;
            let corpus = read_corpus(&input.input.clone().unwrap_or_else(|| layout.split("test")))?;
            let (dp, lm) = decode_setup(&cfg, opts)?;
            let vocab = read_vocab(&layout)?;
            let hyps = pipeline::decode_corpus(&model, &corpus, &dp, lm.as_ref())?;
            let mut text = String::new();
            for h in &hyps {
                text.push_str(&vocab.render(h));
                text.push('\n');
            }
            match &input.output {
                Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Eval(input) => {
            let (name, model) = resolve_model(&input, &cfg, &layout)?;
            let corpus = read_corpus(&input.input.clone().unwrap_or_else(|| layout.split("test")))?;
            let (dp, lm) = decode_setup(&cfg, opts)?;
            let report = pipeline::evaluate(&model, &corpus, &dp, lm.as_ref())?;
            let dest = match input.output {
                Some(path) => path,
                None => {
                    layout.create()?;
                    layout.report(&if lm.is_some() { format!("{name}-fused") } else { name.clone() })
                }
            };
            report.save(&dest)?;
            println!(
                "{name}: BLEU {:.2} validity {:.3} reward {:.2} ({} sentences)",
                report.corpus_bleu, report.validity_rate, report.mean_reward, report.sentences
            );
        }
        Command::RunAll => {
            let summary = pipeline::run_all(&cfg, &layout)?;
            print!("{}", summary.table());
        }
    }
    Ok(())
}

fn apply_steps(steps: &mut u64, opts: &Opts) {
    if let Some(s) = opts.steps {
        *steps = s;
    }
}

/// Greedy unless an LM or a beam is requested; an LM starts from the fused
/// defaults.
fn decode_setup(cfg: &ExperimentConfig, opts: &Opts) -> Result<(DecodeParams, Option<NGramModel>)> {
    let (mut dp, lm) = match &opts.lm_path {
        Some(path) => (cfg.fused_eval, Some(read_lm(path)?)),
        None => (cfg.eval, None),
    };
    override_decode(&mut dp, opts);
    if dp.beam == 0 {
        bail!("beam width must be >= 1");
    }
    Ok((dp, lm))
}

fn resolve_model(
    input: &ModelInput,
    cfg: &ExperimentConfig,
    layout: &RunLayout,
) -> Result<(String, Model)> {
    match &input.checkpoint {
        Some(path) => {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            Ok((name, read_model(path)?))
        }
        None => {
            let name = input
                .student
                .clone()
                .unwrap_or_else(|| student_name(cfg.loss, cfg.k));
            let model = read_model(&layout.student(&name))?;
            Ok((name, model))
        }
    }
}

fn read_corpus(path: &Path) -> Result<Vec<ddrs_core::data::MultiRefExample>> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn read_model(path: &Path) -> Result<Model> {
    pipeline::load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_lm(path: &Path) -> Result<NGramModel> {
    NGramModel::load(path).with_context(|| format!("loading LM {}", path.display()))
}

fn read_vocab(layout: &RunLayout) -> Result<Vocab> {
    let path = layout.vocab();
    Vocab::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}
