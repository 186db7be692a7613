//! Non-autoregressive sequence transduction with CTC: multi-reference losses
//! with a two-stage annealing schedule, max-reward policy-gradient
//! fine-tuning, CTC prefix beam search with n-gram fusion, and a seed-based
//! diverse distillation pipeline on synthetic two-mode translation tasks.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar
//! for the common cases.

pub mod data;
pub mod decode;
pub mod error;
pub mod lattice;
pub mod lm;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rl;
pub mod scalar;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use lattice::{
    alignment_log_prob, collapse, ctc_grad, ctc_log_prob, enumerate_alignments, sample_alignment,
};
pub use loss::{annealed_loss, anneal_weights, loss_max, loss_mid, loss_sum, AnnealSchedule, LossMode};
pub use scalar::Real;
pub use vocab::{TokenId, Vocab, BLANK};

/// Scalar used by the training pipeline and CLI.
pub type Scalar = f64;

pub type LogProbMatrix = lattice::LogProbMatrix<Scalar>;
pub type LogProbMatrix32 = lattice::LogProbMatrix<f32>;
pub type Model = model::NatModel<Scalar>;
pub type Model32 = model::NatModel<f32>;
pub type ModelParams = model::ModelParams<Scalar>;
