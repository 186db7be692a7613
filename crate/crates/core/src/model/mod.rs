//! Toy non-autoregressive model with hand-written backpropagation, Adam, and
//! JSON checkpoints.

mod adam;
mod checkpoint;
mod nat;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use nat::{ForwardCache, NatModel, PassCounter};
pub use params::{Block, ModelConfig, ModelParams, ParamGrads};
