//! Iterative prototype refinement for sequence-to-sequence translation.
//!
//! A feature sequence is encoded into an initial prototype, refined `K` times
//! by a weight-shared encoder that cross-attends to the previous prototype,
//! and decoded once from the final prototype. Training combines cross-entropy
//! on the first and last branches with a distillation term that pulls the
//! intermediate branches toward the last one.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decode;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Branch, Model, ModelConfig, Prototype, SeqBatch, TokenBatch, BOS, EOS, PAD};
pub use params::{ParamId, ParamStore};
pub use tape::{AttnMask, OpKind, Tape, Var};
pub use tensor::{Float, Tensor, TensorError};
