//! Small decoder-only transformer stack with a compressible generation KV
//! cache: every `c` sampled tokens the model writes one learned "beacon"
//! entry and evicts the `c` raw entries it summarizes.  The crate carries the
//! whole pipeline at desk scale: tape autodiff, the model, cache controllers
//! (beacon compression plus attention-score and sliding-window eviction
//! baselines), synthetic tasks with exact verifiers, PPO + distillation
//! training, and a budget-sweep evaluator.
//!
//! Numeric core (`kernels`, `tensor`, `optim`, `mask`, `kv`) is generic over
//! the scalar type; the model and everything above it use the `f32` aliases
//! exported at the crate root.

pub mod error;
pub mod num;

pub mod kernels;
pub mod mask;
pub mod optim;
pub mod tensor;

pub mod kv;
pub mod model;
pub mod vocab;

pub mod compression;
pub mod tasks;

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod training;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;

/// Concrete scalar used by the model stack.
pub type Scalar = f32;

pub type Tape = tensor::Tape<f32>;
pub type Tensor = tensor::Tensor;
pub type AttentionMask = mask::AttentionMask;
pub type KvCache = kv::KvCache<f32>;
pub type AdamW = optim::AdamW<f32>;
pub type AdamWConfig = optim::AdamWConfig<f32>;
