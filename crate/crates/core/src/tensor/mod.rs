//! Dense tensors, a reverse-mode autodiff tape, layers, and optimizers.

mod array;
pub mod functional;
mod gemm;
pub mod gradcheck;
pub mod optim;
mod params;
mod tape;

pub use array::Tensor;
pub use functional::cosine_similarity;
pub use optim::{onecycle_lr, AdamW, AdamWConfig, LrSchedule};
pub use params::{Conv1d, Graph, LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{Tape, Var};
