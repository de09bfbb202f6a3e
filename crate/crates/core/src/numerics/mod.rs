//! Dense tensors, a reverse-mode gradient tape, AdamW and the
//! warmup-cosine learning-rate schedule.

mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamWConfig, Moments, OptimizerState};
pub use params::ParamStore;
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
