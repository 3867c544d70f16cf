//! Dense matrices, a reverse-mode tape over them, and the optimizer.

mod adam;
pub mod gradcheck;
mod leaves;
mod matrix;
mod tape;

pub use adam::{adam_step, clip_global_norm, global_norm, optimizer_steps_taken, AdamConfig, AdamState};
pub use leaves::{ArrayCursor, Leaves, Trainable};
pub use matrix::Matrix;
pub use tape::{logsumexp, sigmoid, softmax_in_place, Gradients, Tape, Var};
