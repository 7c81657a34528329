//! Dense-tensor reverse-mode automatic differentiation with parameter
//! freezing: enough to train embeddings and thin linear layers through a
//! frozen transformer. Single-threaded define-by-run; the tape is rebuilt
//! every step.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use tape::Tape;
pub use tensor::Tensor;
