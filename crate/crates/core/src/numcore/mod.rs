//! Dense linear algebra, reverse-mode differentiation, seeded random
//! streams, initialization, and the optimizer.

pub mod adamw;
pub mod gradcheck;
pub mod init;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use init::glorot_uniform;
pub use rng::{derive_seed, RngStreams, Stream, StreamPositions};
pub use tape::{ContrastiveSpec, Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
