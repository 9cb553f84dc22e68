pub mod classreg;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod layers;
pub mod mtconv;
pub mod netspec;
pub mod pooling;
pub mod recurrence;
pub mod rng;
pub mod schedule;
pub mod srtg;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{EmbeddingSequence, Scalar, Tensor};
