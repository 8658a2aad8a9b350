//! Attention-based triplet hashing.
//!
//! A small attention-equipped residual CNN maps grayscale images to `k`-bit
//! binary codes. Training combines a triplet hinge on the hash outputs with a
//! cross-entropy term over all three images of each triplet. Codes are
//! indexed in a bit-packed exhaustive Hamming index and retrieval quality is
//! scored with hit ratio, average precision and reciprocal rank.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod hash_index;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use autodiff::{Mode, RunningStats, Tape, Var};
pub use kernels::Padding;
pub use tensor::{Tensor, TensorError};
