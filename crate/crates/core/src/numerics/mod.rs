//! Dense tensors, a reverse-mode tape and a finite-difference checker.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_store, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use kernels::{gelu, layer_norm, matmul, softmax_rows};
pub use tape::{AttnShape, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator threaded through every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
