//! Minimal deterministic tensor engine: `f64` row-major tensors, a recording
//! tape with reverse-mode differentiation, the layer primitives used by the
//! zero-shot pipeline, a finite-difference gradient checker and the binary
//! tensor blob format.

pub mod blob;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use blob::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, grad_check_scaled};
pub use graph::{logistic, Backward, Graph, Pointwise, Var};
pub use tensor::Tensor;

/// Deterministic generator used throughout the workspace.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
