//! Dense matrices, a reverse-mode tape, an operation meter and an SVD-based
//! rank estimate. Everything is `f64`.

mod flops;
mod matrix;
pub mod svd;
mod tape;

pub use flops::{FlopCount, FlopMeter};
pub use matrix::Matrix;
pub use svd::DEFAULT_RANK_TOL;
pub use tape::{grad, Gradients, Tape, Var, DEGENERATE_NORM};

/// Builds the deterministic RNG used throughout the crate from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
