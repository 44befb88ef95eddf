//! Collaborative low-rank adaptation for small vision transformers.
//!
//! Low-rank modules (LRMs) adapt the inputs of each attention and feed-forward
//! block as `x ↦ x(I + ΔW)`. Every `ΔW_j` is assembled from `p` shared base
//! pairs `(D_h, U_h)` and a per-module `r×r` coefficient `Q_h^j`, which lifts
//! the attainable rank to `p·r` at a cost of `(2dr + m·r²)·p` parameters.
//! A sample-agnostic regularizer keeps the per-module experts
//! `M_h = D_h Q_h U_h` apart by penalizing `‖M_h M_rᵀ‖_F²`.
//!
//! Modules:
//! - [`linalg`]: matrices, reverse-mode tape, flop meter, rank estimation
//! - [`lrm`]: adapter banks, `ΔW` constructions, merging, parameter census
//! - [`sade`]: similarity regularizers and the cost model for them
//! - [`vit`]: a minimal ViT encoder with pluggable adapter placement
//! - [`train`]: objective, AdamW, schedules, synthetic tasks, ablations
//! - [`checkpoint`]: the `CLORA1` tensor container
//! - [`verify`]: merge and gradient checks on random models

pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod lrm;
pub mod sade;
pub mod train;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use linalg::{Matrix, Tape, Var};
