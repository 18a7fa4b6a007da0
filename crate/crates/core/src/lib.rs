//! Direct molecular conformation generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`molio`]: molecular graphs, conformations, JSON-lines and SDF ingestion
//! - [`symmetry`]: atom labels and automorphism enumeration
//! - [`geomalign`]: quaternion superposition, invariant losses, best RMSD
//! - [`autodiff`]: a small reverse-mode tape over dense matrices
//! - [`model`]: the iterative graph-network generator with a Gaussian latent
//! - [`train`]: AdamW, schedules, the training loop and checkpoints
//! - [`evalmetrics`]: coverage and matching scores
//! - [`diagnostics`]: distance-matrix validity checks

pub mod autodiff;
pub mod diagnostics;
pub mod evalmetrics;
pub mod geomalign;
pub mod model;
pub mod molio;
pub mod symmetry;
pub mod train;
