//! Deterministic numeric substrate: dense kernels, addressed random
//! streams, samplers, and the finite-difference oracle.

pub mod gradcheck;
pub mod matrix;
pub mod rng;
pub mod sampling;

pub use gradcheck::{finite_diff_grad, relative_gap};
pub use matrix::{Matrix, Vector};
pub use rng::{derive_stream, RngStream};
pub use sampling::{gaussian, kaiming_init, sample_dirichlet, sample_gamma};
