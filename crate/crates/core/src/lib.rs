//! Federated learning with key-locked linear layers.
//!
//! A locked layer blends a plain affine map with a per-neuron modulation
//! produced by a small implicit network evaluated at secretly permuted
//! output coordinates. Only holders of the permutation reproduce the
//! trained function; the crate also ships the protocol (FedAvg with
//! optional update sanitization) and an attack lab that measures exactly
//! what a key-less adversary gets.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod inr_lock;
pub mod model;
pub mod numerics;
pub mod threatlab;

pub use error::{Error, Result};
