//! Bayesian theory of parallel-branching networks.
//!
//! Each branch `l` of the network sees a fixed input map (a power of the
//! normalized adjacency for graph convolutions, or a linear/ReLU layer for a
//! residual MLP) and contributes a GP input kernel `K_l`. At finite width the
//! posterior renormalizes each kernel by an order parameter `u_l`, obtained
//! from the stationarity conditions of the effective Hamiltonian
//! `H(u) = S(u) + E(u)`. This crate computes those order parameters, the
//! resulting predictor statistics, and provides explicit networks plus an HMC
//! sampler to check the theory against finite-width posteriors.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, configuration and the experiment CLI live in the
//! companion `branchnet` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod datagen;
mod error;
pub mod hmc;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod predictor;
pub mod rng;
pub mod saddle;
pub mod scenario;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
