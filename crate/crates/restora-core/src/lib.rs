//! Core library for desk-scale image restoration experiments.
//!
//! The pipeline models heterogeneous degradations (noise, haze, low light)
//! with generalized Gaussian statistics of block-DCT latents, runs guided
//! diffusion posterior sampling against an analytic Gaussian-mixture prior,
//! trains a small conditioned degradation operator online, and refines
//! results with a no-reference quality controller.
//!
//! Everything is deterministic: all randomness flows from explicit seeds
//! through a documented splittable generator ([`rng`]).

// Index-heavy numeric kernels read better with explicit indices.
#![allow(clippy::needless_range_loop)]




pub mod config;
pub mod corpus;
pub mod degop;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod ggd;
pub mod guide;

pub mod imgproc;
pub mod latent;


pub mod refine;
pub mod report;
pub mod rng;

pub use error::{Error, ErrorCategory, Result};
