//! EVA: Bayesian deep generative models for synthetic longitudinal visit
//! sequences.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod generator;
pub mod latent;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{EvaError, Result};
