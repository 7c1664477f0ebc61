//! Implicit-feedback matrix factorization trained with random, dynamic and
//! augmented negative sampling, plus full-ranking evaluation and sampling
//! diagnostics.

pub mod ans;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
