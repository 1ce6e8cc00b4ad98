//! Core engine for differentiable architecture search as distribution
//! learning: a reverse-mode tape over dense tensors, a weight-sharing
//! supernet on a small cell space, natural-gradient variational optimizers
//! for Gaussian architecture distributions, training-free scoring proxies,
//! and curvature diagnostics.

pub mod diag;
pub mod error;
pub mod ngvi;
pub mod params;
pub mod proxies;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tape;
pub mod trace;
pub mod util;

pub use error::{Error, Result};
