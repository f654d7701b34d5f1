//! Time score matching for density-ratio estimation.
//!
//! The crate trains networks that approximate `d/dt log p_t(x)` along a
//! Gaussian probability path bridging two distributions, then integrates the
//! learned time score to obtain `log p1(x) / p0(x)`.

pub mod error;
pub mod paths;
pub mod weighting;
pub mod nn;
pub mod losses;
pub mod oracle;
pub mod mi;
pub mod ratio;

pub use error::{Error, Result};
