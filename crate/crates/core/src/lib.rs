//! Active search for sparse targets on a grid under joint detection and
//! location uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: grid indexing, poses and the pyramid field of view.
//! - [`environment`]: ground truth and the noisy sensing model.
//! - [`inference`]: the uncertainty-aware Kalman filter.
//! - [`baseline`]: the location-uncertainty-only Gaussian track estimator.
//! - [`policy`]: uniform random and Thompson-sampling action selection.
//! - [`runtime`]: the asynchronous multi-agent event loop.
//! - [`experiment`], [`config`] and [`report`]: batch trials, configuration
//!   and CSV output.

pub mod baseline;
pub mod config;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod linalg;
pub mod policy;
pub mod report;
pub mod runtime;

pub use error::{Error, Result};
