//! Contrastive cross-branch attention pretraining for point clouds.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod train;

pub use error::{Error, Result};
