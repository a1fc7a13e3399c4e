//! Facial landmark detection: landmark geometry and metrics, heatmap
//! codecs, losses, a small reverse-mode autodiff engine, detector models,
//! data loading and the training loop.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod losses;
pub mod models;
pub mod training;

pub use error::{Error, Result};
