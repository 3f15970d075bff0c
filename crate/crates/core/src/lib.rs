//! Patch-based classification of high-resolution images with attention
//! over ordered crops, class-imbalance countermeasures and class-balanced
//! metrics.

pub mod balancing;
pub mod checkpoint;
pub mod config;
pub mod cropping;
pub mod data;
mod error;
pub mod experiment;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
