//! Blind image quality assessment with multi-scale backbone features and a
//! progressive multi-task objective that moves from quality-level
//! classification to quality-score regression over the course of training.

pub mod backbone;
pub mod binning;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod extractor;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod protocols;
pub mod report;
pub mod synthetic;
pub mod train;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
