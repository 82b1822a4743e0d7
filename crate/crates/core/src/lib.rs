//! Quantized neural network training with metaplastic consolidation of
//! hidden weights, plus a behavioural simulator of multi-level memristor
//! crossbars that can stand in for the weight storage during training.
//!
//! - [`quantgrid`]: weight levels, nearest-level projection, metaplastic function
//! - [`net`]: MLP with straight-through gradients and batch norm
//! - [`optim`]: Adam and the consolidation-aware hidden weight update
//! - [`device`]: single memristor cell model
//! - [`xbar`]: differential-pair crossbar tiles and analog matrix products
//! - [`data`]: IDX loading and task schedules
//! - [`harness`]: experiment configs, sequential training runs, sweeps, histograms
//! - [`checkpoint`]: binary checkpoint container

pub mod checkpoint;
pub mod data;
pub mod device;
pub mod error;
pub mod harness;
pub mod net;
pub mod optim;
pub mod quantgrid;
pub mod xbar;

pub use error::{Error, Result};
pub use quantgrid::{MetaParams, QuantGrid};
