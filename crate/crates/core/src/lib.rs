//! Compression and inference toolkit for Vision Transformers.
//!
//! The pipeline profiles MLP activations on a calibration set, prunes the
//! least active MLP channels until an analytic memory budget is met, and then
//! produces either an FP16 variant or an activation-aware INT8 variant of the
//! pruned model. A benchmark harness evaluates every variant.
//!
//! ```no_run
//! use vitopt::model::{ModelConfig, VitModel};
//! use vitopt::data::synthetic_dataset;
//!
//! let model = VitModel::init(ModelConfig::vit_toy(), 0)?;
//! let data = synthetic_dataset(8, 0)?;
//! let logits = model.forward(&data.images, None)?;
//! assert_eq!(logits.shape(), &[8, 10]);
//! # Ok::<(), vitopt::Error>(())
//! ```

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod pattern;
pub mod pipeline;
pub mod precision;
pub mod profiler;
pub mod pruner;
pub mod quantizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
