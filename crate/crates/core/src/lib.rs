//! Preference-aware self-distillation for incomplete multi-modal
//! segmentation under imbalanced modality missing rates.
//!
//! Modules follow the pipeline: [`presence`] draws which modalities each
//! training sample keeps, [`data`] synthesises samples, [`nn`] is the
//! multi-encoder/shared-decoder backbone, [`losses`] holds the segmentation
//! and self-distillation objectives, [`preference`] tracks relative
//! preference and the per-modality coefficients, [`metrics`] scores
//! predictions, and [`train`] ties them into experiments.

pub mod data;
pub mod error;
pub mod kv;
pub mod nn;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod config;
pub mod plot;
pub mod train;
pub mod presence;
pub mod preference;
pub mod tensor;

pub use error::{Error, Result};
