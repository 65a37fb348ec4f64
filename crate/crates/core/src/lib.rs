//! Chest X-ray abnormality detection harness.
//!
//! Pipeline stages, bottom-up: [`datasets`] ingestion and balanced splits,
//! [`backbones`] frozen feature extraction, [`heads`] trained classifier
//! layers, [`metrics`] ROC/AUC and confusion statistics, [`ensemble`]
//! probability averaging and subset studies, [`localization`] occlusion
//! sensitivity maps, and [`rulebased`] cardiothoracic-ratio baselines.

pub mod backbones;
pub mod datasets;
pub mod ensemble;
pub mod error;
pub mod heads;
pub mod localization;
pub mod metrics;
pub mod raster;
pub mod rulebased;

pub use error::{Error, ErrorClass, Result};
