//! Source-free cross-domain few-shot segmentation toolkit.
//!
//! The pipeline appends lightweight task adaptation modules to a frozen
//! feature pyramid, trains them at test time on a single episode with
//! visual-visual and text-visual alignment losses, and produces masks by
//! fusing a pixel classifier, vision-language pseudo-labels and
//! cross-attention mask aggregation.

pub mod adapt;
pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod crf;
pub mod episode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod seg_head;
pub mod synthetic;
pub mod tensorfile;
pub mod tsaa;
pub mod tvea;
pub mod types;
pub mod vvea;

pub use config::Config;
pub use error::{Error, Result};
