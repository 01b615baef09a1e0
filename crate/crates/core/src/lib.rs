//! Audio-visual segmentation: an audio encoder and an image encoder feed a
//! per-stage audio-visual fusion, and a promptable mask decoder turns the
//! fused pyramid into per-pixel logits for the sounding object.

pub mod audio;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
pub mod seg_head;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use model::AvSam;
pub use scalar::Scalar;

pub type AvSamF32 = AvSam<f32>;
pub type AvSamF64 = AvSam<f64>;
