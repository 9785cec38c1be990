//! Segmentation-based ultrasound frame codec.
//!
//! A polar B-mode frame is reduced to one chain-coded contour per tissue
//! boundary plus acquisition metadata. Decompression rasterizes the contours
//! into a tissue map and regenerates speckle with a point-spread-function
//! simulator. The crate also provides synthetic phantoms and the metrics used
//! to judge how well speckle statistics survive the round trip.

pub mod codec;
pub mod error;
mod fft;
pub mod grid;
pub mod metrics;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod segmenter;
pub mod speckle_stats;
pub mod synth;

pub use error::{Error, Result};
