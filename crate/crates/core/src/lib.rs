//! Label refinement for heatmap-based landmark detection.
//!
//! Noisy keypoint annotations are treated as observations of a latent,
//! semantically consistent label. [`alignment`] alternates between searching
//! that label near the observation (a Gaussian prior on displacement plus a
//! Pearson chi-square match of the predicted heatmap against an ideal
//! template) and retraining the heatmap predictor on the searched labels.
//! [`shape`] adds two global shape correctors: a small heatmap-to-coordinate
//! regressor and a PCA point-distribution baseline. [`synth`] generates
//! face-like scenes with controllable annotation ambiguity for verification.

pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiments;
mod fft;
pub mod heatmap;
pub mod kv;
pub mod landmarks;
pub mod metrics;
pub mod optim;
pub mod predictor;
pub mod shape;
pub mod synth;
mod textio;

pub use error::{Error, Result};
pub use heatmap::{GaussianTemplate, Heatmap, Patch, PixelCoord};
pub use landmarks::{LabelFile, LandmarkSet, Point2, Role};
