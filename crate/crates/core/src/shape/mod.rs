//! Global shape correction of decoded landmarks.
//!
//! [`GhcuModel`] regresses all coordinates at once from the stacked
//! heatmaps, learning the face shape implicitly. [`ShapeModel`] is the PCA
//! point-distribution baseline, with a plain projection and an iterative
//! heatmap-driven fit that removes outliers.

mod ghcu;
mod pca;

pub use ghcu::{
    format_stages, ghcu_forward, ghcu_train, parse_stages, simulate_occlusion, ConvStage, GhcuConfig, GhcuExample,
    GhcuModel, GhcuTarget, OcclusionFill, OcclusionMask, GHCU_KIND,
};
pub use pca::{fit_shape_pca, pca_correct, robust_pca_correct, PcaConfig, ShapeModel, PCA_KIND};
