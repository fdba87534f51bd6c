//! Heatmap predictors.
//!
//! [`OraclePredictor`] renders heatmaps analytically around the true
//! landmarks, with controllable bias and tangential elongation for weak
//! landmarks. [`ConvPredictor`] is a small trainable model fitted by
//! mini-batch gradient descent.

mod conv;
mod oracle;

pub use conv::{ConvGradient, ConvPredictor, ConvPredictorConfig};
pub use oracle::{oracle_predict, OraclePredictor, OraclePredictorConfig};

use crate::error::{Error, Result};
use crate::heatmap::{render_target_heatmap, Heatmap};
use crate::kv::impl_key_values;
use crate::landmarks::LandmarkSet;
use crate::synth::{Dataset, ImageSample};

/// Mini-batch training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub passes: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Standard deviation of the peak-1 Gaussian training targets, in pixels.
    pub target_sigma: f64,
    /// Per-pass multiplicative learning-rate decay; the rate of pass `t`
    /// (counted over the model's whole life) is `learning_rate * lr_decay^t`.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            passes: 20,
            batch_size: 10,
            seed: 1,
            target_sigma: 1.5,
            lr_decay: 0.85,
        }
    }
}

impl_key_values!(TrainConfig, "train", { learning_rate, passes, batch_size, seed, target_sigma, lr_decay });

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.target_sigma > 0.0) {
            return Err(Error::invalid("target sigma must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("learning-rate decay must be in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rate of a model that has already completed `passes` passes.
    pub fn rate_at(&self, passes: u64) -> f64 {
        self.learning_rate * self.lr_decay.powi(passes.min(i32::MAX as u64) as i32)
    }
}

/// A model producing one heatmap per landmark for an image.
pub trait HeatmapPredictor {
    fn landmark_count(&self) -> usize;

    /// `(width, height)` of the produced heatmaps.
    fn dims(&self) -> (usize, usize);

    /// Exactly `landmark_count()` non-negative heatmaps.
    fn predict(&self, sample: &ImageSample) -> Result<Vec<Heatmap>>;

    /// One pass over `data` supervised by `labels`; returns the mean per-pixel loss.
    fn train_epoch(&mut self, data: &Dataset, labels: &[LandmarkSet], tcfg: &TrainConfig) -> Result<f64>;

    /// Clears optimizer state before a new training phase.
    fn reset_optimizer(&mut self) {}
}

/// Peak-1 targets rendered at the nearest pixel of each label.
pub fn render_targets(labels: &LandmarkSet, dims: (usize, usize), sigma: f64) -> Result<Vec<Heatmap>> {
    labels
        .to_pixels()
        .into_iter()
        .map(|c| render_target_heatmap(dims.0, dims.1, c, sigma))
        .collect()
}

/// Mean per-pixel squared error between heatmaps and targets rendered at `labels`.
pub fn heatmap_loss(heatmaps: &[Heatmap], labels: &LandmarkSet, sigma: f64) -> Result<f64> {
    if heatmaps.len() != labels.len() {
        return Err(Error::SizeMismatch {
            expected: labels.len(),
            actual: heatmaps.len(),
        });
    }
    let Some(first) = heatmaps.first() else {
        return Err(Error::Empty("heatmaps"));
    };
    let targets = render_targets(labels, (first.width(), first.height()), sigma)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (h, t) in heatmaps.iter().zip(&targets) {
        for (a, b) in h.values().iter().zip(t.values()) {
            total += (a - b) * (a - b);
        }
        count += t.values().len();
    }
    Ok(total / count as f64)
}

/// Prediction for one sample with dimension checks against the model.
pub fn predict_heatmaps<P: HeatmapPredictor + ?Sized>(model: &P, sample: &ImageSample) -> Result<Vec<Heatmap>> {
    let (w, h) = model.dims();
    if (sample.features.width(), sample.features.height()) != (w, h) {
        return Err(Error::invalid(format!(
            "model expects {w}x{h} images, sample {} is {}x{}",
            sample.id,
            sample.features.width(),
            sample.features.height()
        )));
    }
    let maps = model.predict(sample)?;
    debug_assert_eq!(maps.len(), model.landmark_count());
    Ok(maps)
}

pub(crate) fn check_training_inputs(
    n: usize,
    dims: (usize, usize),
    data: &Dataset,
    labels: &[LandmarkSet],
) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if labels.len() != data.samples.len() {
        return Err(Error::SizeMismatch {
            expected: data.samples.len(),
            actual: labels.len(),
        });
    }
    if data.dims() != dims {
        return Err(Error::invalid(format!(
            "model expects {}x{} images, dataset has {}x{}",
            dims.0,
            dims.1,
            data.dims().0,
            data.dims().1
        )));
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != n) {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: bad.len(),
        });
    }
    Ok(())
}
