//! Trainable two-stage heatmap model.
//!
//! A shared feature stage filters the image with a few small kernels and
//! rectifies the responses (no bias, so a zero image gives zero features).
//! The raw image plus these feature maps form the channels seen by the
//! read-out: each landmark owns one dense `(2r+1) x (2r+1)` kernel per
//! channel and a bias, and its raw heatmap is the sum of the channel
//! convolutions plus the bias. With a radius close to the image size, every
//! output pixel sees the entire face. Read-out convolutions are evaluated in
//! the frequency domain on an `m x m` grid with `m >= size + r`, which makes
//! the circular convolution exact.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use super::{check_training_inputs, HeatmapPredictor, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::heatmap::Heatmap;
use crate::kv::impl_key_values;
use crate::landmarks::LandmarkSet;
use crate::optim::Adam;
use crate::synth::{Dataset, ImageSample};

pub const CONV_KIND: &str = "conv-readout";

/// Capacity knobs of [`ConvPredictor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPredictorConfig {
    /// Read-out kernel half-width in pixels.
    pub kernel_radius: usize,
    /// Standard deviation of the initial read-out weights.
    pub init_scale: f64,
    /// Number of rectified feature maps; 0 gives a purely linear read-out.
    pub feature_channels: usize,
    /// Feature kernel half-width in pixels.
    pub feature_radius: usize,
    /// Width of the oriented ridge detectors the feature kernels start from.
    pub feature_sigma: f64,
}

impl Default for ConvPredictorConfig {
    fn default() -> Self {
        Self {
            kernel_radius: 32,
            init_scale: 1e-3,
            feature_channels: 4,
            feature_radius: 3,
            feature_sigma: 1.0,
        }
    }
}

impl_key_values!(ConvPredictorConfig, "model", {
    kernel_radius,
    init_scale,
    feature_channels,
    feature_radius,
    feature_sigma,
});

/// Gradient of the mean per-pixel loss, in the flat parameter layout.
pub type ConvGradient = Vec<f64>;

#[derive(Debug, Clone)]
pub struct ConvPredictor {
    n: usize,
    width: usize,
    height: usize,
    radius: usize,
    features: usize,
    feature_radius: usize,
    /// `[read-out kernels (n * channels * ks * ks) | biases (n) | feature kernels (features * fs * fs)]`.
    /// Cell `(dy, dx)` of a kernel holds the weight for offset `(dy - r, dx - r)`.
    params: Vec<f64>,
    epochs_trained: u64,
    fft: Fft2,
    /// Read-out kernel spectra indexed `[k * channels + c]`, refreshed on every parameter change.
    spectra: Vec<Vec<Complex64>>,
    optimizer: Option<Adam>,
}

impl PartialEq for ConvPredictor {
    fn eq(&self, other: &Self) -> bool {
        (
            self.n,
            self.width,
            self.height,
            self.radius,
            self.features,
            self.feature_radius,
            self.epochs_trained,
        ) == (
            other.n,
            other.width,
            other.height,
            other.radius,
            other.features,
            other.feature_radius,
            other.epochs_trained,
        ) && self.params == other.params
    }
}

/// Smallest `2^a 3^b` not below `size + radius`.
fn fft_size(width: usize, height: usize, radius: usize) -> usize {
    let need = width.max(height) + radius;
    let mut best = need.next_power_of_two();
    let mut p3 = 1;
    while p3 < best {
        let mut m = p3;
        while m < need {
            m *= 2;
        }
        best = best.min(m);
        p3 *= 3;
    }
    best
}

/// Zero-mean, unit-norm second-derivative ridge detector across direction `theta`.
fn ridge_kernel(radius: usize, sigma: f64, theta: f64) -> Vec<f64> {
    let r = radius as i64;
    let (nx, ny) = (-theta.sin(), theta.cos());
    let mut k: Vec<f64> = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            let across = (x * nx + y * ny) / sigma;
            k.push((1.0 - across * across) * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        k.iter_mut().for_each(|v| *v /= norm);
    }
    k
}

/// Image and rectified feature maps of one sample, plus pre-activations.
struct Channels {
    maps: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ConvPredictor {
    /// Fresh model: read-out weights drawn from `seed`, biases zero, feature
    /// kernels set to ridge detectors at evenly spaced orientations.
    pub fn init(n: usize, dims: (usize, usize), cfg: &ConvPredictorConfig, seed: u64) -> Result<Self> {
        let (width, height) = dims;
        if n == 0 || width == 0 || height == 0 {
            return Err(Error::invalid("model needs at least one landmark and a non-empty grid"));
        }
        if !(cfg.init_scale >= 0.0) || !(cfg.feature_sigma > 0.0) {
            return Err(Error::invalid(
                "init scale must be non-negative and feature sigma positive",
            ));
        }
        let ks = 2 * cfg.kernel_radius + 1;
        let channels = cfg.feature_channels + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut params: Vec<f64> = (0..n * channels * ks * ks)
            .map(|_| cfg.init_scale * normal.sample(&mut rng))
            .collect();
        params.extend(std::iter::repeat(0.0).take(n));
        for c in 0..cfg.feature_channels {
            let theta = std::f64::consts::PI * c as f64 / cfg.feature_channels as f64;
            params.extend(ridge_kernel(cfg.feature_radius, cfg.feature_sigma, theta));
        }
        Self::from_params(
            n,
            dims,
            cfg.kernel_radius,
            cfg.feature_channels,
            cfg.feature_radius,
            params,
            0,
        )
    }

    fn from_params(
        n: usize,
        dims: (usize, usize),
        radius: usize,
        features: usize,
        feature_radius: usize,
        params: Vec<f64>,
        epochs: u64,
    ) -> Result<Self> {
        let ks = 2 * radius + 1;
        let fs = 2 * feature_radius + 1;
        let expected = n * (features + 1) * ks * ks + n + features * fs * fs;
        if params.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: params.len(),
            });
        }
        let m = fft_size(dims.0, dims.1, radius);
        let mut model = Self {
            n,
            width: dims.0,
            height: dims.1,
            radius,
            features,
            feature_radius,
            params,
            epochs_trained: epochs,
            fft: Fft2::new(m),
            spectra: Vec::new(),
            optimizer: None,
        };
        model.refresh_spectra();
        Ok(model)
    }

    pub fn kernel_radius(&self) -> usize {
        self.radius
    }

    pub fn feature_channels(&self) -> usize {
        self.features
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn epochs_trained(&self) -> u64 {
        self.epochs_trained
    }

    /// Replaces all parameters.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::SizeMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        self.refresh_spectra();
        Ok(())
    }

    fn ks(&self) -> usize {
        2 * self.radius + 1
    }

    fn fs(&self) -> usize {
        2 * self.feature_radius + 1
    }

    fn channels(&self) -> usize {
        self.features + 1
    }

    fn bias_offset(&self) -> usize {
        self.n * self.channels() * self.ks() * self.ks()
    }

    fn feature_offset(&self) -> usize {
        self.bias_offset() + self.n
    }

    fn bias(&self, k: usize) -> f64 {
        self.params[self.bias_offset() + k]
    }

    fn feature_kernel(&self, c: usize) -> &[f64] {
        let fs2 = self.fs() * self.fs();
        let start = self.feature_offset() + c * fs2;
        &self.params[start..start + fs2]
    }

    fn refresh_spectra(&mut self) {
        let m = self.fft.size();
        let ks = self.ks();
        let r = self.radius as i64;
        let count = self.n * self.channels();
        let mut spectra = Vec::with_capacity(count);
        for j in 0..count {
            let kernel = &self.params[j * ks * ks..(j + 1) * ks * ks];
            let mut grid = vec![0.0; m * m];
            for dy in 0..ks {
                let oy = (dy as i64 - r).rem_euclid(m as i64) as usize;
                for dx in 0..ks {
                    let ox = (dx as i64 - r).rem_euclid(m as i64) as usize;
                    grid[oy * m + ox] = kernel[dy * ks + dx];
                }
            }
            spectra.push(self.fft.forward(&grid, m, m));
        }
        self.spectra = spectra;
    }

    fn check_dims(&self, sample: &ImageSample) -> Result<()> {
        if (sample.features.width(), sample.features.height()) != (self.width, self.height) {
            return Err(Error::invalid(format!(
                "model expects {}x{} images, got {}x{}",
                self.width,
                self.height,
                sample.features.width(),
                sample.features.height()
            )));
        }
        Ok(())
    }

    /// Image followed by the rectified feature maps.
    fn channel_maps(&self, sample: &ImageSample) -> Result<Channels> {
        self.check_dims(sample)?;
        let (w, h) = (self.width as i64, self.height as i64);
        let img = &sample.features;
        let fr = self.feature_radius as i64;
        let fs = self.fs();
        let mut maps = vec![img.values().to_vec()];
        let mut pre = Vec::with_capacity(self.features);
        for c in 0..self.features {
            let kernel = self.feature_kernel(c);
            let mut z = vec![0.0; (w * h) as usize];
            for dy in -fr..=fr {
                let krow = &kernel[((dy + fr) as usize) * fs..((dy + fr) as usize + 1) * fs];
                for y in (dy.max(0))..(h + dy).min(h) {
                    let sy = y - dy;
                    let row = &img.values()[(sy * w) as usize..((sy + 1) * w) as usize];
                    let zrow = &mut z[(y * w) as usize..((y + 1) * w) as usize];
                    for dx in -fr..=fr {
                        let k = krow[(dx + fr) as usize];
                        let (lo, hi) = (dx.max(0), (w + dx).min(w));
                        let src = &row[(lo - dx) as usize..(hi - dx) as usize];
                        for (o, v) in zrow[lo as usize..hi as usize].iter_mut().zip(src) {
                            *o += k * v;
                        }
                    }
                }
            }
            maps.push(z.iter().map(|v| v.max(0.0)).collect());
            pre.push(z);
        }
        Ok(Channels { maps, pre })
    }

    fn spectrum_of(&self, map: &[f64]) -> Vec<Complex64> {
        self.fft.forward(map, self.width, self.height)
    }

    /// Unclamped output of landmark `k` given the channel spectra.
    fn raw_output(&self, xs: &[Vec<Complex64>], k: usize) -> Vec<f64> {
        let m = self.fft.size();
        let ch = self.channels();
        let mut buf = vec![Complex64::default(); self.fft.spectrum_len()];
        for (c, x) in xs.iter().enumerate() {
            for ((b, a), s) in buf.iter_mut().zip(x).zip(&self.spectra[k * ch + c]) {
                *b += a * s;
            }
        }
        let spatial = self.fft.inverse(buf, self.height);
        let b = self.bias(k);
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            out.extend(spatial[y * m..y * m + self.width].iter().map(|v| v + b));
        }
        out
    }

    /// Feature-stage responses before rectification, one map per feature channel.
    /// The loss is not differentiable where any of them is exactly zero.
    pub fn feature_preactivations(&self, sample: &ImageSample) -> Result<Vec<Vec<f64>>> {
        Ok(self.channel_maps(sample)?.pre)
    }

    /// Raw (possibly negative) outputs for every landmark.
    pub fn predict_raw(&self, sample: &ImageSample) -> Result<Vec<Vec<f64>>> {
        let chans = self.channel_maps(sample)?;
        let xs: Vec<_> = chans.maps.iter().map(|m| self.spectrum_of(m)).collect();
        Ok((0..self.n).map(|k| self.raw_output(&xs, k)).collect())
    }

    /// Mean per-pixel squared error over `samples` and its gradient.
    pub fn loss_and_gradient(
        &self,
        samples: &[&ImageSample],
        labels: &[&LandmarkSet],
        target_sigma: f64,
    ) -> Result<(f64, ConvGradient)> {
        if samples.is_empty() || samples.len() != labels.len() {
            return Err(Error::invalid("loss needs matching, non-empty samples and labels"));
        }
        let m = self.fft.size();
        let (w, h, n, ch) = (self.width, self.height, self.n, self.channels());
        let (fs, fr) = (self.fs(), self.feature_radius as i64);
        let len = self.fft.spectrum_len();
        let mut acc = vec![vec![Complex64::default(); len]; n * ch];
        let mut bias_grad = vec![0.0; n];
        let mut feat_grad = vec![0.0; self.features * fs * fs];
        let mut loss = 0.0;
        let mut resid = vec![0.0; w * h];
        for (sample, label) in samples.iter().zip(labels) {
            if label.len() != n {
                return Err(Error::SizeMismatch {
                    expected: n,
                    actual: label.len(),
                });
            }
            let chans = self.channel_maps(sample)?;
            let xs: Vec<_> = chans.maps.iter().map(|mp| self.spectrum_of(mp)).collect();
            let mut back = vec![vec![Complex64::default(); len]; self.features];
            for (k, c) in label.to_pixels().into_iter().enumerate() {
                let out = self.raw_output(&xs, k);
                let gx = gaussian_profile(w, c.x as f64, target_sigma);
                let gy = gaussian_profile(h, c.y as f64, target_sigma);
                let mut rsum = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let r = out[y * w + x] - gy[y] * gx[x];
                        loss += r * r;
                        rsum += r;
                        resid[y * w + x] = r;
                    }
                }
                bias_grad[k] += rsum;
                let resid_hat = self.fft.forward(&resid, w, h);
                for (c, x) in xs.iter().enumerate() {
                    for ((a, r), x) in acc[k * ch + c].iter_mut().zip(&resid_hat).zip(x) {
                        *a += r * x.conj();
                    }
                }
                for (f, b) in back.iter_mut().enumerate() {
                    for ((a, r), s) in b.iter_mut().zip(&resid_hat).zip(&self.spectra[k * ch + f + 1]) {
                        *a += r * s.conj();
                    }
                }
            }
            // Back through the rectifier and the feature convolution.
            let img = sample.features.values();
            for (f, b) in back.into_iter().enumerate() {
                let b = self.fft.inverse(b, h);
                let pre = &chans.pre[f];
                // Upstream gradient masked by the rectifier.
                let mut d = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        if pre[y * w + x] > 0.0 {
                            d[y * w + x] = b[y * m + x];
                        }
                    }
                }
                let g = &mut feat_grad[f * fs * fs..(f + 1) * fs * fs];
                let (wi, hi) = (w as i64, h as i64);
                for dy in -fr..=fr {
                    for dx in -fr..=fr {
                        let (lo, up) = (dx.max(0), (wi + dx).min(wi));
                        let mut sum = 0.0;
                        for y in dy.max(0)..(hi + dy).min(hi) {
                            let sy = y - dy;
                            let drow = &d[(y * wi + lo) as usize..(y * wi + up) as usize];
                            let irow = &img[(sy * wi + lo - dx) as usize..(sy * wi + up - dx) as usize];
                            sum += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        g[((dy + fr) as usize) * fs + (dx + fr) as usize] += sum;
                    }
                }
            }
        }
        let count = (samples.len() * n * w * h) as f64;
        let scale = 2.0 / count;
        let ks = self.ks();
        let rad = self.radius as i64;
        let mut grad = vec![0.0; self.params.len()];
        for (j, spec) in acc.into_iter().enumerate() {
            let spec = self.fft.inverse(spec, m);
            let g = &mut grad[j * ks * ks..(j + 1) * ks * ks];
            for dy in 0..ks {
                let oy = (dy as i64 - rad).rem_euclid(m as i64) as usize;
                for dx in 0..ks {
                    let ox = (dx as i64 - rad).rem_euclid(m as i64) as usize;
                    g[dy * ks + dx] = scale * spec[oy * m + ox];
                }
            }
        }
        let bo = self.bias_offset();
        for k in 0..n {
            grad[bo + k] = scale * bias_grad[k];
        }
        let fo = self.feature_offset();
        for (g, v) in grad[fo..].iter_mut().zip(&feat_grad) {
            *g = scale * v;
        }
        Ok((loss / count, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (bo, fo) = (self.bias_offset(), self.feature_offset());
        Checkpoint::new(CONV_KIND, self.n, vec![self.width, self.height])
            .with_meta("kernel_radius", self.radius)
            .with_meta("feature_channels", self.features)
            .with_meta("feature_radius", self.feature_radius)
            .with_meta("epochs_trained", self.epochs_trained)
            .with_block("kernels", self.params[..bo].to_vec())
            .with_block("bias", self.params[bo..fo].to_vec())
            .with_block("features", self.params[fo..].to_vec())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CONV_KIND)?;
        if ck.dims.len() != 2 {
            return Err(Error::invalid("conv checkpoint needs two dims"));
        }
        let n = ck.landmarks;
        let radius: usize = ck.meta_parse("kernel_radius")?;
        let features: usize = ck.meta_parse("feature_channels")?;
        let feature_radius: usize = ck.meta_parse("feature_radius")?;
        let epochs: u64 = ck.meta_parse("epochs_trained")?;
        let ks = 2 * radius + 1;
        let fs = 2 * feature_radius + 1;
        let mut params = ck.block("kernels", n * (features + 1) * ks * ks)?.to_vec();
        params.extend_from_slice(ck.block("bias", n)?);
        params.extend_from_slice(ck.block("features", features * fs * fs)?);
        Self::from_params(
            n,
            (ck.dims[0], ck.dims[1]),
            radius,
            features,
            feature_radius,
            params,
            epochs,
        )
    }
}

/// `exp(-(i - c)² / (2σ²))` for `i` in `0..len`.
fn gaussian_profile(len: usize, c: f64, sigma: f64) -> Vec<f64> {
    let d = 2.0 * sigma * sigma;
    (0..len).map(|i| (-(i as f64 - c).powi(2) / d).exp()).collect()
}

impl HeatmapPredictor for ConvPredictor {
    fn landmark_count(&self) -> usize {
        self.n
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn predict(&self, sample: &ImageSample) -> Result<Vec<Heatmap>> {
        self.predict_raw(sample)?
            .into_iter()
            .map(|raw| Heatmap::from_raw_clamped(self.width, self.height, raw))
            .collect()
    }

    fn train_epoch(&mut self, data: &Dataset, labels: &[LandmarkSet], tcfg: &TrainConfig) -> Result<f64> {
        check_training_inputs(self.n, (self.width, self.height), data, labels)?;
        tcfg.validate()?;
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(self.epochs_trained);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let rate = tcfg.rate_at(self.epochs_trained);
        let len = self.params.len();
        for batch in order.chunks(tcfg.batch_size) {
            let samples: Vec<&ImageSample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let batch_labels: Vec<&LandmarkSet> = batch.iter().map(|&i| &labels[i]).collect();
            let (loss, grad) = self.loss_and_gradient(&samples, &batch_labels, tcfg.target_sigma)?;
            total += loss * batch.len() as f64;
            let opt = self.optimizer.get_or_insert_with(|| Adam::new(len));
            opt.step(&mut self.params, &grad, rate);
            if rate != 0.0 {
                self.refresh_spectra();
            }
        }
        self.epochs_trained += 1;
        Ok(total / data.samples.len() as f64)
    }

    fn reset_optimizer(&mut self) {
        self.optimizer = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::render_target_heatmap;
    use crate::landmarks::{Point2, Role};
    use crate::synth::{make_dataset, SynthConfig};
    use rand::Rng;

    fn micro_sample(rng: &mut ChaCha8Rng, id: u64, w: usize, h: usize) -> (ImageSample, LandmarkSet) {
        let values = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        let labels = LandmarkSet::new(
            (0..2)
                .map(|_| Point2::new(rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64))
                .collect(),
            Role::Latent,
        );
        let sample = ImageSample {
            id,
            features: Heatmap::new(w, h, values).unwrap(),
            truth: labels.clone(),
            annotation: labels.clone(),
            tangents: vec![Point2::new(1.0, 0.0); 2],
        };
        (sample, labels)
    }

    /// Direct spatial evaluation of one raw output, for checking the FFT path.
    fn direct_output(model: &ConvPredictor, sample: &ImageSample, k: usize) -> Vec<f64> {
        let (w, h, ks, r) = (model.width, model.height, model.ks(), model.radius as i64);
        let chans = model.channel_maps(sample).unwrap();
        let mut out = vec![model.bias(k); w * h];
        for (c, map) in chans.maps.iter().enumerate() {
            let j = k * model.channels() + c;
            let kernel = &model.params[j * ks * ks..(j + 1) * ks * ks];
            let img = Heatmap::new(w, h, map.clone()).unwrap();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            acc +=
                                kernel[((dy + r) as usize) * ks + (dx + r) as usize] * img.get_or_zero(x - dx, y - dy);
                        }
                    }
                    out[y as usize * w + x as usize] += acc;
                }
            }
        }
        out
    }

    /// Direct rectified feature map `c` of a sample.
    fn direct_feature(model: &ConvPredictor, sample: &ImageSample, c: usize) -> Vec<f64> {
        let (w, h, fs, r) = (model.width, model.height, model.fs(), model.feature_radius as i64);
        let kernel = model.feature_kernel(c);
        let mut out = vec![0.0; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += kernel[((dy + r) as usize) * fs + (dx + r) as usize]
                            * sample.features.get_or_zero(x - dx, y - dy);
                    }
                }
                out[y as usize * w + x as usize] = acc.max(0.0);
            }
        }
        out
    }

    fn micro_cfg(kernel_radius: usize, init_scale: f64, feature_channels: usize) -> ConvPredictorConfig {
        ConvPredictorConfig {
            kernel_radius,
            init_scale,
            feature_channels,
            feature_radius: 1,
            feature_sigma: 0.8,
        }
    }

    #[test]
    fn fft_output_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ConvPredictor::init(2, (9, 7), &micro_cfg(5, 0.3, 2), 3).unwrap();
        let mut p = model.params().to_vec();
        p[model.bias_offset() + 1] = 0.25;
        model.set_params(&p).unwrap();
        let (sample, _) = micro_sample(&mut rng, 0, 9, 7);
        let chans = model.channel_maps(&sample).unwrap();
        for c in 0..2 {
            let direct = direct_feature(&model, &sample, c);
            assert!(direct.iter().any(|v| *v > 0.0));
            assert_eq!(chans.maps[c + 1].len(), direct.len());
            for (a, b) in chans.maps[c + 1].iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let raw = model.predict_raw(&sample).unwrap();
        for k in 0..2 {
            let direct = direct_output(&model, &sample, k);
            for (a, b) in raw[k].iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_sizes_are_smooth_and_large_enough() {
        assert_eq!(fft_size(64, 64, 40), 108);
        assert_eq!(fft_size(64, 64, 64), 128);
        assert_eq!(fft_size(9, 7, 5), 16);
        assert_eq!(fft_size(1, 1, 0), 1);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ConvPredictorConfig::default();
        let a = ConvPredictor::init(3, (16, 16), &cfg, 9).unwrap();
        let b = ConvPredictor::init(3, (16, 16), &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = ConvPredictor::init(3, (16, 16), &cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_image_gives_bias_only_maps() {
        let mut model = ConvPredictor::init(2, (12, 10), &micro_cfg(4, 0.1, 3), 0).unwrap();
        let mut p = model.params().to_vec();
        p[model.bias_offset()] = 0.4;
        p[model.bias_offset() + 1] = -0.2;
        model.set_params(&p).unwrap();
        let sample = ImageSample {
            id: 0,
            features: Heatmap::zeros(12, 10).unwrap(),
            truth: LandmarkSet::new(vec![], Role::Truth),
            annotation: LandmarkSet::new(vec![], Role::Annotation),
            tangents: vec![],
        };
        let maps = model.predict(&sample).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!((m.width(), m.height()), (12, 10));
            let first = m.values()[0];
            assert!(m.values().iter().all(|v| (v - first).abs() < 1e-12));
        }
        assert!((maps[0].values()[0] - 0.4).abs() < 1e-12);
        // Negative raw output is clamped.
        assert!(maps[1].values().iter().all(|v| *v == 0.0));
    }

    /// Worst relative error between the analytic gradient and central
    /// differences with step `1e-4`, over every parameter.
    fn worst_gradient_error(model: &ConvPredictor, samples: &[&ImageSample], labels: &[&LandmarkSet]) -> f64 {
        let (_, grad) = model.loss_and_gradient(samples, labels, 1.2).unwrap();
        let h = 1e-4;
        let mut probe = model.clone();
        let base = model.params().to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let up = probe.loss_and_gradient(samples, labels, 1.2).unwrap().0;
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = probe.loss_and_gradient(samples, labels, 1.2).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in [42, 43, 44] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ConvPredictor::init(2, (8, 6), &micro_cfg(3, 0.2, 2), seed).unwrap();
            // Central differences are only valid away from the rectifier's kink.
            let clear = |s: &ImageSample| {
                let chans = model.channel_maps(s).unwrap();
                chans.pre.iter().flatten().all(|v| v.abs() > 1e-2)
            };
            let mut pairs = Vec::new();
            while pairs.len() < 3 {
                let pair = micro_sample(&mut rng, pairs.len() as u64, 8, 6);
                if clear(&pair.0) {
                    pairs.push(pair);
                }
            }
            let samples: Vec<&ImageSample> = pairs.iter().map(|p| &p.0).collect();
            let labels: Vec<&LandmarkSet> = pairs.iter().map(|p| &p.1).collect();
            let worst = worst_gradient_error(&model, &samples, &labels);
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = make_dataset(4, &SynthConfig::default(), 3).unwrap();
        let cfg = ConvPredictorConfig {
            kernel_radius: 8,
            ..ConvPredictorConfig::default()
        };
        let mut model = ConvPredictor::init(20, (64, 64), &cfg, 1).unwrap();
        let before = model.params().to_vec();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let labels = data.annotations();
        let loss = model.train_epoch(&data, &labels, &tcfg).unwrap();
        assert_eq!(model.params(), &before[..]);
        let mut direct = 0.0;
        for (s, l) in data.samples.iter().zip(&labels) {
            let raw = model.predict_raw(s).unwrap();
            let targets = crate::predictor::render_targets(l, (64, 64), tcfg.target_sigma).unwrap();
            for (r, t) in raw.iter().zip(&targets) {
                direct += r.iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        direct /= (4 * 20 * 64 * 64) as f64;
        assert!((loss - direct).abs() < 1e-12 * direct, "{loss} vs {direct}");
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        // Image equal to the target, identity kernel: residual vanishes.
        let target = render_target_heatmap(10, 10, crate::heatmap::PixelCoord::new(4, 6), 1.5).unwrap();
        let labels = LandmarkSet::new(vec![Point2::new(4.0, 6.0)], Role::Latent);
        let sample = ImageSample {
            id: 0,
            features: target,
            truth: labels.clone(),
            annotation: labels.clone(),
            tangents: vec![Point2::new(1.0, 0.0)],
        };
        let cfg = micro_cfg(2, 0.0, 0);
        let mut model = ConvPredictor::init(1, (10, 10), &cfg, 0).unwrap();
        let mut p = model.params().to_vec();
        p[2 * 5 + 2] = 1.0;
        model.set_params(&p).unwrap();
        let (loss, _) = model.loss_and_gradient(&[&sample], &[&labels], 1.5).unwrap();
        assert!(loss < 1e-28, "loss {loss}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = micro_cfg(3, 0.5, 2);
        let model = ConvPredictor::init(2, (8, 8), &cfg, 4).unwrap();
        let text = model.to_checkpoint().to_text();
        assert!(text.starts_with("model 1 2 8 8\n"));
        let back = ConvPredictor::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_checkpoint().to_text(), text);
    }
}
