use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::kv::impl_key_values;
use crate::landmarks::{LandmarkSet, Point2, Role};
use crate::optim::Adam;
use crate::predictor::TrainConfig;

pub const GHCU_KIND: &str = "ghcu";

/// One strided convolution: `kernel x kernel`, stride 2, same padding, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub kernel: usize,
    pub channels: usize,
}

/// Parses `"3x16,3x16"` into stages.
pub fn parse_stages(s: &str) -> Result<Vec<ConvStage>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (k, c) = t
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::invalid(format!("bad stage `{t}`, expected `<kernel>x<channels>`")))?;
            let kernel: usize = k.parse().map_err(|_| Error::invalid(format!("bad kernel in `{t}`")))?;
            let channels: usize = c
                .parse()
                .map_err(|_| Error::invalid(format!("bad channels in `{t}`")))?;
            if kernel % 2 == 0 || channels == 0 {
                return Err(Error::invalid(format!(
                    "stage `{t}` needs an odd kernel and channels > 0"
                )));
            }
            Ok(ConvStage { kernel, channels })
        })
        .collect()
}

pub fn format_stages(stages: &[ConvStage]) -> String {
    stages
        .iter()
        .map(|s| format!("{}x{}", s.kernel, s.channels))
        .collect::<Vec<_>>()
        .join(",")
}

/// What replaces an occluded landmark's heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionFill {
    Zeros,
    /// Uniform noise up to the original map's maximum.
    Noise,
}

impl FromStr for OcclusionFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(OcclusionFill::Zeros),
            "noise" => Ok(OcclusionFill::Noise),
            _ => Err(Error::invalid(format!("unknown occlusion fill `{s}`"))),
        }
    }
}

impl fmt::Display for OcclusionFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OcclusionFill::Zeros => "zeros",
            OcclusionFill::Noise => "noise",
        })
    }
}

/// Regression target used when training the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GhcuTarget {
    Truth,
    /// Supplied labels, e.g. annotations or searched labels.
    Labels,
}

impl FromStr for GhcuTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(GhcuTarget::Truth),
            "labels" => Ok(GhcuTarget::Labels),
            _ => Err(Error::invalid(format!("unknown regression target `{s}`"))),
        }
    }
}

impl fmt::Display for GhcuTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GhcuTarget::Truth => "truth",
            GhcuTarget::Labels => "labels",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhcuConfig {
    /// Average-pooling factor applied to the stacked heatmaps.
    pub pool: usize,
    pub stages: String,
    pub hidden: usize,
    pub init_seed: u64,
    pub occlusion_probability: f64,
    pub occlusion_fill: OcclusionFill,
    pub target: GhcuTarget,
}

impl Default for GhcuConfig {
    fn default() -> Self {
        Self {
            pool: 2,
            stages: "3x16,3x16,3x16,3x16".into(),
            hidden: 64,
            init_seed: 1,
            occlusion_probability: 0.2,
            occlusion_fill: OcclusionFill::Zeros,
            target: GhcuTarget::Truth,
        }
    }
}

impl_key_values!(GhcuConfig, "ghcu", {
    pool,
    stages,
    hidden,
    init_seed,
    occlusion_probability,
    occlusion_fill,
    target,
});

impl GhcuConfig {
    /// Six 2x-downsampling stages (5x5/64, 3x3/64, 3x3/32, 3x3/32, 3x3/16,
    /// 3x3/16) and a 256-wide hidden layer, on unpooled heatmaps.
    pub fn table1() -> Self {
        Self {
            pool: 1,
            stages: "5x64,3x64,3x32,3x32,3x16,3x16".into(),
            hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.hidden == 0 {
            return Err(Error::invalid("ghcu pool and hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::invalid("occlusion probability must lie in [0, 1]"));
        }
        parse_stages(&self.stages)?;
        Ok(())
    }
}

/// Per-landmark occlusion flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub occluded: Vec<bool>,
}

impl OcclusionMask {
    pub fn count(&self) -> usize {
        self.occluded.iter().filter(|o| **o).count()
    }
}

/// Replaces each heatmap with probability `p` by zeros or uniform noise.
pub fn simulate_occlusion(
    heatmaps: &[Heatmap],
    p: f64,
    fill: OcclusionFill,
    rng: &mut impl Rng,
) -> Result<(Vec<Heatmap>, OcclusionMask)> {
    let mut out = Vec::with_capacity(heatmaps.len());
    let mut occluded = Vec::with_capacity(heatmaps.len());
    for h in heatmaps {
        let hit = rng.gen::<f64>() < p;
        occluded.push(hit);
        if !hit {
            out.push(h.clone());
            continue;
        }
        out.push(match fill {
            OcclusionFill::Zeros => Heatmap::zeros(h.width(), h.height())?,
            OcclusionFill::Noise => {
                let top = if h.max_value() > 0.0 { h.max_value() } else { 1.0 };
                let v = (0..h.values().len()).map(|_| top * rng.gen::<f64>()).collect();
                Heatmap::new(h.width(), h.height(), v)?
            }
        });
    }
    Ok((out, OcclusionMask { occluded }))
}

/// Dot product with four independent partial sums, so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvGeom {
    fn pad(&self) -> i64 {
        (self.k / 2) as i64
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Gathers each output position's receptive field (zero outside the
    /// input) in weight order, then takes one dot product per channel.
    fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let (k, pad) = (self.k, self.pad());
        let plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        let fan = self.in_c * k * k;
        let mut patch = vec![0.0; fan];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let mut i = 0;
                for ic in 0..self.in_c {
                    let src = &x[ic * in_plane..(ic + 1) * in_plane];
                    for ky in 0..k {
                        let iy = (2 * oy + ky) as i64 - pad;
                        for kx in 0..k {
                            let ix = (2 * ox + kx) as i64 - pad;
                            patch[i] = if iy >= 0 && iy < self.in_h as i64 && ix >= 0 && ix < self.in_w as i64 {
                                src[iy as usize * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                            i += 1;
                        }
                    }
                }
                for oc in 0..self.out_c {
                    let w = &params[self.w_off + oc * fan..self.w_off + (oc + 1) * fan];
                    let v = params[self.b_off + oc] + dot(w, &patch);
                    y[oc * plane + oy * self.out_w + ox] = v.max(0.0);
                }
            }
        }
    }

    /// `dy` is the gradient w.r.t. the post-ReLU output `y`. Accumulates into
    /// `grad` and returns the gradient w.r.t. `x` when `want_dx`.
    fn backward(&self, params: &[f64], x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let (k, pad) = (self.k, self.pad());
        let plane = self.out_h * self.out_w;
        let dz: Vec<f64> = dy.iter().zip(y).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        let mut dx = dx;
        if let Some(d) = dx.as_deref_mut() {
            d.fill(0.0);
        }
        for oc in 0..self.out_c {
            let dzo = &dz[oc * plane..(oc + 1) * plane];
            grad[self.b_off + oc] += dzo.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let in_plane = self.in_h * self.in_w;
                let src = &x[ic * in_plane..(ic + 1) * in_plane];
                let wbase = self.w_off + ((oc * self.in_c + ic) * k) * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w = params[wbase + ky * k + kx];
                        let mut gw = 0.0;
                        for oy in 0..self.out_h {
                            let iy = (2 * oy) as i64 + ky as i64 - pad;
                            if iy < 0 || iy >= self.in_h as i64 {
                                continue;
                            }
                            let ibase = iy as usize * self.in_w;
                            for ox in 0..self.out_w {
                                let ix = (2 * ox) as i64 + kx as i64 - pad;
                                if ix < 0 || ix as usize >= self.in_w {
                                    continue;
                                }
                                let g = dzo[oy * self.out_w + ox];
                                gw += g * src[ibase + ix as usize];
                                if let Some(d) = dx.as_deref_mut() {
                                    d[ic * in_plane + ibase + ix as usize] += g * w;
                                }
                            }
                        }
                        grad[wbase + ky * k + kx] += gw;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseGeom {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

impl DenseGeom {
    fn forward(&self, params: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let w = &params[self.w_off + o * self.inputs..self.w_off + (o + 1) * self.inputs];
                let v = params[self.b_off + o] + dot(w, x);
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }

    /// `dz` is the gradient w.r.t. the pre-activation.
    fn backward(&self, params: &[f64], x: &[f64], dz: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.b_off + o] += g;
            let base = self.w_off + o * self.inputs;
            for i in 0..self.inputs {
                grad[base + i] += g * x[i];
                dx[i] += g * params[base + i];
            }
        }
        dx
    }
}

/// A training pair: pooled stacked heatmaps and the target in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct GhcuExample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Per-landmark maxima of the pooled input, for noise filling.
    pub maxima: Vec<f64>,
}

/// Heatmap-to-coordinate regressor.
#[derive(Debug, Clone)]
pub struct GhcuModel {
    n: usize,
    width: usize,
    height: usize,
    pool: usize,
    stages: Vec<ConvStage>,
    hidden: usize,
    convs: Vec<ConvGeom>,
    fc1: DenseGeom,
    fc2: DenseGeom,
    params: Vec<f64>,
    epochs_trained: u64,
    optimizer: Option<Adam>,
}

impl PartialEq for GhcuModel {
    fn eq(&self, other: &Self) -> bool {
        (
            self.n,
            self.width,
            self.height,
            self.pool,
            self.hidden,
            self.epochs_trained,
        ) == (
            other.n,
            other.width,
            other.height,
            other.pool,
            other.hidden,
            other.epochs_trained,
        ) && self.stages == other.stages
            && self.params == other.params
    }
}

struct Activations {
    layers: Vec<Vec<f64>>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl GhcuModel {
    fn layout(
        n: usize,
        dims: (usize, usize),
        pool: usize,
        stages: &[ConvStage],
        hidden: usize,
    ) -> Result<(Vec<ConvGeom>, DenseGeom, DenseGeom, usize)> {
        if n == 0 || pool == 0 || hidden == 0 {
            return Err(Error::invalid(
                "ghcu needs landmarks, a pool factor, and a hidden width",
            ));
        }
        if dims.0 % pool != 0 || dims.1 % pool != 0 || dims.0 == 0 || dims.1 == 0 {
            return Err(Error::invalid(format!(
                "heatmap size {}x{} is not divisible by pool {pool}",
                dims.0, dims.1
            )));
        }
        let (mut c, mut h, mut w) = (n, dims.1 / pool, dims.0 / pool);
        let mut off = 0;
        let mut convs = Vec::with_capacity(stages.len());
        for s in stages {
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let g = ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: s.channels,
                out_h: oh,
                out_w: ow,
                k: s.kernel,
                w_off: off,
                b_off: off + s.channels * c * s.kernel * s.kernel,
            };
            off = g.b_off + s.channels;
            convs.push(g);
            (c, h, w) = (s.channels, oh, ow);
        }
        let flat = c * h * w;
        let fc1 = DenseGeom {
            inputs: flat,
            outputs: hidden,
            w_off: off,
            b_off: off + flat * hidden,
        };
        off = fc1.b_off + hidden;
        let fc2 = DenseGeom {
            inputs: hidden,
            outputs: 2 * n,
            w_off: off,
            b_off: off + hidden * 2 * n,
        };
        off = fc2.b_off + 2 * n;
        Ok((convs, fc1, fc2, off))
    }

    fn assemble(
        n: usize,
        dims: (usize, usize),
        pool: usize,
        stages: Vec<ConvStage>,
        hidden: usize,
        params: Vec<f64>,
        epochs_trained: u64,
    ) -> Result<Self> {
        let (convs, fc1, fc2, len) = Self::layout(n, dims, pool, &stages, hidden)?;
        if params.len() != len {
            return Err(Error::SizeMismatch {
                expected: len,
                actual: params.len(),
            });
        }
        Ok(Self {
            n,
            width: dims.0,
            height: dims.1,
            pool,
            stages,
            hidden,
            convs,
            fc1,
            fc2,
            params,
            epochs_trained,
            optimizer: None,
        })
    }

    /// He-initialized weights drawn from `cfg.init_seed`; biases zero.
    pub fn init(n: usize, dims: (usize, usize), cfg: &GhcuConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = parse_stages(&cfg.stages)?;
        let (convs, fc1, fc2, len) = Self::layout(n, dims, cfg.pool, &stages, cfg.hidden)?;
        let mut params = vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut fill = |start: usize, end: usize, scale: f64, rng: &mut ChaCha8Rng| {
            for p in &mut params[start..end] {
                *p = scale * std.sample(rng);
            }
        };
        for g in &convs {
            fill(g.w_off, g.b_off, (2.0 / (g.in_c * g.k * g.k) as f64).sqrt(), &mut rng);
        }
        fill(fc1.w_off, fc1.b_off, (2.0 / fc1.inputs as f64).sqrt(), &mut rng);
        fill(fc2.w_off, fc2.b_off, 0.1 * (1.0 / fc2.inputs as f64).sqrt(), &mut rng);
        Self::assemble(n, dims, cfg.pool, stages, cfg.hidden, params, 0)
    }

    pub fn landmark_count(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::SizeMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn epochs_trained(&self) -> u64 {
        self.epochs_trained
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = None;
    }

    fn input_len(&self) -> usize {
        self.n * (self.width / self.pool) * (self.height / self.pool)
    }

    /// Average-pooled, stacked input tensor.
    pub fn pooled_input(&self, heatmaps: &[Heatmap]) -> Result<Vec<f64>> {
        if heatmaps.len() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: heatmaps.len(),
            });
        }
        let (pw, ph, p) = (self.width / self.pool, self.height / self.pool, self.pool);
        let inv = 1.0 / (p * p) as f64;
        let mut out = vec![0.0; self.input_len()];
        for (k, h) in heatmaps.iter().enumerate() {
            if (h.width(), h.height()) != (self.width, self.height) {
                return Err(Error::invalid(format!(
                    "ghcu expects {}x{} heatmaps, got {}x{}",
                    self.width,
                    self.height,
                    h.width(),
                    h.height()
                )));
            }
            let plane = &mut out[k * pw * ph..(k + 1) * pw * ph];
            for (y, row) in h.values().chunks(self.width).enumerate() {
                let dst = &mut plane[(y / p) * pw..(y / p + 1) * pw];
                for (d, cell) in dst.iter_mut().zip(row.chunks_exact(p)) {
                    *d += cell.iter().sum::<f64>() * inv;
                }
            }
        }
        Ok(out)
    }

    fn center_and_half(&self) -> (f64, f64, f64, f64) {
        let (hx, hy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        (hx, hy, hx, hy)
    }

    /// Coordinates in `[-1, 1]`-ish normalized units.
    fn normalize(&self, labels: &LandmarkSet) -> Vec<f64> {
        let (cx, cy, hx, hy) = self.center_and_half();
        labels
            .points
            .iter()
            .flat_map(|p| [(p.x - cx) / hx, (p.y - cy) / hy])
            .collect()
    }

    fn denormalize(&self, out: &[f64]) -> LandmarkSet {
        let (cx, cy, hx, hy) = self.center_and_half();
        LandmarkSet::new(
            out.chunks(2)
                .map(|c| Point2::new(cx + hx * c[0], cy + hy * c[1]))
                .collect(),
            Role::Prediction,
        )
    }

    pub fn example(&self, heatmaps: &[Heatmap], target: &LandmarkSet) -> Result<GhcuExample> {
        if target.len() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: target.len(),
            });
        }
        let input = self.pooled_input(heatmaps)?;
        let plane = input.len() / self.n;
        let maxima = input
            .chunks(plane)
            .map(|c| c.iter().copied().fold(0.0, f64::max))
            .collect();
        Ok(GhcuExample {
            input,
            target: self.normalize(target),
            maxima,
        })
    }

    fn activations(&self, input: &[f64]) -> Activations {
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for (i, g) in self.convs.iter().enumerate() {
            let mut y = vec![0.0; g.out_len()];
            let x = if i == 0 { input } else { &layers[i - 1] };
            g.forward(&self.params, x, &mut y);
            layers.push(y);
        }
        let flat: &[f64] = layers.last().map_or(input, |v| v.as_slice());
        let hidden = self.fc1.forward(&self.params, flat, true);
        let output = self.fc2.forward(&self.params, &hidden, false);
        Activations { layers, hidden, output }
    }

    /// Regressed landmarks for one set of heatmaps.
    pub fn forward(&self, heatmaps: &[Heatmap]) -> Result<LandmarkSet> {
        let input = self.pooled_input(heatmaps)?;
        Ok(self.denormalize(&self.activations(&input).output))
    }

    /// Mean squared error (normalized units, averaged over `2N` outputs and
    /// the batch) and its gradient, accumulated into `grad`.
    fn accumulate(&self, input: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let act = self.activations(input);
        let m = 2 * self.n;
        let mut loss = 0.0;
        let dout: Vec<f64> = act
            .output
            .iter()
            .zip(target)
            .map(|(o, t)| {
                let r = o - t;
                loss += r * r;
                2.0 * r * scale / m as f64
            })
            .collect();
        let dh = self.fc2.backward(&self.params, &act.hidden, &dout, grad);
        let dz1: Vec<f64> = dh
            .iter()
            .zip(&act.hidden)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let flat: &[f64] = act.layers.last().map_or(input, |v| v.as_slice());
        let mut dy = self.fc1.backward(&self.params, flat, &dz1, grad);
        for i in (0..self.convs.len()).rev() {
            let g = &self.convs[i];
            let x = if i == 0 { input } else { &act.layers[i - 1] };
            if i == 0 {
                g.backward(&self.params, x, &act.layers[i], &dy, grad, None);
            } else {
                let mut dx = vec![0.0; g.in_len()];
                g.backward(&self.params, x, &act.layers[i], &dy, grad, Some(&mut dx));
                dy = dx;
            }
        }
        loss / m as f64
    }

    pub fn loss_and_gradient(&self, examples: &[&GhcuExample]) -> Result<(f64, Vec<f64>)> {
        if examples.is_empty() {
            return Err(Error::Empty("ghcu examples"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / examples.len() as f64;
        let mut loss = 0.0;
        for ex in examples {
            self.check_example(ex)?;
            loss += self.accumulate(&ex.input, &ex.target, scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    fn check_example(&self, ex: &GhcuExample) -> Result<()> {
        if ex.input.len() != self.input_len() || ex.target.len() != 2 * self.n || ex.maxima.len() != self.n {
            return Err(Error::invalid("ghcu example does not match the model layout"));
        }
        Ok(())
    }

    /// One shuffled mini-batch pass; each landmark's channel is occluded with
    /// probability `occlusion_probability`. Returns the mean loss.
    pub fn train_epoch(&mut self, examples: &[GhcuExample], tcfg: &TrainConfig, cfg: &GhcuConfig) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("ghcu training data"));
        }
        tcfg.validate()?;
        for ex in examples {
            self.check_example(ex)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(self.epochs_trained);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let plane = self.input_len() / self.n;
        let cells = self.pool * self.pool;
        let len = self.params.len();
        let mut total = 0.0;
        let rate = tcfg.rate_at(self.epochs_trained);
        let mut input = vec![0.0; self.input_len()];
        for batch in order.chunks(tcfg.batch_size) {
            let mut grad = vec![0.0; len];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                input.copy_from_slice(&ex.input);
                for k in 0..self.n {
                    if rng.gen::<f64>() >= cfg.occlusion_probability {
                        continue;
                    }
                    let chan = &mut input[k * plane..(k + 1) * plane];
                    match cfg.occlusion_fill {
                        OcclusionFill::Zeros => chan.fill(0.0),
                        OcclusionFill::Noise => {
                            let top = if ex.maxima[k] > 0.0 { ex.maxima[k] } else { 1.0 };
                            for v in chan.iter_mut() {
                                *v = top * (0..cells).map(|_| rng.gen::<f64>()).sum::<f64>() / cells as f64;
                            }
                        }
                    }
                }
                total += self.accumulate(&input, &ex.target, scale, &mut grad);
            }
            let opt = self.optimizer.get_or_insert_with(|| Adam::new(len));
            opt.step(&mut self.params, &grad, rate);
        }
        self.epochs_trained += 1;
        Ok(total / examples.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(GHCU_KIND, self.n, vec![self.width, self.height])
            .with_meta("pool", self.pool)
            .with_meta("stages", format_stages(&self.stages))
            .with_meta("hidden", self.hidden)
            .with_meta("epochs_trained", self.epochs_trained)
            .with_block("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(GHCU_KIND)?;
        let [w, h] = ck.dims[..] else {
            return Err(Error::invalid("ghcu checkpoint needs two dims"));
        };
        let stages = parse_stages(ck.meta("stages")?)?;
        let pool: usize = ck.meta_parse("pool")?;
        let hidden: usize = ck.meta_parse("hidden")?;
        let (_, _, _, len) = Self::layout(ck.landmarks, (w, h), pool, &stages, hidden)?;
        let params = ck.block("params", len)?.to_vec();
        Self::assemble(
            ck.landmarks,
            (w, h),
            pool,
            stages,
            hidden,
            params,
            ck.meta_parse("epochs_trained")?,
        )
    }

    /// Upper bound on the output change per unit input change (2-norm).
    pub fn lipschitz_bound(&self) -> f64 {
        let fro = |a: usize, b: usize| self.params[a..b].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut bound = 1.0;
        for g in &self.convs {
            // Each input cell feeds at most k*k outputs per channel.
            bound *= g.k as f64 * fro(g.w_off, g.b_off);
        }
        bound * fro(self.fc1.w_off, self.fc1.b_off) * fro(self.fc2.w_off, self.fc2.b_off)
    }
}

pub fn ghcu_forward(model: &GhcuModel, heatmaps: &[Heatmap]) -> Result<LandmarkSet> {
    model.forward(heatmaps)
}

/// Trains for `tcfg.passes` epochs; returns the loss of each epoch.
pub fn ghcu_train(
    model: &mut GhcuModel,
    examples: &[GhcuExample],
    tcfg: &TrainConfig,
    cfg: &GhcuConfig,
) -> Result<Vec<f64>> {
    (0..tcfg.passes)
        .map(|_| model.train_epoch(examples, tcfg, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> GhcuConfig {
        GhcuConfig {
            pool: 2,
            stages: "3x3,3x2".into(),
            hidden: 5,
            init_seed: 4,
            ..GhcuConfig::default()
        }
    }

    fn micro_examples(model: &GhcuModel, rng: &mut ChaCha8Rng, count: usize) -> Vec<GhcuExample> {
        (0..count)
            .map(|_| {
                let maps: Vec<Heatmap> = (0..2)
                    .map(|_| Heatmap::new(12, 10, (0..120).map(|_| rng.gen::<f64>()).collect()).unwrap())
                    .collect();
                let target = LandmarkSet::new(
                    (0..2)
                        .map(|_| Point2::new(rng.gen_range(0.0..12.0), rng.gen_range(0.0..10.0)))
                        .collect(),
                    Role::Truth,
                );
                model.example(&maps, &target).unwrap()
            })
            .collect()
    }

    #[test]
    fn stage_strings_roundtrip() {
        let s = parse_stages("5x64,3x64,3x32").unwrap();
        assert_eq!(
            s[0],
            ConvStage {
                kernel: 5,
                channels: 64
            }
        );
        assert_eq!(format_stages(&s), "5x64,3x64,3x32");
        assert!(parse_stages("4x8").is_err());
        assert!(parse_stages("3y8").is_err());
    }

    #[test]
    fn each_stage_halves_resolution() {
        let m = GhcuModel::init(20, (64, 64), &GhcuConfig::default()).unwrap();
        let sizes: Vec<usize> = m.convs.iter().map(|g| g.out_h).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        let t1 = GhcuModel::init(20, (64, 64), &GhcuConfig::table1()).unwrap();
        let sizes: Vec<usize> = t1.convs.iter().map(|g| g.out_h).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(t1.fc1.outputs, 256);
        assert_eq!(t1.fc2.outputs, 40);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..3 {
            let model = GhcuModel::init(
                2,
                (12, 10),
                &GhcuConfig {
                    init_seed: trial,
                    ..micro_cfg()
                },
            )
            .unwrap();
            let exs = micro_examples(&model, &mut rng, 3);
            let refs: Vec<&GhcuExample> = exs.iter().collect();
            let (_, grad) = model.loss_and_gradient(&refs).unwrap();
            let mut probe = model.clone();
            let base = model.params().to_vec();
            let h = 1e-4;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                probe.set_params(&p).unwrap();
                let up = probe.loss_and_gradient(&refs).unwrap().0;
                p[i] -= 2.0 * h;
                probe.set_params(&p).unwrap();
                let down = probe.loss_and_gradient(&refs).unwrap().0;
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs());
                if denom > 1e-9 {
                    assert!((fd - grad[i]).abs() / denom < 1e-3, "param {i}: fd {fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn output_is_deterministic_and_sized() {
        let cfg = GhcuConfig::default();
        let a = GhcuModel::init(20, (64, 64), &cfg).unwrap();
        let b = GhcuModel::init(20, (64, 64), &cfg).unwrap();
        assert_eq!(a, b);
        let maps: Vec<Heatmap> = (0..20)
            .map(|k| {
                crate::heatmap::render_target_heatmap(64, 64, crate::heatmap::PixelCoord::new(3 * k, 40), 1.5).unwrap()
            })
            .collect();
        let oa = a.forward(&maps).unwrap();
        assert_eq!(oa.len(), 20);
        assert_eq!(oa, b.forward(&maps).unwrap());
        assert!(a.forward(&maps[..19]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = GhcuModel::init(2, (12, 10), &micro_cfg()).unwrap();
        let exs = micro_examples(&model, &mut rng, 6);
        let before = model.params().to_vec();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            passes: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        ghcu_train(&mut model, &exs, &tcfg, &micro_cfg()).unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn output_change_is_bounded_by_lipschitz_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GhcuModel::init(2, (12, 10), &micro_cfg()).unwrap();
        let ex = &micro_examples(&model, &mut rng, 1)[0];
        let base = model.activations(&ex.input).output;
        let l = model.lipschitz_bound();
        for eps in [1e-3, 1e-5] {
            for cell in [0, 17, 59] {
                let mut x = ex.input.clone();
                x[cell] += eps;
                let out = model.activations(&x).output;
                let d: f64 = out.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d <= l * eps * (1.0 + 1e-9), "change {d} exceeds {}", l * eps);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = GhcuModel::init(3, (16, 16), &micro_cfg()).unwrap();
        let text = model.to_checkpoint().to_text();
        let back = GhcuModel::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn occlusion_masks_follow_probability() {
        let maps: Vec<Heatmap> = (0..4).map(|_| Heatmap::new(4, 4, vec![0.5; 16]).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (none, m0) = simulate_occlusion(&maps, 0.0, OcclusionFill::Zeros, &mut rng).unwrap();
        assert_eq!(none, maps);
        assert_eq!(m0.count(), 0);
        let (all, m1) = simulate_occlusion(&maps, 1.0, OcclusionFill::Zeros, &mut rng).unwrap();
        assert_eq!(m1.count(), 4);
        assert!(all.iter().all(|h| h.max_value() == 0.0));
        let (noisy, _) = simulate_occlusion(&maps, 1.0, OcclusionFill::Noise, &mut rng).unwrap();
        assert!(noisy.iter().all(|h| h.max_value() <= 0.5 && h.max_value() > 0.0));
    }
}
