//! Synthetic face-like landmark scenes with semantic-ambiguity annotation noise.
//!
//! A scene is a handful of smooth curves (jaw, eyebrows, plus context curves
//! for eyes, nose, and mouth) and six corner points. Landmarks on the jaw and
//! eyebrows are spaced evenly by arc length and carry no local definition
//! along their curve, so they are tagged weak. Eye and mouth corners are
//! tagged strong. Annotators perturb weak points mostly along the curve
//! tangent, strong points isotropically and slightly.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::heatmap::{read_grid, write_grid, Heatmap};
use crate::kv::{impl_key_values, KeyValues};
use crate::landmarks::{read_label_line, LandmarkSet, Point2, Role};
use crate::metrics::Normalizer;
use crate::textio::LineReader;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Semantic strength of a landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LandmarkTag {
    /// Lies on a contour with no precise definition along it.
    Weak,
    /// Corner-like point with clear local structure.
    Strong,
}

impl LandmarkTag {
    fn as_str(self) -> &'static str {
        match self {
            LandmarkTag::Weak => "weak",
            LandmarkTag::Strong => "strong",
        }
    }
}

/// Layout and per-instance variation ranges of the synthetic face.
///
/// Geometry is defined in face units (half the face width) around the face
/// center, then warped by a small yaw, scaled, and translated into pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceShapeSpec {
    pub width: usize,
    pub height: usize,
    pub jaw_points: usize,
    pub brow_points: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub translation_jitter: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Relative jitter of the jaw radii.
    pub jaw_jitter: f64,
    pub brow_arch_min: f64,
    pub brow_arch_max: f64,
    /// Vertical jitter of eyes and mouth in face units.
    pub feature_jitter: f64,
    /// Maximum yaw in radians; applied through a curved depth profile.
    pub yaw_max: f64,
    pub ridge_width: f64,
    pub corner_sigma: f64,
    pub corner_amplitude: f64,
}

impl Default for FaceShapeSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            jaw_points: 8,
            brow_points: 3,
            center_x: 32.0,
            center_y: 29.0,
            translation_jitter: 3.0,
            scale_min: 18.0,
            scale_max: 21.0,
            jaw_jitter: 0.06,
            brow_arch_min: 0.05,
            brow_arch_max: 0.15,
            feature_jitter: 0.05,
            yaw_max: 0.2,
            ridge_width: 0.8,
            corner_sigma: 1.2,
            corner_amplitude: 1.5,
        }
    }
}

impl_key_values!(FaceShapeSpec, "scene", {
    width, height, jaw_points, brow_points, center_x, center_y, translation_jitter,
    scale_min, scale_max, jaw_jitter, brow_arch_min, brow_arch_max, feature_jitter,
    yaw_max, ridge_width, corner_sigma, corner_amplitude,
});

impl FaceShapeSpec {
    pub fn landmark_count(&self) -> usize {
        self.jaw_points + 2 * self.brow_points + 6
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.jaw_points < 2 || self.brow_points < 2 {
            return Err(Error::invalid("each landmark curve needs at least 2 points"));
        }
        if !(self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return Err(Error::invalid("scene scale range must be positive and ordered"));
        }
        if self.brow_arch_max < self.brow_arch_min {
            return Err(Error::invalid("brow arch range must be ordered"));
        }
        let nonneg = [
            self.translation_jitter,
            self.jaw_jitter,
            self.feature_jitter,
            self.yaw_max,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("scene jitter values must be non-negative"));
        }
        if !(self.ridge_width > 0.0 && self.corner_sigma > 0.0 && self.corner_amplitude > 0.0) {
            return Err(Error::invalid(
                "ridge width and corner blob parameters must be positive",
            ));
        }
        Ok(())
    }

    /// Weak tags for jaw and brow points, strong for the six corners.
    pub fn tags(&self) -> Vec<LandmarkTag> {
        let weak = self.jaw_points + 2 * self.brow_points;
        (0..self.landmark_count())
            .map(|k| {
                if k < weak {
                    LandmarkTag::Weak
                } else {
                    LandmarkTag::Strong
                }
            })
            .collect()
    }

    /// Indices of the left and right outer eye corners.
    pub fn outer_eye_corners(&self) -> (usize, usize) {
        let first = self.jaw_points + 2 * self.brow_points;
        (first, first + 3)
    }

    /// Inter-ocular normalizer over the outer eye corners.
    pub fn normalizer(&self) -> Normalizer {
        let (left, right) = self.outer_eye_corners();
        Normalizer::InterOcular { left, right }
    }

    /// Inter-pupil normalizer with each pupil the midpoint of its eye corners.
    pub fn pupil_normalizer(&self) -> Normalizer {
        let first = self.jaw_points + 2 * self.brow_points;
        Normalizer::InterPupil {
            left: vec![first, first + 1],
            right: vec![first + 2, first + 3],
        }
    }
}

/// Annotation noise in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma_tangent: f64,
    pub sigma_normal: f64,
    pub sigma_corner: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_tangent: 3.0,
            sigma_normal: 0.5,
            sigma_corner: 0.5,
        }
    }
}

impl_key_values!(NoiseModel, "noise", { sigma_tangent, sigma_normal, sigma_corner });

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_tangent, self.sigma_normal, self.sigma_corner];
        if all.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("noise sigmas must be finite and non-negative"));
        }
        Ok(())
    }

    /// Expected inter-ocular NME of integer-rounded annotations.
    ///
    /// Rounding is treated as extra Gaussian variance of 1/12 per axis, and the
    /// normalizer as its nominal length at the mid scale.
    pub fn expected_nme(&self, spec: &FaceShapeSpec) -> f64 {
        let r = 1.0 / 12.0;
        let weak = expected_gaussian_norm(
            (self.sigma_tangent.powi(2) + r).sqrt(),
            (self.sigma_normal.powi(2) + r).sqrt(),
        );
        let strong = expected_gaussian_norm(
            (self.sigma_corner.powi(2) + r).sqrt(),
            (self.sigma_corner.powi(2) + r).sqrt(),
        );
        let tags = spec.tags();
        let n_weak = tags.iter().filter(|t| **t == LandmarkTag::Weak).count() as f64;
        let n = tags.len() as f64;
        let mean = (n_weak * weak + (n - n_weak) * strong) / n;
        let scale = 0.5 * (spec.scale_min + spec.scale_max);
        mean / (2.0 * OUTER_EYE_X * scale)
    }
}

/// `E‖(a·z₁, b·z₂)‖` for independent standard normals, by quadrature over the angle.
fn expected_gaussian_norm(a: f64, b: f64) -> f64 {
    let steps = 2048;
    let mut acc = 0.0;
    for i in 0..steps {
        let th = (i as f64 + 0.5) / steps as f64 * 2.0 * PI;
        acc += (a * a * th.cos().powi(2) + b * b * th.sin().powi(2)).sqrt();
    }
    (PI / 2.0).sqrt() * acc / steps as f64
}

const OUTER_EYE_X: f64 = 0.65;
const INNER_EYE_X: f64 = 0.22;
const EYE_Y: f64 = -0.25;
const MOUTH_X: f64 = 0.35;
const MOUTH_Y: f64 = 0.55;

/// Base curve in face units, parameterized on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseCurve {
    EllipseArc {
        center: Point2,
        rx: f64,
        ry: f64,
        start: f64,
        end: f64,
    },
    Quadratic {
        p0: Point2,
        p1: Point2,
        p2: Point2,
    },
}

impl BaseCurve {
    fn point(&self, t: f64) -> Point2 {
        match *self {
            BaseCurve::EllipseArc {
                center,
                rx,
                ry,
                start,
                end,
            } => {
                let th = start + (end - start) * t;
                Point2::new(center.x + rx * th.cos(), center.y + ry * th.sin())
            }
            BaseCurve::Quadratic { p0, p1, p2 } => {
                let s = 1.0 - t;
                Point2::new(
                    s * s * p0.x + 2.0 * s * t * p1.x + t * t * p2.x,
                    s * s * p0.y + 2.0 * s * t * p1.y + t * t * p2.y,
                )
            }
        }
    }
}

/// Face-unit to pixel mapping of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub scale: f64,
    pub center: Point2,
    pub yaw: f64,
}

impl Warp {
    pub fn apply(&self, p: Point2) -> Point2 {
        // Curved depth profile so yaw shifts central features more than the rim.
        let depth = 0.6 * (1.0 - p.x * p.x);
        let u = p.x * self.yaw.cos() + depth * self.yaw.sin();
        Point2::new(self.center.x + self.scale * u, self.center.y + self.scale * p.y)
    }
}

/// A base curve placed in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCurve {
    pub base: BaseCurve,
    pub warp: Warp,
}

impl SceneCurve {
    pub fn point(&self, t: f64) -> Point2 {
        self.warp.apply(self.base.point(t))
    }

    /// Unit tangent by central differences.
    pub fn tangent(&self, t: f64) -> Point2 {
        let h = 1e-6;
        let a = self.point((t - h).max(0.0));
        let b = self.point((t + h).min(1.0));
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let n = dx.hypot(dy);
        Point2::new(dx / n, dy / n)
    }

    /// Parameters of `count` points spaced evenly by arc length, endpoints included.
    pub fn equal_arc_params(&self, count: usize) -> Vec<f64> {
        const DENSE: usize = 4096;
        let mut cum = Vec::with_capacity(DENSE + 1);
        cum.push(0.0);
        let mut prev = self.point(0.0);
        for i in 1..=DENSE {
            let p = self.point(i as f64 / DENSE as f64);
            cum.push(cum[i - 1] + prev.dist(p));
            prev = p;
        }
        let total = cum[DENSE];
        let mut out = Vec::with_capacity(count);
        let mut seg = 0;
        for j in 0..count {
            let target = total * j as f64 / (count - 1).max(1) as f64;
            while seg < DENSE - 1 && cum[seg + 1] < target {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let frac = if span > 0.0 {
                ((target - cum[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.push((seg as f64 + frac) / DENSE as f64);
        }
        out
    }
}

/// Curves and corner points of one rendered scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGeometry {
    pub curves: Vec<SceneCurve>,
    pub corners: Vec<Point2>,
}

/// Per-instance shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub warp: Warp,
    pub jaw_rx: f64,
    pub jaw_ry: f64,
    pub brow_arch: f64,
    pub eye_dy: f64,
    pub mouth_dy: f64,
    pub smile: f64,
}

impl ShapeParams {
    pub fn sample(spec: &FaceShapeSpec, rng: &mut impl Rng) -> Self {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let tj = spec.translation_jitter;
        let scale = uniform(spec.scale_min, spec.scale_max);
        let cx = spec.center_x + uniform(-tj, tj);
        let cy = spec.center_y + uniform(-tj, tj);
        let yaw = uniform(-spec.yaw_max, spec.yaw_max);
        let jj = spec.jaw_jitter;
        let jaw_rx = uniform(1.0 - jj, 1.0 + jj);
        let jaw_ry = 1.1 * uniform(1.0 - jj, 1.0 + jj);
        let brow_arch = uniform(spec.brow_arch_min, spec.brow_arch_max);
        let fj = spec.feature_jitter;
        let eye_dy = uniform(-fj, fj);
        let mouth_dy = uniform(-fj, fj);
        let smile = uniform(-0.03, 0.08);
        Self {
            warp: Warp {
                scale,
                center: Point2::new(cx, cy),
                yaw,
            },
            jaw_rx,
            jaw_ry,
            brow_arch,
            eye_dy,
            mouth_dy,
            smile,
        }
    }

    /// Landmark-bearing curves in order: jaw, left brow, right brow.
    pub fn landmark_curves(&self) -> [SceneCurve; 3] {
        let w = self.warp;
        let jaw = BaseCurve::EllipseArc {
            center: Point2::new(0.0, 0.0),
            rx: self.jaw_rx,
            ry: self.jaw_ry,
            start: 1.08 * PI,
            end: -0.08 * PI,
        };
        let top = -0.5 - 2.0 * self.brow_arch;
        let left = BaseCurve::Quadratic {
            p0: Point2::new(-0.82, -0.48),
            p1: Point2::new(-0.5, top),
            p2: Point2::new(-0.18, -0.44),
        };
        let right = BaseCurve::Quadratic {
            p0: Point2::new(0.18, -0.44),
            p1: Point2::new(0.5, top),
            p2: Point2::new(0.82, -0.48),
        };
        [jaw, left, right].map(|base| SceneCurve { base, warp: w })
    }

    /// Eye corners (left outer, left inner, right inner, right outer) and mouth corners.
    pub fn corners(&self) -> [Point2; 6] {
        let ey = EYE_Y + self.eye_dy;
        let my = MOUTH_Y + self.mouth_dy;
        [
            Point2::new(-OUTER_EYE_X, ey),
            Point2::new(-INNER_EYE_X, ey),
            Point2::new(INNER_EYE_X, ey),
            Point2::new(OUTER_EYE_X, ey),
            Point2::new(-MOUTH_X, my),
            Point2::new(MOUTH_X, my),
        ]
        .map(|p| self.warp.apply(p))
    }

    /// Landmark-free curves that give the scene context.
    fn context_curves(&self) -> Vec<SceneCurve> {
        let ey = EYE_Y + self.eye_dy;
        let my = MOUTH_Y + self.mouth_dy;
        let half = 0.5 * (OUTER_EYE_X - INNER_EYE_X);
        let mid = 0.5 * (OUTER_EYE_X + INNER_EYE_X);
        let eye = |cx: f64| BaseCurve::EllipseArc {
            center: Point2::new(cx, ey),
            rx: half,
            ry: 0.09,
            start: 0.0,
            end: 2.0 * PI,
        };
        let mouth = BaseCurve::Quadratic {
            p0: Point2::new(-MOUTH_X, my),
            p1: Point2::new(0.0, my + 2.0 * self.smile),
            p2: Point2::new(MOUTH_X, my),
        };
        let nose = BaseCurve::Quadratic {
            p0: Point2::new(0.0, ey + 0.05),
            p1: Point2::new(0.04, 0.05),
            p2: Point2::new(-0.08, 0.3),
        };
        [eye(-mid), eye(mid), mouth, nose]
            .into_iter()
            .map(|base| SceneCurve { base, warp: self.warp })
            .collect()
    }

    pub fn geometry(&self) -> SceneGeometry {
        let mut curves = self.landmark_curves().to_vec();
        curves.extend(self.context_curves());
        SceneGeometry {
            curves,
            corners: self.corners().to_vec(),
        }
    }
}

/// A generated shape with per-landmark tags and unit tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedShape {
    pub truth: LandmarkSet,
    pub tags: Vec<LandmarkTag>,
    pub tangents: Vec<Point2>,
    pub params: ShapeParams,
}

/// Samples an instance and places landmarks at equal arc length along each curve.
pub fn generate_shape(spec: &FaceShapeSpec, rng: &mut impl Rng) -> Result<GeneratedShape> {
    spec.validate()?;
    let params = ShapeParams::sample(spec, rng);
    let mut points = Vec::with_capacity(spec.landmark_count());
    let mut tangents = Vec::with_capacity(spec.landmark_count());
    let counts = [spec.jaw_points, spec.brow_points, spec.brow_points];
    for (curve, count) in params.landmark_curves().iter().zip(counts) {
        for t in curve.equal_arc_params(count) {
            points.push(curve.point(t));
            tangents.push(curve.tangent(t));
        }
    }
    for c in params.corners() {
        points.push(c);
        tangents.push(Point2::new(1.0, 0.0));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    if let Some(p) = points
        .iter()
        .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0))
    {
        return Err(Error::invalid(format!(
            "scene places a landmark at ({:.2}, {:.2}) outside the {}x{} grid",
            p.x, p.y, spec.width, spec.height
        )));
    }
    Ok(GeneratedShape {
        truth: LandmarkSet::new(points, Role::Truth),
        tags: spec.tags(),
        tangents,
        params,
    })
}

/// Draws a noisy annotation: tangent/normal Gaussian offsets for weak points,
/// isotropic for strong ones, clamped into the grid.
pub fn perturb_annotation(
    truth: &LandmarkSet,
    tags: &[LandmarkTag],
    tangents: &[Point2],
    nm: &NoiseModel,
    dims: (usize, usize),
    rng: &mut impl Rng,
) -> Result<LandmarkSet> {
    if tags.len() != truth.len() || tangents.len() != truth.len() {
        return Err(Error::SizeMismatch {
            expected: truth.len(),
            actual: tags.len().min(tangents.len()),
        });
    }
    nm.validate()?;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let (xmax, ymax) = (dims.0 as f64 - 1.0, dims.1 as f64 - 1.0);
    let points = truth
        .points
        .iter()
        .zip(tags)
        .zip(tangents)
        .map(|((p, tag), t)| {
            let (dx, dy) = match tag {
                LandmarkTag::Weak => {
                    let g1 = nm.sigma_tangent * std.sample(rng);
                    let g2 = nm.sigma_normal * std.sample(rng);
                    // Normal is the tangent rotated by 90 degrees.
                    (g1 * t.x - g2 * t.y, g1 * t.y + g2 * t.x)
                }
                LandmarkTag::Strong => (nm.sigma_corner * std.sample(rng), nm.sigma_corner * std.sample(rng)),
            };
            Point2::new((p.x + dx).clamp(0.0, xmax), (p.y + dy).clamp(0.0, ymax))
        })
        .collect();
    Ok(LandmarkSet::new(points, Role::Annotation))
}

/// Renders ridges along every curve and brighter blobs at corners.
pub fn render_image(geom: &SceneGeometry, spec: &FaceShapeSpec) -> Result<Heatmap> {
    let (w, h) = (spec.width, spec.height);
    let mut grid = vec![0.0f64; w * h];
    let splat = |p: Point2, sigma: f64, amp: f64, grid: &mut [f64]| {
        let reach = (3.0 * sigma).ceil() as i64;
        let (px, py) = (p.x.round() as i64, p.y.round() as i64);
        let denom = 2.0 * sigma * sigma;
        for y in (py - reach).max(0)..=(py + reach).min(h as i64 - 1) {
            for x in (px - reach).max(0)..=(px + reach).min(w as i64 - 1) {
                let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                let v = amp * (-d2 / denom).exp();
                let cell = &mut grid[y as usize * w + x as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    };
    for curve in &geom.curves {
        // Dense samples at roughly quarter-pixel spacing.
        let approx_len: f64 = (0..32)
            .map(|i| curve.point(i as f64 / 32.0).dist(curve.point((i + 1) as f64 / 32.0)))
            .sum();
        let n = ((approx_len * 4.0).ceil() as usize).max(2);
        for i in 0..=n {
            splat(curve.point(i as f64 / n as f64), spec.ridge_width, 1.0, &mut grid);
        }
    }
    for &c in &geom.corners {
        splat(c, spec.corner_sigma, spec.corner_amplitude, &mut grid);
    }
    Heatmap::new(w, h, grid)
}

/// One synthetic image with its true and annotated landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub features: Heatmap,
    pub truth: LandmarkSet,
    pub annotation: LandmarkSet,
    pub tangents: Vec<Point2>,
}

/// Generation settings of a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthConfig {
    pub scene: FaceShapeSpec,
    pub noise: NoiseModel,
}

impl KeyValues for SynthConfig {
    fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.scene.entries();
        e.extend(self.noise.entries());
        e
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        Ok(self.scene.set_key(key, value)? || self.noise.set_key(key, value)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub tags: Vec<LandmarkTag>,
    pub samples: Vec<ImageSample>,
}

/// Generates `count` samples; sample `i` draws from its own ChaCha stream of `seed`.
pub fn make_dataset(count: usize, config: &SynthConfig, seed: u64) -> Result<Dataset> {
    make_dataset_range(0, count, config, seed)
}

/// Samples `first..first + count` of the `seed` family. Disjoint ranges give
/// independent splits, such as a test set following a training set.
pub fn make_dataset_range(first: u64, count: usize, config: &SynthConfig, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    config.scene.validate()?;
    config.noise.validate()?;
    let dims = (config.scene.width, config.scene.height);
    let mut samples = Vec::with_capacity(count);
    for i in first..first + count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let shape = generate_shape(&config.scene, &mut rng)?;
        let features = render_image(&shape.params.geometry(), &config.scene)?;
        let noisy = perturb_annotation(
            &shape.truth,
            &shape.tags,
            &shape.tangents,
            &config.noise,
            dims,
            &mut rng,
        )?;
        let annotation = LandmarkSet::from_pixels(&noisy.to_pixels(), Role::Annotation);
        samples.push(ImageSample {
            id: i,
            features,
            truth: shape.truth,
            annotation,
            tangents: shape.tangents,
        });
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        tags: config.scene.tags(),
        samples,
    })
}

impl Dataset {
    pub fn landmark_count(&self) -> usize {
        self.tags.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.config.scene.width, self.config.scene.height)
    }

    pub fn normalizer(&self) -> Normalizer {
        self.config.scene.normalizer()
    }

    pub fn annotations(&self) -> Vec<LandmarkSet> {
        self.samples.iter().map(|s| s.annotation.clone()).collect()
    }

    pub fn truths(&self) -> Vec<LandmarkSet> {
        self.samples.iter().map(|s| s.truth.clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let (w, h) = self.dims();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {DATASET_FORMAT_VERSION} {} {} {w} {h} {}",
            self.samples.len(),
            self.landmark_count(),
            self.seed
        );
        for (k, v) in self.config.entries() {
            let _ = writeln!(s, "param {k} {v}");
        }
        for (k, t) in self.tags.iter().enumerate() {
            let _ = writeln!(s, "tag {k} {}", t.as_str());
        }
        for sample in &self.samples {
            let _ = writeln!(s, "sample {}", sample.id);
            write_grid(&mut s, "heatmap", w, h, sample.features.values());
            sample.truth.write_lines(sample.id, &mut s);
            sample.annotation.write_lines(sample.id, &mut s);
            for (k, t) in sample.tangents.iter().enumerate() {
                let _ = writeln!(s, "tangent {} {k} {} {}", sample.id, t.x, t.y);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = LineReader::new(text);
        let head = r.next_tokens()?;
        if head.len() != 7 || head[0] != "dataset" {
            return Err(r.error("expected `dataset <version> <count> <N> <W> <H> <seed>`"));
        }
        let version: u32 = r.parse_token(head[1])?;
        if version != DATASET_FORMAT_VERSION {
            return Err(r.error(format!("unsupported dataset version {version}")));
        }
        let count: usize = r.parse_token(head[2])?;
        let n: usize = r.parse_token(head[3])?;
        let w: usize = r.parse_token(head[4])?;
        let h: usize = r.parse_token(head[5])?;
        let seed: u64 = r.parse_token(head[6])?;

        let mut config = SynthConfig::default();
        while r.peek_keyword() == Some("param") {
            let toks = r.next_tokens()?;
            if toks.len() != 3 {
                return Err(r.error("expected `param <key> <value>`"));
            }
            if !config.set_key(toks[1], toks[2]).map_err(|e| r.error(e.to_string()))? {
                return Err(r.error(format!("unknown dataset parameter `{}`", toks[1])));
            }
        }
        if (config.scene.width, config.scene.height) != (w, h) {
            return Err(r.error("dataset header dimensions disagree with parameters"));
        }
        let mut tags = Vec::with_capacity(n);
        for k in 0..n {
            let toks = r.next_tokens()?;
            if toks.len() != 3 || toks[0] != "tag" || r.parse_token::<usize>(toks[1])? != k {
                return Err(r.error(format!("expected `tag {k} weak|strong`")));
            }
            tags.push(match toks[2] {
                "weak" => LandmarkTag::Weak,
                "strong" => LandmarkTag::Strong,
                other => return Err(r.error(format!("unknown tag `{other}`"))),
            });
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let toks = r.next_tokens()?;
            if toks.len() != 2 || toks[0] != "sample" {
                return Err(r.error("expected `sample <id>`"));
            }
            let id: u64 = r.parse_token(toks[1])?;
            let (gw, gh, values) = read_grid(&mut r, "heatmap")?;
            if (gw, gh) != (w, h) {
                return Err(r.error("image grid dimensions disagree with header"));
            }
            let features = Heatmap::new(w, h, values).map_err(|e| r.error(e.to_string()))?;
            let truth = read_set(&mut r, id, n, Role::Truth)?;
            let annotation = read_set(&mut r, id, n, Role::Annotation)?;
            let mut tangents = Vec::with_capacity(n);
            for k in 0..n {
                let toks = r.next_tokens()?;
                if toks.len() != 5
                    || toks[0] != "tangent"
                    || r.parse_token::<u64>(toks[1])? != id
                    || r.parse_token::<usize>(toks[2])? != k
                {
                    return Err(r.error(format!("expected `tangent {id} {k} <x> <y>`")));
                }
                tangents.push(Point2::new(r.parse_token(toks[3])?, r.parse_token(toks[4])?));
            }
            samples.push(ImageSample {
                id,
                features,
                truth,
                annotation,
                tangents,
            });
        }
        r.expect_end()?;
        Ok(Dataset {
            config,
            seed,
            tags,
            samples,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn read_set(r: &mut LineReader<'_>, id: u64, n: usize, role: Role) -> Result<LandmarkSet> {
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let (sid, idx, p, got) = read_label_line(r)?;
        if sid != id || idx != k || got != role {
            return Err(r.error(format!("expected `label {id} {k} <x> <y> {role}`")));
        }
        points.push(p);
    }
    Ok(LandmarkSet::new(points, role))
}
