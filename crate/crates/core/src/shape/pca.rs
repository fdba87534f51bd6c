use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, Heatmap};
use crate::kv::impl_key_values;
use crate::landmarks::{LandmarkSet, Point2, Role};

pub const PCA_KIND: &str = "shape-pca";

/// Point distribution model over centroid- and scale-normalized shapes.
///
/// `mean` is stored in absolute coordinates (mean normalized shape at the
/// mean training scale and centroid). `basis` columns live in normalized
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub mean: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Orthonormal basis of the mean direction and `basis`, used for correction.
    span: DMatrix<f64>,
}

/// Centroid `(cx, cy)` and RMS radius of a flat `[x0, y0, x1, y1, ...]` shape.
pub(crate) fn centroid_and_scale(flat: &[f64]) -> (f64, f64, f64) {
    let n = (flat.len() / 2) as f64;
    let cx = flat.iter().step_by(2).sum::<f64>() / n;
    let cy = flat.iter().skip(1).step_by(2).sum::<f64>() / n;
    let ss: f64 = flat.chunks(2).map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum();
    (cx, cy, (ss / n).sqrt())
}

fn normalized(flat: &[f64]) -> Result<DVector<f64>> {
    let (cx, cy, s) = centroid_and_scale(flat);
    if !(s > 0.0) {
        return Err(Error::invalid("degenerate shape with all points coincident"));
    }
    Ok(DVector::from_iterator(
        flat.len(),
        flat.chunks(2).flat_map(|p| [(p[0] - cx) / s, (p[1] - cy) / s]),
    ))
}

/// Orthonormal basis of `[dir, basis]`; `basis` is already orthonormal.
fn correction_span(dir: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let mut v = dir.clone();
    for c in basis.column_iter() {
        let d = c.dot(&v);
        v -= c * d;
    }
    let norm = v.norm();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(basis.ncols() + 1);
    if norm > 1e-12 * dir.norm().max(1e-300) {
        cols.push(v / norm);
    }
    cols.extend(basis.column_iter().map(|c| c.into_owned()));
    if cols.is_empty() {
        return DMatrix::zeros(dir.len(), 0);
    }
    DMatrix::from_columns(&cols)
}

impl ShapeModel {
    fn from_parts(mean: Vec<f64>, basis: DMatrix<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let dir = normalized(&mean)?;
        let span = correction_span(&dir, &basis);
        Ok(Self {
            mean,
            basis,
            eigenvalues,
            span,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub(crate) fn span(&self) -> &DMatrix<f64> {
        &self.span
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(PCA_KIND, self.landmark_count(), vec![self.components()])
            .with_block("mean", self.mean.clone())
            .with_block("basis", self.basis.as_slice().to_vec())
            .with_block("eigenvalues", self.eigenvalues.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(PCA_KIND)?;
        let [k] = ck.dims[..] else {
            return Err(Error::invalid("shape checkpoint needs one dim"));
        };
        let d = 2 * ck.landmarks;
        let basis = DMatrix::from_column_slice(d, k, ck.block("basis", d * k)?);
        Self::from_parts(
            ck.block("mean", d)?.to_vec(),
            basis,
            ck.block("eigenvalues", k)?.to_vec(),
        )
    }
}

/// Principal components of the normalized shapes; keeps the fewest
/// components whose eigenvalues reach `variance_fraction` of the total.
pub fn fit_shape_pca(shapes: &[LandmarkSet], variance_fraction: f64) -> Result<ShapeModel> {
    if shapes.len() < 2 {
        return Err(Error::invalid("shape PCA needs at least two shapes"));
    }
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::invalid("variance fraction must lie in (0, 1]"));
    }
    let n = shapes[0].len();
    if n < 2 {
        return Err(Error::invalid("shapes need at least two landmarks"));
    }
    if let Some(bad) = shapes.iter().find(|s| s.len() != n) {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: bad.len(),
        });
    }
    let d = 2 * n;
    let m = shapes.len() as f64;
    let mut mean_n = DVector::zeros(d);
    let (mut cx, mut cy, mut scale) = (0.0, 0.0, 0.0);
    let mut normed = Vec::with_capacity(shapes.len());
    for s in shapes {
        let flat = s.to_flat();
        let (x, y, sc) = centroid_and_scale(&flat);
        cx += x / m;
        cy += y / m;
        scale += sc / m;
        let v = normalized(&flat)?;
        mean_n += &v / m;
        normed.push(v);
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in &normed {
        let c = v - &mean_n;
        cov.ger(1.0 / m, &c, &c, 1.0);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        let ev = eig.eigenvalues[i];
        if acc >= variance_fraction * total || !(ev > 1e-12 * total) {
            break;
        }
        acc += ev;
        kept.push(i);
    }
    let basis = if kept.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(
            &kept
                .iter()
                .map(|&i| eig.eigenvectors.column(i).into_owned())
                .collect::<Vec<_>>(),
        )
    };
    let eigenvalues = kept.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mean = mean_n
        .iter()
        .enumerate()
        .map(|(i, v)| v * scale + if i % 2 == 0 { cx } else { cy })
        .collect();
    ShapeModel::from_parts(mean, basis, eigenvalues)
}

/// Projects `shape` onto the model: centroid kept, centered shape replaced by
/// its orthogonal projection onto span(mean direction, basis).
pub fn pca_correct(shape: &LandmarkSet, model: &ShapeModel) -> Result<LandmarkSet> {
    if shape.len() != model.landmark_count() {
        return Err(Error::SizeMismatch {
            expected: model.landmark_count(),
            actual: shape.len(),
        });
    }
    let flat = shape.to_flat();
    let (cx, cy, _) = centroid_and_scale(&flat);
    let centered = DVector::from_iterator(flat.len(), flat.chunks(2).flat_map(|p| [p[0] - cx, p[1] - cy]));
    let q = model.span();
    let proj = q * (q.transpose() * centered);
    let out: Vec<f64> = proj
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 2 == 0 { cx } else { cy })
        .collect();
    Ok(LandmarkSet::from_flat(&out, Role::Prediction))
}

/// Settings of the PCA fit and of the iterative heatmap-driven corrector.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaConfig {
    pub variance_fraction: f64,
    /// Half-width of the response window searched around each model point.
    pub window_half_width: usize,
    /// Gaussian bandwidth of the mean-shift step, pixels.
    pub bandwidth: f64,
    pub iterations: usize,
    /// Maximum number of landmarks removed as outliers.
    pub max_outliers: usize,
    /// Residual (pixels) below which no landmark is treated as an outlier.
    pub outlier_threshold: f64,
    pub tolerance: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            variance_fraction: 0.98,
            window_half_width: 8,
            bandwidth: 1.5,
            iterations: 20,
            max_outliers: 6,
            outlier_threshold: 2.0,
            tolerance: 1e-3,
        }
    }
}

impl_key_values!(PcaConfig, "pca", {
    variance_fraction,
    window_half_width,
    bandwidth,
    iterations,
    max_outliers,
    outlier_threshold,
    tolerance,
});

/// Weighted least-squares fit of `points` by translation plus the model span.
fn weighted_fit(points: &[Point2], weights: &[f64], span: &DMatrix<f64>) -> Option<Vec<Point2>> {
    let d = 2 * points.len();
    let q = span.ncols();
    let cols = q + 2;
    let mut ata = DMatrix::<f64>::zeros(cols, cols);
    let mut atb = DVector::<f64>::zeros(cols);
    let mut row = vec![0.0; cols];
    for i in 0..d {
        let w = weights[i / 2];
        if w <= 0.0 {
            continue;
        }
        row.fill(0.0);
        row[i % 2] = 1.0;
        for j in 0..q {
            row[2 + j] = span[(i, j)];
        }
        let p = points[i / 2];
        let b = if i % 2 == 0 { p.x } else { p.y };
        for a in 0..cols {
            if row[a] == 0.0 {
                continue;
            }
            atb[a] += w * row[a] * b;
            for c in 0..cols {
                ata[(a, c)] += w * row[a] * row[c];
            }
        }
    }
    let ridge = 1e-9 * (0..cols).map(|i| ata[(i, i)]).fold(0.0, f64::max).max(1e-300);
    for i in 2..cols {
        ata[(i, i)] += ridge;
    }
    let z = ata.cholesky()?.solve(&atb);
    let fitted = span * z.rows(2, q);
    Some(
        (0..points.len())
            .map(|k| Point2::new(z[0] + fitted[2 * k], z[1] + fitted[2 * k + 1]))
            .collect(),
    )
}

/// Kernel-weighted mean of the heatmap around `center`, and the window peak.
fn mean_shift(h: &Heatmap, center: Point2, half: usize, bandwidth: f64) -> (Option<Point2>, f64) {
    let c = center.to_pixel();
    let r = half as i64;
    let inv = 0.5 / (bandwidth * bandwidth);
    let (mut sx, mut sy, mut sw, mut peak) = (0.0, 0.0, 0.0, 0.0f64);
    for y in (c.y - r).max(0)..=(c.y + r).min(h.height() as i64 - 1) {
        for x in (c.x - r).max(0)..=(c.x + r).min(h.width() as i64 - 1) {
            let v = h.get_or_zero(x, y);
            if v <= 0.0 {
                continue;
            }
            peak = peak.max(v);
            let d2 = (x as f64 - center.x).powi(2) + (y as f64 - center.y).powi(2);
            let w = v * (-d2 * inv).exp();
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    if sw > 0.0 {
        (Some(Point2::new(sx / sw, sy / sw)), peak)
    } else {
        (None, 0.0)
    }
}

/// Shape-constrained decoding from heatmaps.
///
/// Starting from the argmax shape weighted by peak confidence, alternates a
/// weighted model fit with a mean-shift update of every landmark inside a
/// window around its model position. After convergence the landmark with the
/// largest confidence-weighted residual is dropped from the fit and the loop
/// restarts, until residuals fall under the threshold or the outlier budget
/// is spent. Returns the final model shape.
pub fn robust_pca_correct(heatmaps: &[Heatmap], model: &ShapeModel, cfg: &PcaConfig) -> Result<LandmarkSet> {
    let n = model.landmark_count();
    if heatmaps.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            actual: heatmaps.len(),
        });
    }
    let start: Vec<Point2> = heatmaps
        .iter()
        .map(|h| decode_argmax(h).map(Point2::from))
        .collect::<Result<_>>()?;
    let start_conf: Vec<f64> = heatmaps.iter().map(Heatmap::max_value).collect();
    let span = model.span();
    let mut active = vec![true; n];
    let mut shape = start.clone();
    for round in 0..=cfg.max_outliers {
        let weights = |conf: &[f64]| -> Vec<f64> {
            conf.iter()
                .zip(&active)
                .map(|(c, &a)| if a { *c } else { 0.0 })
                .collect()
        };
        let Some(mut fit) = weighted_fit(&start, &weights(&start_conf), span) else {
            break;
        };
        let mut points = start.clone();
        let mut conf = start_conf.clone();
        for _ in 0..cfg.iterations {
            for k in 0..n {
                let (p, c) = mean_shift(&heatmaps[k], fit[k], cfg.window_half_width, cfg.bandwidth);
                points[k] = p.unwrap_or(fit[k]);
                conf[k] = c;
            }
            let Some(next) = weighted_fit(&points, &weights(&conf), span) else {
                break;
            };
            let moved = next.iter().zip(&fit).map(|(a, b)| a.dist(*b)).fold(0.0, f64::max);
            fit = next;
            if moved < cfg.tolerance {
                break;
            }
        }
        shape = fit;
        if round == cfg.max_outliers {
            break;
        }
        let worst = (0..n)
            .filter(|&k| active[k] && conf[k] > 0.0)
            .map(|k| (k, points[k].dist(shape[k])))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((k, r)) if r > cfg.outlier_threshold => active[k] = false,
            _ => break,
        }
    }
    Ok(LandmarkSet::new(shape, Role::Prediction))
}
