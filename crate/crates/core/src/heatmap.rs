//! Heatmap and template primitives.
//!
//! A [`Heatmap`] is a dense row-major grid of non-negative confidences for a
//! single landmark. The likelihood side of label refinement compares patches
//! cropped from a heatmap against a unit-sum [`GaussianTemplate`] with the
//! Pearson chi-square distance.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::textio::LineReader;

/// Integer pixel position on a grid (`x` is the column, `y` the row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PixelCoord {
    pub x: i64,
    pub y: i64,
}

impl PixelCoord {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    /// Squared Euclidean distance in pixels.
    pub fn dist2(self, other: PixelCoord) -> i64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Chebyshev (max-norm) distance in pixels.
    pub fn chebyshev(self, other: PixelCoord) -> i64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

/// A `width x height` grid of non-negative confidences, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    /// Builds a heatmap, rejecting negative or non-finite values.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "heatmap values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { width, height, values })
    }

    /// Builds a heatmap from raw model outputs, clamping negatives to zero.
    pub fn from_raw_clamped(width: usize, height: usize, mut values: Vec<f64>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        for v in &mut values {
            // NaN also maps to zero.
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height, width.saturating_mul(height))?;
        Ok(Self {
            width,
            height,
            values: vec![0.0; width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn contains(&self, c: PixelCoord) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub(crate) fn check_bounds(&self, c: PixelCoord) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: c.x,
                y: c.y,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Value at an in-bounds coordinate.
    pub fn get(&self, c: PixelCoord) -> Option<f64> {
        self.contains(c)
            .then(|| self.values[c.y as usize * self.width + c.x as usize])
    }

    /// Value at `(x, y)` with zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0.0
        } else {
            self.values[y as usize * self.width + x as usize]
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Writes the textual grid form: `heatmap <w> <h>` followed by one line per row.
    pub fn write_text(&self, out: &mut String) {
        write_grid(out, "heatmap", self.width, self.height, &self.values);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        let h = Self::read_text(&mut reader)?;
        reader.expect_end()?;
        Ok(h)
    }

    pub(crate) fn read_text(reader: &mut LineReader<'_>) -> Result<Self> {
        let (width, height, values) = read_grid(reader, "heatmap")?;
        Heatmap::new(width, height, values).map_err(|e| reader.error(e.to_string()))
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "heatmap dimensions must be positive, got {width}x{height}"
        )));
    }
    if len != width * height {
        return Err(Error::SizeMismatch {
            expected: width * height,
            actual: len,
        });
    }
    Ok(())
}

pub(crate) fn write_grid(out: &mut String, tag: &str, width: usize, height: usize, values: &[f64]) {
    let _ = writeln!(out, "{tag} {width} {height}");
    for row in values.chunks(width).take(height) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
}

pub(crate) fn read_grid(reader: &mut LineReader<'_>, tag: &str) -> Result<(usize, usize, Vec<f64>)> {
    let header = reader.next_tokens()?;
    if header.len() != 3 || header[0] != tag {
        return Err(reader.error(format!("expected `{tag} <width> <height>`")));
    }
    let width: usize = reader.parse_token(header[1])?;
    let height: usize = reader.parse_token(header[2])?;
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..height {
        let row = reader.next_tokens()?;
        if row.len() != width {
            return Err(reader.error(format!("expected {width} values, found {}", row.len())));
        }
        for tok in row {
            values.push(reader.parse_token::<f64>(tok)?);
        }
    }
    Ok((width, height, values))
}

/// The ideal local response: an odd-sized Gaussian grid with an additive
/// floor, normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTemplate {
    size: usize,
    sigma: f64,
    epsilon: f64,
    values: Vec<f64>,
    /// Reciprocals of `values`, so window scans multiply instead of divide.
    inverse: Vec<f64>,
}

impl GaussianTemplate {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Half-width `(size - 1) / 2`.
    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Builds a unit-sum Gaussian template.
///
/// Cell `(dx, dy)` relative to the center is proportional to
/// `exp(-(dx² + dy²) / (2σ²)) + epsilon`.
pub fn make_gaussian_template(size: usize, sigma: f64, epsilon: f64) -> Result<GaussianTemplate> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!(
            "template size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("template sigma must be positive, got {sigma}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "template epsilon must be positive, got {epsilon}"
        )));
    }
    let r = (size / 2) as i64;
    let denom = 2.0 * sigma * sigma;
    // Symmetric cells are computed from the same (dx², dy²) pair, so the
    // dihedral symmetries hold exactly.
    let mut values = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            values.push((-d2 / denom).exp() + epsilon);
        }
    }
    let total: f64 = values.iter().sum();
    for v in &mut values {
        *v /= total;
    }
    let inverse = values.iter().map(|v| 1.0 / v).collect();
    Ok(GaussianTemplate {
        size,
        sigma,
        epsilon,
        values,
        inverse,
    })
}

/// An odd-sized square window cut from a heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    values: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("patch size must be odd, got {size}")));
        }
        if values.len() != size * size {
            return Err(Error::SizeMismatch {
                expected: size * size,
                actual: values.len(),
            });
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Multiplies every cell by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for v in &mut self.values {
            *v *= factor;
        }
        self
    }
}

impl From<&GaussianTemplate> for Patch {
    fn from(t: &GaussianTemplate) -> Self {
        Patch {
            size: t.size,
            values: t.values.clone(),
        }
    }
}

/// Peak-1 isotropic Gaussian training target centered on `center`.
pub fn render_target_heatmap(width: usize, height: usize, center: PixelCoord, sigma: f64) -> Result<Heatmap> {
    let mut h = Heatmap::zeros(width, height)?;
    h.check_bounds(center)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("target sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    for y in 0..height {
        let dy = y as f64 - center.y as f64;
        for x in 0..width {
            let dx = x as f64 - center.x as f64;
            h.values[y * width + x] = (-(dx * dx + dy * dy) / denom).exp();
        }
    }
    Ok(h)
}

/// Crops a `size x size` patch centered on `center`; cells outside the heatmap are zero.
pub fn crop_patch(h: &Heatmap, center: PixelCoord, size: usize) -> Result<Patch> {
    h.check_bounds(center)?;
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!("patch size must be odd, got {size}")));
    }
    let r = (size / 2) as i64;
    let mut values = vec![0.0; size * size];
    // Clip the window once instead of testing every cell.
    let x0 = (center.x - r).max(0);
    let x1 = (center.x + r).min(h.width as i64 - 1);
    let y0 = (center.y - r).max(0);
    let y1 = (center.y + r).min(h.height as i64 - 1);
    for y in y0..=y1 {
        let py = (y - center.y + r) as usize;
        let src = &h.values[y as usize * h.width..(y as usize + 1) * h.width];
        let dst = &mut values[py * size..(py + 1) * size];
        let px0 = (x0 - center.x + r) as usize;
        let n = (x1 - x0 + 1) as usize;
        dst[px0..px0 + n].copy_from_slice(&src[x0 as usize..x0 as usize + n]);
    }
    Ok(Patch { size, values })
}

/// Pearson chi-square distance `Σ (Eᵢ − Φᵢ)² / Eᵢ` between template and patch.
pub fn chi_square_distance(e: &GaussianTemplate, p: &Patch) -> Result<f64> {
    if e.size != p.size {
        return Err(Error::SizeMismatch {
            expected: e.size,
            actual: p.size,
        });
    }
    Ok(e.values
        .iter()
        .zip(&p.values)
        .map(|(&ev, &pv)| {
            let d = ev - pv;
            d * d / ev
        })
        .sum())
}

/// Chi-square distance of the window of `h` centered at `center`, with every
/// heatmap value multiplied by `scale`. Equivalent to cropping, scaling, and
/// calling [`chi_square_distance`], without allocating.
pub(crate) fn windowed_chi_square(e: &GaussianTemplate, h: &Heatmap, center: PixelCoord, scale: f64) -> f64 {
    let size = e.size;
    let r = (size / 2) as i64;
    let mut acc = 0.0;
    for py in 0..size {
        let y = center.y - r + py as i64;
        let row = &e.values[py * size..(py + 1) * size];
        if y < 0 || y as usize >= h.height {
            // Entire row outside: (E - 0)² / E = E.
            acc += row.iter().sum::<f64>();
            continue;
        }
        let inv = &e.inverse[py * size..(py + 1) * size];
        let src = &h.values[y as usize * h.width..(y as usize + 1) * h.width];
        let x0 = center.x - r;
        // Columns [lo, hi) of the window fall inside the heatmap.
        let lo = (-x0).clamp(0, size as i64) as usize;
        let hi = (h.width as i64 - x0).clamp(lo as i64, size as i64) as usize;
        acc += row[..lo].iter().sum::<f64>() + row[hi..].iter().sum::<f64>();
        let inside = &src[(x0 + lo as i64) as usize..(x0 + hi as i64) as usize];
        for ((&ev, &iv), &v) in row[lo..hi].iter().zip(&inv[lo..hi]).zip(inside) {
            let d = ev - v * scale;
            acc += d * d * iv;
        }
    }
    acc
}

/// Position of the maximum value; ties go to the smallest row-major index.
pub fn decode_argmax(h: &Heatmap) -> Result<PixelCoord> {
    if h.values.is_empty() {
        return Err(Error::Empty("heatmap"));
    }
    let mut best = 0;
    for (i, &v) in h.values.iter().enumerate().skip(1) {
        if v > h.values[best] {
            best = i;
        }
    }
    Ok(PixelCoord::new((best % h.width) as i64, (best / h.width) as i64))
}

/// Number of pixels whose value is at least `fraction` of the maximum.
///
/// Large counts flag a flat-topped response whose argmax is unstable.
pub fn plateau_area(h: &Heatmap, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "plateau fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let max = h.max_value();
    if !(max > 0.0) {
        return Err(Error::invalid("plateau area of an all-zero heatmap"));
    }
    let threshold = fraction * max;
    Ok(h.values.iter().filter(|&&v| v >= threshold).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heatmap(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Heatmap {
        let values = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        Heatmap::new(w, h, values).unwrap()
    }

    #[test]
    fn template_size_one_is_unit() {
        let t = make_gaussian_template(1, 0.7, 1e-6).unwrap();
        assert_eq!(t.values(), &[1.0]);
    }

    #[test]
    fn template_wide_sigma_is_uniform() {
        let t = make_gaussian_template(3, 1e9, 1e-6).unwrap();
        for v in t.values() {
            assert_abs_diff_eq!(*v, 1.0 / 9.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn template_matches_direct_formula() {
        let (size, sigma, eps) = (19usize, 3.0, 1e-6);
        let t = make_gaussian_template(size, sigma, eps).unwrap();
        // Independent scalar evaluation of the formula.
        let mut raw = vec![];
        for i in 0..size {
            for j in 0..size {
                let dy = i as f64 - 9.0;
                let dx = j as f64 - 9.0;
                raw.push(f64::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) + eps);
            }
        }
        let mut z = 0.0;
        for v in &raw {
            z += v;
        }
        for (a, b) in t.values().iter().zip(&raw) {
            assert_abs_diff_eq!(*a, b / z, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(t.values().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn template_rejects_bad_args() {
        assert!(make_gaussian_template(4, 1.0, 1e-6).is_err());
        assert!(make_gaussian_template(0, 1.0, 1e-6).is_err());
        assert!(make_gaussian_template(3, 0.0, 1e-6).is_err());
        assert!(make_gaussian_template(3, -1.0, 1e-6).is_err());
        assert!(make_gaussian_template(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn template_dihedral_symmetry() {
        let t = make_gaussian_template(11, 1.7, 1e-6).unwrap();
        let s = t.size();
        let v = |x: usize, y: usize| t.values()[y * s + x];
        for y in 0..s {
            for x in 0..s {
                let a = v(x, y);
                assert_eq!(a, v(s - 1 - x, y));
                assert_eq!(a, v(x, s - 1 - y));
                assert_eq!(a, v(y, x));
                assert_eq!(a, v(s - 1 - y, s - 1 - x));
            }
        }
        assert!(t.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn target_peak_and_falloff() {
        // σ = √2 puts distance σ√2 = 2 on the grid.
        let sigma = 2.0f64.sqrt();
        let h = render_target_heatmap(32, 32, PixelCoord::new(10, 12), sigma).unwrap();
        assert_eq!(h.get(PixelCoord::new(10, 12)), Some(1.0));
        let v = h.get(PixelCoord::new(12, 12)).unwrap();
        assert_abs_diff_eq!(v, (-1.0f64).exp(), epsilon = 1e-14);
        assert!(render_target_heatmap(32, 32, PixelCoord::new(32, 0), sigma).is_err());
        assert!(render_target_heatmap(32, 32, PixelCoord::new(-1, 0), sigma).is_err());
    }

    #[test]
    fn target_argmax_is_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(1..50), rng.gen_range(1..50));
            let c = PixelCoord::new(rng.gen_range(0..w as i64), rng.gen_range(0..h as i64));
            let sigma = rng.gen_range(0.3..8.0);
            let map = render_target_heatmap(w, h, c, sigma).unwrap();
            // Full scan for the maximum.
            let mut best = (f64::MIN, PixelCoord::default());
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let v = map.get(PixelCoord::new(x, y)).unwrap();
                    if v > best.0 {
                        best = (v, PixelCoord::new(x, y));
                    }
                }
            }
            assert_eq!(best.1, c);
            assert_eq!(decode_argmax(&map).unwrap(), c);
        }
    }

    #[test]
    fn crop_interior_and_corner() {
        let values: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let h = Heatmap::new(5, 5, values).unwrap();
        let p = crop_patch(&h, PixelCoord::new(2, 2), 3).unwrap();
        assert_eq!(p.values(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
        let p = crop_patch(&h, PixelCoord::new(0, 0), 3).unwrap();
        assert_eq!(p.values(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 5.0, 6.0]);
        assert!(crop_patch(&h, PixelCoord::new(5, 0), 3).is_err());
        assert!(crop_patch(&h, PixelCoord::new(1, 1), 2).is_err());
    }

    #[test]
    fn crop_matches_reference_copier() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let (w, hh) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let h = random_heatmap(&mut rng, w, hh);
            let c = PixelCoord::new(rng.gen_range(0..w as i64), rng.gen_range(0..hh as i64));
            let size = 2 * rng.gen_range(0..15) + 1;
            let p = crop_patch(&h, c, size).unwrap();
            let r = (size / 2) as i64;
            for i in 0..size {
                for j in 0..size {
                    let x = c.x - r + j as i64;
                    let y = c.y - r + i as i64;
                    let expected = if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < hh {
                        h.values()[y as usize * w + x as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(p.values()[i * size + j], expected);
                }
            }
        }
    }

    #[test]
    fn chi_square_trivial_cases() {
        let e = make_gaussian_template(7, 1.5, 1e-6).unwrap();
        let same = Patch::from(&e);
        assert_eq!(chi_square_distance(&e, &same).unwrap(), 0.0);
        let double = Patch::from(&e).scaled(2.0);
        assert_abs_diff_eq!(chi_square_distance(&e, &double).unwrap(), 1.0, epsilon = 1e-12);
        let wrong = Patch::new(5, vec![0.0; 25]).unwrap();
        assert!(matches!(
            chi_square_distance(&e, &wrong),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn chi_square_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let e = make_gaussian_template(5, rng.gen_range(0.5..3.0), 1e-6).unwrap();
            let vals: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() * 0.2).collect();
            let p = Patch::new(5, vals.clone()).unwrap();
            let mut naive = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let ev = e.values()[i * 5 + j];
                    let pv = vals[i * 5 + j];
                    naive += (ev - pv) * (ev - pv) / ev;
                }
            }
            assert_abs_diff_eq!(chi_square_distance(&e, &p).unwrap(), naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn windowed_chi_square_matches_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (w, hh) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let h = random_heatmap(&mut rng, w, hh);
            let size = 2 * rng.gen_range(0..10) + 1;
            let e = make_gaussian_template(size, rng.gen_range(0.5..4.0), 1e-6).unwrap();
            let c = PixelCoord::new(rng.gen_range(0..w as i64), rng.gen_range(0..hh as i64));
            let scale = rng.gen_range(0.01..2.0);
            let patch = crop_patch(&h, c, size).unwrap().scaled(scale);
            let a = chi_square_distance(&e, &patch).unwrap();
            let b = windowed_chi_square(&e, &h, c, scale);
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn argmax_ties_and_scan() {
        let flat = Heatmap::new(4, 3, vec![0.5; 12]).unwrap();
        assert_eq!(decode_argmax(&flat).unwrap(), PixelCoord::new(0, 0));
        let peak = render_target_heatmap(64, 64, PixelCoord::new(40, 25), 2.0).unwrap();
        assert_eq!(decode_argmax(&peak).unwrap(), PixelCoord::new(40, 25));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (w, hh) = (rng.gen_range(1..30), rng.gen_range(1..30));
            // Coarse values so ties actually occur.
            let values = (0..w * hh).map(|_| rng.gen_range(0..6) as f64).collect();
            let h = Heatmap::new(w, hh, values).unwrap();
            let mut best = PixelCoord::new(0, 0);
            let mut best_v = f64::NEG_INFINITY;
            for y in 0..hh {
                for x in 0..w {
                    let v = h.values()[y * w + x];
                    if v > best_v {
                        best_v = v;
                        best = PixelCoord::new(x as i64, y as i64);
                    }
                }
            }
            assert_eq!(decode_argmax(&h).unwrap(), best);
        }
    }

    #[test]
    fn plateau_cases() {
        let peak = render_target_heatmap(16, 16, PixelCoord::new(8, 8), 1.5).unwrap();
        assert_eq!(plateau_area(&peak, 1.0).unwrap(), 1);
        let flat = Heatmap::new(5, 4, vec![0.3; 20]).unwrap();
        assert_eq!(plateau_area(&flat, 0.37).unwrap(), 20);
        assert!(plateau_area(&Heatmap::zeros(3, 3).unwrap(), 0.5).is_err());
        assert!(plateau_area(&peak, 0.0).is_err());
        assert!(plateau_area(&peak, 1.5).is_err());
    }

    #[test]
    fn heatmap_rejects_negative_and_clamps_raw() {
        assert!(Heatmap::new(2, 1, vec![0.0, -0.1]).is_err());
        assert!(Heatmap::new(0, 1, vec![]).is_err());
        let h = Heatmap::from_raw_clamped(2, 2, vec![-1.0, 0.5, f64::NAN, 2.0]).unwrap();
        assert_eq!(h.values(), &[0.0, 0.5, 0.0, 2.0]);
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_heatmap(&mut rng, 7, 3);
        let text = h.to_text();
        assert!(text.starts_with("heatmap 7 3\n"));
        assert_eq!(text.lines().count(), 4);
        let back = Heatmap::from_text(&text).unwrap();
        assert_eq!(back, h);
        assert!(Heatmap::from_text("heatmap 2 1\n1 2 3\n").is_err());
    }
}
