//! Normalized landmark errors and their aggregation.

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Point2};

/// How the bounding box of the ground truth is reduced to one face size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceSizeMode {
    /// `sqrt(width * height)`.
    GeometricMean,
    /// `max(width, height)`.
    MaxSide,
}

/// Reference length an error is divided by, always measured on the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalizer {
    /// Distance between two pupil centers, each the centroid of the given indices.
    InterPupil { left: Vec<usize>, right: Vec<usize> },
    /// Size of the ground-truth bounding box.
    FaceSize(FaceSizeMode),
    /// Distance between the two outer eye corners.
    InterOcular { left: usize, right: usize },
}

impl Normalizer {
    /// Reference length for a given ground truth.
    pub fn value(&self, gt: &LandmarkSet) -> Result<f64> {
        let n = gt.len();
        let check = |i: usize| {
            if i < n {
                Ok(gt.points[i])
            } else {
                Err(Error::invalid(format!(
                    "normalizer index {i} out of range for {n} landmarks"
                )))
            }
        };
        let centroid = |idx: &[usize]| -> Result<Point2> {
            if idx.is_empty() {
                return Err(Error::invalid("pupil index list is empty"));
            }
            let mut c = Point2::default();
            for &i in idx {
                let p = check(i)?;
                c.x += p.x;
                c.y += p.y;
            }
            Ok(Point2::new(c.x / idx.len() as f64, c.y / idx.len() as f64))
        };
        let d = match self {
            Normalizer::InterPupil { left, right } => centroid(left)?.dist(centroid(right)?),
            Normalizer::InterOcular { left, right } => check(*left)?.dist(check(*right)?),
            Normalizer::FaceSize(mode) => {
                if gt.is_empty() {
                    return Err(Error::Empty("ground truth"));
                }
                let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
                let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for p in &gt.points {
                    x0 = x0.min(p.x);
                    y0 = y0.min(p.y);
                    x1 = x1.max(p.x);
                    y1 = y1.max(p.y);
                }
                let (w, h) = (x1 - x0, y1 - y0);
                match mode {
                    FaceSizeMode::GeometricMean => (w * h).sqrt(),
                    FaceSizeMode::MaxSide => w.max(h),
                }
            }
        };
        if !(d > 0.0) {
            return Err(Error::invalid(format!("normalizer length must be positive, got {d}")));
        }
        Ok(d)
    }
}

/// Mean Euclidean landmark error divided by the normalizer length of `gt`.
pub fn normalized_error(pred: &LandmarkSet, gt: &LandmarkSet, norm: &Normalizer) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::Empty("landmark set"));
    }
    let d = norm.value(gt)?;
    let total: f64 = pred.points.iter().zip(&gt.points).map(|(p, g)| p.dist(*g)).sum();
    Ok(total / gt.len() as f64 / d)
}

/// Normalized error restricted to a subset of landmark indices.
pub fn normalized_error_subset(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    norm: &Normalizer,
    indices: &[usize],
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if indices.is_empty() {
        return Err(Error::Empty("landmark subset"));
    }
    let d = norm.value(gt)?;
    let mut total = 0.0;
    for &i in indices {
        if i >= gt.len() {
            return Err(Error::invalid(format!("landmark index {i} out of range")));
        }
        total += pred.points[i].dist(gt.points[i]);
    }
    Ok(total / indices.len() as f64 / d)
}

/// Mean normalized error over paired sets.
pub fn mean_normalized_error<'a>(
    pairs: impl IntoIterator<Item = (&'a LandmarkSet, &'a LandmarkSet)>,
    norm: &Normalizer,
) -> Result<f64> {
    let errors = pairs
        .into_iter()
        .map(|(p, g)| normalized_error(p, g, norm))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&errors)?.mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    pub median: f64,
    /// Mean of the largest 10% of values (at least one value).
    pub worst_decile_mean: f64,
}

pub fn aggregate(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let tail = n.div_ceil(10);
    let worst_decile_mean = sorted[n - tail..].iter().sum::<f64>() / tail as f64;
    Ok(ErrorSummary {
        mean,
        median,
        worst_decile_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Role;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(points: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Point2::new(x, y)).collect(), Role::Truth)
    }

    #[test]
    fn identical_sets_have_zero_error() {
        let gt = set(&[(0.0, 0.0), (50.0, 0.0), (20.0, 30.0)]);
        let norm = Normalizer::InterOcular { left: 0, right: 1 };
        assert_eq!(normalized_error(&gt, &gt, &norm).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five_over_fifty() {
        let gt = set(&[(0.0, 0.0), (50.0, 0.0)]);
        let pred = set(&[(3.0, 4.0), (50.0, 0.0)]);
        let norm = Normalizer::InterPupil {
            left: vec![0],
            right: vec![1],
        };
        // One landmark off by 5 on a two-landmark set.
        assert_abs_diff_eq!(normalized_error(&pred, &gt, &norm).unwrap(), 2.5 / 50.0);
        let gt1 = set(&[(10.0, 10.0)]);
        let pred1 = set(&[(13.0, 14.0)]);
        let norm1 = Normalizer::FaceSize(FaceSizeMode::GeometricMean);
        assert!(normalized_error(&pred1, &gt1, &norm1).is_err());
        // Single landmark offset (3,4) against a 50 px reference length.
        let gt2 = set(&[(0.0, 0.0), (50.0, 0.0), (25.0, 10.0)]);
        let pred2 = set(&[(0.0, 0.0), (50.0, 0.0), (28.0, 14.0)]);
        let err = normalized_error_subset(&pred2, &gt2, &Normalizer::InterOcular { left: 0, right: 1 }, &[2]).unwrap();
        assert_eq!(err, 0.1);
    }

    #[test]
    fn errors_on_bad_input() {
        let gt = set(&[(0.0, 0.0), (0.0, 0.0)]);
        let norm = Normalizer::InterOcular { left: 0, right: 1 };
        assert!(normalized_error(&gt, &gt, &norm).is_err());
        let gt = set(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(normalized_error(&set(&[(0.0, 0.0)]), &gt, &norm).is_err());
        let bad = Normalizer::InterOcular { left: 0, right: 5 };
        assert!(normalized_error(&gt, &gt, &bad).is_err());
    }

    #[test]
    fn face_size_modes() {
        let gt = set(&[(0.0, 0.0), (40.0, 10.0)]);
        assert_eq!(
            Normalizer::FaceSize(FaceSizeMode::GeometricMean).value(&gt).unwrap(),
            20.0
        );
        assert_eq!(Normalizer::FaceSize(FaceSizeMode::MaxSide).value(&gt).unwrap(), 40.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let gt: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)))
                .collect();
            let pr: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)))
                .collect();
            let d = ((gt[0].0 - gt[1].0).powi(2) + (gt[0].1 - gt[1].1).powi(2)).sqrt();
            let mut acc = 0.0;
            for i in 0..n {
                acc += ((pr[i].0 - gt[i].0).powi(2) + (pr[i].1 - gt[i].1).powi(2)).sqrt() / d;
            }
            let expected = acc / n as f64;
            let got = normalized_error(&set(&pr), &set(&gt), &Normalizer::InterOcular { left: 0, right: 1 }).unwrap();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregate_cases() {
        let s = aggregate(&[0.7]).unwrap();
        assert_eq!((s.mean, s.median, s.worst_decile_mean), (0.7, 0.7, 0.7));
        assert_eq!(aggregate(&[0.0, 1.0]).unwrap().mean, 0.5);
        assert!(aggregate(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = aggregate(&values).unwrap();
        assert_abs_diff_eq!(s.median, (sorted[499] + sorted[500]) / 2.0);
        assert_abs_diff_eq!(
            s.worst_decile_mean,
            sorted[900..].iter().sum::<f64>() / 100.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(s.mean, values.iter().sum::<f64>() / 1000.0, epsilon = 1e-12);
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<(f64, f64)>)> {
        (3usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), n),
                prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), n),
            )
        })
    }

    proptest! {
        #[test]
        fn scale_and_translation_invariance(
            (gt, pred) in arb_pair(),
            c in 0.1..10.0f64,
            tx in -100.0..100.0f64,
            ty in -100.0..100.0f64,
        ) {
            let norms = [
                Normalizer::InterPupil { left: vec![0, 1], right: vec![2] },
                Normalizer::FaceSize(FaceSizeMode::GeometricMean),
                Normalizer::FaceSize(FaceSizeMode::MaxSide),
                Normalizer::InterOcular { left: 0, right: 2 },
            ];
            let g = set(&gt);
            let p = set(&pred);
            let map = |s: &[(f64, f64)]| -> LandmarkSet {
                set(&s.iter().map(|&(x, y)| (c * x + tx, c * y + ty)).collect::<Vec<_>>())
            };
            for norm in &norms {
                if let Ok(base) = normalized_error(&p, &g, norm) {
                    if norm.value(&g).unwrap() < 1e-3 { continue; }
                    let moved = normalized_error(&map(&pred), &map(&gt), norm).unwrap();
                    prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
                }
            }
        }
    }
}
