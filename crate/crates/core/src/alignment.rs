//! Label search and the alternating refinement loop.
//!
//! For one landmark with observation `o` and predicted heatmap `h`, the
//! refined label minimizes
//!
//! ```text
//! lambda * |o - y|^2 + chi2(E, s * crop(h, y))
//! ```
//!
//! over the `(2w+1) x (2w+1)` square around `o`, where `E` is a unit-sum
//! Gaussian template and `s` is `patch_scale`. Peak-1 heatmaps carry a total
//! mass of roughly `2 pi sigma^2`, so `s` around `1 / (2 pi sigma^2)` puts the
//! scaled patch on the template's scale. `lambda = inf` pins every label to
//! its observation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::heatmap::{
    decode_argmax, make_gaussian_template, windowed_chi_square, GaussianTemplate, Heatmap, PixelCoord,
};
use crate::kv::impl_key_values;
use crate::landmarks::{LandmarkSet, Point2, Role};
use crate::metrics::normalized_error;
use crate::predictor::{HeatmapPredictor, TrainConfig};
use crate::synth::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    /// Weight of the squared displacement from the observation, relative to
    /// a unit-weight chi-square. Larger values trust the annotation more;
    /// `1 / lambda` is the equivalent weight on the chi-square term.
    pub lambda: f64,
    pub neighborhood_half_width: usize,
    pub template_size: usize,
    pub template_sigma: f64,
    pub template_epsilon: f64,
    /// Multiplier applied to heatmap values before the chi-square comparison.
    pub patch_scale: f64,
    pub epochs: usize,
    pub update_observation: bool,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            neighborhood_half_width: 8,
            template_size: 19,
            template_sigma: 3.5,
            template_epsilon: 1e-6,
            patch_scale: 1.0 / (2.0 * std::f64::consts::PI * 1.5 * 1.5),
            epochs: 10,
            update_observation: true,
            seed: 1,
        }
    }
}

impl_key_values!(AlignmentConfig, "align", {
    lambda,
    neighborhood_half_width,
    template_size,
    template_sigma,
    template_epsilon,
    patch_scale,
    epochs,
    update_observation,
    seed,
});

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.template_size % 2 == 0 {
            return Err(Error::invalid("template size must be odd"));
        }
        if !(self.patch_scale > 0.0 && self.patch_scale.is_finite()) {
            return Err(Error::invalid("patch scale must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("at least one alignment epoch is required"));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<GaussianTemplate> {
        make_gaussian_template(self.template_size, self.template_sigma, self.template_epsilon)
    }
}

/// A validated config with its template built once.
#[derive(Debug, Clone)]
pub struct Searcher {
    cfg: AlignmentConfig,
    template: GaussianTemplate,
}

impl Searcher {
    pub fn new(cfg: &AlignmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            template: cfg.template()?,
        })
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    pub fn chi_square_at(&self, h: &Heatmap, y: PixelCoord) -> f64 {
        windowed_chi_square(&self.template, h, y, self.cfg.patch_scale)
    }

    pub fn objective(&self, o: PixelCoord, y: PixelCoord, h: &Heatmap) -> Result<f64> {
        h.check_bounds(y)?;
        let chi = self.chi_square_at(h, y);
        if self.cfg.lambda == 0.0 {
            return Ok(chi);
        }
        Ok(self.cfg.lambda * o.dist2(y) as f64 + chi)
    }

    /// Minimizer of the objective over the in-bounds part of the window.
    pub fn search(&self, h: &Heatmap, o: PixelCoord) -> Result<PixelCoord> {
        h.check_bounds(o)?;
        if self.cfg.lambda.is_infinite() {
            return Ok(o);
        }
        let w = self.cfg.neighborhood_half_width as i64;
        let y0 = (o.y - w).max(0);
        let y1 = (o.y + w).min(h.height() as i64 - 1);
        let x0 = (o.x - w).max(0);
        let x1 = (o.x + w).min(h.width() as i64 - 1);
        let mut best = o;
        let mut best_value = f64::INFINITY;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = PixelCoord::new(x, y);
                let chi = self.chi_square_at(h, c);
                let v = if self.cfg.lambda == 0.0 {
                    chi
                } else {
                    self.cfg.lambda * o.dist2(c) as f64 + chi
                };
                if v < best_value {
                    best_value = v;
                    best = c;
                }
            }
        }
        Ok(best)
    }

    pub fn search_all(&self, heatmaps: &[Heatmap], obs: &LandmarkSet) -> Result<LandmarkSet> {
        if heatmaps.len() != obs.len() {
            return Err(Error::SizeMismatch {
                expected: obs.len(),
                actual: heatmaps.len(),
            });
        }
        let found = heatmaps
            .iter()
            .zip(obs.to_pixels())
            .map(|(h, o)| self.search(h, o))
            .collect::<Result<Vec<_>>>()?;
        Ok(LandmarkSet::from_pixels(&found, Role::Latent))
    }
}

/// `lambda * |o - y|^2 + chi2` at one candidate.
pub fn landmark_objective(o: PixelCoord, y: PixelCoord, h: &Heatmap, cfg: &AlignmentConfig) -> Result<f64> {
    Searcher::new(cfg)?.objective(o, y, h)
}

pub fn search_landmark(h: &Heatmap, o: PixelCoord, cfg: &AlignmentConfig) -> Result<PixelCoord> {
    Searcher::new(cfg)?.search(h, o)
}

pub fn search_all(heatmaps: &[Heatmap], obs: &LandmarkSet, cfg: &AlignmentConfig) -> Result<LandmarkSet> {
    Searcher::new(cfg)?.search_all(heatmaps, obs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean distance between searched labels and the observations they started from.
    pub mean_displacement: f64,
    pub label_nme: f64,
    pub pred_nme: f64,
    /// Share of landmarks whose search left the observation in place.
    pub fixed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentTrace {
    pub records: Vec<EpochRecord>,
}

pub const TRACE_HEADER: &str = "epoch,train_loss,mean_displacement,label_nme,pred_nme";

impl AlignmentTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.mean_displacement, r.label_nme, r.pred_nme
            );
        }
        s
    }

    pub fn final_label_nme(&self) -> Option<f64> {
        self.records.last().map(|r| r.label_nme)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutcome {
    /// Labels searched in the last epoch, one set per training sample.
    pub labels: Vec<LandmarkSet>,
    pub trace: AlignmentTrace,
}

/// Alternates label search (step 1) with one training pass on the searched
/// labels (step 2). Observations start at the annotations; with
/// `update_observation` each epoch's labels become the next observations.
pub fn run_alternating<P: HeatmapPredictor + ?Sized>(
    predictor: &mut P,
    data: &Dataset,
    cfg: &AlignmentConfig,
    tcfg: &TrainConfig,
) -> Result<AlignmentOutcome> {
    if data.samples.is_empty() {
        return Err(Error::Empty("alignment data"));
    }
    if predictor.landmark_count() != data.landmark_count() {
        return Err(Error::SizeMismatch {
            expected: data.landmark_count(),
            actual: predictor.landmark_count(),
        });
    }
    let searcher = Searcher::new(cfg)?;
    let norm = data.normalizer();
    let count = data.samples.len() as f64;
    let mut obs = data.annotations();
    let mut labels = Vec::new();
    let mut trace = AlignmentTrace::default();
    predictor.reset_optimizer();
    for epoch in 1..=cfg.epochs {
        labels.clear();
        let (mut disp, mut fixed, mut label_nme, mut pred_nme) = (0.0, 0usize, 0.0, 0.0);
        for (sample, o) in data.samples.iter().zip(&obs) {
            let maps = predictor.predict(sample)?;
            let found = searcher.search_all(&maps, o)?;
            let argmax = maps.iter().map(decode_argmax).collect::<Result<Vec<_>>>()?;
            let pred = LandmarkSet::from_pixels(&argmax, Role::Prediction);
            for (a, b) in found.points.iter().zip(&o.points) {
                let d = a.dist(*b);
                disp += d;
                fixed += usize::from(d == 0.0);
            }
            label_nme += normalized_error(&found, &sample.truth, &norm)?;
            pred_nme += normalized_error(&pred, &sample.truth, &norm)?;
            labels.push(found);
        }
        let train_loss = predictor.train_epoch(data, &labels, tcfg)?;
        let total = count * data.landmark_count() as f64;
        trace.records.push(EpochRecord {
            epoch,
            train_loss,
            mean_displacement: disp / total,
            label_nme: label_nme / count,
            pred_nme: pred_nme / count,
            fixed_fraction: fixed as f64 / total,
        });
        if cfg.update_observation {
            obs = labels.iter().map(|l| l.clone().with_role(Role::Annotation)).collect();
        }
    }
    Ok(AlignmentOutcome { labels, trace })
}

/// Preset behaviors of the alternating loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Keep training on the annotations (labels never move).
    BaselineContinue,
    /// Search every epoch around the original annotations.
    SaNoUpdate,
    /// Full loop with observation update.
    Sa,
}

impl AlignMode {
    pub fn apply(self, cfg: &AlignmentConfig) -> AlignmentConfig {
        let mut c = cfg.clone();
        match self {
            AlignMode::BaselineContinue => c.lambda = f64::INFINITY,
            AlignMode::SaNoUpdate => c.update_observation = false,
            AlignMode::Sa => c.update_observation = true,
        }
        c
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::BaselineContinue => "baseline-continue",
            AlignMode::SaNoUpdate => "sa-no-update",
            AlignMode::Sa => "sa",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-continue" | "baseline" => Ok(AlignMode::BaselineContinue),
            "sa-no-update" => Ok(AlignMode::SaNoUpdate),
            "sa" => Ok(AlignMode::Sa),
            _ => Err(Error::invalid(format!("unknown alignment mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean displacement of labels from a reference set, in pixels.
pub fn mean_label_shift(a: &[LandmarkSet], b: &[LandmarkSet]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.points.iter().zip(&y.points) {
            total += Point2::dist(*p, *q);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{chi_square_distance, crop_patch};
    use crate::predictor::{oracle_predict, OraclePredictor, OraclePredictorConfig};
    use crate::synth::{make_dataset, LandmarkTag, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Heatmap {
        Heatmap::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn brute_force(h: &Heatmap, o: PixelCoord, cfg: &AlignmentConfig) -> PixelCoord {
        let w = cfg.neighborhood_half_width as i64;
        let mut best = None;
        for dy in -w..=w {
            for dx in -w..=w {
                let c = PixelCoord::new(o.x + dx, o.y + dy);
                if !h.contains(c) {
                    continue;
                }
                let v = landmark_objective(o, c, h, cfg).unwrap();
                if best.map_or(true, |(bv, _)| v < bv) {
                    best = Some((v, c));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn objective_is_prior_plus_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AlignmentConfig {
            lambda: 0.37,
            template_size: 7,
            ..AlignmentConfig::default()
        };
        let h = random_map(&mut rng, 20, 16);
        let t = cfg.template().unwrap();
        for _ in 0..50 {
            let o = PixelCoord::new(rng.gen_range(0..20), rng.gen_range(0..16));
            let y = PixelCoord::new(rng.gen_range(0..20), rng.gen_range(0..16));
            let prior = ((o.x - y.x).pow(2) + (o.y - y.y).pow(2)) as f64;
            let patch = crop_patch(&h, y, 7).unwrap().scaled(cfg.patch_scale);
            let chi = chi_square_distance(&t, &patch).unwrap();
            let v = landmark_objective(o, y, &h, &cfg).unwrap();
            assert!((v - (0.37 * prior + chi)).abs() <= 1e-12 * v.max(1.0));
        }
    }

    #[test]
    fn objective_vanishes_on_perfect_template() {
        let cfg = AlignmentConfig {
            template_size: 5,
            patch_scale: 1.0,
            ..AlignmentConfig::default()
        };
        let t = cfg.template().unwrap();
        let mut values = vec![0.0; 15 * 15];
        for dy in 0..5 {
            for dx in 0..5 {
                values[(5 + dy) * 15 + 4 + dx] = t.values()[dy * 5 + dx];
            }
        }
        let h = Heatmap::new(15, 15, values).unwrap();
        let c = PixelCoord::new(6, 7);
        assert!(landmark_objective(c, c, &h, &cfg).unwrap().abs() < 1e-15);
        let zero = AlignmentConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        let far = PixelCoord::new(12, 1);
        let chi_only = landmark_objective(c, c, &h, &cfg).unwrap();
        assert_eq!(landmark_objective(far, c, &h, &zero).unwrap(), chi_only);
        assert_eq!(search_landmark(&h, PixelCoord::new(10, 3), &zero).unwrap(), c);
    }

    #[test]
    fn search_matches_brute_force_on_oracle_maps() {
        let cfg = AlignmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ocfg = OraclePredictorConfig::default();
        for _ in 0..30 {
            let p = Point2::new(rng.gen_range(2.0..62.0), rng.gen_range(2.0..62.0));
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let truth = LandmarkSet::new(vec![p], Role::Truth);
            let maps = oracle_predict(
                &truth,
                &[LandmarkTag::Weak],
                &[Point2::new(a.cos(), a.sin())],
                (64, 64),
                &ocfg,
                &mut rng,
            )
            .unwrap();
            let o = PixelCoord::new(rng.gen_range(0..64), rng.gen_range(0..64));
            assert_eq!(
                search_landmark(&maps[0], o, &cfg).unwrap(),
                brute_force(&maps[0], o, &cfg)
            );
        }
    }

    #[test]
    fn huge_lambda_returns_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for lambda in [1e9, f64::INFINITY] {
            let cfg = AlignmentConfig {
                lambda,
                ..AlignmentConfig::default()
            };
            for _ in 0..10 {
                let h = random_map(&mut rng, 32, 32);
                let o = PixelCoord::new(rng.gen_range(0..32), rng.gen_range(0..32));
                assert_eq!(search_landmark(&h, o, &cfg).unwrap(), o);
            }
        }
    }

    #[test]
    fn search_all_is_per_landmark() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AlignmentConfig {
            template_size: 5,
            ..AlignmentConfig::default()
        };
        let maps: Vec<Heatmap> = (0..4).map(|_| random_map(&mut rng, 24, 24)).collect();
        let obs = LandmarkSet::from_pixels(
            &(0..4)
                .map(|_| PixelCoord::new(rng.gen_range(0..24), rng.gen_range(0..24)))
                .collect::<Vec<_>>(),
            Role::Annotation,
        );
        let all = search_all(&maps, &obs, &cfg).unwrap();
        assert_eq!(all.role, Role::Latent);
        for (k, p) in all.to_pixels().into_iter().enumerate() {
            assert_eq!(p, search_landmark(&maps[k], obs.to_pixels()[k], &cfg).unwrap());
        }
        let rev_maps: Vec<Heatmap> = maps.iter().rev().cloned().collect();
        let rev_obs = LandmarkSet::new(obs.points.iter().rev().copied().collect(), Role::Annotation);
        let rev = search_all(&rev_maps, &rev_obs, &cfg).unwrap();
        assert_eq!(rev.points, all.points.iter().rev().copied().collect::<Vec<_>>());
        assert!(search_all(&maps[..3], &obs, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn result_stays_in_window(seed in any::<u64>(), w in 0usize..6, lambda in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_map(&mut rng, 20, 20);
            let o = PixelCoord::new(rng.gen_range(0..20), rng.gen_range(0..20));
            let cfg = AlignmentConfig { lambda, neighborhood_half_width: w, template_size: 5, ..AlignmentConfig::default() };
            let y = search_landmark(&h, o, &cfg).unwrap();
            prop_assert!(h.contains(y));
            prop_assert!(y.chebyshev(o) <= w as i64);
        }

        #[test]
        fn displacement_non_increasing_in_lambda(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_map(&mut rng, 24, 24);
            let o = PixelCoord::new(rng.gen_range(0..24), rng.gen_range(0..24));
            let mut last = i64::MAX;
            for lambda in [0.0, 0.001, 0.01, 0.05, 0.1, 0.3, 1.0, 10.0, 1e9] {
                let cfg = AlignmentConfig { lambda, template_size: 5, ..AlignmentConfig::default() };
                let d = search_landmark(&h, o, &cfg).unwrap().dist2(o);
                prop_assert!(d <= last);
                last = d;
            }
        }

        #[test]
        fn uniform_rescaling_keeps_argmin(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_map(&mut rng, 20, 20);
            let o = PixelCoord::new(rng.gen_range(0..20), rng.gen_range(0..20));
            let cfg = AlignmentConfig { lambda: 0.2, template_size: 5, ..AlignmentConfig::default() };
            let s = Searcher::new(&cfg).unwrap();
            let w = cfg.neighborhood_half_width as i64;
            let mut best = (f64::INFINITY, o);
            for dy in -w..=w {
                for dx in -w..=w {
                    let y = PixelCoord::new(o.x + dx, o.y + dy);
                    if h.contains(y) {
                        let v = c * s.objective(o, y, &h).unwrap();
                        if v < best.0 {
                            best = (v, y);
                        }
                    }
                }
            }
            prop_assert_eq!(best.1, s.search(&h, o).unwrap());
        }
    }

    fn tiny_data() -> Dataset {
        make_dataset(6, &SynthConfig::default(), 4).unwrap()
    }

    #[test]
    fn single_epoch_equals_search_on_initial_predictor() {
        let data = tiny_data();
        let mut oracle = OraclePredictor::for_dataset(OraclePredictorConfig::default(), &data, 3);
        let cfg = AlignmentConfig {
            epochs: 1,
            ..AlignmentConfig::default()
        };
        let out = run_alternating(&mut oracle, &data, &cfg, &TrainConfig::default()).unwrap();
        for (s, l) in data.samples.iter().zip(&out.labels) {
            let maps = oracle.predict(s).unwrap();
            assert_eq!(l, &search_all(&maps, &s.annotation, &cfg).unwrap());
        }
        assert_eq!(out.trace.records.len(), 1);
    }

    #[test]
    fn infinite_lambda_keeps_annotations() {
        let data = tiny_data();
        let mut oracle = OraclePredictor::for_dataset(OraclePredictorConfig::default(), &data, 3);
        let cfg = AlignMode::BaselineContinue.apply(&AlignmentConfig {
            epochs: 3,
            ..AlignmentConfig::default()
        });
        let out = run_alternating(&mut oracle, &data, &cfg, &TrainConfig::default()).unwrap();
        for (s, l) in data.samples.iter().zip(&out.labels) {
            assert_eq!(l.points, s.annotation.points);
        }
        let r = &out.trace.records;
        assert!(r
            .iter()
            .all(|x| x.mean_displacement == 0.0 && x.label_nme == r[0].label_nme));
    }

    #[test]
    fn trace_is_deterministic_and_csv_shaped() {
        let data = tiny_data();
        let cfg = AlignmentConfig {
            epochs: 2,
            ..AlignmentConfig::default()
        };
        let run = || {
            let mut oracle = OraclePredictor::for_dataset(OraclePredictorConfig::default(), &data, 3);
            run_alternating(&mut oracle, &data, &cfg, &TrainConfig::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let csv = a.trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [AlignMode::BaselineContinue, AlignMode::SaNoUpdate, AlignMode::Sa] {
            assert_eq!(m.as_str().parse::<AlignMode>().unwrap(), m);
        }
        assert!("other".parse::<AlignMode>().is_err());
    }
}
