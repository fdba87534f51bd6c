//! Experiment pipelines shared by the command-line tool and the test suites.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{run_alternating, AlignmentConfig, AlignmentOutcome};
use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, Heatmap};
use crate::landmarks::{LandmarkSet, Role};
use crate::metrics::normalized_error;
use crate::predictor::{ConvPredictor, ConvPredictorConfig, HeatmapPredictor, TrainConfig};
use crate::shape::{
    fit_shape_pca, pca_correct, robust_pca_correct, simulate_occlusion, GhcuConfig, GhcuExample, GhcuModel, PcaConfig,
    ShapeModel,
};
use crate::synth::Dataset;

/// Argmax decoding of every heatmap.
pub fn decode_all(maps: &[Heatmap]) -> Result<LandmarkSet> {
    let px = maps.iter().map(decode_argmax).collect::<Result<Vec<_>>>()?;
    Ok(LandmarkSet::from_pixels(&px, Role::Prediction))
}

/// Mean NME of argmax predictions against the truth of `data`.
pub fn prediction_nme<P: HeatmapPredictor + ?Sized>(model: &P, data: &Dataset) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let norm = data.normalizer();
    let mut total = 0.0;
    for s in &data.samples {
        total += normalized_error(&decode_all(&model.predict(s)?)?, &s.truth, &norm)?;
    }
    Ok(total / data.samples.len() as f64)
}

/// Mean NME of per-sample labels against the truth of `data`.
pub fn label_nme(data: &Dataset, labels: &[LandmarkSet]) -> Result<f64> {
    if labels.len() != data.samples.len() || labels.is_empty() {
        return Err(Error::SizeMismatch {
            expected: data.samples.len(),
            actual: labels.len(),
        });
    }
    let norm = data.normalizer();
    let mut total = 0.0;
    for (s, l) in data.samples.iter().zip(labels) {
        total += normalized_error(l, &s.truth, &norm)?;
    }
    Ok(total / labels.len() as f64)
}

/// Fresh conv predictor trained for `tcfg.passes` passes on `labels`.
/// Returns the model and the mean loss of each pass.
pub fn train_predictor(
    data: &Dataset,
    labels: &[LandmarkSet],
    mcfg: &ConvPredictorConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
) -> Result<(ConvPredictor, Vec<f64>)> {
    let mut model = ConvPredictor::init(data.landmark_count(), data.dims(), mcfg, init_seed)?;
    let mut losses = Vec::with_capacity(tcfg.passes);
    for _ in 0..tcfg.passes {
        losses.push(model.train_epoch(data, labels, tcfg)?);
    }
    Ok((model, losses))
}

/// Runs the alternating loop on a copy of `base`.
pub fn align_from(
    base: &ConvPredictor,
    data: &Dataset,
    acfg: &AlignmentConfig,
    tcfg: &TrainConfig,
) -> Result<(ConvPredictor, AlignmentOutcome)> {
    let mut model = base.clone();
    let outcome = run_alternating(&mut model, data, acfg, tcfg)?;
    Ok((model, outcome))
}

/// One setting of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub template_size: usize,
    pub final_label_nme: f64,
    pub final_pred_nme: f64,
}

pub const ABLATION_HEADER: &str = "lambda,template_size,final_label_nme,final_pred_nme";

/// Full grid over `lambdas x template_sizes`, each run starting from `base`.
pub fn ablate(
    base: &ConvPredictor,
    data: &Dataset,
    acfg: &AlignmentConfig,
    tcfg: &TrainConfig,
    lambdas: &[f64],
    template_sizes: &[usize],
) -> Result<Vec<AblationRow>> {
    if lambdas.is_empty() || template_sizes.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * template_sizes.len());
    for &template_size in template_sizes {
        for &lambda in lambdas {
            let cfg = AlignmentConfig {
                lambda,
                template_size,
                ..acfg.clone()
            };
            let (_, out) = align_from(base, data, &cfg, tcfg)?;
            let last = out.trace.records.last().ok_or(Error::Empty("alignment trace"))?;
            rows.push(AblationRow {
                lambda,
                template_size,
                final_label_nme: last.label_nme,
                final_pred_nme: last.pred_nme,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.template_size, r.final_label_nme, r.final_pred_nme
        ));
    }
    s
}

/// Error and cost of one decoder on the occluded split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorRow {
    pub method: &'static str,
    /// Mean per-landmark error over all landmarks, normalized per sample.
    pub err_all: f64,
    /// Same, restricted to occluded landmarks.
    pub err_occluded: f64,
    /// Wall time per sample in milliseconds; `None` when timing is disabled.
    pub ms_per_sample: Option<f64>,
}

pub const CORRECTION_HEADER: &str = "method,err_all,err_occluded,ms_per_sample";

pub fn correction_csv(rows: &[CorrectorRow]) -> String {
    let mut s = format!("{CORRECTION_HEADER}\n");
    for r in rows {
        let ms = r.ms_per_sample.map_or_else(|| "nan".to_string(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{ms}\n", r.method, r.err_all, r.err_occluded));
    }
    s
}

/// Trained correctors for the comparison.
#[derive(Debug, Clone)]
pub struct Correctors {
    pub shape: ShapeModel,
    pub ghcu: GhcuModel,
    pub ghcu_losses: Vec<f64>,
}

/// Fits the shape model on `targets` and trains GHCU on the predictor's
/// heatmaps of `train` against `targets`.
pub fn fit_correctors<P: HeatmapPredictor + ?Sized>(
    predictor: &P,
    train: &Dataset,
    targets: &[LandmarkSet],
    gcfg: &GhcuConfig,
    pcfg: &PcaConfig,
    tcfg: &TrainConfig,
) -> Result<Correctors> {
    if targets.len() != train.samples.len() {
        return Err(Error::SizeMismatch {
            expected: train.samples.len(),
            actual: targets.len(),
        });
    }
    gcfg.validate()?;
    let shape = fit_shape_pca(targets, pcfg.variance_fraction)?;
    let mut ghcu = GhcuModel::init(train.landmark_count(), train.dims(), gcfg)?;
    let examples = train
        .samples
        .iter()
        .zip(targets)
        .map(|(s, t)| ghcu.example(&predictor.predict(s)?, t))
        .collect::<Result<Vec<GhcuExample>>>()?;
    let mut ghcu_losses = Vec::with_capacity(tcfg.passes);
    for _ in 0..tcfg.passes {
        ghcu_losses.push(ghcu.train_epoch(&examples, tcfg, gcfg)?);
    }
    Ok(Correctors {
        shape,
        ghcu,
        ghcu_losses,
    })
}

/// Occludes each test sample's heatmaps (stream `occlusion_seed`) and
/// compares argmax, plain PCA projection, robust PCA, and GHCU.
pub fn compare_correctors<P: HeatmapPredictor + ?Sized>(
    predictor: &P,
    correctors: &Correctors,
    test: &Dataset,
    occlusion_probability: f64,
    gcfg: &GhcuConfig,
    pcfg: &PcaConfig,
    occlusion_seed: u64,
    timing: bool,
) -> Result<Vec<CorrectorRow>> {
    if test.samples.is_empty() {
        return Err(Error::Empty("test data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(occlusion_seed);
    let norm = test.normalizer();
    const METHODS: [&str; 4] = ["argmax", "pca", "robust-pca", "ghcu"];
    let mut err_all = [0.0f64; 4];
    let mut err_occ = [0.0f64; 4];
    let mut secs = [0.0f64; 4];
    let (mut n_all, mut n_occ) = (0usize, 0usize);
    for s in &test.samples {
        let maps = predictor.predict(s)?;
        let (occluded, mask) = simulate_occlusion(&maps, occlusion_probability, gcfg.occlusion_fill, &mut rng)?;
        let scale = norm.value(&s.truth)?;
        let t = Instant::now();
        let raw = decode_all(&occluded)?;
        let decode = t.elapsed().as_secs_f64();
        secs[0] += decode;
        let t = Instant::now();
        let plain = pca_correct(&raw, &correctors.shape)?;
        // Plain projection starts from the argmax decode, so it pays for it too.
        secs[1] += t.elapsed().as_secs_f64() + decode;
        let t = Instant::now();
        let robust = robust_pca_correct(&occluded, &correctors.shape, pcfg)?;
        secs[2] += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let regressed = correctors.ghcu.forward(&occluded)?;
        secs[3] += t.elapsed().as_secs_f64();
        for (k, &occ) in mask.occluded.iter().enumerate() {
            n_all += 1;
            n_occ += usize::from(occ);
            for (j, pred) in [&raw, &plain, &robust, &regressed].into_iter().enumerate() {
                let e = pred.points[k].dist(s.truth.points[k]) / scale;
                err_all[j] += e;
                if occ {
                    err_occ[j] += e;
                }
            }
        }
    }
    let per_sample = 1e3 / test.samples.len() as f64;
    Ok((0..4)
        .map(|j| CorrectorRow {
            method: METHODS[j],
            err_all: err_all[j] / n_all as f64,
            err_occluded: if n_occ == 0 { 0.0 } else { err_occ[j] / n_occ as f64 },
            ms_per_sample: timing.then(|| secs[j] * per_sample),
        })
        .collect())
}

/// Test NME of fresh predictors trained on each label set with identical seeds.
pub fn label_quality(
    train: &Dataset,
    test: &Dataset,
    label_sets: &[&[LandmarkSet]],
    mcfg: &ConvPredictorConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
) -> Result<Vec<f64>> {
    label_sets
        .iter()
        .map(|labels| {
            let (model, _) = train_predictor(train, labels, mcfg, tcfg, init_seed)?;
            prediction_nme(&model, test)
        })
        .collect()
}
