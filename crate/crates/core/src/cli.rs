//! Command-line harness: dataset generation, training, alignment runs,
//! ablations, corrector comparison, and label-quality checks.
//!
//! Every command resolves one flat `key = value` configuration (defaults,
//! then `--config`, then `--seed`, then `--set` overrides), writes it to
//! `config.txt` in the output directory, and prints it. Re-running a command
//! with `--config <out>/config.txt` reproduces its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{AlignMode, AlignmentConfig};
use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::experiments::{
    ablate, ablation_csv, align_from, compare_correctors, correction_csv, fit_correctors, label_nme, label_quality,
    prediction_nme, train_predictor,
};
use crate::kv::{format_kv_text, parse_kv_text, KeyValues};
use crate::landmarks::{LabelFile, LandmarkSet, Role};
use crate::predictor::{ConvPredictor, ConvPredictorConfig, TrainConfig};
use crate::shape::{GhcuConfig, GhcuTarget, PcaConfig};
use crate::synth::{make_dataset, make_dataset_range, Dataset, SynthConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "semalign", version, about = "Landmark label refinement by heatmap search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its annotation labels.
    Synth,
    /// Train the heatmap predictor on raw annotations.
    TrainBaseline,
    /// Run the alternating label search and retraining loop.
    ///
    /// `align.lambda` weights the distance to the annotation against a
    /// unit-weight chi-square; `inf` keeps the annotations.
    Align,
    /// Sweep lambda and template size.
    Ablate,
    /// Compare argmax, PCA, robust PCA, and GHCU on occluded heatmaps.
    Correct,
    /// Train fresh predictors on two label files and compare test error.
    LabelQuality,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainBaseline => "train-baseline",
            Command::Align => "align",
            Command::Ablate => "ablate",
            Command::Correct => "correct",
            Command::LabelQuality => "label-quality",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Primary seed: dataset seed for `synth`, model-initialization seed otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one key, e.g. `--set align.lambda=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingInput(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// `TrainConfig` keys under a different prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixedTrain {
    pub prefix: &'static str,
    pub cfg: TrainConfig,
}

impl KeyValues for PrefixedTrain {
    fn entries(&self) -> Vec<(String, String)> {
        self.cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (format!("{}.{}", self.prefix, k.trim_start_matches("train.")), v))
            .collect()
    }

    fn set_key(&mut self, key: &str, value: &str) -> crate::Result<bool> {
        match key.strip_prefix(self.prefix).and_then(|r| r.strip_prefix('.')) {
            Some(rest) => self.cfg.set_key(&format!("train.{rest}"), value),
            None => Ok(false),
        }
    }
}

/// Fully resolved settings of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth_count: usize,
    /// Size of the held-out split written next to the training set.
    pub synth_test_count: usize,
    pub synth: SynthConfig,
    pub model: ConvPredictorConfig,
    pub train: TrainConfig,
    pub align: AlignmentConfig,
    pub align_mode: AlignMode,
    pub ablate_lambdas: Vec<f64>,
    pub ablate_template_sizes: Vec<usize>,
    pub pca: PcaConfig,
    pub ghcu: GhcuConfig,
    pub ghcu_train: PrefixedTrain,
    pub correct_occlusion_seed: u64,
    pub correct_timing: bool,
    pub input_dataset: String,
    pub input_test_dataset: String,
    pub input_model: String,
    pub input_labels: String,
    pub input_reference_labels: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth_count: 500,
            synth_test_count: 200,
            synth: SynthConfig::default(),
            model: ConvPredictorConfig::default(),
            train: TrainConfig::default(),
            align: AlignmentConfig::default(),
            align_mode: AlignMode::Sa,
            ablate_lambdas: vec![1e9, 1.0, 0.3, 0.1, 0.05, 0.01, 0.0],
            ablate_template_sizes: vec![AlignmentConfig::default().template_size, 1],
            pca: PcaConfig::default(),
            ghcu: GhcuConfig::default(),
            ghcu_train: PrefixedTrain {
                prefix: "ghcu_train",
                cfg: default_ghcu_training(),
            },
            correct_occlusion_seed: 99,
            correct_timing: true,
            input_dataset: "out/dataset.txt".into(),
            input_test_dataset: "out/test_dataset.txt".into(),
            input_model: "out/model.ckpt".into(),
            input_labels: "out/labels.txt".into(),
            input_reference_labels: "out/annotations.txt".into(),
        }
    }
}

/// Default optimizer settings for the GHCU regressor.
pub fn default_ghcu_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        passes: 30,
        batch_size: 10,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad list entry `{s}` for key `{key}`")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> crate::Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for key `{key}`")))
}

impl KeyValues for ExperimentConfig {
    fn entries(&self) -> Vec<(String, String)> {
        let mut e = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("synth.count".to_string(), self.synth_count.to_string()),
            ("synth.test_count".to_string(), self.synth_test_count.to_string()),
        ];
        e.extend(self.synth.entries());
        e.extend(self.model.entries());
        e.extend(self.train.entries());
        e.extend(self.align.entries());
        e.push(("align.mode".into(), self.align_mode.to_string()));
        e.push(("ablate.lambdas".into(), join(&self.ablate_lambdas)));
        e.push(("ablate.template_sizes".into(), join(&self.ablate_template_sizes)));
        e.extend(self.pca.entries());
        e.extend(self.ghcu.entries());
        e.extend(self.ghcu_train.entries());
        e.push(("correct.occlusion_seed".into(), self.correct_occlusion_seed.to_string()));
        e.push(("correct.timing".into(), self.correct_timing.to_string()));
        e.push(("input.dataset".into(), self.input_dataset.clone()));
        e.push(("input.test_dataset".into(), self.input_test_dataset.clone()));
        e.push(("input.model".into(), self.input_model.clone()));
        e.push(("input.labels".into(), self.input_labels.clone()));
        e.push(("input.reference_labels".into(), self.input_reference_labels.clone()));
        e
    }

    fn set_key(&mut self, key: &str, value: &str) -> crate::Result<bool> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_scalar(key, v)?,
            "synth.count" => self.synth_count = parse_scalar(key, v)?,
            "synth.test_count" => self.synth_test_count = parse_scalar(key, v)?,
            "align.mode" => self.align_mode = v.parse()?,
            "ablate.lambdas" => self.ablate_lambdas = parse_list(key, v)?,
            "ablate.template_sizes" => self.ablate_template_sizes = parse_list(key, v)?,
            "correct.occlusion_seed" => self.correct_occlusion_seed = parse_scalar(key, v)?,
            "correct.timing" => self.correct_timing = parse_scalar(key, v)?,
            "input.dataset" => self.input_dataset = v.to_string(),
            "input.test_dataset" => self.input_test_dataset = v.to_string(),
            "input.model" => self.input_model = v.to_string(),
            "input.labels" => self.input_labels = v.to_string(),
            "input.reference_labels" => self.input_reference_labels = v.to_string(),
            _ => {
                return Ok(self.synth.set_key(key, v)?
                    || self.model.set_key(key, v)?
                    || self.train.set_key(key, v)?
                    || self.align.set_key(key, v)?
                    || self.pca.set_key(key, v)?
                    || self.ghcu.set_key(key, v)?
                    || self.ghcu_train.set_key(key, v)?)
            }
        }
        Ok(true)
    }
}

impl ExperimentConfig {
    /// Applies `key = value` pairs, rejecting unknown keys.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> CliResult<()> {
        for (k, v) in pairs {
            match self.set_key(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(CliError::Config(format!("unknown key `{k}`"))),
                Err(e) => return Err(CliError::Config(e.to_string())),
            }
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--seed`, then `--set` overrides.
    pub fn resolve(common: &CommonArgs) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let pairs = parse_kv_text(&text).map_err(|e| CliError::Config(e.to_string()))?;
            cfg.apply(&pairs)?;
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let mut pairs = Vec::with_capacity(common.overrides.len());
        for o in &common.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let check = |r: crate::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        if self.synth_count == 0 || self.synth_test_count == 0 {
            return Err(CliError::Config(
                "synth.count and synth.test_count must be at least 1".into(),
            ));
        }
        check(self.synth.scene.validate())?;
        check(self.synth.noise.validate())?;
        check(self.train.validate())?;
        check(self.ghcu_train.cfg.validate())?;
        check(self.align.validate())?;
        check(self.ghcu.validate())?;
        if self.ablate_lambdas.is_empty() || self.ablate_template_sizes.is_empty() {
            return Err(CliError::Config("ablation grid must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format_kv_text(&self.entries())
    }
}

fn load_dataset(path: &str) -> CliResult<Dataset> {
    let p = Path::new(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!("dataset {path}")));
    }
    Dataset::load(p).map_err(|e| CliError::MissingInput(format!("dataset {path}: {e}")))
}

fn load_model(path: &str) -> CliResult<ConvPredictor> {
    let p = Path::new(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!("model checkpoint {path}")));
    }
    Checkpoint::load(p)
        .and_then(|ck| ConvPredictor::from_checkpoint(&ck))
        .map_err(|e| CliError::MissingInput(format!("model checkpoint {path}: {e}")))
}

/// Reads a label file and checks it covers `data` sample by sample.
fn load_labels(path: &str, data: &Dataset) -> CliResult<Vec<LandmarkSet>> {
    let p = Path::new(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!("labels {path}")));
    }
    let text = std::fs::read_to_string(p).map_err(|e| CliError::MissingInput(format!("labels {path}: {e}")))?;
    let file = LabelFile::from_text(&text).map_err(|e| CliError::MissingInput(format!("labels {path}: {e}")))?;
    let ok = file.entries.len() == data.samples.len()
        && file
            .entries
            .iter()
            .zip(&data.samples)
            .all(|((id, set), s)| *id == s.id && set.len() == data.landmark_count());
    if !ok {
        return Err(CliError::MissingInput(format!(
            "labels {path} do not match the {} samples of the dataset",
            data.samples.len()
        )));
    }
    Ok(file.entries.into_iter().map(|(_, s)| s).collect())
}

fn label_file(data: &Dataset, labels: &[LandmarkSet], role: Role) -> LabelFile {
    LabelFile {
        entries: data
            .samples
            .iter()
            .zip(labels)
            .map(|(s, l)| (s.id, l.clone().with_role(role)))
            .collect(),
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    std::fs::write(dir.join(name), text).map_err(|e| CliError::Runtime(e.into()))
}

/// Runs one command and returns its human-readable summary.
pub fn execute(command: Command, cfg: &ExperimentConfig, out: &Path) -> CliResult<String> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(out, "config.txt", &cfg.to_text())?;
    let mut summary = String::new();
    match command {
        Command::Synth => {
            let data = make_dataset(cfg.synth_count, &cfg.synth, cfg.seed)?;
            data.save(&out.join("dataset.txt"))?;
            let test = make_dataset_range(cfg.synth_count as u64, cfg.synth_test_count, &cfg.synth, cfg.seed)?;
            test.save(&out.join("test_dataset.txt"))?;
            let anns = data.annotations();
            write_file(
                out,
                "annotations.txt",
                &label_file(&data, &anns, Role::Annotation).to_text(),
            )?;
            let nme = label_nme(&data, &anns)?;
            let _ = writeln!(summary, "samples {}", data.samples.len());
            let _ = writeln!(summary, "test_samples {}", test.samples.len());
            let _ = writeln!(summary, "landmarks {}", data.landmark_count());
            let _ = writeln!(summary, "annotation_nme {nme}");
            let _ = writeln!(
                summary,
                "expected_annotation_nme {}",
                cfg.synth.noise.expected_nme(&cfg.synth.scene)
            );
        }
        Command::TrainBaseline => {
            let data = load_dataset(&cfg.input_dataset)?;
            let (model, losses) = train_predictor(&data, &data.annotations(), &cfg.model, &cfg.train, cfg.seed)?;
            model.to_checkpoint().save(&out.join("model.ckpt"))?;
            let mut csv = String::from("pass,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{},{l}", i + 1);
            }
            write_file(out, "train_trace.csv", &csv)?;
            let _ = writeln!(summary, "passes {}", losses.len());
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                let _ = writeln!(summary, "first_loss {first}");
                let _ = writeln!(summary, "final_loss {last}");
            }
            let _ = writeln!(summary, "train_nme {}", prediction_nme(&model, &data)?);
        }
        Command::Align => {
            let data = load_dataset(&cfg.input_dataset)?;
            let base = load_model(&cfg.input_model)?;
            let acfg = cfg.align_mode.apply(&cfg.align);
            let (model, outcome) = align_from(&base, &data, &acfg, &cfg.train)?;
            write_file(
                out,
                "labels.txt",
                &label_file(&data, &outcome.labels, Role::Latent).to_text(),
            )?;
            model.to_checkpoint().save(&out.join("model.ckpt"))?;
            write_file(out, "trace.csv", &outcome.trace.to_csv())?;
            let _ = writeln!(summary, "mode {}", cfg.align_mode);
            let _ = writeln!(summary, "annotation_nme {}", label_nme(&data, &data.annotations())?);
            if let Some(last) = outcome.trace.records.last() {
                let _ = writeln!(summary, "final_label_nme {}", last.label_nme);
                let _ = writeln!(summary, "final_pred_nme {}", last.pred_nme);
                let _ = writeln!(summary, "fixed_fraction {}", last.fixed_fraction);
            }
        }
        Command::Ablate => {
            let data = load_dataset(&cfg.input_dataset)?;
            let base = load_model(&cfg.input_model)?;
            let acfg = cfg.align_mode.apply(&cfg.align);
            let rows = ablate(
                &base,
                &data,
                &acfg,
                &cfg.train,
                &cfg.ablate_lambdas,
                &cfg.ablate_template_sizes,
            )?;
            write_file(out, "ablation.csv", &ablation_csv(&rows))?;
            let _ = writeln!(summary, "settings {}", rows.len());
            if let Some(best) = rows
                .iter()
                .min_by(|a, b| a.final_label_nme.total_cmp(&b.final_label_nme))
            {
                let _ = writeln!(
                    summary,
                    "best lambda {} template_size {} final_label_nme {}",
                    best.lambda, best.template_size, best.final_label_nme
                );
            }
        }
        Command::Correct => {
            let train = load_dataset(&cfg.input_dataset)?;
            let test = load_dataset(&cfg.input_test_dataset)?;
            let model = load_model(&cfg.input_model)?;
            let targets = match cfg.ghcu.target {
                GhcuTarget::Truth => train.truths(),
                GhcuTarget::Labels => load_labels(&cfg.input_labels, &train)?,
            };
            let correctors = fit_correctors(&model, &train, &targets, &cfg.ghcu, &cfg.pca, &cfg.ghcu_train.cfg)?;
            correctors.shape.to_checkpoint().save(&out.join("shape.ckpt"))?;
            correctors.ghcu.to_checkpoint().save(&out.join("ghcu.ckpt"))?;
            let rows = compare_correctors(
                &model,
                &correctors,
                &test,
                cfg.ghcu.occlusion_probability,
                &cfg.ghcu,
                &cfg.pca,
                cfg.correct_occlusion_seed,
                cfg.correct_timing,
            )?;
            write_file(out, "correction.csv", &correction_csv(&rows))?;
            for r in &rows {
                let _ = writeln!(
                    summary,
                    "{} err_all {} err_occluded {}",
                    r.method, r.err_all, r.err_occluded
                );
            }
        }
        Command::LabelQuality => {
            let train = load_dataset(&cfg.input_dataset)?;
            let test = load_dataset(&cfg.input_test_dataset)?;
            let reference = load_labels(&cfg.input_reference_labels, &train)?;
            let refined = load_labels(&cfg.input_labels, &train)?;
            let nmes = label_quality(&train, &test, &[&reference, &refined], &cfg.model, &cfg.train, cfg.seed)?;
            let mut csv = String::from("labels,label_nme,test_nme\n");
            for (name, labels, nme) in [("reference", &reference, nmes[0]), ("refined", &refined, nmes[1])] {
                let _ = writeln!(csv, "{name},{},{nme}", label_nme(&train, labels)?);
                let _ = writeln!(summary, "{name} test_nme {nme}");
            }
            write_file(out, "label_quality.csv", &csv)?;
        }
    }
    write_file(out, "summary.txt", &summary)?;
    Ok(summary)
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let cfg = match ExperimentConfig::resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("semalign {}: {e}", cli.command.name());
            return e.exit_code();
        }
    };
    println!("# semalign {} resolved configuration", cli.command.name());
    print!("{}", cfg.to_text());
    match execute(cli.command, &cfg, &cli.common.out) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("semalign {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
