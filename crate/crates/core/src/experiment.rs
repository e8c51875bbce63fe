//! End-to-end experiments on the synthetic benchmark: generate data, train
//! each configuration for each seed, and reduce the saved test predictions
//! into a report.
//!
//! Results directory layout:
//!
//! ```text
//! experiment.toml                       resolved spec
//! seed-<s>/test_labels.csv              clean test labels
//! seed-<s>/<config>/log.csv             per-epoch training log
//! seed-<s>/<config>/checkpoint.bin      best-validation parameters
//! seed-<s>/<config>/test_predictions.csv
//! seed-<s>/<config>/error.txt           only when the run failed
//! report.csv, report.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{compute_class_weights, compute_correlation, measure_noise_profile, ClassWeights, LabelMatrix};
use crate::losses::{CompositeConfig, CorrelationPrior, CorrelationSource, Targets};
use crate::metrics::{auc, bootstrap_ci, delong_test, dice_iou};
use crate::normalization::{normalize, GrayImage, WindowConfig};
use crate::synth::{generate, GeneratorConfig, SyntheticDataset};
use crate::trainer::{downsample_masks, train, upsample_bilinear, Heads, ModelState, SplitData, TrainConfig, TrainingLog, DECODER_SIDE};

/// Feature images are downsampled to this side length.
pub const FEATURE_SIDE: usize = 16;

/// Optional parts of a training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Components {
    pub normalize: bool,
    pub segmentation: bool,
    pub localization: bool,
    pub noise: bool,
    pub correlation: bool,
}

impl Components {
    /// Parses `baseline`, `all`, `all-noise`, `all-corr`, or any sequence
    /// of `+norm`, `+seg`, `+loc`, `+noise`, `+corr` (e.g. `+norm+noise`).
    pub fn from_name(name: &str) -> Result<Self> {
        let anatomy = Self {
            normalize: true,
            segmentation: true,
            localization: true,
            ..Self::default()
        };
        match name {
            "baseline" => return Ok(Self::default()),
            "all-noise" => return Ok(Self { noise: true, ..anatomy }),
            "all-corr" => return Ok(Self { correlation: true, ..anatomy }),
            "all" => {
                return Ok(Self {
                    noise: true,
                    correlation: true,
                    ..anatomy
                })
            }
            _ => {}
        }
        let rest = name
            .strip_prefix('+')
            .ok_or_else(|| Error::Invalid(format!("unknown configuration `{name}`")))?;
        let mut c = Self::default();
        for part in rest.split('+') {
            let flag = match part {
                "norm" => &mut c.normalize,
                "seg" => &mut c.segmentation,
                "loc" => &mut c.localization,
                "noise" => &mut c.noise,
                "corr" => &mut c.correlation,
                _ => return Err(Error::Invalid(format!("unknown component `{part}` in `{name}`"))),
            };
            if *flag {
                return Err(Error::Invalid(format!("component `{part}` repeated in `{name}`")));
            }
            *flag = true;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 10_000,
            validation: 2_000,
            test: 2_000,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Weights of the optional loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub lambda_noise: f64,
    pub correlation_source: CorrelationSource,
    pub correlation_scale: f64,
    pub alpha_segmentation: f64,
    pub alpha_localization: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda_noise: crate::labels::NoiseProfile::DEFAULT_LAMBDA,
            correlation_source: CorrelationSource::Covariance,
            correlation_scale: 1.0,
            alpha_segmentation: 1.0,
            alpha_localization: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub bootstrap_replicates: usize,
    pub confidence: f64,
    /// Configuration the p-values compare against.
    pub reference: String,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            bootstrap_replicates: 1000,
            confidence: 0.95,
            reference: "baseline".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub configurations: Vec<String>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub split: SplitSizes,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
}

fn default_replications() -> usize {
    1
}

fn toml_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replications as u64).map(|r| self.base_seed + r).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.configurations.is_empty() {
            return Err(Error::Invalid("experiment needs at least one configuration".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.configurations {
            Components::from_name(name)?;
            if !seen.insert(name) {
                return Err(Error::Invalid(format!("configuration `{name}` listed twice")));
            }
        }
        if self.replications == 0 {
            return Err(Error::Invalid("replications must be at least 1".into()));
        }
        if self.split.train == 0 || self.split.validation == 0 || self.split.test == 0 {
            return Err(Error::Invalid("every split needs at least one sample".into()));
        }
        if !self.generator.image_size.is_multiple_of(FEATURE_SIDE) || !self.generator.image_size.is_multiple_of(DECODER_SIDE) {
            return Err(Error::Invalid(format!(
                "image size {} must be a multiple of {FEATURE_SIDE}",
                self.generator.image_size
            )));
        }
        self.training.validate(self.split.train)?;
        let mut g = self.generator.clone();
        g.n_samples = self.split.total();
        g.validate()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| toml_error(origin, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Flattens each image to its `FEATURE_SIDE x FEATURE_SIDE` block means.
/// With `window` set, each image is first normalized; otherwise every pixel
/// is divided by `raw_scale`.
pub fn image_features(images: &[&GrayImage], window: Option<&WindowConfig>, raw_scale: f64) -> Result<Array2<f64>> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("no images".into()));
    };
    let side = first.width();
    if side % FEATURE_SIDE != 0 {
        return Err(Error::Shape(format!("image side {side} is not a multiple of {FEATURE_SIDE}")));
    }
    let mut out = Array2::zeros((images.len(), FEATURE_SIDE * FEATURE_SIDE));
    for (i, img) in images.iter().enumerate() {
        if img.width() != side || img.height() != side {
            return Err(Error::Shape(format!("image {i} is {}x{}", img.width(), img.height())));
        }
        let prepared = match window {
            Some(cfg) => normalize(img, cfg)?,
            None => img.map(|v| v / raw_scale)?,
        };
        let small = prepared.downsample(side / FEATURE_SIDE);
        for (o, v) in out.row_mut(i).iter_mut().zip(small.pixels()) {
            *o = *v;
        }
    }
    Ok(out)
}

/// Largest raw intensity over a set of images, the fixed scale used when
/// normalization is off.
pub fn raw_intensity_scale(images: &[&GrayImage]) -> f64 {
    images
        .iter()
        .map(|img| img.min_max().1)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
}

/// One generated replicate, split into train / validation / test rows.
pub struct PreparedData {
    pub dataset: SyntheticDataset,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    raw_scale: f64,
    features_raw: Option<Array2<f64>>,
    features_normalized: Option<Array2<f64>>,
    segmentation: Array2<f64>,
}

impl PreparedData {
    pub fn new(dataset: SyntheticDataset, split: &SplitSizes) -> Result<Self> {
        let n = dataset.true_labels.n_samples();
        if n != split.total() {
            return Err(Error::Shape(format!("{n} samples for splits totalling {}", split.total())));
        }
        let side = dataset.config.image_size;
        let mut segmentation = Array2::zeros((n, 2 * DECODER_SIDE * DECODER_SIDE));
        for (i, s) in dataset.samples.iter().enumerate() {
            let small = downsample_masks(&s.organ_masks, side, 2, DECODER_SIDE)?;
            for (o, v) in segmentation.row_mut(i).iter_mut().zip(small) {
                *o = v;
            }
        }
        let train_images: Vec<&GrayImage> = dataset.samples[..split.train].iter().map(|s| &s.image).collect();
        let raw_scale = raw_intensity_scale(&train_images);
        Ok(Self {
            raw_scale,
            dataset,
            train_rows: (0..split.train).collect(),
            validation_rows: (split.train..split.train + split.validation).collect(),
            test_rows: (split.train + split.validation..n).collect(),
            features_raw: None,
            features_normalized: None,
            segmentation,
        })
    }

    /// Divisor applied to raw intensities when normalization is off: the
    /// largest training-split pixel.
    pub fn raw_scale(&self) -> f64 {
        self.raw_scale
    }

    fn features(&mut self, normalized: bool, window: &WindowConfig) -> Result<&Array2<f64>> {
        let slot = if normalized {
            &mut self.features_normalized
        } else {
            &mut self.features_raw
        };
        if slot.is_none() {
            let images: Vec<&GrayImage> = self.dataset.samples.iter().map(|s| &s.image).collect();
            *slot = Some(image_features(&images, normalized.then_some(window), self.raw_scale)?);
        }
        Ok(slot.as_ref().expect("filled above"))
    }

    /// Training targets use the noisy labels; validation keeps both.
    fn split(&mut self, rows: &[usize], normalized: bool, window: &WindowConfig, noisy: bool) -> Result<SplitData> {
        let features = self.features(normalized, window)?.select(Axis(0), rows);
        let labels = if noisy {
            &self.dataset.noisy_labels
        } else {
            &self.dataset.true_labels
        };
        let labels = labels.select_rows(rows);
        Ok(SplitData {
            features,
            targets: Targets {
                labels: labels.labels().to_owned(),
                mask: labels.mask(),
                spatial: Some(self.dataset.spatial.select_rows(rows)),
                segmentation: Some(self.segmentation.select(Axis(0), rows)),
            },
            clean_labels: Some(self.dataset.true_labels.labels().select(Axis(0), rows)),
        })
    }

    /// Validation rows double as the calibration subset: their noisy labels
    /// are measured against the clean ones.
    fn calibration(&self) -> (LabelMatrix, LabelMatrix) {
        (
            self.dataset.noisy_labels.select_rows(&self.validation_rows),
            self.dataset.true_labels.select_rows(&self.validation_rows),
        )
    }
}

/// Builds the loss for one configuration. Class weights come from the
/// training labels; noise rates and label covariance from the calibration
/// subset.
pub fn loss_for(
    components: &Components,
    settings: &LossSettings,
    train_labels: &LabelMatrix,
    train_spatial: &crate::labels::SpatialLabelMatrix,
    calibration_noisy: &LabelMatrix,
    calibration_true: &LabelMatrix,
) -> Result<CompositeConfig> {
    let mut cfg = CompositeConfig::baseline(compute_class_weights(train_labels));
    if components.noise {
        let profile = measure_noise_profile(calibration_noisy, calibration_true)?;
        cfg.noise = Some(profile.with_lambda(settings.lambda_noise));
    }
    if components.correlation {
        let stats = compute_correlation(calibration_true)?;
        cfg.correlation =
            Some(CorrelationPrior::from_stats(&stats, settings.correlation_source).with_scale(settings.correlation_scale));
    }
    if components.segmentation {
        cfg.segmentation = Some(settings.alpha_segmentation);
    }
    if components.localization {
        cfg.localization = Some((settings.alpha_localization, ClassWeights::from_spatial(train_spatial)));
    }
    Ok(cfg)
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub model: ModelState,
    pub log: TrainingLog,
    pub test_predictions: Array2<f64>,
    /// Mean `(dice, iou)` per organ channel on the test rows, when the
    /// decoder was trained.
    pub segmentation_overlap: Option<Vec<(f64, f64)>>,
}

fn mean_overlap(pred: &Array2<f64>, truth: &[&[u8]], side: usize) -> Result<Vec<(f64, f64)>> {
    let cells = DECODER_SIDE * DECODER_SIDE;
    let mut acc = vec![(0.0, 0.0); 2];
    for (row, masks) in pred.rows().into_iter().zip(truth) {
        for (c, slot) in acc.iter_mut().enumerate() {
            let up = upsample_bilinear(row.slice(ndarray::s![c * cells..(c + 1) * cells]), DECODER_SIDE, side);
            let p: Vec<bool> = up.iter().map(|&v| v >= 0.5).collect();
            let t: Vec<bool> = masks[c * side * side..(c + 1) * side * side].iter().map(|&m| m == 1).collect();
            let o = dice_iou(&p, &t)?;
            slot.0 += o.dice;
            slot.1 += o.iou;
        }
    }
    let n = pred.nrows() as f64;
    Ok(acc.into_iter().map(|(d, i)| (d / n, i / n)).collect())
}

/// Trains one configuration on one prepared replicate and predicts its
/// test rows. The log is returned alongside any error so it can be saved.
pub fn run_configuration(
    data: &mut PreparedData,
    components: &Components,
    spec: &ExperimentSpec,
    seed: u64,
) -> (TrainingLog, Result<RunOutput>) {
    let mut log = TrainingLog::default();
    let result = (|| {
        let train_rows = data.train_rows.clone();
        let val_rows = data.validation_rows.clone();
        let test_rows = data.test_rows.clone();
        let train_split = data.split(&train_rows, components.normalize, &spec.window, true)?;
        let validation = data.split(&val_rows, components.normalize, &spec.window, true)?;
        let (cal_noisy, cal_true) = data.calibration();
        let train_labels = data.dataset.noisy_labels.select_rows(&train_rows);
        let loss = loss_for(
            components,
            &spec.loss,
            &train_labels,
            train_split.targets.spatial.as_ref().expect("synthetic data has spatial labels"),
            &cal_noisy,
            &cal_true,
        )?;
        let cfg = TrainConfig {
            seed,
            ..spec.training.clone()
        };
        let names = data.dataset.true_labels.class_names().to_vec();
        let model = train(&train_split, &validation, &loss, &cfg, &names, &mut log)?;
        let heads = Heads {
            spatial: false,
            segmentation: model.layout.segmentation > 0,
        };
        if test_rows.is_empty() {
            return Ok((model, Array2::zeros((0, names.len())), None));
        }
        let test = data.split(&test_rows, components.normalize, &spec.window, false)?;
        let preds = model.predict(test.features.view(), heads)?;
        let segmentation_overlap = match &preds.segmentation {
            Some(seg) => {
                let truth: Vec<&[u8]> = test_rows.iter().map(|&i| data.dataset.samples[i].organ_masks.as_slice()).collect();
                Some(mean_overlap(seg, &truth, data.dataset.config.image_size)?)
            }
            None => None,
        };
        Ok((model, preds.abnormality, segmentation_overlap))
    })();
    let out = result.map(|(model, test_predictions, segmentation_overlap)| RunOutput {
        model,
        log: log.clone(),
        test_predictions,
        segmentation_overlap,
    });
    (log, out)
}

/// Directory name of a configuration (`+` is spelled `plus-`).
pub fn config_dir_name(name: &str) -> String {
    name.replace('+', "plus-")
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn write_matrix_csv(path: &Path, ids: &[String], names: &[String], values: impl Fn(usize, usize) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::labels::csv_err)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(crate::labels::csv_err)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..names.len()).map(|n| values(i, n)));
        w.write_record(&row).map_err(crate::labels::csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `sample_id,<class>...` CSV of probabilities.
pub fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Invalid(format!("{}: {e}", path.display())),
        _ => crate::labels::csv_err(e),
    })?;
    let header = r.headers().map_err(crate::labels::csv_err)?.clone();
    if header.get(0) != Some("sample_id") {
        return Err(Error::parse(1, format!("{}: first column must be sample_id", path.display())));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(crate::labels::csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != names.len() + 1 {
            return Err(Error::parse(line, format!("expected {} fields, got {}", names.len() + 1, rec.len())));
        }
        ids.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("`{cell}` is not a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(line, format!("probability {v} outside [0, 1]")));
            }
            values.push(v);
        }
    }
    let m = Array2::from_shape_vec((ids.len(), names.len()), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((ids, names, m))
}

pub fn write_predictions(path: &Path, ids: &[String], names: &[String], preds: &Array2<f64>) -> Result<()> {
    write_matrix_csv(path, ids, names, |i, n| preds[[i, n]].to_string())
}

fn save_run(dir: &Path, log: &TrainingLog, out: &Result<RunOutput>, test_ids: &[String], names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    log.save(&dir.join("log.csv"))?;
    match out {
        Ok(run) => {
            run.model.save(&dir.join("checkpoint.bin"))?;
            write_predictions(&dir.join("test_predictions.csv"), test_ids, names, &run.test_predictions)?;
            if let Some(overlap) = &run.segmentation_overlap {
                let mut text = String::from("organ,dice,iou\n");
                for (organ, (d, i)) in ["lungs", "heart"].iter().zip(overlap) {
                    let _ = writeln!(text, "{organ},{d},{i}");
                }
                let p = dir.join("segmentation.csv");
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
        }
        Err(e) => {
            let p = dir.join("error.txt");
            std::fs::write(&p, format!("{e}\n")).map_err(|err| Error::io(&p, err))?;
        }
    }
    Ok(())
}

/// Runs every configuration for every seed, writes all artifacts under
/// `root` and returns the report built from them. A failing run is recorded
/// and the experiment continues.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path) -> Result<Report> {
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = root.join("experiment.toml");
    std::fs::write(&manifest, spec.to_toml()?).map_err(|e| Error::io(&manifest, e))?;
    for seed in spec.seeds() {
        let generator = GeneratorConfig {
            n_samples: spec.split.total(),
            seed,
            ..spec.generator.clone()
        };
        let mut data = PreparedData::new(generate(&generator)?, &spec.split)?;
        let sdir = seed_dir(root, seed);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let test_truth = data.dataset.true_labels.select_rows(&data.test_rows);
        test_truth.save_csv(&sdir.join("test_labels.csv"))?;
        let names = test_truth.class_names().to_vec();
        for name in &spec.configurations {
            let components = Components::from_name(name)?;
            let (log, out) = run_configuration(&mut data, &components, spec, seed);
            save_run(&sdir.join(config_dir_name(name)), &log, &out, test_truth.sample_ids(), &names)?;
        }
    }
    let report = build_report(root)?;
    report.save(root)?;
    Ok(report)
}

/// Summary of one configuration and class over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub mean_auc: f64,
    pub sd_auc: f64,
    /// AUC of the predictions pooled over seeds.
    pub pooled_auc: f64,
    pub ci: (f64, f64),
    /// DeLong p-value against the reference configuration on pooled
    /// predictions; `None` for the reference itself.
    pub p_value: Option<f64>,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigResult {
    Ok { cells: Vec<ReportCell>, sources: Vec<PathBuf> },
    Failed { reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub class_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub reference: String,
    pub configurations: Vec<(String, ConfigResult)>,
    /// Pooled predictions per configuration, kept for further tests.
    pub pooled: BTreeMap<String, Array2<f64>>,
    pub pooled_labels: Array2<u8>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Reduces a results directory written by [`run_experiment`]. Reads only
/// files, so it can be re-run on its own.
pub fn build_report(root: &Path) -> Result<Report> {
    let manifest = root.join("experiment.toml");
    if !manifest.exists() {
        return Err(Error::NoResults(root.to_path_buf()));
    }
    let spec = ExperimentSpec::load(&manifest)?;
    let seeds = spec.seeds();
    let mut truths = Vec::new();
    for &seed in &seeds {
        let p = seed_dir(root, seed).join("test_labels.csv");
        if !p.exists() {
            return Err(Error::NoResults(root.to_path_buf()));
        }
        truths.push(LabelMatrix::load_csv(&p)?);
    }
    let class_names = truths[0].class_names().to_vec();
    let d = class_names.len();
    let views: Vec<_> = truths.iter().map(|t| t.labels()).collect();
    let pooled_labels = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;

    let mut loaded: Vec<(String, std::result::Result<(Vec<Array2<f64>>, Vec<PathBuf>), Vec<String>>)> = Vec::new();
    let mut found_any = false;
    for name in &spec.configurations {
        let mut preds = Vec::new();
        let mut sources = Vec::new();
        let mut reasons = Vec::new();
        for (&seed, truth) in seeds.iter().zip(&truths) {
            let rel = PathBuf::from(format!("seed-{seed}")).join(config_dir_name(name));
            let dir = root.join(&rel);
            let err = dir.join("error.txt");
            if err.exists() {
                found_any = true;
                let msg = std::fs::read_to_string(&err).map_err(|e| Error::io(&err, e))?;
                reasons.push(format!("seed {seed}: {}", msg.trim()));
                continue;
            }
            let file = dir.join("test_predictions.csv");
            if !file.exists() {
                reasons.push(format!("seed {seed}: missing {}", rel.join("test_predictions.csv").display()));
                continue;
            }
            found_any = true;
            let (ids, names, p) = read_predictions(&file)?;
            if ids != truth.sample_ids() || names != class_names {
                return Err(Error::Invalid(format!("{} does not match the test labels", file.display())));
            }
            preds.push(p);
            sources.push(rel.join("test_predictions.csv"));
        }
        loaded.push((
            name.clone(),
            if reasons.is_empty() { Ok((preds, sources)) } else { Err(reasons) },
        ));
    }
    if !found_any {
        return Err(Error::NoResults(root.to_path_buf()));
    }

    let mut pooled = BTreeMap::new();
    for (name, r) in &loaded {
        if let Ok((preds, _)) = r {
            let views: Vec<_> = preds.iter().map(|p| p.view()).collect();
            pooled.insert(
                name.clone(),
                ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?,
            );
        }
    }
    let reference = spec.evaluation.reference.clone();
    let mut configurations = Vec::new();
    for (name, r) in loaded {
        let (preds, sources) = match r {
            Ok(v) => v,
            Err(reasons) => {
                configurations.push((name, ConfigResult::Failed { reasons }));
                continue;
            }
        };
        let all = &pooled[&name];
        let mut cells = Vec::with_capacity(d);
        for n in 0..d {
            let mut per_seed = Vec::with_capacity(preds.len());
            for (p, t) in preds.iter().zip(&truths) {
                per_seed.push(auc(&p.column(n).to_vec(), &t.column(n))?.auc);
            }
            let (mean_auc, sd_auc) = mean_sd(&per_seed);
            let scores = all.column(n).to_vec();
            let labels = pooled_labels.column(n).to_vec();
            let pooled_auc = auc(&scores, &labels)?.auc;
            let ci = bootstrap_ci(
                &scores,
                &labels,
                spec.evaluation.bootstrap_replicates,
                spec.base_seed,
                spec.evaluation.confidence,
            )?;
            let p_value = match pooled.get(&reference) {
                Some(r) if name != reference => Some(delong_test(&scores, &r.column(n).to_vec(), &labels)?.p_value),
                _ => None,
            };
            cells.push(ReportCell {
                mean_auc,
                sd_auc,
                pooled_auc,
                ci,
                p_value,
                per_seed,
            });
        }
        configurations.push((name, ConfigResult::Ok { cells, sources }));
    }
    Ok(Report {
        class_names,
        seeds,
        reference,
        configurations,
        pooled,
        pooled_labels,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

impl Report {
    pub fn cells(&self, configuration: &str) -> Option<&[ReportCell]> {
        self.configurations.iter().find_map(|(n, r)| match r {
            ConfigResult::Ok { cells, .. } if n == configuration => Some(cells.as_slice()),
            _ => None,
        })
    }

    /// Mean over classes of the per-class mean AUC.
    pub fn average_auc(&self, configuration: &str) -> Option<f64> {
        let cells = self.cells(configuration)?;
        Some(cells.iter().map(|c| c.mean_auc).sum::<f64>() / cells.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("configuration,class,mean_auc,sd_auc,pooled_auc,ci_low,ci_high,p_value,status,sources\n");
        for (name, r) in &self.configurations {
            match r {
                ConfigResult::Ok { cells, sources } => {
                    let src = sources.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";");
                    for (class, c) in self.class_names.iter().zip(cells) {
                        let _ = writeln!(
                            s,
                            "{name},{class},{},{},{},{},{},{},ok,{src}",
                            c.mean_auc,
                            c.sd_auc,
                            c.pooled_auc,
                            c.ci.0,
                            c.ci.1,
                            opt(c.p_value)
                        );
                    }
                }
                ConfigResult::Failed { reasons } => {
                    let why = reasons.join(" | ").replace(',', ";").replace('\n', " ");
                    for class in &self.class_names {
                        let _ = writeln!(s, "{name},{class},NA,NA,NA,NA,NA,NA,failed,{why}");
                    }
                }
            }
        }
        s
    }

    /// Classes as rows, configurations as columns (mean test AUC over seeds),
    /// then the DeLong p-value of the best configuration against the
    /// reference.
    pub fn to_table(&self) -> String {
        let names: Vec<&str> = self.configurations.iter().map(|(n, _)| n.as_str()).collect();
        let first = self.class_names.iter().map(|c| c.len()).max().unwrap_or(0).max("Abnormality".len());
        let col = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<first$}", "Abnormality");
        for n in &names {
            let _ = write!(s, "  {n:>col$}");
        }
        let _ = writeln!(s, "  {:>col$}", "p-value");
        let mut rows: Vec<(String, Vec<Option<f64>>, Option<f64>)> = Vec::new();
        for (k, class) in self.class_names.iter().enumerate() {
            let values: Vec<Option<f64>> = names.iter().map(|n| self.cells(n).map(|c| c[k].mean_auc)).collect();
            let best = values
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, v)))
                .fold(None, |b: Option<(usize, f64)>, (i, v)| match b {
                    Some((_, bv)) if bv >= v => b,
                    _ => Some((i, v)),
                });
            let p = best.and_then(|(i, _)| self.cells(names[i]).and_then(|c| c[k].p_value));
            rows.push((class.clone(), values, p));
        }
        let averages: Vec<Option<f64>> = names.iter().map(|n| self.average_auc(n)).collect();
        rows.push(("Average".into(), averages, None));
        for (label, values, p) in rows {
            let _ = write!(s, "{label:<first$}");
            for v in values {
                let cell = v.map_or_else(|| "failed".to_string(), |x| format!("{x:.4}"));
                let _ = write!(s, "  {cell:>col$}");
            }
            let cell = p.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(s, "  {cell:>col$}");
        }
        let _ = writeln!(
            s,
            "\nMean test AUC over seeds {:?}; p-value: DeLong test of the best configuration vs {} on pooled predictions.",
            self.seeds, self.reference
        );
        s
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for (file, text) in [("report.csv", self.to_csv()), ("report.txt", self.to_table())] {
            let p = root.join(file);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
