//! Multi-label datasets and the statistics derived from them: class-balance
//! weights, label-noise profiles and label correlation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::textfmt::Document;

/// Spatial classes, in the order used by every spatial label matrix.
pub const SPATIAL_CLASSES: [&str; 9] = [
    "Left lung",
    "Right lung",
    "Lower part",
    "Lower-middle part",
    "Middle part",
    "Upper-middle part",
    "Upper part",
    "Diffused",
    "Multiple",
];

pub const SPATIAL_CLASS_COUNT: usize = SPATIAL_CLASSES.len();

/// Dataset tag used when a matrix comes from a single source.
pub const DEFAULT_DATASET: &str = "default";

/// Binary labels for `F` samples and `D` classes.
///
/// Each sample carries a dataset tag. A tag owns a subset of the classes;
/// losses only see (sample, class) pairs owned by the sample's dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    labels: Array2<u8>,
    sample_ids: Vec<String>,
    dataset_tags: Vec<String>,
    class_names: Vec<String>,
    ownership: BTreeMap<String, Vec<bool>>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.contains([',', '=', '\n', '\r']) {
        return Err(Error::Invalid(format!("invalid {kind} name `{name}`")));
    }
    Ok(())
}

impl LabelMatrix {
    /// Single-dataset matrix with sample ids `0..F`.
    pub fn new(labels: Array2<u8>, class_names: Vec<String>) -> Result<Self> {
        let f = labels.nrows();
        let d = labels.ncols();
        let ownership = BTreeMap::from([(DEFAULT_DATASET.to_string(), vec![true; d])]);
        Self::from_parts(
            labels,
            (0..f).map(|i| i.to_string()).collect(),
            vec![DEFAULT_DATASET.to_string(); f],
            class_names,
            ownership,
        )
    }

    pub fn from_parts(
        labels: Array2<u8>,
        sample_ids: Vec<String>,
        dataset_tags: Vec<String>,
        class_names: Vec<String>,
        ownership: BTreeMap<String, Vec<bool>>,
    ) -> Result<Self> {
        let (f, d) = labels.dim();
        if f == 0 || d == 0 {
            return Err(Error::Invalid(format!("label matrix must be non-empty, got {f}x{d}")));
        }
        if sample_ids.len() != f || dataset_tags.len() != f || class_names.len() != d {
            return Err(Error::Shape(format!(
                "{f}x{d} labels with {} ids, {} tags, {} class names",
                sample_ids.len(),
                dataset_tags.len(),
                class_names.len()
            )));
        }
        if let Some(((i, n), v)) = labels.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(Error::Invalid(format!("label[{i},{n}] = {v}, expected 0 or 1")));
        }
        for name in &class_names {
            check_name("class", name)?;
        }
        for (tag, owned) in &ownership {
            check_name("dataset", tag)?;
            if owned.len() != d {
                return Err(Error::Shape(format!(
                    "dataset `{tag}` ownership has {} entries for {d} classes",
                    owned.len()
                )));
            }
            if !owned.iter().any(|&o| o) {
                return Err(Error::Invalid(format!("dataset `{tag}` owns no classes")));
            }
        }
        for tag in &dataset_tags {
            if !ownership.contains_key(tag) {
                return Err(Error::Invalid(format!("dataset tag `{tag}` has no class ownership")));
            }
        }
        Ok(Self {
            labels,
            sample_ids,
            dataset_tags,
            class_names,
            ownership,
        })
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn n_samples(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn dataset_tags(&self) -> &[String] {
        &self.dataset_tags
    }

    pub fn ownership(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.ownership
    }

    pub fn get(&self, sample: usize, class: usize) -> u8 {
        self.labels[[sample, class]]
    }

    pub fn owns(&self, sample: usize, class: usize) -> bool {
        self.ownership[&self.dataset_tags[sample]][class]
    }

    /// `F x D` mask of the (sample, class) pairs owned by each sample's dataset.
    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn(self.labels.dim(), |(i, n)| self.owns(i, n))
    }

    pub fn column(&self, class: usize) -> Vec<u8> {
        self.labels.column(class).to_vec()
    }

    /// Replaces dataset tags and class ownership.
    pub fn with_datasets(
        self,
        dataset_tags: Vec<String>,
        ownership: BTreeMap<String, Vec<bool>>,
    ) -> Result<Self> {
        Self::from_parts(
            self.labels,
            self.sample_ids,
            dataset_tags,
            self.class_names,
            ownership,
        )
    }

    pub fn with_sample_ids(self, sample_ids: Vec<String>) -> Result<Self> {
        Self::from_parts(
            self.labels,
            sample_ids,
            self.dataset_tags,
            self.class_names,
            self.ownership,
        )
    }

    /// Sub-matrix with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            labels: self.labels.select(Axis(0), rows),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            dataset_tags: rows.iter().map(|&i| self.dataset_tags[i].clone()).collect(),
            class_names: self.class_names.clone(),
            ownership: self.ownership.clone(),
        }
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn labels_f64(&self) -> Array2<f64> {
        self.labels.mapv(f64::from)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string(), "dataset_tag".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.labels.rows().into_iter().enumerate() {
            let mut rec = vec![self.sample_ids[i].clone(), self.dataset_tags[i].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Parses the CSV layout written by [`LabelMatrix::write_csv`].
    ///
    /// Every dataset tag found in the file owns all classes.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "dataset_tag" {
            return Err(Error::parse(
                1,
                "header must be `sample_id,dataset_tag,<class names...>`",
            ));
        }
        let class_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let d = class_names.len();
        let mut ids = Vec::new();
        let mut tags = Vec::new();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != d + 2 {
                return Err(Error::parse(line, format!("expected {} fields, found {}", d + 2, rec.len())));
            }
            ids.push(rec[0].to_string());
            tags.push(rec[1].to_string());
            for (col, cell) in rec.iter().skip(2).enumerate() {
                match cell.trim() {
                    "0" => data.push(0u8),
                    "1" => data.push(1u8),
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("column `{}`: `{other}` is not 0 or 1", class_names[col]),
                        ))
                    }
                }
            }
        }
        let f = ids.len();
        let labels = Array2::from_shape_vec((f, d), data).map_err(|e| Error::Shape(e.to_string()))?;
        let ownership = tags
            .iter()
            .map(|t| (t.clone(), vec![true; d]))
            .collect::<BTreeMap<_, _>>();
        Self::from_parts(labels, ids, tags, class_names, ownership)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

/// Positive/negative class-balance weights `w = (P + N) / P` and `(P + N) / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
    pub pos_count: Vec<usize>,
    pub neg_count: Vec<usize>,
    /// Classes with no positives or no negatives. Their weights are 1 and
    /// losses skip them.
    pub degenerate: Vec<bool>,
}

impl ClassWeights {
    pub fn from_counts(pos_count: Vec<usize>, neg_count: Vec<usize>) -> Self {
        assert_eq!(pos_count.len(), neg_count.len());
        let mut w_pos = Vec::with_capacity(pos_count.len());
        let mut w_neg = Vec::with_capacity(pos_count.len());
        let mut degenerate = Vec::with_capacity(pos_count.len());
        for (&p, &n) in pos_count.iter().zip(&neg_count) {
            if p == 0 || n == 0 {
                w_pos.push(1.0);
                w_neg.push(1.0);
                degenerate.push(true);
            } else {
                let total = (p + n) as f64;
                w_pos.push(total / p as f64);
                w_neg.push(total / n as f64);
                degenerate.push(false);
            }
        }
        Self {
            w_pos,
            w_neg,
            pos_count,
            neg_count,
            degenerate,
        }
    }

    /// Unit weights for `d` classes, none degenerate.
    pub fn unit(d: usize) -> Self {
        Self {
            w_pos: vec![1.0; d],
            w_neg: vec![1.0; d],
            pos_count: vec![0; d],
            neg_count: vec![0; d],
            degenerate: vec![false; d],
        }
    }

    pub fn len(&self) -> usize {
        self.w_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_pos.is_empty()
    }

    /// Weights over the rows of `spatial` that carry any spatial supervision.
    pub fn from_spatial(spatial: &SpatialLabelMatrix) -> Self {
        let mut pos = vec![0usize; SPATIAL_CLASS_COUNT];
        let mut neg = vec![0usize; SPATIAL_CLASS_COUNT];
        for i in 0..spatial.n_samples() {
            if !spatial.row_available(i) {
                continue;
            }
            for m in 0..SPATIAL_CLASS_COUNT {
                if spatial.labels[[i, m]] == 1 {
                    pos[m] += 1;
                } else {
                    neg[m] += 1;
                }
            }
        }
        Self::from_counts(pos, neg)
    }
}

/// Class weights counted over the (sample, class) pairs owned by each
/// sample's dataset; with a single dataset the counts of every class sum to `F`.
pub fn compute_class_weights(labels: &LabelMatrix) -> ClassWeights {
    let d = labels.n_classes();
    let mut pos = vec![0usize; d];
    let mut neg = vec![0usize; d];
    for i in 0..labels.n_samples() {
        for n in 0..d {
            if !labels.owns(i, n) {
                continue;
            }
            if labels.get(i, n) == 1 {
                pos[n] += 1;
            } else {
                neg[n] += 1;
            }
        }
    }
    ClassWeights::from_counts(pos, neg)
}

/// Normalization used for covariance. Only the population form is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceConvention {
    /// Divide by `F`.
    Population,
}

impl CovarianceConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovarianceConvention::Population => "population",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStats {
    pub class_names: Vec<String>,
    pub pearson: Array2<f64>,
    pub covariance: Array2<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    /// Zero-variance classes; their Pearson entries are 0.
    pub degenerate: Vec<bool>,
    pub convention: CovarianceConvention,
}

impl CorrelationStats {
    /// Population Pearson correlation and covariance of the columns of `data`.
    pub fn from_columns(data: ArrayView2<'_, f64>, class_names: Vec<String>) -> Result<Self> {
        let (f, d) = data.dim();
        if f < 2 {
            return Err(Error::Invalid(format!("correlation needs at least 2 samples, got {f}")));
        }
        if class_names.len() != d {
            return Err(Error::Shape(format!("{d} columns with {} class names", class_names.len())));
        }
        let nf = f as f64;
        let means: Vec<f64> = (0..d).map(|n| data.column(n).sum() / nf).collect();
        let mut covariance = Array2::<f64>::zeros((d, d));
        for n in 0..d {
            for r in n..d {
                let mut acc = 0.0;
                for i in 0..f {
                    acc += (data[[i, n]] - means[n]) * (data[[i, r]] - means[r]);
                }
                let c = acc / nf;
                covariance[[n, r]] = c;
                covariance[[r, n]] = c;
            }
        }
        let stddevs: Vec<f64> = (0..d).map(|n| covariance[[n, n]].sqrt()).collect();
        let degenerate: Vec<bool> = stddevs.iter().map(|&s| s == 0.0).collect();
        let mut pearson = Array2::<f64>::zeros((d, d));
        for n in 0..d {
            for r in 0..d {
                if degenerate[n] || degenerate[r] {
                    continue;
                }
                pearson[[n, r]] = if n == r {
                    1.0
                } else {
                    (covariance[[n, r]] / (stddevs[n] * stddevs[r])).clamp(-1.0, 1.0)
                };
            }
        }
        Ok(Self {
            class_names,
            pearson,
            covariance,
            means,
            stddevs,
            degenerate,
            convention: CovarianceConvention::Population,
        })
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::new();
        doc.set("kind", "correlation")
            .set("classes", self.class_names.join(","))
            .set("covariance_convention", self.convention.as_str());
        doc.set_vector("means", &self.means)
            .set_vector("stddevs", &self.stddevs)
            .set_vector("degenerate", &bools_to_f64(&self.degenerate))
            .set_block("pearson", self.pearson.clone())
            .set_block("covariance", self.covariance.clone());
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        expect_kind(doc, "correlation")?;
        match doc.require("covariance_convention")? {
            "population" => {}
            other => return Err(Error::Invalid(format!("unknown covariance convention `{other}`"))),
        }
        let class_names = split_names(doc.require("classes")?);
        let d = class_names.len();
        let pearson = doc.require_block("pearson")?.clone();
        let covariance = doc.require_block("covariance")?.clone();
        let means = doc.require_vector("means")?;
        let stddevs = doc.require_vector("stddevs")?;
        let degenerate = f64_to_bools(&doc.require_vector("degenerate")?);
        if pearson.dim() != (d, d)
            || covariance.dim() != (d, d)
            || means.len() != d
            || stddevs.len() != d
            || degenerate.len() != d
        {
            return Err(Error::Shape(format!("correlation blocks disagree with {d} classes")));
        }
        Ok(Self {
            class_names,
            pearson,
            covariance,
            means,
            stddevs,
            degenerate,
            convention: CovarianceConvention::Population,
        })
    }
}

pub fn compute_correlation(labels: &LabelMatrix) -> Result<CorrelationStats> {
    CorrelationStats::from_columns(labels.labels_f64().view(), labels.class_names().to_vec())
}

/// Per-class label quality of a noisy label source measured against trusted
/// labels, and the regularization weights derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    pub class_names: Vec<String>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    /// `1 - sensitivity`
    pub f_pos: Vec<f64>,
    /// `1 - specificity`
    pub f_neg: Vec<f64>,
    pub lambda_noise: f64,
    /// Classes present in the calibration set; the others get no regularization.
    pub active: Vec<bool>,
}

impl NoiseProfile {
    pub const DEFAULT_LAMBDA: f64 = 0.1;

    pub fn from_rates(
        class_names: Vec<String>,
        sensitivity: Vec<f64>,
        specificity: Vec<f64>,
        lambda_noise: f64,
    ) -> Result<Self> {
        let d = class_names.len();
        if sensitivity.len() != d || specificity.len() != d {
            return Err(Error::Shape(format!(
                "{d} classes with {} sensitivities and {} specificities",
                sensitivity.len(),
                specificity.len()
            )));
        }
        for &v in sensitivity.iter().chain(&specificity) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("rate {v} outside [0, 1]")));
            }
        }
        if !(lambda_noise >= 0.0 && lambda_noise.is_finite()) {
            return Err(Error::Invalid(format!("lambda_noise must be >= 0, got {lambda_noise}")));
        }
        Ok(Self {
            f_pos: sensitivity.iter().map(|s| 1.0 - s).collect(),
            f_neg: specificity.iter().map(|s| 1.0 - s).collect(),
            class_names,
            sensitivity,
            specificity,
            lambda_noise,
            active: vec![true; d],
        })
    }

    pub fn with_lambda(mut self, lambda_noise: f64) -> Self {
        self.lambda_noise = lambda_noise;
        self
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::new();
        doc.set("kind", "noise_profile")
            .set("classes", self.class_names.join(","))
            .set("lambda_noise", self.lambda_noise);
        doc.set_vector("sensitivity", &self.sensitivity)
            .set_vector("specificity", &self.specificity)
            .set_vector("f_pos", &self.f_pos)
            .set_vector("f_neg", &self.f_neg)
            .set_vector("active", &bools_to_f64(&self.active));
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        expect_kind(doc, "noise_profile")?;
        let class_names = split_names(doc.require("classes")?);
        let mut profile = Self::from_rates(
            class_names,
            doc.require_vector("sensitivity")?,
            doc.require_vector("specificity")?,
            doc.require_f64("lambda_noise")?,
        )?;
        let active = f64_to_bools(&doc.require_vector("active")?);
        if active.len() != profile.len() {
            return Err(Error::Shape("`active` length disagrees with classes".into()));
        }
        for (n, &a) in active.iter().enumerate() {
            if !a {
                profile.deactivate(n);
            }
        }
        Ok(profile)
    }

    fn deactivate(&mut self, class: usize) {
        self.active[class] = false;
    }
}

/// Sensitivity `TP/P` and specificity `TN/N` of `original` against `reread`,
/// which is taken as the truth.
///
/// Rows are matched by sample id, so `reread` may cover any subset of
/// `original`. A class with no positives or no negatives in `reread` is
/// marked inactive.
pub fn measure_noise_profile(original: &LabelMatrix, reread: &LabelMatrix) -> Result<NoiseProfile> {
    if original.class_names() != reread.class_names() {
        return Err(Error::Shape("original and reread label classes differ".into()));
    }
    let d = reread.n_classes();
    let index = original.index_by_id();
    let mut tp = vec![0usize; d];
    let mut p = vec![0usize; d];
    let mut tn = vec![0usize; d];
    let mut neg = vec![0usize; d];
    for (j, id) in reread.sample_ids().iter().enumerate() {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("reread sample `{id}` not in original labels")))?;
        for n in 0..d {
            let orig = original.get(i, n);
            if reread.get(j, n) == 1 {
                p[n] += 1;
                tp[n] += usize::from(orig == 1);
            } else {
                neg[n] += 1;
                tn[n] += usize::from(orig == 0);
            }
        }
    }
    let sens: Vec<f64> = (0..d).map(|n| ratio(tp[n], p[n])).collect();
    let spec: Vec<f64> = (0..d).map(|n| ratio(tn[n], neg[n])).collect();
    let mut profile = NoiseProfile::from_rates(
        reread.class_names().to_vec(),
        sens,
        spec,
        NoiseProfile::DEFAULT_LAMBDA,
    )?;
    for n in 0..d {
        if p[n] == 0 || neg[n] == 0 {
            profile.deactivate(n);
        }
    }
    Ok(profile)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn expect_kind(doc: &Document, kind: &str) -> Result<()> {
    match doc.require("kind")? {
        k if k == kind => Ok(()),
        other => Err(Error::Invalid(format!("expected a `{kind}` file, found `{other}`"))),
    }
}

fn split_names(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).collect()
}

fn bools_to_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn f64_to_bools(v: &[f64]) -> Vec<bool> {
    v.iter().map(|&x| x != 0.0).collect()
}

/// Spatial labels (one column per entry of [`SPATIAL_CLASSES`]) and the
/// per-abnormality availability of spatial supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLabelMatrix {
    pub labels: Array2<u8>,
    pub available: Array2<bool>,
}

impl SpatialLabelMatrix {
    pub fn new(labels: Array2<u8>, available: Array2<bool>) -> Result<Self> {
        if labels.ncols() != SPATIAL_CLASS_COUNT {
            return Err(Error::Shape(format!(
                "spatial labels need {SPATIAL_CLASS_COUNT} columns, got {}",
                labels.ncols()
            )));
        }
        if labels.nrows() != available.nrows() {
            return Err(Error::Shape(format!(
                "{} spatial rows with {} availability rows",
                labels.nrows(),
                available.nrows()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("spatial labels must be 0 or 1".into()));
        }
        Ok(Self { labels, available })
    }

    /// No spatial supervision for any of `f` samples over `d` abnormalities.
    pub fn unavailable(f: usize, d: usize) -> Self {
        Self {
            labels: Array2::zeros((f, SPATIAL_CLASS_COUNT)),
            available: Array2::from_elem((f, d), false),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.labels.nrows()
    }

    /// Whether sample `i` carries spatial supervision for any abnormality.
    pub fn row_available(&self, i: usize) -> bool {
        self.available.row(i).iter().any(|&a| a)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            labels: self.labels.select(Axis(0), rows),
            available: self.available.select(Axis(0), rows),
        }
    }

    /// CSV with `sample_id`, the spatial classes, then one
    /// `available:<class>` column per abnormality.
    pub fn write_csv<W: Write>(&self, writer: W, sample_ids: &[String], class_names: &[String]) -> Result<()> {
        if sample_ids.len() != self.n_samples() || class_names.len() != self.available.ncols() {
            return Err(Error::Shape("spatial csv ids/classes disagree with matrix".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(SPATIAL_CLASSES.iter().map(|s| s.to_string()));
        header.extend(class_names.iter().map(|c| format!("available:{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n_samples() {
            let mut rec = vec![sample_ids[i].clone()];
            rec.extend(self.labels.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.available.row(i).iter().map(|&a| u8::from(a).to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<(Self, Vec<String>)> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.len().saturating_sub(1 + SPATIAL_CLASS_COUNT);
        if header.len() < 1 + SPATIAL_CLASS_COUNT || &header[0] != "sample_id" {
            return Err(Error::parse(1, "unexpected spatial csv header"));
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut available = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != header.len() {
                return Err(Error::parse(line, "wrong number of fields"));
            }
            ids.push(rec[0].to_string());
            for (k, cell) in rec.iter().skip(1).enumerate() {
                let v = match cell {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => return Err(Error::parse(line, format!("`{other}` is not 0 or 1"))),
                };
                if k < SPATIAL_CLASS_COUNT {
                    labels.push(v);
                } else {
                    available.push(v == 1);
                }
            }
        }
        let f = ids.len();
        let labels = Array2::from_shape_vec((f, SPATIAL_CLASS_COUNT), labels)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let available =
            Array2::from_shape_vec((f, d), available).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((Self::new(labels, available)?, ids))
    }
}
