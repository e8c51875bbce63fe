//! Training objectives and their analytic gradients with respect to the
//! predicted probabilities.
//!
//! Every loss is a plain sum over samples. Callers that want a per-sample
//! mean divide afterwards with [`LossResult::scaled`], so reference
//! implementations can be compared against the undivided sums.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::labels::{ClassWeights, CorrelationStats, NoiseProfile, SpatialLabelMatrix, SPATIAL_CLASS_COUNT};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `F x D` abnormality probabilities.
    pub abnormality: Array2<f64>,
    /// `F x L` spatial class probabilities.
    pub spatial: Option<Array2<f64>>,
    /// `F x t` segmentation probabilities, `t = 2 * N' * N'`.
    pub segmentation: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_abnormality: Option<Array2<f64>>,
    pub grad_spatial: Option<Array2<f64>>,
    pub grad_segmentation: Option<Array2<f64>>,
    /// Contribution of each output class (abnormality classes, or spatial
    /// classes for [`spatial_loss`]; empty for [`segmentation_mse`]).
    pub per_class: Vec<f64>,
}

impl LossResult {
    /// Multiplies the value and every gradient by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        for g in [
            &mut self.grad_abnormality,
            &mut self.grad_spatial,
            &mut self.grad_segmentation,
        ]
        .into_iter()
        .flatten()
        {
            g.mapv_inplace(|v| v * factor);
        }
        self.per_class.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// `-ln p` and its derivative in `p`, evaluated at the clamped probability.
#[inline]
fn neg_log(p: f64) -> (f64, f64) {
    let p = clamp_prob(p);
    (-p.ln(), -1.0 / p)
}

/// `-ln(1 - p)` and its derivative in `p`.
#[inline]
fn neg_log_complement(p: f64) -> (f64, f64) {
    let p = clamp_prob(p);
    (-(1.0 - p).ln(), 1.0 / (1.0 - p))
}

/// Weighted binary cross entropy of a single entry: value and d/dp.
#[inline]
fn bce_entry(p: f64, label: u8, w_pos: f64, w_neg: f64) -> (f64, f64) {
    if label == 1 {
        let (v, g) = neg_log(p);
        (w_pos * v, w_pos * g)
    } else {
        let (v, g) = neg_log_complement(p);
        (w_neg * v, w_neg * g)
    }
}

fn check_shapes(pred: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>, weights: &ClassWeights, mask: ArrayView2<'_, bool>) -> Result<()> {
    if pred.dim() != labels.dim() || pred.dim() != mask.dim() || weights.len() != pred.ncols() {
        return Err(Error::Shape(format!(
            "predictions {:?}, labels {:?}, mask {:?}, {} class weights",
            pred.dim(),
            labels.dim(),
            mask.dim(),
            weights.len()
        )));
    }
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(())
}

/// Class-weighted binary cross entropy summed over the masked entries.
///
/// Degenerate classes (see [`ClassWeights::degenerate`]) are skipped.
/// Masked-out entries receive a gradient of exactly zero.
pub fn weighted_bce(
    pred: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: &ClassWeights,
    mask: ArrayView2<'_, bool>,
) -> Result<LossResult> {
    check_shapes(pred, labels, weights, mask)?;
    let (f, d) = pred.dim();
    let mut grad = Array2::zeros((f, d));
    let mut per_class = vec![0.0; d];
    for i in 0..f {
        for n in 0..d {
            if !mask[[i, n]] || weights.degenerate[n] {
                continue;
            }
            let (v, g) = bce_entry(pred[[i, n]], labels[[i, n]], weights.w_pos[n], weights.w_neg[n]);
            per_class[n] += v;
            grad[[i, n]] = g;
        }
    }
    Ok(LossResult {
        value: per_class.iter().sum(),
        grad_abnormality: Some(grad),
        grad_spatial: None,
        grad_segmentation: None,
        per_class,
    })
}

fn add_noise_regularizer(
    acc: &mut LossResult,
    pred: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: &ClassWeights,
    noise: &NoiseProfile,
    mask: ArrayView2<'_, bool>,
) -> Result<()> {
    let (f, d) = pred.dim();
    if noise.len() != d {
        return Err(Error::Shape(format!("noise profile has {} classes, predictions {d}", noise.len())));
    }
    let lambda = noise.lambda_noise;
    if lambda == 0.0 {
        return Ok(());
    }
    let grad = acc.grad_abnormality.as_mut().expect("abnormality gradient present");
    let mut added = vec![0.0; d];
    for i in 0..f {
        for n in 0..d {
            if !mask[[i, n]] || weights.degenerate[n] || !noise.active[n] {
                continue;
            }
            // pushes toward the opposite of the given label, by how often that label is wrong
            let (v, g) = if labels[[i, n]] == 1 {
                let (v, g) = neg_log_complement(pred[[i, n]]);
                let k = lambda * noise.f_neg[n] * weights.w_pos[n];
                (k * v, k * g)
            } else {
                let (v, g) = neg_log(pred[[i, n]]);
                let k = lambda * noise.f_pos[n] * weights.w_neg[n];
                (k * v, k * g)
            };
            added[n] += v;
            grad[[i, n]] += g;
        }
    }
    for (total, a) in acc.per_class.iter_mut().zip(&added) {
        *total += a;
    }
    acc.value += added.iter().sum::<f64>();
    Ok(())
}

/// Weighted BCE plus the label-noise prior: for each entry labelled 0 a
/// penalty `lambda * f_pos * w_neg * (-ln p)`, and for each entry labelled 1
/// a penalty `lambda * f_neg * w_pos * (-ln(1 - p))`. Inactive classes get no
/// penalty.
pub fn noise_regularized_loss(
    pred: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: &ClassWeights,
    noise: &NoiseProfile,
    mask: ArrayView2<'_, bool>,
) -> Result<LossResult> {
    let mut out = weighted_bce(pred, labels, weights, mask)?;
    add_noise_regularizer(&mut out, pred, labels, weights, noise, mask)?;
    Ok(out)
}

/// Which label statistic couples the classes in the correlation prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationSource {
    Covariance,
    Pearson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPrior {
    /// `D x D` coupling matrix; only off-diagonal entries are used.
    pub matrix: Array2<f64>,
    /// Overall multiplier of the coupling term.
    pub scale: f64,
    /// Classes present in the calibration set.
    pub active: Vec<bool>,
}

impl CorrelationPrior {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape(format!("coupling matrix is {:?}", matrix.dim())));
        }
        let d = matrix.nrows();
        Ok(Self {
            matrix,
            scale: 1.0,
            active: vec![true; d],
        })
    }

    pub fn from_stats(stats: &CorrelationStats, source: CorrelationSource) -> Self {
        let matrix = match source {
            CorrelationSource::Covariance => stats.covariance.clone(),
            CorrelationSource::Pearson => stats.pearson.clone(),
        };
        let d = matrix.nrows();
        Self {
            matrix,
            scale: 1.0,
            active: vec![true; d],
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

fn add_correlation_regularizer(
    acc: &mut LossResult,
    pred: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: &ClassWeights,
    prior: &CorrelationPrior,
    mask: ArrayView2<'_, bool>,
) -> Result<()> {
    let (f, d) = pred.dim();
    if prior.matrix.dim() != (d, d) || prior.active.len() != d {
        return Err(Error::Shape(format!(
            "coupling matrix {:?} for {d} classes",
            prior.matrix.dim()
        )));
    }
    if prior.scale == 0.0 {
        return Ok(());
    }
    let grad = acc.grad_abnormality.as_mut().expect("abnormality gradient present");
    let mut added = vec![0.0; d];
    for i in 0..f {
        for r in 0..d {
            if !mask[[i, r]] || weights.degenerate[r] || !prior.active[r] {
                continue;
            }
            // sum of couplings from every other class n owned by this sample
            let mut coupling = 0.0;
            let mut any = false;
            for n in 0..d {
                let m = prior.matrix[[n, r]];
                if n == r || m == 0.0 || !mask[[i, n]] || !prior.active[n] {
                    continue;
                }
                coupling += m;
                any = true;
            }
            if !any {
                continue;
            }
            let k = prior.scale * coupling;
            let (v, g) = bce_entry(pred[[i, r]], labels[[i, r]], weights.w_pos[r], weights.w_neg[r]);
            added[r] += k * v;
            grad[[i, r]] += k * g;
        }
    }
    for (total, a) in acc.per_class.iter_mut().zip(&added) {
        *total += a;
    }
    acc.value += added.iter().sum::<f64>();
    Ok(())
}

/// Weighted BCE plus the label-correlation prior: each class `n` adds the
/// weighted BCE of every other class `r`, scaled by `matrix[n, r]`.
/// Negative couplings subtract.
pub fn correlation_regularized_loss(
    pred: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
    weights: &ClassWeights,
    prior: &CorrelationPrior,
    mask: ArrayView2<'_, bool>,
) -> Result<LossResult> {
    let mut out = weighted_bce(pred, labels, weights, mask)?;
    add_correlation_regularizer(&mut out, pred, labels, weights, prior, mask)?;
    Ok(out)
}

/// `sum_i (1/t) sum_z (s - p)^2` over `F x t` masks.
pub fn segmentation_mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<LossResult> {
    if pred.dim() != truth.dim() || pred.ncols() == 0 {
        return Err(Error::Shape(format!(
            "segmentation prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let t = pred.ncols() as f64;
    let mut value = 0.0;
    for (p_row, s_row) in pred.rows().into_iter().zip(truth.rows()) {
        let sq: f64 = p_row.iter().zip(s_row).map(|(p, s)| (s - p) * (s - p)).sum();
        value += sq / t;
    }
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(truth)
        .for_each(|g, &p, &s| *g = 2.0 / t * (p - s));
    Ok(LossResult {
        value,
        grad_abnormality: None,
        grad_spatial: None,
        grad_segmentation: Some(grad),
        per_class: Vec::new(),
    })
}

/// Weighted BCE over the spatial classes of every sample that carries
/// spatial supervision; other samples contribute nothing.
pub fn spatial_loss(
    pred: ArrayView2<'_, f64>,
    spatial: &SpatialLabelMatrix,
    weights: &ClassWeights,
) -> Result<LossResult> {
    if pred.ncols() != SPATIAL_CLASS_COUNT
        || pred.nrows() != spatial.n_samples()
        || weights.len() != SPATIAL_CLASS_COUNT
    {
        return Err(Error::Shape(format!(
            "spatial predictions {:?} for {} samples, {} weights",
            pred.dim(),
            spatial.n_samples(),
            weights.len()
        )));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut per_class = vec![0.0; SPATIAL_CLASS_COUNT];
    for i in 0..pred.nrows() {
        if !spatial.row_available(i) {
            continue;
        }
        for m in 0..SPATIAL_CLASS_COUNT {
            if weights.degenerate[m] {
                continue;
            }
            let (v, g) = bce_entry(pred[[i, m]], spatial.labels[[i, m]], weights.w_pos[m], weights.w_neg[m]);
            per_class[m] += v;
            grad[[i, m]] = g;
        }
    }
    Ok(LossResult {
        value: per_class.iter().sum(),
        grad_abnormality: None,
        grad_spatial: Some(grad),
        grad_segmentation: None,
        per_class,
    })
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub labels: Array2<u8>,
    /// Owned (sample, class) pairs.
    pub mask: Array2<bool>,
    pub spatial: Option<SpatialLabelMatrix>,
    /// `F x t` organ masks in `{0, 1}`.
    pub segmentation: Option<Array2<f64>>,
}

/// Which terms make up the training objective, and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeConfig {
    pub class_weights: ClassWeights,
    pub noise: Option<NoiseProfile>,
    pub correlation: Option<CorrelationPrior>,
    /// `alpha_seg`; `None` disables the segmentation term.
    pub segmentation: Option<f64>,
    /// `alpha_loc` and the spatial class weights; `None` disables the term.
    pub localization: Option<(f64, ClassWeights)>,
}

impl CompositeConfig {
    pub fn baseline(class_weights: ClassWeights) -> Self {
        Self {
            class_weights,
            noise: None,
            correlation: None,
            segmentation: None,
            localization: None,
        }
    }

    pub fn uses_spatial(&self) -> bool {
        matches!(self.localization, Some((a, _)) if a != 0.0)
    }

    pub fn uses_segmentation(&self) -> bool {
        matches!(self.segmentation, Some(a) if a != 0.0)
    }
}

/// Abnormality loss (weighted BCE plus any selected priors) plus the
/// weighted auxiliary terms. Terms with zero weight are not evaluated.
pub fn composite_loss(pred: &Predictions, targets: &Targets, config: &CompositeConfig) -> Result<LossResult> {
    let p = pred.abnormality.view();
    let labels = targets.labels.view();
    let mask = targets.mask.view();
    let mut out = weighted_bce(p, labels, &config.class_weights, mask)?;
    if let Some(noise) = &config.noise {
        add_noise_regularizer(&mut out, p, labels, &config.class_weights, noise, mask)?;
    }
    if let Some(prior) = &config.correlation {
        add_correlation_regularizer(&mut out, p, labels, &config.class_weights, prior, mask)?;
    }
    if let Some(alpha) = config.segmentation.filter(|&a| a != 0.0) {
        let (sp, st) = match (&pred.segmentation, &targets.segmentation) {
            (Some(sp), Some(st)) => (sp, st),
            _ => return Err(Error::Invalid("segmentation term needs predictions and masks".into())),
        };
        let seg = segmentation_mse(sp.view(), st.view())?.scaled(alpha);
        out.value += seg.value;
        out.grad_segmentation = seg.grad_segmentation;
    }
    if let Some((alpha, weights)) = config.localization.as_ref().filter(|(a, _)| *a != 0.0) {
        let (sp, st) = match (&pred.spatial, &targets.spatial) {
            (Some(sp), Some(st)) => (sp, st),
            _ => return Err(Error::Invalid("spatial term needs predictions and labels".into())),
        };
        let loc = spatial_loss(sp.view(), st, weights)?.scaled(*alpha);
        out.value += loc.value;
        out.grad_spatial = loc.grad_spatial;
    }
    if !out.value.is_finite() {
        return Err(Error::NonFinite("composite loss".into()));
    }
    Ok(out)
}
