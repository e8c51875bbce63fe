//! Synthetic multi-label chest-image benchmark with known ground truth.
//!
//! Labels come from a Gaussian copula: a latent normal vector with a given
//! correlation is thresholded per class at the quantile matching the target
//! prevalence. Noisy labels flip each true label independently, keeping
//! positives with probability `sensitivity` and negatives with probability
//! `specificity`.
//!
//! Images are small cartoons: two lung ellipses, a heart ellipse, a noisy
//! background and an optional black anonymization box. Each positive lung
//! abnormality adds an opacity blob inside one lung; the cardiac class
//! enlarges the heart. Blob contrast grows with how far the latent variable
//! clears its threshold, so borderline positives are hard to see.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::labels::{LabelMatrix, SpatialLabelMatrix, DEFAULT_DATASET, SPATIAL_CLASS_COUNT};
use crate::normalization::{write_pgm16, write_pgm8, GrayImage};

const STREAM_LABELS: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_IMAGES: u64 = 2;

/// Label-noise channel of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseTarget {
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Random per-image affine intensity change `gain * I + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityShift {
    pub gain_min: f64,
    pub gain_max: f64,
    /// Upper bound of the additive offset, as a fraction of `intensity_scale`.
    pub offset_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub prevalence: Vec<f64>,
    pub latent_correlation: Vec<Vec<f64>>,
    pub noise_targets: Vec<NoiseTarget>,
    pub image_size: usize,
    /// Class rendered as an enlarged heart rather than a lung opacity.
    pub cardiac_class: Option<usize>,
    /// Raw counts corresponding to unit cartoon intensity.
    pub intensity_scale: f64,
    pub intensity_shift: Option<IntensityShift>,
    /// Peak opacity of a lung blob, in cartoon intensity units.
    pub lesion_contrast: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Probability that an image carries a black anonymization box.
    pub box_probability: f64,
    pub seed: u64,
}

/// Sensitivity/specificity of five abnormality labels of a public chest
/// X-ray dataset against a consensus re-read.
pub const REFERENCE_NOISE: [(&str, f64, f64); 5] = [
    ("Effusion", 0.300, 0.966),
    ("Cardiomegaly", 0.342, 0.986),
    ("Consolidation", 0.129, 0.949),
    ("Atelectasis", 0.221, 0.970),
    ("Mass", 0.364, 0.972),
];

impl Default for GeneratorConfig {
    fn default() -> Self {
        let d = REFERENCE_NOISE.len();
        let mut corr = vec![vec![0.0; d]; d];
        for (n, row) in corr.iter_mut().enumerate() {
            row[n] = 1.0;
        }
        let mut set = |a: usize, b: usize, v: f64| {
            corr[a][b] = v;
            corr[b][a] = v;
        };
        // effusion-atelectasis strongest, then effusion-consolidation and cardiomegaly-effusion
        set(0, 3, 0.6);
        set(0, 2, 0.45);
        set(0, 1, 0.35);
        set(2, 3, 0.4);
        set(3, 4, 0.15);
        Self {
            n_samples: 1000,
            class_names: REFERENCE_NOISE.iter().map(|r| r.0.to_string()).collect(),
            prevalence: vec![0.3, 0.2, 0.2, 0.25, 0.15],
            latent_correlation: corr,
            noise_targets: REFERENCE_NOISE
                .iter()
                .map(|r| NoiseTarget {
                    sensitivity: r.1,
                    specificity: r.2,
                })
                .collect(),
            image_size: 32,
            cardiac_class: Some(1),
            intensity_scale: 1000.0,
            intensity_shift: None,
            lesion_contrast: 0.3,
            pixel_noise: 0.03,
            box_probability: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_classes();
        if d == 0 || self.n_samples == 0 {
            return Err(Error::Invalid("generator needs at least one class and one sample".into()));
        }
        if self.prevalence.len() != d || self.noise_targets.len() != d || self.latent_correlation.len() != d {
            return Err(Error::Shape(format!(
                "{d} classes with {} prevalences, {} noise targets, {} correlation rows",
                self.prevalence.len(),
                self.noise_targets.len(),
                self.latent_correlation.len()
            )));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Invalid(format!("prevalence {p} outside (0, 1)")));
        }
        for t in &self.noise_targets {
            for v in [t.sensitivity, t.specificity] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!("noise rate {v} outside [0, 1]")));
                }
            }
        }
        for (n, row) in self.latent_correlation.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Shape(format!("correlation row {n} has {} entries", row.len())));
            }
            if row[n] != 1.0 {
                return Err(Error::Invalid(format!("correlation diagonal [{n}] is {}", row[n])));
            }
            for (r, &v) in row.iter().enumerate() {
                if v != self.latent_correlation[r][n] || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!("correlation [{n},{r}] = {v} is not symmetric in [-1, 1]")));
                }
            }
        }
        if self.image_size < 32 {
            return Err(Error::Invalid(format!("image size must be >= 32, got {}", self.image_size)));
        }
        if let Some(c) = self.cardiac_class {
            if c >= d {
                return Err(Error::Invalid(format!("cardiac class {c} out of range")));
            }
        }
        if let Some(s) = &self.intensity_shift {
            if !(s.gain_min > 0.0 && s.gain_min <= s.gain_max && s.offset_max >= 0.0) {
                return Err(Error::Invalid("intensity shift needs 0 < gain_min <= gain_max and offset_max >= 0".into()));
            }
        }
        if !(self.intensity_scale > 0.0 && self.pixel_noise >= 0.0 && self.lesion_contrast >= 0.0) {
            return Err(Error::Invalid("intensity scale, noise and contrast must be non-negative".into()));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Factor `C = A A^T` of a correlation matrix through its eigendecomposition,
/// which also covers singular PSD matrices.
fn correlation_factor(corr: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = corr.len();
    let m = DMatrix::from_fn(d, d, |i, j| corr[i][j]);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(1e-6)));
        let near = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
        let suggestion = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| near[(i, j)] / (near[(i, i)] * near[(j, j)]).sqrt())
                    .collect()
            })
            .collect();
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min,
            suggestion,
        });
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// Latent threshold per class: `P(Z > t) = prevalence`.
pub fn class_thresholds(prevalence: &[f64]) -> Vec<f64> {
    let normal = standard_normal();
    prevalence.iter().map(|&p| normal.inverse_cdf(1.0 - p)).collect()
}

/// Draws latent normals with the configured correlation and thresholds them.
/// Returns the `F x D` true labels and the latent values.
pub fn generate_labels(config: &GeneratorConfig) -> Result<(Array2<u8>, Array2<f64>)> {
    config.validate()?;
    let d = config.n_classes();
    let factor = correlation_factor(&config.latent_correlation)?;
    let thresholds = class_thresholds(&config.prevalence);
    let mut rng = stream_rng(config.seed, STREAM_LABELS);
    let mut latent = Array2::zeros((config.n_samples, d));
    let mut labels = Array2::zeros((config.n_samples, d));
    let mut g = vec![0.0; d];
    for i in 0..config.n_samples {
        for v in g.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for n in 0..d {
            let z: f64 = (0..d).map(|k| factor[(n, k)] * g[k]).sum();
            latent[[i, n]] = z;
            labels[[i, n]] = u8::from(z > thresholds[n]);
        }
    }
    Ok((labels, latent))
}

/// Pearson correlation of two thresholded labels whose latent normals have
/// correlation `rho`, by numerical integration of the bivariate orthant
/// probability.
pub fn implied_label_correlation(rho: f64, prevalence_a: f64, prevalence_b: f64) -> f64 {
    let normal = standard_normal();
    let ta = normal.inverse_cdf(1.0 - prevalence_a);
    let tb = normal.inverse_cdf(1.0 - prevalence_b);
    let both = if rho >= 1.0 {
        prevalence_a.min(prevalence_b)
    } else if rho <= -1.0 {
        (prevalence_a + prevalence_b - 1.0).max(0.0)
    } else {
        // P(Za > ta, Zb > tb) = int_ta^inf phi(x) P(Zb > tb | Za = x) dx, composite Simpson
        let s = (1.0 - rho * rho).sqrt();
        let upper = ta.max(0.0) + 12.0;
        let steps = 4000;
        let h = (upper - ta) / steps as f64;
        let f = |x: f64| normal.pdf(x) * (1.0 - normal.cdf((tb - rho * x) / s));
        let mut acc = f(ta) + f(upper);
        for k in 1..steps {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(ta + k as f64 * h);
        }
        acc * h / 3.0
    };
    let cov = both - prevalence_a * prevalence_b;
    cov / (prevalence_a * (1.0 - prevalence_a) * prevalence_b * (1.0 - prevalence_b)).sqrt()
}

/// Keeps each positive with probability `sensitivity` and each negative with
/// probability `specificity`, independently per entry.
pub fn inject_noise(true_labels: &Array2<u8>, targets: &[NoiseTarget], seed: u64) -> Result<Array2<u8>> {
    if targets.len() != true_labels.ncols() {
        return Err(Error::Shape(format!(
            "{} noise targets for {} classes",
            targets.len(),
            true_labels.ncols()
        )));
    }
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let mut out = true_labels.clone();
    for ((_, n), v) in out.indexed_iter_mut() {
        let keep = if *v == 1 {
            targets[n].sensitivity
        } else {
            targets[n].specificity
        };
        let u: f64 = rng.random();
        if u >= keep {
            *v = 1 - *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Patient's right, drawn on the image's left half.
    Right,
    /// Patient's left, drawn on the image's right half.
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.ry
    }

    pub fn height(&self) -> f64 {
        2.0 * self.ry
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub class: usize,
    pub side: Side,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

/// Everything needed to draw one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub right_lung: Ellipse,
    pub left_lung: Ellipse,
    pub heart: Ellipse,
    pub blobs: Vec<Blob>,
    pub anonymization_box: bool,
}

impl Scene {
    pub fn healthy(size: usize) -> Self {
        let n = size as f64;
        Self {
            size,
            right_lung: Ellipse {
                cx: 0.3 * n,
                cy: 0.5 * n,
                rx: 0.15 * n,
                ry: 0.32 * n,
            },
            left_lung: Ellipse {
                cx: 0.7 * n,
                cy: 0.5 * n,
                rx: 0.15 * n,
                ry: 0.32 * n,
            },
            heart: Ellipse {
                cx: 0.56 * n,
                cy: 0.66 * n,
                rx: 0.14 * n,
                ry: 0.12 * n,
            },
            blobs: Vec::new(),
            anonymization_box: false,
        }
    }

    pub fn lung(&self, side: Side) -> &Ellipse {
        match side {
            Side::Right => &self.right_lung,
            Side::Left => &self.left_lung,
        }
    }

    fn pixel_center(x: usize, y: usize) -> (f64, f64) {
        (x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Lung pixels exclude the heart, which lies in front of them.
    pub fn in_lung(&self, side: Side, x: usize, y: usize) -> bool {
        let (px, py) = Self::pixel_center(x, y);
        self.lung(side).contains(px, py) && !self.heart.contains(px, py)
    }

    pub fn in_heart(&self, x: usize, y: usize) -> bool {
        let (px, py) = Self::pixel_center(x, y);
        self.heart.contains(px, py)
    }

    /// Pixels covered by `blob`: its disc clipped to its lung.
    pub fn blob_pixels(&self, blob: &Blob) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                let (px, py) = Self::pixel_center(x, y);
                let (dx, dy) = (px - blob.cx, py - blob.cy);
                if dx * dx + dy * dy <= blob.radius * blob.radius && self.in_lung(blob.side, x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Spatial labels implied by the drawn blobs.
    ///
    /// Each lung's bounding box is cut into equal-height thirds. A blob
    /// touching only the lower (middle, upper) third is "Lower" ("Middle",
    /// "Upper"); lower+middle is "Lower-middle", middle+upper is
    /// "Upper-middle" and all three is "Diffused". Two blobs with no pixel in
    /// common set "Multiple".
    pub fn spatial_labels(&self) -> [u8; SPATIAL_CLASS_COUNT] {
        let mut out = [0u8; SPATIAL_CLASS_COUNT];
        let mut drawn: Vec<Vec<(usize, usize)>> = Vec::new();
        for blob in &self.blobs {
            let pixels = self.blob_pixels(blob);
            if pixels.is_empty() {
                continue;
            }
            out[match blob.side {
                Side::Left => 0,
                Side::Right => 1,
            }] = 1;
            let lung = self.lung(blob.side);
            let third = lung.height() / 3.0;
            let mut touched = [false; 3]; // upper, middle, lower
            for &(_, y) in &pixels {
                let rel = (y as f64 + 0.5 - lung.top()) / third;
                touched[(rel.floor().max(0.0) as usize).min(2)] = true;
            }
            let slot = match touched {
                [false, false, true] => 2,
                [false, true, true] => 3,
                [false, true, false] => 4,
                [true, true, false] => 5,
                [true, false, false] => 6,
                _ => 7,
            };
            out[slot] = 1;
            drawn.push(pixels);
        }
        let disjoint = drawn.iter().enumerate().any(|(a, pa)| {
            drawn[a + 1..]
                .iter()
                .any(|pb| !pa.iter().any(|p| pb.contains(p)))
        });
        out[8] = u8::from(disjoint);
        out
    }

    /// Renders the cartoon at unit intensity scale plus the organ masks
    /// (`[lungs; heart]`, each `size * size`).
    pub fn render<R: Rng>(&self, pixel_noise: f64, rng: &mut R) -> (Vec<f64>, Vec<u8>) {
        let n = self.size;
        let mut img = vec![0.0; n * n];
        let mut masks = vec![0u8; 2 * n * n];
        for y in 0..n {
            for x in 0..n {
                let k = y * n + x;
                let lung = self.in_lung(Side::Left, x, y) || self.in_lung(Side::Right, x, y);
                let heart = self.in_heart(x, y);
                img[k] = if heart {
                    0.8
                } else if lung {
                    0.2
                } else {
                    0.55
                };
                masks[k] = u8::from(lung);
                masks[n * n + k] = u8::from(heart);
            }
        }
        for blob in &self.blobs {
            for (x, y) in self.blob_pixels(blob) {
                let (px, py) = Self::pixel_center(x, y);
                let r2 = ((px - blob.cx).powi(2) + (py - blob.cy).powi(2)) / (blob.radius * blob.radius);
                img[y * n + x] += blob.amplitude * (1.0 - 0.5 * r2);
            }
        }
        for v in img.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v = (*v + pixel_noise * e).max(0.0);
        }
        if self.anonymization_box {
            let side = (0.15 * n as f64).round() as usize;
            for y in n - side..n {
                for x in n - side..n {
                    img[y * n + x] = 0.0;
                }
            }
        }
        (img, masks)
    }
}

struct LesionShape {
    radius: f64,
    /// Preferred vertical position as a fraction of lung height from the
    /// top, or `None` for anywhere.
    band: Option<f64>,
}

fn lesion_shape(class: usize) -> LesionShape {
    match class % 4 {
        0 => LesionShape {
            radius: 0.09,
            band: Some(0.82),
        },
        1 => LesionShape {
            radius: 0.1,
            band: None,
        },
        2 => LesionShape {
            radius: 0.075,
            band: Some(0.55),
        },
        _ => LesionShape {
            radius: 0.055,
            band: None,
        },
    }
}

/// Opacity from how far the latent value clears its threshold.
fn lesion_strength(margin: f64) -> f64 {
    0.25 + 0.75 * (1.0 - (-margin / 0.6).exp())
}

/// Lays out the organs and lesions of one sample.
pub fn scene_for_sample<R: Rng>(
    config: &GeneratorConfig,
    labels: &[u8],
    latent: &[f64],
    thresholds: &[f64],
    rng: &mut R,
) -> Scene {
    let n = config.image_size as f64;
    let mut scene = Scene::healthy(config.image_size);
    let mut lung_class_rank = 0;
    for (class, &label) in labels.iter().enumerate() {
        let is_cardiac = config.cardiac_class == Some(class);
        if !is_cardiac {
            lung_class_rank += 1;
        }
        if label == 0 {
            continue;
        }
        let strength = lesion_strength(latent[class] - thresholds[class]);
        if is_cardiac {
            let grow = 1.0 + 0.45 * strength;
            scene.heart.rx *= grow;
            scene.heart.ry *= 1.0 + 0.25 * strength;
            continue;
        }
        let shape = lesion_shape(lung_class_rank - 1);
        let diffuse = rng.random_bool(0.12);
        let copies = if !diffuse && rng.random_bool(0.15) { 2 } else { 1 };
        let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        for copy in 0..copies {
            let side = if copy == 0 { side } else if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let lung = *scene.lung(side);
            let (radius, rel_y) = if diffuse {
                (0.26 * n, 0.5)
            } else {
                let rel = match shape.band {
                    Some(b) => (b + rng.random_range(-0.08..0.08)).clamp(0.1, 0.9),
                    None => rng.random_range(0.15..0.85),
                };
                (shape.radius * n, rel)
            };
            let cx = lung.cx + rng.random_range(-0.45..0.45) * lung.rx;
            let cy = lung.top() + rel_y * lung.height();
            scene.blobs.push(Blob {
                class,
                side,
                cx,
                cy,
                radius,
                amplitude: config.lesion_contrast * strength,
            });
        }
    }
    scene.anonymization_box = rng.random_bool(config.box_probability);
    scene
}

/// One rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    /// Raw intensities after the affine shift, in counts.
    pub image: GrayImage,
    /// `[lungs; heart]` binary masks, `2 * N * N`.
    pub organ_masks: Vec<u8>,
    pub spatial_labels: [u8; SPATIAL_CLASS_COUNT],
    /// Applied `(gain, offset)`; `(1, 0)` without a shift.
    pub shift: (f64, f64),
}

pub fn render_image<R: Rng>(
    config: &GeneratorConfig,
    labels: &[u8],
    latent: &[f64],
    thresholds: &[f64],
    rng: &mut R,
) -> Result<RenderedSample> {
    let scene = scene_for_sample(config, labels, latent, thresholds, rng);
    let (pixels, organ_masks) = scene.render(config.pixel_noise, rng);
    let (gain, offset) = match &config.intensity_shift {
        Some(s) => {
            let gain = (rng.random_range(s.gain_min.ln()..=s.gain_max.ln())).exp();
            let offset = rng.random_range(0.0..=s.offset_max);
            (gain, offset)
        }
        None => (1.0, 0.0),
    };
    let scale = config.intensity_scale;
    let image = GrayImage::new(
        config.image_size,
        config.image_size,
        pixels.iter().map(|v| scale * (gain * v + offset)).collect(),
    )?;
    Ok(RenderedSample {
        image,
        organ_masks,
        spatial_labels: scene.spatial_labels(),
        shift: (gain, offset),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub true_labels: LabelMatrix,
    pub noisy_labels: LabelMatrix,
    pub spatial: SpatialLabelMatrix,
    pub latent: Array2<f64>,
    pub samples: Vec<RenderedSample>,
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:06}")
}

/// Generates labels, noisy labels and images. Every random draw derives
/// from `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticDataset> {
    let (labels, latent) = generate_labels(config)?;
    let noisy = inject_noise(&labels, &config.noise_targets, config.seed)?;
    let thresholds = class_thresholds(&config.prevalence);
    let mut rng = stream_rng(config.seed, STREAM_IMAGES);
    let f = config.n_samples;
    let d = config.n_classes();
    let mut samples = Vec::with_capacity(f);
    let mut spatial = Array2::zeros((f, SPATIAL_CLASS_COUNT));
    let mut available = Array2::from_elem((f, d), false);
    for i in 0..f {
        let row: Vec<u8> = labels.row(i).to_vec();
        let lat: Vec<f64> = latent.row(i).to_vec();
        let s = render_image(config, &row, &lat, &thresholds, &mut rng)?;
        for (m, &v) in s.spatial_labels.iter().enumerate() {
            spatial[[i, m]] = v;
        }
        for n in 0..d {
            available[[i, n]] = row[n] == 1 && config.cardiac_class != Some(n);
        }
        samples.push(s);
    }
    let ids: Vec<String> = (0..f).map(sample_id).collect();
    let ownership = BTreeMap::from([(DEFAULT_DATASET.to_string(), vec![true; d])]);
    let tags = vec![DEFAULT_DATASET.to_string(); f];
    let true_labels = LabelMatrix::from_parts(labels, ids.clone(), tags.clone(), config.class_names.clone(), ownership.clone())?;
    let noisy_labels = LabelMatrix::from_parts(noisy, ids, tags, config.class_names.clone(), ownership)?;
    Ok(SyntheticDataset {
        config: config.clone(),
        true_labels,
        noisy_labels,
        spatial: SpatialLabelMatrix::new(spatial, available)?,
        latent,
        samples,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    seed: u64,
    spatial_regions: &'static str,
    masks: &'static str,
    generator: &'a GeneratorConfig,
}

#[derive(Deserialize)]
struct ManifestIn {
    generator: GeneratorConfig,
}

impl SyntheticDataset {
    /// Writes `labels_true.csv`, `labels_noisy.csv`, `spatial.csv`,
    /// `images/<id>.pgm` (16-bit raw counts), `masks/<id>.pgm` (8-bit, lungs
    /// stacked above heart) and `manifest.toml`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        for d in [dir, images.as_path(), masks.as_path()] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        self.true_labels.save_csv(&dir.join("labels_true.csv"))?;
        self.noisy_labels.save_csv(&dir.join("labels_noisy.csv"))?;
        let spatial_path = dir.join("spatial.csv");
        let file = std::fs::File::create(&spatial_path).map_err(|e| Error::io(&spatial_path, e))?;
        self.spatial.write_csv(
            std::io::BufWriter::new(file),
            self.true_labels.sample_ids(),
            self.true_labels.class_names(),
        )?;
        let n = self.config.image_size;
        for (id, s) in self.true_labels.sample_ids().iter().zip(&self.samples) {
            write_pgm16(&images.join(format!("{id}.pgm")), &s.image)?;
            let mask_img = GrayImage::new(n, 2 * n, s.organ_masks.iter().map(|&m| 255.0 * m as f64).collect())?;
            write_pgm8(&masks.join(format!("{id}.pgm")), &mask_img)?;
        }
        let manifest = Manifest {
            format: "noisylab-synthetic-v1",
            seed: self.config.seed,
            spatial_regions: "equal-height thirds of each lung bounding box",
            masks: "lungs stacked above heart",
            generator: &self.config,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`SyntheticDataset::write_to`]. Latent
    /// values are not stored and come back as zeros.
    pub fn read_from(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ManifestIn =
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let config = manifest.generator;
        let true_labels = LabelMatrix::load_csv(&dir.join("labels_true.csv"))?;
        let noisy_labels = LabelMatrix::load_csv(&dir.join("labels_noisy.csv"))?;
        let spatial_path = dir.join("spatial.csv");
        let file = std::fs::File::open(&spatial_path).map_err(|e| Error::io(&spatial_path, e))?;
        let (spatial, _) = SpatialLabelMatrix::read_csv(std::io::BufReader::new(file))?;
        let n = config.image_size;
        let mut samples = Vec::with_capacity(true_labels.n_samples());
        for id in true_labels.sample_ids() {
            let image = crate::normalization::read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
            let mask = crate::normalization::read_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
            if mask.width() != n || mask.height() != 2 * n {
                return Err(Error::Shape(format!("mask for {id} is {}x{}", mask.width(), mask.height())));
            }
            samples.push(RenderedSample {
                image,
                organ_masks: mask.pixels().iter().map(|&v| u8::from(v >= 128.0)).collect(),
                spatial_labels: [0; SPATIAL_CLASS_COUNT],
                shift: (1.0, 0.0),
            });
        }
        for (i, s) in samples.iter_mut().enumerate() {
            for m in 0..SPATIAL_CLASS_COUNT {
                s.spatial_labels[m] = spatial.labels[[i, m]];
            }
        }
        let latent = Array2::zeros((true_labels.n_samples(), true_labels.n_classes()));
        Ok(Self {
            config,
            true_labels,
            noisy_labels,
            spatial,
            latent,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{compute_correlation, measure_noise_profile};

    fn two_class(rho: f64, prev: f64, n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_samples: n,
            class_names: vec!["a".into(), "b".into()],
            prevalence: vec![prev, prev],
            latent_correlation: vec![vec![1.0, rho], vec![rho, 1.0]],
            noise_targets: vec![
                NoiseTarget {
                    sensitivity: 1.0,
                    specificity: 1.0
                };
                2
            ],
            cardiac_class: None,
            seed: 17,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn independent_latents_give_uncorrelated_labels() {
        let (labels, _) = generate_labels(&two_class(0.0, 0.3, 10_000)).unwrap();
        let lm = LabelMatrix::new(labels, vec!["a".into(), "b".into()]).unwrap();
        assert!(compute_correlation(&lm).unwrap().pearson[[0, 1]].abs() < 0.05);
    }

    #[test]
    fn quadrature_matches_arcsine_law_at_half_prevalence() {
        // for median thresholds P(both) = 1/4 + asin(rho) / (2 pi)
        for rho in [-0.5, 0.0, 0.3, 0.9] {
            let closed = (rho as f64).asin() / (2.0 * std::f64::consts::PI) / 0.25;
            assert!((implied_label_correlation(rho, 0.5, 0.5) - closed).abs() < 1e-8);
        }
        assert!((implied_label_correlation(0.9, 0.5, 0.5) - 0.713).abs() < 1e-3);
    }

    #[test]
    fn strongly_correlated_latents() {
        let (labels, _) = generate_labels(&two_class(0.9, 0.5, 10_000)).unwrap();
        let lm = LabelMatrix::new(labels, vec!["a".into(), "b".into()]).unwrap();
        let r = compute_correlation(&lm).unwrap().pearson[[0, 1]];
        assert!((r - implied_label_correlation(0.9, 0.5, 0.5)).abs() < 0.03, "{r}");
    }

    #[test]
    fn prevalence_within_two_sigma() {
        let n = 10_000;
        let (labels, _) = generate_labels(&two_class(0.2, 0.1, n)).unwrap();
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for col in labels.columns() {
            let count = col.iter().map(|&v| v as f64).sum::<f64>();
            assert!((count - 0.1 * n as f64).abs() <= 2.0 * sigma, "{count}");
        }
    }

    #[test]
    fn non_psd_correlation_is_rejected_with_suggestion() {
        let mut cfg = GeneratorConfig {
            n_samples: 10,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            prevalence: vec![0.3; 3],
            noise_targets: vec![NoiseTarget { sensitivity: 1.0, specificity: 1.0 }; 3],
            cardiac_class: None,
            ..GeneratorConfig::default()
        };
        cfg.latent_correlation = vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]];
        match generate_labels(&cfg) {
            Err(Error::NotPositiveSemidefinite { min_eigenvalue, suggestion }) => {
                assert!(min_eigenvalue < 0.0);
                assert_eq!(suggestion.len(), 3);
                assert!((suggestion[1][1] - 1.0).abs() < 1e-12);
                cfg.latent_correlation = suggestion;
                // symmetrize rounding before retrying
                for i in 0..3 {
                    cfg.latent_correlation[i][i] = 1.0;
                    for j in 0..i {
                        cfg.latent_correlation[i][j] = cfg.latent_correlation[j][i];
                    }
                }
                assert!(generate_labels(&cfg).is_ok());
            }
            other => panic!("expected NotPositiveSemidefinite, got {other:?}"),
        }
    }

    #[test]
    fn noise_channel_extremes() {
        let (labels, _) = generate_labels(&two_class(0.3, 0.4, 2000)).unwrap();
        let perfect = [NoiseTarget { sensitivity: 1.0, specificity: 1.0 }; 2];
        assert_eq!(inject_noise(&labels, &perfect, 3).unwrap(), labels);
        let blind = [NoiseTarget { sensitivity: 0.0, specificity: 1.0 }; 2];
        let noisy = inject_noise(&labels, &blind, 3).unwrap();
        assert!(noisy.iter().all(|&v| v == 0));
    }

    #[test]
    fn noise_channel_hits_targets() {
        let mut cfg = two_class(0.0, 0.3, 100_000);
        cfg.noise_targets = vec![
            NoiseTarget { sensitivity: 0.300, specificity: 0.966 },
            NoiseTarget { sensitivity: 0.129, specificity: 0.949 },
        ];
        let (labels, _) = generate_labels(&cfg).unwrap();
        let noisy = inject_noise(&labels, &cfg.noise_targets, 5).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let truth = LabelMatrix::new(labels, names.clone()).unwrap();
        let noisy = LabelMatrix::new(noisy, names).unwrap();
        let p = measure_noise_profile(&noisy, &truth).unwrap();
        for (n, t) in cfg.noise_targets.iter().enumerate() {
            assert!((p.sensitivity[n] - t.sensitivity).abs() < 0.02);
            assert!((p.specificity[n] - t.specificity).abs() < 0.02);
        }
    }

    #[test]
    fn healthy_scene_has_no_spatial_labels() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = vec![0u8; 5];
        let latent = vec![-3.0; 5];
        let th = class_thresholds(&cfg.prevalence);
        let s = render_image(&cfg, &labels, &latent, &th, &mut rng).unwrap();
        assert_eq!(s.spatial_labels, [0; 9]);
        let scene = scene_for_sample(&cfg, &labels, &latent, &th, &mut rng);
        assert!(scene.blobs.is_empty());
    }

    fn blob(side: Side, scene: &Scene, rel_y: f64, radius: f64) -> Blob {
        let lung = scene.lung(side);
        Blob {
            class: 0,
            side,
            cx: lung.cx,
            cy: lung.top() + rel_y * lung.height(),
            radius,
            amplitude: 0.3,
        }
    }

    #[test]
    fn blob_position_determines_spatial_labels() {
        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Left, &scene, 5.0 / 6.0, 2.0));
        let s = scene.spatial_labels();
        assert_eq!(s, [1, 0, 1, 0, 0, 0, 0, 0, 0]);

        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Right, &scene, 1.0 / 6.0, 2.0));
        assert_eq!(scene.spatial_labels(), [0, 1, 0, 0, 0, 0, 1, 0, 0]);

        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Right, &scene, 2.0 / 3.0, 3.0));
        assert_eq!(scene.spatial_labels()[3], 1);

        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Right, &scene, 0.5, 12.0));
        assert_eq!(scene.spatial_labels()[7], 1);
    }

    #[test]
    fn two_disjoint_blobs_are_multiple() {
        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Left, &scene, 1.0 / 6.0, 2.0));
        scene.blobs.push(blob(Side::Right, &scene, 5.0 / 6.0, 2.0));
        assert_eq!(scene.spatial_labels()[8], 1);
        let mut scene = Scene::healthy(32);
        scene.blobs.push(blob(Side::Left, &scene, 0.5, 3.0));
        scene.blobs.push(blob(Side::Left, &scene, 0.52, 3.0));
        assert_eq!(scene.spatial_labels()[8], 0);
    }

    #[test]
    fn lesions_stay_inside_their_organs() {
        let cfg = GeneratorConfig {
            n_samples: 300,
            seed: 4,
            ..GeneratorConfig::default()
        };
        let (labels, latent) = generate_labels(&cfg).unwrap();
        let th = class_thresholds(&cfg.prevalence);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..cfg.n_samples {
            let row: Vec<u8> = labels.row(i).to_vec();
            let lat: Vec<f64> = latent.row(i).to_vec();
            let scene = scene_for_sample(&cfg, &row, &lat, &th, &mut rng);
            let (_, masks) = scene.render(0.0, &mut rng);
            for b in &scene.blobs {
                assert_ne!(Some(b.class), cfg.cardiac_class);
                for (x, y) in scene.blob_pixels(b) {
                    assert_eq!(masks[y * 32 + x], 1);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            n_samples: 50,
            seed: 99,
            intensity_shift: Some(IntensityShift { gain_min: 0.5, gain_max: 2.0, offset_max: 0.5 }),
            ..GeneratorConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples[0].shift, (1.0, 0.0));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = GeneratorConfig {
            n_samples: 12,
            seed: 5,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_to(dir.path()).unwrap();
        let back = SyntheticDataset::read_from(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        assert_eq!(back.true_labels, ds.true_labels);
        assert_eq!(back.noisy_labels, ds.noisy_labels);
        assert_eq!(back.spatial, ds.spatial);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.organ_masks, b.organ_masks);
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
                assert!((x - y).abs() <= 0.5);
            }
        }
    }
}
