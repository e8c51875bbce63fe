//! Dynamic intensity windowing of grayscale images.
//!
//! A 256-bin histogram spanning the image's own intensity range is cleaned
//! with a median filter and a Gaussian blur, which removes isolated spikes
//! such as black anonymization boxes or burned-in text. The first and last
//! bins whose smoothed mass exceeds `tau * max` define the window, and the
//! image is rescaled linearly onto `[0, 1]` with clamping outside it.

use std::io::{BufWriter, Cursor};
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{DynamicImage, ImageBuffer, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("pixel intensity {v} is not finite and >= 0")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` to every pixel.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.width, self.height, self.pixels.iter().map(|&v| f(v)).collect())
    }

    /// Mean over non-overlapping `factor x factor` blocks; trailing
    /// rows/columns that do not fill a block are dropped.
    pub fn downsample(&self, factor: usize) -> Self {
        let w = self.width / factor;
        let h = self.height / factor;
        let area = (factor * factor) as f64;
        let mut out = Vec::with_capacity(w * h);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = 0.0;
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        acc += self.get(x, y);
                    }
                }
                out.push(acc / area);
            }
        }
        Self {
            width: w,
            height: h,
            pixels: out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Median filter width in bins; values <= 1 disable the filter.
    pub median_width: usize,
    /// Gaussian standard deviation in bins; 0 disables smoothing.
    pub gauss_sigma: f64,
    /// Fraction of the smoothed maximum a bin must exceed to lie in the window.
    pub tau: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            median_width: 5,
            gauss_sigma: 2.0,
            tau: 0.001,
        }
    }
}

impl WindowConfig {
    pub fn unsmoothed(tau: f64) -> Self {
        Self {
            median_width: 1,
            gauss_sigma: 0.0,
            tau,
        }
    }
}

/// Histogram with bins spanning `[min, max]` uniformly. Bins are
/// left-closed and right-open, except the last, which also holds `max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub min: f64,
    pub max: f64,
    /// All pixels share one intensity; everything sits in bin 0.
    pub constant: bool,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / HISTOGRAM_BINS as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        if self.constant {
            return 0;
        }
        let b = ((v - self.min) * HISTOGRAM_BINS as f64 / (self.max - self.min)).floor();
        (b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Left edge of `bin`.
    pub fn edge(&self, bin: usize) -> f64 {
        if bin == HISTOGRAM_BINS {
            self.max
        } else {
            self.min + bin as f64 * (self.max - self.min) / HISTOGRAM_BINS as f64
        }
    }
}

pub fn build_histogram(image: &GrayImage) -> Histogram {
    let (min, max) = image.min_max();
    let mut hist = Histogram {
        counts: vec![0; HISTOGRAM_BINS],
        min,
        max,
        constant: min == max,
    };
    for &v in image.pixels() {
        let b = hist.bin_of(v);
        hist.counts[b] += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBounds {
    pub b_low: f64,
    pub b_high: f64,
    pub low_bin: usize,
    pub high_bin: usize,
    pub histogram_raw: Vec<u64>,
    pub histogram_smoothed: Vec<f64>,
}

fn median_filter(values: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 {
        return values.to_vec();
    }
    let half = width / 2;
    let mut window = Vec::with_capacity(2 * half + 1);
    (0..values.len())
        .map(|i| {
            window.clear();
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            window.extend_from_slice(&values[lo..=hi]);
            window.sort_by(f64::total_cmp);
            let k = window.len();
            if k % 2 == 1 {
                window[k / 2]
            } else {
                0.5 * (window[k / 2 - 1] + window[k / 2])
            }
        })
        .collect()
}

fn gaussian_smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            // taps falling outside the histogram are dropped and the rest renormalized
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let j = i + t as isize - radius;
                if (0..n).contains(&j) {
                    acc += w * values[j as usize];
                    norm += w;
                }
            }
            acc / norm
        })
        .collect()
}

pub fn detect_bounds(hist: &Histogram, config: &WindowConfig) -> Result<WindowBounds> {
    if hist.constant || hist.occupied_bins() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let raw: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let mut smoothed = gaussian_smooth(&median_filter(&raw, config.median_width), config.gauss_sigma);
    let mut peak = smoothed.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        // filtering erased every bin (only isolated spikes); fall back to raw counts
        smoothed = raw;
        peak = smoothed.iter().copied().fold(0.0, f64::max);
    }
    let threshold = config.tau * peak;
    let low_bin = smoothed
        .iter()
        .position(|&v| v > threshold)
        .expect("the peak bin always exceeds tau * peak for tau < 1");
    let high_bin = smoothed
        .iter()
        .rposition(|&v| v > threshold)
        .expect("the peak bin always exceeds tau * peak for tau < 1");
    Ok(WindowBounds {
        b_low: hist.edge(low_bin),
        b_high: hist.edge(high_bin + 1),
        low_bin,
        high_bin,
        histogram_raw: hist.counts.clone(),
        histogram_smoothed: smoothed,
    })
}

/// `clamp((I - b_low) / (b_high - b_low), 0, 1)` per pixel.
pub fn apply_window(image: &GrayImage, bounds: &WindowBounds) -> Result<GrayImage> {
    let (lo, hi) = (bounds.b_low, bounds.b_high);
    if !(lo < hi) {
        return Err(Error::Invalid(format!("window [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    image.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

pub fn normalize(image: &GrayImage, config: &WindowConfig) -> Result<GrayImage> {
    let hist = build_histogram(image);
    let bounds = detect_bounds(&hist, config)?;
    apply_window(image, &bounds)
}

/// Reads an 8- or 16-bit binary PGM; intensities are the raw sample values.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Invalid(format!(
                "{}: expected a grayscale image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    GrayImage::new(w, h, pixels)
}

fn encode_pgm(buf: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    {
        let writer = BufWriter::new(&mut out);
        let maxwhite = match buf {
            DynamicImage::ImageLuma16(_) => 65535,
            _ => 255,
        };
        let header = GraymapHeader {
            encoding: SampleEncoding::Binary,
            height: buf.height(),
            width: buf.width(),
            maxwhite,
        };
        let encoder = PnmEncoder::new(writer).with_header(header.into());
        buf.write_with_encoder(encoder)
            .map_err(|e| Error::Invalid(format!("pgm encoding failed: {e}")))?;
    }
    Ok(out.into_inner())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes raw intensities as a 16-bit PGM, rounding and saturating at 65535.
pub fn write_pgm16(path: &Path, image: &GrayImage) -> Result<()> {
    let data: Vec<u16> = image
        .pixels()
        .iter()
        .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(image.width() as u32, image.height() as u32, data)
        .expect("buffer length matches dimensions");
    write_bytes(path, &encode_pgm(buf.into())?)
}

/// Writes a `[0, 1]` image as a 16-bit PGM scaled onto `[0, 65535]`.
pub fn write_normalized_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_pgm16(path, &image.map(|v| v.clamp(0.0, 1.0) * 65535.0)?)
}

/// Writes an 8-bit PGM, rounding and saturating at 255.
pub fn write_pgm8(path: &Path, image: &GrayImage) -> Result<()> {
    let data: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(image.width() as u32, image.height() as u32, data)
        .expect("buffer length matches dimensions");
    write_bytes(path, &encode_pgm(buf.into())?)
}
