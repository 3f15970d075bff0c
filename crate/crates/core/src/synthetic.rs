//! Synthetic signal-in-one-patch datasets.
//!
//! Every image is gray noise with one textured blob per grid cell. The blob
//! in the signal cell carries the texture of the image's class; the other
//! cells hold weaker blobs with textures of random classes. A per-image
//! global gain hides absolute amplitude, so only the relative strength of
//! the blobs identifies the signal patch.

use crate::cropping::{make_grid, CropGrid};
use crate::data::{DiagnosisMethod, ImageRef, SampleRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::fmt;
use std::str::FromStr;

/// Where the class-bearing blob goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalPolicy {
    /// Uniformly chosen cell per image.
    Random,
    /// Always the center cell of a 3×3 grid.
    Center,
}

impl fmt::Display for SignalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalPolicy::Random => "random",
            SignalPolicy::Center => "center",
        })
    }
}

impl FromStr for SignalPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SignalPolicy::Random),
            "center" => Ok(SignalPolicy::Center),
            _ => Err(Error::Config(format!(
                "unknown signal policy {s:?} (expected random or center)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: Vec<usize>,
    pub image_size: (usize, usize),
    pub crop_size: (usize, usize),
    /// 9 or 16; the blob cells are the grid's exclusive regions.
    pub n_crops: usize,
    pub policy: SignalPolicy,
    /// Side of the square blobs in pixels.
    pub blob_size: usize,
    /// Peak blob offset from the gray background.
    pub amplitude: f32,
    /// Distractor amplitude as a fraction of the signal amplitude.
    pub distractor_ratio: (f32, f32),
    /// Per-image gain applied to every blob.
    pub gain: (f32, f32),
    /// Standard deviation of the per-pixel background noise.
    pub noise: f32,
    /// Relative frequencies of the four known diagnosis methods, cheapest
    /// first.
    pub diagnosis_weights: [f64; 4],
    pub seed: u64,
}

impl SynthSpec {
    /// 3×3 grid of 64 px crops on 192 px images with seven classes.
    pub fn default_with(n_per_class: Vec<usize>, seed: u64) -> Self {
        Self {
            n_per_class,
            image_size: (192, 192),
            crop_size: (64, 64),
            n_crops: 9,
            policy: SignalPolicy::Random,
            blob_size: 24,
            amplitude: 0.4,
            distractor_ratio: (0.35, 0.75),
            gain: (0.5, 1.0),
            noise: 0.05,
            diagnosis_weights: [0.4, 0.3, 0.1, 0.2],
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_per_class.len()
    }
}

/// Blob colors: sign patterns of the RGB offset from gray.
const PALETTE: [[f32; 3]; 7] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
];

/// Classes with distinct (color, stripe orientation) pairs.
pub const MAX_CLASSES: usize = 14;

const STRIPE_PERIOD: f32 = 6.0;

/// Texture parameters of a class: color sign pattern and whether the
/// stripes run vertically.
pub fn texture(class: usize) -> ([f32; 3], bool) {
    (PALETTE[class % PALETTE.len()], class % 2 == 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub record: SampleRecord,
    pub signal_cell: usize,
    /// Texture class drawn in each cell; the signal cell holds the label.
    pub cell_classes: Vec<usize>,
    /// Blob rectangle `(x, y, w, h)` per cell.
    pub blob_rects: Vec<(usize, usize, usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub grid: CropGrid,
    pub samples: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.record.label).collect()
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    let c = spec.n_classes();
    if c < 2 || c > MAX_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data supports 2..={MAX_CLASSES} classes, got {c}"
        )));
    }
    let (lo, hi) = spec.distractor_ratio;
    let (glo, ghi) = spec.gain;
    if !(0.0 <= lo && lo <= hi) || !(0.0 < glo && glo <= ghi) || !(spec.amplitude > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::Config(
            "invalid synthetic amplitude, ratio, gain or noise range".into(),
        ));
    }
    if spec.diagnosis_weights.iter().any(|&w| !(w >= 0.0)) || spec.diagnosis_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(
            "diagnosis weights must be non-negative and not all zero".into(),
        ));
    }
    if spec.blob_size == 0 {
        return Err(Error::Config("blob_size must be positive".into()));
    }
    Ok(())
}

/// Generates the dataset; sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    validate(spec)?;
    let grid = make_grid(spec.image_size, spec.crop_size, spec.n_crops)?;
    let cells: Vec<_> = (0..grid.n_crops())
        .map(|i| {
            grid.exclusive_cell(i)
                .ok_or_else(|| Error::Geometry(format!("crop cell {i} has no region exclusive to it")))
        })
        .collect::<Result<_>>()?;
    for (i, &(_, _, w, h)) in cells.iter().enumerate() {
        if spec.blob_size > w || spec.blob_size > h {
            return Err(Error::Geometry(format!(
                "blob of {} px does not fit cell {i} of {w}x{h} px",
                spec.blob_size
            )));
        }
    }
    let center = match spec.policy {
        SignalPolicy::Center if spec.n_crops != 9 => {
            return Err(Error::Config("center signal policy needs a 3x3 grid".into()));
        }
        SignalPolicy::Center => Some(4),
        SignalPolicy::Random => None,
    };
    let methods = WeightedIndex::new(spec.diagnosis_weights).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let labels: Vec<usize> = spec
        .n_per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut samples = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let signal_cell = center.unwrap_or_else(|| rng.random_range(0..cells.len()));
        let gain = rng.random_range(spec.gain.0..=spec.gain.1);
        let (w, h) = spec.image_size;
        let mut image = Image::from_fn(w, h, |_, _| [0.5; 3]);
        for v in image.data_mut() {
            *v += noise.sample(&mut rng);
        }
        let mut cell_classes = Vec::with_capacity(cells.len());
        let mut blob_rects = Vec::with_capacity(cells.len());
        for (cell, &(cx, cy, cw, ch)) in cells.iter().enumerate() {
            let (class, ratio) = if cell == signal_cell {
                (label, 1.0)
            } else {
                let r = rng.random_range(spec.distractor_ratio.0..=spec.distractor_ratio.1);
                (rng.random_range(0..spec.n_classes()), r)
            };
            let b = spec.blob_size;
            let x = cx + rng.random_range(0..=cw - b);
            let y = cy + rng.random_range(0..=ch - b);
            draw_blob(&mut image, (x, y, b), class, spec.amplitude * gain * ratio);
            cell_classes.push(class);
            blob_rects.push((x, y, b, b));
        }
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let diagnosis_method = DiagnosisMethod::KNOWN[methods.sample(&mut rng)];
        samples.push(SynthSample {
            image,
            record: SampleRecord {
                image_ref: ImageRef::Memory(i),
                label,
                diagnosis_method,
            },
            signal_cell,
            cell_classes,
            blob_rects,
        });
    }
    Ok(SynthDataset { grid, samples })
}

fn stripe(v: usize) -> f32 {
    0.5 + 0.5 * (std::f32::consts::TAU * v as f32 / STRIPE_PERIOD).sin()
}

fn draw_blob(image: &mut Image, (x0, y0, size): (usize, usize, usize), class: usize, amplitude: f32) {
    let (color, vertical) = texture(class);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let s = amplitude * stripe(if vertical { x - x0 } else { y - y0 });
            let mut px = image.pixel(x, y);
            for (p, c) in px.iter_mut().zip(color) {
                *p += s * c;
            }
            image.set_pixel(x, y, px);
        }
    }
}

/// Recovers the texture class drawn in `rect` from pixels alone: the sign
/// pattern of the mean offset from gray picks the color, and whether the
/// signal varies more across columns or rows picks the orientation.
pub fn classify_blob(image: &Image, rect: (usize, usize, usize, usize), n_classes: usize) -> usize {
    let (x0, y0, w, h) = rect;
    let mut mean = [0.0f64; 3];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for (m, v) in mean.iter_mut().zip(image.pixel(x, y)) {
                *m += v as f64 - 0.5;
            }
        }
    }
    let signs = mean.map(|m| if m >= 0.0 { 1.0 } else { -1.0 });
    let proj = |x: usize, y: usize| -> f64 {
        image
            .pixel(x, y)
            .iter()
            .zip(signs)
            .map(|(&v, s)| (v as f64 - 0.5) * s)
            .sum()
    };
    let spread = |values: Vec<f64>| {
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    };
    let col_means: Vec<f64> = (x0..x0 + w)
        .map(|x| (y0..y0 + h).map(|y| proj(x, y)).sum::<f64>() / h as f64)
        .collect();
    let row_means: Vec<f64> = (y0..y0 + h)
        .map(|y| (x0..x0 + w).map(|x| proj(x, y)).sum::<f64>() / w as f64)
        .collect();
    let vertical = spread(col_means) > spread(row_means);
    (0..n_classes)
        .find(|&c| {
            let (color, v) = texture(c);
            color.iter().zip(signs).all(|(&a, b)| (a as f64) == b) && v == vertical
        })
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_per_class: Vec<usize>, seed: u64) -> SynthSpec {
        SynthSpec {
            image_size: (64, 64),
            crop_size: (24, 24),
            blob_size: 12,
            ..SynthSpec::default_with(n_per_class, seed)
        }
    }

    #[test]
    fn textures_are_distinct() {
        for a in 0..MAX_CLASSES {
            for b in 0..a {
                assert_ne!(texture(a), texture(b));
            }
        }
    }

    #[test]
    fn counts_labels_and_determinism() {
        let spec = small(vec![10; 7], 3);
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a.samples.len(), 70);
        assert_eq!(a.labels().iter().filter(|&&l| l == 6).count(), 10);
        let b = gen_synthetic(&spec).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x == y));
    }

    #[test]
    fn center_policy_and_oversized_blob() {
        let spec = SynthSpec {
            policy: SignalPolicy::Center,
            ..small(vec![3; 7], 1)
        };
        assert!(gen_synthetic(&spec).unwrap().samples.iter().all(|s| s.signal_cell == 4));
        let big = SynthSpec {
            blob_size: 17,
            ..small(vec![1; 7], 1)
        };
        assert!(matches!(gen_synthetic(&big), Err(Error::Geometry(_))));
    }

    #[test]
    fn blobs_stay_inside_their_cells() {
        let d = gen_synthetic(&small(vec![5; 7], 9)).unwrap();
        for s in &d.samples {
            for (i, &(x, y, w, h)) in s.blob_rects.iter().enumerate() {
                let (cx, cy, cw, ch) = d.grid.exclusive_cell(i).unwrap();
                assert!(x >= cx && y >= cy && x + w <= cx + cw && y + h <= cy + ch);
            }
        }
    }
}
