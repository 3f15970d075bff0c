//! Crop-grid geometry, patch extraction, patch dropout and the model input
//! strategies.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// How the crop offsets of a [`CropGrid`] were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridLayout {
    /// Four corners then the center.
    FiveCrop,
    /// `side × side` evenly spaced crops, row-major.
    Regular { side: usize },
    /// Uniformly drawn training crops, not a fixed grid.
    Random,
    /// One patch spanning the whole (already resized) image.
    Whole,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropGrid {
    pub image_size: (usize, usize),
    pub crop_size: (usize, usize),
    pub layout: GridLayout,
    pub offsets: Vec<(usize, usize)>,
}

/// `round_half_up(i * span / steps)` in exact integer arithmetic.
fn spaced(i: usize, span: usize, steps: usize) -> usize {
    (2 * i * span + steps) / (2 * steps)
}

/// Fixed crop locations: corners and center for 5 crops, an evenly spaced
/// 3×3 or 4×4 grid otherwise.
pub fn make_grid(image_size: (usize, usize), crop_size: (usize, usize), n_crops: usize) -> Result<CropGrid> {
    let ((iw, ih), (cw, ch)) = (image_size, crop_size);
    if cw == 0 || ch == 0 || cw > iw || ch > ih {
        return Err(Error::Geometry(format!("crop {cw}x{ch} does not fit image {iw}x{ih}")));
    }
    let (sx, sy) = (iw - cw, ih - ch);
    let (layout, offsets) = match n_crops {
        5 => (
            GridLayout::FiveCrop,
            vec![(0, 0), (sx, 0), (0, sy), (sx, sy), (spaced(1, sx, 2), spaced(1, sy, 2))],
        ),
        9 | 16 => {
            let side = if n_crops == 9 { 3 } else { 4 };
            let mut offs = Vec::with_capacity(n_crops);
            for row in 0..side {
                for col in 0..side {
                    offs.push((spaced(col, sx, side - 1), spaced(row, sy, side - 1)));
                }
            }
            (GridLayout::Regular { side }, offs)
        }
        other => {
            return Err(Error::Geometry(format!("n_crops must be 5, 9 or 16, got {other}")));
        }
    };
    for (i, a) in offsets.iter().enumerate() {
        if offsets[..i].contains(a) {
            return Err(Error::Geometry(format!(
                "crop {cw}x{ch} on {iw}x{ih} yields duplicate offset {a:?} for {n_crops} crops"
            )));
        }
    }
    Ok(CropGrid {
        image_size,
        crop_size,
        layout,
        offsets,
    })
}

impl CropGrid {
    pub fn n_crops(&self) -> usize {
        self.offsets.len()
    }

    /// Whether every image pixel lies in at least one crop.
    pub fn covers_image(&self) -> bool {
        let (iw, ih) = self.image_size;
        let (cw, ch) = self.crop_size;
        let mut hit = vec![false; iw * ih];
        for &(x, y) in &self.offsets {
            for row in y..y + ch {
                hit[row * iw + x..row * iw + x + cw].fill(true);
            }
        }
        hit.into_iter().all(|h| h)
    }

    /// Axis-aligned region owned by crop `index` alone, as `(x, y, w, h)`.
    /// Only defined for regular grids.
    pub fn exclusive_cell(&self, index: usize) -> Option<(usize, usize, usize, usize)> {
        let GridLayout::Regular { side } = self.layout else {
            return None;
        };
        let (col, row) = (index % side, index / side);
        let axis = |pos: usize, offs: &dyn Fn(usize) -> usize, crop: usize, extent: usize| {
            let start = if pos == 0 { 0 } else { offs(pos - 1) + crop };
            let end = if pos + 1 == side { extent } else { offs(pos + 1) };
            (start < end).then_some((start, end - start))
        };
        let xs = |c: usize| self.offsets[c].0;
        let ys = |r: usize| self.offsets[r * side].1;
        let (x, w) = axis(col, &xs, self.crop_size.0, self.image_size.0)?;
        let (y, h) = axis(row, &ys, self.crop_size.1, self.image_size.1)?;
        Some((x, y, w, h))
    }
}

/// Batch of crops, logically `N_B × N_C × h × w × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub data: Vec<f32>,
    pub n_samples: usize,
    pub grid: CropGrid,
    /// `true` where the patch was kept, indexed `[sample * N_C + patch]`.
    pub dropout_mask: Vec<bool>,
}

impl PatchBatch {
    pub fn n_crops(&self) -> usize {
        self.grid.n_crops()
    }

    pub fn patch_len(&self) -> usize {
        self.grid.crop_size.0 * self.grid.crop_size.1 * CHANNELS
    }

    pub fn shape(&self) -> [usize; 5] {
        let (w, h) = self.grid.crop_size;
        [self.n_samples, self.n_crops(), h, w, CHANNELS]
    }

    pub fn patch(&self, sample: usize, patch: usize) -> &[f32] {
        let n = self.patch_len();
        let start = (sample * self.n_crops() + patch) * n;
        &self.data[start..start + n]
    }

    /// Concatenates batches along the sample axis.
    pub fn stack(batches: &[PatchBatch]) -> Result<PatchBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack an empty list of batches".into()))?;
        let mut out = PatchBatch {
            data: Vec::new(),
            n_samples: 0,
            grid: first.grid.clone(),
            dropout_mask: Vec::new(),
        };
        for b in batches {
            if b.grid.crop_size != first.grid.crop_size || b.n_crops() != first.n_crops() {
                return Err(Error::Geometry("stacked batches differ in crop geometry".into()));
            }
            out.data.extend_from_slice(&b.data);
            out.dropout_mask.extend_from_slice(&b.dropout_mask);
            out.n_samples += b.n_samples;
        }
        Ok(out)
    }

    /// Wraps one model-sized image as a single-patch batch.
    pub fn from_image(image: &Image) -> PatchBatch {
        let size = (image.width(), image.height());
        PatchBatch {
            data: image.data().to_vec(),
            n_samples: 1,
            grid: CropGrid {
                image_size: size,
                crop_size: size,
                layout: GridLayout::Whole,
                offsets: vec![(0, 0)],
            },
            dropout_mask: vec![true],
        }
    }

    /// Maps raw `[0, 1]` pixels to `(v - 0.5) / 0.25`.
    pub fn normalize(&mut self) {
        for v in &mut self.data {
            *v = (*v - PIXEL_MEAN) / PIXEL_STD;
        }
    }
}

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

fn patches_at(image: &Image, grid: CropGrid) -> Result<PatchBatch> {
    if image.width() != grid.image_size.0 || image.height() != grid.image_size.1 {
        return Err(Error::Geometry(format!(
            "grid built for {:?} applied to {}x{} image",
            grid.image_size,
            image.width(),
            image.height()
        )));
    }
    let (cw, ch) = grid.crop_size;
    let mut data = Vec::with_capacity(grid.n_crops() * cw * ch * CHANNELS);
    for &(x, y) in &grid.offsets {
        data.extend_from_slice(image.crop(x, y, cw, ch)?.data());
    }
    Ok(PatchBatch {
        data,
        n_samples: 1,
        dropout_mask: vec![true; grid.n_crops()],
        grid,
    })
}

/// Exact pixel copies of every grid rectangle of one image.
pub fn extract_patches(image: &Image, grid: &CropGrid) -> Result<PatchBatch> {
    patches_at(image, grid.clone())
}

/// Zeroes each (sample, patch) independently with probability `p_d`. When
/// every patch of a sample is dropped, one uniformly chosen patch is
/// restored.
pub fn patch_dropout<R: Rng + ?Sized>(mut batch: PatchBatch, p_d: f64, rng: &mut R) -> Result<PatchBatch> {
    if !(0.0..1.0).contains(&p_d) {
        return Err(Error::Config(format!(
            "patch dropout probability must be in [0, 1), got {p_d}"
        )));
    }
    if p_d == 0.0 {
        return Ok(batch);
    }
    let n_c = batch.n_crops();
    let len = batch.patch_len();
    for s in 0..batch.n_samples {
        let mask = &mut batch.dropout_mask[s * n_c..(s + 1) * n_c];
        for keep in mask.iter_mut() {
            if rng.random::<f64>() < p_d {
                *keep = false;
            }
        }
        if mask.iter().all(|k| !k) {
            mask[rng.random_range(0..n_c)] = true;
        }
        for (p, &keep) in mask.iter().enumerate() {
            if !keep {
                let start = (s * n_c + p) * len;
                batch.data[start..start + len].fill(0.0);
            }
        }
    }
    Ok(batch)
}

/// Model input strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Downsample,
    SingleCrop,
    MultiCrop,
    Ordered,
}

impl Strategy {
    pub fn is_patch_based(self) -> bool {
        matches!(self, Strategy::MultiCrop | Strategy::Ordered)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Downsample => "downsample",
            Strategy::SingleCrop => "single_crop",
            Strategy::MultiCrop => "multi_crop",
            Strategy::Ordered => "ordered",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsample" => Ok(Strategy::Downsample),
            "single_crop" => Ok(Strategy::SingleCrop),
            "multi_crop" => Ok(Strategy::MultiCrop),
            "ordered" => Ok(Strategy::Ordered),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected downsample, single_crop, multi_crop or ordered)"
            ))),
        }
    }
}

/// Whole image resampled to the model input size.
pub fn strategy_downsample(image: &Image, target: (usize, usize)) -> Result<Image> {
    image.resize_bilinear(target.0, target.1)
}

/// Centered rectangle spanning 85% of each axis, as `(x, y, w, h)`.
pub fn center_crop_rect(width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (w, h) = (width * 85 / 100, height * 85 / 100);
    ((width - w) / 2, (height - h) / 2, w.max(1), h.max(1))
}

/// Evaluation-time single crop: 85% center crop resized to `target`.
pub fn strategy_single_crop_eval(image: &Image, target: (usize, usize)) -> Result<Image> {
    let (x, y, w, h) = center_crop_rect(image.width(), image.height());
    image.crop(x, y, w, h)?.resize_bilinear(target.0, target.1)
}

/// Training-time single crop: resize by a factor drawn from `scale_range`
/// (raised if needed so the target still fits), then crop `target` at a
/// uniform position.
pub fn strategy_single_crop_train<R: Rng + ?Sized>(
    image: &Image,
    target: (usize, usize),
    scale_range: (f64, f64),
    rng: &mut R,
) -> Result<Image> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid single-crop scale range [{lo}, {hi}]")));
    }
    let mut scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let min_scale = (target.0 as f64 / image.width() as f64).max(target.1 as f64 / image.height() as f64);
    scale = scale.max(min_scale);
    let w = ((image.width() as f64 * scale).round() as usize).max(target.0);
    let h = ((image.height() as f64 * scale).round() as usize).max(target.1);
    let resized = image.resize_bilinear(w, h)?;
    let x = rng.random_range(0..=w - target.0);
    let y = rng.random_range(0..=h - target.1);
    resized.crop(x, y, target.0, target.1)
}

/// `n` crops at independent uniform in-bounds positions.
pub fn strategy_random_crops_train<R: Rng + ?Sized>(
    image: &Image,
    crop_size: (usize, usize),
    n: usize,
    rng: &mut R,
) -> Result<PatchBatch> {
    let (cw, ch) = crop_size;
    if n == 0 || cw > image.width() || ch > image.height() {
        return Err(Error::Geometry(format!(
            "{n} random crops of {cw}x{ch} from {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let offsets = (0..n)
        .map(|_| {
            (
                rng.random_range(0..=image.width() - cw),
                rng.random_range(0..=image.height() - ch),
            )
        })
        .collect();
    let grid = CropGrid {
        image_size: (image.width(), image.height()),
        crop_size,
        layout: GridLayout::Random,
        offsets,
    };
    patches_at(image, grid)
}

/// Fixed-grid patches, identical at training and evaluation time.
pub fn strategy_ordered(image: &Image, grid: &CropGrid) -> Result<PatchBatch> {
    extract_patches(image, grid)
}

/// Mean of per-patch class probability vectors.
pub fn average_predictions(per_patch: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_patch
        .first()
        .ok_or_else(|| Error::Invalid("no patch predictions to average".into()))?;
    let classes = first.len();
    if per_patch.iter().any(|p| p.len() != classes) {
        return Err(Error::Invalid("patch predictions differ in class count".into()));
    }
    let n = per_patch.len() as f64;
    Ok((0..classes)
        .map(|c| per_patch.iter().map(|p| p[c]).sum::<f64>() / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn five_crop_on_600x450() {
        let g = make_grid((600, 450), (224, 224), 5).unwrap();
        assert_eq!(g.offsets, vec![(0, 0), (376, 0), (0, 226), (376, 226), (188, 113)]);
    }

    #[test]
    fn nine_and_sixteen_crop_offsets() {
        let g = make_grid((600, 450), (224, 224), 9).unwrap();
        let mut expected = Vec::new();
        for y in [0, 113, 226] {
            for x in [0, 188, 376] {
                expected.push((x, y));
            }
        }
        assert_eq!(g.offsets, expected);

        let g = make_grid((600, 450), (224, 224), 16).unwrap();
        // 376/3 = 125.33, 226/3 = 75.33
        assert_eq!(g.offsets[..4], [(0, 0), (125, 0), (251, 0), (376, 0)]);
        assert_eq!(
            g.offsets.iter().step_by(4).map(|o| o.1).collect::<Vec<_>>(),
            vec![0, 75, 151, 226]
        );
    }

    #[test]
    fn rounding_is_half_up() {
        // 5 px of slack over 2 steps: 2.5 rounds to 3
        let g = make_grid((15, 15), (10, 10), 9).unwrap();
        assert_eq!(g.offsets[1], (3, 0));
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(make_grid((224, 224), (224, 224), 5).is_err());
        assert!(make_grid((224, 224), (224, 224), 9).is_err());
        assert!(make_grid((100, 100), (120, 50), 9).is_err());
        assert!(make_grid((600, 450), (224, 224), 4).is_err());
    }

    #[test]
    fn regular_grids_overlap_when_crops_exceed_image() {
        for n in [9, 16] {
            let g = make_grid((600, 450), (224, 224), n).unwrap();
            let side = if n == 9 { 3 } else { 4 };
            assert!(side * 224 > 600);
            assert!(g.offsets[1].0 < g.offsets[0].0 + 224);
            assert!(g.offsets[side].1 < 224);
        }
    }

    #[test]
    fn five_crop_leaves_a_gap_on_600x450() {
        let g = make_grid((600, 450), (224, 224), 5).unwrap();
        assert!(!g.covers_image());
        assert!(make_grid((600, 450), (224, 224), 9).unwrap().covers_image());
        assert!(make_grid((600, 450), (224, 224), 16).unwrap().covers_image());
    }

    #[test]
    fn exclusive_cells() {
        let g = make_grid((64, 64), (24, 24), 9).unwrap();
        assert_eq!(g.offsets[..3], [(0, 0), (20, 0), (40, 0)]);
        assert_eq!(g.exclusive_cell(0), Some((0, 0, 20, 20)));
        assert_eq!(g.exclusive_cell(4), Some((24, 24, 16, 16)));
        assert_eq!(g.exclusive_cell(8), Some((44, 44, 20, 20)));
        let five = make_grid((64, 64), (24, 24), 5).unwrap();
        assert_eq!(five.exclusive_cell(0), None);
    }

    #[test]
    fn marker_pixel_reaches_only_containing_patches() {
        let mut img = Image::filled(600, 450, [0.0; 3]);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let g = make_grid((600, 450), (224, 224), 9).unwrap();
        let b = extract_patches(&img, &g).unwrap();
        for p in 0..9 {
            let lit = b.patch(0, p).iter().any(|&v| v > 0.0);
            assert_eq!(lit, p == 0, "patch {p}");
        }
    }

    #[test]
    fn center_crop_85_percent() {
        assert_eq!(center_crop_rect(600, 450), (45, 34, 510, 382));
    }

    #[test]
    fn single_crop_train_stays_in_bounds() {
        let img = Image::from_fn(40, 30, |x, y| [x as f32 / 40.0, y as f32 / 30.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = strategy_single_crop_train(&img, (24, 24), (0.7, 1.1), &mut rng).unwrap();
            assert_eq!((c.width(), c.height()), (24, 24));
        }
        assert!(strategy_single_crop_train(&img, (24, 24), (1.2, 1.1), &mut rng).is_err());
    }

    #[test]
    fn dropout_rejects_certain_drop() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let g = make_grid((64, 64), (24, 24), 9).unwrap();
        let b = extract_patches(&img, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(patch_dropout(b.clone(), 1.0, &mut rng).is_err());
        assert!(patch_dropout(b.clone(), -0.1, &mut rng).is_err());
        assert_eq!(patch_dropout(b.clone(), 0.0, &mut rng).unwrap(), b);
    }

    #[test]
    fn average_predictions_examples() {
        assert_eq!(
            average_predictions(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        let same = vec![0.2, 0.3, 0.5];
        assert_eq!(average_predictions(&[same.clone(), same.clone()]).unwrap(), same);
        assert!(average_predictions(&[]).is_err());
    }
}
