//! Sample records, manifest ingestion, stratified splitting and online
//! augmentation.

use crate::error::{Error, Result};
use crate::image::Image;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

/// HAM10000 class order.
pub const HAM_CLASSES: [&str; 7] = ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"];

/// Class names for `n` classes: the HAM names for seven, `C0..` otherwise.
pub fn class_names(n: usize) -> Vec<String> {
    if n == HAM_CLASSES.len() {
        HAM_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("C{i}")).collect()
    }
}

/// Method used to establish a sample's ground truth, cheapest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiagnosisMethod {
    ExpertConsensus,
    SerialImaging,
    ConfocalMicroscopy,
    Histopathology,
    Unknown,
}

impl DiagnosisMethod {
    pub const KNOWN: [DiagnosisMethod; 4] = [
        DiagnosisMethod::ExpertConsensus,
        DiagnosisMethod::SerialImaging,
        DiagnosisMethod::ConfocalMicroscopy,
        DiagnosisMethod::Histopathology,
    ];
}

impl fmt::Display for DiagnosisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiagnosisMethod::ExpertConsensus => "expert_consensus",
            DiagnosisMethod::SerialImaging => "serial_imaging",
            DiagnosisMethod::ConfocalMicroscopy => "confocal_microscopy",
            DiagnosisMethod::Histopathology => "histopathology",
            DiagnosisMethod::Unknown => "unknown",
        })
    }
}

impl FromStr for DiagnosisMethod {
    type Err = Error;

    /// Accepts the long names and the HAM10000 `dx_type` spellings.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "expert_consensus" | "consensus" => Ok(DiagnosisMethod::ExpertConsensus),
            "serial_imaging" | "follow_up" => Ok(DiagnosisMethod::SerialImaging),
            "confocal_microscopy" | "confocal" => Ok(DiagnosisMethod::ConfocalMicroscopy),
            "histopathology" | "histo" => Ok(DiagnosisMethod::Histopathology),
            "" | "unknown" => Ok(DiagnosisMethod::Unknown),
            other => Err(Error::Invalid(format!("unknown diagnosis method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(usize),
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "{}", p.display()),
            ImageRef::Memory(i) => write!(f, "mem:{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_ref: ImageRef,
    pub label: usize,
    pub diagnosis_method: DiagnosisMethod,
}

/// A decoded sample ready for training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Image>,
    pub record: SampleRecord,
}

impl Sample {
    pub fn label(&self) -> usize {
        self.record.label
    }
}

fn parse_label(raw: &str, class_names: &[String]) -> Option<usize> {
    let raw = raw.trim();
    class_names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(raw))
        .or_else(|| raw.parse::<usize>().ok().filter(|&i| i < class_names.len()))
}

/// Reads `image,label[,diagnosis_method]` rows. Labels are class names or
/// indices; relative image paths resolve against the manifest directory.
pub fn load_manifest(path: &Path, class_names: &[String]) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Manifest {
                row: 0,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(image_col), Some(label_col)) = (col("image"), col("label")) else {
        return Err(Error::Manifest {
            row: 0,
            message: format!("header must contain image and label columns, got {headers:?}"),
        });
    };
    let method_col = col("diagnosis_method");
    let base = path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        // header is row 1
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Manifest {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let image = field(image_col);
        if image.is_empty() {
            return Err(Error::Manifest {
                row: row_no,
                message: "empty image path".into(),
            });
        }
        let label = parse_label(field(label_col), class_names).ok_or_else(|| Error::Manifest {
            row: row_no,
            message: format!("unknown label {:?}", field(label_col)),
        })?;
        let diagnosis_method = match method_col {
            Some(c) => field(c).parse().map_err(|e: Error| Error::Manifest {
                row: row_no,
                message: e.to_string(),
            })?,
            None => DiagnosisMethod::Unknown,
        };
        let p = Path::new(image);
        let image_path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if !seen.insert(image_path.clone()) {
            warn!("manifest row {row_no}: duplicate image {}", image_path.display());
        }
        records.push(SampleRecord {
            image_ref: ImageRef::Path(image_path),
            label,
            diagnosis_method,
        });
    }
    info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

/// Decodes every path-backed record.
pub fn load_samples(records: &[SampleRecord]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| match &r.image_ref {
            ImageRef::Path(p) => Ok(Sample {
                id: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image: Arc::new(Image::load(p)?),
                record: r.clone(),
            }),
            ImageRef::Memory(i) => Err(Error::Invalid(format!("record mem:{i} has no file to load"))),
        })
        .collect()
}

/// One of four equally sized, class-stratified parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Fold0,
    Fold1,
    Fold2,
    Test,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Fold0, Part::Fold1, Part::Fold2, Part::Test];

    pub fn fold(i: usize) -> Option<Part> {
        Part::ALL.get(i).copied().filter(|p| *p != Part::Test)
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Fold0 => "fold0",
            Part::Fold1 => "fold1",
            Part::Fold2 => "fold2",
            Part::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    /// Part of each record, index-aligned with the input records.
    pub parts: Vec<Part>,
}

impl SplitSpec {
    pub fn indices(&self, part: Part) -> Vec<usize> {
        (0..self.parts.len()).filter(|&i| self.parts[i] == part).collect()
    }

    /// Training indices for a cross-validation round: the two folds other
    /// than `val`.
    pub fn train_indices(&self, val: Part) -> Vec<usize> {
        (0..self.parts.len())
            .filter(|&i| self.parts[i] != val && self.parts[i] != Part::Test)
            .collect()
    }

    pub fn write_csv(&self, path: &Path, records: &[SampleRecord]) -> Result<()> {
        let mut out = String::from("image,part\n");
        for (r, p) in records.iter().zip(&self.parts) {
            out.push_str(&format!("{},{p}\n", r.image_ref));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Shuffles each class and deals its records round-robin into the four
/// parts. The dealing position carries over between classes so part
/// totals stay within one of each other as well.
pub fn stratified_split(records: &[SampleRecord], seed: u64) -> SplitSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let mut parts = vec![Part::Test; records.len()];
    let mut next = 0usize;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == c).collect();
        if !idx.is_empty() && idx.len() < Part::ALL.len() {
            warn!("class {c} has only {} samples; some parts get none", idx.len());
        }
        idx.shuffle(&mut rng);
        for i in idx {
            parts[i] = Part::ALL[next % Part::ALL.len()];
            next += 1;
        }
    }
    SplitSpec { seed, parts }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub brightness: (f32, f32),
    pub saturation: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: (0.85, 1.15),
            saturation: (0.85, 1.15),
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub brightness: f32,
    pub saturation: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip_horizontal: false,
        flip_vertical: false,
        brightness: 1.0,
        saturation: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let draw = |rng: &mut R, (lo, hi): (f32, f32)| if lo < hi { rng.random_range(lo..=hi) } else { lo };
        Self {
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            brightness: draw(rng, cfg.brightness),
            saturation: draw(rng, cfg.saturation),
        }
    }

    /// Flips, scales all channels by `brightness`, blends each pixel
    /// toward its luma by `saturation`, then clamps to `[0, 1]`.
    pub fn apply(&self, image: &Image) -> Image {
        let mut out = if self.flip_horizontal {
            image.flip_horizontal()
        } else {
            image.clone()
        };
        if self.flip_vertical {
            out = out.flip_vertical();
        }
        if self.brightness == 1.0 && self.saturation == 1.0 {
            return out;
        }
        for px in out.data_mut().chunks_mut(3) {
            let [r, g, b] = [
                px[0] * self.brightness,
                px[1] * self.brightness,
                px[2] * self.brightness,
            ];
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            for (dst, v) in px.iter_mut().zip([r, g, b]) {
                *dst = (luma + self.saturation * (v - luma)).clamp(0.0, 1.0);
            }
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    Augmentation::sample(cfg, rng).apply(image)
}
