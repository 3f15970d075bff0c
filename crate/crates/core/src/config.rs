//! Experiment configuration: a plain `key = value` file with `#` comments,
//! overridable per key from the command line.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! [`ExperimentConfig::to_text`] writes the fully resolved configuration in
//! the same syntax.

use crate::balancing::{Balancing, DiagnosisMultipliers};
use crate::cropping::Strategy;
use crate::data::{class_names, AugmentConfig, HAM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Aggregator, BackboneConfig, ModelConfig, Placements, Stage};
use crate::synthetic::{SignalPolicy, SynthSpec};
use diffcore::AdamConfig;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub data: DataSource,
    pub classes: Vec<String>,
    /// Cross-validation fold held out for model selection; `None` trains
    /// on every non-test part and keeps the last epoch.
    pub val_fold: Option<usize>,
    pub synth: SynthSpec,
    /// Synthetic test images per class generated separately from the
    /// training pool; 0 uses the stratified test part instead.
    pub synth_test_per_class: usize,

    pub strategy: Strategy,
    pub patch_size: (usize, usize),
    pub n_crops: usize,
    pub p_d: f64,
    pub single_crop_scale: (f64, f64),
    pub augment: bool,
    pub augmentation: AugmentConfig,

    pub stages: Vec<Stage>,
    pub classifier_features: usize,
    pub aggregator: Aggregator,
    pub attention_placement: Placements,
    pub gru_hidden: usize,

    pub balancing: Balancing,
    pub k: f64,
    pub diagnosis_multipliers: DiagnosisMultipliers,
    pub benign_classes: Vec<String>,
    pub allow_unknown_method: bool,

    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Data-preparation threads; results do not depend on the count.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let classes = class_names(HAM_CLASSES.len());
        Self {
            run_id: "run".into(),
            data: DataSource::Synthetic,
            val_fold: Some(0),
            synth: SynthSpec::default_with(vec![40; classes.len()], 0),
            synth_test_per_class: 0,
            classes,
            strategy: Strategy::Ordered,
            patch_size: (64, 64),
            n_crops: 9,
            p_d: 0.2,
            single_crop_scale: (0.7, 1.1),
            augment: true,
            augmentation: AugmentConfig::default(),
            stages: BackboneConfig::default_for(HAM_CLASSES.len()).stages,
            classifier_features: 0,
            aggregator: Aggregator::Attention,
            attention_placement: Placements::DUAL,
            gru_hidden: 128,
            balancing: Balancing::None,
            k: 1.0,
            diagnosis_multipliers: DiagnosisMultipliers::default(),
            benign_classes: ["NV", "BKL", "DF", "VASC"].map(String::from).to_vec(),
            allow_unknown_method: false,
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 28,
            eval_batch_size: 64,
            seed: 0,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, value: &str, sep: char) -> Result<(T, T)>
where
    T::Err: Display,
{
    let (a, b) = value
        .split_once(sep)
        .ok_or_else(|| Error::Config(format!("{key}: expected `a{sep}b`, got {value:?}")))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run_id" => {
                if v.is_empty() || v.contains([',', '\n', '"']) {
                    return Err(Error::Config(format!(
                        "run_id {v:?} must be non-empty without commas or quotes"
                    )));
                }
                self.run_id = v.to_string();
            }
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    _ => match v.strip_prefix("manifest:") {
                        Some(p) => DataSource::Manifest(PathBuf::from(p)),
                        None => {
                            return Err(Error::Config(format!(
                                "data: expected `synthetic` or `manifest:<path>`, got {v:?}"
                            )))
                        }
                    },
                }
            }
            "classes" => self.classes = parse_list(key, v)?,
            "val_fold" => {
                self.val_fold = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            "synth.n_per_class" => self.synth.n_per_class = parse_list(key, v)?,
            "synth.test_per_class" => self.synth_test_per_class = parse(key, v)?,
            "synth.image_size" => self.synth.image_size = parse_pair(key, v, 'x')?,
            "synth.crop_size" => self.synth.crop_size = parse_pair(key, v, 'x')?,
            "synth.grid_crops" => self.synth.n_crops = parse(key, v)?,
            "synth.policy" => self.synth.policy = parse::<SignalPolicy>(key, v)?,
            "synth.blob_size" => self.synth.blob_size = parse(key, v)?,
            "synth.amplitude" => self.synth.amplitude = parse(key, v)?,
            "synth.distractor_ratio" => self.synth.distractor_ratio = parse_pair(key, v, ',')?,
            "synth.gain" => self.synth.gain = parse_pair(key, v, ',')?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.diagnosis_weights" => {
                let w: Vec<f64> = parse_list(key, v)?;
                self.synth.diagnosis_weights = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 4 weights")))?;
            }
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "strategy" => self.strategy = parse::<Strategy>(key, v)?,
            "patch_size" => self.patch_size = parse_pair(key, v, 'x')?,
            "n_crops" => self.n_crops = parse(key, v)?,
            "p_d" => self.p_d = parse(key, v)?,
            "single_crop_scale" => self.single_crop_scale = parse_pair(key, v, ',')?,
            "augment" => self.augment = parse_bool(key, v)?,
            "brightness" => self.augmentation.brightness = parse_pair(key, v, ',')?,
            "saturation" => self.augmentation.saturation = parse_pair(key, v, ',')?,
            "stages" => {
                self.stages = v
                    .split(',')
                    .map(|s| {
                        let (c, st) = parse_pair::<usize>(key, s, '/')?;
                        Ok(Stage {
                            out_channels: c,
                            stride: st,
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            "classifier_features" => self.classifier_features = parse(key, v)?,
            "aggregator" => self.aggregator = parse::<Aggregator>(key, v)?,
            "attention_placement" => self.attention_placement = parse::<Placements>(key, v)?,
            "gru_hidden" => self.gru_hidden = parse(key, v)?,
            "balancing" => self.balancing = parse::<Balancing>(key, v)?,
            "k" => self.k = parse(key, v)?,
            "diagnosis_multipliers" => {
                self.diagnosis_multipliers = DiagnosisMultipliers::from_slice(&parse_list::<f64>(key, v)?)?
            }
            "benign_classes" => self.benign_classes = parse_list(key, v)?,
            "allow_unknown_method" => self.allow_unknown_method = parse_bool(key, v)?,
            "learning_rate" => self.adam.learning_rate = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "epsilon" => self.adam.epsilon = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Resolved configuration as ordered `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let pair = |a: &dyn Display, b: &dyn Display, sep: &str| format!("{a}{sep}{b}");
        let s = &self.synth;
        vec![
            ("run_id", self.run_id.clone()),
            (
                "data",
                match &self.data {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Manifest(p) => format!("manifest:{}", p.display()),
                },
            ),
            ("classes", join(&self.classes)),
            ("val_fold", self.val_fold.map_or("none".into(), |f| f.to_string())),
            ("synth.n_per_class", join(&s.n_per_class)),
            ("synth.test_per_class", self.synth_test_per_class.to_string()),
            ("synth.image_size", pair(&s.image_size.0, &s.image_size.1, "x")),
            ("synth.crop_size", pair(&s.crop_size.0, &s.crop_size.1, "x")),
            ("synth.grid_crops", s.n_crops.to_string()),
            ("synth.policy", s.policy.to_string()),
            ("synth.blob_size", s.blob_size.to_string()),
            ("synth.amplitude", s.amplitude.to_string()),
            (
                "synth.distractor_ratio",
                pair(&s.distractor_ratio.0, &s.distractor_ratio.1, ","),
            ),
            ("synth.gain", pair(&s.gain.0, &s.gain.1, ",")),
            ("synth.noise", s.noise.to_string()),
            ("synth.diagnosis_weights", join(&s.diagnosis_weights)),
            ("synth.seed", s.seed.to_string()),
            ("strategy", self.strategy.to_string()),
            ("patch_size", pair(&self.patch_size.0, &self.patch_size.1, "x")),
            ("n_crops", self.n_crops.to_string()),
            ("p_d", self.p_d.to_string()),
            (
                "single_crop_scale",
                pair(&self.single_crop_scale.0, &self.single_crop_scale.1, ","),
            ),
            ("augment", self.augment.to_string()),
            (
                "brightness",
                pair(&self.augmentation.brightness.0, &self.augmentation.brightness.1, ","),
            ),
            (
                "saturation",
                pair(&self.augmentation.saturation.0, &self.augmentation.saturation.1, ","),
            ),
            (
                "stages",
                self.stages
                    .iter()
                    .map(|s| format!("{}/{}", s.out_channels, s.stride))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("classifier_features", self.classifier_features.to_string()),
            ("aggregator", self.aggregator.to_string()),
            ("attention_placement", self.attention_placement.to_string()),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("balancing", self.balancing.to_string()),
            ("k", self.k.to_string()),
            ("diagnosis_multipliers", join(&self.diagnosis_multipliers.as_array())),
            ("benign_classes", join(&self.benign_classes)),
            ("allow_unknown_method", self.allow_unknown_method.to_string()),
            ("learning_rate", self.adam.learning_rate.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("epsilon", self.adam.epsilon.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Patches per sample fed to the model.
    pub fn model_crops(&self) -> usize {
        if self.strategy.is_patch_based() {
            self.n_crops
        } else {
            1
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stages: self.stages.clone(),
                classifier_features: self.classifier_features,
                n_classes: self.n_classes(),
            },
            aggregator: self.aggregator,
            placement: self.attention_placement,
            n_crops: self.model_crops(),
            gru_hidden: self.gru_hidden,
        }
    }

    pub fn benign_indices(&self) -> Result<Vec<usize>> {
        self.benign_classes
            .iter()
            .map(|b| {
                self.classes
                    .iter()
                    .position(|c| c == b)
                    .ok_or_else(|| Error::Config(format!("benign class {b:?} is not one of classes")))
            })
            .collect()
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::Config(format!("classes: need at least 2, got {c}")));
        }
        if self.classes.iter().collect::<HashSet<_>>().len() != c {
            return Err(Error::Config("classes: names must be unique".into()));
        }
        let model = self.model_config();
        model.validate()?;
        model.check_strategy(self.strategy)?;
        if self.strategy.is_patch_based() && ![5, 9, 16].contains(&self.n_crops) {
            return Err(Error::Config(format!(
                "n_crops must be 5, 9 or 16, got {}",
                self.n_crops
            )));
        }
        if !(0.0..1.0).contains(&self.p_d) {
            return Err(Error::Config(format!("p_d must be in [0, 1), got {}", self.p_d)));
        }
        if self.p_d > 0.0 && self.strategy != Strategy::Ordered {
            return Err(Error::Config(format!(
                "p_d={} applies only to strategy=ordered, got strategy={}",
                self.p_d, self.strategy
            )));
        }
        if self.patch_size.0 == 0 || self.patch_size.1 == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!(
                "k must be a non-negative number, got {}",
                self.k
            )));
        }
        self.diagnosis_multipliers.validate()?;
        self.benign_indices()?;
        if self.balancing == Balancing::BalancedBatches && self.batch_size % c != 0 {
            return Err(Error::Config(format!(
                "balancing=balanced_batches needs batch_size divisible by {c} classes, got batch_size={}",
                self.batch_size
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch sizes and workers must be positive".into()));
        }
        if let Some(f) = self.val_fold {
            if f > 2 {
                return Err(Error::Config(format!("val_fold must be 0, 1, 2 or none, got {f}")));
            }
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0)
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        let (lo, hi) = self.single_crop_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("single_crop_scale: invalid range {lo},{hi}")));
        }
        for (name, (lo, hi)) in [
            ("brightness", self.augmentation.brightness),
            ("saturation", self.augmentation.saturation),
        ] {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name}: invalid range {lo},{hi}")));
            }
        }
        if self.data == DataSource::Synthetic && self.synth.n_per_class.len() != c {
            return Err(Error::Config(format!(
                "synth.n_per_class lists {} classes but classes lists {c}",
                self.synth.n_per_class.len()
            )));
        }
        Ok(())
    }

    /// Digest of everything that determines the parameter layout and the
    /// meaning of the model's inputs and outputs.
    pub fn model_hash(&self) -> String {
        let keys = [
            "classes",
            "strategy",
            "patch_size",
            "n_crops",
            "stages",
            "classifier_features",
            "aggregator",
            "attention_placement",
            "gru_hidden",
        ];
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if keys.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
