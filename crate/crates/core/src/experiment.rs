//! Commands behind the `patchattn` binary. Each writes into its own output
//! directory and refuses to touch a non-empty one unless asked to.

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::cropping::{make_grid, Strategy};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, ComponentCheck};
use crate::metrics::MetricSummary;
use crate::model::{write_attention_csv, Aggregator, AttentionRow, Model, Placements};
use crate::synthetic::{gen_synthetic, SynthSpec};
use crate::train::{evaluate, load_dataset, train, Dataset, Evaluation, TrainOutcome};
use log::info;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPLIT_FILE: &str = "split.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Creates `dir`, emptying it first when `overwrite` is set. A non-empty
/// directory without `overwrite` is an error.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            if !overwrite {
                return Err(Error::Invalid(format!(
                    "output directory {} is not empty (pass --overwrite to replace it)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Split membership as `image,part` rows.
fn split_csv(data: &Dataset) -> String {
    let mut parts = vec![""; data.samples.len()];
    for (set, name) in [(&data.train, "train"), (&data.val, "val"), (&data.test, "test")] {
        for &i in set {
            parts[i] = name;
        }
    }
    let mut out = String::from("image,part\n");
    for (s, p) in data.samples.iter().zip(parts) {
        if !p.is_empty() {
            let _ = writeln!(out, "{},{p}", s.id);
        }
    }
    out
}

fn train_log_csv(cfg: &ExperimentConfig, history: &[crate::train::EpochRecord]) -> String {
    let mut out = MetricSummary::csv_header(&["run_id", "epoch", "split", "loss"], &cfg.classes);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},train,{:.6},{}",
            cfg.run_id,
            r.epoch,
            r.loss,
            r.train.csv_fields()
        );
        if let Some(v) = &r.val {
            let _ = writeln!(out, "{},{},val,,{}", cfg.run_id, r.epoch, v.csv_fields());
        }
    }
    out
}

fn metrics_csv(cfg: &ExperimentConfig, rows: &[(&str, &MetricSummary)]) -> String {
    let mut out = MetricSummary::csv_header(&["run_id", "split"], &cfg.classes);
    out.push('\n');
    for (split, m) in rows {
        let _ = writeln!(out, "{},{split},{}", cfg.run_id, m.csv_fields());
    }
    out
}

#[derive(Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub data: Dataset,
    pub val: Option<Evaluation>,
    pub test: Option<Evaluation>,
}

impl TrainRun {
    /// Held-out evaluation used for reporting: test, else validation.
    pub fn held_out(&self) -> Option<(&'static str, &Evaluation)> {
        self.test
            .as_ref()
            .map(|e| ("test", e))
            .or_else(|| self.val.as_ref().map(|e| ("val", e)))
    }
}

/// Trains one model and writes the resolved config, split, per-epoch log,
/// checkpoint and held-out metrics of the selected model.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<TrainRun> {
    cfg.validate()?;
    prepare_output_dir(out, overwrite)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let data = load_dataset(cfg)?;
    write_file(&out.join(SPLIT_FILE), &split_csv(&data))?;
    info!(
        "{}: {} train, {} val, {} test samples",
        cfg.run_id,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = train(cfg, &data)?;
    write_file(&out.join(TRAIN_LOG_FILE), &train_log_csv(cfg, &outcome.history))?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &cfg.model_hash(), outcome.model.params())?;
    let eval = |idx: &[usize]| {
        (!idx.is_empty())
            .then(|| evaluate(cfg, &outcome.model, &data, idx))
            .transpose()
    };
    let val = eval(&data.val)?;
    let test = eval(&data.test)?;
    let mut rows = Vec::new();
    if let Some(v) = &val {
        rows.push(("val", &v.summary));
    }
    if let Some(t) = &test {
        rows.push(("test", &t.summary));
    }
    write_file(&out.join(METRICS_FILE), &metrics_csv(cfg, &rows))?;
    Ok(TrainRun {
        outcome,
        data,
        val,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    fn indices(self, data: &Dataset) -> &[usize] {
        match self {
            EvalSplit::Train => &data.train,
            EvalSplit::Val => &data.val,
            EvalSplit::Test => &data.test,
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Invalid(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Loads a checkpoint trained under `cfg`, rejecting a config mismatch.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<Model> {
    let ck = checkpoint::load(path)?;
    let expected = cfg.model_hash();
    if ck.config_hash != expected {
        return Err(Error::Checkpoint(format!(
            "{} was written for config hash {}, but the current config hashes to {expected}",
            path.display(),
            ck.config_hash
        )));
    }
    Model::from_params(cfg.model_config(), ck.params)
}

/// Attention coefficients of an evaluation as report rows.
pub fn attention_rows(
    cfg: &ExperimentConfig,
    data: &Dataset,
    indices: &[usize],
    eval: &Evaluation,
) -> Result<Vec<AttentionRow>> {
    let Some(weights) = &eval.attention else {
        return Ok(Vec::new());
    };
    let nc = cfg.n_crops;
    let mut rows = Vec::with_capacity(weights.len());
    for (j, &i) in indices.iter().enumerate() {
        let s = &data.samples[i];
        let grid = make_grid((s.image.width(), s.image.height()), cfg.patch_size, nc)?;
        for (p, &(x, y)) in grid.offsets.iter().enumerate() {
            rows.push(AttentionRow {
                sample_id: s.id.clone(),
                patch_index: p,
                x,
                y,
                weight: weights[j * nc + p],
            });
        }
    }
    Ok(rows)
}

/// Evaluates a checkpoint on one split with the fixed evaluation grid and
/// writes metrics plus, for attention models, per-patch weights.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: EvalSplit,
    out: &Path,
    overwrite: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    prepare_output_dir(out, overwrite)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let data = load_dataset(cfg)?;
    let indices = split.indices(&data);
    if indices.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty for this configuration")));
    }
    let eval = evaluate(cfg, &model, &data, indices)?;
    write_file(
        &out.join(METRICS_FILE),
        &metrics_csv(cfg, &[(&split.to_string(), &eval.summary)]),
    )?;
    if eval.attention.is_some() {
        write_attention_csv(&out.join(ATTENTION_FILE), &attention_rows(cfg, &data, indices, &eval)?)?;
    }
    Ok(eval)
}

/// Config field varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    PDrop,
    NCrops,
    Balancing,
    Aggregator,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::PDrop => "p_d",
            SweepAxis::NCrops => "n_crops",
            SweepAxis::Balancing => "balancing",
            SweepAxis::Aggregator => "aggregator",
        }
    }

    fn numeric(self) -> bool {
        matches!(self, SweepAxis::K | SweepAxis::PDrop | SweepAxis::NCrops)
    }

    /// `base` with the axis set to `value`. Switching the aggregator also
    /// switches the attention placement and strategy to a compatible one.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.set(self.key(), value)?;
        if self == SweepAxis::Aggregator {
            match cfg.aggregator {
                Aggregator::Attention if cfg.attention_placement.is_empty() => {
                    cfg.attention_placement = Placements::DUAL;
                }
                Aggregator::Attention => {}
                _ => cfg.attention_placement = Placements::NONE,
            }
            if cfg.aggregator != Aggregator::Average {
                cfg.strategy = Strategy::Ordered;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "p_d" => Ok(SweepAxis::PDrop),
            "n_crops" => Ok(SweepAxis::NCrops),
            "balancing" => Ok(SweepAxis::Balancing),
            "aggregator" => Ok(SweepAxis::Aggregator),
            other => Err(Error::Invalid(format!(
                "unknown sweep axis {other:?} (expected k, p_d, n_crops, balancing or aggregator)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub split: &'static str,
    pub metrics: MetricSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub value: String,
    pub runs: usize,
    /// `(mean, population standard deviation)` per metric.
    pub mc_sensitivity: (f64, f64),
    pub mc_specificity: (f64, f64),
    pub macro_f1: (f64, f64),
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sorted, validated sweep values. Numeric axes sort numerically.
pub fn sweep_values(axis: SweepAxis, values: &[String]) -> Result<Vec<String>> {
    if values.is_empty() {
        return Err(Error::Invalid(format!("sweep over {axis} needs at least one value")));
    }
    let mut sorted: Vec<String> = values.iter().map(|v| v.trim().to_string()).collect();
    if axis.numeric() {
        let mut keyed = sorted
            .into_iter()
            .map(|v| {
                v.parse::<f64>()
                    .map(|x| (x, v.clone()))
                    .map_err(|_| Error::Invalid(format!("sweep value {v:?} for {axis} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        sorted = keyed.into_iter().map(|(_, v)| v).collect();
    } else {
        sorted.sort();
    }
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("sweep value {:?} is listed twice", w[0])));
    }
    Ok(sorted)
}

/// Trains one run per value and seed, writing each run into its own
/// subdirectory and a consolidated table with per-value mean ± std.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    overwrite: bool,
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    let values = sweep_values(axis, values)?;
    if seeds.is_empty() {
        return Err(Error::Invalid("sweep needs at least one seed".into()));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    prepare_output_dir(out, overwrite)?;
    write_file(&out.join(CONFIG_FILE), &base.to_text())?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let mut per_value = Vec::new();
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            cfg.run_id = format!("{}-{axis}={value}-seed{seed}", base.run_id);
            let run = cmd_train(&cfg, &out.join(&cfg.run_id), true)?;
            let (split, eval) = run
                .held_out()
                .ok_or_else(|| Error::Invalid("sweep runs need a validation or test split".into()))?;
            info!(
                "{}: {split} MC-sensitivity {:.4}",
                cfg.run_id, eval.summary.mc_sensitivity
            );
            per_value.push(eval.summary.clone());
            rows.push(SweepRow {
                value: value.clone(),
                seed,
                split,
                metrics: eval.summary.clone(),
            });
        }
        let col = |f: fn(&MetricSummary) -> f64| mean_std(&per_value.iter().map(f).collect::<Vec<_>>());
        summaries.push(SweepSummary {
            value: value.clone(),
            runs: per_value.len(),
            mc_sensitivity: col(|m| m.mc_sensitivity),
            mc_specificity: col(|m| m.mc_specificity),
            macro_f1: col(|m| m.macro_f1),
        });
    }
    let mut table = MetricSummary::csv_header(&[axis.key(), "seed", "split"], &base.classes);
    table.push('\n');
    for r in &rows {
        let _ = writeln!(table, "{},{},{},{}", r.value, r.seed, r.split, r.metrics.csv_fields());
    }
    write_file(&out.join(SWEEP_FILE), &table)?;
    let mut summary = format!(
        "{},runs,mc_sensitivity_mean,mc_sensitivity_std,mc_specificity_mean,mc_specificity_std,macro_f1_mean,macro_f1_std\n",
        axis.key()
    );
    for s in &summaries {
        let _ = writeln!(
            summary,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.value,
            s.runs,
            s.mc_sensitivity.0,
            s.mc_sensitivity.1,
            s.mc_specificity.0,
            s.mc_specificity.1,
            s.macro_f1.0,
            s.macro_f1.1
        );
    }
    write_file(&out.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok((rows, summaries))
}

/// Runs the gradient check for every component of the configured model.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, negative_control: bool) -> Result<Vec<ComponentCheck>> {
    cfg.validate()?;
    check_all(&cfg.model_config(), negative_control, cfg.seed)
}

/// Writes a synthetic dataset as PNG files plus a manifest and returns the
/// per-class image counts.
pub fn cmd_gen_synth(spec: &SynthSpec, class_names: &[String], out: &Path, overwrite: bool) -> Result<Vec<usize>> {
    if class_names.len() != spec.n_classes() {
        return Err(Error::Config(format!(
            "{} class names for {} synthetic classes",
            class_names.len(),
            spec.n_classes()
        )));
    }
    let data = gen_synthetic(spec)?;
    prepare_output_dir(out, overwrite)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::from("image,label,diagnosis_method\n");
    let mut histogram = vec![0; class_names.len()];
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("images/synth{i:05}.png");
        s.image.save(&out.join(&name))?;
        let _ = writeln!(
            manifest,
            "{name},{},{}",
            class_names[s.record.label], s.record.diagnosis_method
        );
        histogram[s.record.label] += 1;
    }
    write_file(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(histogram)
}
