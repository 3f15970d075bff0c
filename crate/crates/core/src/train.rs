//! Dataset assembly, the training loop and evaluation.
//!
//! All randomness derives from the configured seed: model initialization,
//! the per-epoch sample order, and one ChaCha stream per (epoch, slot) for
//! augmentation, crop positions and patch dropout. Input preparation may
//! run on several threads without changing any result.

use crate::balancing::{
    class_weights, diagnosis_weight, oversample_pool, BalancedBatches, Balancing, ClassCounts, WeightTable,
};
use crate::config::{DataSource, ExperimentConfig};
use crate::cropping::{
    make_grid, patch_dropout, strategy_downsample, strategy_ordered, strategy_random_crops_train,
    strategy_single_crop_eval, strategy_single_crop_train, PatchBatch, Strategy,
};
use crate::data::{augment, load_manifest, load_samples, stratified_split, Part, Sample, SampleRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{confusion, ConfusionMatrix, MetricSummary};
use crate::model::{input_tensor, Model, Placement};
use crate::synthetic::{gen_synthetic, SynthDataset, SynthSpec};
use diffcore::{collect_grads, AdamState, Graph};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Decoded samples plus the index sets used for one run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label()).collect()
    }
}

fn synth_samples(d: SynthDataset, prefix: &str) -> Vec<Sample> {
    d.samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample {
            id: format!("{prefix}{i:05}"),
            image: Arc::new(s.image),
            record: s.record,
        })
        .collect()
}

/// Seed offset separating a synthetic test set from its training pool.
const TEST_SEED_OFFSET: u64 = 0x7E57_0000_0000;

/// Generated test set matching the training pool's appearance.
pub fn synth_test_spec(cfg: &ExperimentConfig) -> SynthSpec {
    SynthSpec {
        n_per_class: vec![cfg.synth_test_per_class; cfg.n_classes()],
        seed: cfg.synth.seed.wrapping_add(TEST_SEED_OFFSET),
        ..cfg.synth.clone()
    }
}

/// Splits `pool` into train/val/test by the stratified four-part protocol.
/// With `explicit_test`, the stratified test part rejoins training.
fn assign(
    records: &[SampleRecord],
    cfg: &ExperimentConfig,
    explicit_test: bool,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let split = stratified_split(records, cfg.seed);
    let val_part = cfg.val_fold.and_then(Part::fold);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (i, &p) in split.parts.iter().enumerate() {
        if Some(p) == val_part {
            val.push(i);
        } else if p == Part::Test && !explicit_test {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val, test)
}

/// Loads or generates the data described by `cfg` and splits it.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (mut samples, explicit_test) = match &cfg.data {
        DataSource::Synthetic => (
            synth_samples(gen_synthetic(&cfg.synth)?, "synth"),
            cfg.synth_test_per_class > 0,
        ),
        DataSource::Manifest(path) => (load_samples(&load_manifest(path, &cfg.classes)?)?, false),
    };
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let (train, val, mut test) = assign(&records, cfg, explicit_test);
    if explicit_test {
        let start = samples.len();
        samples.extend(synth_samples(gen_synthetic(&synth_test_spec(cfg))?, "synth_test"));
        test = (start..samples.len()).collect();
    }
    Ok(Dataset {
        class_names: cfg.classes.clone(),
        samples,
        train,
        val,
        test,
    })
}

fn sample_rng(seed: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A_5EED);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

/// Normalized model input for one image; `rng` selects training mode.
pub fn make_input(cfg: &ExperimentConfig, image: &Image, rng: Option<&mut ChaCha8Rng>) -> Result<PatchBatch> {
    let size = cfg.patch_size;
    let grid = || make_grid((image.width(), image.height()), size, cfg.n_crops);
    let mut batch = match rng {
        Some(rng) => {
            let aug;
            let img = if cfg.augment {
                aug = augment(image, &cfg.augmentation, rng);
                &aug
            } else {
                image
            };
            let batch = match cfg.strategy {
                Strategy::Downsample => PatchBatch::from_image(&strategy_downsample(img, size)?),
                Strategy::SingleCrop => {
                    PatchBatch::from_image(&strategy_single_crop_train(img, size, cfg.single_crop_scale, rng)?)
                }
                Strategy::MultiCrop => strategy_random_crops_train(img, size, cfg.n_crops, rng)?,
                Strategy::Ordered => strategy_ordered(img, &grid()?)?,
            };
            let mut batch = batch;
            batch.normalize();
            if cfg.strategy == Strategy::Ordered {
                batch = patch_dropout(batch, cfg.p_d, rng)?;
            }
            return Ok(batch);
        }
        None => match cfg.strategy {
            Strategy::Downsample => PatchBatch::from_image(&strategy_downsample(image, size)?),
            Strategy::SingleCrop => PatchBatch::from_image(&strategy_single_crop_eval(image, size)?),
            Strategy::MultiCrop | Strategy::Ordered => strategy_ordered(image, &grid()?)?,
        },
    };
    batch.normalize();
    Ok(batch)
}

/// Inputs for `indices`, prepared on `cfg.workers` threads. Slot `j` of
/// the batch uses stream `slot_base + j` when training.
fn prepare(
    cfg: &ExperimentConfig,
    data: &Dataset,
    indices: &[usize],
    train: Option<(usize, usize)>,
) -> Result<PatchBatch> {
    let one = |j: usize, i: usize| -> Result<PatchBatch> {
        let image = &data.samples[i].image;
        match train {
            Some((epoch, base)) => make_input(cfg, image, Some(&mut sample_rng(cfg.seed, epoch, base + j))),
            None => make_input(cfg, image, None),
        }
    };
    let workers = cfg.workers.min(indices.len()).max(1);
    let parts: Vec<PatchBatch> = if workers == 1 {
        indices
            .iter()
            .enumerate()
            .map(|(j, &i)| one(j, i))
            .collect::<Result<_>>()?
    } else {
        let chunk = indices.len().div_ceil(workers);
        let one = &one;
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .enumerate()
                .map(|(c, idx)| {
                    s.spawn(move || {
                        idx.iter()
                            .enumerate()
                            .map(|(j, &i)| one(c * chunk + j, i))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("input worker panicked"))
                .collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    PatchBatch::stack(&parts)
}

/// Per-sample loss weights for the configured balancing strategy, indexed
/// by dataset position.
pub fn loss_weights(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<f64>> {
    let n = data.samples.len();
    if !cfg.balancing.uses_loss_weights() {
        return Ok(vec![1.0; n]);
    }
    let counts = ClassCounts::from_labels(&data.labels(&data.train), cfg.n_classes())?;
    if cfg.balancing == Balancing::LossWeighting {
        let w = class_weights(&counts, cfg.k)?;
        return Ok(data.samples.iter().map(|s| w[s.label()]).collect());
    }
    let table = WeightTable::new(
        &counts,
        cfg.k,
        cfg.diagnosis_multipliers,
        cfg.benign_indices()?.into_iter().collect(),
        cfg.allow_unknown_method,
    )?;
    let mut out = vec![1.0; n];
    for &i in &data.train {
        out[i] = diagnosis_weight(&data.samples[i].record, &table)?;
    }
    Ok(out)
}

/// Sample order of each epoch.
enum Sampler {
    Shuffle(ChaCha8Rng),
    Oversample(ChaCha8Rng, Vec<usize>),
    Balanced(BalancedBatches<ChaCha8Rng>),
}

impl Sampler {
    fn new(cfg: &ExperimentConfig, data: &Dataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 << 62);
        let labels = data.labels(&data.train);
        Ok(match cfg.balancing {
            Balancing::Oversample => {
                let pool = oversample_pool(&labels, cfg.n_classes())?;
                Sampler::Oversample(rng, pool.into_iter().map(|p| data.train[p]).collect())
            }
            Balancing::BalancedBatches => {
                Sampler::Balanced(BalancedBatches::new(&labels, cfg.n_classes(), cfg.batch_size, rng)?)
            }
            _ => Sampler::Shuffle(rng),
        })
    }

    /// Batches of dataset indices for one epoch of `train.len()` samples.
    fn epoch(&mut self, train: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
        match self {
            Sampler::Shuffle(rng) => {
                let mut order = train.to_vec();
                order.shuffle(rng);
                order.chunks(batch_size).map(<[usize]>::to_vec).collect()
            }
            Sampler::Oversample(rng, pool) => {
                let order: Vec<usize> = (0..train.len())
                    .map(|_| pool[rng.random_range(0..pool.len())])
                    .collect();
                order.chunks(batch_size).map(<[usize]>::to_vec).collect()
            }
            Sampler::Balanced(it) => it
                .take(train.len().div_ceil(batch_size))
                .map(|b| b.into_iter().map(|p| train[p]).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train: MetricSummary,
    pub val: Option<MetricSummary>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model from the best validation epoch, or the last epoch without a
    /// validation set.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |best, (i, &p)| if p > best.1 { (i, p) } else { best },
        )
        .0
}

/// Trains a fresh model on `data.train`, selecting by validation
/// MC-sensitivity.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let classes = cfg.n_classes();
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let weights = loss_weights(cfg, data)?;
    let mut sampler = Sampler::new(cfg, data)?;
    let mut adam = AdamState::new(cfg.adam, model.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let mut preds = Vec::with_capacity(data.train.len());
        let mut labels_seen = Vec::with_capacity(data.train.len());
        let mut loss_sum = 0.0;
        let mut slot = 0;
        for batch_idx in sampler.epoch(&data.train, cfg.batch_size) {
            let batch = prepare(cfg, data, &batch_idx, Some((epoch, slot)))?;
            slot += batch_idx.len();
            let labels = data.labels(&batch_idx);
            let w: Vec<f32> = batch_idx.iter().map(|&i| weights[i] as f32).collect();
            let mut g = Graph::<f32>::new();
            let vars = model.params().bind(&mut g);
            let input = g.constant(input_tensor(&batch)?);
            let fwd = model.forward(&mut g, &vars, input)?;
            let loss = model.loss(&mut g, &fwd, &labels, &w)?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &vars);
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            loss_sum += g.value(loss).item()? as f64 * batch_idx.len() as f64;
            preds.extend(g.value(fwd.probs).data().chunks(classes).map(argmax));
            labels_seen.extend(labels);
        }
        let loss = loss_sum / labels_seen.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!(
                "training diverged at epoch {epoch}: loss {loss}"
            )));
        }
        let train_summary = MetricSummary::from_confusion(&confusion(&preds, &labels_seen, classes)?)?;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(cfg, &model, data, &data.val)?.summary)
        };
        info!(
            "epoch {epoch}: loss {loss:.4} train MC-sens {:.4}{}",
            train_summary.mc_sensitivity,
            val.as_ref()
                .map(|v| format!(" val MC-sens {:.4}", v.mc_sensitivity))
                .unwrap_or_default()
        );
        let score = val.as_ref().map_or(epoch as f64, |v| v.mc_sensitivity);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        history.push(EpochRecord {
            epoch,
            loss,
            train: train_summary,
            val,
        });
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub summary: MetricSummary,
    pub predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    /// Flattened `[N, N_C]` coefficients of the last attention block.
    pub attention: Option<Vec<f64>>,
    pub attention_placement: Option<Placement>,
}

/// Deterministic evaluation without augmentation or dropout.
pub fn evaluate(cfg: &ExperimentConfig, model: &Model, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let mut probs = Vec::with_capacity(indices.len());
    let mut attention: Option<(Placement, Vec<f64>)> = None;
    for chunk in indices.chunks(cfg.eval_batch_size) {
        let batch = prepare(cfg, data, chunk, None)?;
        let pred = model.predict(&batch)?;
        probs.extend(pred.probs);
        if let Some((p, a)) = pred.attention.into_iter().last() {
            attention.get_or_insert_with(|| (p, Vec::new())).1.extend(a);
        }
    }
    let predictions: Vec<usize> = probs
        .iter()
        .map(|r: &Vec<f64>| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
                .0
        })
        .collect();
    let cm = confusion(&predictions, &data.labels(indices), cfg.n_classes())?;
    Ok(Evaluation {
        summary: MetricSummary::from_confusion(&cm)?,
        confusion: cm,
        predictions,
        probs,
        attention_placement: attention.as_ref().map(|a| a.0),
        attention: attention.map(|a| a.1),
    })
}
