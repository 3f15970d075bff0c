//! Convolutional backbone with patch attention blocks, the GRU aggregation
//! baseline and the per-strategy forward paths.
//!
//! Patches of `N_B` samples with `N_C` crops each are stacked along the
//! batch axis as `[N_B·N_C, 3, h, w]` and share every backbone parameter.

use crate::cropping::{PatchBatch, Strategy};
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use diffcore::{gru_sequence, init, Graph, GruParams, ParamId, ParamSet, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// One `3×3` convolution stage (padding 1) followed by bias and relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<Stage>,
    /// Width of the hidden classifier layer; 0 means a linear head.
    pub classifier_features: usize,
    pub n_classes: usize,
}

pub const KERNEL_SIZE: usize = 3;

impl BackboneConfig {
    /// Four stride-2 stages with 16, 32, 64 and 128 channels.
    pub fn default_for(n_classes: usize) -> Self {
        Self {
            stages: [16, 32, 64, 128]
                .map(|c| Stage {
                    out_channels: c,
                    stride: 2,
                })
                .to_vec(),
            classifier_features: 0,
            n_classes,
        }
    }

    /// Spatial size `(w, h)` of the last stage's feature maps.
    pub fn output_extent(&self, input: (usize, usize)) -> (usize, usize) {
        self.stages.iter().fold(input, |(w, h), s| {
            let out = |x: usize| (x + 2 - KERNEL_SIZE) / s.stride + 1;
            (out(w), out(h))
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(CHANNELS, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregator {
    /// Mean of per-patch class probabilities.
    Average,
    /// Classifier on the final state of a GRU run over the patch features.
    Gru,
    /// Averaging preceded by attention reweighting of patch features.
    Attention,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Average => "average",
            Aggregator::Gru => "gru",
            Aggregator::Attention => "attention",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Aggregator::Average),
            "gru" => Ok(Aggregator::Gru),
            "attention" => Ok(Aggregator::Attention),
            _ => Err(Error::Config(format!(
                "unknown aggregator {s:?} (expected average, gru or attention)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    /// After the first backbone stage.
    Initial,
    /// After the last backbone stage, before pooling.
    End,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Initial => "initial",
            Placement::End => "end",
        })
    }
}

/// Set of attention placements; both at once is dual attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Placements {
    pub initial: bool,
    pub end: bool,
}

impl Placements {
    pub const NONE: Placements = Placements {
        initial: false,
        end: false,
    };
    pub const INITIAL: Placements = Placements {
        initial: true,
        end: false,
    };
    pub const END: Placements = Placements {
        initial: false,
        end: true,
    };
    pub const DUAL: Placements = Placements {
        initial: true,
        end: true,
    };

    pub fn is_empty(self) -> bool {
        !self.initial && !self.end
    }

    pub fn count(self) -> usize {
        self.initial as usize + self.end as usize
    }
}

impl fmt::Display for Placements {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.initial, self.end) {
            (false, false) => "none",
            (true, false) => "initial",
            (false, true) => "end",
            (true, true) => "dual",
        })
    }
}

impl FromStr for Placements {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Placements::NONE),
            "initial" => Ok(Placements::INITIAL),
            "end" => Ok(Placements::END),
            "dual" | "initial+end" => Ok(Placements::DUAL),
            _ => Err(Error::Config(format!(
                "unknown attention placement {s:?} (expected none, initial, end or dual)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub aggregator: Aggregator,
    pub placement: Placements,
    /// Patches per sample seen by the model.
    pub n_crops: usize,
    pub gru_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_crops == 0 {
            return Err(Error::Config("n_crops must be positive".into()));
        }
        match self.aggregator {
            Aggregator::Attention if self.placement.is_empty() => Err(Error::Config(
                "aggregator=attention needs attention_placement initial, end or dual".into(),
            )),
            Aggregator::Average | Aggregator::Gru if !self.placement.is_empty() => Err(Error::Config(format!(
                "attention_placement={} requires aggregator=attention, got aggregator={}",
                self.placement, self.aggregator
            ))),
            Aggregator::Gru if self.gru_hidden == 0 => Err(Error::Config("gru_hidden must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Rejects aggregator/strategy combinations without a defined forward
    /// path.
    pub fn check_strategy(&self, strategy: Strategy) -> Result<()> {
        match strategy {
            Strategy::Downsample | Strategy::SingleCrop | Strategy::MultiCrop
                if self.aggregator != Aggregator::Average =>
            {
                Err(Error::Config(format!(
                    "aggregator={} is incompatible with strategy={strategy}: only ordered crops have fixed patch positions",
                    self.aggregator
                )))
            }
            Strategy::Downsample | Strategy::SingleCrop if self.n_crops != 1 => Err(Error::Config(format!(
                "strategy={strategy} feeds one patch per image, got n_crops={}",
                self.n_crops
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stages: Vec<(ParamId, ParamId)>,
    initial: Option<(ParamId, ParamId)>,
    end: Option<(ParamId, ParamId)>,
    gru: Option<ParamId>,
    hidden: Option<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Class probabilities per sample, `[N_B, C]`.
    pub probs: Var,
    /// Per-sample logits when the head emits one prediction per sample
    /// (one patch, or GRU aggregation).
    pub logits: Option<Var>,
    /// Attention coefficients `[N_B, N_C]` per placement, in network order.
    pub attention: Vec<(Placement, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet<f32>,
    layout: Layout,
}

fn build<R: rand::Rng>(config: &ModelConfig, rng: &mut R) -> (ParamSet<f32>, Layout) {
    let mut p = ParamSet::new();
    let bb = &config.backbone;
    let nc = config.n_crops;
    let attention = |p: &mut ParamSet<f32>, name: &str| {
        (
            p.push(format!("attention.{name}.weights"), Tensor::zeros(&[nc, nc])),
            p.push(format!("attention.{name}.bias"), Tensor::zeros(&[nc])),
        )
    };
    let mut stages = Vec::new();
    let mut initial = None;
    let mut c_in = CHANNELS;
    for (i, s) in bb.stages.iter().enumerate() {
        let fan_in = c_in * KERNEL_SIZE * KERNEL_SIZE;
        let k = p.push(
            format!("backbone.stage{i}.kernel"),
            init::he_normal(&[s.out_channels, c_in, KERNEL_SIZE, KERNEL_SIZE], fan_in, rng),
        );
        let b = p.push(format!("backbone.stage{i}.bias"), Tensor::zeros(&[s.out_channels]));
        stages.push((k, b));
        if i == 0 && config.placement.initial {
            initial = Some(attention(&mut p, "initial"));
        }
        c_in = s.out_channels;
    }
    let end = config.placement.end.then(|| attention(&mut p, "end"));
    let mut features = bb.feature_channels();
    let gru = (config.aggregator == Aggregator::Gru).then(|| {
        GruParams::register(&mut p, "gru", features, config.gru_hidden, rng);
        features = config.gru_hidden;
        p.find("gru.w_z").expect("just registered")
    });
    let hidden = (bb.classifier_features > 0).then(|| {
        let h = bb.classifier_features;
        let ids = (
            p.push("head.hidden.weights", init::he_normal(&[features, h], features, rng)),
            p.push("head.hidden.bias", Tensor::zeros(&[h])),
        );
        features = h;
        ids
    });
    let out = (
        p.push(
            "head.out.weights",
            init::he_normal(&[features, bb.n_classes], features, rng),
        ),
        p.push("head.out.bias", Tensor::zeros(&[bb.n_classes])),
    );
    let layout = Layout {
        stages,
        initial,
        end,
        gru,
        hidden,
        out,
    };
    (p, layout)
}

/// Reweights each patch's feature maps by a learned coefficient.
///
/// `features` is `[N_B·N_C, C, H, W]`. Returns the reweighted features in
/// the same shape and the coefficients `a = σ(GAP(features)·W + b)` as
/// `[N_B, N_C]`, with `W` indexed `[from patch, to patch]`.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    weights: Var,
    bias: Var,
    n_crops: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(features).to_vec();
    let w_shape = g.shape(weights).to_vec();
    if shape.len() != 4 || n_crops == 0 || shape[0] % n_crops != 0 || w_shape != [n_crops, n_crops] {
        return Err(Error::Invalid(format!(
            "attention block with weights {w_shape:?} for {n_crops} crops applied to features {shape:?}"
        )));
    }
    let nb = shape[0] / n_crops;
    let unstacked = g.reshape(features, &[nb, n_crops, shape[1], shape[2], shape[3]])?;
    let pooled = g.global_average_pool(unstacked, &[2, 3, 4])?;
    let pre = g.dense(pooled, weights, Some(bias))?;
    let coeff = g.sigmoid(pre);
    // coefficient b·N_C + p scales stacked patch b·N_C + p
    let out = g.scale_groups(features, coeff)?;
    Ok((out, coeff))
}

/// Final GRU state after consuming the `N_C` patch feature vectors of
/// `[N_B, N_C, F]` in order.
pub fn gru_aggregate<T: Scalar>(g: &mut Graph<T>, patch_features: Var, params: &GruParams) -> Result<Var> {
    Ok(gru_sequence(g, patch_features, params)?)
}

impl Model {
    /// Fresh model with He-initialized backbone and head, zero attention
    /// parameters and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params, layout })
    }

    /// Model with externally supplied parameter values, which must match
    /// the layout implied by `config` by name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model
            .params
            .copy_from(&params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the model configuration: {e}")))?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Weights and bias of the attention block at `placement`.
    pub fn attention_params(&self, placement: Placement) -> Option<(ParamId, ParamId)> {
        match placement {
            Placement::Initial => self.layout.initial,
            Placement::End => self.layout.end,
        }
    }

    /// Builds the forward pass on `g`. `vars` are the bound parameters in
    /// [`Model::params`] order, of any precision; `input` is
    /// `[N_B·N_C, 3, h, w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Result<Forward> {
        let cfg = &self.config;
        let nc = cfg.n_crops;
        let shape = g.shape(input).to_vec();
        if vars.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} bound parameters for a model with {}",
                vars.len(),
                self.params.len()
            )));
        }
        if shape.len() != 4 || shape[1] != CHANNELS || shape[0] % nc != 0 {
            return Err(Error::Invalid(format!(
                "model input {shape:?} is not [N_B*{nc}, {CHANNELS}, h, w]"
            )));
        }
        let nb = shape[0] / nc;
        let v = |id: ParamId| vars[id.index()];
        let mut attention = Vec::new();
        let mut x = input;
        for (i, (stage, &(k, b))) in cfg.backbone.stages.iter().zip(&self.layout.stages).enumerate() {
            x = g.conv2d(x, v(k), stage.stride, (KERNEL_SIZE - 1) / 2)?;
            x = g.channel_bias(x, v(b))?;
            x = g.relu(x);
            if let (0, Some((w, b))) = (i, self.layout.initial) {
                let (y, a) = attention_forward(g, x, v(w), v(b), nc)?;
                x = y;
                attention.push((Placement::Initial, a));
            }
        }
        if let Some((w, b)) = self.layout.end {
            let (y, a) = attention_forward(g, x, v(w), v(b), nc)?;
            x = y;
            attention.push((Placement::End, a));
        }
        let features = g.global_average_pool(x, &[2, 3])?;
        if let Some(first) = self.layout.gru {
            let f = g.shape(features)[1];
            let seq = g.reshape(features, &[nb, nc, f])?;
            let p = GruParams::from_vars(&vars[first.index()..first.index() + 9]);
            let h = gru_aggregate(g, seq, &p)?;
            let logits = self.head(g, vars, h)?;
            let probs = g.softmax(logits)?;
            return Ok(Forward {
                probs,
                logits: Some(logits),
                attention,
            });
        }
        let logits = self.head(g, vars, features)?;
        let patch_probs = g.softmax(logits)?;
        if nc == 1 {
            return Ok(Forward {
                probs: patch_probs,
                logits: Some(logits),
                attention,
            });
        }
        let classes = cfg.backbone.n_classes;
        let grouped = g.reshape(patch_probs, &[nb, nc, classes])?;
        let probs = g.global_average_pool(grouped, &[1])?;
        Ok(Forward {
            probs,
            logits: None,
            attention,
        })
    }

    fn head<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], features: Var) -> Result<Var> {
        let mut x = features;
        if let Some((w, b)) = self.layout.hidden {
            x = g.dense(x, vars[w.index()], Some(vars[b.index()]))?;
            x = g.relu(x);
        }
        let (w, b) = self.layout.out;
        Ok(g.dense(x, vars[w.index()], Some(vars[b.index()]))?)
    }

    /// Weighted mean negative log-likelihood of the sample predictions.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, forward: &Forward, labels: &[usize], weights: &[T]) -> Result<Var> {
        Ok(match forward.logits {
            Some(logits) => g.weighted_cross_entropy(logits, labels, weights)?,
            None => g.weighted_nll(forward.probs, labels, weights)?,
        })
    }

    /// Inference on a normalized patch batch.
    pub fn predict(&self, batch: &PatchBatch) -> Result<Prediction> {
        if batch.n_crops() != self.config.n_crops {
            return Err(Error::Invalid(format!(
                "batch has {} crops per sample, model expects {}",
                batch.n_crops(),
                self.config.n_crops
            )));
        }
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let input = g.constant(input_tensor(batch)?);
        let fwd = self.forward(&mut g, &vars, input)?;
        let classes = self.config.backbone.n_classes;
        let probs = g
            .value(fwd.probs)
            .data()
            .chunks(classes)
            .map(|row| row.iter().map(|&p| p as f64).collect())
            .collect();
        let attention = fwd
            .attention
            .iter()
            .map(|&(p, a)| (p, g.value(a).data().iter().map(|&v| v as f64).collect()))
            .collect();
        Ok(Prediction { probs, attention })
    }
}

/// Output of [`Model::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Class probabilities, one row per sample.
    pub probs: Vec<Vec<f64>>,
    /// Flattened `[N_B, N_C]` coefficients per placement.
    pub attention: Vec<(Placement, Vec<f64>)>,
}

impl Prediction {
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &p)| if p > best.1 { (i, p) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

/// Converts per-patch `h × w × 3` pixels into an `[N_B·N_C, 3, h, w]`
/// tensor.
pub fn input_tensor<T: Scalar>(batch: &PatchBatch) -> Result<Tensor<T>> {
    let [nb, nc, h, w, c] = batch.shape();
    let plane = h * w;
    let mut data = vec![T::zero(); nb * nc * c * plane];
    for (p, patch) in batch.data.chunks(batch.patch_len()).enumerate() {
        let dst = &mut data[p * c * plane..(p + 1) * c * plane];
        for (i, px) in patch.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                dst[ch * plane + i] = T::from_f64_lossy(v as f64);
            }
        }
    }
    Ok(Tensor::new(vec![nb * nc, c, h, w], data)?)
}

/// One row of the attention report.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub sample_id: String,
    pub patch_index: usize,
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// Per-patch attention coefficients with crop positions. Uses the end
/// block when present, otherwise the initial one.
pub fn attention_weight_report(model: &Model, batch: &PatchBatch, sample_ids: &[String]) -> Result<Vec<AttentionRow>> {
    if model.config.placement.is_empty() {
        return Err(Error::Invalid("model has no attention block to report".into()));
    }
    if sample_ids.len() != batch.n_samples {
        return Err(Error::Invalid(format!(
            "{} sample ids for {} samples",
            sample_ids.len(),
            batch.n_samples
        )));
    }
    let pred = model.predict(batch)?;
    let (_, weights) = pred
        .attention
        .iter()
        .rev()
        .next()
        .ok_or_else(|| Error::Invalid("forward pass produced no attention coefficients".into()))?;
    let nc = batch.n_crops();
    Ok(weights
        .iter()
        .enumerate()
        .map(|(i, &weight)| {
            let (x, y) = batch.grid.offsets[i % nc];
            AttentionRow {
                sample_id: sample_ids[i / nc].clone(),
                patch_index: i % nc,
                x,
                y,
                weight,
            }
        })
        .collect())
}

pub fn write_attention_csv(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(["sample_id", "patch_index", "x", "y", "weight"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sample_id.clone(),
            r.patch_index.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            format!("{:.6}", r.weight),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
