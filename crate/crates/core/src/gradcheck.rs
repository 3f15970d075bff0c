//! Finite-difference verification of each trainable component of a model
//! configuration, run at 64-bit on a shrunken copy of the network.

use crate::error::{Error, Result};
use crate::model::{Aggregator, BackboneConfig, Model, ModelConfig, Stage};
use diffcore::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use diffcore::{CustomOp, DiffError, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;

/// Tolerance for paths that cross a ReLU.
pub const RELU_TOLERANCE: f64 = 1e-4;
/// Tolerance for paths without a ReLU.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;

const SAMPLES: usize = 2;
const INPUT_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Backbone,
    AttentionInitial,
    AttentionEnd,
    AttentionDual,
    Gru,
    WeightedCrossEntropy,
    /// Cross-entropy behind an operation whose backward is deliberately
    /// wrong; the check is expected to fail.
    NegativeControl,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "conv_backbone",
            Component::AttentionInitial => "attention_initial",
            Component::AttentionEnd => "attention_end",
            Component::AttentionDual => "attention_dual",
            Component::Gru => "gru_aggregator",
            Component::WeightedCrossEntropy => "weighted_cross_entropy",
            Component::NegativeControl => "negative_control",
        }
    }

    fn tolerance(self) -> f64 {
        match self {
            Component::Backbone | Component::AttentionInitial | Component::AttentionDual => RELU_TOLERANCE,
            _ => SMOOTH_TOLERANCE,
        }
    }

    fn selects(self, name: &str) -> bool {
        match self {
            Component::Backbone => name.starts_with("backbone."),
            Component::AttentionInitial => name.starts_with("attention.initial."),
            Component::AttentionEnd => name.starts_with("attention.end."),
            Component::AttentionDual => name.starts_with("attention."),
            Component::Gru => name.starts_with("gru."),
            Component::WeightedCrossEntropy | Component::NegativeControl => false,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Components present in `config`, in network order.
pub fn components_for(config: &ModelConfig) -> Vec<Component> {
    let mut out = vec![Component::Backbone];
    let p = config.placement;
    if p.initial {
        out.push(Component::AttentionInitial);
    }
    if p.end {
        out.push(Component::AttentionEnd);
    }
    if p.initial && p.end {
        out.push(Component::AttentionDual);
    }
    if config.aggregator == Aggregator::Gru {
        out.push(Component::Gru);
    }
    out.push(Component::WeightedCrossEntropy);
    out
}

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: Component,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Parameter holding the worst probe.
    pub worst_param: String,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// True when the outcome is the expected one: a pass for real
    /// components, a failure for the negative control.
    pub fn as_expected(&self) -> bool {
        self.passed() != (self.component == Component::NegativeControl)
    }
}

impl fmt::Display for ComponentCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let note = match (self.component, self.as_expected()) {
            (Component::NegativeControl, true) => " (expected)",
            (Component::NegativeControl, false) => " (control not detected)",
            _ => "",
        };
        write!(
            f,
            "{:<24} {verdict}{note} max_rel_error={:.3e} tol={:.0e} probes={} worst={}",
            self.component.name(),
            self.max_rel_error,
            self.tolerance,
            self.probes,
            self.worst_param
        )
    }
}

/// Same architecture family as `config` at a size where every check takes
/// milliseconds.
pub fn tiny_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stages: vec![
                Stage {
                    out_channels: 4,
                    stride: 2,
                },
                Stage {
                    out_channels: 5,
                    stride: 2,
                },
            ],
            classifier_features: 0,
            n_classes: config.backbone.n_classes,
        },
        aggregator: config.aggregator,
        placement: config.placement,
        n_crops: config.n_crops,
        gru_hidden: config.gru_hidden.clamp(1, 6),
    }
}

fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Invalid {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        probes: 40,
        floor: 1e-6,
        seed,
    }
}

struct Fixture {
    model: Model,
    params: ParamSet<f64>,
    input: Tensor<f64>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

fn fixture(config: &ModelConfig, seed: u64) -> Result<Fixture> {
    let config = tiny_config(config);
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let mut params = model.params().cast::<f64>();
    for (name, t) in params.names().to_vec().into_iter().zip(params.tensors_mut()) {
        if name.starts_with("attention.") || name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    let n = SAMPLES * config.n_crops;
    let input = Tensor::from_fn(&[n, 3, INPUT_SIDE, INPUT_SIDE], |_| normal.sample(&mut rng) * 2.0);
    let classes = config.backbone.n_classes;
    Ok(Fixture {
        model,
        params,
        input,
        labels: (0..SAMPLES).map(|i| (i * 2 + 1) % classes).collect(),
        weights: (0..SAMPLES).map(|i| 0.7 + i as f64 * 1.3).collect(),
    })
}

fn check_model_subset(fx: &Fixture, component: Component, seed: u64) -> Result<GradCheckReport> {
    let mut probed = ParamSet::new();
    let mut slots = Vec::with_capacity(fx.params.len());
    for (name, t) in fx.params.iter() {
        if component.selects(name) {
            slots.push(Some(probed.len()));
            probed.push(name, t.clone());
        } else {
            slots.push(None);
        }
    }
    if probed.is_empty() {
        return Err(Error::Invalid(format!("model has no parameters for {component}")));
    }
    let report = grad_check(
        |g, sub| {
            let vars: Vec<Var> = fx
                .params
                .tensors()
                .iter()
                .zip(&slots)
                .map(|(t, s)| match s {
                    Some(j) => sub[*j],
                    None => g.constant(t.clone()),
                })
                .collect();
            let x = g.constant(fx.input.clone());
            let fwd = fx.model.forward(g, &vars, x).map_err(to_diff)?;
            fx.model.loss(g, &fwd, &fx.labels, &fx.weights).map_err(to_diff)
        },
        &probed,
        &check_config(seed),
    )?;
    Ok(report)
}

/// Squares its input but reports a gradient of `3x` instead of `2x`.
struct CorruptedSquare;

impl CustomOp<f64> for CorruptedSquare {
    fn name(&self) -> &str {
        "corrupted_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> diffcore::Result<Tensor<f64>> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| 3.0 * x * g).collect()]
    }
}

fn check_cross_entropy(classes: usize, corrupted: bool, seed: u64) -> Result<GradCheckReport> {
    let rows = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.5).expect("valid normal");
    let mut params = ParamSet::new();
    params.push("logits", Tensor::from_fn(&[rows, classes], |_| normal.sample(&mut rng)));
    let labels: Vec<usize> = (0..rows).map(|i| (i * 3) % classes).collect();
    let weights: Vec<f64> = (0..rows).map(|i| 0.25 + 0.6 * i as f64).collect();
    let report = grad_check(
        |g, v| {
            let logits = if corrupted {
                g.custom(&[v[0]], Box::new(CorruptedSquare))?
            } else {
                v[0]
            };
            g.weighted_cross_entropy(logits, &labels, &weights)
        },
        &params,
        &check_config(seed),
    )?;
    Ok(report)
}

/// Checks one component of `config`.
pub fn check_component(config: &ModelConfig, component: Component, seed: u64) -> Result<ComponentCheck> {
    let classes = config.backbone.n_classes;
    let report = match component {
        Component::WeightedCrossEntropy => check_cross_entropy(classes, false, seed)?,
        Component::NegativeControl => check_cross_entropy(classes, true, seed)?,
        _ => check_model_subset(&fixture(config, seed)?, component, seed)?,
    };
    Ok(ComponentCheck {
        component,
        probes: report.probes.len(),
        max_rel_error: report.max_rel_error,
        tolerance: component.tolerance(),
        worst_param: report
            .worst()
            .map(|p| format!("{}[{}]", p.param, p.index))
            .unwrap_or_default(),
    })
}

/// Checks every component of `config`, followed by the negative control
/// when requested.
pub fn check_all(config: &ModelConfig, negative_control: bool, seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut components = components_for(config);
    if negative_control {
        components.push(Component::NegativeControl);
    }
    components
        .into_iter()
        .map(|c| check_component(config, c, seed))
        .collect()
}
