//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.

use diffcore::{Graph, Tensor};
use patchattn::balancing::{
    class_weights, diagnosis_weight, oversample_pool, BalancedBatches, ClassCounts, DiagnosisMultipliers, WeightTable,
};
use patchattn::config::ExperimentConfig;
use patchattn::cropping::{make_grid, patch_dropout, PatchBatch};
use patchattn::data::{DiagnosisMethod, ImageRef, SampleRecord};
use patchattn::experiment::{cmd_gradcheck, cmd_train, METRICS_FILE};
use patchattn::metrics::{confusion, macro_f1, mc_sensitivity, mc_specificity};
use patchattn::model::{attention_forward, Aggregator, BackboneConfig, Model, ModelConfig, Placements, Stage};
use patchattn::synthetic::gen_synthetic;
use patchattn::train::{evaluate, load_dataset, synth_test_spec, train};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::Instant;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config(overrides: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(overrides).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for overrides in [
        &["aggregator=attention", "attention_placement=dual"][..],
        &["aggregator=gru", "attention_placement=none"][..],
    ] {
        let checks = cmd_gradcheck(&config(overrides), false).map_err(|e| e.to_string())?;
        for c in &checks {
            println!("    {c}");
            ensure(
                c.passed(),
                format!("{} max_rel_error {:.2e}", c.component.name(), c.max_rel_error),
            )?;
            lines.push(c.component.name());
        }
    }
    for name in [
        "conv_backbone",
        "attention_initial",
        "attention_end",
        "attention_dual",
        "gru_aggregator",
        "weighted_cross_entropy",
    ] {
        ensure(lines.contains(&name), format!("{name} not checked"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} checks in {secs:.1}s", lines.len()))
}

fn model_config(aggregator: Aggregator, placement: Placements, n_crops: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stages: vec![
                Stage {
                    out_channels: 6,
                    stride: 2,
                },
                Stage {
                    out_channels: 8,
                    stride: 2,
                },
            ],
            classifier_features: 0,
            n_classes: 4,
        },
        aggregator,
        placement,
        n_crops,
        gru_hidden: 5,
    }
}

fn attention_exactness() -> Outcome {
    let model = Model::new(model_config(Aggregator::Attention, Placements::DUAL, 9), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = PatchBatch {
        data: (0..3 * 9 * 3 * 12 * 12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        n_samples: 3,
        grid: make_grid((24, 24), (12, 12), 9).unwrap(),
        dropout_mask: vec![true; 27],
    };
    let pred = model.predict(&batch).map_err(|e| e.to_string())?;
    ensure(pred.attention.len() == 2, "dual placement should report two blocks")?;
    ensure(
        pred.attention.iter().all(|(_, a)| a.iter().all(|&v| v == 0.5)),
        "zero init is not exactly 0.5",
    )?;

    let mut g = Graph::<f64>::new();
    let features = g.constant(Tensor::new(vec![2, 2, 1, 2], vec![1.0, 2.0, -0.5, 0.5, 0.25, -0.75, 3.0, 1.5]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
    let (_, coeff) = attention_forward(&mut g, features, w, b, 2).map_err(|e| e.to_string())?;
    // pooled (0.75, 1.0); pre-activations (2.475, -0.7)
    let expected = [1.0 / (1.0 + (-2.475f64).exp()), 1.0 / (1.0 + 0.7f64.exp())];
    let err = g
        .value(coeff)
        .data()
        .iter()
        .zip(expected)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-10, format!("golden example off by {err:e}"))?;

    for _ in 0..200 {
        let (nb, nc) = (rng.random_range(1..4), rng.random_range(1..6));
        let shape = [
            nb * nc,
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        ];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0)));
        let w = g.constant(Tensor::from_fn(&[nc, nc], |_| rng.random_range(-1.0..1.0)));
        let b = g.constant(Tensor::from_fn(&[nc], |_| rng.random_range(-1.0..1.0)));
        let (out, _) = attention_forward(&mut g, x, w, b, nc).map_err(|e| e.to_string())?;
        ensure(
            g.shape(out) == shape,
            format!("shape {:?} became {:?}", shape, g.shape(out)),
        )?;
    }
    Ok(format!("golden error {err:.1e}, 200 shapes preserved"))
}

fn crop_geometry() -> Outcome {
    let five = make_grid((600, 450), (224, 224), 5).map_err(|e| e.to_string())?;
    ensure(
        five.offsets == [(0, 0), (376, 0), (0, 226), (376, 226), (188, 113)],
        format!("five-crop offsets {:?}", five.offsets),
    )?;
    let nine = make_grid((600, 450), (224, 224), 9).map_err(|e| e.to_string())?;
    let mut expected = Vec::new();
    for y in [0, 113, 226] {
        for x in [0, 188, 376] {
            expected.push((x, y));
        }
    }
    ensure(
        nine.offsets == expected,
        format!("nine-crop offsets {:?}", nine.offsets),
    )?;
    let mut sizes = 0;
    for n in [9, 16] {
        for w in (240..=640).step_by(40) {
            for h in (240..=600).step_by(40) {
                let g = make_grid((w, h), (224, 224), n).map_err(|e| e.to_string())?;
                let mut hit = vec![false; w * h];
                for &(x, y) in &g.offsets {
                    for yy in y..y + 224 {
                        hit[yy * w + x..yy * w + x + 224].fill(true);
                    }
                }
                ensure(
                    hit.iter().all(|&b| b) && g.covers_image(),
                    format!("{n} crops leave gaps on {w}x{h}"),
                )?;
                sizes += 1;
            }
        }
    }
    Ok(format!("{sizes} grids fully covered"))
}

fn dropout_statistics() -> Outcome {
    let draws = 10_000;
    let n_c = 9;
    let grid = make_grid((6, 6), (2, 2), n_c).unwrap();
    let mut detail = Vec::new();
    for (i, p) in [0.1, 0.3, 0.5].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let batch = PatchBatch {
            data: vec![1.0; draws * n_c * 12],
            n_samples: draws,
            grid: grid.clone(),
            dropout_mask: vec![true; draws * n_c],
        };
        let out = patch_dropout(batch, p, &mut rng).map_err(|e| e.to_string())?;
        for s in 0..draws {
            let sample = &out.data[s * n_c * 12..(s + 1) * n_c * 12];
            ensure(
                sample.iter().any(|&v| v != 0.0),
                format!("sample {s} fully dropped at p_d={p}"),
            )?;
        }
        let dropped = out.dropout_mask.iter().filter(|&&k| !k).count();
        let trials = draws * n_c;
        let rate = dropped as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        // the guard re-enables one patch in a fraction p^N_C of samples
        let expected = p - p.powi(n_c as i32) / n_c as f64;
        ensure(
            (rate - expected).abs() <= 3.0 * sigma,
            format!("p_d={p}: rate {rate:.4}, expected {expected:.4} ± {:.4}", 3.0 * sigma),
        )?;
        detail.push(format!("{p}:{rate:.4}"));
    }
    Ok(format!("drop rates {}", detail.join(" ")))
}

fn balancing_exactness() -> Outcome {
    let table_counts = [1113, 6705, 514, 327, 1099, 115, 142];
    let counts = ClassCounts::new(table_counts.to_vec()).map_err(|e| e.to_string())?;
    let w = class_weights(&counts, 1.0).map_err(|e| e.to_string())?;
    let n = 10015.0;
    for (wi, &ni) in w.iter().zip(&table_counts) {
        ensure((wi - n / ni as f64).abs() < 1e-12, "class weight off the power law")?;
    }
    ensure(
        (w[1] - 1.49366).abs() < 5e-6 && (w[5] - 87.087).abs() < 5e-4,
        format!("weights {w:?}"),
    )?;

    let labels: Vec<usize> = table_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k / 20))
        .collect();
    let batches = BalancedBatches::new(&labels, 7, 28, ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
    for batch in batches.take(500) {
        let mut hist = [0usize; 7];
        batch.iter().for_each(|&i| hist[labels[i]] += 1);
        ensure(hist == [4; 7], format!("unbalanced batch {hist:?}"))?;
    }

    let pool = oversample_pool(&labels, 7).map_err(|e| e.to_string())?;
    let mut hist = [0usize; 7];
    pool.iter().for_each(|&i| hist[labels[i]] += 1);
    ensure(
        hist.iter().all(|&h| h == hist[0]),
        format!("oversampled histogram {hist:?}"),
    )?;

    let benign: BTreeSet<usize> = [1, 4, 5, 6].into();
    let table = WeightTable::new(&counts, 1.0, DiagnosisMultipliers::default(), benign.clone(), false)
        .map_err(|e| e.to_string())?;
    let mult = DiagnosisMultipliers::default().as_array();
    for c in 0..7 {
        for (m, &factor) in DiagnosisMethod::KNOWN.iter().zip(&mult) {
            let record = SampleRecord {
                image_ref: ImageRef::Memory(0),
                label: c,
                diagnosis_method: *m,
            };
            let got = diagnosis_weight(&record, &table).map_err(|e| e.to_string())?;
            let expected = if benign.contains(&c) { w[c] * factor } else { w[c] };
            ensure(
                (got - expected).abs() < 1e-12,
                format!("class {c} {m}: {got} vs {expected}"),
            )?;
        }
    }
    Ok(format!("w_NV={:.5} w_DF={:.3}", w[1], w[5]))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let classes = rng.random_range(2..9);
        let n = rng.random_range(classes..300);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        for (c, l) in labels.iter_mut().take(classes).enumerate() {
            *l = c;
        }
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if rng.random_bool(0.6) {
                    l
                } else {
                    rng.random_range(0..classes)
                }
            })
            .collect();
        let (mut sens, mut spec, mut f1) = (0.0, 0.0, 0.0);
        for c in 0..classes {
            let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
            for (&p, &t) in preds.iter().zip(&labels) {
                match (t == c, p == c) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fn_ += 1.0,
                    (false, false) => tn += 1.0,
                }
            }
            sens += tp / (tp + fn_);
            spec += tn / (tn + fp);
            f1 += if tp > 0.0 {
                2.0 * tp / (2.0 * tp + fp + fn_)
            } else {
                0.0
            };
        }
        let k = classes as f64;
        let cm = confusion(&preds, &labels, classes).map_err(|e| e.to_string())?;
        for (got, want) in [
            (mc_sensitivity(&cm), sens / k),
            (mc_specificity(&cm), spec / k),
            (macro_f1(&cm), f1 / k),
        ] {
            worst = worst.max((got.map_err(|e| e.to_string())? - want).abs());
        }
    }
    ensure(worst < 1e-12, format!("max deviation {worst:e}"))?;
    for classes in [2, 5, 7] {
        let labels: Vec<usize> = (0..classes * 10).map(|i| i % classes).collect();
        let cm = confusion(&vec![1; labels.len()], &labels, classes).map_err(|e| e.to_string())?;
        let s = mc_sensitivity(&cm).map_err(|e| e.to_string())?;
        ensure(
            (s - 1.0 / classes as f64).abs() < 1e-12,
            format!("majority predictor on {classes} classes gives {s}"),
        )?;
    }
    Ok(format!("max deviation {worst:.1e} over 100 instances"))
}

const TINY: &[&str] = &[
    "synth.n_per_class=10,10,10,10,10,10,10",
    "synth.image_size=48x48",
    "synth.crop_size=16x16",
    "synth.blob_size=8",
    "patch_size=16x16",
    "stages=4/2,8/2",
    "epochs=2",
    "batch_size=14",
    "val_fold=none",
];

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config(TINY);
    let mut files = Vec::new();
    let mut slowest = 0.0f64;
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let start = Instant::now();
        cmd_train(&cfg, &out, false).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        files.push(std::fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], "metrics differ between identical runs")?;
    ensure(slowest < 180.0, format!("a run took {slowest:.1}s"))?;
    Ok(format!("{} identical bytes, slowest run {slowest:.1}s", files[0].len()))
}

/// Signal-in-one-patch task shared by the two directional experiments.
const DIRECTIONAL: &[&str] = &[
    "synth.test_per_class=100",
    "val_fold=none",
    "synth.image_size=64x64",
    "synth.crop_size=24x24",
    "patch_size=24x24",
    "synth.blob_size=12",
    "stages=8/2,16/2,32/2",
    "p_d=0",
    "learning_rate=0.01",
];

fn directional(extra: &[&str], seed: u64) -> ExperimentConfig {
    let seed = [format!("seed={seed}"), format!("synth.seed={seed}")];
    let all: Vec<&str> = DIRECTIONAL
        .iter()
        .copied()
        .chain(extra.iter().copied())
        .chain(seed.iter().map(String::as_str))
        .collect();
    config(&all)
}

fn attention_vs_averaging() -> Outcome {
    let start = Instant::now();
    let common = ["synth.n_per_class=200,200,200,200,200,200,200", "epochs=40"];
    let mut wins = 0;
    let mut focused = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let att = directional(
            &[
                &common[..],
                &["strategy=ordered", "aggregator=attention", "attention_placement=dual"],
            ]
            .concat(),
            seed,
        );
        let avg = directional(
            &[
                &common[..],
                &["strategy=multi_crop", "aggregator=average", "attention_placement=none"],
            ]
            .concat(),
            seed,
        );
        let data = load_dataset(&att).map_err(|e| e.to_string())?;
        let att_model = train(&att, &data).map_err(|e| e.to_string())?.model;
        let att_eval = evaluate(&att, &att_model, &data, &data.test).map_err(|e| e.to_string())?;
        let avg_model = train(&avg, &data).map_err(|e| e.to_string())?.model;
        let avg_eval = evaluate(&avg, &avg_model, &data, &data.test).map_err(|e| e.to_string())?;

        let (a, b) = (att_eval.summary.mc_sensitivity, avg_eval.summary.mc_sensitivity);
        if a - b >= 0.05 {
            wins += 1;
        }
        let signal: Vec<usize> = gen_synthetic(&synth_test_spec(&att))
            .map_err(|e| e.to_string())?
            .samples
            .iter()
            .map(|s| s.signal_cell)
            .collect();
        let weights = att_eval.attention.ok_or("attention model reports no coefficients")?;
        let n_c = 9;
        let (mut on, mut off) = (0.0, 0.0);
        for (s, &cell) in signal.iter().enumerate() {
            let row = &weights[s * n_c..(s + 1) * n_c];
            on += row[cell];
            off += (row.iter().sum::<f64>() - row[cell]) / (n_c - 1) as f64;
        }
        let (on, off) = (on / signal.len() as f64, off / signal.len() as f64);
        if on > off {
            focused += 1;
        }
        println!("    seed {seed}: attention {a:.4} averaging {b:.4} weight signal {on:.3} others {off:.3}");
        detail.push(format!("{:+.1}pp", 100.0 * (a - b)));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(wins >= 2, format!("attention ahead by 5pp in {wins}/3 seeds"))?;
    ensure(focused >= 2, format!("signal patch favored in {focused}/3 seeds"))?;
    ensure(secs <= 1200.0, format!("took {secs:.0}s"))?;
    Ok(format!("margins {} in {secs:.0}s", detail.join(" ")))
}

fn imbalance() -> Outcome {
    let start = Instant::now();
    let common = [
        "synth.n_per_class=20,400,20,20,20,20,20",
        "epochs=20",
        "strategy=ordered",
        "aggregator=average",
        "attention_placement=none",
    ];
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let none = directional(&[&common[..], &["balancing=none"]].concat(), seed);
        let weighted = directional(&[&common[..], &["balancing=loss_weighting", "k=1"]].concat(), seed);
        let data = load_dataset(&none).map_err(|e| e.to_string())?;
        let mut sens = Vec::new();
        for cfg in [&none, &weighted] {
            let model = train(cfg, &data).map_err(|e| e.to_string())?.model;
            sens.push(
                evaluate(cfg, &model, &data, &data.test)
                    .map_err(|e| e.to_string())?
                    .summary
                    .mc_sensitivity,
            );
        }
        if sens[1] - sens[0] >= 0.10 {
            wins += 1;
        }
        println!("    seed {seed}: none {:.4} loss weighting {:.4}", sens[0], sens[1]);
        detail.push(format!("{:+.1}pp", 100.0 * (sens[1] - sens[0])));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(wins >= 2, format!("loss weighting ahead by 10pp in {wins}/3 seeds"))?;
    ensure(secs <= 900.0, format!("took {secs:.0}s"))?;
    Ok(format!("margins {} in {secs:.0}s", detail.join(" ")))
}

fn parameter_overhead() -> Outcome {
    for n in [5, 9, 16] {
        let params = |agg, p| {
            Model::new(model_config(agg, p, n), 0)
                .map(|m| m.num_params())
                .map_err(|e| e.to_string())
        };
        let base = params(Aggregator::Average, Placements::NONE)?;
        for p in [Placements::INITIAL, Placements::END] {
            let delta = params(Aggregator::Attention, p)? - base;
            ensure(delta == n * n + n, format!("N_C={n}: one block adds {delta}"))?;
        }
        let delta = params(Aggregator::Attention, Placements::DUAL)? - base;
        ensure(delta == 2 * (n * n + n), format!("N_C={n}: two blocks add {delta}"))?;
    }
    Ok("N_C in {5, 9, 16}".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("attention block exactness", attention_exactness),
        ("crop geometry", crop_geometry),
        ("patch dropout statistics", dropout_statistics),
        ("balancing exactness", balancing_exactness),
        ("metrics oracle", metrics_oracle),
        ("determinism", determinism),
        ("attention vs averaging", attention_vs_averaging),
        ("imbalance", imbalance),
        ("attention parameter overhead", parameter_overhead),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<30} PASS  {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} {name:<30} FAIL  {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
