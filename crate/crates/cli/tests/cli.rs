use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.n_per_class=10,10,10,10,10,10,10",
    "synth.image_size=48x48",
    "synth.crop_size=16x16",
    "synth.blob_size=8",
    "patch_size=16x16",
    "stages=4/2,8/2",
    "epochs=1",
    "batch_size=14",
    "val_fold=none",
];

fn patchattn(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_patchattn"));
    cmd.args(args);
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.env("RUST_LOG", "warn").output().expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_smoke_writes_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = patchattn(&["train", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "{metrics}");
    assert!(lines[0].starts_with("run_id,split,mc_sensitivity,mc_specificity,macro_f1,recall_MEL"));
    assert!(lines[1].starts_with("run,test,"));
    assert_eq!(read(&out.join("train_log.csv")).lines().count(), 2);
    for f in ["config.txt", "model.ckpt", "split.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = patchattn(
            &["train", "--out", out.to_str().unwrap()],
            &["epochs=2", &format!("workers={workers}")],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    for f in ["metrics.csv", "train_log.csv", "model.ckpt", "split.csv"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(outputs[1].join(f)).unwrap(), "{f}");
        assert_eq!(a, std::fs::read(outputs[2].join(f)).unwrap(), "{f} with three workers");
    }
}

#[test]
fn gru_with_single_crop_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = patchattn(
        &["train", "--out", out.to_str().unwrap()],
        &[
            "aggregator=gru",
            "attention_placement=none",
            "strategy=single_crop",
            "n_crops=1",
        ],
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(
        err.contains("aggregator=gru") && err.contains("strategy=single_crop"),
        "{err}"
    );
    assert!(!out.exists());
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let args = ["gen-synth", "--out", out.to_str().unwrap()];
    assert!(patchattn(&args, &[]).status.success());
    let before = read(&out.join("manifest.csv"));
    let o = patchattn(&args, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--overwrite"));
    let o = patchattn(&[&args[..], &["--overwrite"]].concat(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&out.join("manifest.csv")), before);
}

#[test]
fn gen_synth_prints_histogram_and_writes_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let o = patchattn(&["gen-synth", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("MEL      10"), "{stdout}");
    assert!(stdout.contains("total    70"), "{stdout}");
    let manifest = read(&out.join("manifest.csv"));
    assert_eq!(manifest.lines().count(), 71);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 70);

    // train from the written manifest
    let run = dir.path().join("run");
    let data = format!("data=manifest:{}", out.join("manifest.csv").display());
    let o = patchattn(&["train", "--out", run.to_str().unwrap()], &[&data]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_reports_attention_and_checks_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = patchattn(&["train", "--out", run.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("model.ckpt");
    let mut evals = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("eval{i}"));
        let o = patchattn(
            &[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        evals.push(out);
    }
    let attention = read(&evals[0].join("attention.csv"));
    let mut lines = attention.lines();
    assert_eq!(lines.next(), Some("sample_id,patch_index,x,y,weight"));
    let held_out = read(&run.join("split.csv"))
        .lines()
        .filter(|l| l.ends_with(",test"))
        .count();
    assert!(held_out > 0);
    assert_eq!(lines.count(), held_out * 9);
    for f in ["metrics.csv", "attention.csv"] {
        assert_eq!(read(&evals[0].join(f)), read(&evals[1].join(f)), "{f}");
    }
    let o = patchattn(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            dir.path().join("bad").to_str().unwrap(),
        ],
        &["stages=4/2,6/2"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config hash"), "{}", stderr(&o));
}

#[test]
fn sweep_emits_sorted_rows_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = patchattn(
        &[
            "sweep",
            "--axis",
            "k",
            "--values",
            "1.5,0.5,1.0",
            "--seeds",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &["balancing=loss_weighting"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(&out.join("sweep.csv"));
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(
        keys,
        [
            ("0.5", "0"),
            ("0.5", "1"),
            ("1.0", "0"),
            ("1.0", "1"),
            ("1.5", "0"),
            ("1.5", "1")
        ]
    );
    let summary = read(&out.join("sweep_summary.csv"));
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.starts_with("k,runs,mc_sensitivity_mean,mc_sensitivity_std"));
}

#[test]
fn sweep_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = patchattn(&["sweep", "--axis", "k", "--out", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least one value"), "{}", stderr(&o));
    let o = patchattn(
        &[
            "sweep",
            "--axis",
            "depth",
            "--values",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown sweep axis"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_component() {
    let o = patchattn(&["gradcheck", "--negative-control"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    let names: Vec<&str> = lines.iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "conv_backbone",
            "attention_initial",
            "attention_end",
            "attention_dual",
            "weighted_cross_entropy",
            "negative_control"
        ]
    );
    assert!(lines[..5].iter().all(|l| l.contains(" PASS ")), "{stdout}");
    assert!(lines[5].contains("FAIL (expected)"), "{stdout}");

    let o = patchattn(&["gradcheck"], &["aggregator=gru", "attention_placement=none"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gru_aggregator"));
}
