use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use patchattn::config::ExperimentConfig;
use patchattn::experiment::{
    cmd_eval, cmd_gen_synth, cmd_gradcheck, cmd_sweep, cmd_train, EvalSplit, SweepAxis, ATTENTION_FILE,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "patchattn",
    version,
    about = "Patch-attention image classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Prepare inputs on a single worker.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if self.deterministic {
            cfg.workers = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save its checkpoint and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate a checkpoint on a split and report attention weights.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of train, val, test.
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train one run per value and seed and tabulate the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of k, p_d, n_crops, balancing, aggregator.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Number of seeds, counting up from the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Finite-difference check of every trainable component.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also check a deliberately wrong backward pass, which must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Write the configured synthetic dataset as PNG files and a manifest.
    GenSynth {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, output } => {
            let cfg = config.resolve()?;
            let run = cmd_train(&cfg, &output.out, output.overwrite)?;
            println!("best epoch {} of {}", run.outcome.best_epoch, cfg.epochs);
            if let Some((split, eval)) = run.held_out() {
                println!(
                    "{split}: mc_sensitivity={:.4} mc_specificity={:.4} macro_f1={:.4}",
                    eval.summary.mc_sensitivity, eval.summary.mc_specificity, eval.summary.macro_f1
                );
            }
            println!("wrote {}", output.out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            output,
        } => {
            let cfg = config.resolve()?;
            let eval = cmd_eval(&cfg, &checkpoint, split, &output.out, output.overwrite)?;
            println!(
                "{split}: mc_sensitivity={:.4} mc_specificity={:.4} macro_f1={:.4}",
                eval.summary.mc_sensitivity, eval.summary.mc_specificity, eval.summary.macro_f1
            );
            if eval.attention.is_some() {
                println!("attention weights in {}", output.out.join(ATTENTION_FILE).display());
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            output,
        } => {
            let cfg = config.resolve()?;
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
            let (_, summary) = cmd_sweep(&cfg, axis, &values, &seeds, &output.out, output.overwrite)?;
            println!("{axis:>12}  runs  mc_sensitivity");
            for s in summary {
                println!(
                    "{:>12}  {:>4}  {:.4} ± {:.4}",
                    s.value, s.runs, s.mc_sensitivity.0, s.mc_sensitivity.1
                );
            }
        }
        Command::Gradcheck {
            config,
            negative_control,
        } => {
            let cfg = config.resolve()?;
            let checks = cmd_gradcheck(&cfg, negative_control)?;
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.as_expected()));
        }
        Command::GenSynth { config, output } => {
            let cfg = config.resolve()?;
            let histogram = cmd_gen_synth(&cfg.synth, &cfg.classes, &output.out, output.overwrite)?;
            for (name, n) in cfg.classes.iter().zip(&histogram) {
                println!("{name:<8} {n}");
            }
            println!("{:<8} {}", "total", histogram.iter().sum::<usize>());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
