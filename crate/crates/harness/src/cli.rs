//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::dataset::{make_synthetic_dataset, SPLITS};
use crate::experiment::{load_checkpoint, load_dataset, run_spec, train_and_save, RowKind, RunOptions, RESULTS_FILE};
use crate::export::export_attention;
use crate::spec::{validate_config, DatasetSource, ExperimentSpec};

#[derive(Debug, Parser)]
#[command(name = "duoformer", version, about = "Train, evaluate and ablate DuoFormer models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the spec's base configuration once and save the best checkpoint.
    Train(Common),
    /// Score a checkpoint on the test split of the spec's dataset.
    Eval(WithCheckpoint),
    /// Run every grid point of the spec with repeated seeds.
    Grid(Common),
    /// Write the spec's synthetic dataset as MSTF files plus a manifest.
    SynthData(Common),
    /// Report configuration violations of the base config and every grid point.
    Validate(Common),
    /// Dump attention weights of a checkpoint on test samples.
    ExportAttn(WithCheckpoint),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment spec.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the spec's base seed (the dataset seed for `synth-data`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the spec's repeat count.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Grid runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    pub device_threads: usize,
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples to trace (`export-attn`).
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

fn load_spec(c: &Common) -> anyhow::Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    if let Some(r) = c.repeats {
        spec.repeats = r;
    }
    Ok(spec)
}

fn require_out(c: &Common) -> anyhow::Result<&Path> {
    match &c.out {
        Some(p) => Ok(p),
        None => bail!("--out is required for this command"),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Validate(c) => {
            let spec = load_spec(&c)?;
            let mut ok = true;
            for point in spec.points() {
                match validate_config(&point.apply(&spec.model)) {
                    Ok(()) => println!("ok      {}", point.key()),
                    Err(v) => {
                        ok = false;
                        println!("invalid {}: {}", point.key(), v.join("; "));
                    }
                }
            }
            if let Err(e) = spec.validate() {
                ok = false;
                println!("invalid spec: {e}");
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::SynthData(c) => {
            let spec = load_spec(&c)?;
            let out = require_out(&c)?;
            let DatasetSource::Synthetic(s) = &spec.dataset else {
                bail!("synth-data needs a synthetic dataset in the spec");
            };
            let seed = c.seed.unwrap_or(s.seed);
            let manifest = make_synthetic_dataset(s, &spec.model.backbone, seed, out)?;
            for name in SPLITS {
                println!("{name}: {} items", manifest.splits.get(name).len());
            }
            println!("wrote {}", out.join("manifest.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(c) => {
            let spec = load_spec(&c)?;
            spec.validate()?;
            spec.model.validate()?;
            let out = require_out(&c)?;
            let dataset = load_dataset(&spec)?;
            let report = train_and_save(&spec, &dataset, out)?;
            println!(
                "test balanced accuracy {:.4}, accuracy {:.4}, loss {:.4}",
                report.balanced_accuracy, report.accuracy, report.loss
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(w) => {
            let spec = load_spec(&w.common)?;
            let model = load_checkpoint(&w.checkpoint)?;
            let dataset = load_dataset(&spec)?;
            let report = duoformer::trainer::evaluate(&model, &dataset.test, spec.train.batch_size)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(out) = &w.common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("eval_report.json"), text + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid(c) => {
            let spec = load_spec(&c)?;
            let opts = RunOptions {
                out: c.out.clone(),
                threads: c.device_threads,
            };
            let results = run_spec(&spec, &opts)?;
            for r in results.of_kind(RowKind::Aggregate) {
                let mean = r.mean_test_balanced_acc.unwrap_or(f64::NAN);
                let std = r.std_test_balanced_acc.map_or("n/a".to_string(), |s| format!("{s:.4}"));
                println!("{:<60} {mean:.4} ± {std} (n={})", r.point_key, r.n_runs.unwrap_or(0));
            }
            for r in results.of_kind(RowKind::Skipped).chain(results.of_kind(RowKind::Failed)) {
                println!("{:<60} {:?}: {}", r.point_key, r.row_kind, r.reason.as_deref().unwrap_or(""));
            }
            if let Some(out) = &c.out {
                println!("wrote {}", out.join(RESULTS_FILE).display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportAttn(w) => {
            let spec = load_spec(&w.common)?;
            let out = require_out(&w.common)?;
            let model = load_checkpoint(&w.checkpoint)?;
            let dataset = load_dataset(&spec)?;
            let files = export_attention(&model, &dataset.test, w.count, out)?;
            println!("wrote {} trace files to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
