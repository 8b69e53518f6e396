//! Running experiment grids and writing their results.
//!
//! Every grid point × repeat is an independent run whose seed depends only on
//! the base seed and the repeat index, never on execution order. Rows are
//! merged in grid-point order by a single writer.

use std::fs;
use std::path::{Path, PathBuf};

use duoformer::checkpoint::Snapshot;
use duoformer::rng::mix_seed;
use duoformer::trainer::{evaluate, train_loop, EpochRecord, EvalReport, TrainConfig};
use duoformer::{DuoFormer64, DuoFormerConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_manifest, Dataset};
use crate::error::{HarnessError, Result};
use crate::spec::{subset_label, DatasetSource, ExperimentSpec, GridPoint};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.csv";
pub const SPEC_ECHO_FILE: &str = "spec.json";

/// Seed of repeat `repeat`. Grid points share it, so every point of a grid
/// sees the same initial draws and the same batch order.
pub fn run_seed(base: u64, repeat: usize) -> u64 {
    mix_seed(base, format!("repeat/{repeat}").as_bytes())
}

pub fn run_id(point: &GridPoint, repeat: usize) -> String {
    format!("p{:03}_r{repeat}", point.index)
}

/// The resolved configuration of one run, echoed into every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: DuoFormerConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Run,
    Aggregate,
    Skipped,
    Failed,
}

/// One line of `results.csv`. Run-only and aggregate-only columns are empty
/// on the other kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub row_kind: RowKind,
    pub point_index: usize,
    pub point_key: String,
    pub run_id: Option<String>,
    pub repeat: Option<usize>,
    pub seed: Option<u64>,
    pub scale_subset: String,
    pub scale_token_mode: String,
    pub heads: usize,
    pub depth: usize,
    pub attention_mode: String,
    pub embed_dim: usize,
    pub patch_count: usize,
    pub image_size: usize,
    pub input: String,
    pub n_classes: usize,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_val_balanced_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_balanced_acc: Option<f64>,
    /// Per-class test recall joined by `;`.
    pub test_recall: Option<String>,
    pub n_runs: Option<usize>,
    pub mean_test_balanced_acc: Option<f64>,
    pub std_test_balanced_acc: Option<f64>,
    pub reason: Option<String>,
    pub config_json: String,
}

impl ResultRow {
    fn new(kind: RowKind, point: &GridPoint, resolved: &ResolvedConfig) -> Self {
        let m = &resolved.model;
        ResultRow {
            schema_version: RESULTS_SCHEMA_VERSION,
            row_kind: kind,
            point_index: point.index,
            point_key: point.key(),
            run_id: None,
            repeat: None,
            seed: None,
            scale_subset: subset_label(&m.tokenizer.scale_subset),
            scale_token_mode: m.scale_token.mode.name().into(),
            heads: m.encoder.heads,
            depth: m.encoder.depth,
            attention_mode: m.attention.name().into(),
            embed_dim: m.tokenizer.embed_dim,
            patch_count: m.tokenizer.patch_count,
            image_size: m.backbone.image_size,
            input: format!("{:?}", m.input).to_lowercase(),
            n_classes: m.encoder.n_classes,
            epochs_run: None,
            best_epoch: None,
            best_val_balanced_acc: None,
            test_loss: None,
            test_accuracy: None,
            test_balanced_acc: None,
            test_recall: None,
            n_runs: None,
            mean_test_balanced_acc: None,
            std_test_balanced_acc: None,
            reason: None,
            config_json: serde_json::to_string(resolved).expect("configs serialize"),
        }
    }

    pub fn recall(&self) -> Vec<f64> {
        self.test_recall
            .as_deref()
            .map(|s| s.split(';').filter_map(|v| v.parse().ok()).collect())
            .unwrap_or_default()
    }
}

/// A completed training run.
pub struct RunRecord {
    pub point: GridPoint,
    pub repeat: usize,
    pub seed: u64,
    pub config: ResolvedConfig,
    pub best_epoch: usize,
    pub best_val_balanced_acc: f64,
    pub history: Vec<EpochRecord>,
    pub test: EvalReport,
    pub model: DuoFormer64,
}

/// Mean and sample standard deviation (`n − 1` denominator; absent for one
/// value). Accumulates offsets from the first value, so identical inputs give
/// exactly that value and a std of exactly zero.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let x0 = values[0];
    let (s, s2) = values
        .iter()
        .fold((0.0, 0.0), |(s, s2), v| (s + (v - x0), s2 + (v - x0) * (v - x0)));
    let mean = x0 + s / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = ((s2 - s * s / n) / (n - 1.0)).max(0.0);
    (mean, Some(var.sqrt()))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `results.csv`, histories and checkpoints; nothing is
    /// written when absent.
    pub out: Option<PathBuf>,
    /// Grid runs executed concurrently.
    pub threads: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResults {
    pub fn of_kind(&self, kind: RowKind) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(move |r| r.row_kind == kind)
    }

    pub fn aggregate(&self, key: &str) -> Option<&ResultRow> {
        self.of_kind(RowKind::Aggregate).find(|r| r.point_key == key)
    }

    pub fn runs_of(&self, key: &str) -> Vec<&ResultRow> {
        self.of_kind(RowKind::Run).filter(|r| r.point_key == key).collect()
    }
}

pub fn load_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    match &spec.dataset {
        DatasetSource::Synthetic(s) => generate_synthetic(s, &spec.model.backbone, s.seed),
        DatasetSource::Manifest { path } => load_manifest(path),
    }
}

/// Builds, trains and tests one configuration.
pub fn train_one(
    model_cfg: &DuoFormerConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<(DuoFormer64, duoformer::trainer::TrainOutcome<f64>, EvalReport)> {
    dataset.check_model(&model_cfg.backbone, model_cfg.input, model_cfg.encoder.n_classes)?;
    dataset.require_nonempty()?;
    let mut train = train_cfg.clone();
    train.seed = seed;
    let mut model = DuoFormer64::new(model_cfg, seed)?;
    let outcome = train_loop(&mut model, &dataset.train, &dataset.val, &train)?;
    let report = evaluate(&model, &dataset.test, train.batch_size)?;
    Ok((model, outcome, report))
}

fn execute(spec: &ExperimentSpec, dataset: &Dataset, point: &GridPoint, repeat: usize) -> Result<RunRecord> {
    let seed = run_seed(spec.seed, repeat);
    let model_cfg = point.apply(&spec.model);
    let mut train = spec.train.clone();
    train.seed = seed;
    let (model, outcome, test) = train_one(&model_cfg, &train, dataset, seed)?;
    Ok(RunRecord {
        point: point.clone(),
        repeat,
        seed,
        config: ResolvedConfig { model: model_cfg, train },
        best_epoch: outcome.best_epoch,
        best_val_balanced_acc: outcome.best_score,
        history: outcome.history,
        test,
        model,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::Spec(format!("csv error on {}: {other:?}", path.display())),
    }
}

fn persist_run(out: &Path, run: &RunRecord, save_checkpoint: bool) -> Result<()> {
    let id = run_id(&run.point, run.repeat);
    write_history(&out.join(format!("history_{id}.csv")), &run.history)?;
    if save_checkpoint {
        run.model.save(out.join("checkpoints").join(&id))?;
    }
    Ok(())
}

fn run_row(run: &RunRecord) -> ResultRow {
    let mut row = ResultRow::new(RowKind::Run, &run.point, &run.config);
    let recall: Vec<String> = run.test.per_class_recall.iter().map(|r| r.to_string()).collect();
    row.run_id = Some(run_id(&run.point, run.repeat));
    row.repeat = Some(run.repeat);
    row.seed = Some(run.seed);
    row.epochs_run = Some(run.history.len());
    row.best_epoch = Some(run.best_epoch);
    row.best_val_balanced_acc = Some(run.best_val_balanced_acc);
    row.test_loss = Some(run.test.loss);
    row.test_accuracy = Some(run.test.accuracy);
    row.test_balanced_acc = Some(run.test.balanced_accuracy);
    row.test_recall = Some(recall.join(";"));
    row
}

/// Runs every grid point × repeat and returns the rows in grid order: per
/// point, its run (or failure) rows followed by its aggregate, or a single
/// skipped row when the point's configuration is invalid.
pub fn run_experiment(spec: &ExperimentSpec, dataset: &Dataset, opts: &RunOptions) -> Result<ExperimentResults> {
    spec.validate()?;
    let points = spec.points();
    // Every point is checked before any training starts.
    let verdicts: Vec<(GridPoint, Option<String>)> = points
        .into_iter()
        .map(|p| {
            let cfg = p.apply(&spec.model);
            let mut problems = cfg.violations();
            if problems.is_empty() {
                if let Err(e) = dataset.check_model(&cfg.backbone, cfg.input, cfg.encoder.n_classes) {
                    problems.push(e.to_string());
                }
            }
            let reason = (!problems.is_empty()).then(|| problems.join("; "));
            (p, reason)
        })
        .collect();
    dataset.require_nonempty()?;
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
        let path = out.join(SPEC_ECHO_FILE);
        let mut text = serde_json::to_string_pretty(spec).map_err(|e| HarnessError::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    }
    let jobs: Vec<(usize, usize)> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, (_, reason))| reason.is_none())
        .flat_map(|(i, _)| (0..spec.repeats).map(move |r| (i, r)))
        .collect();
    let job = |&(i, r): &(usize, usize)| -> std::result::Result<ResultRow, String> {
        let run = execute(spec, dataset, &verdicts[i].0, r).map_err(|e| e.to_string())?;
        if let Some(out) = &opts.out {
            persist_run(out, &run, spec.save_checkpoints).map_err(|e| e.to_string())?;
        }
        Ok(run_row(&run))
    };
    let outcomes: Vec<std::result::Result<ResultRow, String>> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(job).collect())
    } else {
        jobs.iter().map(job).collect()
    };

    let mut rows = Vec::new();
    let mut done = jobs.iter().zip(outcomes);
    for (i, (point, reason)) in verdicts.iter().enumerate() {
        let resolved = ResolvedConfig {
            model: point.apply(&spec.model),
            train: spec.train.clone(),
        };
        if let Some(reason) = reason {
            let mut row = ResultRow::new(RowKind::Skipped, point, &resolved);
            row.reason = Some(reason.clone());
            rows.push(row);
            continue;
        }
        let mut scores = Vec::new();
        for _ in 0..spec.repeats {
            let (&(j, r), outcome) = done.next().expect("one outcome per job");
            debug_assert_eq!(j, i);
            match outcome {
                Ok(row) => {
                    scores.push(row.test_balanced_acc.expect("run rows carry a score"));
                    rows.push(row);
                }
                Err(reason) => {
                    let mut row = ResultRow::new(RowKind::Failed, point, &resolved);
                    row.run_id = Some(run_id(point, r));
                    row.repeat = Some(r);
                    row.seed = Some(run_seed(spec.seed, r));
                    row.reason = Some(reason);
                    rows.push(row);
                }
            }
        }
        let mut agg = ResultRow::new(RowKind::Aggregate, point, &resolved);
        agg.n_runs = Some(scores.len());
        if !scores.is_empty() {
            let (mean, std) = mean_std(&scores);
            agg.mean_test_balanced_acc = Some(mean);
            agg.std_test_balanced_acc = std;
        }
        rows.push(agg);
    }
    let results = ExperimentResults { rows };
    if let Some(out) = &opts.out {
        write_results(&out.join(RESULTS_FILE), &results.rows)?;
    }
    Ok(results)
}

/// Loads the spec's dataset and runs it.
pub fn run_spec(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentResults> {
    let dataset = load_dataset(spec)?;
    run_experiment(spec, &dataset, opts)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

/// Trains a single configuration, writing `history_<run>.csv`, the best
/// checkpoint and the test report under `out`.
pub fn train_and_save(spec: &ExperimentSpec, dataset: &Dataset, out: &Path) -> Result<EvalReport> {
    let seed = run_seed(spec.seed, 0);
    let (model, outcome, report) = train_one(&spec.model, &spec.train, dataset, seed)?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_history(&out.join("history_train.csv"), &outcome.history)?;
    model.save(out.join("checkpoint"))?;
    let path = out.join("test_report.json");
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(report)
}

/// Restores a checkpoint's best parameters into a fresh model.
pub fn load_checkpoint(dir: &Path) -> Result<DuoFormer64> {
    Ok(DuoFormer64::load(dir)?)
}

/// Compares the parameters of two snapshots bit for bit.
pub fn snapshots_identical(a: &Snapshot<f64>, b: &Snapshot<f64>) -> bool {
    a.params.len() == b.params.len()
        && a.params.iter().zip(&b.params).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
