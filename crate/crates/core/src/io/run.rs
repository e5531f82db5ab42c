use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_load, checkpoint_save};
use super::config::{cell_dir, to_toml, ExperimentConfig, SweepConfig};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tasks::{eval_cross_entropy, eval_niah_sweep, EvalResult};
use crate::train::{StepMetrics, Trainer};

pub const RESULTS_HEADER: [&str; 7] = [
    "task_kind",
    "seq_len",
    "test_window",
    "train_tag",
    "accuracy",
    "n_samples",
    "seed",
];

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task_kind: String,
    pub seq_len: usize,
    pub test_window: usize,
    pub train_tag: String,
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(r: &EvalResult, train_tag: &str, seed: u64) -> Self {
        ResultRow {
            task_kind: r.task_kind.name().to_string(),
            seq_len: r.seq_len,
            test_window: r.test_window,
            train_tag: train_tag.to_string(),
            accuracy: r.accuracy,
            n_samples: r.n_samples,
            seed,
        }
    }
}

/// Writes `rows` under the fixed header; an empty slice gives a header-only file.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected header {}",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Newline-delimited JSON, one [`StepMetrics`] per line, flushed per record.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Held-out loss of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub perplexity: f64,
}

/// Layout of one run's output directory.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDirectory {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Self {
        RunDirectory {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn validation(&self) -> PathBuf {
        self.root.join("validation.json")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}"))
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Validation loss and NIAH results for `model` under the grid of `exp`.
///
/// `test_windows` overrides the grid's windows when non-empty.
pub fn evaluate(
    model: &Model<f32>,
    exp: &ExperimentConfig,
    test_windows: &[usize],
) -> Result<(Option<Validation>, Vec<ResultRow>)> {
    let grid = &exp.eval;
    let validation = if grid.ppl_tokens > 0 {
        let mut stream = exp.train.validation_stream()?;
        let loss = eval_cross_entropy(
            model,
            &mut stream,
            grid.ppl_tokens,
            exp.train.seq_len,
            ForwardOptions::default(),
        )?;
        Some(Validation {
            loss,
            perplexity: loss.exp(),
        })
    } else {
        None
    };
    let windows: Vec<Option<usize>> = match (test_windows, grid.test_windows.as_slice()) {
        ([], []) => vec![None],
        ([], ws) | (ws, _) => ws.iter().copied().map(Some).collect(),
    };
    let settings = grid.settings(&exp.train);
    let tag = exp.train_tag();
    let mut rows = Vec::new();
    for w in windows {
        for r in eval_niah_sweep(
            model,
            &grid.kinds,
            &grid.seq_lens,
            w,
            grid.n_samples,
            exp.train.seed,
            &settings,
        )? {
            rows.push(ResultRow::new(&r, &tag, exp.train.seed));
        }
    }
    Ok((validation, rows))
}

/// Trains `exp` into `out`, then evaluates the final model.
///
/// Metrics are flushed step by step, so a failed run leaves its log behind.
pub fn run_experiment(exp: &ExperimentConfig, out: &Path) -> Result<RunDirectory> {
    exp.validate()?;
    let run = RunDirectory::create(out)?;
    run.write(&run.config(), &to_toml(exp)?)?;
    run.write(
        &run.manifest(),
        &format!(
            "code_version = {}\ncheckpoint_format = {}\nmaster_seed = {}\ntrain_tag = {}\n",
            env!("CARGO_PKG_VERSION"),
            super::checkpoint::FORMAT_VERSION,
            exp.train.seed,
            exp.train_tag()
        ),
    )?;
    let mut metrics = MetricsWriter::create(&run.metrics())?;
    let mut trainer = Trainer::new(exp.train.clone())?;
    trainer.run(&mut |m| metrics.write(m))?;
    checkpoint_save(
        trainer.model(),
        Some(trainer.optimizer()),
        exp.train.seed,
        trainer.step(),
        &run.checkpoint(trainer.step()),
    )?;
    let (validation, rows) = evaluate(trainer.model(), exp, &[])?;
    if let Some(v) = validation {
        run.write(&run.validation(), &serde_json::to_string(&v)?)?;
    }
    write_results(&run.results(), &rows)?;
    Ok(run)
}

/// Evaluates a stored checkpoint under the grid of `exp`, writing `results.csv` into `out`.
pub fn run_eval(
    checkpoint: &Path,
    exp: &ExperimentConfig,
    test_windows: &[usize],
    out: &Path,
) -> Result<Vec<ResultRow>> {
    exp.eval.validate()?;
    let ck = checkpoint_load(checkpoint)?;
    if ck.config != exp.train.model {
        let named = ck
            .model
            .names()
            .iter()
            .cloned()
            .zip(ck.model.params().iter().cloned())
            .collect();
        Model::from_params(&exp.train.model, named)?;
    }
    let run = RunDirectory::create(out)?;
    let (validation, rows) = evaluate(&ck.model, exp, test_windows)?;
    if let Some(v) = validation {
        run.write(&run.validation(), &serde_json::to_string(&v)?)?;
    }
    write_results(&run.results(), &rows)?;
    Ok(rows)
}

/// Outcome of a sweep: the combined table and the cells that failed.
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(usize, String, Error)>,
}

/// Trains and evaluates every cell in order; a failing cell is recorded and skipped.
pub fn run_sweep(sweep: &SweepConfig, out: &Path) -> Result<SweepOutcome> {
    sweep.validate()?;
    let root = RunDirectory::create(out)?;
    root.write(&root.config(), &to_toml(sweep)?)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, cell) in sweep.cells.iter().enumerate() {
        let exp = sweep.cell(i);
        let dir = cell_dir(out, i, &cell.tag);
        match run_experiment(&exp, &dir).and_then(|run| read_results(&run.results())) {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push((i, cell.tag.clone(), e)),
        }
    }
    write_results(&root.results(), &rows)?;
    let report: String = failures
        .iter()
        .map(|(i, tag, e)| format!("cell {i} ({tag}): {e}\n"))
        .collect();
    root.write(&root.root().join("failures.txt"), &report)?;
    Ok(SweepOutcome { rows, failures })
}
