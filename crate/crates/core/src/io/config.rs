use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::tasks::{NiahKind, NiahSettings};
use crate::train::{TrainConfig, WindowSchedule};

fn default_samples() -> usize {
    64
}

fn default_bins() -> usize {
    8
}

fn default_variants() -> usize {
    3
}

fn default_batch() -> usize {
    16
}

/// Evaluation grid run after training or by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    #[serde(default)]
    pub kinds: Vec<NiahKind>,
    #[serde(default)]
    pub seq_lens: Vec<usize>,
    /// Empty means the model's own window.
    #[serde(default)]
    pub test_windows: Vec<usize>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_bins")]
    pub n_depth_bins: usize,
    #[serde(default = "default_variants")]
    pub variants: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Held-out tokens scored for perplexity; 0 skips it.
    #[serde(default)]
    pub ppl_tokens: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            kinds: Vec::new(),
            seq_lens: Vec::new(),
            test_windows: Vec::new(),
            n_samples: default_samples(),
            n_depth_bins: default_bins(),
            variants: default_variants(),
            batch: default_batch(),
            ppl_tokens: 0,
        }
    }
}

impl EvalGrid {
    pub fn settings(&self, train: &TrainConfig) -> NiahSettings {
        NiahSettings {
            corpus: train.corpus.clone(),
            n_depth_bins: self.n_depth_bins,
            variants: self.variants,
            batch: self.batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_depth_bins == 0 {
            return Err(Error::Config("eval.n_depth_bins must be positive".into()));
        }
        if let Some(w) = self.test_windows.iter().find(|&&w| w == 0) {
            return Err(Error::Config(format!(
                "eval.test_windows entries must be positive, got {w}"
            )));
        }
        if let Some(l) = self.seq_lens.iter().find(|&&l| l == 0) {
            return Err(Error::Config(format!(
                "eval.seq_lens entries must be positive, got {l}"
            )));
        }
        Ok(())
    }
}

/// One training run plus its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label written to the `train_tag` column of results tables.
    #[serde(default)]
    pub tag: Option<String>,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalGrid,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()
    }

    /// `tag` if set, otherwise a name built from the architecture and window schedule.
    pub fn train_tag(&self) -> String {
        if let Some(t) = &self.tag {
            return t.clone();
        }
        let arch = self.train.model.architecture.name();
        match self.train.windows {
            WindowSchedule::Fixed { window } => format!("{arch}-w{window}"),
            WindowSchedule::Stochastic {
                w_short,
                w_long,
                p_short,
                anneal_fraction,
            } => format!("{arch}-w{w_short}/{w_long}-p{p_short}-a{anneal_fraction}"),
        }
    }
}

/// Overrides applied to the base experiment for one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub tag: String,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    /// Also sets the model's default (test) window to the longest training window.
    #[serde(default)]
    pub windows: Option<WindowSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub cells: Vec<SweepCell>,
}

impl SweepConfig {
    /// The experiment of cell `i`, with its derived seed.
    pub fn cell(&self, i: usize) -> ExperimentConfig {
        let c = &self.cells[i];
        let mut exp = self.base.clone();
        exp.tag = Some(c.tag.clone());
        if let Some(a) = c.architecture {
            exp.train.model.architecture = a;
        }
        if let Some(w) = c.windows {
            exp.train.windows = w;
            exp.train.model.default_window = w.long_window();
        }
        exp.train.seed = crate::rng::derive_seed(self.base.train.seed, i as u64);
        exp
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("sweep needs at least one cell".into()));
        }
        for i in 0..self.cells.len() {
            self.cell(i)
                .validate()
                .map_err(|e| Error::Config(format!("cell {i} ({}): {e}", self.cells[i].tag)))?;
        }
        Ok(())
    }
}

/// Parses a TOML file; unknown keys are errors.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = load_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_sweep(path: &Path) -> Result<SweepConfig> {
    let cfg: SweepConfig = load_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Directory of a sweep cell inside the sweep output directory.
pub fn cell_dir(out: &Path, i: usize, tag: &str) -> PathBuf {
    let safe: String = tag
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out.join("cells").join(format!("{i:03}-{safe}"))
}
