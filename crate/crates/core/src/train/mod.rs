//! Next-token training with a warmup-cosine learning rate and per-batch
//! window sampling.

mod optim;
mod schedule;

pub use optim::{AdamWConfig, OptimizerState};
pub use schedule::{lr_at, sample_window, LrSchedule, WindowSchedule};

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{build_model, ForwardOptions, Model, ModelConfig};
use crate::rng::{stream, Stream};
use crate::tasks::{Corpus, CorpusSpec};
use crate::tensor::Tensor;

/// Learning rate settings; the step count comes from [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub peak: f64,
    pub min: f64,
    /// Defaults to 2% of the total steps.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            peak: 3e-4,
            min: 3e-6,
            warmup_steps: None,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub lr: LrConfig,
    pub windows: WindowSchedule,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// When false, `wall_ms` is logged as 0 so metrics logs compare bytewise.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.windows.validate()?;
        self.optimizer.validate()?;
        self.lr_schedule().validate()?;
        if self.seq_len == 0 || self.batch_tokens == 0 {
            return Err(Error::Config(
                "train.seq_len and train.batch_tokens must be positive".into(),
            ));
        }
        if self.batch_tokens % self.seq_len != 0 {
            return Err(Error::Config(format!(
                "train.batch_tokens {} is not a multiple of train.seq_len {}",
                self.batch_tokens, self.seq_len
            )));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus.vocab_size {} differs from model.vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let warmup = self
            .lr
            .warmup_steps
            .unwrap_or((self.total_steps as f64 * 0.02).round() as usize);
        LrSchedule {
            peak: self.lr.peak,
            min: self.lr.min,
            warmup_steps: warmup,
            total_steps: self.total_steps,
        }
    }

    /// The training token stream: the configured language sampled from the data stream.
    pub fn training_stream(&self) -> Result<Corpus> {
        let seed = stream(self.seed, Stream::Data).random::<u64>();
        Corpus::new(&self.corpus, seed)
    }

    /// Held-out text of the same language, disjoint in sampling from training.
    pub fn validation_stream(&self) -> Result<Corpus> {
        let seed = stream(self.seed, Stream::Eval).random::<u64>();
        Corpus::new(&self.corpus, seed)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub sampled_window: usize,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

/// Loss and pre-clip gradient norm of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f32,
    pub grad_norm: f64,
}

/// One AdamW update on `batch`, a `[batch_size, seq_len + 1]` token matrix
/// whose rows supply both inputs and shifted targets. `step` is only used
/// in error reports.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    tape: &mut Tape<f32>,
    batch: &[usize],
    batch_size: usize,
    window: usize,
    opt: &mut OptimizerState,
    opt_cfg: &AdamWConfig,
    lr: f64,
    step: usize,
) -> Result<StepOutput> {
    if window == 0 {
        return Err(Error::invalid("train_step", "window must be positive"));
    }
    if batch_size == 0 || batch.len() % batch_size != 0 || batch.len() / batch_size < 2 {
        return Err(Error::invalid(
            "train_step",
            format!("{} tokens do not form {batch_size} rows of at least 2", batch.len()),
        ));
    }
    let row = batch.len() / batch_size;
    let mut inputs = Vec::with_capacity(batch_size * (row - 1));
    let mut targets = Vec::with_capacity(batch_size * (row - 1));
    for r in batch.chunks_exact(row) {
        inputs.extend_from_slice(&r[..row - 1]);
        targets.extend_from_slice(&r[1..]);
    }

    let non_finite = |e: Error| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step, window, lr },
        e => e,
    };
    tape.clear();
    let vars = model.bind(tape, true);
    let logits = model
        .forward_with(tape, &vars, &inputs, batch_size, ForwardOptions::window(window))
        .map_err(non_finite)?;
    let loss = tape.cross_entropy(logits, &targets).map_err(non_finite)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { step, window, lr });
    }
    tape.backward(loss).map_err(non_finite)?;
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let grad_norm = opt.apply(opt_cfg, model.params_mut(), &grads, lr);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, window, lr });
    }
    Ok(StepOutput {
        loss: loss_value,
        grad_norm,
    })
}

/// Training state that advances one batch at a time.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model<f32>,
    opt: OptimizerState,
    step: usize,
    source: Box<dyn Iterator<Item = usize>>,
    window_rng: ChaCha8Rng,
    tape: Tape<f32>,
    tokens_seen: u64,
    started: Instant,
}

impl Trainer {
    /// Fresh model from the init stream, reading batches from the configured corpus.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let source = Box::new(cfg.training_stream()?);
        Self::with_source(cfg, source)
    }

    pub fn with_source(cfg: TrainConfig, source: Box<dyn Iterator<Item = usize>>) -> Result<Self> {
        cfg.validate()?;
        let model = build_model::<f32>(&cfg.model, cfg.seed)?;
        let opt = OptimizerState::new(model.params());
        Ok(Trainer {
            window_rng: stream(cfg.seed, Stream::Window),
            cfg,
            model,
            opt,
            step: 0,
            source,
            tape: Tape::new(),
            tokens_seen: 0,
            started: Instant::now(),
        })
    }

    /// Continues a run at `step` from saved weights and optimizer moments.
    ///
    /// The data and window streams are regenerated from the seed and advanced
    /// past the batches already consumed, so a resumed run matches an
    /// uninterrupted one when the configurations agree.
    pub fn resume(cfg: TrainConfig, model: Model<f32>, opt: OptimizerState, step: usize) -> Result<Self> {
        let source = Box::new(cfg.training_stream()?);
        let mut t = Self::with_source(cfg, source)?;
        if model.config() != &t.cfg.model {
            return Err(Error::Config(
                "checkpoint model differs from the configured model".into(),
            ));
        }
        if opt.m.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let per_batch = t.cfg.batch_size() * (t.cfg.seq_len + 1);
        for s in 0..step {
            t.cfg.windows.sample(s, t.cfg.total_steps, &mut t.window_rng);
            for _ in 0..per_batch {
                t.source.next().ok_or(Error::CorpusExhausted(s * per_batch))?;
            }
        }
        t.tokens_seen = (step * t.cfg.batch_tokens) as u64;
        t.model = model;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn into_parts(self) -> (Model<f32>, OptimizerState, usize) {
        (self.model, self.opt, self.step)
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        let n = self.cfg.batch_size() * (self.cfg.seq_len + 1);
        let batch: Vec<usize> = self.source.by_ref().take(n).collect();
        if batch.len() < n {
            return Err(Error::CorpusExhausted(self.tokens_seen as usize + batch.len()));
        }
        Ok(batch)
    }

    /// Runs one update and returns its metrics record.
    pub fn advance(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let window = self
            .cfg
            .windows
            .sample(step, self.cfg.total_steps, &mut self.window_rng);
        let lr = self.cfg.lr_schedule().lr_at(step);
        let batch = self.next_batch()?;
        let out = train_step(
            &mut self.model,
            &mut self.tape,
            &batch,
            self.cfg.batch_size(),
            window,
            &mut self.opt,
            &self.cfg.optimizer,
            lr,
            step,
        )?;
        self.step += 1;
        self.tokens_seen += self.cfg.batch_tokens as u64;
        Ok(StepMetrics {
            step,
            loss: out.loss,
            lr,
            sampled_window: window,
            tokens_seen: self.tokens_seen,
            wall_ms: if self.cfg.wall_clock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Trains to `total_steps`, handing every record to `sink`.
    pub fn run(&mut self, sink: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while !self.done() {
            let m = self.advance()?;
            sink(&m)?;
        }
        Ok(())
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    pub step: usize,
}

/// Trains `cfg` from scratch on `source`, streaming metrics to `sink`.
pub fn train(
    cfg: &TrainConfig,
    source: Box<dyn Iterator<Item = usize>>,
    sink: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::with_source(cfg.clone(), source)?;
    t.run(sink)?;
    let (model, optimizer, step) = t.into_parts();
    Ok(TrainOutcome { model, optimizer, step })
}
