use serde::{Deserialize, Serialize};

use super::corpus::CorpusSpec;
use super::niah::{gen_niah, NiahKind, NiahSample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

/// Anything that maps token sequences to next-token logits.
pub trait Predictor {
    fn vocab_size(&self) -> usize;

    /// SWA window used when `opts` does not override it.
    fn default_window(&self) -> usize;

    /// Logits `[batch * seq, vocab]` for `batch` equal-length sequences stored back to back.
    fn logits(&self, tokens: &[usize], batch: usize, opts: ForwardOptions) -> Result<Tensor<f32>>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn default_window(&self) -> usize {
        self.config().default_window
    }

    fn logits(&self, tokens: &[usize], batch: usize, opts: ForwardOptions) -> Result<Tensor<f32>> {
        Ok(self.forward_batch(tokens, batch, opts)?.cast())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prefix` by `n` tokens.
pub fn greedy_decode(model: &dyn Predictor, prefix: &[usize], n: usize, opts: ForwardOptions) -> Result<Vec<usize>> {
    let mut seq = prefix.to_vec();
    for _ in 0..n {
        let logits = model.logits(&seq, 1, opts)?;
        seq.push(argmax(logits.row(seq.len() - 1)));
    }
    Ok(seq.split_off(prefix.len()))
}

/// Exact-match scores for samples of equal length, in one batched pass.
///
/// Feeding the gold answer and checking every argmax agrees with greedy
/// decoding: if all positions predict the gold token the decoder emits
/// exactly the gold sequence, and the first disagreement is also the first
/// token the decoder gets wrong.
pub fn score_niah_batch(model: &dyn Predictor, samples: &[&NiahSample], opts: ForwardOptions) -> Result<Vec<bool>> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let (s, m) = (first.tokens.len(), first.gold.len());
    if samples.iter().any(|x| x.tokens.len() != s || x.gold.len() != m) {
        return Err(Error::invalid("score_niah", "batched samples must share their lengths"));
    }
    if m == 0 {
        return Ok(vec![true; samples.len()]);
    }
    let len = s + m - 1;
    let mut tokens = Vec::with_capacity(len * samples.len());
    for x in samples {
        tokens.extend_from_slice(&x.tokens);
        tokens.extend_from_slice(&x.gold[..m - 1]);
    }
    let logits = model.logits(&tokens, samples.len(), opts)?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(b, x)| (0..m).all(|j| argmax(logits.row(b * len + s - 1 + j)) == x.gold[j]))
        .collect())
}

/// 1 if greedy decoding after the query reproduces the gold value exactly.
pub fn score_niah(model: &dyn Predictor, sample: &NiahSample, opts: ForwardOptions) -> Result<u8> {
    Ok(score_niah_batch(model, &[sample], opts)?[0] as u8)
}

/// Accuracy of one (task kind, length) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_kind: NiahKind,
    pub seq_len: usize,
    pub test_window: usize,
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// `(correct, total)` per depth bin.
    pub per_depth: Vec<(usize, usize)>,
}

/// Sample generation settings shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiahSettings {
    pub corpus: CorpusSpec,
    #[serde(default = "default_bins")]
    pub n_depth_bins: usize,
    /// Each cell pools samples from this many independently seeded variants.
    #[serde(default = "default_variants")]
    pub variants: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
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

impl NiahSettings {
    pub fn new(corpus: CorpusSpec) -> Self {
        NiahSettings {
            corpus,
            n_depth_bins: default_bins(),
            variants: default_variants(),
            batch: default_batch(),
        }
    }
}

/// Seed of the cell for `kind` at `seq_len`, independent of the rest of the grid.
pub fn cell_seed(seed: u64, kind: NiahKind, seq_len: usize) -> u64 {
    derive_seed(derive_seed(seed, kind as u64), seq_len as u64)
}

fn eval_cell(
    model: &dyn Predictor,
    kind: NiahKind,
    seq_len: usize,
    opts: ForwardOptions,
    n_samples: usize,
    seed: u64,
    settings: &NiahSettings,
) -> Result<EvalResult> {
    let variants = settings.variants.max(1);
    let mut samples = Vec::with_capacity(n_samples);
    for v in 0..variants {
        let n = n_samples / variants + usize::from(v < n_samples % variants);
        samples.extend(gen_niah(
            kind,
            seq_len,
            settings.n_depth_bins,
            derive_seed(seed, v as u64),
            n,
            &settings.corpus,
        )?);
    }
    let mut per_depth = vec![(0, 0); settings.n_depth_bins];
    let refs: Vec<&NiahSample> = samples.iter().collect();
    for chunk in refs.chunks(settings.batch.max(1)) {
        for (x, ok) in chunk.iter().zip(score_niah_batch(model, chunk, opts)?) {
            per_depth[x.depth_bin].0 += usize::from(ok);
            per_depth[x.depth_bin].1 += 1;
        }
    }
    let correct: usize = per_depth.iter().map(|d| d.0).sum();
    Ok(EvalResult {
        task_kind: kind,
        seq_len,
        test_window: opts.window_override.unwrap_or(model.default_window()),
        accuracy: correct as f64 / n_samples as f64,
        n_samples,
        seed,
        per_depth,
    })
}

/// Every `kinds x seq_lens` cell, sorted by (kind, length).
pub fn eval_niah_sweep(
    model: &dyn Predictor,
    kinds: &[NiahKind],
    seq_lens: &[usize],
    test_window: Option<usize>,
    n_samples: usize,
    seed: u64,
    settings: &NiahSettings,
) -> Result<Vec<EvalResult>> {
    if n_samples == 0 {
        return Ok(Vec::new());
    }
    let opts = ForwardOptions {
        window_override: test_window,
    };
    let mut cells: Vec<(NiahKind, usize)> = kinds
        .iter()
        .flat_map(|&k| seq_lens.iter().map(move |&l| (k, l)))
        .collect();
    cells.sort();
    cells.dedup();
    cells
        .into_iter()
        .map(|(kind, len)| eval_cell(model, kind, len, opts, n_samples, cell_seed(seed, kind, len), settings))
        .collect()
}

/// Mean next-token cross-entropy, in nats, over `n_tokens / seq_len`
/// consecutive windows of `stream`.
pub fn eval_cross_entropy(
    model: &dyn Predictor,
    stream: &mut dyn Iterator<Item = usize>,
    n_tokens: usize,
    seq_len: usize,
    opts: ForwardOptions,
) -> Result<f64> {
    if seq_len == 0 || n_tokens < seq_len {
        return Err(Error::invalid(
            "eval_perplexity",
            format!("n_tokens {n_tokens} must be at least seq_len {seq_len} > 0"),
        ));
    }
    let windows = n_tokens / seq_len;
    const BATCH: usize = 8;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut done = 0;
    while done < windows {
        let b = BATCH.min(windows - done);
        let mut inputs = Vec::with_capacity(b * seq_len);
        let mut targets = Vec::with_capacity(b * seq_len);
        for _ in 0..b {
            let w: Vec<usize> = (&mut *stream).take(seq_len + 1).collect();
            if w.len() < seq_len + 1 {
                return Err(Error::CorpusExhausted(count + w.len()));
            }
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        let logits = model.logits(&inputs, b, opts)?;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x)) as f64;
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
        }
        count += targets.len();
        done += b;
    }
    Ok(total / count as f64)
}

/// `exp` of [`eval_cross_entropy`].
pub fn eval_perplexity(
    model: &dyn Predictor,
    stream: &mut dyn Iterator<Item = usize>,
    n_tokens: usize,
    seq_len: usize,
    opts: ForwardOptions,
) -> Result<f64> {
    Ok(eval_cross_entropy(model, stream, n_tokens, seq_len, opts)?.exp())
}
