use std::collections::{BTreeMap, HashSet, VecDeque};
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// How the vocabulary is split between haystack text and the reserved
/// alphabets of key/value records.
///
/// The lower half is filler text, the next quarter key tokens, the rest value
/// tokens, and the last id is the delimiter between a key and its value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub vocab_size: usize,
    pub filler: Range<usize>,
    pub keys: Range<usize>,
    pub values: Range<usize>,
    pub delimiter: usize,
}

impl TokenLayout {
    pub const MIN_VOCAB: usize = 8;

    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < Self::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {vocab_size}",
                Self::MIN_VOCAB
            )));
        }
        let half = vocab_size / 2;
        let quarter = vocab_size / 4;
        Ok(TokenLayout {
            vocab_size,
            filler: 0..half,
            keys: half..half + quarter,
            values: half + quarter..vocab_size - 1,
            delimiter: vocab_size - 1,
        })
    }

    pub fn is_filler(&self, t: usize) -> bool {
        self.filler.contains(&t)
    }
}

fn default_order() -> usize {
    2
}

fn default_key_len() -> usize {
    2
}

fn default_value_len() -> usize {
    4
}

fn default_record_rate() -> f64 {
    0.02
}

fn default_copy_span() -> [usize; 2] {
    [8, 32]
}

/// Parameters of the synthetic training language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Seeds the n-gram table; streams with different stream seeds share it.
    pub seed: u64,
    #[serde(default = "default_order")]
    pub local_order: usize,
    /// Probability, per emitted position, of copying an earlier span of the stream.
    pub copy_rate: f64,
    /// Inclusive `[min, max]` distance back to the source of a copy, and from
    /// a record to its repeat. Drawn log-uniformly.
    pub copy_distance_range: [usize; 2],
    /// Inclusive `[min, max]` length of a copied span.
    #[serde(default = "default_copy_span")]
    pub copy_span: [usize; 2],
    /// Probability, per emitted position, of a fresh key/value record, which
    /// is repeated verbatim later on.
    #[serde(default = "default_record_rate")]
    pub record_rate: f64,
    #[serde(default = "default_key_len")]
    pub key_len: usize,
    #[serde(default = "default_value_len")]
    pub value_len: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let layout = TokenLayout::new(self.vocab_size)?;
        if self.local_order == 0 {
            return Err(Error::Config("corpus.local_order must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.copy_rate) {
            return Err(Error::Config(format!(
                "corpus.copy_rate must lie in [0, 1], got {}",
                self.copy_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.record_rate) || self.copy_rate + self.record_rate > 1.0 {
            return Err(Error::Config(format!(
                "corpus.record_rate must lie in [0, 1 - copy_rate], got {}",
                self.record_rate
            )));
        }
        let [lo, hi] = self.copy_span;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "corpus.copy_span must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        let [lo, hi] = self.copy_distance_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "corpus.copy_distance_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.key_len == 0 || self.key_len > layout.keys.len() {
            return Err(Error::Config(format!(
                "corpus.key_len must be in 1..={} for this vocabulary",
                layout.keys.len()
            )));
        }
        if self.value_len == 0 {
            return Err(Error::Config("corpus.value_len must be positive".into()));
        }
        let contexts = layout.filler.len().checked_pow(self.local_order as u32 - 1);
        if contexts.is_none_or(|c| c > 1 << 20) {
            return Err(Error::Config(format!(
                "corpus.local_order {} gives too many contexts",
                self.local_order
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.vocab_size).expect("validated spec")
    }

    pub fn record_len(&self) -> usize {
        self.key_len + 1 + self.value_len
    }
}

/// Successors allowed after each context.
const BRANCHING: usize = 4;

/// Order-`n` Markov model over the filler alphabet.
#[derive(Clone, Debug)]
pub struct NgramTable {
    order: usize,
    alphabet: usize,
    /// `contexts x alphabet` row-stochastic matrix.
    probs: Vec<f64>,
}

impl NgramTable {
    pub fn new(spec: &CorpusSpec) -> Self {
        let alphabet = spec.layout().filler.len();
        let order = spec.local_order;
        let contexts = alphabet.pow(order as u32 - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut probs = vec![0.0; contexts * alphabet];
        let k = BRANCHING.min(alphabet);
        for row in probs.chunks_exact_mut(alphabet) {
            let picks = sample(&mut rng, alphabet, k);
            let weights: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in picks.iter().zip(weights) {
                row[j] = w / total;
            }
        }
        NgramTable { order, alphabet, probs }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    fn context_index(&self, history: &[usize]) -> usize {
        let need = self.order - 1;
        let tail = &history[history.len() - need..];
        tail.iter().fold(0, |acc, &t| acc * self.alphabet + t)
    }

    /// Next-token distribution given at least `order - 1` filler tokens of history.
    pub fn distribution(&self, history: &[usize]) -> &[f64] {
        let c = self.context_index(history);
        &self.probs[c * self.alphabet..(c + 1) * self.alphabet]
    }

    fn sample(&self, history: &[usize], rng: &mut impl RngCore) -> usize {
        let p = self.distribution(history);
        let mut u: f64 = rng.random();
        for (i, &pi) in p.iter().enumerate() {
            if u < pi {
                return i;
            }
            u -= pi;
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }

    /// Entropy rate in nats per token of the stationary chain.
    pub fn entropy_rate(&self) -> f64 {
        let n = self.probs.len() / self.alphabet;
        let next_state = |c: usize, x: usize| {
            if self.order == 1 {
                0
            } else {
                (c * self.alphabet + x) % n
            }
        };
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (c, &mass) in pi.iter().enumerate() {
                for (x, &p) in self.probs[c * self.alphabet..(c + 1) * self.alphabet]
                    .iter()
                    .enumerate()
                {
                    next[next_state(c, x)] += mass * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi.iter()
            .enumerate()
            .map(|(c, &mass)| {
                let h: f64 = self.probs[c * self.alphabet..(c + 1) * self.alphabet]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                mass * h
            })
            .sum()
    }
}

/// A key, the delimiter and a value, as emitted into the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub key: Vec<usize>,
    pub value: Vec<usize>,
}

impl Record {
    pub fn tokens(&self, delimiter: usize) -> Vec<usize> {
        let mut t = self.key.clone();
        t.push(delimiter);
        t.extend(&self.value);
        t
    }
}

/// Draws a key of distinct tokens not in `taken`, giving up on uniqueness
/// after a bounded number of attempts.
pub(crate) fn draw_key(
    layout: &TokenLayout,
    len: usize,
    taken: &HashSet<Vec<usize>>,
    rng: &mut impl RngCore,
) -> Vec<usize> {
    let mut key = Vec::new();
    for _ in 0..64 {
        key = sample(rng, layout.keys.len(), len)
            .into_iter()
            .map(|i| layout.keys.start + i)
            .collect();
        if !taken.contains(&key) {
            break;
        }
    }
    key
}

pub(crate) fn draw_value(layout: &TokenLayout, len: usize, rng: &mut impl RngCore) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(layout.values.clone())).collect()
}

/// Where a token of the stream came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Filler,
    /// Part of a fresh key/value record.
    Record,
    /// Copy of the token `distance` positions earlier: a span copy or a record repeat.
    Copy {
        distance: usize,
    },
}

/// Infinite token stream: filler text from an [`NgramTable`], interrupted by
/// verbatim copies of earlier spans (rate `copy_rate`) and by key/value
/// records (rate `record_rate`) that reappear a log-uniform distance later.
pub struct Corpus {
    spec: CorpusSpec,
    layout: TokenLayout,
    table: NgramTable,
    rng: ChaCha8Rng,
    history: Vec<usize>,
    /// Every token generated so far, including those still queued.
    generated: Vec<usize>,
    queue: VecDeque<(usize, Origin)>,
    /// Repeats keyed by the position at which they become due.
    pending: BTreeMap<(u64, u64), (Record, u64)>,
    pending_keys: HashSet<Vec<usize>>,
    position: u64,
    emitted_records: u64,
}

/// Stream of `spec` whose token draws are seeded from `spec.seed`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    Corpus::new(spec, derive_seed(spec.seed, 0))
}

impl Corpus {
    /// A stream over the language of `spec` with its own sampling seed.
    pub fn new(spec: &CorpusSpec, stream_seed: u64) -> Result<Self> {
        spec.validate()?;
        let table = NgramTable::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let layout = spec.layout();
        let history = (0..table.order() - 1)
            .map(|_| rng.random_range(0..table.alphabet()))
            .collect();
        Ok(Corpus {
            spec: spec.clone(),
            layout,
            table,
            rng,
            history,
            generated: Vec::new(),
            queue: VecDeque::new(),
            pending: BTreeMap::new(),
            pending_keys: HashSet::new(),
            position: 0,
            emitted_records: 0,
        })
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn table(&self) -> &NgramTable {
        &self.table
    }

    /// Filler-only continuation, ignoring copies and records.
    pub fn filler(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_filler()).collect()
    }

    /// Next token together with its origin.
    pub fn next_with_origin(&mut self) -> (usize, Origin) {
        if self.queue.is_empty() {
            self.refill();
        }
        self.position += 1;
        self.queue.pop_front().expect("refill always queues a token")
    }

    fn next_filler(&mut self) -> usize {
        let t = self.table.sample(&self.history, &mut self.rng);
        if !self.history.is_empty() {
            self.history.remove(0);
            self.history.push(t);
        }
        self.layout.filler.start + t
    }

    fn distance(&mut self) -> usize {
        let [lo, hi] = self.spec.copy_distance_range;
        let (a, b) = ((lo as f64).ln(), (hi as f64 + 1.0).ln());
        let d = self.rng.random_range(a..b).exp().floor() as usize;
        d.clamp(lo, hi)
    }

    fn push(&mut self, t: usize, origin: Origin) {
        self.generated.push(t);
        self.queue.push_back((t, origin));
    }

    fn refill(&mut self) {
        if let Some((&(due, id), _)) = self.pending.first_key_value() {
            if due <= self.position {
                let (rec, at) = self.pending.remove(&(due, id)).expect("present");
                self.pending_keys.remove(&rec.key);
                let distance = self.generated.len() - at as usize;
                for t in rec.tokens(self.layout.delimiter) {
                    self.push(t, Origin::Copy { distance });
                }
                return;
            }
        }
        let u: f64 = self.rng.random();
        if u < self.spec.record_rate {
            let key = draw_key(&self.layout, self.spec.key_len, &self.pending_keys, &mut self.rng);
            let value = draw_value(&self.layout, self.spec.value_len, &mut self.rng);
            let rec = Record { key, value };
            let due = self.position + self.distance() as u64;
            let at = self.generated.len() as u64;
            for t in rec.tokens(self.layout.delimiter) {
                self.push(t, Origin::Record);
            }
            self.pending_keys.insert(rec.key.clone());
            self.pending.insert((due, self.emitted_records), (rec, at));
            self.emitted_records += 1;
            return;
        }
        if u < self.spec.record_rate + self.spec.copy_rate {
            let distance = self.distance();
            if distance <= self.generated.len() {
                let [lo, hi] = self.spec.copy_span;
                let len = self.rng.random_range(lo..=hi).min(distance);
                let from = self.generated.len() - distance;
                for i in from..from + len {
                    self.push(self.generated[i], Origin::Copy { distance });
                }
                self.trim();
                return;
            }
        }
        let t = self.next_filler();
        self.push(t, Origin::Filler);
        self.trim();
    }

    /// Keeps the generated buffer bounded by what a copy can still reach.
    fn trim(&mut self) {
        let keep = 2 * self.spec.copy_distance_range[1] + 256;
        if self.generated.len() > 4 * keep {
            let cut = self.generated.len() - keep;
            self.generated.drain(..cut);
            for (_, (_, at)) in self.pending.iter_mut() {
                *at = at.saturating_sub(cut as u64);
            }
        }
    }
}

impl Iterator for Corpus {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_with_origin().0)
    }
}
