use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{draw_key, draw_value, Corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NiahKind {
    Single,
    Multikey,
    Multiquery,
    Multivalue,
}

impl NiahKind {
    pub const ALL: [NiahKind; 4] = [
        NiahKind::Single,
        NiahKind::Multikey,
        NiahKind::Multiquery,
        NiahKind::Multivalue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NiahKind::Single => "single",
            NiahKind::Multikey => "multikey",
            NiahKind::Multiquery => "multiquery",
            NiahKind::Multivalue => "multivalue",
        }
    }

    /// Needles inserted into one sample.
    pub fn n_needles(self) -> usize {
        match self {
            NiahKind::Single => 1,
            NiahKind::Multikey => 1 + MULTIKEY_DISTRACTORS,
            NiahKind::Multiquery | NiahKind::Multivalue => 2,
        }
    }

    fn n_query_keys(self) -> usize {
        match self {
            NiahKind::Multiquery => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for NiahKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NiahKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NiahKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

pub const MULTIKEY_DISTRACTORS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Needle {
    pub key: Vec<usize>,
    pub value: Vec<usize>,
    /// Index of the first key token in `NiahSample::tokens`.
    pub position: usize,
}

/// A haystack with needles, ending in the query; `gold` is the expected continuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiahSample {
    pub kind: NiahKind,
    pub tokens: Vec<usize>,
    pub needles: Vec<Needle>,
    /// Suffix of `tokens`: the queried key(s) followed by the delimiter.
    pub query: Vec<usize>,
    pub gold: Vec<usize>,
    pub depth_bin: usize,
}

impl NiahSample {
    /// Length of the haystack body, everything before the query.
    pub fn body_len(&self) -> usize {
        self.tokens.len() - self.query.len()
    }
}

/// Shortest `seq_len` that fits the needles of `kind`, the query, and one
/// insertion gap per depth bin.
pub fn min_seq_len(kind: NiahKind, n_depth_bins: usize, spec: &CorpusSpec) -> usize {
    let query = kind.n_query_keys() * spec.key_len + 1;
    kind.n_needles() * spec.record_len() + query + n_depth_bins.max(1) + 1
}

/// `n_samples` samples of `kind`; sample `i` lands in depth bin `i % n_depth_bins`.
///
/// Haystacks are filler text of the language described by `spec`.
pub fn gen_niah(
    kind: NiahKind,
    seq_len: usize,
    n_depth_bins: usize,
    seed: u64,
    n_samples: usize,
    spec: &CorpusSpec,
) -> Result<Vec<NiahSample>> {
    spec.validate()?;
    if n_depth_bins == 0 {
        return Err(Error::Config("n_depth_bins must be positive".into()));
    }
    let min = min_seq_len(kind, n_depth_bins, spec);
    if seq_len < min {
        return Err(Error::Config(format!(
            "seq_len {seq_len} too small for {kind} with {n_depth_bins} depth bins; minimum length is {min}"
        )));
    }
    let layout = spec.layout();
    let distinct_keys = (0..spec.key_len).fold(1f64, |acc, i| acc * (layout.keys.len() - i) as f64);
    let distinct_values = (layout.values.len() as f64).powi(spec.value_len as i32);
    if distinct_keys < kind.n_needles() as f64 || distinct_values < kind.n_needles() as f64 {
        return Err(Error::Config(format!(
            "vocabulary {} is too small for {} distinct {kind} needles",
            spec.vocab_size,
            kind.n_needles()
        )));
    }
    (0..n_samples)
        .map(|i| {
            sample_one(
                kind,
                seq_len,
                n_depth_bins,
                i % n_depth_bins,
                derive_seed(seed, i as u64),
                spec,
            )
        })
        .collect()
}

fn sample_one(
    kind: NiahKind,
    seq_len: usize,
    bins: usize,
    bin: usize,
    seed: u64,
    spec: &CorpusSpec,
) -> Result<NiahSample> {
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = kind.n_needles();
    let r = spec.record_len();

    let mut taken = HashSet::new();
    let mut records: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(n);
    for i in 0..n {
        let key = if kind == NiahKind::Multivalue && i > 0 {
            records[0].0.clone()
        } else {
            draw_key(&layout, spec.key_len, &taken, &mut rng)
        };
        let mut value = draw_value(&layout, spec.value_len, &mut rng);
        while records.iter().any(|(_, v)| *v == value) {
            value = draw_value(&layout, spec.value_len, &mut rng);
        }
        taken.insert(key.clone());
        records.push((key, value));
    }

    let query_keys = kind.n_query_keys();
    let mut query: Vec<usize> = records[..query_keys].iter().flat_map(|(k, _)| k.clone()).collect();
    query.push(layout.delimiter);

    // Needles go into gaps of the filler text: gap g means "after g filler
    // tokens", with 1 <= g < filler_len so that every needle sits strictly
    // inside the body.
    let body_len = seq_len - query.len();
    let filler_len = body_len - n * r;
    let gaps = filler_len - 1;
    let lo = 1 + bin * gaps / bins;
    let hi = 1 + (bin + 1) * gaps / bins;
    let mut placed: Vec<(usize, usize)> = vec![(rng.random_range(lo..hi), 0)];
    for i in 1..n {
        placed.push((rng.random_range(1..filler_len), i));
    }
    // ties between gaps are broken at random
    placed.shuffle(&mut rng);
    placed.sort_by_key(|&(g, _)| g);

    let stream_seed = rng.random::<u64>();
    let filler = Corpus::new(spec, stream_seed)?.filler(filler_len);
    let mut tokens = Vec::with_capacity(seq_len);
    let mut needles = Vec::with_capacity(n);
    let mut f = 0;
    for &(g, i) in &placed {
        tokens.extend_from_slice(&filler[f..g]);
        f = g;
        let (key, value) = &records[i];
        needles.push(Needle {
            key: key.clone(),
            value: value.clone(),
            position: tokens.len(),
        });
        tokens.extend_from_slice(key);
        tokens.push(layout.delimiter);
        tokens.extend_from_slice(value);
    }
    tokens.extend_from_slice(&filler[f..]);
    tokens.extend_from_slice(&query);
    debug_assert_eq!(tokens.len(), seq_len);

    let gold: Vec<usize> = match kind {
        NiahKind::Single | NiahKind::Multikey => records[0].1.clone(),
        NiahKind::Multiquery => records.iter().flat_map(|(_, v)| v.clone()).collect(),
        // every value bound to the key, in haystack order
        NiahKind::Multivalue => needles.iter().flat_map(|n| n.value.clone()).collect(),
    };
    Ok(NiahSample {
        kind,
        tokens,
        needles,
        query,
        gold,
        depth_bin: bin,
    })
}
