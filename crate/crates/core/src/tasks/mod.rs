//! Synthetic data and evaluators: an n-gram language with long-range
//! key/value records, needle-in-a-haystack retrieval tasks, and perplexity.

mod corpus;
mod eval;
mod niah;

pub use corpus::{gen_corpus, Corpus, CorpusSpec, NgramTable, Origin, Record, TokenLayout};
pub use eval::{
    cell_seed, eval_cross_entropy, eval_niah_sweep, eval_perplexity, greedy_decode, score_niah, score_niah_batch,
    EvalResult, NiahSettings, Predictor,
};
pub use niah::{gen_niah, min_seq_len, Needle, NiahKind, NiahSample, MULTIKEY_DISTRACTORS};
