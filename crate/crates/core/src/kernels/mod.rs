//! Attention kernels: softmax (full and sliding-window) with rotary position
//! embeddings, normalised linear attention in parallel and recurrent form,
//! and gated linear attention.
//!
//! Every kernel works on a [`HeadLayout`]: `q`/`k` are `[batch * seq, heads * d_qk]`
//! and `v` is `[batch * seq, heads * d_v]`, heads side by side in each row.
//! The single-head entry points take an [`AttentionBatch`] and use a layout of
//! one sequence and one head.

mod gla;
mod linear;
mod rope;
mod softmax;

pub use gla::{gated_linear_attention, gated_linear_attention_recurrent, GateSequence};
pub use linear::{
    linear_attention_parallel, linear_attention_parallel_heads, linear_attention_recurrent,
    linear_attention_recurrent_heads, LinearAttentionState,
};
pub use rope::{apply_rope, layout_positions, rope_heads, RopeConfig};
pub use softmax::{causal_softmax_attention, sliding_window_attention, sliding_window_heads};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Below this magnitude a normalised linear-attention read is rejected.
pub const MIN_DENOMINATOR: f64 = 1e-9;

/// How sequences and heads are packed into the rows and columns of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

impl HeadLayout {
    pub fn single(seq: usize) -> Self {
        HeadLayout {
            batch: 1,
            seq,
            heads: 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Per-head width of a `[rows, heads * width]` operand.
    pub(crate) fn head_width(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match shape {
            [r, c] if *r == self.rows() && c % self.heads == 0 && *c > 0 => Ok(c / self.heads),
            _ => Err(Error::invalid(
                op,
                format!(
                    "operand of shape {shape:?} does not fit {} sequences x {} tokens x {} heads",
                    self.batch, self.seq, self.heads
                ),
            )),
        }
    }

    /// Validates q/k/v and returns `(d_qk, d_v)`.
    pub(crate) fn qkv_dims<T: Scalar>(
        &self,
        op: &'static str,
        tape: &Tape<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(usize, usize)> {
        if self.batch == 0 || self.seq == 0 || self.heads == 0 {
            return Err(Error::invalid(op, "layout extents must be positive"));
        }
        if tape.shape(q) != tape.shape(k) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: tape.shape(q).to_vec(),
                rhs: tape.shape(k).to_vec(),
            });
        }
        let dk = self.head_width(op, tape.shape(q))?;
        let dv = self.head_width(op, tape.shape(v))?;
        Ok((dk, dv))
    }
}

/// Per-head query/key/value sequences: `q`, `k` are `[S, d_qk]`, `v` is `[S, d_v]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBatch {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl AttentionBatch {
    pub fn new(q: Var, k: Var, v: Var) -> Self {
        AttentionBatch { q, k, v }
    }

    /// Checks the batch invariants and returns its single-head layout.
    pub fn layout<T: Scalar>(&self, op: &'static str, tape: &Tape<T>) -> Result<HeadLayout> {
        let (sq, sk, sv) = (tape.shape(self.q), tape.shape(self.k), tape.shape(self.v));
        match (sq, sk, sv) {
            ([s, dq], [s2, dk], [s3, _]) if s == s2 && s == s3 && dq == dk => Ok(HeadLayout::single(*s)),
            _ => Err(Error::invalid(op, format!("incompatible q {sq:?}, k {sk:?}, v {sv:?}"))),
        }
    }
}

/// Feature map applied to queries and keys before a linear-attention kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    Identity,
    EluPlusOne,
}

impl FeatureMap {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            FeatureMap::Identity => Ok(x),
            FeatureMap::EluPlusOne => tape.elu_plus_one(x),
        }
    }

    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::EluPlusOne => {
                if x > T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + s
}

#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}
