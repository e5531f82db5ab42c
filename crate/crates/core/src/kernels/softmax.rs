use super::{axpy, dot, AttentionBatch, HeadLayout};
use crate::autodiff::{Adjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// First visible position for query `t` under a window of `w` tokens.
#[inline]
fn window_start(t: usize, w: usize) -> usize {
    (t + 1).saturating_sub(w)
}

struct Geometry {
    layout: HeadLayout,
    dk: usize,
    dv: usize,
    window: usize,
    /// Offset of query `t`'s probabilities inside one (sequence, head) block.
    offsets: Vec<usize>,
    block: usize,
}

impl Geometry {
    fn new(layout: HeadLayout, dk: usize, dv: usize, window: usize) -> Self {
        let mut offsets = Vec::with_capacity(layout.seq);
        let mut acc = 0;
        for t in 0..layout.seq {
            offsets.push(acc);
            acc += t + 1 - window_start(t, window);
        }
        Geometry {
            layout,
            dk,
            dv,
            window,
            offsets,
            block: acc,
        }
    }
}

struct SlidingWindow<T> {
    geo: Geometry,
    scale: T,
    probs: Vec<T>,
}

fn forward<T: Scalar>(q: &[T], k: &[T], v: &[T], geo: &Geometry, scale: T) -> (Vec<T>, Vec<T>) {
    let HeadLayout { batch, seq, heads } = geo.layout;
    let (dk, dv) = (geo.dk, geo.dv);
    let (qs, vs) = (heads * dk, heads * dv);
    let mut out = vec![T::zero(); batch * seq * vs];
    let mut probs = vec![T::zero(); batch * heads * geo.block];
    for b in 0..batch {
        for h in 0..heads {
            let pblock = &mut probs[(b * heads + h) * geo.block..][..geo.block];
            for t in 0..seq {
                let lo = window_start(t, geo.window);
                let row = b * seq + t;
                let qrow = &q[row * qs + h * dk..][..dk];
                let p = &mut pblock[geo.offsets[t]..][..t + 1 - lo];
                let mut max = T::neg_infinity();
                for (j, i) in (lo..=t).enumerate() {
                    let krow = &k[(b * seq + i) * qs + h * dk..][..dk];
                    let s = dot(qrow, krow) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut denom = T::zero();
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    denom += *x;
                }
                let inv = T::one() / denom;
                let y = &mut out[row * vs + h * dv..][..dv];
                for (j, i) in (lo..=t).enumerate() {
                    p[j] *= inv;
                    axpy(y, p[j], &v[(b * seq + i) * vs + h * dv..][..dv]);
                }
            }
        }
    }
    (out, probs)
}

impl<T: Scalar> Adjoint<T> for SlidingWindow<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let geo = &self.geo;
        let HeadLayout { batch, seq, heads } = geo.layout;
        let (dk, dv) = (geo.dk, geo.dv);
        let (qs, vs) = (heads * dk, heads * dv);
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let mut dq = vec![T::zero(); q.len()];
        let mut dk_ = vec![T::zero(); k.len()];
        let mut dv_ = vec![T::zero(); v.len()];
        let mut ds = vec![T::zero(); geo.window.min(seq)];
        for b in 0..batch {
            for h in 0..heads {
                let pblock = &self.probs[(b * heads + h) * geo.block..][..geo.block];
                for t in 0..seq {
                    let lo = window_start(t, geo.window);
                    let row = b * seq + t;
                    let p = &pblock[geo.offsets[t]..][..t + 1 - lo];
                    let gy = &g[row * vs + h * dv..][..dv];
                    let mut total = T::zero();
                    for (j, i) in (lo..=t).enumerate() {
                        let dp = dot(gy, &v[(b * seq + i) * vs + h * dv..][..dv]);
                        ds[j] = dp;
                        total += p[j] * dp;
                    }
                    let qrow = &q[row * qs + h * dk..][..dk];
                    for (j, i) in (lo..=t).enumerate() {
                        let s = p[j] * (ds[j] - total) * self.scale;
                        let kr = (b * seq + i) * qs + h * dk;
                        axpy(&mut dq[row * qs + h * dk..][..dk], s, &k[kr..kr + dk]);
                        axpy(&mut dk_[kr..kr + dk], s, qrow);
                        axpy(&mut dv_[(b * seq + i) * vs + h * dv..][..dv], p[j], gy);
                    }
                }
            }
        }
        let wrap = |d: Vec<T>, t: &Tensor<T>| Tensor::from_parts_unchecked(t.shape().to_vec(), d);
        vec![
            needs[0].then(|| wrap(dq, inputs[0])),
            needs[1].then(|| wrap(dk_, inputs[1])),
            needs[2].then(|| wrap(dv_, inputs[2])),
        ]
    }
}

/// Multi-head causal softmax attention restricted to the last `window` positions
/// (self included), scaled by `1/sqrt(d_qk)`.
///
/// Positions outside the window are never read, so they cannot influence the output.
pub fn sliding_window_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: HeadLayout,
    window: usize,
) -> Result<Var> {
    if window == 0 {
        return Err(Error::invalid(
            "sliding_window_attention",
            "window must be at least 1 (self position)",
        ));
    }
    let (dk, dv) = layout.qkv_dims("sliding_window_attention", tape, q, k, v)?;
    let geo = Geometry::new(layout, dk, dv, window);
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let (out, probs) = forward(
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
        &geo,
        scale,
    );
    let value = Tensor::from_parts_unchecked(vec![layout.rows(), layout.heads * dv], out);
    tape.push(
        "sliding_window_attention",
        value,
        vec![q, k, v],
        SlidingWindow { geo, scale, probs },
    )
}

/// `y_t = sum_{i<=t} softmax_i(<q_t, k_i> / sqrt(d_qk)) v_i`.
pub fn causal_softmax_attention<T: Scalar>(tape: &mut Tape<T>, batch: &AttentionBatch) -> Result<Var> {
    let layout = batch.layout("causal_softmax_attention", tape)?;
    sliding_window_heads(tape, batch.q, batch.k, batch.v, layout, layout.seq)
}

/// Causal softmax attention over positions `[max(0, t - w + 1), t]`.
pub fn sliding_window_attention<T: Scalar>(tape: &mut Tape<T>, batch: &AttentionBatch, w: usize) -> Result<Var> {
    let layout = batch.layout("sliding_window_attention", tape)?;
    sliding_window_heads(tape, batch.q, batch.k, batch.v, layout, w)
}
