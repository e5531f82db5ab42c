use super::{axpy, dot, AttentionBatch, FeatureMap, HeadLayout, MIN_DENOMINATOR};
use crate::autodiff::{Adjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Matrix memory `H: [d_qk, d_v]` and normaliser `z: [d_qk]` of linear attention.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttentionState<T> {
    pub h: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Scalar> LinearAttentionState<T> {
    pub fn zeros(d_qk: usize, d_v: usize) -> Self {
        LinearAttentionState {
            h: Tensor::zeros(&[d_qk, d_v]),
            z: Tensor::zeros(&[d_qk]),
        }
    }

    pub fn d_qk(&self) -> usize {
        self.z.numel()
    }

    pub fn d_v(&self) -> usize {
        self.h.cols()
    }

    /// Writes `phi(k) v^T` into the memory, then reads it with `phi(q)`.
    ///
    /// `q` and `k` are raw (pre feature map) vectors.
    pub fn step(&mut self, phi: FeatureMap, q: &[T], k: &[T], v: &[T], position: usize) -> Result<Vec<T>> {
        let (dk, dv) = (self.d_qk(), self.d_v());
        if q.len() != dk || k.len() != dk || v.len() != dv {
            return Err(Error::ShapeMismatch {
                op: "linear_attention_recurrent",
                lhs: vec![dk, dv],
                rhs: vec![q.len(), k.len(), v.len()],
            });
        }
        let fk: Vec<T> = k.iter().map(|&x| phi.eval(x)).collect();
        let fq: Vec<T> = q.iter().map(|&x| phi.eval(x)).collect();
        let h = self.h.data_mut();
        for i in 0..dk {
            axpy(&mut h[i * dv..(i + 1) * dv], fk[i], v);
        }
        self.z.data_mut().iter_mut().zip(&fk).for_each(|(z, &f)| *z += f);
        read(&fq, self.h.data(), self.z.data(), dv, position)
    }

    /// Runs [`Self::step`] over rows of `q: [S, d_qk]`, `k`, `v: [S, d_v]`.
    /// An empty sequence leaves the state unchanged.
    pub fn scan(&mut self, phi: FeatureMap, q: &[T], k: &[T], v: &[T]) -> Result<Vec<T>> {
        let (dk, dv) = (self.d_qk(), self.d_v());
        let steps = q.len() / dk;
        if q.len() != steps * dk || k.len() != steps * dk || v.len() != steps * dv {
            return Err(Error::invalid(
                "linear_attention_recurrent",
                "q/k/v lengths disagree with the state dimensions",
            ));
        }
        let mut out = Vec::with_capacity(steps * dv);
        for t in 0..steps {
            let y = self.step(
                phi,
                &q[t * dk..(t + 1) * dk],
                &k[t * dk..(t + 1) * dk],
                &v[t * dv..(t + 1) * dv],
                t,
            )?;
            out.extend(y);
        }
        Ok(out)
    }
}

/// `(q^T H) / (q^T z)`.
fn read<T: Scalar>(q: &[T], h: &[T], z: &[T], dv: usize, position: usize) -> Result<Vec<T>> {
    let den = dot(q, z);
    if den.abs().as_f64() < MIN_DENOMINATOR {
        return Err(Error::DegenerateRead {
            position,
            denominator: den.as_f64(),
        });
    }
    let mut y = vec![T::zero(); dv];
    for (i, &qi) in q.iter().enumerate() {
        axpy(&mut y, qi, &h[i * dv..(i + 1) * dv]);
    }
    let inv = T::one() / den;
    y.iter_mut().for_each(|x| *x *= inv);
    Ok(y)
}

// ---------------------------------------------------------------------------
// Parallel (quadratic) form

struct Parallel<T> {
    layout: HeadLayout,
    dk: usize,
    dv: usize,
    den: Vec<T>,
}

fn head<T: Scalar>(x: &[T], row: usize, h: usize, heads: usize, w: usize) -> &[T] {
    &x[row * heads * w + h * w..][..w]
}

fn head_mut<T: Scalar>(x: &mut [T], row: usize, h: usize, heads: usize, w: usize) -> &mut [T] {
    &mut x[row * heads * w + h * w..][..w]
}

impl<T: Scalar> Adjoint<T> for Parallel<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let HeadLayout { batch, seq, heads } = self.layout;
        let (dk, dv) = (self.dk, self.dv);
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (y, g) = (output.data(), grad.data());
        let mut dq = vec![T::zero(); q.len()];
        let mut dkk = vec![T::zero(); k.len()];
        let mut dvv = vec![T::zero(); v.len()];
        let mut dn = vec![T::zero(); dv];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let row = b * seq + t;
                    let den = self.den[(b * heads + h) * seq + t];
                    let gy = head(g, row, h, heads, dv);
                    let inv = T::one() / den;
                    dn.iter_mut().zip(gy).for_each(|(d, &g)| *d = g * inv);
                    let dden = -dot(gy, head(y, row, h, heads, dv)) * inv;
                    let qt = head(q, row, h, heads, dk).to_vec();
                    for i in 0..=t {
                        let ri = b * seq + i;
                        let ki = head(k, ri, h, heads, dk);
                        let s = dot(&qt, ki);
                        let ds = dot(&dn, head(v, ri, h, heads, dv)) + dden;
                        axpy(head_mut(&mut dq, row, h, heads, dk), ds, ki);
                        axpy(head_mut(&mut dkk, ri, h, heads, dk), ds, &qt);
                        axpy(head_mut(&mut dvv, ri, h, heads, dv), s, &dn);
                    }
                }
            }
        }
        let wrap = |d: Vec<T>, t: &Tensor<T>| Tensor::from_parts_unchecked(t.shape().to_vec(), d);
        vec![
            needs[0].then(|| wrap(dq, inputs[0])),
            needs[1].then(|| wrap(dkk, inputs[1])),
            needs[2].then(|| wrap(dvv, inputs[2])),
        ]
    }
}

/// Normalised causal linear attention computed from the full matrix of
/// pairwise scores `<q_t, k_i>`. Inputs are already feature-mapped.
pub fn linear_attention_parallel_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: HeadLayout,
) -> Result<Var> {
    let (dk, dv) = layout.qkv_dims("linear_attention_parallel", tape, q, k, v)?;
    let HeadLayout { batch, seq, heads } = layout;
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![T::zero(); layout.rows() * heads * dv];
    let mut den = vec![T::zero(); batch * heads * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let row = b * seq + t;
                let qt = head(qd, row, h, heads, dk);
                for (i, s) in scores.iter_mut().enumerate().take(t + 1) {
                    *s = dot(qt, head(kd, b * seq + i, h, heads, dk));
                }
                let d: T = scores[..=t].iter().copied().sum();
                if d.abs().as_f64() < MIN_DENOMINATOR {
                    return Err(Error::DegenerateRead {
                        position: t,
                        denominator: d.as_f64(),
                    });
                }
                den[(b * heads + h) * seq + t] = d;
                let y = head_mut(&mut out, row, h, heads, dv);
                for (i, &s) in scores.iter().enumerate().take(t + 1) {
                    axpy(y, s, head(vd, b * seq + i, h, heads, dv));
                }
                let inv = T::one() / d;
                y.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }
    let value = Tensor::from_parts_unchecked(vec![layout.rows(), heads * dv], out);
    tape.push(
        "linear_attention_parallel",
        value,
        vec![q, k, v],
        Parallel { layout, dk, dv, den },
    )
}

/// `y_t = sum_{i<=t} <phi(q_t), phi(k_i)> v_i / sum_{i<=t} <phi(q_t), phi(k_i)>`.
pub fn linear_attention_parallel<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &AttentionBatch,
    phi: FeatureMap,
) -> Result<Var> {
    let layout = batch.layout("linear_attention_parallel", tape)?;
    let q = phi.apply(tape, batch.q)?;
    let k = phi.apply(tape, batch.k)?;
    linear_attention_parallel_heads(tape, q, k, batch.v, layout)
}

// ---------------------------------------------------------------------------
// Recurrent (constant memory) form

struct Recurrent<T> {
    layout: HeadLayout,
    dk: usize,
    dv: usize,
    /// Memory after each step, per (sequence, head): `seq * dk * dv`.
    h_states: Vec<T>,
    /// Normaliser after each step: `seq * dk`.
    z_states: Vec<T>,
}

impl<T: Scalar> Adjoint<T> for Recurrent<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let HeadLayout { batch, seq, heads } = self.layout;
        let (dk, dv) = (self.dk, self.dv);
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (y, g) = (output.data(), grad.data());
        let mut dq = vec![T::zero(); q.len()];
        let mut dkk = vec![T::zero(); k.len()];
        let mut dvv = vec![T::zero(); v.len()];
        let mut gh = vec![T::zero(); dk * dv];
        let mut gz = vec![T::zero(); dk];
        let mut dnum = vec![T::zero(); dv];
        for b in 0..batch {
            for h in 0..heads {
                let hb = (b * heads + h) * seq;
                gh.iter_mut().for_each(|x| *x = T::zero());
                gz.iter_mut().for_each(|x| *x = T::zero());
                for t in (0..seq).rev() {
                    let row = b * seq + t;
                    let hs = &self.h_states[(hb + t) * dk * dv..][..dk * dv];
                    let zs = &self.z_states[(hb + t) * dk..][..dk];
                    let qt = head(q, row, h, heads, dk);
                    let den = dot(qt, zs);
                    let inv = T::one() / den;
                    let gy = head(g, row, h, heads, dv);
                    dnum.iter_mut().zip(gy).for_each(|(d, &g)| *d = g * inv);
                    let dden = -dot(gy, head(y, row, h, heads, dv)) * inv;
                    let dqt = head_mut(&mut dq, row, h, heads, dk);
                    for i in 0..dk {
                        dqt[i] = dot(&hs[i * dv..(i + 1) * dv], &dnum) + zs[i] * dden;
                    }
                    for i in 0..dk {
                        axpy(&mut gh[i * dv..(i + 1) * dv], qt[i], &dnum);
                        gz[i] += qt[i] * dden;
                    }
                    let kt = head(k, row, h, heads, dk);
                    let vt = head(v, row, h, heads, dv);
                    let dkt = head_mut(&mut dkk, row, h, heads, dk);
                    for i in 0..dk {
                        dkt[i] = dot(&gh[i * dv..(i + 1) * dv], vt) + gz[i];
                    }
                    let dvt = head_mut(&mut dvv, row, h, heads, dv);
                    for i in 0..dk {
                        axpy(dvt, kt[i], &gh[i * dv..(i + 1) * dv]);
                    }
                }
            }
        }
        let wrap = |d: Vec<T>, t: &Tensor<T>| Tensor::from_parts_unchecked(t.shape().to_vec(), d);
        vec![
            needs[0].then(|| wrap(dq, inputs[0])),
            needs[1].then(|| wrap(dkk, inputs[1])),
            needs[2].then(|| wrap(dvv, inputs[2])),
        ]
    }
}

/// Recurrent normalised linear attention over feature-mapped inputs.
///
/// `initial` holds one state per (sequence, head) in row-major order and is
/// treated as a constant; `None` starts every scan from zeros. Returns the
/// output and the final state of every scan.
pub fn linear_attention_recurrent_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: HeadLayout,
    initial: Option<&[LinearAttentionState<T>]>,
) -> Result<(Var, Vec<LinearAttentionState<T>>)> {
    let (dk, dv) = layout.qkv_dims("linear_attention_recurrent", tape, q, k, v)?;
    let HeadLayout { batch, seq, heads } = layout;
    if let Some(init) = initial {
        if init.len() != batch * heads || init.iter().any(|s| s.d_qk() != dk || s.d_v() != dv) {
            return Err(Error::invalid(
                "linear_attention_recurrent",
                format!("expected {} states of [{dk}, {dv}]", batch * heads),
            ));
        }
    }
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![T::zero(); layout.rows() * heads * dv];
    let mut h_states = vec![T::zero(); batch * heads * seq * dk * dv];
    let mut z_states = vec![T::zero(); batch * heads * seq * dk];
    let mut finals = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let mut state = match initial {
                Some(init) => init[b * heads + h].clone(),
                None => LinearAttentionState::zeros(dk, dv),
            };
            let hb = (b * heads + h) * seq;
            for t in 0..seq {
                let row = b * seq + t;
                let y = state.step(
                    FeatureMap::Identity,
                    head(qd, row, h, heads, dk),
                    head(kd, row, h, heads, dk),
                    head(vd, row, h, heads, dv),
                    t,
                )?;
                head_mut(&mut out, row, h, heads, dv).copy_from_slice(&y);
                h_states[(hb + t) * dk * dv..][..dk * dv].copy_from_slice(state.h.data());
                z_states[(hb + t) * dk..][..dk].copy_from_slice(state.z.data());
            }
            finals.push(state);
        }
    }
    let value = Tensor::from_parts_unchecked(vec![layout.rows(), heads * dv], out);
    let var = tape.push(
        "linear_attention_recurrent",
        value,
        vec![q, k, v],
        Recurrent {
            layout,
            dk,
            dv,
            h_states,
            z_states,
        },
    )?;
    Ok((var, finals))
}

/// Constant-memory form: `H_t = H_{t-1} + phi(k_t) v_t^T`, `z_t = z_{t-1} + phi(k_t)`,
/// `y_t = phi(q_t)^T H_t / phi(q_t)^T z_t`. Continues from `state`.
pub fn linear_attention_recurrent<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &AttentionBatch,
    phi: FeatureMap,
    state: LinearAttentionState<T>,
) -> Result<(Var, LinearAttentionState<T>)> {
    let layout = batch.layout("linear_attention_recurrent", tape)?;
    let q = phi.apply(tape, batch.q)?;
    let k = phi.apply(tape, batch.k)?;
    let (y, mut finals) =
        linear_attention_recurrent_heads(tape, q, k, batch.v, layout, Some(std::slice::from_ref(&state)))?;
    Ok((y, finals.pop().expect("one scan")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_outer_product_write() {
        let mut state = LinearAttentionState::<f64>::zeros(2, 2);
        let y = state
            .step(FeatureMap::Identity, &[1.0, 0.0], &[1.0, 0.0], &[2.0, 3.0], 0)
            .unwrap();
        assert_eq!(state.h.data(), &[2.0, 3.0, 0.0, 0.0]);
        assert_eq!(state.z.data(), &[1.0, 0.0]);
        assert_eq!(y, vec![2.0, 3.0]);
    }

    #[test]
    fn empty_continuation_keeps_state() {
        let mut state = LinearAttentionState::<f64>::zeros(2, 3);
        state
            .step(FeatureMap::Identity, &[1.0, 1.0], &[0.5, 1.0], &[1.0, 2.0, 3.0], 0)
            .unwrap();
        let before = state.clone();
        let y = state.scan(FeatureMap::Identity, &[], &[], &[]).unwrap();
        assert!(y.is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn degenerate_read_reports_position() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap());
        let b = AttentionBatch::new(q, k, v);
        let err = linear_attention_parallel(&mut tape, &b, FeatureMap::Identity).unwrap_err();
        assert!(matches!(err, Error::DegenerateRead { position: 1, .. }), "{err}");
        let err = linear_attention_recurrent(&mut tape, &b, FeatureMap::Identity, LinearAttentionState::zeros(2, 1))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateRead { position: 1, .. }), "{err}");
    }

    #[test]
    fn single_token_cancels() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, -2.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 2], &[1.5, 0.25]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 3.0]).unwrap());
        let y = linear_attention_parallel(&mut tape, &AttentionBatch::new(q, k, v), FeatureMap::Identity).unwrap();
        let got = tape.value(y).data();
        for (a, b) in got.iter().zip([1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
