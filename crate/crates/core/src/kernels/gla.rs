use super::{axpy, dot, AttentionBatch, FeatureMap, HeadLayout};
use crate::autodiff::{Adjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-step write (`alpha`), read (`beta`) and decay (`lambda`) gates.
///
/// Each is `[rows, heads * g]` where the gate width `g` is either `d_qk`
/// (one gate per key coordinate) or 1 (one scalar per head and step).
#[derive(Clone, Copy, Debug)]
pub struct GateSequence {
    pub alpha: Var,
    pub beta: Var,
    pub lambda: Var,
}

struct Gla<T> {
    layout: HeadLayout,
    dk: usize,
    dv: usize,
    g: usize,
    /// Memory after every step, `seq * dk * dv` per (sequence, head).
    states: Vec<T>,
    initial: Option<Vec<T>>,
}

#[inline]
fn gate<T: Scalar>(x: &[T], row: usize, h: usize, heads: usize, g: usize, i: usize) -> T {
    x[(row * heads + h) * g + if g == 1 { 0 } else { i }]
}

impl<T: Scalar> Adjoint<T> for Gla<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let HeadLayout { batch, seq, heads } = self.layout;
        let (dk, dv, g) = (self.dk, self.dv, self.g);
        let [q, k, v, alpha, beta, lambda] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let gy = grad.data();
        let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| vec![T::zero(); t.numel()]).collect();
        let mut big_g = vec![T::zero(); dk * dv];
        let mut qt = vec![T::zero(); dk];
        let zeros = vec![T::zero(); dk * dv];
        let block = dk * dv;
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq;
                big_g.iter_mut().for_each(|x| *x = T::zero());
                for t in (0..seq).rev() {
                    let row = b * seq + t;
                    let qo = (row * heads + h) * dk;
                    let vo = (row * heads + h) * dv;
                    let go = (row * heads + h) * g;
                    let dy = &gy[vo..vo + dv];
                    let ht = &self.states[(base + t) * block..][..block];
                    let prev: &[T] = if t > 0 {
                        &self.states[(base + t - 1) * block..][..block]
                    } else {
                        match &self.initial {
                            Some(init) => &init[(b * heads + h) * block..][..block],
                            None => &zeros,
                        }
                    };
                    for i in 0..dk {
                        qt[i] = gate(beta, row, h, heads, g, i) * q[qo + i];
                    }
                    for i in 0..dk {
                        axpy(&mut big_g[i * dv..(i + 1) * dv], qt[i], dy);
                        let r = dot(&ht[i * dv..(i + 1) * dv], dy);
                        let bi = gate(beta, row, h, heads, g, i);
                        grads[0][qo + i] = bi * r;
                        grads[4][go + if g == 1 { 0 } else { i }] += q[qo + i] * r;
                    }
                    for i in 0..dk {
                        let gi = &big_g[i * dv..(i + 1) * dv];
                        let gsel = if g == 1 { 0 } else { i };
                        grads[5][go + gsel] += dot(gi, &prev[i * dv..(i + 1) * dv]);
                        let u = dot(gi, &v[vo..vo + dv]);
                        let ai = gate(alpha, row, h, heads, g, i);
                        grads[1][qo + i] = ai * u;
                        grads[3][go + gsel] += k[qo + i] * u;
                        let w = ai * k[qo + i];
                        axpy(&mut grads[2][vo..vo + dv], w, gi);
                    }
                    for i in 0..dk {
                        let li = gate(lambda, row, h, heads, g, i);
                        big_g[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x *= li);
                    }
                }
            }
        }
        grads
            .into_iter()
            .zip(inputs)
            .zip(needs)
            .map(|((d, t), &n)| n.then(|| Tensor::from_parts_unchecked(t.shape().to_vec(), d)))
            .collect()
    }
}

/// Multi-head gated linear attention scan:
/// `H_t = diag(lambda_t) H_{t-1} + diag(alpha_t) k_t v_t^T`, `y_t = H_t^T (beta_t * q_t)`.
///
/// `q`/`k` are used as given (apply any feature map beforehand). `initial`
/// holds one `[d_qk, d_v]` memory per (sequence, head), treated as constant;
/// `None` starts from zeros. Returns the outputs and every final memory.
pub fn gated_linear_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    gates: &GateSequence,
    layout: HeadLayout,
    initial: Option<&[Tensor<T>]>,
) -> Result<(Var, Vec<Tensor<T>>)> {
    const OP: &str = "gated_linear_attention";
    let (dk, dv) = layout.qkv_dims(OP, tape, q, k, v)?;
    let HeadLayout { batch, seq, heads } = layout;
    let gshape = tape.shape(gates.alpha).to_vec();
    for gv in [gates.beta, gates.lambda] {
        if tape.shape(gv) != &gshape[..] {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: gshape,
                rhs: tape.shape(gv).to_vec(),
            });
        }
    }
    let g = layout.head_width(OP, &gshape)?;
    if g != 1 && g != dk {
        return Err(Error::invalid(OP, format!("gate width {g} must be 1 or d_qk = {dk}")));
    }
    let block = dk * dv;
    if let Some(init) = initial {
        if init.len() != batch * heads || init.iter().any(|t| t.shape() != [dk, dv]) {
            return Err(Error::invalid(
                OP,
                format!("expected {} initial memories of [{dk}, {dv}]", batch * heads),
            ));
        }
    }
    let inputs = [q, k, v, gates.alpha, gates.beta, gates.lambda];
    let track = inputs.iter().any(|&x| tape.requires_grad(x));
    let [qd, kd, vd, ad, bd, ld] = inputs.map(|x| tape.value(x).data());
    let mut out = vec![T::zero(); layout.rows() * heads * dv];
    let mut states = if track {
        vec![T::zero(); batch * heads * seq * block]
    } else {
        Vec::new()
    };
    let mut finals = Vec::with_capacity(batch * heads);
    let mut qt = vec![T::zero(); dk];
    for b in 0..batch {
        for h in 0..heads {
            let mut mem = match initial {
                Some(init) => init[b * heads + h].data().to_vec(),
                None => vec![T::zero(); block],
            };
            for t in 0..seq {
                let row = b * seq + t;
                let qo = (row * heads + h) * dk;
                let vo = (row * heads + h) * dv;
                let vt = &vd[vo..vo + dv];
                for i in 0..dk {
                    let mi = &mut mem[i * dv..(i + 1) * dv];
                    let li = gate(ld, row, h, heads, g, i);
                    mi.iter_mut().for_each(|x| *x *= li);
                    axpy(mi, gate(ad, row, h, heads, g, i) * kd[qo + i], vt);
                    qt[i] = gate(bd, row, h, heads, g, i) * qd[qo + i];
                }
                let y = &mut out[vo..vo + dv];
                for i in 0..dk {
                    axpy(y, qt[i], &mem[i * dv..(i + 1) * dv]);
                }
                if track {
                    let base = (b * heads + h) * seq;
                    states[(base + t) * block..][..block].copy_from_slice(&mem);
                }
            }
            finals.push(Tensor::from_parts_unchecked(vec![dk, dv], mem));
        }
    }
    let value = Tensor::from_parts_unchecked(vec![layout.rows(), heads * dv], out);
    let initial = match (track, initial) {
        (true, Some(init)) => Some(init.iter().flat_map(|t| t.data().iter().copied()).collect()),
        _ => None,
    };
    let var = tape.push(
        OP,
        value,
        inputs.to_vec(),
        Gla {
            layout,
            dk,
            dv,
            g,
            states,
            initial,
        },
    )?;
    Ok((var, finals))
}

/// Single-head gated linear attention continuing from memory `state: [d_qk, d_v]`.
///
/// `phi` is applied to queries and keys. Gates are `[S, d_qk]` or `[S, 1]`.
pub fn gated_linear_attention_recurrent<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &AttentionBatch,
    phi: FeatureMap,
    gates: &GateSequence,
    state: Tensor<T>,
) -> Result<(Var, Tensor<T>)> {
    let layout = batch.layout("gated_linear_attention", tape)?;
    let q = phi.apply(tape, batch.q)?;
    let k = phi.apply(tape, batch.k)?;
    let (y, mut finals) =
        gated_linear_attention(tape, q, k, batch.v, gates, layout, Some(std::slice::from_ref(&state)))?;
    Ok((y, finals.pop().expect("one scan")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn full_decay_is_memoryless() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]));
        let k = tape.constant(t(&[2, 2], &[0.5, 1.0, 2.0, -1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let gates = GateSequence {
            alpha: tape.constant(t(&[2, 2], &[1.0, 0.5, 0.25, 1.0])),
            beta: tape.constant(t(&[2, 2], &[1.0, 1.0, 0.5, 2.0])),
            lambda: tape.constant(Tensor::zeros(&[2, 2])),
        };
        let b = AttentionBatch::new(q, k, v);
        let (y, _) =
            gated_linear_attention_recurrent(&mut tape, &b, FeatureMap::Identity, &gates, Tensor::zeros(&[2, 1]))
                .unwrap();
        // step 1: (0.5*-1*0.25*2 + 2*0.5*1*-1) * 4
        let expect = [(1.0 * 0.5 + 2.0 * 0.5) * 3.0, (-0.5 * 0.5 - 1.0) * 4.0];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_gate_width() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let gv = tape.constant(Tensor::zeros(&[3, 2]));
        let gates = GateSequence {
            alpha: gv,
            beta: gv,
            lambda: gv,
        };
        let r = gated_linear_attention(&mut tape, x, x, x, &gates, HeadLayout::single(3), None);
        assert!(r.is_err());
    }
}
