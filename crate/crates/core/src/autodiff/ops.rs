//! Differentiable primitives.

use super::{Adjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Scalar, Tensor, Trans};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Adjoint<T> for MatMul {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            gemm_into(
                grad.data(),
                (m, n),
                Trans::No,
                b.data(),
                (k, n),
                Trans::Yes,
                &mut da,
                false,
            );
            Tensor::from_parts_unchecked(a.shape().to_vec(), da)
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            gemm_into(
                a.data(),
                (m, k),
                Trans::Yes,
                grad.data(),
                (m, n),
                Trans::No,
                &mut db,
                false,
            );
            Tensor::from_parts_unchecked(b.shape().to_vec(), db)
        });
        vec![da, db]
    }
}

struct BatchMatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Adjoint<T> for BatchMatMul {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0], inputs[1]);
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); self.batch * m * k];
            for i in 0..self.batch {
                gemm_into(
                    &grad.data()[i * m * n..(i + 1) * m * n],
                    (m, n),
                    Trans::No,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    (k, n),
                    Trans::Yes,
                    &mut da[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            Tensor::from_parts_unchecked(a.shape().to_vec(), da)
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); self.batch * k * n];
            for i in 0..self.batch {
                gemm_into(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    (m, k),
                    Trans::Yes,
                    &grad.data()[i * m * n..(i + 1) * m * n],
                    (m, n),
                    Trans::No,
                    &mut db[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
            Tensor::from_parts_unchecked(b.shape().to_vec(), db)
        });
        vec![da, db]
    }
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let nd = x.ndim();
    let (r, c) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let batch = x.numel() / (r * c);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::from_parts_unchecked(shape, out)
}

struct Transpose;

impl<T: Scalar> Adjoint<T> for Transpose {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(transpose_last2(grad))]
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Adjoint<T> for Binary {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        match self {
            Binary::Add => vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())],
            Binary::Sub => vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|g| -g))],
            Binary::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let prod = |x: &Tensor<T>| {
                    let data = x.data().iter().zip(grad.data()).map(|(&x, &g)| x * g).collect();
                    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
                };
                vec![needs[0].then(|| prod(b)), needs[1].then(|| prod(a))]
            }
        }
    }
}

struct AddBias {
    cols: usize,
}

impl<T: Scalar> Adjoint<T> for AddBias {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); self.cols];
            for row in grad.data().chunks_exact(self.cols) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            Tensor::from_parts_unchecked(vec![self.cols], db)
        });
        vec![needs[0].then(|| grad.clone()), db]
    }
}

struct Scale<T> {
    factor: T,
}

impl<T: Scalar> Adjoint<T> for Scale<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.factor))]
    }
}

struct Sum {
    shape: Vec<usize>,
}

impl<T: Scalar> Adjoint<T> for Sum {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(&self.shape, grad.item()))]
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Sigmoid,
    Silu,
    EluPlusOne,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::EluPlusOne => "elu_plus_one",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::EluPlusOne => {
                if x > T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::EluPlusOne => {
                if x > T::zero() {
                    T::one()
                } else {
                    y
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Adjoint<T> for Unary {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.derivative(x, y))
            .collect();
        vec![Some(Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
    }
}

// ---------------------------------------------------------------------------
// Softmax with exclusion mask

struct Softmax {
    keep: Option<Vec<bool>>,
}

impl<T: Scalar> Adjoint<T> for Softmax {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let n = output.cols();
        let mut dx = vec![T::zero(); output.numel()];
        for (r, ((p, g), d)) in output
            .data()
            .chunks_exact(n)
            .zip(grad.data().chunks_exact(n))
            .zip(dx.chunks_exact_mut(n))
            .enumerate()
        {
            let keep = |j: usize| self.keep.as_ref().is_none_or(|k| k[r * n + j]);
            let mut dot = T::zero();
            for j in 0..n {
                if keep(j) {
                    dot += p[j] * g[j];
                }
            }
            for j in 0..n {
                if keep(j) {
                    d[j] = p[j] * (g[j] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts_unchecked(output.shape().to_vec(), dx))]
    }
}

// ---------------------------------------------------------------------------
// Normalisation, embedding, loss

struct RmsNorm<T> {
    group: usize,
    inv_rms: Vec<T>,
}

impl<T: Scalar> Adjoint<T> for RmsNorm<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let cols = x.cols();
        let gs = self.group;
        let nf = T::from_f64(gs as f64);
        let mut dx = vec![T::zero(); x.numel()];
        let mut dg = vec![T::zero(); cols];
        for (gi, ((xs, gy), dxs)) in x
            .data()
            .chunks_exact(gs)
            .zip(grad.data().chunks_exact(gs))
            .zip(dx.chunks_exact_mut(gs))
            .enumerate()
        {
            let r = self.inv_rms[gi];
            let off = (gi * gs) % cols;
            let g = &gain.data()[off..off + gs];
            let mut acc = T::zero();
            for j in 0..gs {
                acc += g[j] * gy[j] * xs[j];
            }
            let c = r * r * r * acc / nf;
            for j in 0..gs {
                dxs[j] = r * g[j] * gy[j] - c * xs[j];
                dg[off + j] += gy[j] * xs[j] * r;
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts_unchecked(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts_unchecked(vec![cols], dg)),
        ]
    }
}

struct Embedding {
    ids: Vec<usize>,
}

impl<T: Scalar> Adjoint<T> for Embedding {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let table = inputs[0];
        let d = table.cols();
        let mut dt = vec![T::zero(); table.numel()];
        for (row, &id) in grad.data().chunks_exact(d).zip(&self.ids) {
            dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
        vec![Some(Tensor::from_parts_unchecked(table.shape().to_vec(), dt))]
    }
}

struct CrossEntropy<T> {
    targets: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Scalar> Adjoint<T> for CrossEntropy<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let v = logits.cols();
        let scale = grad.item() / T::from_f64(self.targets.len() as f64);
        let mut d = self.probs.clone();
        for (i, &t) in self.targets.iter().enumerate() {
            d[i * v + t] -= T::one();
        }
        d.iter_mut().for_each(|x| *x *= scale);
        vec![Some(Tensor::from_parts_unchecked(logits.shape().to_vec(), d))]
    }
}

/// User-supplied vector-Jacobian product for [`Tape::custom`].
pub type CustomAdjoint<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

struct Custom<T: Scalar>(CustomAdjoint<T>);

impl<T: Scalar> Adjoint<T> for Custom<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        (self.0)(inputs, output, grad).into_iter().map(Some).collect()
    }
}

// ---------------------------------------------------------------------------

impl<T: Scalar> Tape<T> {
    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            self.value(a).data(),
            (m, k),
            Trans::No,
            self.value(b).data(),
            (k, n),
            Trans::No,
            &mut out,
            false,
        );
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.push("matmul", value, vec![a, b], MatMul { m, k, n })
    }

    /// `[b, m, k] @ [b, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (&sa[..], &sb[..]) {
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(mismatch("batch_matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_into(
                &av[i * m * k..(i + 1) * m * k],
                (m, k),
                Trans::No,
                &bv[i * k * n..(i + 1) * k * n],
                (k, n),
                Trans::No,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_parts_unchecked(vec![batch, m, n], out);
        self.push("batch_matmul", value, vec![a, b], BatchMatMul { batch, m, k, n })
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if !(2..=3).contains(&nd) {
            return Err(Error::invalid(
                "transpose",
                format!("expected 2 or 3 axes, got shape {:?}", self.shape(a)),
            ));
        }
        let value = transpose_last2(self.value(a));
        self.push("transpose", value, vec![a], Transpose)
    }

    fn binary(&mut self, op: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match op {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
            })
            .collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(name, value, vec![a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.shape(bias) != [cols] {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_exact_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        }
        self.push("add_bias", value, vec![a, bias], AddBias { cols })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, vec![a], Scale { factor })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.push("sum", Tensor::scalar(s), vec![a], Sum { shape })
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| op.apply(x));
        self.push(op.name(), value, vec![a], op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    /// `elu(x) + 1`, strictly positive.
    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::EluPlusOne, a)
    }

    /// Softmax over the last axis.
    ///
    /// `mask` entries must be `0` (keep) or `-inf` (exclude). Excluded entries
    /// are left out of the max and the normaliser and come out as exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let x = self.value(a);
        let keep = match mask {
            None => None,
            Some(m) => {
                if m.shape() != x.shape() {
                    return Err(mismatch("softmax", x.shape(), m.shape()));
                }
                let mut keep = Vec::with_capacity(m.numel());
                for &v in m.data() {
                    if v == T::zero() {
                        keep.push(true);
                    } else if v == T::neg_infinity() {
                        keep.push(false);
                    } else {
                        return Err(Error::invalid("softmax", "mask values must be 0 or -inf"));
                    }
                }
                Some(keep)
            }
        };
        let n = x.cols();
        let mut out = vec![T::zero(); x.numel()];
        for (r, (xs, ys)) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let kept: Vec<usize> = (0..n).filter(|&j| keep.as_ref().is_none_or(|k| k[r * n + j])).collect();
            if kept.is_empty() {
                return Err(Error::invalid("softmax", format!("row {r} is fully masked")));
            }
            let max = kept.iter().map(|&j| xs[j]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &j in &kept {
                let e = (xs[j] - max).exp();
                ys[j] = e;
                denom += e;
            }
            for &j in &kept {
                ys[j] /= denom;
            }
        }
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        self.push("softmax", value, vec![a], Softmax { keep })
    }

    /// RMS normalisation over consecutive groups of `group` columns, then a
    /// per-column gain. `group == cols` is ordinary RMSNorm.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, group: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.shape(gain) != [cols] {
            return Err(mismatch("rmsnorm", xv.shape(), self.shape(gain)));
        }
        if group == 0 || cols % group != 0 {
            return Err(Error::invalid(
                "rmsnorm",
                format!("group {group} does not divide {cols} columns"),
            ));
        }
        let g = self.value(gain).data();
        let eps = T::from_f64(eps);
        let nf = T::from_f64(group as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.numel() / group);
        for (gi, (xs, ys)) in xv
            .data()
            .chunks_exact(group)
            .zip(out.chunks_exact_mut(group))
            .enumerate()
        {
            let ms = xs.iter().map(|&v| v * v).sum::<T>() / nf;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            let off = (gi * group) % cols;
            for j in 0..group {
                ys[j] = xs[j] * r * g[off + j];
            }
        }
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), out);
        self.push("rmsnorm", value, vec![x, gain], RmsNorm { group, inv_rms })
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = matrix_dims("embedding", t.shape())?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(
                    "embedding",
                    format!("token id {id} out of range for vocabulary of {vocab}"),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts_unchecked(vec![ids.len(), d], out);
        self.push("embedding", value, vec![table], Embedding { ids: ids.to_vec() })
    }

    /// Mean cross-entropy of `[n, vocab]` logits against `n` target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, v) = matrix_dims("cross_entropy", l.shape())?;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", l.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (i, (xs, ps)) in l.data().chunks_exact(v).zip(probs.chunks_exact_mut(v)).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} out of range for {v} classes"),
                ));
            }
            let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &x) in ps.iter_mut().zip(xs) {
                *p = (x - max).exp();
                denom += *p;
            }
            ps.iter_mut().for_each(|p| *p /= denom);
            total += denom.ln() + max - xs[t];
        }
        let loss = total / T::from_f64(n as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Records an operation with a caller-provided value and adjoint.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        adjoint: CustomAdjoint<T>,
    ) -> Result<Var> {
        self.push(name, value, inputs.to_vec(), Custom(adjoint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_excludes_positions_exactly() {
        let mut tape = Tape::new();
        let ninf = f64::NEG_INFINITY;
        let mask = t(&[1, 3], &[0.0, ninf, 0.0]);
        let x = tape.constant(t(&[1, 3], &[0.3, 1e300, -0.2]));
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let x2 = tape.constant(t(&[1, 3], &[0.3, -7.0, -0.2]));
        let y2 = tape.softmax(x2, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        assert_eq!(tape.value(y).data(), tape.value(y2).data());
    }

    #[test]
    fn softmax_rejects_bad_mask_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let mask = t(&[2], &[0.0, -1.0]);
        assert!(tape.softmax(x, Some(&mask)).is_err());
    }

    #[test]
    fn rmsnorm_unit_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.rmsnorm(x, g, 2, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((tape.value(y).data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let s = tape.silu(x).unwrap();
        let g = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
        assert_eq!(tape.value(g).item(), 0.5);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn non_finite_output_names_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2], 1000.0));
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp" }));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::<f32>::new();
        let table = tape.param(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding(table, &[0, 4]).is_err());
    }
}
