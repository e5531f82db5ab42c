use serde::{Deserialize, Serialize};

use super::HeadLayout;
use crate::autodiff::{Adjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rotary position embedding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub theta: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub const DEFAULT_THETA: f64 = 10_000.0;

    pub fn new(head_dim: usize) -> Self {
        RopeConfig {
            theta: Self::DEFAULT_THETA,
            head_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::invalid(
                "rope",
                format!("head_dim must be even and positive, got {}", self.head_dim),
            ));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::invalid(
                "rope",
                format!("theta must be positive, got {}", self.theta),
            ));
        }
        Ok(())
    }

    /// `(cos, sin)` tables of shape `[positions, head_dim / 2]`.
    fn tables<T: Scalar>(&self, positions: &[usize]) -> (Vec<T>, Vec<T>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = self.theta.powf(-2.0 * i as f64 / self.head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        (cos, sin)
    }
}

struct Rope<T> {
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

fn rotate<T: Scalar>(x: &[T], head_dim: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let cols = x.len() / (cos.len() / (head_dim / 2));
    let half = head_dim / 2;
    let mut out = vec![T::zero(); x.len()];
    for (r, (xs, ys)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for (xh, yh) in xs.chunks_exact(head_dim).zip(ys.chunks_exact_mut(head_dim)) {
            for i in 0..half {
                let (x0, x1) = (xh[2 * i], xh[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                yh[2 * i] = x0 * c[i] - x1 * sn;
                yh[2 * i + 1] = x0 * sn + x1 * c[i];
            }
        }
    }
    out
}

impl<T: Scalar> Adjoint<T> for Rope<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = rotate(grad.data(), self.head_dim, &self.cos, &self.sin, true);
        vec![Some(Tensor::from_parts_unchecked(output.shape().to_vec(), d))]
    }
}

/// Rotates coordinate pairs `(2i, 2i+1)` of every head by `position * theta^(-2i/d)`.
///
/// `x` is `[rows, heads * head_dim]` and `positions` has one entry per row.
pub fn rope_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, positions: &[usize], cfg: &RopeConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let [rows, cols] = shape[..] else {
        return Err(Error::invalid("rope", format!("expected a matrix, got {shape:?}")));
    };
    if cols % cfg.head_dim != 0 {
        return Err(Error::invalid(
            "rope",
            format!("{cols} columns are not a multiple of head_dim {}", cfg.head_dim),
        ));
    }
    if positions.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "rope",
            lhs: shape,
            rhs: vec![positions.len()],
        });
    }
    let (cos, sin) = cfg.tables::<T>(positions);
    let out = rotate(tape.value(x).data(), cfg.head_dim, &cos, &sin, false);
    let value = Tensor::from_parts_unchecked(shape, out);
    tape.push(
        "rope",
        value,
        vec![x],
        Rope {
            head_dim: cfg.head_dim,
            cos,
            sin,
        },
    )
}

/// Single-head rotary embedding of `x: [S, d]` with `d == cfg.head_dim`.
pub fn apply_rope<T: Scalar>(tape: &mut Tape<T>, x: Var, positions: &[usize], cfg: &RopeConfig) -> Result<Var> {
    cfg.validate()?;
    let d = tape.value(x).cols();
    if d != cfg.head_dim {
        return Err(Error::invalid(
            "rope",
            format!("input width {d} differs from head_dim {}", cfg.head_dim),
        ));
    }
    rope_heads(tape, x, positions, cfg)
}

/// Positions `0..seq` repeated for every sequence of the layout.
pub fn layout_positions(layout: &HeadLayout, offset: usize) -> Vec<usize> {
    (0..layout.batch)
        .flat_map(|_| (0..layout.seq).map(move |t| t + offset))
        .collect()
}
