use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-12;

/// Compares tape gradients of `f` against central finite differences.
///
/// Returns the maximum over all parameter coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::invalid("finite_difference_check", "parameters must be finite"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference_check",
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("leaf gradient"))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..probe[pi].numel() {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + EPS);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
