//! Finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// A scalar-valued function of one tensor, evaluable at any [`Element`] type.
pub trait ScalarFn {
    /// Parameter store the tape should resolve names against.
    fn params(&self) -> Option<&ParamStore> {
        None
    }

    fn eval<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(|numeric_i|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F: ScalarFn, T: Element>(
    f: &F,
    x: Tensor<T>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<T>>)> {
    let mut tape = Tape::<T>::with_params(f.params());
    let mut x = x;
    x.set_requires_grad(with_grad);
    let xv = tape.leaf(x);
    let out = f.eval(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(shape_err!(
            "gradient_check: function returned shape {:?}",
            tape.shape(out)
        ));
    }
    let value = tape.value(out).data()[0].as_f64();
    if !with_grad {
        return Ok((value, None));
    }
    tape.backward(out)?;
    Ok((value, tape.grad(xv).map(<[T]>::to_vec)))
}

/// Compares the `f32` tape gradient of `f` at `x` against central differences
/// evaluated in `f64` with step `h`.
pub fn gradient_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, h: f64) -> Result<GradCheckReport> {
    if !(1e-4..=1e-2).contains(&h) {
        return Err(invalid!("finite-difference step {h} outside [1e-4, 1e-2]"));
    }
    if let Some(index) = x.has_non_finite() {
        return Err(Error::NonFinite { index });
    }
    let (_, grad) = eval_scalar(f, x.clone(), true)?;
    let analytic: Vec<f64> = grad
        .unwrap_or_else(|| vec![0.0; x.numel()])
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let base: Tensor<f64> = x.cast();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let (fp, _) = eval_scalar(f, plus, false)?;
        let (fm, _) = eval_scalar(f, minus, false)?;
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        numeric.push(d);
    }
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / n.abs().max(1e-8);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
