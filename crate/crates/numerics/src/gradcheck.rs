//! Central finite-difference oracle for tape gradients.

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Components whose gradients are both smaller than this are compared in
/// absolute rather than relative terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T: Scalar = f64> {
    pub max_rel_error: T,
    pub max_abs_error: T,
    /// `(input, component)` where the worst relative error occurred.
    pub worst: (usize, usize),
    pub components: usize,
}

/// Worst relative error between the tape gradient of the scalar function `f`
/// at `at` and its central-difference estimate with the given `step`.
pub fn grad_check<T, F>(f: F, at: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(at), step)?;
    Ok(report.max_rel_error)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<T, F>(f: F, at: &[Tensor<T>], step: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let evaluate = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let floor = T::from_f64(ABS_FLOOR);
    let two = T::from_f64(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        max_abs_error: T::zero(),
        worst: (0, 0),
        components: 0,
    };
    let mut probe: Vec<Tensor<T>> = at.to_vec();
    let mut flat_component = 0;
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let base = at[input].data().to_vec();
        for k in 0..base.len() {
            let mut shifted = |delta: T| -> Result<T> {
                let mut data = base.clone();
                data[k] = data[k] + delta;
                probe[input] = Tensor::new(at[input].shape().to_vec(), data)?;
                let v = evaluate(&probe).map_err(|e| match e {
                    NumericsError::NonFiniteResult { .. } | NumericsError::NonFinite { .. } => {
                        NumericsError::NonFiniteProbe { component: flat_component }
                    }
                    other => other,
                })?;
                if !v.is_finite() {
                    return Err(NumericsError::NonFiniteProbe { component: flat_component });
                }
                Ok(v)
            };
            let plus = shifted(step)?;
            let minus = shifted(-step)?;
            let numeric = (plus - minus) / (two * step);
            let a = analytic.data()[k];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(floor);
            if rel_err > report.max_rel_error {
                report.max_rel_error = rel_err;
                report.worst = (input, k);
            }
            report.max_abs_error = report.max_abs_error.max(abs_err);
            report.components += 1;
            flat_component += 1;
        }
        probe[input] = at[input].clone();
    }
    Ok(report)
}
