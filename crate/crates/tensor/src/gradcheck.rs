//! Central finite-difference gradient checks in 64-bit.

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Below this magnitude both the
/// analytic and numeric values are compared in absolute terms, since central
/// differences carry roundoff of order `eps·|f| / h` regardless of the size of
/// the true derivative.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every element of every input with `requires_grad`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, FD_STEP, f)
}

pub fn check_gradients_with<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        match tape.value(out) {
            [v] => Ok(*v),
            _ => Err(TensorError::NonScalarLoss(tape.shape(out).to_vec())),
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = grads.wrt(vars[i]);
        #[allow(clippy::needless_range_loop)] // e indexes the input, its copy and the gradient
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, e, analytic[e], numeric));
            }
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every parameter of `store` and every
/// trainable tensor in `inputs`; `f` sees the parameters through a [`Bound`]
/// and the inputs as vars.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut all = store.tensors().to_vec();
    all.extend_from_slice(inputs);
    check_gradients(&all, |tape, vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        f(tape, &bound, &vars[n..])
    })
}
