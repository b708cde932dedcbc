//! Central finite-difference checks of tape gradients.

use super::{Bindings, ParameterStore, Tape, Var};
use crate::error::{Error, Result};

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn evaluate<F>(params: &ParameterStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let loss = build(&mut tape, &b)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::usage("gradient check needs a scalar loss"));
    }
    Ok(v.data()[0])
}

/// Compares backward-pass gradients of the scalar built by `build` with
/// central differences over every entry of every parameter.
pub fn check_gradients<F>(params: &ParameterStore, step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(params, true);
    let loss = build(&mut tape, &b)?;
    let grads = tape.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, tensor) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::usage(format!("no gradient for {name}")))?;
        for i in 0..tensor.numel() {
            let base = tensor.data()[i];
            probe.get_mut(name).expect("cloned store").data_mut()[i] = base + step;
            let up = evaluate(&probe, &build)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = base - step;
            let down = evaluate(&probe, &build)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
