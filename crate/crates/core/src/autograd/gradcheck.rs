//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Absolute scale below which gradient entries are compared as absolute
/// rather than relative differences.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `eps`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            let err = rel_err(analytic[ei], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
