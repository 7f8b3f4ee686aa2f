//! Central finite-difference checking of tape gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Denominators of the relative error never drop below this value, so
/// entries whose true gradient is ~0 are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Entries whose ±h perturbations straddle a kink (relu sign change or
    /// max_reduce argmax switch). The gradient there is a subgradient and
    /// is not compared.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub worst_entry: Option<usize>,
    /// First entry where the analytic or numeric gradient was not finite.
    pub non_finite_at: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.non_finite_at.is_none() && p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences with step
/// `step` for every entry of every parameter.
///
/// `f` builds a scalar on the given tape from the parameter handles and must
/// be deterministic.
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape.scalar(root)?, tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let grads = tape.backward(root)?;

    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(params[pi].rows(), params[pi].cols()));
        let mut rep = ParamCheck {
            param: pi,
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            worst_entry: None,
            non_finite_at: None,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let (fp, sp) = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let (fm, sm) = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                rep.non_finite_at.get_or_insert(e);
                continue;
            }
            if sp != sm {
                rep.excluded += 1;
                continue;
            }
            rep.checked += 1;
            let err = relative_error(a, numeric);
            if err > rep.max_rel_error {
                rep.max_rel_error = err;
                rep.worst_entry = Some(e);
            }
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        step,
        tol,
        params: reports,
    })
}
