//! Central-difference verification of reverse-mode gradients.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Denominator floor of [`relative_error`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, DEFAULT_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, f: &F, name: &str) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let v = f(&mut tape)?;
    let y = tape.scalar(v);
    if !y.is_finite() {
        return Err(Error::Numeric(format!("objective while perturbing `{name}`")));
    }
    Ok(y)
}

/// Compares the tape's gradient of `f` against central differences for every
/// coordinate of `params`.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    grad_check_strided(store, params, step, 1, f)
}

/// Like [`grad_check`], visiting every `stride`-th coordinate of each
/// parameter (always including the first).
pub fn grad_check_strided<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    stride: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    grad_check_floored(store, params, step, stride, DEFAULT_FLOOR, f)
}

/// Like [`grad_check_strided`] with an explicit denominator floor, so that
/// gradients far below the objective's rounding noise are compared
/// absolutely.
pub fn grad_check_floored<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    stride: usize,
    floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let stride = stride.max(1);
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric("objective at evaluation point".into()));
        }
        let grads = tape.backward(loss)?;
        params
            .iter()
            .map(|&id| {
                let n = store.get(id).array.len();
                grads.get(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
            })
            .collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for (&id, an) in params.iter().zip(&analytic) {
        let name = store.get(id).name.clone();
        if let Some(i) = an.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("analytic gradient of `{name}`[{i}]")));
        }
        for i in (0..an.len()).step_by(stride) {
            let orig = store.get(id).array.data()[i];
            store.get_mut(id).array.data_mut()[i] = orig + step;
            let fp = eval(store, &f, &name);
            store.get_mut(id).array.data_mut()[i] = orig - step;
            let fm = eval(store, &f, &name);
            store.get_mut(id).array.data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * step);
            let err = relative_error_floored(an[i], numeric, floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = Some(name.clone());
                    report.worst_index = i;
                    report.worst_analytic = an[i];
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
