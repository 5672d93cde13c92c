//! Central finite-difference verification of analytic gradients.

use super::graph::{Gradients, Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Denominator floor. Central differences at the default step carry roundoff
/// near 1e-10 for losses of order ten, so gradients below this are compared
/// absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    g.check_finite()?;
    Ok(g.value(loss).item())
}

/// Analytic gradients of the loss built by `f`.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Gradients>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    g.backward(loss)
}

/// Compares analytic against central-difference gradients for up to
/// `max_per_param` evenly spaced entries of each listed parameter.
/// Parameter values are restored afterwards.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = analytic_gradients(store, &f)?;
    let mut report = GradCheckReport::default();
    for &id in params {
        let n = store.value(id).len();
        let stride = (n / max_per_param.max(1)).max(1);
        for index in (0..n).step_by(stride).take(max_per_param) {
            let orig = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = orig + step;
            let plus = eval_loss(store, &f);
            store.value_mut(id).data_mut()[index] = orig - step;
            let minus = eval_loss(store, &f);
            store.value_mut(id).data_mut()[index] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
            report.entries.push(GradCheckEntry {
                param: store.get(id).name.clone(),
                index,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
    }
    Ok(report)
}
