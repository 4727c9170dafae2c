//! Central finite-difference checking of reverse-mode gradients.

use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    /// Converts a failing report into an error.
    pub fn into_result(self) -> Result<Self> {
        if let Some(worst) = self
            .params
            .iter()
            .filter(|p| p.max_rel_error > self.tol)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        {
            return Err(Error::GradCheck {
                param: worst.name.clone(),
                max_rel_error: worst.max_rel_error,
                tol: self.tol,
            });
        }
        Ok(self)
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(loss_fn: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, params)?;
    if tape.shape(root) != (1, 1) {
        return Err(Error::shape("grad_check", "loss must be a 1x1 node"));
    }
    Ok(tape.value(root).item())
}

/// Compares reverse-mode gradients of `loss_fn` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every parameter entry.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::Config(format!("eps {} outside (0, 1e-2]", opts.eps)));
    }
    let first = evaluate(&loss_fn, params)?;
    let second = evaluate(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, params)?;
    let analytic = tape.backward(root)?.by_param(&tape);

    let mut probe = params.clone();
    let mut report = Vec::new();
    for (name, value) in params.iter() {
        let len = value.len();
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: name.to_string(),
            entries_checked: indices.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for idx in indices {
            let original = value.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = original + opts.eps;
            let plus = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = original - opts.eps;
            let minus = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[idx]);
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        params: report,
    })
}
