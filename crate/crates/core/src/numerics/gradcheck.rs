use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks every entry of every parameter in `store` against a central
/// finite difference of the scalar built by `f`.
///
/// `f` must be deterministic; it is evaluated once for the analytic pass and
/// twice per parameter entry.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let v = f(&t, s)?;
        Ok(t.scalar(v))
    };

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let analytic = grads.param(id).map(|t| t.into_data());
        let n = store.get(id).numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        params.push(ParamGradError {
            name: store.name(id).to_string(),
            entries: n,
            max_rel_error: worst,
        });
    }
    let pass = params.iter().all(|p| p.max_rel_error <= tol);
    Ok(GradReport {
        params,
        eps,
        tol,
        pass,
    })
}
