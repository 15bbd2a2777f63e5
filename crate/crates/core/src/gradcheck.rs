//! Central finite-difference gradient checking.
//!
//! The analytic gradients from one tape sweep are compared against
//! `(f(p+h) - f(p-h)) / 2h` for every element of every parameter, rebuilding
//! the forward pass at each probe.

use crate::error::{CoreError, Result};
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum allowed `|a - n| / max(|a|, |n|, 1.0)`.
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked_elements: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks every parameter of `store` against central differences of the
/// scalar loss built by `build`. The builder must be a pure function of the
/// store contents.
pub fn gradcheck<F>(store: &mut ParamStore, cfg: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let binds = store.bind(&mut tape);
    let loss = build(&mut tape, &binds)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            tape.grad(binds.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let loss = build(&mut tape, &binds)?;
        Ok(tape.scalar_value(loss))
    };

    let mut report = GradCheckReport { checked_elements: 0, max_rel_err: 0.0, worst: String::new() };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for j in 0..store.get(*id).numel() {
            let orig = store.get(*id).data()[j];
            store.get_mut(*id).data_mut()[j] = orig + cfg.step;
            let f_plus = eval(store)?;
            store.get_mut(*id).data_mut()[j] = orig - cfg.step;
            let f_minus = eval(store)?;
            store.get_mut(*id).data_mut()[j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let err = rel_err(analytic[pi][j], numeric);
            report.checked_elements += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{}] analytic={} numeric={}", store.name(*id), j, analytic[pi][j], numeric);
            }
        }
    }

    if report.max_rel_err >= cfg.rel_tol {
        return Err(CoreError::GradCheckFailed { max_rel_err: report.max_rel_err, worst: report.worst });
    }
    Ok(report)
}
