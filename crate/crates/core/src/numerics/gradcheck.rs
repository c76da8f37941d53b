//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::numerics::params::{Gradients, ParamId, ParameterStore};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_relative_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_relative_error > self.tolerance)
            .collect()
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` for every entry of
/// every parameter selected by `select`. Parameter values are restored after
/// each probe.
pub fn finite_diff_check<F, S>(
    store: &mut ParameterStore,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
    select: S,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParameterStore) -> f64,
    S: Fn(&str) -> bool,
{
    let ids: Vec<ParamId> = store.ids().filter(|&id| select(store.name(id))).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for k in 0..n {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + step;
            let plus = loss(store);
            store.value_mut(id).data_mut()[k] = original - step;
            let minus = loss(store);
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[k];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries: n,
            max_relative_error: max_rel,
            max_absolute_error: max_abs,
        });
    }
    GradCheckReport {
        step,
        tolerance,
        params,
    }
}
