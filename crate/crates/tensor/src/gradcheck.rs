//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, ParamGrads, Tape};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates with relative error ≤ the tolerance passed to `finish`.
    pub within_tol: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.checked as f64
        }
    }

    fn record(&mut self, name: &str, idx: usize, a: f64, n: f64, tol: f64) {
        let e = relative_error(a, n);
        self.checked += 1;
        if e <= tol {
            self.within_tol += 1;
        }
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((name.to_string(), idx, a, n));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.within_tol += other.within_tol;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err.max(self.max_rel_err);
            self.worst = other.worst;
        }
    }
}

/// Compares analytic parameter gradients against central differences of
/// `loss` with step `h`, for every coordinate of every parameter in `ids`.
///
/// `loss` must be a deterministic function of the store.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &ParamGrads,
    h: f64,
    tol: f64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for &id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).len();
        for idx in 0..n {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let plus = loss(store)?;
            store.get_mut(id).data_mut()[idx] = orig - h;
            let minus = loss(store)?;
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[idx]);
            report.record(&name, idx, a, numeric, tol);
        }
    }
    Ok(report)
}

/// Gradient check of a single graph built by `build` over the given inputs.
///
/// Each input becomes a parameter named `input{i}`; `build` receives the
/// corresponding tape nodes and returns a scalar node.
pub fn check_fn(
    inputs: Vec<Tensor>,
    h: f64,
    tol: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t))
        .collect();
    let eval = |s: &ParamStore| -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::with_params(s);
        let nodes = ids
            .iter()
            .map(|&id| tape.param(id))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &nodes)?;
        let v = tape.value(out).item()?;
        Ok((v, tape.backward(out)?.into_param_grads()))
    };
    let (_, analytic) = eval(&store)?;
    check_params(&mut store, &ids, &analytic, h, tol, |s| {
        let mut tape = Tape::with_params(s);
        let nodes = ids
            .iter()
            .map(|&id| tape.param(id))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &nodes)?;
        tape.value(out).item()
    })
}
