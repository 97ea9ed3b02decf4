//! Finite-difference verification of analytic gradients.

use super::optim::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst observed relative error for one parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild the computation from the store and return the
/// scalar loss; it is called 2N+1 times for N checked entries. Relative
/// error uses max(1, |analytic|, |numeric|) in the denominator so tiny
/// gradients are compared absolutely.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut loss_fn: F,
    epsilon: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
{
    let (_, analytic) = loss_fn(store)?;
    let mut reports = Vec::new();
    for &pid in params {
        let numel = store.get(pid).tensor.numel();
        let agrad = analytic
            .iter()
            .find(|(id, _)| *id == pid)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut report = GradCheckReport {
            name: store.get(pid).name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..numel {
            let orig = store.get(pid).tensor.data()[j];
            store.get_mut(pid).tensor.data_mut()[j] = orig + epsilon;
            let (up, _) = loss_fn(store)?;
            store.get_mut(pid).tensor.data_mut()[j] = orig - epsilon;
            let (down, _) = loss_fn(store)?;
            store.get_mut(pid).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = agrad[j];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
