//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

/// Agreement between analytic and numeric gradients for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// `|a - n| / (|a| + |n|)` over the whole tensor (Euclidean norms).
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `loss` for every
/// element of the listed tensors.
pub fn finite_difference_check(
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    indices: &[usize],
    h: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<GroupCheck> {
    let mut p = params.clone();
    indices
        .iter()
        .map(|&i| {
            let n = p.get(i).len();
            let mut diff = 0.0;
            let mut a_sq = 0.0;
            let mut n_sq = 0.0;
            for j in 0..n {
                let orig = p.get(i).as_slice().expect("standard layout")[j];
                p.get_mut(i).as_slice_mut().expect("standard layout")[j] = orig + h;
                let up = loss(&p);
                p.get_mut(i).as_slice_mut().expect("standard layout")[j] = orig - h;
                let down = loss(&p);
                p.get_mut(i).as_slice_mut().expect("standard layout")[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(i).as_slice().expect("standard layout")[j];
                diff += (a - numeric).powi(2);
                a_sq += a * a;
                n_sq += numeric * numeric;
            }
            let denom = a_sq.sqrt() + n_sq.sqrt();
            GroupCheck {
                name: p.name(i).to_string(),
                rel_error: if denom < 1e-12 { 0.0 } else { diff.sqrt() / denom },
                analytic_norm: a_sq.sqrt(),
                checked: n,
            }
        })
        .collect()
}

/// Largest relative error over the groups.
pub fn max_rel_error(checks: &[GroupCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
