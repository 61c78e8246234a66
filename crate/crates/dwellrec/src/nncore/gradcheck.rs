//! Finite-difference validation of reverse-mode gradients.
//!
//! Central differences at 64-bit: for each parameter element, nudge ±ε,
//! re-evaluate the loss, and compare (f⁺ − f⁻)/2ε against the analytic
//! gradient under the symmetric relative error
//!
//!   rel = |g − ĝ| / max(1e-8, |g| + |ĝ|)
//!
//! which treats "both tiny" as agreement instead of dividing noise by noise.

use crate::error::Result;
use crate::nncore::tape::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error across every element of every parameter.
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the worst error lives.
    pub worst: Option<(String, usize)>,
    /// Total elements compared.
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare reverse-mode gradients against central differences.
///
/// `compute_grads` runs one forward+backward, leaving gradients in `params`
/// (they are zeroed first); `f` is the pure loss used for the ±ε probes.
/// Both closures see the same `ParamSet` values; `f` must not depend on any
/// other mutable state (a dropout layer, for instance, must be driven by a
/// fixed seed so every probe sees the same mask).
pub fn grad_check(
    params: &mut ParamSet,
    eps: f64,
    compute_grads: impl FnOnce(&mut ParamSet) -> Result<f64>,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<GradCheckReport> {
    params.zero_grads();
    compute_grads(params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad.as_slice().to_vec())
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut n_checked = 0usize;
    for pi in 0..params.len() {
        for ei in 0..analytic[pi].len() {
            let orig = params.get(pi).value.as_slice()[ei];
            params.get_mut(pi).value.as_mut_slice()[ei] = orig + eps;
            let f_plus = f(params)?;
            params.get_mut(pi).value.as_mut_slice()[ei] = orig - eps;
            let f_minus = f(params)?;
            params.get_mut(pi).value.as_mut_slice()[ei] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let g = analytic[pi][ei];
            let rel = (g - numeric).abs() / (1e-8f64).max(g.abs() + numeric.abs());
            n_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params.get(pi).name.clone(), ei));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_checked,
    })
}
