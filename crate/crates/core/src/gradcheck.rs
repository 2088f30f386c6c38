//! Finite-difference validation of reverse-mode gradients.
//!
//! The checker recomputes the loss with each parameter element nudged up and
//! down and compares the central difference against the analytic gradient.
//! It never reuses graph internals: every probe is a fresh forward pass, so
//! it is an independent oracle for the backward implementations.

use crate::tensor::{Elem, Tensor};
use crate::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Largest guarded relative error seen: |a - fd| / (1 + max(|a|, |fd|)).
    pub max_err: f64,
    /// Parameter name, flat index, analytic and numeric value at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_err < tol
    }
}

/// Deterministic index subsample: all indices when they fit the cap,
/// otherwise an even stride across the range.
fn pick_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if n > c && c > 0 => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

/// Compare analytic gradients of `loss_fn` w.r.t. `params` against central
/// finite differences with step `eps`.
///
/// `loss_fn` must rebuild the graph from the current parameter values on
/// every call and return a scalar. `max_per_param` caps how many entries of
/// each parameter are probed.
pub fn check_grads<E: Elem>(
    params: &[(String, Tensor<E>)],
    loss_fn: &mut dyn FnMut() -> Result<Tensor<E>>,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| {
            p.grad_vec()
                .unwrap_or_else(|| panic!("no gradient reached parameter {name}"))
                .iter()
                .map(|v| v.to_f64c())
                .collect()
        })
        .collect();

    let mut report = GradReport {
        checked: 0,
        max_err: 0.0,
        worst: None,
    };
    for ((name, p), grads) in params.iter().zip(&analytic) {
        let n = p.numel();
        for idx in pick_indices(n, max_per_param) {
            let x0 = p.with_data(|d| d[idx]);
            let step = E::from_f64c(eps);

            p.update_data(|d| d[idx] = x0 + step);
            let x_hi = p.with_data(|d| d[idx]);
            let l_hi = loss_fn()?.item().to_f64c();

            p.update_data(|d| d[idx] = x0 - step);
            let x_lo = p.with_data(|d| d[idx]);
            let l_lo = loss_fn()?.item().to_f64c();

            p.update_data(|d| d[idx] = x0);

            // Divide by the distance actually realized in E's precision.
            let h = x_hi.to_f64c() - x_lo.to_f64c();
            let fd = (l_hi - l_lo) / h;
            let a = grads[idx];
            let err = (a - fd).abs() / (1.0 + a.abs().max(fd.abs()));
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((name.clone(), idx, a, fd));
            }
        }
    }
    Ok(report)
}
