//! Central finite-difference probes for gradient verification.
//!
//! The difference quotient of an f32-valued forward pass carries an
//! irreducible noise of roughly ulp(loss)/(2·eps): with eps = 1e-3 and a
//! loss of order 1 that is about 1e-4 in absolute terms. Comparisons
//! therefore accept an element when either the relative error is within
//! `rel_tol` or the absolute error stays under a floor scaled to the
//! checked tensor's gradient magnitude.

use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_REL_TOL: f32 = 1e-3;

/// Central finite differences of a scalar-valued function, element by
/// element. `f` is evaluated without graph recording; it should return the
/// loss at full available precision (f64) to keep the quotient clean.
pub fn finite_diff_grad(x: &Tensor, eps: f32, f: impl Fn() -> f64) -> Vec<f32> {
    let n = x.numel();
    let mut grad = vec![0.0f32; n];
    for i in 0..n {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = no_grad(&f);
        x.data_mut()[i] = orig - eps;
        let down = no_grad(&f);
        x.data_mut()[i] = orig;
        grad[i] = ((up - down) / (2.0 * eps as f64)) as f32;
    }
    grad
}

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub elements: usize,
    pub max_rel: f32,
    pub max_abs: f32,
    pub worst_index: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} [{}]: {} elems, max_rel {:.2e}, max_abs {:.2e} (worst @ {})",
            if self.pass { "ok" } else { "FAIL" },
            self.name,
            self.elements,
            self.max_rel,
            self.max_abs,
            self.worst_index
        )
    }
}

/// Compare gradients: an element passes when its relative error is within
/// `rel_tol` or its absolute error is within `abs_floor`.
pub fn compare(
    name: &str,
    analytic: &[f32],
    numeric: &[f32],
    rel_tol: f32,
    abs_floor: f32,
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel = 0.0f32;
    let mut max_abs = 0.0f32;
    let mut worst = 0usize;
    let mut pass = true;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-12);
        if abs > abs_floor && rel > rel_tol {
            pass = false;
        }
        if rel > max_rel && abs > abs_floor {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }
    GradCheckReport {
        name: name.into(),
        elements: analytic.len(),
        max_rel,
        max_abs,
        worst_index: worst,
        pass,
    }
}

/// Finite-difference noise floor for a loss of the given magnitude: one
/// unit-in-the-last-place of the f32 loss spread over the central
/// difference, with slack for accumulation across the graph.
pub fn noise_floor(loss_magnitude: f32, eps: f32) -> f32 {
    let ulp = loss_magnitude.abs().max(1.0) * f32::EPSILON;
    4.0 * ulp / (2.0 * eps)
}

/// Check one parameter tensor of a scalar loss: runs backward once for the
/// analytic gradient, probes with central differences, and compares with
/// the single-rounding noise floor (right for shallow compositions).
pub fn check_tensor(
    name: &str,
    x: &Tensor,
    build_loss: impl Fn() -> Tensor,
    eps: f32,
    rel_tol: f32,
) -> GradCheckReport {
    check_tensor_with_floor(name, x, &build_loss, eps, rel_tol, None)
}

/// As `check_tensor`, but with an explicit absolute floor. Deep graphs
/// accumulate rounding across every intermediate f32 tensor, so their
/// floor should be the single-rounding estimate scaled by roughly the
/// square root of the op count on the probed path.
pub fn check_tensor_with_floor(
    name: &str,
    x: &Tensor,
    build_loss: impl Fn() -> Tensor,
    eps: f32,
    rel_tol: f32,
    abs_floor: Option<f32>,
) -> GradCheckReport {
    x.clear_grad();
    let loss = build_loss();
    let magnitude = loss.item();
    loss.backward().expect("scalar loss");
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = finite_diff_grad(x, eps, || build_loss().item() as f64);
    let floor = abs_floor.unwrap_or_else(|| noise_floor(magnitude, eps));
    compare(name, &analytic, &numeric, rel_tol, floor)
}
