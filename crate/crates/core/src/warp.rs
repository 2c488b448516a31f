//! Metric tensors of the fully connected single-neuron flow, the
//! Hessian-map test, the warp ĝ, and warp-integral monitors.
//!
//! With S = √(δ²/4 + ‖w‖²) and b = δ/2 + S the flow metric is
//! H(w) = b⁻¹(I − wwᵀ/(2bS)). It is not a Hessian field; ĝ(‖w‖)·H(w) is.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{param, Error, Result};
use crate::flow::Trajectory;
use crate::regularizers::radial_r;

pub fn metric_tensor_fc(w: &DVector<f64>, delta: f64) -> Result<DMatrix<f64>> {
    if !(delta >= 0.0) {
        return param(format!("delta must be nonnegative, got {delta}"));
    }
    let x2 = w.norm_squared();
    if x2 == 0.0 && delta == 0.0 {
        return Err(Error::Numeric(
            "metric tensor is singular at w = 0 for delta = 0".into(),
        ));
    }
    let s = (0.25 * delta * delta + x2).sqrt();
    let b = 0.5 * delta + s;
    let d = w.len();
    Ok((DMatrix::identity(d, d) - w * w.transpose() / (2.0 * b * s)) / b)
}

/// ĝ(x) = (√R/x)(δ/2 + S), evaluated as (δ/2 + S)/√(R + δ).
pub fn g_hat(x: f64, delta: f64) -> Result<f64> {
    if !(x > 0.0) {
        return param(format!("g_hat needs x > 0, got {x}"));
    }
    if !(delta >= 0.0) {
        return param(format!("delta must be nonnegative, got {delta}"));
    }
    Ok(g_hat_closure(x, delta))
}

/// ĝ extended to x = 0 by its right limit √δ.
fn g_hat_closure(x: f64, delta: f64) -> f64 {
    if x == 0.0 {
        return delta.sqrt();
    }
    let r = radial_r(x, delta);
    (0.5 * delta + x.hypot(0.5 * delta)) / (r + delta).sqrt()
}

pub fn warped_tensor_fc(w: &DVector<f64>, delta: f64) -> Result<DMatrix<f64>> {
    Ok(metric_tensor_fc(w, delta)? * g_hat(w.norm(), delta)?)
}

/// Default central-difference step 1e−5·(1 + ‖w‖).
pub fn default_fd_step(w: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + w.norm())
}

/// max over (i, j, k) of |∂H_ij/∂w_k − ∂H_ik/∂w_j| by central differences.
pub fn hessian_map_defect<F>(field: F, w: &DVector<f64>, fd_step: f64) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    if !(fd_step > 0.0) {
        return param("fd_step must be positive");
    }
    let d = w.len();
    let mut partials = Vec::with_capacity(d);
    for k in 0..d {
        let mut up = w.clone();
        let mut dn = w.clone();
        up[k] += fd_step;
        dn[k] -= fd_step;
        let dh = (field(&up)? - field(&dn)?) / (2.0 * fd_step);
        if dh.nrows() != d || dh.ncols() != d {
            return param("tensor field must return d×d matrices");
        }
        partials.push(dh);
    }
    let mut defect: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                defect = defect.max((partials[k][(i, j)] - partials[j][(i, k)]).abs());
            }
        }
    }
    if !defect.is_finite() {
        return Err(Error::Numeric("non-finite tensor derivative".into()));
    }
    Ok(defect)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Finiteness {
    Finite,
    NotDecaying,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpIntegral {
    /// Trapezoid estimate of τ(T) = ∫₀ᵀ ĝ(‖w̃(t)‖) dt.
    pub integral_estimate: f64,
    pub diverging: bool,
    /// ∫₀ᵀ ĝ(‖w̃‖)·‖r‖ dt.
    pub nu_integral: f64,
    /// Largest ratio of successive tail-window increments of the ν integral.
    pub nu_tail_ratio: Option<f64>,
    pub nu_finiteness: Finiteness,
}

const TAIL_WINDOWS: usize = 4;
const DECAY_RATIO: f64 = 0.9;

/// τ and ν integrals over recorded snapshots. Tail windows are equal-length
/// slices of [t*, T], t* being the first time ‖r‖ falls to 1% of ‖r(0)‖.
pub fn warp_integral(traj: &Trajectory, delta: f64) -> Result<WarpIntegral> {
    if traj.times.len() < 2 {
        return param("warp integral needs at least two snapshots");
    }
    if !(delta >= 0.0) {
        return param(format!("delta must be nonnegative, got {delta}"));
    }
    let t = &traj.times;
    let g: Vec<f64> = traj
        .predictor_snapshots
        .iter()
        .map(|w| g_hat_closure(w.norm(), delta))
        .collect();
    let gr: Vec<f64> = g
        .iter()
        .zip(&traj.residual_norms)
        .map(|(a, b)| a * b)
        .collect();
    let t_end = *t.last().unwrap();
    let tau = window_integral(t, &g, 0.0, t_end);
    let nu = window_integral(t, &gr, 0.0, t_end);

    let r0 = traj.residual_norms[0];
    let start = traj
        .residual_norms
        .iter()
        .position(|r| *r <= 1e-2 * r0)
        .map(|k| t[k]);
    let (tau_ratio, nu_ratio) = match start {
        Some(t0) if t_end > t0 => {
            let len = (t_end - t0) / TAIL_WINDOWS as f64;
            let inc = |v: &[f64]| -> Vec<f64> {
                (0..TAIL_WINDOWS)
                    .map(|j| window_integral(t, v, t0 + j as f64 * len, t0 + (j + 1) as f64 * len))
                    .collect()
            };
            let worst = |incs: Vec<f64>| -> f64 {
                incs.windows(2)
                    .map(|p| {
                        if p[0] > 0.0 {
                            p[1] / p[0]
                        } else {
                            f64::INFINITY
                        }
                    })
                    .fold(0.0, f64::max)
            };
            (Some(worst(inc(&g))), Some(worst(inc(&gr))))
        }
        _ => (None, None),
    };
    let diverging = match tau_ratio {
        Some(r) => r >= DECAY_RATIO,
        None => g.last().copied().unwrap_or(0.0) > 0.0,
    };
    let nu_finiteness = match (traj.converged, nu_ratio) {
        (true, Some(r)) if r < DECAY_RATIO => Finiteness::Finite,
        (true, Some(_)) => Finiteness::NotDecaying,
        _ => Finiteness::Inconclusive,
    };
    Ok(WarpIntegral {
        integral_estimate: tau,
        diverging,
        nu_integral: nu,
        nu_tail_ratio: nu_ratio,
        nu_finiteness,
    })
}

/// Trapezoid integral of piecewise-linear data over [a, b].
fn window_integral(t: &[f64], v: &[f64], a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for k in 1..t.len() {
        let (t0, t1) = (t[k - 1], t[k]);
        let lo = t0.max(a);
        let hi = t1.min(b);
        if hi <= lo {
            continue;
        }
        let at = |s: f64| v[k - 1] + (v[k] - v[k - 1]) * (s - t0) / (t1 - t0);
        total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn tensor_at_unit_axis() {
        let h = metric_tensor_fc(&v(&[1.0, 0.0]), 0.0).unwrap();
        assert!((h - DMatrix::from_diagonal(&v(&[0.5, 1.0]))).amax() < 1e-15);
        assert!(metric_tensor_fc(&v(&[0.0, 0.0]), 0.0).is_err());
        assert!(metric_tensor_fc(&v(&[0.0, 0.0]), 1.0).is_ok());
    }

    #[test]
    fn tensor_isotropic_for_large_delta() {
        let delta = 1e8;
        let h = metric_tensor_fc(&v(&[0.3, -0.4]), delta).unwrap() * delta;
        assert!((h - DMatrix::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn constant_field_has_no_defect() {
        let d = hessian_map_defect(
            |_| Ok(DMatrix::identity(3, 3) * 2.0),
            &v(&[1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(d <= 1e-10);
    }

    #[test]
    fn g_hat_examples() {
        assert!((g_hat(4.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((g_hat(1e-8, 1.0).unwrap() - 1.0).abs() < 1e-4);
        assert!(g_hat(0.0, 1.0).is_err());
        assert!(g_hat(-1.0, 1.0).is_err());
    }

    #[test]
    fn g_hat_matches_unsimplified_formula() {
        for delta in [0.0f64, 0.1, 10.0] {
            for x in [1e-2f64, 0.5, 3.0, 40.0] {
                let s: f64 = (x * x + delta * delta / 4.0).sqrt();
                let naive = (s - delta / 2.0).sqrt() / x * (delta / 2.0 + s);
                assert!((g_hat(x, delta).unwrap() - naive).abs() <= 1e-9 * naive);
            }
        }
    }
}
