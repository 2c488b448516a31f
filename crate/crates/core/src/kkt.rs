//! Constrained minimizers `argmin Q(w) s.t. Xᵀw = y`, KKT residuals, and the
//! ℓ2 / ℓ1 oracles.
//!
//! The solvers run Newton's method on the dual: with ∇Q invertible,
//! stationarity ∇Q(w) = Xν gives w(ν) = ∇Q*(Xν) and feasibility becomes
//! F(ν) = Xᵀw(ν) − y = 0, the gradient of the convex dual objective
//! D(ν) = Q*(Xν) − yᵀν. Steps are backtracked until D decreases
//! sufficiently or ‖F‖ does.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::models::{subgradient, LeakyParams};
use crate::regularizers::{
    q_eval, qhat_derivative_inverse, qhat_radial, radial_z, RegularizerSpec, QHAT_SLOPE, SINH_GUARD,
};
use crate::serde_util;

/// Tolerance used for the `converged` flag of [`kkt_residuals`].
pub const KKT_TOL: f64 = 1e-8;

const MAX_NEWTON: usize = 500;
const DIAGONAL_DUAL_STEP: f64 = 4.0;
const MAX_BACKTRACK: usize = 80;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    #[serde(with = "serde_util::vector")]
    pub w: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub nu: DVector<f64>,
    pub stationarity_residual: f64,
    pub feasibility_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kink_samples: Vec<usize>,
}

/// Rejects duplicate samples and rank-deficient X (pivoted QR, threshold
/// 1e−10·‖X‖_F).
pub fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let (d, n) = x.shape();
    for i in 0..n {
        for j in i + 1..n {
            if x.column(i) == x.column(j) {
                return Err(Error::DuplicateSamples(i, j));
            }
        }
    }
    if n > d {
        return Err(Error::Singular(format!("N = {n} samples exceed d = {d}")));
    }
    let r = x.clone().col_piv_qr().r();
    let thresh = 1e-10 * x.norm();
    let rank = (0..n).filter(|&i| r[(i, i)].abs() > thresh).count();
    if rank < n {
        return Err(Error::Singular(format!("X has rank {rank} < N = {n}")));
    }
    Ok(())
}

/// min ‖g − Xν‖ over ν; returns (ν, residual norm).
pub fn project_onto_samples(x: &DMatrix<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let nu = r
        .solve_upper_triangular(&q.tr_mul(g))
        .ok_or_else(|| Error::Singular("X has dependent columns".into()))?;
    let res = (g - x * &nu).norm();
    Ok((nu, res))
}

/// Minimum-norm interpolant X(XᵀX)⁻¹y via the thin QR of X.
pub fn min_l2(ds: &Dataset) -> Result<DVector<f64>> {
    check_rank(&ds.x)?;
    if ds.y.iter().all(|v| *v == 0.0) {
        return Ok(DVector::zeros(ds.dim()));
    }
    let qr = ds.x.clone().qr();
    let t = qr
        .r()
        .transpose()
        .solve_lower_triangular(&ds.y)
        .ok_or_else(|| Error::Singular("X has dependent columns".into()))?;
    Ok(qr.q() * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1Solution {
    pub w: DVector<f64>,
    /// Certified ‖w‖₁ − yᵀλ for a dual-feasible λ.
    pub duality_gap: f64,
    pub iterations: usize,
}

pub fn l1_oracle(ds: &Dataset) -> Result<DVector<f64>> {
    l1_oracle_certified(ds).map(|s| s.w)
}

/// Basis pursuit by ADMM on the splitting w = z, with support polishing and
/// a duality-gap certificate of at most 1e−9.
pub fn l1_oracle_certified(ds: &Dataset) -> Result<L1Solution> {
    check_rank(&ds.x)?;
    let (d, _) = ds.x.shape();
    if ds.y.iter().all(|v| *v == 0.0) {
        return Ok(L1Solution {
            w: DVector::zeros(d),
            duality_gap: 0.0,
            iterations: 0,
        });
    }
    let x = &ds.x;
    let gram = x
        .tr_mul(x)
        .cholesky()
        .ok_or_else(|| Error::Singular("XᵀX is not positive definite".into()))?;
    let project = |v: &DVector<f64>| -> DVector<f64> {
        let corr = gram.solve(&(x.tr_mul(v) - &ds.y));
        v - x * corr
    };
    let soft = |v: f64, t: f64| v.signum() * (v.abs() - t).max(0.0);

    let mut rho = 1.0;
    let mut z = project(&DVector::zeros(d));
    let mut u = DVector::zeros(d);
    let mut best: Option<L1Solution> = None;
    let max_iter = 500_000;
    for it in 1..=max_iter {
        let w = project(&(&z - &u));
        let z_old = z.clone();
        z = (&w + &u).map(|v| soft(v, 1.0 / rho));
        u += &w - &z;
        let primal = (&w - &z).norm();
        let dual = rho * (&z - &z_old).norm();
        if primal > 10.0 * dual {
            rho *= 2.0;
            u /= 2.0;
        } else if dual > 10.0 * primal {
            rho /= 2.0;
            u *= 2.0;
        }
        if it % 25 == 0 || it == max_iter {
            let lam_admm = project_onto_samples(x, &(&u * rho))?.0;
            let mut cands = vec![(w.clone(), lam_admm.clone())];
            if let Some((wp, lp)) = polish(ds, &z) {
                cands.push((wp.clone(), lp));
                cands.push((wp, lam_admm));
            }
            for (wc, lam) in cands {
                let gap = certify(ds, &wc, &lam);
                if best.as_ref().is_none_or(|b| gap < b.duality_gap) {
                    best = Some(L1Solution {
                        w: wc,
                        duality_gap: gap,
                        iterations: it,
                    });
                }
            }
            if best.as_ref().is_some_and(|b| b.duality_gap <= 1e-9) {
                break;
            }
        }
    }
    let best = best.expect("at least one certificate evaluated");
    if best.duality_gap > 1e-9 {
        return Err(Error::Numeric(format!(
            "basis pursuit stopped with duality gap {:.3e}",
            best.duality_gap
        )));
    }
    Ok(best)
}

/// Basic solution on the support of `z` and the matching sign multiplier.
fn polish(ds: &Dataset, z: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let scale = z.amax();
    let support: Vec<usize> = (0..z.len())
        .filter(|&i| z[i].abs() > 1e-9 * scale)
        .collect();
    let n = ds.n_samples();
    if support.is_empty() || support.len() > n {
        return None;
    }
    let xs = DMatrix::from_fn(support.len(), n, |r, c| ds.x[(support[r], c)]);
    // Xₛᵀ wₛ = y in the least-squares sense
    let (ws, res) = project_onto_samples(&xs.transpose(), &ds.y).ok()?;
    if res > 1e-10 * ds.y.norm().max(1.0) {
        return None;
    }
    let signs = ws.map(f64::signum);
    let lam = xs.clone().svd(true, true).solve(&signs, 1e-14).ok()?;
    let mut w = DVector::zeros(z.len());
    for (r, &i) in support.iter().enumerate() {
        w[i] = ws[r];
    }
    Some((w, lam))
}

/// Gap ‖w‖₁ − yᵀλ after scaling λ into {‖Xλ‖∞ ≤ 1}; infinite if w is not
/// feasible.
fn certify(ds: &Dataset, w: &DVector<f64>, lam: &DVector<f64>) -> f64 {
    if ds.feasibility(w) > 1e-12 {
        return f64::INFINITY;
    }
    let infeas = (&ds.x * lam).amax();
    let lam = if infeas > 1.0 {
        lam / infeas
    } else {
        lam.clone()
    };
    (w.iter().map(|v| v.abs()).sum::<f64>() - ds.y.dot(&lam)).max(0.0)
}

/// KKT residuals of a candidate w under Q.
pub fn kkt_residuals(spec: &RegularizerSpec, w: &DVector<f64>, ds: &Dataset) -> Result<KktReport> {
    if w.len() != ds.dim() {
        return param("w and X disagree on d");
    }
    let (_, g) = q_eval(spec, w)?;
    let (nu, stat) = project_onto_samples(&ds.x, &g)?;
    let feas = ds.feasibility(w);
    Ok(KktReport {
        w: w.clone(),
        nu,
        stationarity_residual: stat,
        feasibility_residual: feas,
        iterations: 0,
        converged: stat <= KKT_TOL && feas <= KKT_TOL,
        diagnostics: None,
        kink_samples: Vec::new(),
    })
}

/// KKT check for a trained leaky neuron: stationarity of q_δ,w̃(0) at aw over
/// the warped samples cₙx⁽ⁿ⁾, and feasibility a·σ(Xᵀw) = y. `init` supplies
/// δ and w̃(0).
pub fn leaky_kkt_check(
    params: &LeakyParams,
    init: &LeakyParams,
    ds: &Dataset,
    tol: f64,
) -> Result<KktReport> {
    if !(params.rho > 0.0) {
        return Err(Error::OutOfScope(format!(
            "leaky KKT analysis requires rho > 0, got {}",
            params.rho
        )));
    }
    let scale = init.a * init.a + init.w.norm_squared();
    let mut delta = init.a * init.a - init.w.norm_squared();
    if delta.abs() <= 1e-12 * scale {
        delta = delta.max(0.0);
    }
    if delta < 0.0 {
        return Err(Error::OutOfScope(format!(
            "leaky KKT analysis requires delta >= 0, got {delta}"
        )));
    }
    let spec = RegularizerSpec::RadialQ {
        delta,
        wtilde0: &init.w * init.a,
    };
    let z = ds.x.tr_mul(&params.w);
    let kink_samples: Vec<usize> = (0..z.len())
        .filter(|&n| z[n].abs() <= 1e-14 * params.w.norm() * ds.x.column(n).norm())
        .collect();
    let c = subgradient(&z, params.rho);
    let warped = ds.with_scaled_samples(&c);
    let wt = &params.w * params.a;
    let (_, g) = q_eval(&spec, &wt)?;
    let (nu, stat) = project_onto_samples(&warped.x, &g)?;
    let out = z.map(|v| crate::models::leaky(v, params.rho)) * params.a;
    let feas = (out - &ds.y).norm() / ds.y.norm().max(1.0);
    Ok(KktReport {
        w: wt,
        nu,
        stationarity_residual: stat,
        feasibility_residual: feas,
        iterations: 0,
        converged: stat <= tol && feas <= tol,
        diagnostics: None,
        kink_samples,
    })
}

/// Inverse gradient map of a separable or radial Q, with its conjugate.
trait DualMap {
    /// w = ∇Q*(p).
    fn primal(&self, p: &DVector<f64>) -> Result<DVector<f64>>;
    /// Q*(p).
    fn conjugate(&self, p: &DVector<f64>) -> Result<f64>;
    /// Xᵀ·∂w/∂p·X.
    fn jacobian(&self, p: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    fn spec(&self) -> RegularizerSpec;
    /// Largest allowed ‖Δp‖∞ per Newton step.
    fn max_dual_step(&self) -> f64 {
        f64::INFINITY
    }
}

struct DiagonalDual {
    sqrt_k: DVector<f64>,
    k: DVector<f64>,
}

impl DiagonalDual {
    fn guard(&self, p: &DVector<f64>) -> Result<()> {
        for (i, v) in p.iter().enumerate() {
            if !((2.0 * v).abs() <= SINH_GUARD) {
                return Err(Error::Overflow {
                    index: i,
                    value: *v,
                });
            }
        }
        Ok(())
    }
}

impl DualMap for DiagonalDual {
    fn primal(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        self.guard(p)?;
        Ok(p.zip_map(&self.sqrt_k, |pi, sk| 0.5 * sk * (2.0 * pi).sinh()))
    }

    fn conjugate(&self, p: &DVector<f64>) -> Result<f64> {
        self.guard(p)?;
        // (√k/4)(cosh 2p − 1) = (√k/2)·sinh²(p)
        Ok(p.iter()
            .zip(self.sqrt_k.iter())
            .map(|(pi, sk)| 0.5 * sk * pi.sinh().powi(2))
            .sum())
    }

    fn jacobian(&self, p: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.guard(p)?;
        let dw = p.zip_map(&self.sqrt_k, |pi, sk| sk * (2.0 * pi).cosh());
        let mut scaled = x.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= dw[i];
        }
        Ok(x.tr_mul(&scaled))
    }

    fn spec(&self) -> RegularizerSpec {
        RegularizerSpec::DiagonalQ { k: self.k.clone() }
    }

    fn max_dual_step(&self) -> f64 {
        DIAGONAL_DUAL_STEP
    }
}

struct RadialDual {
    delta: f64,
    wtilde0: DVector<f64>,
    z: DVector<f64>,
}

impl RadialDual {
    /// (m, x = r(m), ê) for p.
    fn polar(&self, p: &DVector<f64>) -> Result<(f64, f64, DVector<f64>)> {
        let e = p - &self.z;
        let m = e.norm();
        let x = qhat_derivative_inverse(m, self.delta)?;
        let dir = if m > 0.0 {
            e / m
        } else {
            DVector::zeros(p.len())
        };
        Ok((m, x, dir))
    }
}

impl DualMap for RadialDual {
    fn primal(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let (_, x, dir) = self.polar(p)?;
        Ok(dir * x)
    }

    fn conjugate(&self, p: &DVector<f64>) -> Result<f64> {
        let (m, x, _) = self.polar(p)?;
        Ok(m * x - qhat_radial(x, self.delta)?.value)
    }

    fn jacobian(&self, p: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (m, _, dir) = self.polar(p)?;
        // R = (m/C)²: r(m)/m = √(R+δ)/C and r′(m) = (2R+δ)/(C·√(R+δ))
        let r = (m / QHAT_SLOPE).powi(2);
        let root = (r + self.delta).sqrt();
        let tangential = root / QHAT_SLOPE;
        let s = r + 0.5 * self.delta;
        let radial = if root > 0.0 {
            2.0 * s / (QHAT_SLOPE * root)
        } else {
            0.0
        };
        let xe = x.tr_mul(&dir);
        Ok(x.tr_mul(x) * tangential + &xe * xe.transpose() * (radial - tangential))
    }

    fn spec(&self) -> RegularizerSpec {
        RegularizerSpec::RadialQ {
            delta: self.delta,
            wtilde0: self.wtilde0.clone(),
        }
    }
}

pub fn solve_diagonal(ds: &Dataset, k: &DVector<f64>, tol: f64) -> Result<KktReport> {
    if k.len() != ds.dim() {
        return param(format!(
            "k has length {}, expected d = {}",
            k.len(),
            ds.dim()
        ));
    }
    if k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return param("all k entries must be positive and finite");
    }
    let map = DiagonalDual {
        sqrt_k: k.map(f64::sqrt),
        k: k.clone(),
    };
    dual_newton(ds, &map, tol)
}

pub fn solve_radial(
    ds: &Dataset,
    delta: f64,
    wtilde0: &DVector<f64>,
    tol: f64,
) -> Result<KktReport> {
    if wtilde0.len() != ds.dim() {
        return param("wtilde0 and X disagree on d");
    }
    if !(delta >= 0.0) {
        return param(format!("delta must be nonnegative, got {delta}"));
    }
    let map = RadialDual {
        delta,
        wtilde0: wtilde0.clone(),
        z: radial_z(delta, wtilde0)?,
    };
    dual_newton(ds, &map, tol)
}

fn dual_newton<M: DualMap>(ds: &Dataset, map: &M, tol: f64) -> Result<KktReport> {
    if !(tol > 0.0) {
        return param("tol must be positive");
    }
    check_rank(&ds.x)?;
    let x = &ds.x;
    let n = ds.n_samples();
    let ynorm = ds.y.norm().max(1.0);
    let dual_obj =
        |nu: &DVector<f64>| -> Result<f64> { Ok(map.conjugate(&(x * nu))? - ds.y.dot(nu)) };

    let mut nu = DVector::zeros(n);
    let mut w = map.primal(&(x * &nu))?;
    let mut f = x.tr_mul(&w) - &ds.y;
    let mut obj = dual_obj(&nu)?;
    let mut iterations = 0;
    let mut diagnostics = None;
    while f.norm() / ynorm > tol {
        if iterations >= MAX_NEWTON {
            diagnostics = Some(format!(
                "iteration limit {MAX_NEWTON} reached with feasibility {:.3e}",
                f.norm() / ynorm
            ));
            break;
        }
        iterations += 1;
        let p = x * &nu;
        let mut jac = map.jacobian(&p, x)?;
        jac = (&jac + jac.transpose()) * 0.5;
        let mut step = match jac.clone().cholesky() {
            Some(ch) => -ch.solve(&f),
            None => -jac
                .lu()
                .solve(&f)
                .ok_or_else(|| Error::Singular("dual Jacobian is singular".into()))?,
        };
        let dp = (x * &step).amax();
        if dp > map.max_dual_step() {
            step *= map.max_dual_step() / dp;
        }
        let slope = f.dot(&step);
        let fnorm = f.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial = &nu + &step * t;
            if let (Ok(w_t), Ok(obj_t)) = (map.primal(&(x * &trial)), dual_obj(&trial)) {
                let f_t = x.tr_mul(&w_t) - &ds.y;
                let armijo = obj_t <= obj + ARMIJO * t * slope;
                let merit = f_t.norm() <= (1.0 - ARMIJO * t) * fnorm;
                if obj_t.is_finite() && (armijo || merit) {
                    accepted = Some((trial, w_t, f_t, obj_t));
                    break;
                }
            }
            t *= 0.5;
        }
        let step_norm = t * step.norm();
        match accepted {
            Some((trial, w_t, f_t, obj_t)) => {
                nu = trial;
                w = w_t;
                f = f_t;
                obj = obj_t;
            }
            None => {
                diagnostics = Some(format!(
                    "line search failed at iteration {iterations}: feasibility {:.3e}, step norm {:.3e}",
                    fnorm / ynorm,
                    step_norm
                ));
                break;
            }
        }
        if step_norm < 1e-14 && f.norm() / ynorm > tol {
            diagnostics = Some(format!(
                "Newton stalled at iteration {iterations}: step norm {step_norm:.3e}, feasibility {:.3e}",
                f.norm() / ynorm
            ));
            break;
        }
    }
    let (_, g) = q_eval(&map.spec(), &w)?;
    let stat = (g - x * &nu).norm();
    let feas = ds.feasibility(&w);
    let converged = diagnostics.is_none() && feas <= tol && stat <= tol;
    if diagnostics.is_none() && !converged {
        diagnostics = Some(format!(
            "stationarity residual {stat:.3e} above tolerance {tol:.1e}"
        ));
    }
    Ok(KktReport {
        w,
        nu,
        stationarity_residual: stat,
        feasibility_residual: feas,
        iterations,
        converged,
        diagnostics,
        kink_samples: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sample(x: &[f64], y: f64) -> Dataset {
        Dataset::from_samples(&[x.to_vec()], &[y]).unwrap()
    }

    #[test]
    fn symmetric_diagonal_problem() {
        let ds = one_sample(&[1.0, 1.0], 1.0);
        let rep = solve_diagonal(&ds, &DVector::from_element(2, 1.0), 1e-12).unwrap();
        assert!(rep.converged);
        assert!((rep.w[0] - 0.5).abs() < 1e-12 && (rep.w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rich_and_kernel_limits_in_two_dims() {
        let ds = one_sample(&[2.0, 1.0], 1.0);
        let rich = solve_diagonal(&ds, &DVector::from_element(2, 1e-10), 1e-12).unwrap();
        assert!(rich.converged, "{rich:?}");
        let l1 = DVector::from_column_slice(&[0.5, 0.0]);
        assert!((&rich.w - &l1).norm() / l1.norm() <= 1e-2);

        let lazy = solve_diagonal(&ds, &DVector::from_element(2, 1e10), 1e-12).unwrap();
        assert!(lazy.converged);
        let l2 = DVector::from_column_slice(&[0.4, 0.2]);
        assert!((&lazy.w - &l2).norm() / l2.norm() <= 1e-2);
    }

    #[test]
    fn radial_unique_direction() {
        let ds = one_sample(&[1.0, 0.0], 1.0);
        let w0 = DVector::from_column_slice(&[0.0, 1e-8]);
        let rep = solve_radial(&ds, 0.0, &w0, 1e-12).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!((rep.w[0] - 1.0).abs() < 1e-10);
        assert!(rep.w[1].abs() < 1e-3);
    }

    #[test]
    fn oracles_small_cases() {
        let ds = one_sample(&[1.0, 1.0], 1.0);
        let w = min_l2(&ds).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);

        let ds = one_sample(&[2.0, 1.0], 1.0);
        let l1 = l1_oracle(&ds).unwrap();
        assert!((l1[0] - 0.5).abs() < 1e-12 && l1[1].abs() < 1e-12);

        let ds = one_sample(&[2.0, 1.0], 0.0);
        assert_eq!(min_l2(&ds).unwrap(), DVector::zeros(2));
        assert_eq!(l1_oracle(&ds).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn rank_errors() {
        let dup = Dataset::from_samples(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]], &[1.0, 1.0])
            .unwrap();
        assert!(matches!(min_l2(&dup), Err(Error::DuplicateSamples(0, 1))));
        let dep = Dataset::from_samples(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]], &[1.0, 1.0])
            .unwrap();
        assert!(matches!(
            solve_diagonal(&dep, &DVector::from_element(3, 1.0), 1e-10),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn non_minimizer_has_stationarity_gap() {
        let ds = one_sample(&[2.0, 1.0], 1.0);
        let spec = RegularizerSpec::DiagonalQ {
            k: DVector::from_element(2, 1e-10),
        };
        let l2 = min_l2(&ds).unwrap();
        let rep = kkt_residuals(&spec, &l2, &ds).unwrap();
        assert!(rep.stationarity_residual > 0.1);
        assert!(rep.feasibility_residual < 1e-15);

        let w = DVector::from_column_slice(&[3.0, -1.0]);
        let rep = kkt_residuals(&spec, &w, &ds).unwrap();
        assert_eq!(
            rep.feasibility_residual,
            (2.0 * 3.0 - 1.0 - 1.0f64).abs() / 1.0
        );
    }

    #[test]
    fn report_json_fields() {
        let ds = one_sample(&[1.0, 1.0], 1.0);
        let rep = solve_diagonal(&ds, &DVector::from_element(2, 1.0), 1e-12).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in [
            "w",
            "nu",
            "stationarity_residual",
            "feasibility_residual",
            "iterations",
            "converged",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn fd_jacobian<M: DualMap>(map: &M, x: &DMatrix<f64>, nu: &DVector<f64>) -> DMatrix<f64> {
        let n = nu.len();
        let f = |v: &DVector<f64>| x.tr_mul(&map.primal(&(x * v)).unwrap());
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + nu[j].abs());
            let mut up = nu.clone();
            let mut dn = nu.clone();
            up[j] += h;
            dn[j] -= h;
            jac.set_column(j, &((f(&up) - f(&dn)) / (2.0 * h)));
        }
        jac
    }

    #[test]
    fn analytic_dual_jacobians_match_differences() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, -0.5, 2.0, 0.7, 0.1, 0.2, -1.1]);
        let nu = DVector::from_column_slice(&[0.4, -0.25]);
        for delta in [0.0, 0.5, 4.0] {
            let w0 = DVector::from_column_slice(&[0.3, -0.1, 0.6, 0.2]);
            let map = RadialDual {
                delta,
                wtilde0: w0.clone(),
                z: radial_z(delta, &w0).unwrap(),
            };
            let a = map.jacobian(&(&x * &nu), &x).unwrap();
            let b = fd_jacobian(&map, &x, &nu);
            assert!(
                (&a - &b).amax() <= 1e-6 * (1.0 + a.amax()),
                "delta {delta}: {a} {b}"
            );
        }
        let k = DVector::from_column_slice(&[1e-2, 1.0, 3.0, 1e2]);
        let map = DiagonalDual {
            sqrt_k: k.map(f64::sqrt),
            k,
        };
        let a = map.jacobian(&(&x * &nu), &x).unwrap();
        assert!((&a - fd_jacobian(&map, &x, &nu)).amax() <= 1e-6 * (1.0 + a.amax()));
    }
}
