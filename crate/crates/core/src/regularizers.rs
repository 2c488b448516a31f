//! Closed-form implicit regularizers Q, their gradients and inverse-gradient
//! maps, and the shape/scale algebra.
//!
//! Single-neuron radial profile, with S = √(x²+δ²/4) and R = S − δ/2:
//!
//! ```text
//! q̂_δ(x)  = (x² − (δ/2)(δ/2 + S))·√R / x = (R − δ/2)·√(R + δ)
//! q̂_δ'(x) = (3/2)·√R
//! ```
//!
//! The factor 3/2 is the exact derivative of the closed form and is the same
//! constant that appears in the linear term z, so ∇Q(w̃(0)) = 0 holds.
//! [`radial_profile`] exposes the unit-constant profile √R for callers that
//! want it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::models::DiagonalParams;
use crate::serde_util;

/// Constant in q̂_δ' = C·√R implied by the closed form of q̂_δ.
pub const QHAT_SLOPE: f64 = 1.5;

/// Largest |2g| accepted by the sinh inverse before binary64 overflow.
pub const SINH_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeScale {
    pub alpha: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qk {
    pub value: f64,
    pub gradient: f64,
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0) || !k.is_finite() {
        return param(format!("k must be positive and finite, got {k}"));
    }
    Ok(())
}

/// q_k(x) = (√k/4)[1 − √(1+ξ²) + ξ·asinh ξ], ξ = 2x/√k.
pub fn qk(x: f64, k: f64) -> Result<Qk> {
    check_k(k)?;
    let sk = k.sqrt();
    let xi = 2.0 * x / sk;
    let asinh = xi.asinh();
    // 1 − √(1+ξ²) rewritten as −ξ²/(1+√(1+ξ²))
    let bracket = xi * asinh - xi * xi / (1.0 + xi.hypot(1.0));
    Ok(Qk {
        value: 0.25 * sk * bracket,
        gradient: 0.5 * asinh,
    })
}

/// x(g) = (√k/2)·sinh(2g), the inverse of q_k'.
pub fn qk_gradient_inverse(g: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    if !((2.0 * g).abs() <= SINH_GUARD) {
        return Err(Error::Overflow { index: 0, value: g });
    }
    Ok(0.5 * k.sqrt() * (2.0 * g).sinh())
}

/// kᵢ = (δ₊ᵢ − δ₋ᵢ)² + 4cᵢ².
pub fn k_from_init(p: &DiagonalParams) -> DVector<f64> {
    DVector::from_fn(p.u_plus.len(), |i, _| {
        let c = p.u_plus[i] * p.u_minus[i] + p.v_plus[i] * p.v_minus[i];
        let dp = p.v_plus[i].powi(2) - p.u_plus[i].powi(2);
        let dm = p.v_minus[i].powi(2) - p.u_minus[i].powi(2);
        (dp - dm).powi(2) + 4.0 * c * c
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeScaleAlgebra {
    /// α/(1−s²)
    pub khat: f64,
    /// 4αs/(1−s²)
    pub delta: f64,
    /// √(α²+δ²/4) = α(1+s²)/(1−s²)
    pub sqrt_combo: f64,
    /// √(α²+δ²/4) − δ/2 = α(1−s)/(1+s)
    pub minus_branch: f64,
    /// √(α²+δ²/4) + δ/2 = α(1+s)/(1−s)
    pub plus_branch: f64,
    /// √k of an unbiased diagonal coordinate, 4α(1+s²)/(1−s²)
    pub sqrt_k: f64,
}

pub fn shape_scale_algebra(alpha: f64, s: f64) -> Result<ShapeScaleAlgebra> {
    if !(alpha > 0.0) {
        return param(format!("alpha must be positive, got {alpha}"));
    }
    if !(s.abs() < 1.0) {
        return param(format!("shape must satisfy |s| < 1, got {s}"));
    }
    let den = 1.0 - s * s;
    let combo = alpha * (1.0 + s * s) / den;
    Ok(ShapeScaleAlgebra {
        khat: alpha / den,
        delta: 4.0 * alpha * s / den,
        sqrt_combo: combo,
        minus_branch: alpha * (1.0 - s) / (1.0 + s),
        plus_branch: alpha * (1.0 + s) / (1.0 - s),
        sqrt_k: 4.0 * combo,
    })
}

/// R = √(x²+δ²/4) − δ/2 without cancellation.
pub fn radial_r(x: f64, delta: f64) -> f64 {
    let half = 0.5 * delta;
    let s = x.hypot(half);
    if s + half == 0.0 {
        0.0
    } else {
        x * x / (s + half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QHat {
    pub value: f64,
    pub derivative: f64,
}

fn check_radial(x: f64, delta: f64) -> Result<()> {
    if !(x >= 0.0) || !(delta >= 0.0) {
        return param(format!(
            "radial profile needs x ≥ 0 and δ ≥ 0, got x={x}, δ={delta}"
        ));
    }
    Ok(())
}

/// q̂_δ and its derivative; q̂_δ(0) is the continuous limit −δ^{3/2}/2.
pub fn qhat_radial(x: f64, delta: f64) -> Result<QHat> {
    check_radial(x, delta)?;
    let r = radial_r(x, delta);
    Ok(QHat {
        value: (r - 0.5 * delta) * (r + delta).sqrt(),
        derivative: QHAT_SLOPE * r.sqrt(),
    })
}

/// Inverse of q̂_δ': the x ≥ 0 with (3/2)√R(x) = m.
pub fn qhat_derivative_inverse(m: f64, delta: f64) -> Result<f64> {
    radial_profile_inverse(m / QHAT_SLOPE, delta)
}

/// Unit-constant profile √R(x).
pub fn radial_profile(x: f64, delta: f64) -> Result<f64> {
    check_radial(x, delta)?;
    Ok(radial_r(x, delta).sqrt())
}

/// r(m) = √(m⁴ + δm²), the inverse of [`radial_profile`].
pub fn radial_profile_inverse(m: f64, delta: f64) -> Result<f64> {
    check_radial(m, delta)?;
    Ok(m * (m * m + delta).sqrt())
}

/// z = −(3/2)·√R(‖w̃0‖)·w̃0/‖w̃0‖.
pub fn radial_z(delta: f64, wtilde0: &DVector<f64>) -> Result<DVector<f64>> {
    let n = wtilde0.norm();
    if !(n > 0.0) {
        return param("wtilde0 must be nonzero");
    }
    let slope = qhat_radial(n, delta)?.derivative;
    Ok(wtilde0 * (-slope / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerSpec {
    DiagonalQ {
        #[serde(with = "serde_util::vector")]
        k: DVector<f64>,
    },
    RadialQ {
        delta: f64,
        #[serde(with = "serde_util::vector")]
        wtilde0: DVector<f64>,
    },
    L1,
    L2,
    WeightedL2 {
        #[serde(with = "serde_util::vector")]
        weights: DVector<f64>,
    },
    MahalanobisAboutInit {
        #[serde(with = "serde_util::matrix_rows")]
        b: DMatrix<f64>,
        #[serde(with = "serde_util::vector")]
        wtilde0: DVector<f64>,
    },
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegularizerSpec::DiagonalQ { k } => {
                if k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return param("all k entries must be positive");
                }
            }
            RegularizerSpec::RadialQ { delta, wtilde0 } => {
                if !(*delta >= 0.0) {
                    return param(format!("delta must be nonnegative, got {delta}"));
                }
                if !(wtilde0.norm() > 0.0) {
                    return param("wtilde0 must be nonzero");
                }
            }
            RegularizerSpec::WeightedL2 { weights } => {
                if weights.iter().any(|v| !(*v > 0.0)) {
                    return param("weights must be positive");
                }
            }
            RegularizerSpec::MahalanobisAboutInit { b, wtilde0 } => {
                if !b.is_square() || b.nrows() != wtilde0.len() {
                    return param("B must be d×d");
                }
                if (b - b.transpose()).amax() > 1e-12 * b.amax().max(1.0) {
                    return param("B must be symmetric");
                }
                if b.clone().cholesky().is_none() {
                    return Err(Error::Numeric("B is not positive definite".into()));
                }
            }
            RegularizerSpec::L1 | RegularizerSpec::L2 => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            RegularizerSpec::DiagonalQ { k } => Some(k.len()),
            RegularizerSpec::RadialQ { wtilde0, .. } => Some(wtilde0.len()),
            RegularizerSpec::WeightedL2 { weights } => Some(weights.len()),
            RegularizerSpec::MahalanobisAboutInit { wtilde0, .. } => Some(wtilde0.len()),
            RegularizerSpec::L1 | RegularizerSpec::L2 => None,
        }
    }

    /// NTK-limit weights 1/(2(u₊ᵢ²+v₊ᵢ²)) of an unbiased diagonal init.
    pub fn weighted_l2_from_init(p: &DiagonalParams) -> Self {
        RegularizerSpec::WeightedL2 {
            weights: DVector::from_fn(p.u_plus.len(), |i, _| {
                1.0 / (2.0 * (p.u_plus[i].powi(2) + p.v_plus[i].powi(2)))
            }),
        }
    }

    /// Large-α fc limit about w̃(0) with orientation u and shape s ∈ (−1, 1].
    pub fn mahalanobis(s: f64, u: &DVector<f64>, wtilde0: &DVector<f64>) -> Result<Self> {
        if !(s > -1.0 && s <= 1.0) {
            return param(format!("shape must lie in (−1, 1], got {s}"));
        }
        Ok(RegularizerSpec::MahalanobisAboutInit {
            b: mahalanobis_b(s, u),
            wtilde0: wtilde0.clone(),
        })
    }
}

/// B = I − ((1−s)²/(2(1+s²)))·uuᵀ.
pub fn mahalanobis_b(s: f64, u: &DVector<f64>) -> DMatrix<f64> {
    let c = (1.0 - s).powi(2) / (2.0 * (1.0 + s * s));
    DMatrix::identity(u.len(), u.len()) - u * u.transpose() * c
}

/// B⁻¹ = I + ((1−s)/(1+s))²·uuᵀ for unit u, the large-α tangent kernel.
pub fn mahalanobis_kernel(s: f64, u: &DVector<f64>) -> DMatrix<f64> {
    let c = ((1.0 - s) / (1.0 + s)).powi(2);
    DMatrix::identity(u.len(), u.len()) + u * u.transpose() * c
}

/// Value and gradient of Q at w.
pub fn q_eval(spec: &RegularizerSpec, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    spec.validate()?;
    if let Some(d) = spec.dim() {
        if d != w.len() {
            return param(format!("w has length {}, regularizer expects {d}", w.len()));
        }
    }
    match spec {
        RegularizerSpec::DiagonalQ { k } => {
            let mut value = 0.0;
            let mut grad = DVector::zeros(w.len());
            for i in 0..w.len() {
                let q = qk(w[i], k[i])?;
                value += q.value;
                grad[i] = q.gradient;
            }
            Ok((value, grad))
        }
        RegularizerSpec::RadialQ { delta, wtilde0 } => {
            let z = radial_z(*delta, wtilde0)?;
            let x = w.norm();
            let q = qhat_radial(x, *delta)?;
            let value = q.value + z.dot(w);
            let grad = if x == 0.0 {
                z
            } else {
                let r = radial_r(x, *delta);
                w * (QHAT_SLOPE / (r + delta).sqrt()) + z
            };
            Ok((value, grad))
        }
        RegularizerSpec::L1 => Ok((
            w.iter().map(|v| v.abs()).sum(),
            w.map(|v| if v == 0.0 { 0.0 } else { v.signum() }),
        )),
        RegularizerSpec::L2 => Ok((0.5 * w.norm_squared(), w.clone())),
        RegularizerSpec::WeightedL2 { weights } => Ok((
            weights.dot(&w.component_mul(w)),
            weights.component_mul(w) * 2.0,
        )),
        RegularizerSpec::MahalanobisAboutInit { b, wtilde0 } => {
            let e = w - wtilde0;
            let be = b * &e;
            Ok((e.dot(&be), be * 2.0))
        }
    }
}

/// wᵀA⁻¹w through a Cholesky factorization.
pub fn rkhs_norm(w: &DVector<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() || a.nrows() != w.len() {
        return param("A must be d×d");
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("A is not positive definite".into()))?;
    Ok(w.dot(&chol.solve(w)))
}
