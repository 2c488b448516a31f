//! Parametric families: diagonal linear nets, fully connected linear nets and
//! the single leaky-ReLU neuron.
//!
//! Loss is L = (1/2N) Σₙ (yₙ − fₙ)² with residual rₙ = (yₙ − fₙ)/N, so the
//! parameter velocity of gradient flow is exactly −∇L. Every family flattens
//! to a state vector; [`Layout`] evaluates the flow field directly on it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::regularizers::ShapeScale;
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalParams {
    #[serde(with = "serde_util::vector")]
    pub u_plus: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub u_minus: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub v_plus: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub v_minus: DVector<f64>,
}

/// Fully connected linear net; column i of `w` is the incoming vector wᵢ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcParams {
    #[serde(with = "serde_util::vector")]
    pub a: DVector<f64>,
    #[serde(with = "serde_util::columns")]
    pub w: DMatrix<f64>,
}

/// Single neuron with σ(x) = max(x, ρx).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakyParams {
    pub a: f64,
    #[serde(with = "serde_util::vector")]
    pub w: DVector<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Params {
    Diagonal(DiagonalParams),
    Fc(FcParams),
    Leaky(LeakyParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservedDiag {
    pub c: DVector<f64>,
    pub delta_plus: DVector<f64>,
    pub delta_minus: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservedFc {
    pub delta: DVector<f64>,
    /// aaᵀ − WᵀW.
    pub big_delta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Conserved {
    Diag(ConservedDiag),
    Fc(ConservedFc),
}

impl Conserved {
    /// Labelled scalar list; for Δ only the upper triangle is listed.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        match self {
            Conserved::Diag(c) => {
                for (i, v) in c.c.iter().enumerate() {
                    out.push((format!("c[{i}]"), *v));
                }
                for (i, v) in c.delta_plus.iter().enumerate() {
                    out.push((format!("delta_plus[{i}]"), *v));
                }
                for (i, v) in c.delta_minus.iter().enumerate() {
                    out.push((format!("delta_minus[{i}]"), *v));
                }
            }
            Conserved::Fc(c) => {
                for (i, v) in c.delta.iter().enumerate() {
                    out.push((format!("delta[{i}]"), *v));
                }
                let m = c.big_delta.nrows();
                for i in 0..m {
                    for j in i..m {
                        out.push((format!("Delta[{i},{j}]"), c.big_delta[(i, j)]));
                    }
                }
            }
        }
        out
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries().into_iter().map(|(_, v)| v).collect()
    }
}

/// Shape of a flattened parameter state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// `[u₊, u₋, v₊, v₋]`, each of length d.
    Diagonal { d: usize },
    /// `[a, vec(W)]` with W stored column-major.
    Fc { d: usize, m: usize },
    /// `[a, w]`.
    Leaky { d: usize, rho: f64 },
}

impl Layout {
    pub fn dim(&self) -> usize {
        match *self {
            Layout::Diagonal { d } | Layout::Fc { d, .. } | Layout::Leaky { d, .. } => d,
        }
    }

    pub fn state_len(&self) -> usize {
        match *self {
            Layout::Diagonal { d } => 4 * d,
            Layout::Fc { d, m } => m + d * m,
            Layout::Leaky { d, .. } => 1 + d,
        }
    }

    pub fn predictor(&self, s: &[f64]) -> DVector<f64> {
        match *self {
            Layout::Diagonal { d } => {
                DVector::from_fn(d, |i, _| s[i] * s[2 * d + i] - s[d + i] * s[3 * d + i])
            }
            Layout::Fc { d, m } => {
                let mut w = DVector::zeros(d);
                for j in 0..m {
                    let col = &s[m + j * d..m + (j + 1) * d];
                    for i in 0..d {
                        w[i] += s[j] * col[i];
                    }
                }
                w
            }
            Layout::Leaky { d, .. } => DVector::from_fn(d, |i, _| s[0] * s[1 + i]),
        }
    }

    /// Network outputs fₙ on the training samples.
    pub fn outputs(&self, s: &[f64], ds: &Dataset) -> DVector<f64> {
        match *self {
            Layout::Diagonal { .. } => ds.x.tr_mul(&self.predictor(s)),
            Layout::Fc { d, m } => {
                let mut f = DVector::zeros(ds.n_samples());
                for j in 0..m {
                    let wj = DVector::from_column_slice(&s[m + j * d..m + (j + 1) * d]);
                    let z = ds.x.tr_mul(&wj);
                    if j == 0 {
                        f = z * s[0];
                    } else {
                        f += z * s[j];
                    }
                }
                f
            }
            Layout::Leaky { rho, .. } => {
                let w = DVector::from_column_slice(&s[1..]);
                let z = ds.x.tr_mul(&w);
                z.map(|v| leaky(v, rho)) * s[0]
            }
        }
    }

    /// Loss and residual rₙ = (yₙ − fₙ)/N.
    pub fn loss_and_residual(&self, s: &[f64], ds: &Dataset) -> (f64, DVector<f64>) {
        let n = ds.n_samples() as f64;
        let diff = &ds.y - self.outputs(s, ds);
        let loss = diff.norm_squared() / (2.0 * n);
        (loss, diff / n)
    }

    /// Writes θ̇ = −∇L(θ) into `out` and returns the loss.
    pub fn flow_field(&self, s: &[f64], ds: &Dataset, out: &mut [f64]) -> f64 {
        let (loss, r) = self.loss_and_residual(s, ds);
        match *self {
            Layout::Diagonal { d } => {
                let xi = &ds.x * &r;
                for i in 0..d {
                    out[i] = s[2 * d + i] * xi[i];
                    out[d + i] = -s[3 * d + i] * xi[i];
                    out[2 * d + i] = s[i] * xi[i];
                    out[3 * d + i] = -s[d + i] * xi[i];
                }
            }
            Layout::Fc { d, m } => {
                let g = &ds.x * &r;
                for j in 0..m {
                    let col = &s[m + j * d..m + (j + 1) * d];
                    let mut da = 0.0;
                    for i in 0..d {
                        da += col[i] * g[i];
                    }
                    out[j] = da;
                    for i in 0..d {
                        out[m + j * d + i] = s[j] * g[i];
                    }
                }
            }
            Layout::Leaky { d, rho } => {
                let w = DVector::from_column_slice(&s[1..]);
                let c = subgradient(&ds.x.tr_mul(&w), rho);
                let g = &ds.x * r.component_mul(&c);
                let mut da = 0.0;
                for i in 0..d {
                    da += s[1 + i] * g[i];
                }
                out[0] = da;
                for i in 0..d {
                    out[1 + i] = s[0] * g[i];
                }
            }
        }
        loss
    }

    pub fn conserved(&self, s: &[f64]) -> Conserved {
        match *self {
            Layout::Diagonal { d } => {
                let (up, um, vp, vm) = (&s[..d], &s[d..2 * d], &s[2 * d..3 * d], &s[3 * d..]);
                Conserved::Diag(ConservedDiag {
                    c: DVector::from_fn(d, |i, _| up[i] * um[i] + vp[i] * vm[i]),
                    delta_plus: DVector::from_fn(d, |i, _| vp[i] * vp[i] - up[i] * up[i]),
                    delta_minus: DVector::from_fn(d, |i, _| vm[i] * vm[i] - um[i] * um[i]),
                })
            }
            Layout::Fc { d, m } => {
                let a = DVector::from_column_slice(&s[..m]);
                let w = DMatrix::from_column_slice(d, m, &s[m..]);
                let big = &a * a.transpose() - w.tr_mul(&w);
                Conserved::Fc(ConservedFc {
                    delta: big.diagonal(),
                    big_delta: big,
                })
            }
            Layout::Leaky { .. } => {
                let wn2: f64 = s[1..].iter().map(|v| v * v).sum();
                let delta = s[0] * s[0] - wn2;
                Conserved::Fc(ConservedFc {
                    delta: DVector::from_element(1, delta),
                    big_delta: DMatrix::from_element(1, 1, delta),
                })
            }
        }
    }

    pub fn params(&self, s: &[f64]) -> Params {
        match *self {
            Layout::Diagonal { d } => Params::Diagonal(DiagonalParams {
                u_plus: DVector::from_column_slice(&s[..d]),
                u_minus: DVector::from_column_slice(&s[d..2 * d]),
                v_plus: DVector::from_column_slice(&s[2 * d..3 * d]),
                v_minus: DVector::from_column_slice(&s[3 * d..]),
            }),
            Layout::Fc { d, m } => Params::Fc(FcParams {
                a: DVector::from_column_slice(&s[..m]),
                w: DMatrix::from_column_slice(d, m, &s[m..]),
            }),
            Layout::Leaky { rho, .. } => Params::Leaky(LeakyParams {
                a: s[0],
                w: DVector::from_column_slice(&s[1..]),
                rho,
            }),
        }
    }
}

#[inline]
pub fn leaky(z: f64, rho: f64) -> f64 {
    if z < 0.0 {
        rho * z
    } else {
        z
    }
}

/// cₙ = 1 where z ≥ 0 (kink convention) and ρ where z < 0.
pub fn subgradient(z: &DVector<f64>, rho: f64) -> DVector<f64> {
    z.map(|v| if v < 0.0 { rho } else { 1.0 })
}

impl Params {
    pub fn layout(&self) -> Layout {
        match self {
            Params::Diagonal(p) => Layout::Diagonal { d: p.u_plus.len() },
            Params::Fc(p) => Layout::Fc {
                d: p.w.nrows(),
                m: p.a.len(),
            },
            Params::Leaky(p) => Layout::Leaky {
                d: p.w.len(),
                rho: p.rho,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Params::Diagonal(p) => {
                let d = p.u_plus.len();
                if d == 0
                    || [&p.u_minus, &p.v_plus, &p.v_minus]
                        .iter()
                        .any(|v| v.len() != d)
                {
                    return param("diagonal vectors must share a positive length");
                }
            }
            Params::Fc(p) => {
                if p.a.is_empty() || p.w.ncols() != p.a.len() || p.w.nrows() == 0 {
                    return param("W must be d×m with m = len(a) ≥ 1");
                }
            }
            Params::Leaky(p) => {
                if !(p.rho > 0.0) {
                    return Err(Error::OutOfScope(format!(
                        "leaky slope must satisfy rho > 0, got {}",
                        p.rho
                    )));
                }
                if p.w.is_empty() {
                    return param("w must be nonempty");
                }
            }
        }
        Ok(())
    }

    pub fn to_state(&self) -> Vec<f64> {
        match self {
            Params::Diagonal(p) => [&p.u_plus, &p.u_minus, &p.v_plus, &p.v_minus]
                .iter()
                .flat_map(|v| v.iter().copied())
                .collect(),
            Params::Fc(p) => p.a.iter().chain(p.w.iter()).copied().collect(),
            Params::Leaky(p) => std::iter::once(p.a).chain(p.w.iter().copied()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn predictor(&self) -> DVector<f64> {
        self.layout().predictor(&self.to_state())
    }

    pub fn outputs(&self, ds: &Dataset) -> DVector<f64> {
        self.layout().outputs(&self.to_state(), ds)
    }

    pub fn loss_and_residual(&self, ds: &Dataset) -> Result<(f64, DVector<f64>)> {
        self.check_dataset(ds)?;
        Ok(self.layout().loss_and_residual(&self.to_state(), ds))
    }

    /// ∇L in parameter form.
    pub fn gradient(&self, ds: &Dataset) -> Result<Params> {
        self.check_dataset(ds)?;
        let layout = self.layout();
        let s = self.to_state();
        let mut v = vec![0.0; s.len()];
        layout.flow_field(&s, ds, &mut v);
        v.iter_mut().for_each(|x| *x = -*x);
        Ok(layout.params(&v))
    }

    pub fn conserved(&self) -> Conserved {
        self.layout().conserved(&self.to_state())
    }

    /// ‖f − y‖ / max(1, ‖y‖) on the network outputs.
    pub fn feasibility(&self, ds: &Dataset) -> f64 {
        (self.outputs(ds) - &ds.y).norm() / ds.y.norm().max(1.0)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.dim() {
            return param(format!(
                "params have d = {}, dataset has d = {}",
                self.dim(),
                ds.dim()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitShapeScale {
    pub alpha: f64,
    pub shape: f64,
    pub orientation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitFamily {
    Diagonal { d: usize },
    FcSingle,
    Leaky { rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Init {
    pub params: Params,
    /// False when s < 0 for the fc or leaky families (δ < 0).
    pub within_scope: bool,
}

/// |small| = √(α(1−s)/(1+s)), |large| = √(α(1+s)/(1−s)).
pub fn shape_scale_magnitudes(alpha: f64, s: f64) -> (f64, f64) {
    (
        (alpha * (1.0 - s) / (1.0 + s)).sqrt(),
        (alpha * (1.0 + s) / (1.0 - s)).sqrt(),
    )
}

pub fn init_from_shape_scale(spec: &InitShapeScale, family: InitFamily) -> Result<Init> {
    if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
        return param(format!("alpha must be positive, got {}", spec.alpha));
    }
    if !(spec.shape.abs() < 1.0) {
        return param(format!("shape must satisfy |s| < 1, got {}", spec.shape));
    }
    let (small, large) = shape_scale_magnitudes(spec.alpha, spec.shape);
    let orientation = || -> Result<DVector<f64>> {
        let u = spec
            .orientation
            .as_ref()
            .ok_or_else(|| Error::Parameter("fc and leaky builds need an orientation".into()))?;
        let u = DVector::from_column_slice(u);
        if u.is_empty() || (u.norm() - 1.0).abs() > 1e-12 {
            return param("orientation must be a unit vector");
        }
        Ok(u)
    };
    let init = match family {
        InitFamily::Diagonal { d } => {
            if d == 0 {
                return param("d must be positive");
            }
            let u = DVector::from_element(d, small);
            let v = DVector::from_element(d, large);
            Init {
                params: Params::Diagonal(DiagonalParams {
                    u_plus: u.clone(),
                    u_minus: u,
                    v_plus: v.clone(),
                    v_minus: v,
                }),
                within_scope: true,
            }
        }
        InitFamily::FcSingle => {
            let u = orientation()?;
            let d = u.len();
            Init {
                params: Params::Fc(FcParams {
                    a: DVector::from_element(1, large),
                    w: DMatrix::from_column_slice(d, 1, (u * small).as_slice()),
                }),
                within_scope: spec.shape >= 0.0,
            }
        }
        InitFamily::Leaky { rho } => {
            if !(rho > 0.0) {
                return Err(Error::OutOfScope(format!(
                    "leaky slope must satisfy rho > 0, got {rho}"
                )));
            }
            let u = orientation()?;
            Init {
                params: Params::Leaky(LeakyParams {
                    a: large,
                    w: u * small,
                    rho,
                }),
                within_scope: spec.shape >= 0.0,
            }
        }
    };
    Ok(init)
}

/// Recovers (α, s): per coordinate from (u₊, v₊) for diagonal nets, per
/// neuron from (|aᵢ|, ‖wᵢ‖) otherwise.
pub fn shape_scale_of(params: &Params) -> Vec<ShapeScale> {
    let pair = |small: f64, large: f64| ShapeScale {
        alpha: small * large,
        s: (large - small) / (large + small),
    };
    match params {
        Params::Diagonal(p) => p
            .u_plus
            .iter()
            .zip(p.v_plus.iter())
            .map(|(u, v)| pair(u.abs(), v.abs()))
            .collect(),
        Params::Fc(p) => (0..p.a.len())
            .map(|j| pair(p.w.column(j).norm(), p.a[j].abs()))
            .collect(),
        Params::Leaky(p) => vec![pair(p.w.norm(), p.a.abs())],
    }
}

/// Strictly balanced build W = c aᵀ, so WᵀW = aaᵀ.
pub fn balanced_multi_init(a: &DVector<f64>, c: &DVector<f64>) -> Result<FcParams> {
    if a.is_empty() || a.iter().all(|v| *v == 0.0) {
        return Err(Error::Precondition("a must be nonzero".into()));
    }
    if (c.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition("c must be a unit vector".into()));
    }
    Ok(FcParams {
        a: a.clone(),
        w: c * a.transpose(),
    })
}
