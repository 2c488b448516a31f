//! Datasets and the synthetic sparse-regression generator.
//!
//! Samples are drawn from `ChaCha8Rng::seed_from_u64(seed)` through
//! `rand_distr::StandardNormal` (ziggurat). Draw order: for each sample n,
//! the d coordinates of x⁽ⁿ⁾ followed by one noise variate. β* is supported
//! on the first r* coordinates with entries 1/√r*.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Generator arguments, kept on the dataset for the JSON sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseRegressionSpec {
    pub n: usize,
    pub d: usize,
    pub r_star: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// d×N, columns are samples.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta_star: Option<DVector<f64>>,
    pub noise_var: f64,
    pub spec: Option<SparseRegressionSpec>,
}

#[derive(Serialize)]
struct Sidecar {
    n: usize,
    d: usize,
    r_star: usize,
    noise_std: f64,
    seed: u64,
    beta_star_support: Vec<usize>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return param(format!(
                "X has {} columns but y has length {}",
                x.ncols(),
                y.len()
            ));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return param("empty dataset");
        }
        Ok(Self {
            x,
            y,
            beta_star: None,
            noise_var: 0.0,
            spec: None,
        })
    }

    /// Builds a dataset from sample vectors x⁽ⁿ⁾.
    pub fn from_samples(samples: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return param("no samples");
        };
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return param("samples have differing lengths");
        }
        let x = DMatrix::from_fn(d, samples.len(), |i, n| samples[n][i]);
        Self::new(x, DVector::from_column_slice(y))
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    /// ‖Xᵀw − y‖ / max(1, ‖y‖).
    pub fn feasibility(&self, w: &DVector<f64>) -> f64 {
        (self.x.tr_mul(w) - &self.y).norm() / self.y.norm().max(1.0)
    }

    /// Copy with the columns rescaled: x̃⁽ⁿ⁾ = cₙ x⁽ⁿ⁾.
    pub fn with_scaled_samples(&self, c: &DVector<f64>) -> Self {
        let mut x = self.x.clone();
        for (n, mut col) in x.column_iter_mut().enumerate() {
            col *= c[n];
        }
        Self { x, ..self.clone() }
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut xs = String::new();
        for row in self.x.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            xs.push_str(&cells.join(","));
            xs.push('\n');
        }
        fs::write(dir.join("X.csv"), xs)?;
        let ys: String = self.y.iter().map(|v| format!("{v}\n")).collect();
        fs::write(dir.join("y.csv"), ys)?;
        if let Some(spec) = &self.spec {
            let sidecar = Sidecar {
                n: spec.n,
                d: spec.d,
                r_star: spec.r_star,
                noise_std: spec.noise_std,
                seed: spec.seed,
                beta_star_support: (0..spec.r_star).collect(),
            };
            fs::write(
                dir.join("dataset.json"),
                serde_json::to_string_pretty(&sidecar)?,
            )?;
        }
        Ok(())
    }
}

pub fn gen_sparse_regression(
    n: usize,
    d: usize,
    r_star: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return param("n and d must be positive");
    }
    if r_star == 0 || r_star > d {
        return param(format!("r_star must lie in [1, d], got {r_star}"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return param("noise_std must be finite and nonnegative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entry = 1.0 / (r_star as f64).sqrt();
    let beta = DVector::from_fn(d, |i, _| if i < r_star { entry } else { 0.0 });
    let mut x = DMatrix::zeros(d, n);
    let mut y = DVector::zeros(n);
    for s in 0..n {
        for i in 0..d {
            x[(i, s)] = rng.sample::<f64, _>(StandardNormal);
        }
        let eps: f64 = rng.sample(StandardNormal);
        y[s] = x.column(s).dot(&beta) + noise_std * eps;
    }
    Ok(Dataset {
        x,
        y,
        beta_star: Some(beta),
        noise_var: noise_std * noise_std,
        spec: Some(SparseRegressionSpec {
            n,
            d,
            r_star,
            noise_std,
            seed,
        }),
    })
}

/// Analytic E[(y − wᵀx)²] = ‖β* − w‖² + noise_var under x ~ N(0, I).
pub fn population_error(w: &DVector<f64>, dataset: &Dataset) -> Result<f64> {
    let beta = dataset.beta_star.as_ref().ok_or_else(|| {
        Error::Precondition("population error needs a ground-truth beta_star".into())
    })?;
    if beta.len() != w.len() {
        return param(format!("w has length {}, expected {}", w.len(), beta.len()));
    }
    Ok((beta - w).norm_squared() + dataset.noise_var)
}
