//! Experiment drivers behind the `ibflow` command line: regime sweeps,
//! regularizer contour panels, flow-vs-solver comparisons, single runs and
//! the warp verification suite.
//!
//! Grid cells are independent. Each draws its orientation from a per-cell
//! seed `cell_seed(config.seed, α-index, s-index)` and results are collected
//! in row-major (α, s, replicate) order regardless of the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_sparse_regression, population_error, Dataset};
use crate::error::{param, Error, Result};
use crate::flow::{drift_report, integrate, FlowOptions, Trajectory};
use crate::kkt::{kkt_residuals, leaky_kkt_check, min_l2, solve_diagonal, solve_radial, KktReport};
use crate::models::{
    balanced_multi_init, init_from_shape_scale, shape_scale_magnitudes, subgradient, FcParams,
    InitFamily, InitShapeScale, Params,
};
use crate::regularizers::{k_from_init, q_eval, shape_scale_algebra, RegularizerSpec};
use crate::warp::{
    default_fd_step, g_hat, hessian_map_defect, metric_tensor_fc, warp_integral, warped_tensor_fc,
};

pub const CSV_HEADER: &str = "# ibflow-csv v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sweep,
    Contour,
    Compare,
    Verify,
    Simulate,
    Solve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Diagonal,
    FcSingle,
    /// Strictly balanced m-neuron build W = c aᵀ with equal aᵢ.
    FcBalanced,
    /// m neurons with independent orientations, each at (α, s).
    FcMulti,
    Leaky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    #[default]
    Flow,
    Solver,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub d: usize,
    pub r_star: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 40,
            d: 200,
            r_star: 5,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub const PAPER_SCALE: (usize, usize) = (100, 1000);

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        gen_sparse_regression(self.n, self.d, self.r_star, self.noise_std, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub alpha: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourSpec {
    pub window: [f64; 2],
    pub resolution: usize,
    /// w̃(0) = α·direction.
    pub direction: [f64; 2],
    pub panels: Vec<PanelSpec>,
}

impl Default for ContourSpec {
    fn default() -> Self {
        let p = |alpha, s| PanelSpec { alpha, s };
        Self {
            window: [-3.0, 3.0],
            resolution: 201,
            direction: [0.6, 0.8],
            panels: vec![
                p(2.0, 0.0),
                p(2.0, 0.2),
                p(2.0, 0.8),
                p(0.01, 0.1),
                p(1.0, 0.1),
                p(2.5, 0.1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub family: Family,
    pub alpha_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    /// Dataset seeds; one replicate per entry. Empty means `[dataset.seed]`.
    pub replicates: Vec<u64>,
    pub seed: u64,
    pub flow: FlowOptions,
    pub solver_tol: f64,
    /// Flow-vs-solver relative distance accepted by `compare`.
    pub compare_tol: f64,
    pub via: Via,
    pub rho: f64,
    pub m: usize,
    pub contour: ContourSpec,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Sweep,
            dataset: DatasetSpec::default(),
            family: Family::Diagonal,
            alpha_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            s_grid: vec![0.0, 0.5, 0.9, 0.99],
            replicates: Vec::new(),
            seed: 0,
            flow: FlowOptions {
                record_stride: 1000,
                ..FlowOptions::default()
            },
            solver_tol: 1e-10,
            compare_tol: 1e-2,
            via: Via::Flow,
            rho: 0.5,
            m: 3,
            contour: ContourSpec::default(),
            out: PathBuf::from("out"),
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.s_grid.is_empty() {
            return param("alpha_grid and s_grid must be nonempty");
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(**a > 0.0)) {
            return param(format!("alpha entries must be positive, got {a}"));
        }
        if let Some(s) = self.s_grid.iter().find(|s| !(s.abs() < 1.0)) {
            return param(format!("shape entries must satisfy |s| < 1, got {s}"));
        }
        if !(self.solver_tol > 0.0) || !(self.compare_tol > 0.0) {
            return param("solver_tol and compare_tol must be positive");
        }
        if self.m == 0 {
            return param("m must be positive");
        }
        if self.contour.resolution < 2 || !(self.contour.window[1] > self.contour.window[0]) {
            return param("contour window must be increasing with resolution ≥ 2");
        }
        self.flow.validate()
    }

    /// Switches the dataset to N = 100, d = 1000.
    pub fn paper_scale(&mut self) {
        (self.dataset.n, self.dataset.d) = DatasetSpec::PAPER_SCALE;
    }

    pub fn replicate_seeds(&self) -> Vec<u64> {
        if self.replicates.is_empty() {
            vec![self.dataset.seed]
        } else {
            self.replicates.clone()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j.max(1));
        }
        b.build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))
    }
}

/// SplitMix64 finalizer over (seed, α-index, s-index).
pub fn cell_seed(seed: u64, alpha_index: usize, s_index: usize) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ alpha_index as u64) ^ s_index as u64)
}

pub fn random_unit_vector(d: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Initialization for a grid cell together with the regularizer its flow
/// limit minimizes (`L2` stands for the minimum-norm limit of `FcMulti`).
#[derive(Debug, Clone, PartialEq)]
pub struct CellInit {
    pub params: Params,
    pub spec: RegularizerSpec,
}

pub fn build_init(
    family: Family,
    alpha: f64,
    s: f64,
    d: usize,
    m: usize,
    rho: f64,
    seed: u64,
) -> Result<CellInit> {
    let oriented = |u: &DVector<f64>| InitShapeScale {
        alpha,
        shape: s,
        orientation: Some(u.as_slice().to_vec()),
    };
    let radial = |params: &Params| -> Result<RegularizerSpec> {
        let delta = shape_scale_algebra(alpha, s)?.delta;
        Ok(RegularizerSpec::RadialQ {
            delta,
            wtilde0: params.predictor(),
        })
    };
    match family {
        Family::Diagonal => {
            let built = init_from_shape_scale(
                &InitShapeScale {
                    alpha,
                    shape: s,
                    orientation: None,
                },
                InitFamily::Diagonal { d },
            )?;
            let Params::Diagonal(p) = &built.params else {
                unreachable!()
            };
            let spec = RegularizerSpec::DiagonalQ { k: k_from_init(p) };
            Ok(CellInit {
                params: built.params,
                spec,
            })
        }
        Family::FcSingle | Family::Leaky => {
            if s < 0.0 {
                return Err(Error::OutOfScope(format!(
                    "single-neuron bias requires delta >= 0 (shape s >= 0), got s = {s}"
                )));
            }
            let kind = if family == Family::Leaky {
                if !(rho > 0.0) {
                    return Err(Error::OutOfScope(format!(
                        "leaky-ReLU bias requires rho > 0, got {rho}"
                    )));
                }
                InitFamily::Leaky { rho }
            } else {
                InitFamily::FcSingle
            };
            let built = init_from_shape_scale(&oriented(&random_unit_vector(d, seed)), kind)?;
            let spec = radial(&built.params)?;
            Ok(CellInit {
                params: built.params,
                spec,
            })
        }
        Family::FcBalanced => {
            if s != 0.0 {
                return Err(Error::OutOfScope(format!(
                    "strictly balanced builds have shape 0, got s = {s}"
                )));
            }
            let a = DVector::from_element(m, (alpha / m as f64).sqrt());
            let params = Params::Fc(balanced_multi_init(&a, &random_unit_vector(d, seed))?);
            let spec = RegularizerSpec::RadialQ {
                delta: 0.0,
                wtilde0: params.predictor(),
            };
            Ok(CellInit { params, spec })
        }
        Family::FcMulti => {
            let (small, large) = shape_scale_magnitudes(alpha, s);
            let mut w = DMatrix::zeros(d, m);
            for j in 0..m {
                let u = random_unit_vector(d, cell_seed(seed, j, usize::MAX));
                w.set_column(j, &(u * small));
            }
            Ok(CellInit {
                params: Params::Fc(FcParams {
                    a: DVector::from_element(m, large),
                    w,
                }),
                spec: RegularizerSpec::L2,
            })
        }
    }
}

/// Solves `argmin Q s.t. Xᵀw = y` for the regularizers produced by
/// [`build_init`].
pub fn solve_spec(spec: &RegularizerSpec, ds: &Dataset, tol: f64) -> Result<KktReport> {
    match spec {
        RegularizerSpec::DiagonalQ { k } => solve_diagonal(ds, k, tol),
        RegularizerSpec::RadialQ { delta, wtilde0 } => solve_radial(ds, *delta, wtilde0, tol),
        RegularizerSpec::L2 => {
            let w = min_l2(ds)?;
            let mut rep = kkt_residuals(spec, &w, ds)?;
            rep.converged = rep.stationarity_residual <= tol.max(1e-12 * w.norm())
                && rep.feasibility_residual <= tol;
            Ok(rep)
        }
        other => param(format!("no dual solver for {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub shape: f64,
    pub seed: u64,
    pub pop_error: f64,
    pub train_residual: f64,
    pub converged: bool,
    #[serde(skip)]
    pub predictor: DVector<f64>,
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if !matches!(cfg.family, Family::Diagonal | Family::FcSingle) {
        return param("sweeps support the diagonal and fc_single families");
    }
    let seeds = cfg.replicate_seeds();
    let datasets: Vec<Dataset> = seeds
        .iter()
        .map(|s| cfg.dataset.generate(*s))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for ia in 0..cfg.alpha_grid.len() {
        for is in 0..cfg.s_grid.len() {
            for r in 0..seeds.len() {
                jobs.push((ia, is, r));
            }
        }
    }
    let run = |&(ia, is, r): &(usize, usize, usize)| -> Result<SweepCell> {
        let (alpha, s) = (cfg.alpha_grid[ia], cfg.s_grid[is]);
        let ds = &datasets[r];
        let init = build_init(
            cfg.family,
            alpha,
            s,
            ds.dim(),
            cfg.m,
            cfg.rho,
            cell_seed(cfg.seed, ia, is),
        )?;
        let (w, converged) = match cfg.via {
            Via::Flow => {
                let traj = integrate(&init.params, ds, &cfg.flow)?;
                (traj.terminal_predictor().clone(), traj.converged)
            }
            Via::Solver => {
                let rep = solve_spec(&init.spec, ds, cfg.solver_tol)?;
                (rep.w, rep.converged)
            }
        };
        Ok(SweepCell {
            alpha,
            shape: s,
            seed: seeds[r],
            pop_error: population_error(&w, ds)?,
            train_residual: ds.feasibility(&w),
            converged,
            predictor: w,
        })
    };
    cfg.pool()?.install(|| jobs.par_iter().map(run).collect())
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{CSV_HEADER}\nalpha,s,seed,pop_error,train_residual,converged\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.alpha, c.shape, c.seed, c.pop_error, c.train_residual, c.converged
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub w1: f64,
    pub w2: f64,
    pub q_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourPanel {
    pub alpha: f64,
    pub s: f64,
    pub delta: f64,
    pub wtilde0: [f64; 2],
    pub window: [f64; 2],
    pub resolution: usize,
    /// Sampled minimum of the grid.
    pub grid_min: GridPoint,
    /// Grid point closest to w̃(0).
    pub nearest_to_wtilde0: GridPoint,
    #[serde(skip)]
    pub axis: Vec<f64>,
    /// values[i][j] = q(axis[i], axis[j]).
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

impl ContourPanel {
    pub fn min_at_init(&self) -> bool {
        self.grid_min.w1 == self.nearest_to_wtilde0.w1
            && self.grid_min.w2 == self.nearest_to_wtilde0.w2
    }

    pub fn stem(&self) -> String {
        format!("contour_alpha{}_s{}", self.alpha, self.s)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\nw1,w2,q_value\n");
        for (i, a) in self.axis.iter().enumerate() {
            for (j, b) in self.axis.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.values[i][j]);
            }
        }
        out
    }
}

pub fn contour_panel(spec: &ContourSpec, panel: PanelSpec) -> Result<ContourPanel> {
    let delta = shape_scale_algebra(panel.alpha, panel.s)?.delta;
    if delta < 0.0 {
        return Err(Error::OutOfScope(format!(
            "contour panels need s >= 0, got {}",
            panel.s
        )));
    }
    let w0 = [
        panel.alpha * spec.direction[0],
        panel.alpha * spec.direction[1],
    ];
    let q = RegularizerSpec::RadialQ {
        delta,
        wtilde0: DVector::from_column_slice(&w0),
    };
    let [lo, hi] = spec.window;
    let n = spec.resolution;
    let axis: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let mut values = vec![vec![0.0; n]; n];
    let mut best = (0, 0);
    for i in 0..n {
        for j in 0..n {
            let w = DVector::from_column_slice(&[axis[i], axis[j]]);
            values[i][j] = q_eval(&q, &w)?.0;
            if values[i][j] < values[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    let nearest = |v: f64| {
        (0..n)
            .min_by(|&a, &b| (axis[a] - v).abs().total_cmp(&(axis[b] - v).abs()))
            .unwrap()
    };
    let (ni, nj) = (nearest(w0[0]), nearest(w0[1]));
    let point = |i: usize, j: usize| GridPoint {
        w1: axis[i],
        w2: axis[j],
        q_value: values[i][j],
    };
    Ok(ContourPanel {
        alpha: panel.alpha,
        s: panel.s,
        delta,
        wtilde0: w0,
        window: spec.window,
        resolution: n,
        grid_min: point(best.0, best.1),
        nearest_to_wtilde0: point(ni, nj),
        axis,
        values,
    })
}

pub fn run_contour(cfg: &ExperimentConfig) -> Result<Vec<ContourPanel>> {
    cfg.validate()?;
    let spec = &cfg.contour;
    cfg.pool()?.install(|| {
        spec.panels
            .par_iter()
            .map(|p| contour_panel(spec, *p))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareCell {
    pub family: Family,
    pub alpha: f64,
    pub s: f64,
    #[serde(with = "crate::serde_util::vector")]
    pub flow_predictor: DVector<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub solver_predictor: DVector<f64>,
    pub relative_distance: f64,
    pub flow_converged: bool,
    /// KKT residuals of the flow limit under the predicted regularizer.
    pub flow_kkt: KktReport,
    pub solver_kkt: KktReport,
    pub conserved_drift_max: f64,
    pub conserved_drift_relative: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
    pub passed: bool,
}

pub fn compare_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    alpha: f64,
    s: f64,
    seed: u64,
) -> Result<CompareCell> {
    let init = build_init(cfg.family, alpha, s, ds.dim(), cfg.m, cfg.rho, seed)?;
    let traj = integrate(&init.params, ds, &cfg.flow)?;
    compare_from_trajectory(cfg, ds, &init, &traj, alpha, s)
}

pub fn compare_from_trajectory(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    init: &CellInit,
    traj: &Trajectory,
    alpha: f64,
    s: f64,
) -> Result<CompareCell> {
    let flow_w = traj.terminal_predictor().clone();
    let (flow_kkt, solver_kkt) = match (&traj.terminal_params, &init.params) {
        (Params::Leaky(end), Params::Leaky(start)) => {
            let flow_kkt = leaky_kkt_check(end, start, ds, cfg.solver_tol)?;
            let c = subgradient(&ds.x.tr_mul(&end.w), end.rho);
            let warped = ds.with_scaled_samples(&c);
            (flow_kkt, solve_spec(&init.spec, &warped, cfg.solver_tol)?)
        }
        _ => (
            kkt_residuals(&init.spec, &flow_w, ds)?,
            solve_spec(&init.spec, ds, cfg.solver_tol)?,
        ),
    };
    let rel = (&flow_w - &solver_kkt.w).norm() / solver_kkt.w.norm().max(f64::MIN_POSITIVE);
    let drift = if traj.times.len() >= 2 {
        drift_report(traj)?
    } else {
        crate::flow::DriftReport {
            labels: traj.conserved_labels.clone(),
            initial: traj.conserved_initial.clone(),
            max_drift: vec![0.0; traj.conserved_initial.len()],
        }
    };
    let passed = traj.converged && solver_kkt.converged && rel <= cfg.compare_tol;
    Ok(CompareCell {
        family: cfg.family,
        alpha,
        s,
        flow_predictor: flow_w,
        solver_predictor: solver_kkt.w.clone(),
        relative_distance: rel,
        flow_converged: traj.converged,
        flow_kkt,
        solver_kkt,
        conserved_drift_max: drift.max_abs(),
        conserved_drift_relative: drift.max_relative(),
        passed,
    })
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let ds = cfg.dataset.generate(cfg.dataset.seed)?;
    let mut jobs = Vec::new();
    for ia in 0..cfg.alpha_grid.len() {
        for is in 0..cfg.s_grid.len() {
            jobs.push((ia, is));
        }
    }
    let cells: Vec<CompareCell> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(ia, is)| {
                compare_cell(
                    cfg,
                    &ds,
                    cfg.alpha_grid[ia],
                    cfg.s_grid[is],
                    cell_seed(cfg.seed, ia, is),
                )
            })
            .collect::<Result<_>>()
    })?;
    let passed = cells.iter().all(|c| c.passed);
    Ok(CompareReport { cells, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub defect_unwarped: f64,
    pub defect_warped: f64,
    pub ghat_monotone: bool,
    pub nu_integral_tail_ratio: Option<f64>,
    pub passed: bool,
}

/// Largest warped defect over `count` random points for each δ in `deltas`.
pub fn max_warped_defect(deltas: &[f64], count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &delta in deltas {
        for _ in 0..count {
            let d = rng.random_range(2..=4);
            let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let defect =
                hessian_map_defect(|v| warped_tensor_fc(v, delta), &w, default_fd_step(&w))?;
            worst = worst.max(defect);
        }
    }
    Ok(worst)
}

/// ĝ strictly increasing on a log grid over [1e−4, 1e4] for each δ.
pub fn g_hat_monotone(deltas: &[f64]) -> Result<bool> {
    for &delta in deltas {
        let mut prev = 0.0;
        for i in 0..=160 {
            let x = 10f64.powf(-4.0 + 0.05 * i as f64);
            let g = g_hat(x, delta)?;
            if g <= prev {
                return Ok(false);
            }
            prev = g;
        }
    }
    Ok(true)
}

pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let w = DVector::from_column_slice(&[1.0, 1.0]);
    let defect_unwarped =
        hessian_map_defect(|v| metric_tensor_fc(v, 0.0), &w, default_fd_step(&w))?;
    let defect_warped = max_warped_defect(&[0.0, 1.0], 20, cfg.seed)?;
    let ghat_monotone = g_hat_monotone(&[0.0, 0.1, 10.0])?;

    let ds = gen_sparse_regression(3, 8, 2, 0.1, cfg.dataset.seed)?;
    let (alpha, s) = (cfg.alpha_grid[0], cfg.s_grid[0].max(0.0));
    let init = build_init(Family::FcSingle, alpha, s, ds.dim(), 1, 1.0, cfg.seed)?;
    let opts = FlowOptions {
        record_stride: 1,
        ..cfg.flow
    };
    let traj = integrate(&init.params, &ds, &opts)?;
    let delta = shape_scale_algebra(alpha, s)?.delta;
    let ratio = warp_integral(&traj, delta)?.nu_tail_ratio;

    let passed = (defect_unwarped - 1.0 / (4.0 * 2f64.sqrt())).abs() <= 1e-4
        && defect_warped <= 1e-6
        && ghat_monotone
        && ratio.is_some_and(|r| r < 0.9);
    Ok(VerifyReport {
        defect_unwarped,
        defect_warped,
        ghat_monotone,
        nu_integral_tail_ratio: ratio,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub converged: bool,
    pub steps: usize,
    pub final_time: f64,
    pub feasibility: f64,
    pub conserved_drift_max: f64,
    pub terminal_params: Params,
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<(Trajectory, Dataset)> {
    cfg.validate()?;
    let ds = cfg.dataset.generate(cfg.dataset.seed)?;
    let init = build_init(
        cfg.family,
        cfg.alpha_grid[0],
        cfg.s_grid[0],
        ds.dim(),
        cfg.m,
        cfg.rho,
        cell_seed(cfg.seed, 0, 0),
    )?;
    Ok((integrate(&init.params, &ds, &cfg.flow)?, ds))
}

pub fn run_solve(cfg: &ExperimentConfig) -> Result<KktReport> {
    cfg.validate()?;
    if cfg.family == Family::Leaky {
        return param("the leaky problem is solved through `compare` (needs a flow sign pattern)");
    }
    let ds = cfg.dataset.generate(cfg.dataset.seed)?;
    let init = build_init(
        cfg.family,
        cfg.alpha_grid[0],
        cfg.s_grid[0],
        ds.dim(),
        cfg.m,
        cfg.rho,
        cell_seed(cfg.seed, 0, 0),
    )?;
    solve_spec(&init.spec, &ds, cfg.solver_tol)
}

/// Runs `cfg.kind`, writes its outputs below `cfg.out`, and returns whether
/// every cell or suite met its tolerance.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<bool> {
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let json = |name: &str, v: &dyn erased::Json| -> Result<()> {
        fs::write(out.join(name), v.to_json()?)?;
        Ok(())
    };
    match cfg.kind {
        ExperimentKind::Sweep => {
            let cells = run_sweep(cfg)?;
            fs::write(out.join("sweep.csv"), sweep_csv(&cells))?;
            Ok(cells.iter().all(|c| c.converged))
        }
        ExperimentKind::Contour => {
            let panels = run_contour(cfg)?;
            for p in &panels {
                fs::write(out.join(format!("{}.csv", p.stem())), p.csv())?;
                json(&format!("{}.json", p.stem()), p)?;
            }
            Ok(panels.iter().all(ContourPanel::min_at_init))
        }
        ExperimentKind::Compare => {
            let rep = run_compare(cfg)?;
            json("compare.json", &rep)?;
            Ok(rep.passed)
        }
        ExperimentKind::Verify => {
            let rep = run_verify(cfg)?;
            json("verify.json", &rep)?;
            Ok(rep.passed)
        }
        ExperimentKind::Simulate => {
            let (traj, ds) = run_simulate(cfg)?;
            traj.write_csv(&out.join("trajectory.csv"), ds.dim() <= 50)?;
            ds.write_csv(&out.join("dataset"))?;
            let summary = SimulateSummary {
                converged: traj.converged,
                steps: traj.steps,
                final_time: *traj.times.last().unwrap(),
                feasibility: traj.terminal_feasibility(),
                conserved_drift_max: traj.conserved_max_drift.iter().fold(0.0, |a, b| a.max(*b)),
                terminal_params: traj.terminal_params.clone(),
            };
            json("simulate.json", &summary)?;
            Ok(traj.converged)
        }
        ExperimentKind::Solve => {
            let rep = run_solve(cfg)?;
            json("kkt_report.json", &rep)?;
            Ok(rep.converged)
        }
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> crate::Result<String>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> crate::Result<String> {
            Ok(serde_json::to_string_pretty(self)?)
        }
    }
}
