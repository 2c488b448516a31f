//! Gradient flow θ̇ = −∇L(θ) integrated with the Dormand–Prince 5(4) pair.
//!
//! Step control is proportional-integral with growth capped at 5× per step.
//! Integration stops once ‖f − y‖/max(1, ‖y‖) drops below
//! `stop_feasibility`; reaching `t_max` or `max_steps` first yields a
//! trajectory with `converged = false`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param, Error, Result};
use crate::models::{Layout, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub stop_feasibility: f64,
    pub t_max: f64,
    /// Record every `record_stride`-th accepted step (plus first and last).
    pub record_stride: usize,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            stop_feasibility: 1e-8,
            t_max: 1e9,
            record_stride: 1,
            max_steps: 20_000_000,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.stop_feasibility > 0.0) {
            return param("tolerances must be positive");
        }
        if !(self.t_max > 0.0) {
            return param("t_max must be positive");
        }
        if self.record_stride == 0 || self.max_steps == 0 {
            return param("record_stride and max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub predictor_snapshots: Vec<DVector<f64>>,
    pub loss_values: Vec<f64>,
    pub feasibility: Vec<f64>,
    /// ‖r‖ with rₙ = (yₙ − fₙ)/N.
    pub residual_norms: Vec<f64>,
    /// Max |Q(t) − Q(0)| over all conserved quantities, per snapshot.
    pub conserved_drift: Vec<f64>,
    pub conserved_labels: Vec<String>,
    pub conserved_initial: Vec<f64>,
    /// Per-quantity running max of |Q(t) − Q(0)| over snapshots.
    pub conserved_max_drift: Vec<f64>,
    pub terminal_params: Params,
    pub converged: bool,
    pub steps: usize,
    pub rejected: usize,
}

impl Trajectory {
    pub fn terminal_predictor(&self) -> &DVector<f64> {
        self.predictor_snapshots
            .last()
            .expect("trajectory is never empty")
    }

    pub fn terminal_feasibility(&self) -> f64 {
        *self.feasibility.last().expect("trajectory is never empty")
    }

    /// Writes `t,loss,feas_residual,drift_max[,wtilde_0,...]`.
    pub fn write_csv(&self, path: &Path, with_predictor: bool) -> Result<()> {
        let d = self.terminal_predictor().len();
        let mut out = String::from("# ibflow-csv v1\nt,loss,feas_residual,drift_max");
        if with_predictor {
            for i in 0..d {
                let _ = write!(out, ",wtilde_{i}");
            }
        }
        out.push('\n');
        for k in 0..self.times.len() {
            let _ = write!(
                out,
                "{},{},{},{}",
                self.times[k], self.loss_values[k], self.feasibility[k], self.conserved_drift[k]
            );
            if with_predictor {
                for v in self.predictor_snapshots[k].iter() {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub labels: Vec<String>,
    pub initial: Vec<f64>,
    pub max_drift: Vec<f64>,
}

impl DriftReport {
    pub fn max_abs(&self) -> f64 {
        self.max_drift.iter().fold(0.0, |a, b| a.max(*b))
    }

    /// max over quantities of drift / (1 + |initial|).
    pub fn max_relative(&self) -> f64 {
        self.max_drift
            .iter()
            .zip(&self.initial)
            .fold(0.0, |a, (d, q)| a.max(d / (1.0 + q.abs())))
    }
}

pub fn drift_report(traj: &Trajectory) -> Result<DriftReport> {
    if traj.times.len() < 2 {
        return param("drift report needs at least two snapshots");
    }
    Ok(DriftReport {
        labels: traj.conserved_labels.clone(),
        initial: traj.conserved_initial.clone(),
        max_drift: traj.conserved_max_drift.clone(),
    })
}

pub fn integrate(params0: &Params, ds: &Dataset, opts: &FlowOptions) -> Result<Trajectory> {
    integrate_warped(params0, ds, opts, |_| 1.0)
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const GROW_MAX: f64 = 5.0;
const SHRINK_MIN: f64 = 0.2;
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - 0.75 * BETA;
/// h·ρ cap, inside the real stability interval (−3.3, 0] of the pair.
const STABLE_STEP: f64 = 2.5;

struct Field<'a, G> {
    layout: Layout,
    ds: &'a Dataset,
    warp: G,
}

impl<G: Fn(&DVector<f64>) -> f64> Field<'_, G> {
    /// Evaluates the field into `out`; returns the loss at `s`.
    fn eval(&self, s: &[f64], out: &mut [f64]) -> f64 {
        let loss = self.layout.flow_field(s, self.ds, out);
        let g = (self.warp)(&self.layout.predictor(s));
        if g != 1.0 {
            out.iter_mut().for_each(|v| *v *= g);
        }
        loss
    }
}

/// Integrates the time-rescaled flow θ̇ = −g(w̃)·∇L(θ); `g` must be positive.
pub fn integrate_warped<G>(
    params0: &Params,
    ds: &Dataset,
    opts: &FlowOptions,
    warp: G,
) -> Result<Trajectory>
where
    G: Fn(&DVector<f64>) -> f64,
{
    opts.validate()?;
    params0.validate()?;
    if params0.dim() != ds.dim() {
        return param(format!(
            "params have d = {}, dataset has d = {}",
            params0.dim(),
            ds.dim()
        ));
    }
    let layout = params0.layout();
    let field = Field { layout, ds, warp };
    let n = ds.n_samples() as f64;
    let ynorm = ds.y.norm().max(1.0);
    let feas_of = |loss: f64| (2.0 * n * loss).sqrt() / ynorm;

    let mut y = params0.to_state();
    let dim = y.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    let mut loss = field.eval(&y, &mut k[0]);
    if !loss.is_finite() || k[0].iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFailure { t: 0.0 });
    }

    let conserved0 = layout.conserved(&y).entries();
    let labels: Vec<String> = conserved0.iter().map(|(l, _)| l.clone()).collect();
    let initial: Vec<f64> = conserved0.iter().map(|(_, v)| *v).collect();
    let mut traj = Trajectory {
        times: Vec::new(),
        predictor_snapshots: Vec::new(),
        loss_values: Vec::new(),
        feasibility: Vec::new(),
        residual_norms: Vec::new(),
        conserved_drift: Vec::new(),
        conserved_labels: labels,
        conserved_max_drift: vec![0.0; initial.len()],
        conserved_initial: initial,
        terminal_params: params0.clone(),
        converged: false,
        steps: 0,
        rejected: 0,
    };
    let record = |traj: &mut Trajectory, t: f64, y: &[f64], loss: f64| {
        let now = layout.conserved(y).values();
        let mut worst: f64 = 0.0;
        for (i, v) in now.iter().enumerate() {
            let dev = (v - traj.conserved_initial[i]).abs();
            worst = worst.max(dev);
            traj.conserved_max_drift[i] = traj.conserved_max_drift[i].max(dev);
        }
        traj.times.push(t);
        traj.predictor_snapshots.push(layout.predictor(y));
        traj.loss_values.push(loss);
        traj.feasibility.push(feas_of(loss));
        traj.residual_norms.push((2.0 * loss / n).sqrt());
        traj.conserved_drift.push(worst);
    };

    let mut t = 0.0;
    record(&mut traj, t, &y, loss);
    if feas_of(loss) <= opts.stop_feasibility {
        traj.converged = true;
        return Ok(traj);
    }

    let scale = |a: f64, b: f64| opts.abs_tol + opts.rel_tol * a.abs().max(b.abs());
    let mut h = initial_step(&field, &y, &k[0], opts, &scale);
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut ynew = vec![0.0; dim];
    let mut stage = vec![0.0; dim];
    let mut y6 = vec![0.0; dim];
    let mut since_record = 0usize;

    loop {
        if traj.steps >= opts.max_steps || t >= opts.t_max {
            break;
        }
        if t + h > opts.t_max {
            h = opts.t_max - t;
        }
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * k[j][i];
                }
                stage[i] = y[i] + h * acc;
            }
            let l = field.eval(&stage, &mut k[s]);
            if s == 5 {
                y6.copy_from_slice(&stage);
            }
            if s == 6 {
                ynew.copy_from_slice(&stage);
                loss = l;
            }
        }
        let mut err2 = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for j in 0..7 {
                e += E[j] * k[j][i];
            }
            let r = h * e / scale(y[i], ynew[i]);
            err2 += r * r;
        }
        let err = (err2 / dim as f64).sqrt();
        if !err.is_finite() {
            h *= SHRINK_MIN;
            traj.rejected += 1;
            last_rejected = true;
            if t + h == t {
                return Err(Error::IntegrationFailure { t });
            }
            continue;
        }
        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&ynew);
            k.swap(0, 6);
            traj.steps += 1;
            since_record += 1;
            let feas = feas_of(loss);
            let done = feas <= opts.stop_feasibility;
            if done || since_record >= opts.record_stride {
                record(&mut traj, t, &y, loss);
                since_record = 0;
            }
            if done {
                traj.converged = true;
                break;
            }
            let mut fac = err.max(1e-10).powf(-EXPO) * err_old.powf(BETA) * SAFETY;
            fac = fac.clamp(SHRINK_MIN, GROW_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            // Stages 6 and 7 share c = 1; their difference quotient estimates
            // the spectral radius of the Jacobian.
            let (mut dk, mut dy) = (0.0, 0.0);
            for i in 0..dim {
                dk += (k[0][i] - k[5][i]).powi(2);
                dy += (y[i] - y6[i]).powi(2);
            }
            if dy > 0.0 {
                let rho = (dk / dy).sqrt();
                if rho > 0.0 {
                    h = h.min(STABLE_STEP / rho);
                }
            }
            err_old = err.max(1e-4);
            last_rejected = false;
        } else {
            let fac = (SAFETY * err.powf(-EXPO)).clamp(SHRINK_MIN, 1.0);
            h *= fac;
            traj.rejected += 1;
            last_rejected = true;
            if t + h == t {
                return Err(Error::IntegrationFailure { t });
            }
        }
    }
    if since_record > 0 {
        record(&mut traj, t, &y, loss);
    }
    traj.terminal_params = layout.params(&y);
    Ok(traj)
}

fn initial_step<G, S>(
    field: &Field<'_, G>,
    y: &[f64],
    f0: &[f64],
    opts: &FlowOptions,
    scale: &S,
) -> f64
where
    G: Fn(&DVector<f64>) -> f64,
    S: Fn(f64, f64) -> f64,
{
    let dim = y.len() as f64;
    let rms = |v: &mut dyn Iterator<Item = f64>| (v.map(|x| x * x).sum::<f64>() / dim).sqrt();
    let d0 = rms(&mut y.iter().map(|v| v / scale(*v, *v)));
    let d1 = rms(&mut y.iter().zip(f0).map(|(v, f)| f / scale(*v, *v)));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(opts.t_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    field.eval(&y1, &mut f1);
    let d2 = rms(&mut y
        .iter()
        .zip(f0.iter().zip(&f1))
        .map(|(v, (a, b))| (b - a) / scale(*v, *v)))
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let h = (100.0 * h0).min(h1);
    if h.is_finite() && h > 0.0 {
        h.min(opts.t_max)
    } else {
        1e-6
    }
}
