//! Optimizers for every control variant and the calibration dispatcher.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bayes::{self, LdbConfig, LdbResult};
use crate::error::{Error, Result};
use crate::mapping::{
    self, background_from_prior, Activation, ControlVector, LayerGrad, MlpControl,
    RegressionControl, SigmoidScaler,
};
use crate::model::{Bounds, ParameterFields, N_PARAMS};
use crate::objective;
use crate::setup::Setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    CostTol,
    GradTol,
    /// Coordinate-search step fell below its floor.
    StepTol,
    /// No acceptable step; the best iterate is returned.
    LineSearchFailure,
    /// A non-finite cost stopped training; the last finite control is kept.
    NonFiniteCost,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::MaxIter => "MAX_ITER",
            StopReason::CostTol => "COST_TOL",
            StopReason::GradTol => "GRAD_TOL",
            StopReason::StepTol => "STEP_TOL",
            StopReason::LineSearchFailure => "LINE_SEARCH_FAILURE",
            StopReason::NonFiniteCost => "NON_FINITE_COST",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    /// Cost at the start point and after each iteration.
    pub j_trajectory: Vec<f64>,
    /// Gradient infinity-norm aligned with `j_trajectory`; NaN for
    /// derivative-free search.
    pub grad_norms: Vec<f64>,
    pub stop_reason: StopReason,
    /// Lowest cost seen; differs from the last trajectory entry only for Adam.
    pub best_j: f64,
    pub wall_time: Duration,
}

impl OptimizeReport {
    fn new() -> Self {
        Self {
            iterations: 0,
            j_trajectory: Vec::new(),
            grad_norms: Vec::new(),
            stop_reason: StopReason::MaxIter,
            best_j: f64::INFINITY,
            wall_time: Duration::ZERO,
        }
    }

    fn push(&mut self, j: f64, gnorm: f64) {
        self.j_trajectory.push(j);
        self.grad_norms.push(gnorm);
        if j < self.best_j {
            self.best_j = j;
        }
    }

    pub fn final_j(&self) -> f64 {
        *self.j_trajectory.last().unwrap_or(&f64::NAN)
    }

    pub fn final_grad_inf_norm(&self) -> f64 {
        *self.grad_norms.last().unwrap_or(&f64::NAN)
    }

    /// `iter,J,grad_inf_norm`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,J,grad_inf_norm\n");
        for (i, (j, g)) in self.j_trajectory.iter().zip(&self.grad_norms).enumerate() {
            s.push_str(&format!(
                "{i},{},{}\n",
                crate::io::fmt_f64(*j),
                crate::io::fmt_f64(*g)
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// L-BFGS-B iteration cap.
    pub max_iter: usize,
    pub cost_rel_tol: f64,
    pub grad_tol: f64,
    pub memory: usize,
    /// Coordinate-search sweeps.
    pub sbs_max_iter: usize,
    /// Smallest coordinate-search step as a fraction of the bound span.
    pub sbs_min_step: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub annr_max_iter: usize,
    pub mlp_hidden: Vec<usize>,
    /// Network initialization seed; set from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            cost_rel_tol: 1e-6,
            grad_tol: 1e-6,
            memory: 10,
            sbs_max_iter: 200,
            sbs_min_step: 1e-3,
            adam_lr: 0.003,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            annr_max_iter: 500,
            mlp_hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("cost_rel_tol", self.cost_rel_tol),
            ("grad_tol", self.grad_tol),
            ("sbs_min_step", self.sbs_min_step),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.memory == 0 {
            return Err(Error::Config("memory must be >= 1".into()));
        }
        if !(self.adam_lr >= 0.0) {
            return Err(Error::Config(format!(
                "adam_lr must be >= 0, got {}",
                self.adam_lr
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bounded cyclic coordinate search with step halving.
pub fn sbs_minimize<F>(
    mut cost: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &OptimizerConfig,
) -> Result<(Vec<f64>, OptimizeReport)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let t0 = Instant::now();
    let n = x0.len();
    let mut x: Vec<f64> = (0..n).map(|k| x0[k].clamp(lower[k], upper[k])).collect();
    let mut fx = cost(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    let mut report = OptimizeReport::new();
    report.push(fx, f64::NAN);
    let mut frac = 0.25;
    loop {
        if report.iterations >= cfg.sbs_max_iter {
            report.stop_reason = StopReason::MaxIter;
            break;
        }
        if frac < cfg.sbs_min_step {
            report.stop_reason = StopReason::StepTol;
            break;
        }
        let mut improved = false;
        for k in 0..n {
            let step = frac * (upper[k] - lower[k]);
            let base = x[k];
            let mut best = (fx, base);
            for cand in [base + step, base - step] {
                let cand = cand.clamp(lower[k], upper[k]);
                if cand == base {
                    continue;
                }
                x[k] = cand;
                let fc = cost(&x)?;
                if fc < best.0 {
                    best = (fc, cand);
                }
            }
            x[k] = best.1;
            if best.0 < fx {
                fx = best.0;
                improved = true;
            }
        }
        if !improved {
            frac *= 0.5;
        }
        report.iterations += 1;
        report.push(fx, f64::NAN);
    }
    report.wall_time = t0.elapsed();
    Ok((x, report))
}

struct LinePoint {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, or the
/// midpoint when the fit is unusable; kept away from the interval ends.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mid = 0.5 * (a + b);
    if ![fa, da, fb, db].iter().all(|v| v.is_finite()) {
        return mid;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

struct LineSearch<'a, F> {
    eval: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    bounds: Option<(&'a [f64], &'a [f64])>,
    f0: f64,
    dphi0: f64,
    evals: usize,
    best: Option<LinePoint>,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn phi(&mut self, alpha: f64) -> Result<(f64, f64, usize)> {
        let mut xa: Vec<f64> = self
            .x
            .iter()
            .zip(self.d)
            .map(|(x, d)| x + alpha * d)
            .collect();
        if let Some((l, u)) = self.bounds {
            for (k, v) in xa.iter_mut().enumerate() {
                *v = v.clamp(l[k], u[k]);
            }
        }
        let (f, g) = (self.eval)(&xa)?;
        self.evals += 1;
        let f = if f.is_nan() { f64::INFINITY } else { f };
        let dphi = dot(&g, self.d);
        let armijo = f <= self.f0 + WOLFE_C1 * alpha * self.dphi0;
        if armijo && self.best.as_ref().is_none_or(|b| f < b.f) {
            self.best = Some(LinePoint { alpha, x: xa, f, g });
        }
        Ok((f, dphi, self.evals))
    }

    fn take(&mut self, alpha: f64) -> Option<LinePoint> {
        self.best.take().filter(|b| b.alpha == alpha)
    }

    fn curvature_ok(&self, dphi: f64) -> bool {
        dphi.abs() <= -WOLFE_C2 * self.dphi0
    }

    /// Strong-Wolfe search on `[0, alpha_max]`. A point that only satisfies
    /// sufficient decrease is returned when the curvature condition cannot be
    /// met within the budget or the interval end is reached.
    fn run(mut self, alpha0: f64, alpha_max: f64) -> Result<Option<LinePoint>> {
        let (mut a_prev, mut f_prev, mut d_prev) = (0.0, self.f0, self.dphi0);
        let mut a = alpha0.min(alpha_max);
        let mut first = true;
        while self.evals < MAX_LINE_EVALS {
            let (f, dphi, _) = self.phi(a)?;
            if f > self.f0 + WOLFE_C1 * a * self.dphi0 || (!first && f >= f_prev) {
                return self.zoom((a_prev, f_prev, d_prev), (a, f, dphi));
            }
            if self.curvature_ok(dphi) {
                return Ok(self.take(a));
            }
            if dphi >= 0.0 {
                return self.zoom((a, f, dphi), (a_prev, f_prev, d_prev));
            }
            if a >= alpha_max {
                return Ok(self.take(a));
            }
            (a_prev, f_prev, d_prev) = (a, f, dphi);
            a = (4.0 * a).min(alpha_max);
            first = false;
        }
        Ok(self.best.take())
    }

    fn zoom(
        mut self,
        mut lo: (f64, f64, f64),
        mut hi: (f64, f64, f64),
    ) -> Result<Option<LinePoint>> {
        while self.evals < MAX_LINE_EVALS && (hi.0 - lo.0).abs() > 1e-16 * lo.0.abs().max(1e-300) {
            let a = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
            let (f, dphi, _) = self.phi(a)?;
            if f > self.f0 + WOLFE_C1 * a * self.dphi0 || f >= lo.1 {
                hi = (a, f, dphi);
            } else {
                if self.curvature_ok(dphi) {
                    return Ok(self.take(a));
                }
                if dphi * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (a, f, dphi);
            }
        }
        Ok(self.best.take())
    }
}

/// Limited-memory BFGS with gradient projection onto optional box bounds
/// and a strong-Wolfe line search.
pub fn lbfgsb_minimize<F>(
    mut eval: F,
    rho0: &[f64],
    bounds: Option<(&[f64], &[f64])>,
    cfg: &OptimizerConfig,
) -> Result<(Vec<f64>, OptimizeReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let t0 = Instant::now();
    let n = rho0.len();
    let project = |v: &mut [f64]| {
        if let Some((l, u)) = bounds {
            for (k, x) in v.iter_mut().enumerate() {
                *x = x.clamp(l[k], u[k]);
            }
        }
    };
    let mut x = rho0.to_vec();
    project(&mut x);
    let (mut fx, mut g) = eval(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    // coordinates pinned at a bound with the gradient pushing outward
    let pinned = |x: &[f64], g: &[f64], k: usize| match bounds {
        Some((l, u)) => (x[k] <= l[k] && g[k] > 0.0) || (x[k] >= u[k] && g[k] < 0.0),
        None => false,
    };
    let projected_norm = |x: &[f64], g: &[f64]| {
        (0..n)
            .filter(|&k| !pinned(x, g, k))
            .fold(0.0f64, |m, k| m.max(g[k].abs()))
    };

    let mut report = OptimizeReport::new();
    report.push(fx, projected_norm(&x, &g));
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    loop {
        if report.final_grad_inf_norm() < cfg.grad_tol {
            report.stop_reason = StopReason::GradTol;
            break;
        }
        if report.iterations >= cfg.max_iter {
            report.stop_reason = StopReason::MaxIter;
            break;
        }
        let free: Vec<bool> = (0..n).map(|k| !pinned(&x, &g, k)).collect();
        let gf: Vec<f64> = (0..n).map(|k| if free[k] { g[k] } else { 0.0 }).collect();

        let mut d = two_loop(&gf, &s_hist, &y_hist);
        for k in 0..n {
            if !free[k] {
                d[k] = 0.0;
            }
        }
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            d = gf.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }

        let mut alpha_max = f64::INFINITY;
        if let Some((l, u)) = bounds {
            for k in 0..n {
                if d[k] < 0.0 {
                    alpha_max = alpha_max.min((l[k] - x[k]) / d[k]);
                } else if d[k] > 0.0 {
                    alpha_max = alpha_max.min((u[k] - x[k]) / d[k]);
                }
            }
        }
        let alpha0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };
        let ls = LineSearch {
            eval: &mut eval,
            x: &x,
            d: &d,
            bounds,
            f0: fx,
            dphi0,
            evals: 0,
            best: None,
        };
        let Some(p) = ls.run(alpha0, alpha_max)? else {
            report.stop_reason = StopReason::LineSearchFailure;
            break;
        };

        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let rel = (fx - p.f) / p.f.abs().max(1.0);
        x = p.x;
        fx = p.f;
        g = p.g;
        report.iterations += 1;
        report.push(fx, projected_norm(&x, &g));
        if rel < cfg.cost_rel_tol {
            report.stop_reason = if report.final_grad_inf_norm() < cfg.grad_tol {
                StopReason::GradTol
            } else {
                StopReason::CostTol
            };
            break;
        }
    }
    report.wall_time = t0.elapsed();
    Ok((x, report))
}

/// `-H g` from the stored curvature pairs.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let m = s_hist.len();
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; m];
    for i in (0..m).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alphas[i] = rho * dot(&s_hist[i], &q);
        for (qk, yk) in q.iter_mut().zip(&y_hist[i]) {
            *qk -= alphas[i] * yk;
        }
    }
    if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
        let gamma = dot(s, y) / dot(y, y);
        for v in &mut q {
            *v *= gamma;
        }
    }
    for i in 0..m {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        for (qk, sk) in q.iter_mut().zip(&s_hist[i]) {
            *qk += (alphas[i] - beta) * sk;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Adam with independent moment buffers per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, group_sizes: &[usize]) -> Self {
        Self {
            lr: cfg.adam_lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; group_sizes.len()],
        }
    }

    /// One bias-corrected step on a group.
    pub fn step(&mut self, group: usize, params: &mut [f64], grad: &[f64]) {
        self.t[group] += 1;
        let t = self.t[group];
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[group], &mut self.v[group]);
        for i in 0..params.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn flat_layer_grad(g: &LayerGrad) -> Vec<f64> {
    g.weights.iter().chain(&g.bias).copied().collect()
}

/// Cost and per-layer gradients of the MLP control.
pub fn annr_gradient(setup: &Setup, mlp: &MlpControl) -> Result<(f64, Vec<LayerGrad>)> {
    let params = mapping::apply_mlp(&setup.plan, &setup.descriptors, mlp)?;
    let (j, g) = setup.cost_and_gradient(&params)?;
    let grads = mapping::mlp_backprop(&setup.plan, &setup.descriptors, mlp, &g)?;
    Ok((j, grads))
}

/// Trains the MLP mapping: per iteration a forward pass through the network,
/// forward and adjoint model runs, then a backward sweep that updates each
/// layer with Adam as soon as its gradient is known. Returns the control
/// with the lowest cost seen.
pub fn train_annr(
    setup: &Setup,
    mlp: MlpControl,
    cfg: &OptimizerConfig,
) -> Result<(MlpControl, OptimizeReport)> {
    let t0 = Instant::now();
    let mut mlp = mlp;
    let sizes: Vec<usize> = mlp.layers.iter().map(|l| l.n_params()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut report = OptimizeReport::new();
    let mut best = mlp.clone();
    let mut flat = Vec::new();
    let mut iter = 0;
    loop {
        let tape = mlp.forward_tape(&setup.plan, &setup.descriptors)?;
        let params = mlp.params_from_tape(&setup.plan, &tape);
        let (j, grad) = setup.cost_and_gradient(&params)?;
        if !j.is_finite() {
            report.stop_reason = StopReason::NonFiniteCost;
            break;
        }
        if j < report.best_j {
            best = mlp.clone();
        }
        if iter == cfg.annr_max_iter {
            report.push(j, f64::NAN);
            report.stop_reason = StopReason::MaxIter;
            break;
        }
        let mut delta = mlp.output_delta(&tape, &grad);
        let mut gnorm = 0.0f64;
        for jl in (0..mlp.layers.len()).rev() {
            let g = mlp.layer_gradient(&tape, jl, &delta);
            if jl > 0 {
                delta = mlp.propagate(&tape, jl, &delta);
            }
            let gflat = flat_layer_grad(&g);
            gnorm = gnorm.max(inf_norm(&gflat));
            let layer = &mut mlp.layers[jl];
            flat.clear();
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.bias);
            adam.step(jl, &mut flat, &gflat);
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[..nw]);
            layer.bias.copy_from_slice(&flat[nw..]);
        }
        report.push(j, gnorm);
        iter += 1;
        report.iterations = iter;
    }
    report.wall_time = t0.elapsed();
    Ok((best, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UniformLocal,
    DistributedLocal,
    Ur,
    M2r,
    Bgm2r,
    Annr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::UniformLocal,
        Method::DistributedLocal,
        Method::Ur,
        Method::M2r,
        Method::Bgm2r,
        Method::Annr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::UniformLocal => "uniform_local",
            Method::DistributedLocal => "distributed_local",
            Method::Ur => "ur",
            Method::M2r => "m2r",
            Method::Bgm2r => "bgm2r",
            Method::Annr => "annr",
        }
    }

    /// Local methods fit one gauge at a time.
    pub fn is_local(self) -> bool {
        matches!(self, Method::UniformLocal | Method::DistributedLocal)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub optimizer: OptimizerConfig,
    pub bayes: LdbConfig,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub method: Method,
    pub control: ControlVector,
    pub params: ParameterFields,
    pub report: OptimizeReport,
    /// Uniform first guess for the regional methods.
    pub first_guess: Option<[f64; N_PARAMS]>,
    pub first_guess_report: Option<OptimizeReport>,
    pub ldb: Option<LdbResult>,
}

impl Calibration {
    /// Final `J_obs` of the calibrated parameters.
    pub fn j_obs(&self, setup: &Setup) -> Result<f64> {
        setup.cost(&self.params)
    }
}

/// Calibrates `method` on `setup`. Local methods require exactly one gauge.
pub fn calibrate(method: Method, setup: &Setup, cfg: &CalibrationConfig) -> Result<Calibration> {
    cfg.optimizer.validate()?;
    setup.cost.validate(setup.forcing.n_steps())?;
    if setup.gauges.is_empty() {
        return Err(Error::Config("calibration needs at least one gauge".into()));
    }
    if method.is_local() && setup.gauges.len() != 1 {
        return Err(Error::Config(format!(
            "{method} calibrates one gauge per run, got {}",
            setup.gauges.len()
        )));
    }
    match method {
        Method::UniformLocal | Method::Ur => {
            let (values, report) = calibrate_uniform(setup, &cfg.optimizer)?;
            Ok(Calibration {
                method,
                control: ControlVector::Uniform { values },
                params: setup.uniform_params(values),
                report,
                first_guess: None,
                first_guess_report: None,
                ldb: None,
            })
        }
        Method::DistributedLocal => {
            let (values, fg_report) = calibrate_uniform(setup, &cfg.optimizer)?;
            let start = setup.uniform_params(values);
            let (params, report) = calibrate_distributed(setup, &start, &cfg.optimizer)?;
            Ok(Calibration {
                method,
                control: ControlVector::Distributed {
                    maps: params.maps.clone(),
                },
                params,
                report,
                first_guess: Some(values),
                first_guess_report: Some(fg_report),
                ldb: None,
            })
        }
        Method::M2r => {
            let (values, fg_report) = calibrate_uniform(setup, &cfg.optimizer)?;
            let (ctrl, params, report) = calibrate_multilinear(setup, values, &cfg.optimizer)?;
            Ok(Calibration {
                method,
                control: ControlVector::Multilinear(ctrl),
                params,
                report,
                first_guess: Some(values),
                first_guess_report: Some(fg_report),
                ldb: None,
            })
        }
        Method::Bgm2r => {
            let ldb = bayes::ldb_first_guess(setup, &cfg.bayes)?;
            let values = ldb.estimate.mean;
            let (ctrl, params, report) = calibrate_multilinear(setup, values, &cfg.optimizer)?;
            Ok(Calibration {
                method,
                control: ControlVector::Multilinear(ctrl),
                params,
                report,
                first_guess: Some(values),
                first_guess_report: None,
                ldb: Some(ldb),
            })
        }
        Method::Annr => {
            let mut sizes = vec![setup.descriptors.n_desc()];
            sizes.extend(&cfg.optimizer.mlp_hidden);
            sizes.push(N_PARAMS);
            let mlp = MlpControl::new(&sizes, Activation::Tanh, setup.bounds, cfg.optimizer.seed)?;
            let (mlp, report) = train_annr(setup, mlp, &cfg.optimizer)?;
            let params = mapping::apply_mlp(&setup.plan, &setup.descriptors, &mlp)?;
            Ok(Calibration {
                method,
                control: ControlVector::Mlp(mlp),
                params,
                report,
                first_guess: None,
                first_guess_report: None,
                ldb: None,
            })
        }
    }
}

/// Coordinate search over spatially uniform parameters, from mid-bounds.
pub fn calibrate_uniform(
    setup: &Setup,
    cfg: &OptimizerConfig,
) -> Result<([f64; N_PARAMS], OptimizeReport)> {
    let b = setup.bounds;
    let (x, report) = sbs_minimize(
        |v| setup.cost(&setup.uniform_params([v[0], v[1], v[2], v[3]])),
        &b.midpoint(),
        &b.lower,
        &b.upper,
        cfg,
    )?;
    Ok(([x[0], x[1], x[2], x[3]], report))
}

/// Cell-wise parameter maps by bounded L-BFGS, warm-started from `start`.
/// The search runs on maps rescaled to the unit interval.
pub fn calibrate_distributed(
    setup: &Setup,
    start: &ParameterFields,
    cfg: &OptimizerConfig,
) -> Result<(ParameterFields, OptimizeReport)> {
    let n = setup.n_cells();
    let b = setup.bounds;
    let to_params = |u: &[f64]| {
        let mut p = start.clone();
        for k in 0..N_PARAMS {
            for c in 0..n {
                p.maps[k][c] = b.clamp(k, b.lower[k] + u[k * n + c] * b.span(k));
            }
        }
        p
    };
    let mut u0 = Vec::with_capacity(N_PARAMS * n);
    for k in 0..N_PARAMS {
        u0.extend(start.maps[k].iter().map(|v| (v - b.lower[k]) / b.span(k)));
    }
    let zeros = vec![0.0; u0.len()];
    let ones = vec![1.0; u0.len()];
    let (u, report) = lbfgsb_minimize(
        |u| {
            let (j, g) = setup.cost_and_gradient(&to_params(u))?;
            let mut gu = Vec::with_capacity(u.len());
            for k in 0..N_PARAMS {
                gu.extend(g.maps[k].iter().map(|v| v * b.span(k)));
            }
            Ok((j, gu))
        },
        &u0,
        Some((&zeros, &ones)),
        cfg,
    )?;
    Ok((to_params(&u), report))
}

/// Keeps a uniform first guess off the bounds so it has a finite logit.
pub fn interior_prior(prior: [f64; N_PARAMS], bounds: &Bounds) -> [f64; N_PARAMS] {
    const MARGIN: f64 = 1e-3;
    std::array::from_fn(|k| {
        let m = MARGIN * bounds.span(k);
        prior[k].clamp(bounds.lower[k] + m, bounds.upper[k] - m)
    })
}

/// Multilinear regional calibration from the background control of `prior`.
pub fn calibrate_multilinear(
    setup: &Setup,
    prior: [f64; N_PARAMS],
    cfg: &OptimizerConfig,
) -> Result<(RegressionControl, ParameterFields, OptimizeReport)> {
    let scaler = SigmoidScaler::new(setup.bounds);
    let background = background_from_prior(
        interior_prior(prior, &setup.bounds),
        &scaler,
        setup.descriptors.n_desc(),
    )?;
    let bg = background.to_vec();
    let mut ctrl = background.clone();
    let (alpha, report) = lbfgsb_minimize(
        |a| {
            ctrl.set_from_slice(a);
            let params =
                mapping::apply_multilinear(&setup.plan, &setup.descriptors, &ctrl, &scaler)?;
            let (j, g) = setup.cost_and_gradient(&params)?;
            let mut ga =
                mapping::multilinear_backprop(&setup.plan, &setup.descriptors, &ctrl, &scaler, &g)?;
            let (reg, greg) = objective::regularization(a, Some(&bg), &setup.cost)?;
            let gamma = setup.cost.gamma;
            for (x, r) in ga.iter_mut().zip(&greg) {
                *x += gamma * r;
            }
            Ok((j + gamma * reg, ga))
        },
        &bg,
        None,
        cfg,
    )?;
    ctrl.set_from_slice(&alpha);
    let params = mapping::apply_multilinear(&setup.plan, &setup.descriptors, &ctrl, &scaler)?;
    Ok((ctrl, params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quad_cfg() -> OptimizerConfig {
        OptimizerConfig {
            grad_tol: 1e-11,
            cost_rel_tol: 1e-300,
            max_iter: 200,
            ..Default::default()
        }
    }

    /// Deterministic SPD matrix `M^T M + I` of size n.
    fn spd(n: usize) -> Vec<Vec<f64>> {
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4)
                    .collect()
            })
            .collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>()
                            + if i == j { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .zip(b)
            .map(|(r, v)| r.iter().copied().chain([*v]).collect())
            .collect();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
                .unwrap();
            m.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        (0..n).map(|i| m[i][n] / m[i][i]).collect()
    }

    #[test]
    fn lbfgs_solves_spd_quadratic() {
        let n = 10;
        let a = spd(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |x: &[f64]| {
            let ax: Vec<f64> = a.iter().map(|r| dot(r, x)).collect();
            let j = 0.5 * dot(x, &ax) - dot(&b, x);
            Ok((j, ax.iter().zip(&b).map(|(p, q)| p - q).collect()))
        };
        let (x, report) = lbfgsb_minimize(f, &vec![0.0; n], None, &quad_cfg()).unwrap();
        let direct = solve(&a, &b);
        for (u, v) in x.iter().zip(&direct) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-8);
        }
        assert!(report.final_grad_inf_norm() < 1e-8);
        assert!(
            report.iterations <= 2 * n,
            "{} iterations",
            report.iterations
        );
        assert!(report.j_trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_at_optimum_stops_immediately() {
        let f = |x: &[f64]| {
            Ok((
                x.iter().map(|v| (v - 1.0).powi(2)).sum(),
                x.iter().map(|v| 2.0 * (v - 1.0)).collect(),
            ))
        };
        let (_, report) =
            lbfgsb_minimize(f, &[1.0, 1.0], None, &OptimizerConfig::default()).unwrap();
        assert!(report.iterations <= 1);
        assert_eq!(report.stop_reason, StopReason::GradTol);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let j = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((j, g))
        };
        let cfg = OptimizerConfig {
            grad_tol: 1e-10,
            cost_rel_tol: 1e-300,
            max_iter: 500,
            ..Default::default()
        };
        let (x, _) = lbfgsb_minimize(f, &[-1.2, 1.0], None, &cfg).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn lbfgs_respects_bounds() {
        // unconstrained optimum (3, -2) lies outside [0, 1]^2
        let f = |x: &[f64]| {
            Ok((
                (x[0] - 3.0).powi(2) + (x[1] + 2.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 2.0)],
            ))
        };
        let (x, report) = lbfgsb_minimize(
            f,
            &[0.5, 0.5],
            Some((&[0.0, 0.0], &[1.0, 1.0])),
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
        assert_eq!(report.stop_reason, StopReason::GradTol);
    }

    #[test]
    fn lbfgs_rejects_non_finite_start() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(matches!(
            lbfgsb_minimize(f, &[0.0], None, &OptimizerConfig::default()),
            Err(Error::NonFiniteCost)
        ));
    }

    #[test]
    fn sbs_recovers_interior_quadratic() {
        let (l, u) = ([0.0, -5.0, 10.0], [1.0, 5.0, 30.0]);
        let c = [0.3, 1.7, 12.5];
        let f = |x: &[f64]| Ok(x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum());
        let (x, report) =
            sbs_minimize(f, &[0.5, 0.0, 20.0], &l, &u, &OptimizerConfig::default()).unwrap();
        for k in 0..3 {
            assert!(
                (x[k] - c[k]).abs() <= 1e-2 * (u[k] - l[k]),
                "coordinate {k}: {}",
                x[k]
            );
        }
        assert_eq!(report.stop_reason, StopReason::StepTol);
        assert!(report.j_trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sbs_returns_bound_optimum_and_respects_zero_budget() {
        let f = |x: &[f64]| Ok((x[0] - 7.0).powi(2));
        let (x, _) = sbs_minimize(f, &[0.5], &[0.0], &[1.0], &OptimizerConfig::default()).unwrap();
        assert_eq!(x[0], 1.0);
        let cfg = OptimizerConfig {
            sbs_max_iter: 0,
            ..Default::default()
        };
        let (x, report) = sbs_minimize(f, &[0.5], &[0.0], &[1.0], &cfg).unwrap();
        assert_eq!(x[0], 0.5);
        assert_eq!(report.stop_reason, StopReason::MaxIter);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn adam_zero_rate_is_inert_and_unit_rate_moves_by_lr() {
        let cfg = OptimizerConfig {
            adam_lr: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(&cfg, &[2]);
        let mut p = [1.0, -1.0];
        adam.step(0, &mut p, &[3.0, -0.5]);
        assert_eq!(p, [1.0, -1.0]);
        let cfg = OptimizerConfig {
            adam_lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(&cfg, &[1]);
        let mut p = [0.0];
        adam.step(0, &mut p, &[5.0]);
        // first bias-corrected step has magnitude lr
        assert_abs_diff_eq!(p[0], -0.1, epsilon = 1e-9);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("BGM2R".parse::<Method>().unwrap(), Method::Bgm2r);
        assert!("mpr".parse::<Method>().is_err());
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let mut r = OptimizeReport::new();
        r.push(1.5, 0.25);
        r.push(1.0, f64::NAN);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iter,J,grad_inf_norm");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig {
            memory: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            grad_tol: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
