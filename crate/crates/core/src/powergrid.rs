//! One-generator three-bus grid as an index-1 DAE with stochastic loads,
//! integrated by backward Euler.
//!
//! States `x₁…x₇` are differential, `x₈…x₁₅` algebraic. Indices in the
//! code are zero-based (`x[0]` is `x₁`).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{bounded_scalar_minimize, FdScheme, ScalarConfig, ScalarResult};
use crate::scores::{Ensemble, ScoreKind, Scorer, WeightScheme};
use crate::stochastic::{GpSampler, GpSpec, Kernel, Mean, PointSet};

pub type State = [f64; 15];

pub const P_BAR: f64 = 1.25;
pub const Q_BAR: f64 = 0.5;

/// Steady state for `P = 1.25`, `Q = 0.5` (any inertia).
pub const STEADY_STATE: State = [
    0.391057483977274,
    376.9911184307751,
    1.022092319747551,
    0.308311065534821,
    1.107019848098437,
    0.199263572657719,
    1.12883036798339,
    0.996801975949364,
    0.909203967958775,
    1.04,
    1.006755413658047,
    0.938198590465838,
    0.0,
    -0.070244002800643,
    -0.166824934470857,
];

/// Which residual to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepForm {
    /// `f(x) = 0` and `g(x) = 0`.
    Steady,
    /// `x_d − x_d,prev − dt·f(x) = 0` and `g(x) = 0`.
    BackwardEuler { dt: f64 },
}

/// Right-hand sides of the differential equations; entry 1 is the
/// right-hand side of the swing equation before division by `m/23.64`.
fn differential_rhs(x: &State) -> [f64; 7] {
    [
        -376.99111843077515 + x[1],
        47.70113037725341
            - 0.09968102073365231 * x[1]
            - 7.974481658692184 * (x[3] * x[7] + x[2] * x[8] + 0.0361 * x[7] * x[8]),
        0.11160714285714285 * (x[4] - x[2]) - 0.009508928571428571 * x[7],
        -3.2258064516129035 * x[3] + 1.0938709677419356 * x[8],
        -0.012420382165605096 * (1.555 * x[4]).exp() + 3.1847133757961785 * (x[6] - x[4]),
        0.5142857142857145 * x[4] - 2.857142857142857 * x[5],
        109.644151839917 - 18.0 * x[4] + 100.0 * x[5] - 5.0 * x[6]
            - 100.0 * (x[9] * x[9] + x[12] * x[12]).sqrt(),
    ]
}

fn algebraic_residual(x: &State, p: f64, q: f64) -> Result<[f64; 8]> {
    let d = x[11] * x[11] + x[14] * x[14];
    if d == 0.0 {
        return Err(Error::VoltageCollapse);
    }
    let (s, c) = x[0].sin_cos();
    const G: f64 = 0.030140727054618;
    const B1: f64 = 17.361008783459972;
    const B2: f64 = 17.361058783459974;
    Ok([
        x[7] + 16.44736842105263 * (c * x[9] + s * x[12] - x[2]),
        x[8] + 10.319917440660475 * (x[3] - s * x[9] + c * x[12]),
        s * x[7] + c * x[8] - G * (x[9] - x[10]) - B1 * x[12] + B2 * x[13],
        G * x[9] - 1.395328440365198 * x[10] + 1.36518771331058 * x[11] + B2 * x[12]
            - 28.877104346599904 * x[13]
            + 11.60409556313993 * x[14],
        1.36518771331058 * (x[10] - x[11]) + 11.60409556313993 * x[13]
            - 11.516095563139931 * x[14]
            - p * x[11] / d
            - q * x[14] / d,
        -c * x[7] + s * x[8] + B1 * x[9] - B2 * x[10] - G * (x[12] - x[13]),
        -B2 * x[9] + 28.877104346599904 * x[10] - 11.60409556313993 * x[11] + G * x[12]
            - 1.395328440365198 * x[13]
            + 1.36518771331058 * x[14],
        -11.60409556313993 * x[10] + 11.516095563139931 * x[11]
            + 1.36518771331058 * (x[13] - x[14])
            + q * x[11] / d
            - p * x[14] / d,
    ])
}

/// Full 15-row residual at `x` given the previous differential state.
pub fn residual(x: &State, prev: &[f64; 7], form: StepForm, m: f64, p: f64, q: f64) -> Result<State> {
    let f = differential_rhs(x);
    let g = algebraic_residual(x, p, q)?;
    let mut r = [0.0; 15];
    match form {
        StepForm::Steady => r[..7].copy_from_slice(&f),
        StepForm::BackwardEuler { dt } => {
            for i in 0..7 {
                let lhs = if i == 1 { m / 23.64 } else { 1.0 } * (x[i] - prev[i]);
                r[i] = lhs - dt * f[i];
            }
        }
    }
    r[7..].copy_from_slice(&g);
    Ok(r)
}

fn inf_norm(r: &State) -> f64 {
    r.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn differential_part(x: &State) -> [f64; 7] {
    let mut d = [0.0; 7];
    d.copy_from_slice(&x[..7]);
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50,
        }
    }
}

/// Solves the residual for the next state by Newton's method with a
/// forward-difference Jacobian, starting from `guess`.
pub fn newton_solve(
    guess: &State,
    prev: &[f64; 7],
    form: StepForm,
    m: f64,
    p: f64,
    q: f64,
    opts: NewtonOptions,
) -> Result<State> {
    let mut x = *guess;
    let mut r = residual(&x, prev, form, m, p, q)?;
    let mut norm = inf_norm(&r);
    for _ in 0..opts.max_iters {
        if norm <= opts.tol {
            return Ok(x);
        }
        let mut jac = SMatrix::<f64, 15, 15>::zeros();
        for j in 0..15 {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x;
            xp[j] += h;
            let rp = residual(&xp, prev, form, m, p, q)?;
            for i in 0..15 {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let delta = jac
            .lu()
            .solve(&SVector::<f64, 15>::from_column_slice(&r))
            .ok_or_else(|| Error::SolverBreakdown("singular Newton Jacobian".into()))?;
        for i in 0..15 {
            x[i] -= delta[i];
        }
        r = residual(&x, prev, form, m, p, q)?;
        norm = inf_norm(&r);
        if !norm.is_finite() {
            break;
        }
    }
    if norm <= opts.tol {
        return Ok(x);
    }
    Err(Error::NewtonDivergence {
        iterations: opts.max_iters,
        residual: norm,
        iterate: Box::new(x),
    })
}

/// One backward-Euler step from `prev` with loads held at `(p, q)`.
pub fn step(prev: &State, dt: f64, m: f64, p: f64, q: f64, opts: NewtonOptions) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step must be positive (got {dt})")));
    }
    newton_solve(prev, &differential_part(prev), StepForm::BackwardEuler { dt }, m, p, q, opts)
}

/// Load values on the step grid: entry `k` is applied during step `k+1`,
/// i.e. at time `t0 + (k+1)·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSeries {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
}

impl LoadSeries {
    pub fn new(p: Vec<f64>, q: Vec<f64>, dt: f64, t0: f64) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::mismatch("load series length", p.len(), q.len()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("time step must be positive (got {dt})")));
        }
        Ok(Self { p, q, dt, t0 })
    }

    pub fn constant(p: f64, q: f64, steps: usize, dt: f64) -> Self {
        Self {
            p: vec![p; steps],
            q: vec![q; steps],
            dt,
            t0: 0.0,
        }
    }

    /// Samples `p(t)`, `q(t)` at the step end times.
    pub fn from_fn(p: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64, steps: usize, dt: f64) -> Self {
        let t = |k: usize| (k + 1) as f64 * dt;
        Self {
            p: (0..steps).map(|k| p(t(k))).collect(),
            q: (0..steps).map(|k| q(t(k))).collect(),
            dt,
            t0: 0.0,
        }
    }

    pub fn steps(&self) -> usize {
        self.p.len()
    }
}

/// Time grid and observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_end: f64,
    pub dt: f64,
    /// Observed steps have times in `(window[0], window[1]]`.
    pub window: [f64; 2],
    #[serde(default)]
    pub newton: NewtonOptions,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            dt: 0.01,
            window: [3.0, 8.0],
            newton: NewtonOptions::default(),
        }
    }
}

impl GridConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// 1-based step indices inside the window.
    pub fn window_steps(&self) -> std::ops::RangeInclusive<usize> {
        let a = (self.window[0] / self.dt).round() as usize;
        let b = (self.window[1] / self.dt).round() as usize;
        a + 1..=b
    }

    /// Length of the observable vector (two channels).
    pub fn observable_len(&self) -> usize {
        2 * self.window_steps().count()
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if !(self.dt > 0.0) || steps == 0 || ((steps as f64) * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::InvalidParameter(format!(
                "t_end {} is not a positive multiple of dt {}",
                self.t_end, self.dt
            )));
        }
        let w = self.window_steps();
        if !(self.window[0] >= 0.0 && self.window[0] < self.window[1] && self.window[1] <= self.t_end) || w.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "observation window {:?} must satisfy 0 ≤ a < b ≤ {}",
                self.window, self.t_end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row `k` is the state at `times[k]`; row 0 is the initial state.
    pub states: DMatrix<f64>,
}

impl Trajectory {
    /// CSV with header `t,x1,…,x15`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (1..=15).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let row: Vec<String> = self.states.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn integrate(m: f64, loads: &LoadSeries, steps: usize, newton: NewtonOptions, mut visit: impl FnMut(usize, &State)) -> Result<()> {
    if loads.steps() < steps {
        return Err(Error::mismatch("load series length", steps, loads.steps()));
    }
    let mut x = STEADY_STATE;
    visit(0, &x);
    for k in 0..steps {
        x = step(&x, loads.dt, m, loads.p[k], loads.q[k], newton)?;
        visit(k + 1, &x);
    }
    Ok(())
}

/// Integrates from the steady state and returns every state.
pub fn trajectory(m: f64, loads: &LoadSeries, steps: usize, newton: NewtonOptions) -> Result<Trajectory> {
    let mut states = DMatrix::zeros(steps + 1, 15);
    integrate(m, loads, steps, newton, |k, x| {
        states.row_mut(k).copy_from(&nalgebra::RowSVector::<f64, 15>::from_row_slice(x));
    })?;
    Ok(Trajectory {
        times: (0..=steps).map(|k| loads.t0 + k as f64 * loads.dt).collect(),
        states,
    })
}

/// Observables `x₁₁` then `x₁₄` at every step in the window.
pub fn simulate(m: f64, loads: &LoadSeries, cfg: &GridConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    if (loads.dt - cfg.dt).abs() > 1e-15 * cfg.dt {
        return Err(Error::InvalidParameter(format!(
            "load series step {} differs from grid step {}",
            loads.dt, cfg.dt
        )));
    }
    let window = cfg.window_steps();
    let len = window.clone().count();
    let first = *window.start();
    let mut out = DVector::zeros(2 * len);
    integrate(m, loads, *window.end(), cfg.newton, |k, x| {
        if window.contains(&k) {
            out[k - first] = x[10];
            out[len + k - first] = x[13];
        }
    })?;
    Ok(out)
}

/// Stationary Gaussian load processes for `P` and `Q` on the step grid.
#[derive(Debug, Clone)]
pub struct LoadModel {
    p: GpSampler,
    q: GpSampler,
    dt: f64,
}

impl LoadModel {
    /// `P ~ N(1.25, 0.1² k)`, `Q ~ N(0.5, 0.05² k)`, `steps` values each.
    pub fn new(steps: usize, dt: f64) -> Result<Self> {
        Self::with_scales(steps, dt, 0.1, 0.05)
    }

    pub fn with_scales(steps: usize, dt: f64, p_scale: f64, q_scale: f64) -> Result<Self> {
        let times: Vec<f64> = (1..=steps).map(|k| k as f64 * dt).collect();
        let pts = PointSet::times(&times);
        let p = GpSampler::new(GpSpec::new(Mean::Constant(P_BAR), Kernel::load(p_scale)), pts.clone())?;
        let q = GpSampler::new(GpSpec::new(Mean::Constant(Q_BAR), Kernel::load(q_scale)), pts)?;
        Ok(Self { p, q, dt })
    }

    /// Load series number `index`: `P` from stream `2·index`, `Q` from `2·index+1`.
    pub fn scenario(&self, seed: u64, index: u64) -> LoadSeries {
        LoadSeries {
            p: self.p.draw(seed, 2 * index).iter().copied().collect(),
            q: self.q.draw(seed, 2 * index + 1).iter().copied().collect(),
            dt: self.dt,
            t0: 0.0,
        }
    }

    pub fn scenarios(&self, seed: u64, count: usize) -> Vec<LoadSeries> {
        self.scenario_range(seed, 0, count)
    }

    /// Scenarios `start..start+count` of one realization pool.
    pub fn scenario_range(&self, seed: u64, start: usize, count: usize) -> Vec<LoadSeries> {
        (start..start + count).map(|i| self.scenario(seed, i as u64)).collect()
    }
}

/// Banded variogram weights for the two observed channels.
pub fn grid_score_kind(kind: &ScoreKind, lag: usize) -> ScoreKind {
    kind.with_weights(WeightScheme::Banded { channels: 2, lag })
}

/// Simulated ensemble for pinned load scenarios; members in scenario order.
pub fn simulate_ensemble(m: f64, scenarios: &[LoadSeries], cfg: &GridConfig) -> Result<Ensemble> {
    let cols = scenarios
        .par_iter()
        .map(|l| simulate(m, l, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_columns(&cols)
}

/// Observation batches (`n × M`) simulated at the true inertia.
pub fn observation_batches(m_true: f64, loads: &[LoadSeries], cfg: &GridConfig) -> Result<DMatrix<f64>> {
    let ens = simulate_ensemble(m_true, loads, cfg)?;
    Ok(ens.into_inner().transpose())
}

/// Mean score of the simulated ensemble at `m` over all observation rows.
pub fn grid_objective(
    m: f64,
    obs_batches: &DMatrix<f64>,
    scenarios: &[LoadSeries],
    scorer: &Scorer,
    cfg: &GridConfig,
) -> Result<f64> {
    let ens = simulate_ensemble(m, scenarios, cfg)?;
    scorer.mean_score(&ens, obs_batches)
}

/// Per-batch instantaneous scores at each `m` (rows follow `ms`).
pub fn score_table(
    ms: &[f64],
    obs_batches: &DMatrix<f64>,
    scenarios: &[LoadSeries],
    scorers: &[&Scorer],
    cfg: &GridConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::with_capacity(ms.len()); scorers.len()];
    for &m in ms {
        let ens = simulate_ensemble(m, scenarios, cfg)?;
        for (s, scorer) in scorers.iter().enumerate() {
            out[s].push(scorer.batch_scores(&ens, obs_batches)?);
        }
    }
    Ok(out)
}

/// Running means `S_n` of per-batch scores for `n = 1..=len`.
pub fn cumulative_means(batch_scores: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    batch_scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            acc += s;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Argmin over the grid (first index on ties).
pub fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0
}

/// Bounded scalar minimization of the grid objective with forward
/// differences of step `1e-3·(1+|m|)`.
pub fn estimate_inertia(
    lo: f64,
    hi: f64,
    start: f64,
    obs_batches: &DMatrix<f64>,
    scenarios: &[LoadSeries],
    scorer: &Scorer,
    cfg: &GridConfig,
) -> Result<ScalarResult> {
    let scfg = ScalarConfig {
        fd_step: 1e-3,
        fd_scheme: FdScheme::Forward,
        xtol: 1e-4,
        max_iters: 30,
        ..ScalarConfig::default()
    };
    bounded_scalar_minimize(
        |m| grid_objective(m, obs_batches, scenarios, scorer, cfg),
        lo,
        hi,
        start,
        &scfg,
    )
}
