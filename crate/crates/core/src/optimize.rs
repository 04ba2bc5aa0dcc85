//! Limited-memory BFGS with Armijo backtracking, finite-difference
//! gradients, and a bounded scalar quasi-Newton search.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_memory() -> usize {
    10
}
fn default_max_iters() -> usize {
    300
}
fn default_grad_tol() -> f64 {
    1e-6
}
fn default_c1() -> f64 {
    1e-4
}
fn default_backtrack() -> f64 {
    0.5
}
fn default_max_backtracks() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once `‖g‖ ≤ grad_tol · ‖g₀‖`.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_backtrack")]
    pub backtrack: f64,
    #[serde(default = "default_max_backtracks")]
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: default_memory(),
            max_iters: default_max_iters(),
            grad_tol: default_grad_tol(),
            c1: default_c1(),
            backtrack: default_backtrack(),
            max_backtracks: default_max_backtracks(),
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.memory == 0 {
            return bad("L-BFGS memory must be positive".into());
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return bad(format!("Armijo constant must lie in (0, 1) (got {})", self.c1));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad(format!("backtrack factor must lie in (0, 1) (got {})", self.backtrack));
        }
        if !(self.grad_tol >= 0.0) {
            return bad(format!("gradient tolerance must be nonnegative (got {})", self.grad_tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

/// One accepted iterate (iteration 0 is the starting point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub backtracks: usize,
    /// The quasi-Newton direction was not a descent direction and was
    /// replaced by steepest descent.
    pub reset: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterTrace {
    pub records: Vec<IterRecord>,
}

impl IterTrace {
    /// CSV with header `iter,objective,grad_norm,step,backtracks,reset`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iter,objective,grad_norm,step,backtracks,reset")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter, r.objective, r.grad_norm, r.step, r.backtracks, r.reset as u8
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Curvature pairs for the two-loop recursion.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)>,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Shrinks the capacity, dropping the oldest pairs.
    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity.max(1);
        while self.pairs.len() > self.capacity {
            self.pairs.pop_front();
        }
    }

    /// Stores `(s, y)` unless `sᵀy ≤ 1e-12 ‖s‖‖y‖`; returns whether it was kept.
    pub fn push(&mut self, s: DVector<f64>, y: DVector<f64>) -> bool {
        let sy = s.dot(&y);
        if !(sy > 1e-12 * s.norm() * y.norm()) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// `sᵀy / yᵀy` of the newest pair.
    pub fn scaling(&self) -> Option<f64> {
        self.pairs.back().map(|(_, y, rho)| 1.0 / (rho * y.norm_squared()))
    }

    /// Inverse-Hessian approximation applied to `g`, with `H₀ = gamma · I`.
    pub fn apply(&self, g: &DVector<f64>, gamma: f64) -> DVector<f64> {
        self.apply_with(g, |q| Ok(q * gamma)).expect("identity initial matrix")
    }

    /// Two-loop recursion with a general initial matrix `h0`.
    pub fn apply_with<H>(&self, g: &DVector<f64>, h0: H) -> Result<DVector<f64>>
    where
        H: FnOnce(DVector<f64>) -> Result<DVector<f64>>,
    {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let mut q = h0(q)?;
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        Ok(q)
    }

    fn newest(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.pairs.back().map(|(s, y, _)| (s, y))
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub status: Status,
    pub trace: IterTrace,
    pub evaluations: usize,
}

fn check_finite(f: f64, g: &DVector<f64>, what: &str) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective(format!("{what}: objective {f}")));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective(format!(
            "{what}: gradient entry {i} is {}",
            g[i]
        )));
    }
    Ok(())
}

/// Symmetric positive definite operator used as the initial inverse Hessian.
pub type Preconditioner<'a> = &'a dyn Fn(&DVector<f64>) -> Result<DVector<f64>>;

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
///
/// With `metric = Some(d)` the stopping test uses the dual norm
/// `sqrt(Σ gᵢ² / dᵢ)` (pass a lumped mass matrix for mesh independence).
pub fn lbfgs_minimize<F>(
    f: F,
    x0: DVector<f64>,
    cfg: &LbfgsConfig,
    metric: Option<&DVector<f64>>,
) -> Result<LbfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    lbfgs_minimize_preconditioned(f, x0, cfg, metric, None)
}

/// [`lbfgs_minimize`] with initial inverse Hessian `H₀ = γ P`, where
/// `γ = sᵀy / yᵀPy` from the newest pair. Without pairs the step is `-P g`
/// at unit length; with `P = None` it is `-g / ‖g‖`.
pub fn lbfgs_minimize_preconditioned<F>(
    mut f: F,
    x0: DVector<f64>,
    cfg: &LbfgsConfig,
    metric: Option<&DVector<f64>>,
    precond: Option<Preconditioner>,
) -> Result<LbfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    cfg.validate()?;
    if let Some(d) = metric {
        if d.len() != x0.len() {
            return Err(Error::mismatch("metric length", x0.len(), d.len()));
        }
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("metric weights must be positive".into()));
        }
    }
    let norm = |g: &DVector<f64>| match metric {
        Some(d) => g.iter().zip(d.iter()).map(|(gi, di)| gi * gi / di).sum::<f64>().sqrt(),
        None => g.norm(),
    };

    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    check_finite(fx, &g, "initial point")?;
    let mut evaluations = 1;
    let g0 = norm(&g);
    let mut trace = IterTrace::default();
    trace.records.push(IterRecord {
        iter: 0,
        objective: fx,
        grad_norm: g0,
        step: 0.0,
        backtracks: 0,
        reset: false,
    });
    let tol = cfg.grad_tol * g0;
    let done = |gn: f64| gn == 0.0 || gn <= tol;
    let finish = |x, value, gradient, status, trace, evaluations| {
        Ok(LbfgsResult {
            x,
            value,
            gradient,
            status,
            trace,
            evaluations,
        })
    };
    if done(g0) {
        return finish(x, fx, g, Status::Converged, trace, evaluations);
    }

    let mut mem = LbfgsMemory::new(cfg.memory);
    let mut halved = false;
    let mut iter = 0;
    let first_step = |g: &DVector<f64>| -> Result<DVector<f64>> {
        match precond {
            Some(p) => Ok(-p(g)?),
            None => Ok(-g / g.norm()),
        }
    };
    while iter < cfg.max_iters {
        let mut d = match (mem.newest(), precond) {
            (None, _) => first_step(&g)?,
            (Some(_), None) => -mem.apply(&g, mem.scaling().expect("pairs stored")),
            (Some((s, y)), Some(p)) => {
                let gamma = s.dot(y) / y.dot(&p(y)?);
                -mem.apply_with(&g, |q| Ok(p(&q)? * gamma))?
            }
        };
        let mut slope = g.dot(&d);
        let mut reset = false;
        if !(slope < 0.0) || !slope.is_finite() {
            d = first_step(&g)?;
            slope = g.dot(&d);
            mem.clear();
            reset = true;
        }

        let mut alpha = 1.0;
        let mut backtracks = 0;
        let accepted = loop {
            let xt = &x + alpha * &d;
            let (ft, gt) = f(&xt)?;
            evaluations += 1;
            if ft.is_finite() && ft <= fx + cfg.c1 * alpha * slope {
                check_finite(ft, &gt, "accepted step")?;
                break Some((xt, ft, gt));
            }
            if backtracks == cfg.max_backtracks {
                break None;
            }
            alpha *= cfg.backtrack;
            backtracks += 1;
        };

        let Some((xt, ft, gt)) = accepted else {
            if !halved && mem.capacity() > 1 {
                halved = true;
                let cap = mem.capacity() / 2;
                mem.set_capacity(cap);
                continue;
            }
            return finish(x, fx, g, Status::LineSearchFailed, trace, evaluations);
        };

        iter += 1;
        mem.push(&xt - &x, &gt - &g);
        x = xt;
        fx = ft;
        g = gt;
        let gn = norm(&g);
        trace.records.push(IterRecord {
            iter,
            objective: fx,
            grad_norm: gn,
            step: alpha * d.norm(),
            backtracks,
            reset,
        });
        if done(gn) {
            return finish(x, fx, g, Status::Converged, trace, evaluations);
        }
    }
    finish(x, fx, g, Status::MaxIterations, trace, evaluations)
}

/// Central-difference gradient with per-coordinate step `rel_step·(1+|mᵢ|)`.
pub fn fd_gradient<F>(mut f: F, m: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut x = m.clone();
    let mut g = DVector::zeros(m.len());
    for i in 0..m.len() {
        let h = rel_step * (1.0 + m[i].abs());
        x[i] = m[i] + h;
        let fp = f(&x);
        x[i] = m[i] - h;
        let fm = f(&x);
        x[i] = m[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteDifference { coordinate: i });
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    Forward,
    Central,
}

fn default_scalar_iters() -> usize {
    50
}
fn default_fd_step() -> f64 {
    1e-3
}
fn default_fd_scheme() -> FdScheme {
    FdScheme::Central
}
fn default_xtol() -> f64 {
    1e-9
}
fn default_scalar_backtracks() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarConfig {
    #[serde(default = "default_scalar_iters")]
    pub max_iters: usize,
    /// Difference step is `fd_step·(1+|m|)`.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_fd_scheme")]
    pub fd_scheme: FdScheme,
    /// Stop when an accepted step is shorter than `xtol·(1+|m|)`.
    #[serde(default = "default_xtol")]
    pub xtol: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_backtrack")]
    pub backtrack: f64,
    #[serde(default = "default_scalar_backtracks")]
    pub max_backtracks: usize,
}

impl Default for ScalarConfig {
    fn default() -> Self {
        Self {
            max_iters: default_scalar_iters(),
            fd_step: default_fd_step(),
            fd_scheme: default_fd_scheme(),
            xtol: default_xtol(),
            c1: default_c1(),
            backtrack: default_backtrack(),
            max_backtracks: default_scalar_backtracks(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalarResult {
    /// Best evaluated point and its value.
    pub x: f64,
    pub value: f64,
    pub status: Status,
    /// Every function evaluation, in order: `(m, f(m))`.
    pub evaluations: Vec<(f64, f64)>,
    /// Accepted iterates, starting with the projected start point.
    pub iterates: Vec<(f64, f64)>,
}

/// Projected secant quasi-Newton search for `min f` on `[lo, hi]`.
pub fn bounded_scalar_minimize<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    start: f64,
    cfg: &ScalarConfig,
) -> Result<ScalarResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InfeasibleBounds { lo, hi });
    }
    if !(cfg.fd_step > 0.0) || !(cfg.c1 > 0.0 && cfg.c1 < 1.0) || !(cfg.backtrack > 0.0 && cfg.backtrack < 1.0) {
        return Err(Error::InvalidParameter("invalid scalar search settings".into()));
    }
    let clamp = |x: f64| x.clamp(lo, hi);
    let mut evaluations: Vec<(f64, f64)> = Vec::new();
    let mut eval = |x: f64, log: &mut Vec<(f64, f64)>| -> Result<f64> {
        let v = f(x)?;
        log.push((x, v));
        Ok(v)
    };
    let grad = |x: f64, fx: f64, log: &mut Vec<(f64, f64)>, eval: &mut dyn FnMut(f64, &mut Vec<(f64, f64)>) -> Result<f64>| -> Result<f64> {
        let h = cfg.fd_step * (1.0 + x.abs());
        let (a, b) = match cfg.fd_scheme {
            FdScheme::Central if x - h >= lo && x + h <= hi => (x - h, x + h),
            _ if x + h <= hi => (x, x + h),
            _ => (x - h, x),
        };
        let fa = if a == x { fx } else { eval(a, log)? };
        let fb = if b == x { fx } else { eval(b, log)? };
        if !fa.is_finite() || !fb.is_finite() {
            return Err(Error::NonFiniteDifference { coordinate: 0 });
        }
        Ok((fb - fa) / (b - a))
    };

    let mut x = clamp(start);
    let mut fx = eval(x, &mut evaluations)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective(format!("f({x}) = {fx}")));
    }
    let mut g = grad(x, fx, &mut evaluations, &mut eval)?;
    let mut iterates = vec![(x, fx)];
    // Initial inverse curvature: a quarter of the interval per unit slope.
    let mut h_inv = if g != 0.0 { 0.25 * (hi - lo) / g.abs() } else { 1.0 };
    let mut status = Status::MaxIterations;

    for _ in 0..cfg.max_iters {
        let full = clamp(x - h_inv * g);
        if full == x || g == 0.0 {
            status = Status::Converged;
            break;
        }
        let mut alpha = 1.0;
        let mut trial = full;
        let mut backtracks = 0;
        let accepted = loop {
            let ft = eval(trial, &mut evaluations)?;
            if ft.is_finite() && ft <= fx + cfg.c1 * g * (trial - x) {
                break Some(ft);
            }
            if backtracks == cfg.max_backtracks {
                break None;
            }
            backtracks += 1;
            alpha *= cfg.backtrack;
            trial = clamp(x + alpha * (full - x));
        };
        let Some(ft) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };
        let gt = grad(trial, ft, &mut evaluations, &mut eval)?;
        let s = trial - x;
        let y = gt - g;
        if s * y > 0.0 {
            h_inv = s / y;
        }
        x = trial;
        fx = ft;
        g = gt;
        iterates.push((x, fx));
        if s.abs() <= cfg.xtol * (1.0 + x.abs()) {
            status = Status::Converged;
            break;
        }
    }

    let best = evaluations
        .iter()
        .filter(|(_, v)| v.is_finite())
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::NonFiniteObjective("no finite evaluation".into()))?;
    Ok(ScalarResult {
        x: best.0,
        value: best.1,
        status,
        evaluations,
        iterates,
    })
}
