//! Score-based misfit plus prior, with adjoint gradients.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CscMatrix;
use rayon::prelude::*;

use super::fem::{mass, spmv, ForwardOperator};
use super::mesh::Mesh;
use super::observe::ObservationOperator;
use super::prior::Prior;
use crate::error::{Error, Result};
use crate::scores::{Ensemble, Observation, ScoreKind, Scorer};
use crate::stochastic::stream_rng;

/// Mesh, observation layout and mass matrix shared by all solves.
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    mesh: Mesh,
    obs: ObservationOperator,
    mass: CscMatrix<f64>,
}

impl EllipticProblem {
    pub fn new(mesh: Mesh, obs: ObservationOperator) -> Self {
        let mass = mass(&mesh);
        Self { mesh, obs, mass }
    }

    /// `nx × ny` mesh observed on the default 5×5 lattice.
    pub fn with_default_lattice(nx: usize, ny: usize) -> Result<Self> {
        let mesh = Mesh::new(nx, ny)?;
        let obs = ObservationOperator::lattice(&mesh, 5)?;
        Ok(Self::new(mesh, obs))
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn observation_operator(&self) -> &ObservationOperator {
        &self.obs
    }

    pub fn mass(&self) -> &CscMatrix<f64> {
        &self.mass
    }

    /// Load vector `M f` for a nodal forcing.
    pub fn load(&self, forcing: &[f64]) -> Result<DVector<f64>> {
        if forcing.len() != self.mesh.num_nodes() {
            return Err(Error::mismatch(
                "forcing length",
                self.mesh.num_nodes(),
                forcing.len(),
            ));
        }
        Ok(spmv(&self.mass, forcing))
    }

    pub fn assemble(&self, m: &[f64]) -> Result<ForwardOperator> {
        ForwardOperator::assemble(&self.mesh, m)
    }

    /// Solves the forward problem for coefficient `exp(m)` and nodal forcing.
    pub fn solve_forward(&self, m: &[f64], forcing: &[f64]) -> Result<DVector<f64>> {
        self.assemble(m)?.solve_forward(&self.load(forcing)?)
    }

    /// Observes the forward state and adds `N(0, σ²)` noise.
    pub fn make_observations(
        &self,
        m_true: &[f64],
        truth_forcing: &[f64],
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Observation> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be nonnegative (got {noise_sigma})"
            )));
        }
        let u = self.solve_forward(m_true, truth_forcing)?;
        let mut d = self.obs.apply(u.as_slice())?;
        if noise_sigma > 0.0 {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = stream_rng(seed, 0);
            for v in d.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sigma * z;
            }
        }
        Observation::new(d)?.with_sites(self.obs.sites())
    }
}

/// `S(F(m), d_obs) · w + R(m)` over a pinned set of forcing scenarios.
#[derive(Debug)]
pub struct Objective<'a> {
    problem: &'a EllipticProblem,
    loads: Vec<DVector<f64>>,
    obs: Observation,
    scorer: Scorer,
    prior: &'a Prior,
    score_weight: f64,
    forward_solves: AtomicUsize,
    adjoint_solves: AtomicUsize,
}

/// Output of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub score: f64,
    pub regularization: f64,
    pub gradient: DVector<f64>,
    /// Some score gradient hit a degenerate (zero-norm) configuration.
    pub degenerate: bool,
}

impl<'a> Objective<'a> {
    /// `scenarios` holds one nodal forcing per row.
    pub fn new(
        problem: &'a EllipticProblem,
        scenarios: &DMatrix<f64>,
        obs: Observation,
        kind: &ScoreKind,
        prior: &'a Prior,
        score_weight: f64,
    ) -> Result<Self> {
        if scenarios.nrows() == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if !(score_weight >= 0.0 && score_weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "score weight must be nonnegative (got {score_weight})"
            )));
        }
        if obs.dim() != problem.obs.len() {
            return Err(Error::mismatch("observation length", problem.obs.len(), obs.dim()));
        }
        let loads = scenarios
            .row_iter()
            .map(|r| problem.load(r.transpose().as_slice()))
            .collect::<Result<_>>()?;
        let sites = problem.obs.sites();
        let scorer = Scorer::new(kind, problem.obs.len(), Some(&sites))?;
        Ok(Self {
            problem,
            loads,
            obs,
            scorer,
            prior,
            score_weight,
            forward_solves: AtomicUsize::new(0),
            adjoint_solves: AtomicUsize::new(0),
        })
    }

    pub fn scenarios(&self) -> usize {
        self.loads.len()
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    /// Forward and adjoint solve counts since construction.
    pub fn solve_counts(&self) -> (usize, usize) {
        (
            self.forward_solves.load(Ordering::Relaxed),
            self.adjoint_solves.load(Ordering::Relaxed),
        )
    }

    fn states(&self, op: &ForwardOperator) -> Result<Vec<DVector<f64>>> {
        let states = self
            .loads
            .par_iter()
            .map(|b| op.solve_forward(b))
            .collect::<Result<Vec<_>>>()?;
        self.forward_solves.fetch_add(states.len(), Ordering::Relaxed);
        Ok(states)
    }

    fn ensemble(&self, states: &[DVector<f64>]) -> Result<Ensemble> {
        let cols = states
            .iter()
            .map(|u| self.problem.obs.apply(u.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::from_columns(&cols)
    }

    /// Simulated observables `B u^(i)` for every scenario.
    pub fn forward_ensemble(&self, m: &[f64]) -> Result<Ensemble> {
        let op = self.problem.assemble(m)?;
        self.ensemble(&self.states(&op)?)
    }

    pub fn value(&self, m: &[f64]) -> Result<f64> {
        let reg = self.prior.cost(m)?;
        let score = if self.score_weight == 0.0 {
            0.0
        } else {
            self.scorer.score(&self.forward_ensemble(m)?, &self.obs)?
        };
        let v = self.score_weight * score + reg;
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective(format!("objective value {v}")));
        }
        Ok(v)
    }

    pub fn evaluate(&self, m: &[f64]) -> Result<Evaluation> {
        let (regularization, mut gradient) = self.prior.cost_and_gradient(m)?;
        let mut score = 0.0;
        let mut degenerate = false;
        if self.score_weight != 0.0 {
            let mesh = self.problem.mesh();
            let op = self.problem.assemble(m)?;
            let states = self.states(&op)?;
            let ens = self.ensemble(&states)?;
            score = self.scorer.score(&ens, &self.obs)?;
            let sg = self.scorer.gradient(&ens, &self.obs)?;
            degenerate = sg.degenerate;
            let parts = states
                .par_iter()
                .enumerate()
                .map(|(i, u)| {
                    let col: Vec<f64> = sg.grad.column(i).iter().copied().collect();
                    let p = op.solve_adjoint(&self.problem.obs, &col)?;
                    Ok(op.coefficient_sensitivity(mesh, u.as_slice(), p.as_slice()))
                })
                .collect::<Result<Vec<_>>>()?;
            self.adjoint_solves.fetch_add(parts.len(), Ordering::Relaxed);
            for part in &parts {
                gradient.axpy(self.score_weight, part, 1.0);
            }
        }
        let value = self.score_weight * score + regularization;
        if !value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective(format!(
                "objective {value}, gradient finite: {}",
                gradient.iter().all(|g| g.is_finite())
            )));
        }
        Ok(Evaluation {
            value,
            score,
            regularization,
            gradient,
            degenerate,
        })
    }
}
