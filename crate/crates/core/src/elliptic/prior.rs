//! Bilaplacian-type Gaussian priors on the log-coefficient.

use std::sync::Arc;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;
use serde::{Deserialize, Serialize};

use super::fem::{anisotropic_stiffness, factor, factored_solve, lumped_mass, spmv, weighted_mass};
use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::stochastic::standard_normals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Zero mean, precision built from `γ K_Θ + δ M`.
    Standard,
    /// Mean fitted to the truth near a few points; precision penalized there.
    Informed,
}

fn default_gamma() -> f64 {
    0.1
}
fn default_delta() -> f64 {
    0.5
}
fn default_penalty() -> f64 {
    10.0
}

/// Anisotropy tensor for principal values 2 and 1/2 rotated by π/4.
pub fn default_theta() -> [[f64; 2]; 2] {
    let (t0, t1, a) = (2.0_f64, 0.5_f64, std::f64::consts::FRAC_PI_4);
    let (s, c) = a.sin_cos();
    [
        [t0 * s * s + t1 * c * c, (t0 - t1) * s * c],
        [(t0 - t1) * s * c, t1 * s * s + t0 * c * c],
    ]
}

pub fn default_points() -> Vec<[f64; 2]> {
    vec![[0.1, 0.1], [0.1, 0.9], [0.5, 0.5], [0.9, 0.1], [0.9, 0.9]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_theta")]
    pub theta: [[f64; 2]; 2],
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    #[serde(default = "default_points")]
    pub points: Vec<[f64; 2]>,
    /// Mollifier exponent factor `r` in `exp(-r ‖x - xᵢ‖²_{Θ⁻¹})`; `None`
    /// means `δ²/γ²`, i.e. a Gaussian of length `γ/δ` around each point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollifier_ratio: Option<f64>,
}

impl PriorSpec {
    pub fn standard() -> Self {
        Self {
            kind: PriorKind::Standard,
            gamma: default_gamma(),
            delta: default_delta(),
            theta: default_theta(),
            penalty: default_penalty(),
            points: default_points(),
            mollifier_ratio: None,
        }
    }

    pub fn informed() -> Self {
        Self {
            kind: PriorKind::Informed,
            ..Self::standard()
        }
    }

    pub fn ratio(&self) -> f64 {
        self.mollifier_ratio
            .unwrap_or(self.delta * self.delta / (self.gamma * self.gamma))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("prior gamma must be positive (got {})", self.gamma));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("prior delta must be positive (got {})", self.delta));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return bad(format!("prior penalty must be nonnegative (got {})", self.penalty));
        }
        let t = self.theta;
        if t[0][1] != t[1][0] || !(t[0][0] > 0.0) || !(t[0][0] * t[1][1] - t[0][1] * t[1][0] > 0.0) {
            return bad(format!("anisotropy tensor {t:?} is not symmetric positive definite"));
        }
        if !(self.ratio() > 0.0 && self.ratio().is_finite()) {
            return bad(format!("mollifier ratio must be positive (got {})", self.ratio()));
        }
        if self.kind == PriorKind::Informed && self.points.is_empty() {
            return bad("informed prior needs at least one mollifier point".into());
        }
        Ok(())
    }

    /// `Ã = γ K_Θ + δ M`, the base elliptic operator.
    pub fn base_operator(&self, mesh: &Mesh) -> Result<CscMatrix<f64>> {
        self.validate()?;
        let k = anisotropic_stiffness(mesh, self.theta);
        let m = weighted_mass(mesh, |_, _| 1.0);
        Ok(k * self.gamma + m * self.delta)
    }

    /// `Σ_i exp(-r ‖x - x_i‖²_{Θ⁻¹})`.
    pub fn mollifier(&self, x: f64, y: f64) -> f64 {
        let t = self.theta;
        let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        let inv = [[t[1][1] / det, -t[0][1] / det], [-t[1][0] / det, t[0][0] / det]];
        let r = self.ratio();
        self.points
            .iter()
            .map(|p| {
                let d = [x - p[0], y - p[1]];
                let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
                    + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
                (-r * q).exp()
            })
            .sum()
    }
}

/// Draw `Ã⁻¹ M_L^{1/2} z`, a sample of the zero-mean field with precision
/// `Ã M_L⁻¹ Ã`.
pub fn sample_field(mesh: &Mesh, spec: &PriorSpec, seed: u64) -> Result<DVector<f64>> {
    let a = spec.base_operator(mesh)?;
    let chol = factor(&a)?;
    let z = standard_normals(seed, 0, mesh.num_nodes());
    let rhs = lumped_mass(mesh).map(f64::sqrt).component_mul(&z);
    factored_solve(&a, &chol, &rhs)
}

/// Regularization `R(m) = ½ (m - m₀)ᵀ A M_L⁻¹ A (m - m₀)`.
#[derive(Debug, Clone)]
pub struct Prior {
    spec: PriorSpec,
    mean: DVector<f64>,
    op: CscMatrix<f64>,
    chol: Arc<CscCholesky<f64>>,
    lumped: DVector<f64>,
    lumped_inv: DVector<f64>,
}

impl Prior {
    /// `m_true` is required for the informed kind and ignored otherwise.
    pub fn build(mesh: &Mesh, spec: &PriorSpec, m_true: Option<&DVector<f64>>) -> Result<Self> {
        let base = spec.base_operator(mesh)?;
        let n = mesh.num_nodes();
        let (mean, op) = match spec.kind {
            PriorKind::Standard => (DVector::zeros(n), base),
            PriorKind::Informed => {
                let truth = m_true.ok_or_else(|| {
                    Error::InvalidParameter("informed prior needs the true field".into())
                })?;
                if truth.len() != n {
                    return Err(Error::mismatch("true field length", n, truth.len()));
                }
                let moll = weighted_mass(mesh, |x, y| spec.mollifier(x, y)) * spec.penalty;
                let op = base + &moll;
                let rhs = spmv(&moll, truth.as_slice());
                let mean = factored_solve(&op, &factor(&op)?, &rhs)?;
                (mean, op)
            }
        };
        let chol = Arc::new(factor(&op)?);
        let lumped = lumped_mass(mesh);
        Ok(Self {
            spec: spec.clone(),
            mean,
            op,
            chol,
            lumped_inv: lumped.map(|v| 1.0 / v),
            lumped,
        })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// The operator `A` (`Ã`, or `Ã + p 𝓜` for the informed kind).
    pub fn operator(&self) -> &CscMatrix<f64> {
        &self.op
    }

    fn half(&self, m: &[f64]) -> Result<DVector<f64>> {
        if m.len() != self.mean.len() {
            return Err(Error::mismatch("nodal field length", self.mean.len(), m.len()));
        }
        let d = DVector::from_column_slice(m) - &self.mean;
        Ok(spmv(&self.op, d.as_slice()))
    }

    pub fn cost(&self, m: &[f64]) -> Result<f64> {
        let k = self.half(m)?;
        Ok(0.5 * k.component_mul(&self.lumped_inv).dot(&k))
    }

    pub fn cost_and_gradient(&self, m: &[f64]) -> Result<(f64, DVector<f64>)> {
        let k = self.half(m)?;
        let scaled = k.component_mul(&self.lumped_inv);
        Ok((0.5 * scaled.dot(&k), spmv(&self.op, scaled.as_slice())))
    }

    /// `A⁻¹ M_L A⁻¹ g`, the inverse Hessian of the regularization; used to
    /// precondition the optimizer.
    pub fn apply_inverse_hessian(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.mean.len() {
            return Err(Error::mismatch("nodal field length", self.mean.len(), g.len()));
        }
        let v = factored_solve(&self.op, &self.chol, g)?.component_mul(&self.lumped);
        factored_solve(&self.op, &self.chol, &v)
    }
}
