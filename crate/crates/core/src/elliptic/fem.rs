//! P1 assembly and the factored forward operator.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use super::mesh::{Mesh, NodeTag};
use super::observe::ObservationOperator;
use crate::error::{Error, Result};

/// Sparse matrix-vector product.
pub fn spmv(a: &CscMatrix<f64>, x: &[f64]) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    for (j, col) in a.col_iter().enumerate() {
        let xj = x[j];
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            y[i] += v * xj;
        }
    }
    y
}

fn assemble_elementwise(mesh: &Mesh, local: impl Fn(usize) -> [[f64; 3]; 3]) -> CscMatrix<f64> {
    let n = mesh.num_nodes();
    let mut coo = CooMatrix::new(n, n);
    for (e, el) in mesh.elements().iter().enumerate() {
        let k = local(e);
        for a in 0..3 {
            for b in 0..3 {
                coo.push(el.nodes[a], el.nodes[b], k[a][b]);
            }
        }
    }
    CscMatrix::from(&coo)
}

/// `exp` of the element-mean of nodal `m`, one value per element.
pub fn element_coefficients(mesh: &Mesh, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != mesh.num_nodes() {
        return Err(Error::mismatch("nodal field length", mesh.num_nodes(), m.len()));
    }
    if let Some(node) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::CoefficientOverflow {
            node,
            value: m[node],
        });
    }
    mesh.elements()
        .iter()
        .map(|el| {
            let kappa = (el.nodes.iter().map(|&k| m[k]).sum::<f64>() / 3.0).exp();
            if kappa.is_finite() && kappa > 0.0 {
                Ok(kappa)
            } else {
                let node = *el
                    .nodes
                    .iter()
                    .max_by(|&&a, &&b| m[a].abs().total_cmp(&m[b].abs()))
                    .expect("three nodes");
                Err(Error::CoefficientOverflow {
                    node,
                    value: m[node],
                })
            }
        })
        .collect()
}

/// Stiffness matrix `∫ κ ∇φ_a·∇φ_b` with a per-element coefficient.
pub fn stiffness(mesh: &Mesh, kappa: &[f64]) -> CscMatrix<f64> {
    assemble_elementwise(mesh, |e| {
        let el = &mesh.elements()[e];
        let mut k = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let g = el.grads[a][0] * el.grads[b][0] + el.grads[a][1] * el.grads[b][1];
                k[a][b] = kappa[e] * el.area * g;
            }
        }
        k
    })
}

/// Tensor-weighted stiffness `∫ ∇φ_aᵀ Θ ∇φ_b`.
pub fn anisotropic_stiffness(mesh: &Mesh, theta: [[f64; 2]; 2]) -> CscMatrix<f64> {
    assemble_elementwise(mesh, |e| {
        let el = &mesh.elements()[e];
        let mut k = [[0.0; 3]; 3];
        for a in 0..3 {
            let ga = el.grads[a];
            let tg = [
                theta[0][0] * ga[0] + theta[0][1] * ga[1],
                theta[1][0] * ga[0] + theta[1][1] * ga[1],
            ];
            for b in 0..3 {
                k[a][b] = el.area * (tg[0] * el.grads[b][0] + tg[1] * el.grads[b][1]);
            }
        }
        k
    })
}

/// Consistent mass matrix.
pub fn mass(mesh: &Mesh) -> CscMatrix<f64> {
    assemble_elementwise(mesh, |e| {
        let area = mesh.elements()[e].area;
        let mut k = [[area / 12.0; 3]; 3];
        for (a, row) in k.iter_mut().enumerate() {
            row[a] = area / 6.0;
        }
        k
    })
}

/// Mass matrix weighted by `w(x, y)`, integrated with the edge-midpoint rule
/// (exact for `w` constant).
pub fn weighted_mass(mesh: &Mesh, w: impl Fn(f64, f64) -> f64) -> CscMatrix<f64> {
    assemble_elementwise(mesh, |e| {
        let el = &mesh.elements()[e];
        let p = el.nodes.map(|k| mesh.coords(k));
        let mut k = [[0.0; 3]; 3];
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            let wq = w(0.5 * (p[a][0] + p[b][0]), 0.5 * (p[a][1] + p[b][1])) * el.area / 3.0;
            // Only the two endpoint basis functions are nonzero (= 1/2) here.
            for i in [a, b] {
                for j in [a, b] {
                    k[i][j] += 0.25 * wq;
                }
            }
        }
        k
    })
}

/// Row sums of the consistent mass matrix.
pub fn lumped_mass(mesh: &Mesh) -> DVector<f64> {
    let mut d = DVector::zeros(mesh.num_nodes());
    for el in mesh.elements() {
        for &k in &el.nodes {
            d[k] += el.area / 3.0;
        }
    }
    d
}

/// Cholesky factorization of an SPD sparse matrix.
pub fn factor(a: &CscMatrix<f64>) -> Result<CscCholesky<f64>> {
    CscCholesky::factor(a).map_err(|e| {
        Error::SolverBreakdown(format!(
            "sparse Cholesky of a {}×{} matrix with {} nonzeros failed: {e}",
            a.nrows(),
            a.ncols(),
            a.nnz()
        ))
    })
}

/// Solves with a sparse Cholesky factor and checks the relative residual.
pub fn factored_solve(
    a: &CscMatrix<f64>,
    chol: &CscCholesky<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x: DVector<f64> = chol.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice())).column(0).into();
    let r = spmv(a, x.as_slice()) - b;
    let scale = inf_norm(a) * x.amax() + b.amax();
    let rel = if scale > 0.0 { r.amax() / scale } else { 0.0 };
    if !(rel <= 1e-10) {
        return Err(Error::SolverBreakdown(format!(
            "relative residual {rel:e} after sparse Cholesky solve"
        )));
    }
    Ok(x)
}

fn inf_norm(a: &CscMatrix<f64>) -> f64 {
    let mut rows = vec![0.0_f64; a.nrows()];
    for col in a.col_iter() {
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            rows[i] += v.abs();
        }
    }
    rows.into_iter().fold(0.0, f64::max)
}

/// Stiffness operator for one coefficient field, with Dirichlet rows
/// eliminated and the reduced SPD system factored once.
///
/// The Dirichlet data is `u = 0` on the bottom edge and `u = 1` on the top.
#[derive(Debug)]
pub struct ForwardOperator {
    kappa: Vec<f64>,
    full: CscMatrix<f64>,
    reduced: CscMatrix<f64>,
    chol: CscCholesky<f64>,
    free: Vec<usize>,
    lift: DVector<f64>,
    lift_rhs: DVector<f64>,
}

impl ForwardOperator {
    pub fn assemble(mesh: &Mesh, m: &[f64]) -> Result<Self> {
        let kappa = element_coefficients(mesh, m)?;
        let full = stiffness(mesh, &kappa);
        let n = mesh.num_nodes();
        let free: Vec<usize> = (0..n).filter(|&k| !mesh.is_dirichlet(k)).collect();
        let mut position = vec![usize::MAX; n];
        for (r, &k) in free.iter().enumerate() {
            position[k] = r;
        }
        let mut coo = CooMatrix::new(free.len(), free.len());
        for (j, col) in full.col_iter().enumerate() {
            if position[j] == usize::MAX {
                continue;
            }
            for (&i, &v) in col.row_indices().iter().zip(col.values()) {
                if position[i] != usize::MAX {
                    coo.push(position[i], position[j], v);
                }
            }
        }
        let reduced = CscMatrix::from(&coo);
        let chol = factor(&reduced)?;
        let lift = DVector::from_fn(n, |k, _| {
            if mesh.tag(k) == NodeTag::DirichletTop {
                1.0
            } else {
                0.0
            }
        });
        let a_lift = spmv(&full, lift.as_slice());
        let lift_rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -a_lift[k]));
        Ok(Self {
            kappa,
            full,
            reduced,
            chol,
            free,
            lift,
            lift_rhs,
        })
    }

    /// Element coefficients `exp(m)` at centroids.
    pub fn coefficients(&self) -> &[f64] {
        &self.kappa
    }

    /// Full stiffness matrix before elimination.
    pub fn stiffness(&self) -> &CscMatrix<f64> {
        &self.full
    }

    /// Stiffness restricted to the non-Dirichlet nodes.
    pub fn reduced_matrix(&self) -> &CscMatrix<f64> {
        &self.reduced
    }

    /// Indices of the non-Dirichlet nodes, in reduced-system order.
    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&k| v[k]))
    }

    fn extend(&self, base: &DVector<f64>, reduced: &DVector<f64>) -> DVector<f64> {
        let mut out = base.clone();
        for (r, &k) in self.free.iter().enumerate() {
            out[k] = reduced[r];
        }
        out
    }

    /// State for the load vector `b_k = ∫ f φ_k` (full length).
    pub fn solve_forward(&self, load: &DVector<f64>) -> Result<DVector<f64>> {
        if load.len() != self.lift.len() {
            return Err(Error::mismatch("load vector length", self.lift.len(), load.len()));
        }
        let rhs = self.restrict(load) + &self.lift_rhs;
        let x = factored_solve(&self.reduced, &self.chol, &rhs)?;
        Ok(self.extend(&self.lift, &x))
    }

    /// Solves with homogeneous Dirichlet data and full-length right-hand side.
    pub fn solve_homogeneous(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.lift.len() {
            return Err(Error::mismatch("right-hand side length", self.lift.len(), rhs.len()));
        }
        let x = factored_solve(&self.reduced, &self.chol, &self.restrict(rhs))?;
        Ok(self.extend(&DVector::zeros(self.lift.len()), &x))
    }

    /// Adjoint state for right-hand side `-Bᵀ w`.
    pub fn solve_adjoint(&self, obs: &ObservationOperator, w: &[f64]) -> Result<DVector<f64>> {
        let rhs = -obs.apply_transpose(w)?;
        self.solve_homogeneous(&rhs)
    }

    /// Nodal derivative of `pᵀ A(m) u` with respect to `m`.
    pub fn coefficient_sensitivity(&self, mesh: &Mesh, u: &[f64], p: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(mesh.num_nodes());
        for (el, &kappa) in mesh.elements().iter().zip(&self.kappa) {
            let mut gu = [0.0; 2];
            let mut gp = [0.0; 2];
            for (a, &k) in el.nodes.iter().enumerate() {
                for d in 0..2 {
                    gu[d] += u[k] * el.grads[a][d];
                    gp[d] += p[k] * el.grads[a][d];
                }
            }
            let c = kappa * el.area * (gu[0] * gp[0] + gu[1] * gp[1]) / 3.0;
            for &k in &el.nodes {
                g[k] += c;
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(a: &CscMatrix<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(a.nrows(), a.ncols());
        for (i, j, v) in a.triplet_iter() {
            d[(i, j)] += *v;
        }
        d
    }

    #[test]
    fn mass_integrates_constants() {
        let mesh = Mesh::new(4, 5).unwrap();
        let m = dense(&mass(&mesh));
        let ones = DVector::from_element(mesh.num_nodes(), 1.0);
        assert!(((ones.transpose() * &m * &ones)[0] - 1.0).abs() < 1e-13);
        let w = dense(&weighted_mass(&mesh, |_, _| 1.0));
        assert!((w - &m).amax() < 1e-15);
        assert!((lumped_mass(&mesh).sum() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let mesh = Mesh::new(3, 3).unwrap();
        let k = stiffness(&mesh, &vec![2.0; mesh.elements().len()]);
        let r = spmv(&k, &vec![1.0; mesh.num_nodes()]);
        assert!(r.amax() < 1e-13);
        let iso = dense(&anisotropic_stiffness(&mesh, [[1.0, 0.0], [0.0, 1.0]]));
        let plain = dense(&stiffness(&mesh, &vec![1.0; mesh.elements().len()]));
        assert!((iso - plain).amax() < 1e-14);
    }

    #[test]
    fn overflow_reports_node() {
        let mesh = Mesh::new(2, 2).unwrap();
        let mut m = vec![0.0; mesh.num_nodes()];
        m[4] = 3000.0;
        match ForwardOperator::assemble(&mesh, &m) {
            Err(Error::CoefficientOverflow { node, .. }) => assert_eq!(node, 4),
            other => panic!("{other:?}"),
        }
    }
}
