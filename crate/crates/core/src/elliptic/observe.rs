//! Point observations by P1 interpolation.

use nalgebra::DVector;

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Linear map from nodal fields to values at `M` interior points.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    num_nodes: usize,
    points: Vec<[f64; 2]>,
    rows: Vec<([usize; 3], [f64; 3])>,
}

impl ObservationOperator {
    /// Points must lie in the open unit square.
    pub fn new(mesh: &Mesh, points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("no observation points".into()));
        }
        let rows = points
            .iter()
            .map(|&p| {
                if p.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
                    return Err(Error::InvalidParameter(format!(
                        "observation point ({}, {}) is not in the open unit square",
                        p[0], p[1]
                    )));
                }
                mesh.locate(p)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            num_nodes: mesh.num_nodes(),
            points: points.to_vec(),
            rows,
        })
    }

    /// `k × k` lattice at cell-centred positions `(i + 1/2)/k`, bottom row first.
    pub fn lattice(mesh: &Mesh, k: usize) -> Result<Self> {
        let pts: Vec<[f64; 2]> = (0..k)
            .flat_map(|j| (0..k).map(move |i| [(i as f64 + 0.5) / k as f64, (j as f64 + 0.5) / k as f64]))
            .collect();
        Self::new(mesh, &pts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Observation sites in the form used by distance-based score weights.
    pub fn sites(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }

    /// Interpolation nodes and barycentric weights of each point.
    pub fn rows(&self) -> &[([usize; 3], [f64; 3])] {
        &self.rows
    }

    pub fn apply(&self, u: &[f64]) -> Result<DVector<f64>> {
        if u.len() != self.num_nodes {
            return Err(Error::mismatch("nodal field length", self.num_nodes, u.len()));
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.rows
                .iter()
                .map(|(nodes, w)| nodes.iter().zip(w).map(|(&k, wk)| wk * u[k]).sum()),
        ))
    }

    pub fn apply_transpose(&self, w: &[f64]) -> Result<DVector<f64>> {
        if w.len() != self.len() {
            return Err(Error::mismatch("observation vector length", self.len(), w.len()));
        }
        let mut out = DVector::zeros(self.num_nodes);
        for ((nodes, bw), &wi) in self.rows.iter().zip(w) {
            for (&k, b) in nodes.iter().zip(bw) {
                out[k] += b * wi;
            }
        }
        Ok(out)
    }
}
