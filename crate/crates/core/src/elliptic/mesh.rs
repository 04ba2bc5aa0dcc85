//! Uniform right-triangulated mesh of the unit square.

use crate::error::{Error, Result};
use crate::stochastic::PointSet;

/// Boundary classification of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTag {
    Interior,
    /// `y = 0`, including the two bottom corners.
    DirichletBottom,
    /// `y = 1`, including the two top corners.
    DirichletTop,
    /// `x = 0` or `x = 1` with `0 < y < 1`.
    Neumann,
}

/// Triangle with precomputed area and basis-function gradients.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub nodes: [usize; 3],
    pub area: f64,
    pub grads: [[f64; 2]; 3],
}

/// `nx × ny` cells on `[0,1]²`, each split along its lower-left to
/// upper-right diagonal. Nodes are numbered row by row from the bottom.
#[derive(Debug, Clone)]
pub struct Mesh {
    nx: usize,
    ny: usize,
    elements: Vec<Element>,
}

impl Mesh {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidParameter(format!(
                "mesh needs at least one cell per direction (got {nx}×{ny})"
            )));
        }
        let mut mesh = Mesh {
            nx,
            ny,
            elements: Vec::with_capacity(2 * nx * ny),
        };
        for j in 0..ny {
            for i in 0..nx {
                let a = mesh.node_index(i, j);
                let b = mesh.node_index(i + 1, j);
                let c = mesh.node_index(i + 1, j + 1);
                let d = mesh.node_index(i, j + 1);
                for tri in [[a, b, c], [a, c, d]] {
                    let el = mesh.make_element(tri);
                    mesh.elements.push(el);
                }
            }
        }
        Ok(mesh)
    }

    fn make_element(&self, nodes: [usize; 3]) -> Element {
        let [p0, p1, p2] = nodes.map(|k| self.coords(k));
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let grads = [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ];
        Element {
            nodes,
            area: 0.5 * det.abs(),
            grads,
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn coords(&self, k: usize) -> [f64; 2] {
        let i = k % (self.nx + 1);
        let j = k / (self.nx + 1);
        [i as f64 * self.hx(), j as f64 * self.hy()]
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn tag(&self, k: usize) -> NodeTag {
        let i = k % (self.nx + 1);
        let j = k / (self.nx + 1);
        if j == 0 {
            NodeTag::DirichletBottom
        } else if j == self.ny {
            NodeTag::DirichletTop
        } else if i == 0 || i == self.nx {
            NodeTag::Neumann
        } else {
            NodeTag::Interior
        }
    }

    pub fn is_dirichlet(&self, k: usize) -> bool {
        matches!(self.tag(k), NodeTag::DirichletBottom | NodeTag::DirichletTop)
    }

    /// Node coordinates as a [`PointSet`] (for sampling nodal GP fields).
    pub fn node_points(&self) -> PointSet {
        let pts: Vec<[f64; 2]> = (0..self.num_nodes()).map(|k| self.coords(k)).collect();
        PointSet::planar(&pts)
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.num_nodes())
            .map(|k| {
                let [x, y] = self.coords(k);
                f(x, y)
            })
            .collect()
    }

    /// Containing triangle and barycentric weights of a point in `[0,1]²`.
    pub fn locate(&self, p: [f64; 2]) -> Result<([usize; 3], [f64; 3])> {
        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            return Err(Error::InvalidParameter(format!(
                "point ({}, {}) lies outside the unit square",
                p[0], p[1]
            )));
        }
        let sx = p[0] * self.nx as f64;
        let sy = p[1] * self.ny as f64;
        let i = (sx.floor() as usize).min(self.nx - 1);
        let j = (sy.floor() as usize).min(self.ny - 1);
        let xi = sx - i as f64;
        let eta = sy - j as f64;
        let a = self.node_index(i, j);
        let b = self.node_index(i + 1, j);
        let c = self.node_index(i + 1, j + 1);
        let d = self.node_index(i, j + 1);
        Ok(if xi >= eta {
            ([a, b, c], [1.0 - xi, xi - eta, eta])
        } else {
            ([a, c, d], [1.0 - eta, xi, eta - xi])
        })
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_cover_boundary_once() {
        let m = Mesh::new(4, 3).unwrap();
        let count = |t| (0..m.num_nodes()).filter(|&k| m.tag(k) == t).count();
        assert_eq!(count(NodeTag::DirichletBottom), 5);
        assert_eq!(count(NodeTag::DirichletTop), 5);
        assert_eq!(count(NodeTag::Neumann), 4);
        assert_eq!(count(NodeTag::Interior), 6);
    }

    #[test]
    fn element_areas_sum_to_one_and_gradients_partition() {
        let m = Mesh::new(5, 7).unwrap();
        let total: f64 = m.elements().iter().map(|e| e.area).sum();
        assert!((total - 1.0).abs() < 1e-14);
        for e in m.elements() {
            let gx: f64 = e.grads.iter().map(|g| g[0]).sum();
            let gy: f64 = e.grads.iter().map(|g| g[1]).sum();
            assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
        }
    }

    #[test]
    fn locate_reproduces_coordinates() {
        let m = Mesh::new(6, 4).unwrap();
        for p in [[0.1, 0.9], [0.5, 0.5], [0.33, 0.71], [1.0, 1.0], [0.0, 0.0]] {
            let (nodes, w) = m.locate(p).unwrap();
            assert!(w.iter().all(|&v| v >= -1e-15));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for d in 0..2 {
                let r: f64 = nodes.iter().zip(w).map(|(&k, wk)| wk * m.coords(k)[d]).sum();
                assert!((r - p[d]).abs() < 1e-14);
            }
        }
        assert!(m.locate([1.2, 0.5]).is_err());
    }
}
