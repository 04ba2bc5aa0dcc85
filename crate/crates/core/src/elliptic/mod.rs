//! Stochastic elliptic problem `-∇·(e^m ∇u) = f` on the unit square with
//! `u = 0` at the bottom, `u = 1` at the top and no flow through the sides.

mod fem;
mod field;
mod mesh;
mod objective;
mod observe;
mod prior;

pub use fem::{
    anisotropic_stiffness, element_coefficients, lumped_mass, mass, spmv, stiffness,
    weighted_mass, ForwardOperator,
};
pub use field::{read_field, write_field};
pub use mesh::{Element, Mesh, NodeTag};
pub use objective::{EllipticProblem, Evaluation, Objective};
pub use observe::ObservationOperator;
pub use prior::{default_points, default_theta, sample_field, Prior, PriorKind, PriorSpec};

use crate::stochastic::{GpSpec, Kernel, Mean};

/// Zero-mean forcing process with the anisotropic squared-exponential kernel.
pub fn forcing_spec() -> GpSpec {
    GpSpec::new(Mean::Constant(0.0), Kernel::elliptic_forcing())
}
