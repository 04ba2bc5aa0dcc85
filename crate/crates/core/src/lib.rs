//! Inverse problems constrained by stochastic forward models, solved with
//! proper scoring rules as objective functions.

pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod optimize;
pub mod powergrid;
pub mod scores;
pub mod stochastic;
pub mod verify;

pub use error::{Error, Result};
