use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::read_matrix_csv;
use crate::scores::{Ensemble, ScoreKind, Scorer};

#[derive(Debug, Clone, Serialize)]
pub struct ScoreRecord {
    pub kind: ScoreKind,
    pub dim: usize,
    pub members: usize,
    /// Score against each observation row.
    pub per_observation: Vec<f64>,
    /// Mean over observations; the value reported to the user.
    pub value: f64,
}

/// Scores an `M × Ns` ensemble CSV against an `n × M` observation CSV
/// (a single `M × 1` column is also accepted).
pub fn score_eval(ensemble: &Path, observations: &Path, kind: &ScoreKind) -> Result<ScoreRecord> {
    let ens = Ensemble::new(read_matrix_csv(ensemble)?)?;
    let mut obs = read_matrix_csv(observations)?;
    if obs.ncols() != ens.dim() && obs.ncols() == 1 && obs.nrows() == ens.dim() {
        obs = obs.transpose();
    }
    if obs.ncols() != ens.dim() {
        return Err(Error::Parse {
            file: observations.display().to_string(),
            line: 1,
            message: format!("expected {} columns to match the ensemble, found {}", ens.dim(), obs.ncols()),
        });
    }
    let scorer = Scorer::new(kind, ens.dim(), None)?;
    let per_observation = scorer.batch_scores(&ens, &obs)?;
    let value = per_observation.iter().sum::<f64>() / per_observation.len() as f64;
    Ok(ScoreRecord {
        kind: kind.clone(),
        dim: ens.dim(),
        members: ens.members(),
        per_observation,
        value,
    })
}
