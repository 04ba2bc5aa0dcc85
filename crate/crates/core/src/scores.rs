//! Proper scoring rules for ensemble forecasts and their exact gradients.
//!
//! An [`Ensemble`] stores `Ns` model predictions of an `M`-dimensional
//! observable, one prediction per column. Scores compare the ensemble with a
//! single [`Observation`]; gradients are taken with respect to every ensemble
//! entry and have the same `M x Ns` shape as the ensemble.
//!
//! All reductions run in a fixed order (ascending member index, then ascending
//! observable index), so a score evaluated twice on the same data is
//! bit-identical regardless of how callers schedule work.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this threshold are treated as zero in the energy-score gradient.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// `Ns` model predictions of an `M`-dimensional observable, column per member.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    values: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyEnsemble);
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        let first = columns.first().ok_or(Error::EmptyEnsemble)?;
        let dim = first.len();
        for c in columns {
            if c.len() != dim {
                return Err(Error::mismatch("ensemble member length", dim, c.len()));
            }
        }
        Self::new(DMatrix::from_columns(columns))
    }

    /// Observable dimension `M`.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of members `Ns`.
    pub fn members(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    /// Member `i` as a contiguous slice.
    pub fn member(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.values.as_slice()[i * m..(i + 1) * m]
    }
}

/// An observed `M`-vector, optionally with the location of each component.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: DVector<f64>,
    sites: Option<Vec<Vec<f64>>>,
}

impl Observation {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        Ok(Self {
            values,
            sites: None,
        })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn with_sites(mut self, sites: Vec<Vec<f64>>) -> Result<Self> {
        if sites.len() != self.values.len() {
            return Err(Error::mismatch("observation sites", self.values.len(), sites.len()));
        }
        self.sites = Some(sites);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn sites(&self) -> Option<&[Vec<f64>]> {
        self.sites.as_deref()
    }
}

fn check_finite(values: &DMatrix<f64>) -> Result<()> {
    for (col, column) in values.column_iter().enumerate() {
        if let Some(row) = column.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

fn check_dims(ens: &Ensemble, obs: &Observation) -> Result<()> {
    if ens.dim() != obs.dim() {
        return Err(Error::mismatch("observation length", ens.dim(), obs.dim()));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn pow_abs(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 1.0 {
        x.abs()
    } else {
        x.abs().powf(p)
    }
}

/// Symmetric, zero-diagonal variogram weights with exponent `p`.
///
/// Only the strictly upper triangle with nonzero weight is stored; the score
/// counts both orderings of every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VariogramWeights {
    dim: usize,
    exponent: f64,
    pairs: Vec<(usize, usize, f64)>,
}

impl VariogramWeights {
    fn check_exponent(p: f64) -> Result<()> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variogram exponent must be positive, got {p}"
            )));
        }
        Ok(())
    }

    /// `w_ij = 1` for every `i != j`.
    pub fn constant(dim: usize, exponent: f64) -> Result<Self> {
        Self::check_exponent(exponent)?;
        let pairs = (0..dim)
            .flat_map(|i| (i + 1..dim).map(move |j| (i, j, 1.0)))
            .collect();
        Ok(Self {
            dim,
            exponent,
            pairs,
        })
    }

    /// `w_ij = 1 / |x_i - x_j|` from site coordinates.
    pub fn inverse_distance(sites: &[Vec<f64>], exponent: f64) -> Result<Self> {
        Self::check_exponent(exponent)?;
        let dim = sites.len();
        let mut pairs = Vec::with_capacity(dim * dim.saturating_sub(1) / 2);
        for i in 0..dim {
            for j in i + 1..dim {
                let d = distance(&sites[i], &sites[j]);
                if d <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "sites {i} and {j} coincide; inverse-distance weight undefined"
                    )));
                }
                pairs.push((i, j, 1.0 / d));
            }
        }
        Ok(Self {
            dim,
            exponent,
            pairs,
        })
    }

    /// Banded weights for `channels` stacked time series of `len` samples.
    ///
    /// Within a channel, samples at most `lag` steps apart get weight 1.
    /// Across channels, only samples at the same time index are paired.
    pub fn banded(channels: usize, len: usize, lag: usize, exponent: f64) -> Result<Self> {
        Self::check_exponent(exponent)?;
        let dim = channels * len;
        let mut pairs = Vec::new();
        for i in 0..dim {
            let (ci, ti) = (i / len, i % len);
            for j in i + 1..dim {
                let (cj, tj) = (j / len, j % len);
                let linked = if ci == cj {
                    tj - ti <= lag
                } else {
                    ti == tj
                };
                if linked {
                    pairs.push((i, j, 1.0));
                }
            }
        }
        Ok(Self {
            dim,
            exponent,
            pairs,
        })
    }

    /// Validates and compresses a dense weight matrix.
    pub fn from_dense(w: &DMatrix<f64>, exponent: f64) -> Result<Self> {
        Self::check_exponent(exponent)?;
        if w.nrows() != w.ncols() {
            return Err(Error::mismatch("weight matrix columns", w.nrows(), w.ncols()));
        }
        let dim = w.nrows();
        let mut pairs = Vec::new();
        for i in 0..dim {
            if w[(i, i)] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "weight diagonal must be zero (w[{i},{i}] = {})",
                    w[(i, i)]
                )));
            }
            for j in i + 1..dim {
                let (a, b) = (w[(i, j)], w[(j, i)]);
                if a != b {
                    return Err(Error::InvalidParameter(format!(
                        "weights not symmetric at ({i},{j})"
                    )));
                }
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "weight ({i},{j}) must be finite and nonnegative, got {a}"
                    )));
                }
                if a > 0.0 {
                    pairs.push((i, j, a));
                }
            }
        }
        Ok(Self {
            dim,
            exponent,
            pairs,
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, v) in &self.pairs {
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Stored pairs `(i, j, w_ij)` with `i < j`.
    pub fn pairs(&self) -> &[(usize, usize, f64)] {
        &self.pairs
    }
}

/// Coefficients of the hybrid score `alpha * ES + beta * VS`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridCoeffs {
    pub alpha: f64,
    pub beta: f64,
}

impl HybridCoeffs {
    /// Both coefficients must be nonnegative and at least one positive.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(alpha) || !ok(beta) || alpha + beta == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "hybrid coefficients must be nonnegative and not both zero (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Gradient of a score with respect to every ensemble entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    /// `M x Ns`, column `i` is the derivative with respect to member `i`.
    pub grad: DMatrix<f64>,
    /// Set when a coincident pair forced the zero subgradient.
    pub degenerate: bool,
}

/// Empirical CRPS of a scalar ensemble against `y`.
pub fn empirical_crps(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: 0, col: i });
    }
    if !y.is_finite() {
        return Err(Error::NonFinite { row: 0, col: 0 });
    }
    let n = samples.len() as f64;
    let mut accuracy = 0.0;
    for s in samples {
        accuracy += (s - y).abs();
    }
    let mut spread = 0.0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            spread += (samples[i] - samples[j]).abs();
        }
    }
    Ok(accuracy / n - 2.0 * spread / (2.0 * n * n))
}

fn ensemble_spread(ens: &Ensemble) -> f64 {
    let ns = ens.members();
    let mut spread = 0.0;
    for i in 0..ns {
        for j in i + 1..ns {
            spread += distance(ens.member(i), ens.member(j));
        }
    }
    spread
}

fn energy_from_spread(ens: &Ensemble, spread: f64, obs: &Observation) -> f64 {
    let n = ens.members() as f64;
    let y = obs.values().as_slice();
    let mut accuracy = 0.0;
    for i in 0..ens.members() {
        accuracy += distance(ens.member(i), y);
    }
    accuracy / n - 2.0 * spread / (2.0 * n * n)
}

/// Energy score `(1/Ns) sum |d_i - y| - (1/(2 Ns^2)) sum_ij |d_i - d_j|`.
pub fn energy_score(ens: &Ensemble, obs: &Observation) -> Result<f64> {
    check_dims(ens, obs)?;
    Ok(energy_from_spread(ens, ensemble_spread(ens), obs))
}

/// Exact gradient of [`energy_score`]. Coincident points contribute the zero
/// subgradient and set [`ScoreGradient::degenerate`].
pub fn energy_score_grad(ens: &Ensemble, obs: &Observation) -> Result<ScoreGradient> {
    check_dims(ens, obs)?;
    let (m, ns) = (ens.dim(), ens.members());
    let n = ns as f64;
    let y = obs.values().as_slice();
    let mut grad = DMatrix::zeros(m, ns);
    let mut degenerate = false;

    for i in 0..ns {
        let di = ens.member(i);
        let norm = distance(di, y);
        if norm < DEGENERACY_TOL {
            degenerate = true;
            continue;
        }
        let scale = 1.0 / (n * norm);
        for h in 0..m {
            grad[(h, i)] += scale * (di[h] - y[h]);
        }
    }
    // d/d(d_k) of -(1/(2 Ns^2)) sum_ij |d_i - d_j| = -(1/Ns^2) sum_j unit(d_k - d_j)
    for i in 0..ns {
        for j in i + 1..ns {
            let (di, dj) = (ens.member(i), ens.member(j));
            let norm = distance(di, dj);
            if norm < DEGENERACY_TOL {
                degenerate = true;
                continue;
            }
            let scale = 1.0 / (n * n * norm);
            for h in 0..m {
                let u = scale * (di[h] - dj[h]);
                grad[(h, i)] -= u;
                grad[(h, j)] += u;
            }
        }
    }
    Ok(ScoreGradient { grad, degenerate })
}

fn check_weights(ens: &Ensemble, w: &VariogramWeights) -> Result<()> {
    if w.dim() != ens.dim() {
        return Err(Error::mismatch("variogram weight dimension", ens.dim(), w.dim()));
    }
    Ok(())
}

/// Ensemble-mean variogram `(1/Ns) sum_k |d_k(i) - d_k(j)|^p` for every stored pair.
fn ensemble_variogram(ens: &Ensemble, w: &VariogramWeights) -> Vec<f64> {
    let n = ens.members() as f64;
    let p = w.exponent();
    w.pairs()
        .iter()
        .map(|&(i, j, _)| {
            let mut acc = 0.0;
            for k in 0..ens.members() {
                let d = ens.member(k);
                acc += pow_abs(d[i] - d[j], p);
            }
            acc / n
        })
        .collect()
}

fn variogram_from_means(w: &VariogramWeights, means: &[f64], obs: &Observation) -> f64 {
    let y = obs.values().as_slice();
    let p = w.exponent();
    let mut total = 0.0;
    for (&(i, j, wij), v) in w.pairs().iter().zip(means) {
        let c = pow_abs(y[i] - y[j], p) - v;
        total += wij * c * c;
    }
    2.0 * total
}

/// Variogram score of order `p`, both orderings of every pair counted.
pub fn variogram_score(ens: &Ensemble, obs: &Observation, w: &VariogramWeights) -> Result<f64> {
    check_dims(ens, obs)?;
    check_weights(ens, w)?;
    Ok(variogram_from_means(w, &ensemble_variogram(ens, w), obs))
}

/// Exact gradient of [`variogram_score`] for `p = 2`.
pub fn variogram_score_grad(
    ens: &Ensemble,
    obs: &Observation,
    w: &VariogramWeights,
) -> Result<ScoreGradient> {
    check_dims(ens, obs)?;
    check_weights(ens, w)?;
    if w.exponent() != 2.0 {
        return Err(Error::UnsupportedExponent(w.exponent()));
    }
    let (m, ns) = (ens.dim(), ens.members());
    let n = ns as f64;
    let y = obs.values().as_slice();
    let means = ensemble_variogram(ens, w);
    let mut grad = DMatrix::zeros(m, ns);
    for (&(i, j, wij), v) in w.pairs().iter().zip(&means) {
        let residual = (y[i] - y[j]) * (y[i] - y[j]) - v;
        if residual == 0.0 {
            continue;
        }
        // Both orderings: d/d d_k(i) of 2 w (a - v)^2 = -(8/Ns) w C (d_k(i) - d_k(j)).
        let coef = -8.0 / n * wij * residual;
        for k in 0..ns {
            let d = ens.member(k);
            let g = coef * (d[i] - d[j]);
            grad[(i, k)] += g;
            grad[(j, k)] -= g;
        }
    }
    Ok(ScoreGradient {
        grad,
        degenerate: false,
    })
}

/// `alpha * ES + beta * VS`.
pub fn hybrid_score(
    ens: &Ensemble,
    obs: &Observation,
    w: &VariogramWeights,
    c: HybridCoeffs,
) -> Result<f64> {
    Ok(c.alpha * energy_score(ens, obs)? + c.beta * variogram_score(ens, obs, w)?)
}

pub fn hybrid_score_grad(
    ens: &Ensemble,
    obs: &Observation,
    w: &VariogramWeights,
    c: HybridCoeffs,
) -> Result<ScoreGradient> {
    let es = energy_score_grad(ens, obs)?;
    let vs = variogram_score_grad(ens, obs, w)?;
    Ok(ScoreGradient {
        grad: es.grad * c.alpha + vs.grad * c.beta,
        degenerate: es.degenerate,
    })
}

/// How variogram weights are derived for a given observable layout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightScheme {
    #[default]
    Constant,
    InverseDistance,
    Banded { channels: usize, lag: usize },
}

fn default_exponent() -> f64 {
    2.0
}

/// Which score is active, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawScoreKind")]
pub enum ScoreKind {
    Crps,
    Energy,
    Variogram {
        weights: WeightScheme,
        exponent: f64,
    },
    Hybrid {
        alpha: f64,
        beta: f64,
        weights: WeightScheme,
        exponent: f64,
    },
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawTag {
    Crps,
    Energy,
    Variogram,
    Hybrid,
}

// Flat form used for strict parsing: serde cannot reject unknown keys on the
// unit variants of an internally tagged enum.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScoreKind {
    kind: RawTag,
    alpha: Option<f64>,
    beta: Option<f64>,
    weights: Option<WeightScheme>,
    exponent: Option<f64>,
}

impl TryFrom<RawScoreKind> for ScoreKind {
    type Error = String;

    fn try_from(raw: RawScoreKind) -> std::result::Result<Self, String> {
        let variogram_only = raw.weights.is_some() || raw.exponent.is_some();
        let hybrid_only = raw.alpha.is_some() || raw.beta.is_some();
        let weights = raw.weights.unwrap_or_default();
        let exponent = raw.exponent.unwrap_or_else(default_exponent);
        match raw.kind {
            RawTag::Crps | RawTag::Energy if variogram_only || hybrid_only => {
                Err("crps/energy scores take no parameters".into())
            }
            RawTag::Crps => Ok(ScoreKind::Crps),
            RawTag::Energy => Ok(ScoreKind::Energy),
            RawTag::Variogram if hybrid_only => Err("variogram score takes no alpha/beta".into()),
            RawTag::Variogram => Ok(ScoreKind::Variogram { weights, exponent }),
            RawTag::Hybrid => Ok(ScoreKind::Hybrid {
                alpha: raw.alpha.ok_or("hybrid score needs alpha")?,
                beta: raw.beta.ok_or("hybrid score needs beta")?,
                weights,
                exponent,
            }),
        }
    }
}

impl ScoreKind {
    pub fn variogram() -> Self {
        ScoreKind::Variogram {
            weights: WeightScheme::Constant,
            exponent: 2.0,
        }
    }

    pub fn hybrid(alpha: f64, beta: f64) -> Self {
        ScoreKind::Hybrid {
            alpha,
            beta,
            weights: WeightScheme::Constant,
            exponent: 2.0,
        }
    }

    /// Short tag used in file names and tables.
    pub fn label(&self) -> &'static str {
        match self {
            ScoreKind::Crps => "crps",
            ScoreKind::Energy => "es",
            ScoreKind::Variogram { .. } => "vs",
            ScoreKind::Hybrid { .. } => "hs",
        }
    }

    /// Replaces the weight scheme of variogram-based kinds.
    pub fn with_weights(&self, scheme: WeightScheme) -> Self {
        match self.clone() {
            ScoreKind::Variogram { exponent, .. } => ScoreKind::Variogram {
                weights: scheme,
                exponent,
            },
            ScoreKind::Hybrid {
                alpha,
                beta,
                exponent,
                ..
            } => ScoreKind::Hybrid {
                alpha,
                beta,
                weights: scheme,
                exponent,
            },
            other => other,
        }
    }
}

/// A score kind bound to an observable dimension (weights resolved).
#[derive(Debug, Clone)]
pub struct Scorer {
    kind: ScoreKind,
    dim: usize,
    weights: Option<VariogramWeights>,
    coeffs: Option<HybridCoeffs>,
}

/// Member-only statistics of an ensemble, reusable across observations.
#[derive(Debug)]
pub struct PreparedScore<'a> {
    scorer: &'a Scorer,
    ens: &'a Ensemble,
    spread: f64,
    variogram: Vec<f64>,
}

impl Scorer {
    pub fn new(kind: &ScoreKind, dim: usize, sites: Option<&[Vec<f64>]>) -> Result<Self> {
        let resolve = |scheme: &WeightScheme, p: f64| -> Result<VariogramWeights> {
            match *scheme {
                WeightScheme::Constant => VariogramWeights::constant(dim, p),
                WeightScheme::InverseDistance => {
                    let sites = sites.ok_or_else(|| {
                        Error::InvalidParameter(
                            "inverse-distance weights need observation sites".into(),
                        )
                    })?;
                    if sites.len() != dim {
                        return Err(Error::mismatch("observation sites", dim, sites.len()));
                    }
                    VariogramWeights::inverse_distance(sites, p)
                }
                WeightScheme::Banded { channels, lag } => {
                    if channels == 0 || dim % channels != 0 {
                        return Err(Error::InvalidParameter(format!(
                            "dimension {dim} is not divisible into {channels} channels"
                        )));
                    }
                    VariogramWeights::banded(channels, dim / channels, lag, p)
                }
            }
        };
        let (weights, coeffs) = match kind {
            ScoreKind::Crps => {
                if dim != 1 {
                    return Err(Error::InvalidParameter(format!(
                        "CRPS is univariate; observable dimension is {dim}"
                    )));
                }
                (None, None)
            }
            ScoreKind::Energy => (None, None),
            ScoreKind::Variogram { weights, exponent } => (Some(resolve(weights, *exponent)?), None),
            ScoreKind::Hybrid {
                alpha,
                beta,
                weights,
                exponent,
            } => (
                Some(resolve(weights, *exponent)?),
                Some(HybridCoeffs::new(*alpha, *beta)?),
            ),
        };
        Ok(Self {
            kind: kind.clone(),
            dim,
            weights,
            coeffs,
        })
    }

    pub fn kind(&self) -> &ScoreKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> Option<&VariogramWeights> {
        self.weights.as_ref()
    }

    /// Precomputes the member-only terms of the score for `ens`.
    pub fn prepare<'a>(&'a self, ens: &'a Ensemble) -> Result<PreparedScore<'a>> {
        if ens.dim() != self.dim {
            return Err(Error::mismatch("ensemble dimension", self.dim, ens.dim()));
        }
        let needs_spread = matches!(
            self.kind,
            ScoreKind::Energy | ScoreKind::Crps | ScoreKind::Hybrid { .. }
        );
        let spread = if needs_spread { ensemble_spread(ens) } else { 0.0 };
        let variogram = match &self.weights {
            Some(w) => ensemble_variogram(ens, w),
            None => Vec::new(),
        };
        Ok(PreparedScore {
            scorer: self,
            ens,
            spread,
            variogram,
        })
    }

    pub fn score(&self, ens: &Ensemble, obs: &Observation) -> Result<f64> {
        self.prepare(ens)?.score(obs)
    }

    pub fn gradient(&self, ens: &Ensemble, obs: &Observation) -> Result<ScoreGradient> {
        match &self.kind {
            ScoreKind::Crps | ScoreKind::Energy => energy_score_grad(ens, obs),
            ScoreKind::Variogram { .. } => {
                variogram_score_grad(ens, obs, self.weights.as_ref().expect("resolved"))
            }
            ScoreKind::Hybrid { .. } => hybrid_score_grad(
                ens,
                obs,
                self.weights.as_ref().expect("resolved"),
                self.coeffs.expect("resolved"),
            ),
        }
    }

    /// Instantaneous score against each row of `obs_batch` (`n x M`).
    pub fn batch_scores(&self, ens: &Ensemble, obs_batch: &DMatrix<f64>) -> Result<Vec<f64>> {
        if obs_batch.nrows() == 0 {
            return Err(Error::InvalidParameter("empty observation batch".into()));
        }
        if obs_batch.ncols() != self.dim {
            return Err(Error::mismatch("observation batch width", self.dim, obs_batch.ncols()));
        }
        let prepared = self.prepare(ens)?;
        obs_batch
            .row_iter()
            .map(|row| prepared.score(&Observation::new(row.transpose())?))
            .collect()
    }

    /// Mean score over the rows of `obs_batch`.
    pub fn mean_score(&self, ens: &Ensemble, obs_batch: &DMatrix<f64>) -> Result<f64> {
        let scores = self.batch_scores(ens, obs_batch)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

impl PreparedScore<'_> {
    pub fn score(&self, obs: &Observation) -> Result<f64> {
        check_dims(self.ens, obs)?;
        let es = || energy_from_spread(self.ens, self.spread, obs);
        let vs = || {
            variogram_from_means(
                self.scorer.weights.as_ref().expect("resolved"),
                &self.variogram,
                obs,
            )
        };
        Ok(match &self.scorer.kind {
            ScoreKind::Crps | ScoreKind::Energy => es(),
            ScoreKind::Variogram { .. } => vs(),
            ScoreKind::Hybrid { .. } => {
                let c = self.scorer.coeffs.expect("resolved");
                c.alpha * es() + c.beta * vs()
            }
        })
    }
}

/// Mean of the instantaneous score over the rows of `obs_batch` (`n x M`),
/// with default weights for `kind`.
pub fn mean_score(kind: &ScoreKind, ens: &Ensemble, obs_batch: &DMatrix<f64>) -> Result<f64> {
    Scorer::new(kind, ens.dim(), None)?.mean_score(ens, obs_batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn ens(cols: &[&[f64]]) -> Ensemble {
        let cols: Vec<_> = cols.iter().map(|c| DVector::from_column_slice(c)).collect();
        Ensemble::from_columns(&cols).unwrap()
    }

    fn obs(v: &[f64]) -> Observation {
        Observation::from_slice(v).unwrap()
    }

    #[test]
    fn crps_hand_values() {
        assert_eq!(empirical_crps(&[1.5], 1.5).unwrap(), 0.0);
        assert_eq!(empirical_crps(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        let c = empirical_crps(&[3.0; 7], -1.0).unwrap();
        assert!((c - 4.0).abs() < 1e-15);
        assert!(matches!(empirical_crps(&[], 0.0), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn energy_hand_values() {
        assert_eq!(energy_score(&ens(&[&[1.0, 2.0]]), &obs(&[1.0, 2.0])).unwrap(), 0.0);
        let e = ens(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(energy_score(&e, &obs(&[1.0, 0.0])).unwrap(), 0.5);
        assert!(matches!(
            energy_score(&e, &obs(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn energy_matches_crps_in_one_dimension() {
        let samples = [0.3, -1.2, 2.5, 0.7, 0.7];
        let cols: Vec<&[f64]> = samples.iter().map(std::slice::from_ref).collect();
        let es = energy_score(&ens(&cols), &obs(&[0.4])).unwrap();
        assert_eq!(es, empirical_crps(&samples, 0.4).unwrap());
    }

    #[test]
    fn energy_grad_single_sample() {
        let g = energy_score_grad(&ens(&[&[3.0]]), &obs(&[1.0])).unwrap();
        assert_eq!(g.grad, dmatrix![1.0]);
        assert!(!g.degenerate);
    }

    #[test]
    fn energy_grad_symmetric_pair() {
        let g = energy_score_grad(&ens(&[&[1.0, -2.0], &[-1.0, 2.0]]), &obs(&[0.0, 0.0])).unwrap();
        assert_eq!(g.grad.column(0), -g.grad.column(1));
    }

    #[test]
    fn energy_grad_flags_coincident_points() {
        let g = energy_score_grad(&ens(&[&[1.0], &[1.0]]), &obs(&[1.0])).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.grad, DMatrix::zeros(1, 2));
    }

    #[test]
    fn variogram_hand_values() {
        let w = VariogramWeights::constant(2, 2.0).unwrap();
        assert_eq!(variogram_score(&ens(&[&[0.0, 1.0]]), &obs(&[0.0, 1.0]), &w).unwrap(), 0.0);
        assert_eq!(variogram_score(&ens(&[&[0.0, 2.0]]), &obs(&[0.0, 1.0]), &w).unwrap(), 18.0);
    }

    #[test]
    fn variogram_grad_hand_values() {
        // S(d) = 2 (1 - (d1 - d2)^2)^2; at d = (0, 2): dS/dd1 = -8 (-3)(-2) = -48.
        let w = VariogramWeights::constant(2, 2.0).unwrap();
        let g = variogram_score_grad(&ens(&[&[0.0, 2.0]]), &obs(&[0.0, 1.0]), &w).unwrap();
        assert_eq!(g.grad, dmatrix![-48.0; 48.0]);
    }

    #[test]
    fn variogram_grad_vanishes_at_matching_variogram() {
        let w = VariogramWeights::constant(3, 2.0).unwrap();
        let g = variogram_score_grad(&ens(&[&[0.0, 1.0, 3.0]]), &obs(&[5.0, 6.0, 8.0]), &w).unwrap();
        assert_eq!(g.grad, DMatrix::zeros(3, 1));
    }

    #[test]
    fn variogram_grad_rejects_other_exponents() {
        let w = VariogramWeights::constant(2, 1.5).unwrap();
        let err = variogram_score_grad(&ens(&[&[0.0, 2.0]]), &obs(&[0.0, 1.0]), &w).unwrap_err();
        assert!(err.to_string().contains("p=2 only"));
    }

    #[test]
    fn weights_validation() {
        let bad_diag = dmatrix![1.0, 0.0; 0.0, 0.0];
        assert!(VariogramWeights::from_dense(&bad_diag, 2.0).is_err());
        let asym = dmatrix![0.0, 1.0; 2.0, 0.0];
        assert!(VariogramWeights::from_dense(&asym, 2.0).is_err());
        assert!(VariogramWeights::constant(3, 0.0).is_err());
        let w = VariogramWeights::constant(4, 2.0).unwrap();
        assert_eq!(VariogramWeights::from_dense(&w.to_dense(), 2.0).unwrap(), w);
    }

    #[test]
    fn inverse_distance_weights() {
        let sites = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]];
        let w = VariogramWeights::inverse_distance(&sites, 2.0).unwrap().to_dense();
        assert!((w[(0, 1)] - 0.2).abs() < 1e-15);
        assert!((w[(2, 0)] - 1.0).abs() < 1e-15);
        let dup = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!(VariogramWeights::inverse_distance(&dup, 2.0).is_err());
    }

    #[test]
    fn banded_weights_link_channels_at_equal_time() {
        let w = VariogramWeights::banded(2, 4, 1, 2.0).unwrap().to_dense();
        assert_eq!(w[(0, 1)], 1.0);
        assert_eq!(w[(0, 2)], 0.0);
        assert_eq!(w[(0, 4)], 1.0);
        assert_eq!(w[(0, 5)], 0.0);
        assert_eq!(w[(5, 6)], 1.0);
    }

    #[test]
    fn hybrid_degenerate_combination() {
        let e = ens(&[&[0.1, 0.5, -0.3], &[1.0, 0.2, 0.0]]);
        let o = obs(&[0.0, 0.4, 0.1]);
        let w = VariogramWeights::constant(3, 2.0).unwrap();
        let h = hybrid_score(&e, &o, &w, HybridCoeffs::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(h, energy_score(&e, &o).unwrap());
        assert!(HybridCoeffs::new(0.0, 0.0).is_err());
        assert!(HybridCoeffs::new(-0.1, 1.0).is_err());
        assert!(HybridCoeffs::new(0.1, 0.9).is_ok());
    }

    #[test]
    fn mean_score_averages_rows() {
        let e = ens(&[&[0.1, 0.5], &[1.0, 0.2], &[0.3, 0.3]]);
        let kind = ScoreKind::Energy;
        let single = dmatrix![0.2, 0.1];
        let s1 = energy_score(&e, &obs(&[0.2, 0.1])).unwrap();
        let s2 = energy_score(&e, &obs(&[-0.4, 0.9])).unwrap();
        assert_eq!(mean_score(&kind, &e, &single).unwrap(), s1);
        assert_eq!(mean_score(&kind, &e, &dmatrix![0.2, 0.1; 0.2, 0.1]).unwrap(), s1);
        let two = mean_score(&kind, &e, &dmatrix![0.2, 0.1; -0.4, 0.9]).unwrap();
        assert!((two - (s1 + s2) / 2.0).abs() < 1e-15);
        assert!(mean_score(&kind, &e, &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn scorer_matches_free_functions() {
        let e = ens(&[&[0.1, 0.5, -0.3], &[1.0, 0.2, 0.0]]);
        let o = obs(&[0.0, 0.4, 0.1]);
        let w = VariogramWeights::constant(3, 2.0).unwrap();
        let vs = Scorer::new(&ScoreKind::variogram(), 3, None).unwrap();
        assert_eq!(vs.score(&e, &o).unwrap(), variogram_score(&e, &o, &w).unwrap());
        let hs = Scorer::new(&ScoreKind::hybrid(0.1, 0.9), 3, None).unwrap();
        let direct = hybrid_score(&e, &o, &w, HybridCoeffs::new(0.1, 0.9).unwrap()).unwrap();
        assert_eq!(hs.score(&e, &o).unwrap(), direct);
        assert!(Scorer::new(&ScoreKind::Crps, 3, None).is_err());
    }

    #[test]
    fn score_kind_json_shape() {
        let kind: ScoreKind =
            serde_json::from_str(r#"{"kind":"hybrid","alpha":0.1,"beta":0.9}"#).unwrap();
        assert_eq!(kind, ScoreKind::hybrid(0.1, 0.9));
        let banded: ScoreKind = serde_json::from_str(
            r#"{"kind":"variogram","weights":{"scheme":"banded","channels":2,"lag":50}}"#,
        )
        .unwrap();
        assert_eq!(
            banded,
            ScoreKind::variogram().with_weights(WeightScheme::Banded { channels: 2, lag: 50 })
        );
        assert!(serde_json::from_str::<ScoreKind>(r#"{"kind":"energy","bogus":1}"#).is_err());
        assert!(serde_json::from_str::<ScoreKind>(r#"{"kind":"energy","alpha":1}"#).is_err());
        assert!(serde_json::from_str::<ScoreKind>(r#"{"kind":"hybrid","alpha":1}"#).is_err());
        let round: ScoreKind =
            serde_json::from_str(&serde_json::to_string(&ScoreKind::hybrid(0.1, 0.9)).unwrap())
                .unwrap();
        assert_eq!(round, ScoreKind::hybrid(0.1, 0.9));
    }

    #[test]
    fn ensemble_rejects_non_finite() {
        assert!(matches!(
            Ensemble::new(dmatrix![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(
            Ensemble::new(DMatrix::zeros(0, 3)),
            Err(Error::EmptyEnsemble)
        ));
    }
}
