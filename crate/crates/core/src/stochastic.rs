//! Gaussian-process forcing: covariance kernels, seeded sampling, and
//! pinned scenario sets.
//!
//! Every draw comes from a ChaCha stream selected by `(seed, index)`, so draw
//! `i` does not depend on how many other draws were made before it or on
//! which thread made them.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_lower;

/// Generator for stream `stream` of base seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` i.i.d. standard normals from stream `(seed, stream)`.
pub fn standard_normals(seed: u64, stream: u64, n: usize) -> DVector<f64> {
    let mut rng = stream_rng(seed, stream);
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `N` points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coordinates do not form points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn planar(points: &[[f64; 2]]) -> Self {
        Self {
            dim: 2,
            coords: points.iter().flatten().copied().collect(),
        }
    }

    pub fn times(times: &[f64]) -> Self {
        Self {
            dim: 1,
            coords: times.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

/// Covariance kernel families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `sigma^2 exp(-hx^2/lx^2 - hy^2/ly^2)`, plus `nugget` on the diagonal.
    SquaredExponential2d {
        sigma: f64,
        length_x: f64,
        length_y: f64,
        nugget: f64,
    },
    /// `scale_sq * (exp(-h^2/length_sq) + floor)` over time lags.
    ///
    /// The floor makes every pair of times correlated, and the exponential
    /// part is numerically singular on a fine grid, so `jitter` (relative to
    /// the lag-zero variance) is added to the diagonal before factoring.
    TemporalSquaredExponential {
        scale_sq: f64,
        length_sq: f64,
        floor: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
}

fn default_jitter() -> f64 {
    1e-8
}

impl Kernel {
    /// Elliptic volume forcing: `sigma = 0.7`, lengths `0.1875 x 0.1406`, nugget `1e-4`.
    pub fn elliptic_forcing() -> Self {
        Kernel::SquaredExponential2d {
            sigma: 0.7,
            length_x: 0.1875,
            length_y: 0.1406,
            nugget: 1e-4,
        }
    }

    /// Temporal load kernel `scale^2 (exp(-h^2/0.002) + 0.1)`.
    pub fn load(scale: f64) -> Self {
        Kernel::TemporalSquaredExponential {
            scale_sq: scale * scale,
            length_sq: 0.002,
            floor: 0.1,
            jitter: default_jitter(),
        }
    }

    fn point_dim(&self) -> usize {
        match self {
            Kernel::SquaredExponential2d { .. } => 2,
            Kernel::TemporalSquaredExponential { .. } => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!("kernel {what} must be positive, got {v}")))
        };
        match *self {
            Kernel::SquaredExponential2d {
                sigma,
                length_x,
                length_y,
                nugget,
            } => {
                if !(sigma > 0.0) {
                    return bad("sigma", sigma);
                }
                if !(length_x > 0.0) {
                    return bad("length_x", length_x);
                }
                if !(length_y > 0.0) {
                    return bad("length_y", length_y);
                }
                if !(nugget >= 0.0) {
                    return Err(Error::InvalidParameter(format!("negative nugget {nugget}")));
                }
            }
            Kernel::TemporalSquaredExponential {
                scale_sq,
                length_sq,
                floor,
                jitter,
            } => {
                if !(scale_sq > 0.0) {
                    return bad("scale_sq", scale_sq);
                }
                if !(length_sq > 0.0) {
                    return bad("length_sq", length_sq);
                }
                if !(floor >= 0.0) || !(jitter >= 0.0) {
                    return Err(Error::InvalidParameter("negative floor or jitter".into()));
                }
            }
        }
        Ok(())
    }

    /// Kernel value between two points, without the diagonal nugget/jitter.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::SquaredExponential2d {
                sigma,
                length_x,
                length_y,
                ..
            } => {
                let hx = a[0] - b[0];
                let hy = a[1] - b[1];
                sigma * sigma * (-(hx * hx) / (length_x * length_x) - (hy * hy) / (length_y * length_y)).exp()
            }
            Kernel::TemporalSquaredExponential {
                scale_sq,
                length_sq,
                floor,
                ..
            } => {
                let h = a[0] - b[0];
                scale_sq * ((-(h * h) / length_sq).exp() + floor)
            }
        }
    }

    /// Amount added to every diagonal entry.
    pub fn diagonal_shift(&self) -> f64 {
        match *self {
            Kernel::SquaredExponential2d { nugget, .. } => nugget,
            Kernel::TemporalSquaredExponential {
                scale_sq,
                floor,
                jitter,
                ..
            } => jitter * scale_sq * (1.0 + floor),
        }
    }
}

/// Constant or pointwise mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mean {
    Constant(f64),
    Vector(Vec<f64>),
}

/// A Gaussian process: mean plus kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    pub mean: Mean,
    pub kernel: Kernel,
}

impl GpSpec {
    pub fn new(mean: Mean, kernel: Kernel) -> Self {
        Self { mean, kernel }
    }

    fn mean_vector(&self, n: usize) -> Result<DVector<f64>> {
        match &self.mean {
            Mean::Constant(c) => Ok(DVector::from_element(n, *c)),
            Mean::Vector(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            Mean::Vector(v) => Err(Error::mismatch("mean vector length", n, v.len())),
        }
    }
}

fn assemble_covariance(points: &PointSet, spec: &GpSpec) -> Result<DMatrix<f64>> {
    spec.kernel.validate()?;
    if points.dim() != spec.kernel.point_dim() {
        return Err(Error::mismatch("point dimension", spec.kernel.point_dim(), points.dim()));
    }
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidParameter("covariance needs at least one point".into()));
    }
    let shift = spec.kernel.diagonal_shift();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = spec.kernel.eval(points.point(i), points.point(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(j, j)] += shift;
    }
    Ok(k)
}

/// Covariance matrix of `spec` at `points`, verified positive definite.
pub fn build_covariance(points: &PointSet, spec: &GpSpec) -> Result<DMatrix<f64>> {
    let k = assemble_covariance(points, spec)?;
    cholesky_lower(&k)?;
    Ok(k)
}

/// A factored Gaussian process ready to draw samples.
#[derive(Debug, Clone)]
pub struct GpSampler {
    spec: GpSpec,
    points: PointSet,
    mean: DVector<f64>,
    lower: DMatrix<f64>,
}

impl GpSampler {
    pub fn new(spec: GpSpec, points: PointSet) -> Result<Self> {
        let k = assemble_covariance(&points, &spec)?;
        let lower = cholesky_lower(&k)?;
        let mean = spec.mean_vector(points.len())?;
        Ok(Self {
            spec,
            points,
            mean,
            lower,
        })
    }

    pub fn spec(&self) -> &GpSpec {
        &self.spec
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn lower_factor(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Draw number `index` of the stream family `seed`.
    pub fn draw(&self, seed: u64, index: u64) -> DVector<f64> {
        let z = standard_normals(seed, index, self.points.len());
        &self.mean + &self.lower * z
    }

    /// `count` draws with indices `0..count`, one per row.
    pub fn sample(&self, count: usize, seed: u64) -> SampleBatch {
        let rows: Vec<DVector<f64>> = (0..count as u64)
            .into_par_iter()
            .map(|i| self.draw(seed, i))
            .collect();
        let n = self.points.len();
        let mut samples = DMatrix::zeros(count, n);
        for (i, r) in rows.iter().enumerate() {
            samples.set_row(i, &r.transpose());
        }
        SampleBatch {
            samples,
            seed,
            points: self.points.clone(),
            spec: self.spec.clone(),
        }
    }
}

/// Draws `count` samples of `spec` at `points`.
pub fn sample(spec: &GpSpec, points: &PointSet, count: usize, seed: u64) -> Result<SampleBatch> {
    Ok(GpSampler::new(spec.clone(), points.clone())?.sample(count, seed))
}

/// `K` draws at `N` points (one draw per row) with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: DMatrix<f64>,
    pub seed: u64,
    pub points: PointSet,
    pub spec: GpSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchSidecar {
    seed: u64,
    count: usize,
    spec: GpSpec,
    points: PointSet,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

impl SampleBatch {
    pub fn count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    /// Writes the draws as CSV plus a `<path>.json` sidecar with spec and seed.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_matrix_csv(path, &self.samples)?;
        let sidecar = BatchSidecar {
            seed: self.seed,
            count: self.count(),
            spec: self.spec.clone(),
            points: self.points.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let sidecar: BatchSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let samples = crate::io::read_matrix_csv(path)?;
        if samples.nrows() != sidecar.count {
            return Err(Error::mismatch("sample count", sidecar.count, samples.nrows()));
        }
        if samples.ncols() != sidecar.points.len() {
            return Err(Error::mismatch("sample width", sidecar.points.len(), samples.ncols()));
        }
        Ok(Self {
            samples,
            seed: sidecar.seed,
            points: sidecar.points,
            spec: sidecar.spec,
        })
    }
}
