use nalgebra::DMatrix;
use serde::Serialize;

use crate::elliptic::{forcing_spec, sample_field, EllipticProblem, Objective, Prior, PriorSpec};
use crate::error::Result;
use crate::scores::{Ensemble, Observation, ScoreKind, Scorer, WeightScheme};
use crate::stochastic::{sample, standard_normals};

const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub suite: &'static str,
    pub case: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn row(suite: &'static str, case: String, err: f64) -> GradcheckRow {
    GradcheckRow {
        suite,
        case,
        max_rel_error: err,
        tolerance: TOLERANCE,
        pass: err <= TOLERANCE,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn kinds() -> Vec<ScoreKind> {
    vec![
        ScoreKind::Energy,
        ScoreKind::variogram(),
        ScoreKind::variogram().with_weights(WeightScheme::InverseDistance),
        ScoreKind::hybrid(1.0, 0.5),
    ]
}

fn kind_name(k: &ScoreKind) -> String {
    match k {
        ScoreKind::Variogram {
            weights: WeightScheme::InverseDistance,
            ..
        } => "vs-inverse-distance".into(),
        other => other.label().into(),
    }
}

/// Central differences of each score against its analytic ensemble gradient.
fn score_suite(rows: &mut Vec<GradcheckRow>) -> Result<()> {
    let (dim, ns) = (6, 4);
    let z = standard_normals(7, 0, dim * ns);
    let values = DMatrix::from_column_slice(dim, ns, z.as_slice());
    let sites: Vec<Vec<f64>> = (0..dim).map(|i| vec![i as f64 * 0.3, (i % 2) as f64]).collect();
    let obs = Observation::new(standard_normals(7, 1, dim))?.with_sites(sites.clone())?;
    for kind in kinds() {
        let scorer = Scorer::new(&kind, dim, Some(&sites))?;
        let g = scorer.gradient(&Ensemble::new(values.clone())?, &obs)?.grad;
        let mut worst = 0.0f64;
        let h = 1e-6;
        for k in 0..values.len() {
            let mut p = values.clone();
            let mut q = values.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (scorer.score(&Ensemble::new(p)?, &obs)? - scorer.score(&Ensemble::new(q)?, &obs)?) / (2.0 * h);
            // Entries are compared relative to the gradient scale.
            worst = worst.max((g[k] - fd).abs() / g.amax().max(f64::MIN_POSITIVE));
        }
        rows.push(row("score", kind_name(&kind), worst));
    }
    Ok(())
}

/// Directional derivatives of the full objective (8×8 mesh, four scenarios,
/// ten random directions) and of the prior term alone.
fn elliptic_suite(rows: &mut Vec<GradcheckRow>) -> Result<()> {
    let problem = EllipticProblem::with_default_lattice(8, 8)?;
    let mesh = problem.mesh();
    let pts = mesh.node_points();
    let scenarios = sample(&forcing_spec(), &pts, 4, 21)?.samples;
    let truth = sample_field(mesh, &PriorSpec::standard(), 5)?;
    let f = sample(&forcing_spec(), &pts, 1, 99)?.sample(0);
    let obs = problem.make_observations(truth.as_slice(), f.as_slice(), 0.1, 3)?;
    let n = mesh.num_nodes();
    let smooth = mesh.interpolate(|x, y| (3.0 * x).sin() * (2.0 * y).cos());
    let z = standard_normals(4, 7, n);
    let m: Vec<f64> = smooth.iter().zip(z.iter()).map(|(s, z)| 0.5 * (s + 0.3 * z)).collect();
    let along = |v: &[f64], t: f64| -> Vec<f64> { m.iter().zip(v).map(|(a, b)| a + t * b).collect() };

    for spec in [PriorSpec::standard(), PriorSpec::informed()] {
        let prior = Prior::build(mesh, &spec, Some(&truth))?;
        let tag = format!("{:?}", spec.kind).to_lowercase();

        let (_, gp) = prior.cost_and_gradient(&m)?;
        let mut worst = 0.0f64;
        for dir in 0..10 {
            let v = standard_normals(200 + dir, 0, n);
            let h = 1e-4;
            let fd = (prior.cost(&along(v.as_slice(), h))? - prior.cost(&along(v.as_slice(), -h))?) / (2.0 * h);
            worst = worst.max(rel(gp.dot(&v), fd));
        }
        rows.push(row("prior", tag.clone(), worst));

        for kind in kinds() {
            let obj = Objective::new(&problem, &scenarios, obs.clone(), &kind, &prior, 1.0)?;
            let g = obj.evaluate(&m)?.gradient;
            let mut worst = 0.0f64;
            for dir in 0..10 {
                let v = standard_normals(100 + dir, 0, n);
                let h = 1e-5;
                let fd = (obj.value(&along(v.as_slice(), h))? - obj.value(&along(v.as_slice(), -h))?) / (2.0 * h);
                worst = worst.max(rel(g.dot(&v), fd));
            }
            rows.push(row("elliptic", format!("{tag}/{}", kind_name(&kind)), worst));
        }
    }
    Ok(())
}

/// Runs every finite-difference suite.
pub fn gradcheck() -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    score_suite(&mut rows)?;
    elliptic_suite(&mut rows)?;
    Ok(rows)
}
