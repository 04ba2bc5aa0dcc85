use std::path::Path;

use serde::Serialize;

use super::{write_table, Artifacts, PowergridConfig};
use crate::error::Result;
use crate::powergrid::{
    argmin, cumulative_means, estimate_inertia, grid_score_kind, observation_batches, simulate_ensemble, trajectory,
    LoadModel,
};
use crate::scores::Scorer;

/// Score curves for one truth and one score kind.
#[derive(Debug, Clone)]
pub struct TruthCurves {
    pub truth: f64,
    pub score: &'static str,
    pub ms: Vec<f64>,
    /// `batch_scores[i][b]`: score of batch `b` at `ms[i]`.
    pub batch_scores: Vec<Vec<f64>>,
    /// Grid argmin of the running mean after `n = 1, 2, …` batches.
    pub argmin_by_n: Vec<f64>,
}

impl TruthCurves {
    /// Smallest `n` at which the argmin equals the truth.
    pub fn first_hit(&self) -> Option<usize> {
        self.argmin_by_n.iter().position(|&m| m == self.truth).map(|i| i + 1)
    }

    pub fn stabilized_at(&self) -> usize {
        stabilization_index(&self.argmin_by_n)
    }
}

/// First `n` (1-based) after which the sequence no longer changes.
pub fn stabilization_index(argmins: &[f64]) -> usize {
    match argmins.last() {
        None => 0,
        Some(last) => argmins.iter().rposition(|m| m != last).map_or(1, |i| i + 2),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub truth: f64,
    pub score: &'static str,
    pub start: f64,
    pub estimate: f64,
    pub objective: f64,
    pub evaluations: usize,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct GridSummary {
    pub curves: Vec<TruthCurves>,
    pub estimates: Vec<EstimateRow>,
    pub artifacts: Artifacts,
}

#[derive(Serialize)]
struct CurveRow {
    m: f64,
    n: usize,
    score: f64,
}

#[derive(Serialize)]
struct ArgminRow {
    n: usize,
    argmin: f64,
}

#[derive(Serialize)]
struct TraceRow {
    eval: usize,
    m: f64,
    objective: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    truth: f64,
    score: &'static str,
    final_argmin: f64,
    first_hit: Option<usize>,
    stabilized_at: usize,
}

/// Score curves over the integer inertia grid and bounded estimation from
/// both endpoints, for every configured truth and score kind.
///
/// All load realizations come from one pool: simulations use indices
/// `0..simulations`, observation batches the next `batches` indices.
pub fn run_powergrid(cfg: &PowergridConfig, out: &Path) -> Result<GridSummary> {
    let grid = &cfg.grid;
    let model = LoadModel::new(grid.steps(), grid.dt)?;
    let sims = model.scenarios(cfg.seeds.loads, cfg.simulations);
    let obs_loads = model.scenario_range(cfg.seeds.loads, cfg.simulations, cfg.batches);
    let kinds: Vec<_> = cfg.scores.iter().map(|k| grid_score_kind(k, cfg.lag)).collect();
    let scorers = kinds
        .iter()
        .map(|k| Scorer::new(k, grid.observable_len(), None))
        .collect::<Result<Vec<_>>>()?;
    let obs = cfg
        .truths
        .iter()
        .map(|&t| observation_batches(t, &obs_loads, grid))
        .collect::<Result<Vec<_>>>()?;

    let ms: Vec<f64> = (cfg.m_range[0]..=cfg.m_range[1]).map(f64::from).collect();
    // table[t][s][i] = per-batch scores at ms[i]
    let mut table = vec![vec![Vec::with_capacity(ms.len()); scorers.len()]; cfg.truths.len()];
    for &m in &ms {
        let ens = simulate_ensemble(m, &sims, grid)?;
        for (t, o) in obs.iter().enumerate() {
            for (s, scorer) in scorers.iter().enumerate() {
                table[t][s].push(scorer.batch_scores(&ens, o)?);
            }
        }
    }

    let mut art = Artifacts::default();
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for (t, &truth) in cfg.truths.iter().enumerate() {
        for (s, kind) in cfg.scores.iter().enumerate() {
            let label = kind.label();
            let running: Vec<Vec<f64>> = table[t][s].iter().map(|b| cumulative_means(b)).collect();
            let mut rows = Vec::with_capacity(ms.len() * cfg.batches);
            for (i, &m) in ms.iter().enumerate() {
                for (n, &v) in running[i].iter().enumerate() {
                    rows.push(CurveRow { m, n: n + 1, score: v });
                }
            }
            let argmin_by_n: Vec<f64> = (0..cfg.batches)
                .map(|n| ms[argmin(&running.iter().map(|r| r[n]).collect::<Vec<_>>())])
                .collect();
            let name = format!("curve_{label}_truth{truth}.csv");
            write_table(&out.join(&name), &rows)?;
            art.outputs.push(name);
            let name = format!("argmin_{label}_truth{truth}.csv");
            let am: Vec<ArgminRow> = argmin_by_n
                .iter()
                .enumerate()
                .map(|(n, &a)| ArgminRow { n: n + 1, argmin: a })
                .collect();
            write_table(&out.join(&name), &am)?;
            art.outputs.push(name);

            let c = TruthCurves {
                truth,
                score: label,
                ms: ms.clone(),
                batch_scores: table[t][s].clone(),
                argmin_by_n,
            };
            summary.push(SummaryRow {
                truth,
                score: label,
                final_argmin: *c.argmin_by_n.last().expect("at least one batch"),
                first_hit: c.first_hit(),
                stabilized_at: c.stabilized_at(),
            });
            curves.push(c);
        }
    }
    write_table(&out.join("summary.csv"), &summary)?;
    art.outputs.push("summary.csv".into());

    let mut estimates = Vec::new();
    if cfg.estimate {
        for (t, &truth) in cfg.truths.iter().enumerate() {
            let (lo, hi) = (truth - cfg.half_width, truth + cfg.half_width);
            for scorer in &scorers {
                let label = scorer.kind().label();
                for (start, side) in [(lo, "lo"), (hi, "hi")] {
                    match estimate_inertia(lo, hi, start, &obs[t], &sims, scorer, grid) {
                        Ok(r) => {
                            let name = format!("estimation_{label}_truth{truth}_{side}.csv");
                            let rows: Vec<TraceRow> = r
                                .evaluations
                                .iter()
                                .enumerate()
                                .map(|(i, &(m, f))| TraceRow { eval: i, m, objective: f })
                                .collect();
                            write_table(&out.join(&name), &rows)?;
                            art.outputs.push(name);
                            estimates.push(EstimateRow {
                                truth,
                                score: label,
                                start,
                                estimate: r.x,
                                objective: r.value,
                                evaluations: r.evaluations.len(),
                                status: format!("{:?}", r.status),
                            });
                        }
                        Err(e) if !e.is_usage() => {
                            art.failures.push(format!("estimation {label} truth {truth} from {side}: {e}"))
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        write_table(&out.join("estimates.csv"), &estimates)?;
        art.outputs.push("estimates.csv".into());
    }

    if cfg.dump_trajectory {
        for &truth in &cfg.truths {
            let tr = trajectory(truth, &obs_loads[0], grid.steps(), grid.newton)?;
            let name = format!("trajectory_truth{truth}.csv");
            tr.write_csv(&out.join(&name))?;
            art.outputs.push(name);
        }
    }

    Ok(GridSummary {
        curves,
        estimates,
        artifacts: art,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stabilization() {
        assert_eq!(stabilization_index(&[3.0, 4.0, 4.0]), 2);
        assert_eq!(stabilization_index(&[4.0, 4.0]), 1);
        assert_eq!(stabilization_index(&[4.0, 3.0]), 2);
        assert_eq!(stabilization_index(&[]), 0);
    }
}
