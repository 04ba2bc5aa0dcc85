//! Configuration-driven experiment runners.
//!
//! Every run writes `metadata.json` holding the resolved configuration and
//! the code version; that file is itself accepted as a configuration, so a
//! run can be repeated exactly.

mod elliptic_run;
mod gradcheck;
mod grid_run;
mod score_eval;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elliptic::PriorSpec;
use crate::error::{Error, Result};
use crate::optimize::LbfgsConfig;
use crate::powergrid::GridConfig;
use crate::scores::ScoreKind;

pub use elliptic_run::{run_elliptic, EllipticRun, EllipticSummary};
pub use gradcheck::{gradcheck, GradcheckRow};
pub use grid_run::{run_powergrid, stabilization_index, EstimateRow, GridSummary, TruthCurves};
pub use score_eval::{score_eval, ScoreRecord};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticSeeds {
    /// True log-coefficient field.
    pub truth: u64,
    /// Forcing realization that generated the data.
    pub truth_forcing: u64,
    /// Observation noise.
    pub noise: u64,
    /// Pinned forcing scenarios for the objective.
    pub scenarios: u64,
    /// Forcing draws for verification batches.
    pub verification: u64,
    /// Verification noise and rank tie-breaking.
    pub ranks: u64,
}

fn d_mesh() -> usize {
    64
}
fn d_lattice() -> usize {
    5
}
fn d_noise() -> f64 {
    0.1
}
fn d_scores() -> Vec<ScoreKind> {
    vec![ScoreKind::Energy, ScoreKind::variogram()]
}
fn d_priors() -> Vec<PriorSpec> {
    vec![PriorSpec::informed(), PriorSpec::standard()]
}
fn d_samples() -> Vec<usize> {
    vec![1, 4, 8, 32, 64, 128]
}
fn d_one() -> f64 {
    1.0
}
fn d_verification() -> usize {
    40
}
fn d_truth_prior() -> PriorSpec {
    PriorSpec::standard()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticConfig {
    /// Cells per direction.
    #[serde(default = "d_mesh")]
    pub mesh: usize,
    /// Observation points per direction.
    #[serde(default = "d_lattice")]
    pub lattice: usize,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    #[serde(default = "d_scores")]
    pub scores: Vec<ScoreKind>,
    #[serde(default = "d_priors")]
    pub priors: Vec<PriorSpec>,
    /// Scenario counts `Ns`; smaller sets are prefixes of larger ones.
    #[serde(default = "d_samples")]
    pub samples: Vec<usize>,
    #[serde(default = "d_one")]
    pub score_weight: f64,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
    /// Independent observation vectors used for rank histograms.
    #[serde(default = "d_verification")]
    pub verification_batches: usize,
    /// Distribution of the synthetic truth (its `kind` is ignored).
    #[serde(default = "d_truth_prior")]
    pub truth_prior: PriorSpec,
    pub seeds: EllipticSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowergridSeeds {
    /// Pool of load realizations: simulations take indices `0..Ns`,
    /// observation batches the following `n`.
    pub loads: u64,
}

fn d_sims() -> usize {
    100
}
fn d_batches() -> usize {
    50
}
fn d_truths() -> Vec<f64> {
    vec![10.0, 20.0]
}
fn d_m_range() -> [u32; 2] {
    [1, 35]
}
fn d_lag() -> usize {
    50
}
fn d_half_width() -> f64 {
    5.0
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowergridConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "d_sims")]
    pub simulations: usize,
    #[serde(default = "d_batches")]
    pub batches: usize,
    #[serde(default = "d_truths")]
    pub truths: Vec<f64>,
    /// Inclusive integer grid of inertia values for score curves.
    #[serde(default = "d_m_range")]
    pub m_range: [u32; 2],
    #[serde(default = "d_scores")]
    pub scores: Vec<ScoreKind>,
    /// Variogram band half-width in steps.
    #[serde(default = "d_lag")]
    pub lag: usize,
    /// Estimation bounds are `truth ± half_width`.
    #[serde(default = "d_half_width")]
    pub half_width: f64,
    #[serde(default = "d_true")]
    pub estimate: bool,
    #[serde(default)]
    pub dump_trajectory: bool,
    pub seeds: PowergridSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEvalConfig {
    /// `M × Ns` CSV, one member per column.
    pub ensemble: PathBuf,
    /// `n × M` CSV, one observation per row.
    pub observations: PathBuf,
    pub score: ScoreKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Elliptic(EllipticConfig),
    Powergrid(PowergridConfig),
    ScoreEval(ScoreEvalConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    code_version: String,
    config: ExperimentConfig,
    outputs: Vec<String>,
    failures: Vec<String>,
}

fn unique_labels(scores: &[ScoreKind], problems: &mut Vec<String>) {
    let mut seen = std::collections::BTreeSet::new();
    for s in scores {
        if !seen.insert(s.label()) {
            problems.push(format!("score kind '{}' listed twice", s.label()));
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // Metadata files from earlier runs are accepted directly.
        let value = match value.get("config") {
            Some(c) if value.get("code_version").is_some() => c.clone(),
            _ => value,
        };
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        match self {
            ExperimentConfig::Elliptic(c) => {
                if c.mesh < 2 {
                    p.push(format!("mesh must be at least 2 (got {})", c.mesh));
                }
                if c.lattice == 0 {
                    p.push("lattice must be positive".into());
                }
                if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
                    p.push(format!("noise_sigma must be nonnegative (got {})", c.noise_sigma));
                }
                if c.scores.is_empty() {
                    p.push("scores must not be empty".into());
                }
                unique_labels(&c.scores, &mut p);
                if c.priors.is_empty() {
                    p.push("priors must not be empty".into());
                }
                let mut kinds = std::collections::BTreeSet::new();
                for (i, pr) in c.priors.iter().enumerate() {
                    if let Err(e) = pr.validate() {
                        p.push(format!("priors[{i}]: {e}"));
                    }
                    if !kinds.insert(format!("{:?}", pr.kind)) {
                        p.push(format!("priors[{i}]: prior kind listed twice"));
                    }
                }
                if let Err(e) = c.truth_prior.validate() {
                    p.push(format!("truth_prior: {e}"));
                }
                if c.samples.is_empty() || c.samples.contains(&0) {
                    p.push("samples must be a nonempty list of positive counts".into());
                }
                if !(c.score_weight >= 0.0 && c.score_weight.is_finite()) {
                    p.push(format!("score_weight must be nonnegative (got {})", c.score_weight));
                }
                if let Err(e) = c.lbfgs.validate() {
                    p.push(format!("lbfgs: {e}"));
                }
                if c.verification_batches == 0 {
                    p.push("verification_batches must be positive".into());
                }
            }
            ExperimentConfig::Powergrid(c) => {
                if let Err(e) = c.grid.validate() {
                    p.push(format!("grid: {e}"));
                }
                if c.simulations == 0 {
                    p.push("simulations (Ns) must be at least 1".into());
                }
                if c.batches == 0 {
                    p.push("batches must be at least 1".into());
                }
                if c.truths.is_empty() || c.truths.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    p.push("truths must be a nonempty list of positive inertias".into());
                }
                if c.m_range[0] == 0 || c.m_range[0] > c.m_range[1] {
                    p.push(format!("m_range {:?} must be an increasing range of positive integers", c.m_range));
                }
                if c.scores.is_empty() {
                    p.push("scores must not be empty".into());
                }
                unique_labels(&c.scores, &mut p);
                if !(c.half_width > 0.0 && c.half_width.is_finite()) {
                    p.push(format!("half_width must be positive (got {})", c.half_width));
                }
                if c.estimate && c.truths.iter().any(|t| t - c.half_width <= 0.0) {
                    p.push("estimation bounds must stay above zero inertia".into());
                }
            }
            ExperimentConfig::ScoreEval(_) => {}
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Replaces every named seed by one derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Elliptic(c) => {
                c.seeds = EllipticSeeds {
                    truth: seed,
                    truth_forcing: seed.wrapping_add(1),
                    noise: seed.wrapping_add(2),
                    scenarios: seed.wrapping_add(3),
                    verification: seed.wrapping_add(4),
                    ranks: seed.wrapping_add(5),
                }
            }
            ExperimentConfig::Powergrid(c) => c.seeds.loads = seed,
            ExperimentConfig::ScoreEval(_) => {}
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Elliptic(_) => "elliptic",
            ExperimentConfig::Powergrid(_) => "powergrid",
            ExperimentConfig::ScoreEval(_) => "score-eval",
        }
    }
}

/// Creates `out`, refusing to reuse a nonempty directory unless `force`.
pub fn prepare_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", out.display())));
        }
        let nonempty = std::fs::read_dir(out)?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Files produced by a run and the runs that failed.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub outputs: Vec<String>,
    pub failures: Vec<String>,
}

/// Writes `metadata.json`: configuration, code version, outputs, failures.
pub fn write_metadata(out: &Path, cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    let meta = Metadata {
        code_version: CODE_VERSION.to_string(),
        config: cfg.clone(),
        outputs: art.outputs.clone(),
        failures: art.failures.clone(),
    };
    write_json(&out.join("metadata.json"), &meta)
}

/// Runs an experiment into `out`. Individual solver failures are recorded in
/// the returned artifacts rather than aborting the remaining runs.
pub fn run(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Artifacts> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let art = match cfg {
        ExperimentConfig::Elliptic(c) => run_elliptic(c, out)?.artifacts,
        ExperimentConfig::Powergrid(c) => run_powergrid(c, out)?.artifacts,
        ExperimentConfig::ScoreEval(c) => {
            let rec = score_eval(&c.ensemble, &c.observations, &c.score)?;
            write_json(&out.join("score.json"), &rec)?;
            Artifacts {
                outputs: vec!["score.json".into()],
                failures: Vec::new(),
            }
        }
    };
    write_metadata(out, cfg, &art)?;
    Ok(art)
}

/// Writes serializable rows as a headed CSV.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"experiment":"elliptic","mesh":8,"samples":[4],
        "seeds":{"truth":1,"truth_forcing":2,"noise":3,"scenarios":4,"verification":5,"ranks":6}}"#;

    #[test]
    fn strict_parsing() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.name(), "elliptic");
        let round = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(round, cfg);
        let bad = MINIMAL.replace("\"mesh\":8", "\"mesh\":8,\"bogus\":1");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let missing = MINIMAL.replace("\"ranks\":6", "");
        assert!(ExperimentConfig::from_json(&missing.replace(",}", "}")).is_err());
    }

    #[test]
    fn all_problems_reported() {
        let bad = MINIMAL
            .replace("\"mesh\":8", "\"mesh\":1,\"noise_sigma\":-1")
            .replace("[4]", "[0]");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("mesh") && msg.contains("noise_sigma") && msg.contains("samples"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metadata_is_accepted_as_config() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let meta = Metadata {
            code_version: CODE_VERSION.into(),
            config: cfg.clone(),
            outputs: vec![],
            failures: vec![],
        };
        let text = serde_json::to_string(&meta).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn refuses_nonempty_output() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        assert!(prepare_output_dir(dir.path(), false).is_err());
        assert!(prepare_output_dir(dir.path(), true).is_ok());
        assert!(prepare_output_dir(&dir.path().join("new"), false).is_ok());
    }
}
