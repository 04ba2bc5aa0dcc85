use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stochinv::experiment::{self, Artifacts, ExperimentConfig, ScoreEvalConfig};
use stochinv::scores::{ScoreKind, WeightScheme};
use stochinv::Error;

#[derive(Parser)]
#[command(name = "stochinv", version, about = "Scoring-rule inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Elliptic coefficient inversion.
    Elliptic(RunArgs),
    /// Power-grid inertia estimation.
    Powergrid(RunArgs),
    /// Score an ensemble CSV against observations.
    Score(ScoreArgs),
    /// Run all finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment JSON (a previous run's metadata.json also works).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace all configured seeds by ones derived from this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Allow writing into a nonempty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Es,
    Vs,
    Hs,
    Crps,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Constant,
    Banded,
}

#[derive(Args)]
struct ScoreArgs {
    /// `M × Ns` CSV, one member per column.
    #[arg(long)]
    ensemble: PathBuf,
    /// `n × M` CSV, one observation per row.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum, default_value = "constant")]
    weights: Weights,
    /// Channels for banded weights.
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Band half-width for banded weights.
    #[arg(long, default_value_t = 50)]
    lag: usize,
    /// Also write score.json and metadata.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Write gradcheck.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Usage(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Solver(e.to_string())
        }
    }
}

fn run_experiment(args: &RunArgs, expected: &str) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.name() != expected {
        return Err(Failure::Usage(format!(
            "config describes a '{}' experiment, not '{expected}'",
            cfg.name()
        )));
    }
    if let Some(seed) = args.seed_override {
        cfg.override_seeds(seed);
    }
    let art = experiment::run(&cfg, &args.out, args.force)?;
    report(&art, &args.out)
}

fn report(art: &Artifacts, out: &Path) -> Result<(), Failure> {
    println!("wrote {} files to {}", art.outputs.len() + 1, out.display());
    if art.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Solver(format!("{} run(s) failed:\n  {}", art.failures.len(), art.failures.join("\n  "))))
    }
}

fn score_kind(args: &ScoreArgs) -> Result<ScoreKind, Failure> {
    let scheme = match args.weights {
        Weights::Constant => WeightScheme::Constant,
        Weights::Banded => WeightScheme::Banded {
            channels: args.channels,
            lag: args.lag,
        },
    };
    let kind = match args.kind {
        Kind::Es => ScoreKind::Energy,
        Kind::Crps => ScoreKind::Crps,
        Kind::Vs => ScoreKind::variogram(),
        Kind::Hs => match (args.alpha, args.beta) {
            (Some(a), Some(b)) => ScoreKind::hybrid(a, b),
            _ => return Err(Failure::Usage("--kind hs needs --alpha and --beta".into())),
        },
    };
    if !matches!(args.kind, Kind::Hs) && (args.alpha.is_some() || args.beta.is_some()) {
        return Err(Failure::Usage("--alpha/--beta only apply to --kind hs".into()));
    }
    Ok(kind.with_weights(scheme))
}

fn run_score(args: &ScoreArgs) -> Result<(), Failure> {
    let kind = score_kind(args)?;
    let rec = experiment::score_eval(&args.ensemble, &args.obs, &kind)?;
    if let Some(out) = &args.out {
        experiment::prepare_output_dir(out, args.force)?;
        experiment::write_json(&out.join("score.json"), &rec)?;
        let cfg = ExperimentConfig::ScoreEval(ScoreEvalConfig {
            ensemble: args.ensemble.clone(),
            observations: args.obs.clone(),
            score: kind,
        });
        let art = Artifacts {
            outputs: vec!["score.json".into()],
            failures: Vec::new(),
        };
        experiment::write_metadata(out, &cfg, &art)?;
    }
    println!("{}", rec.value);
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let rows = experiment::gradcheck()?;
    for r in &rows {
        println!(
            "{} {:<9} {:<28} max rel error {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.suite,
            r.case,
            r.max_rel_error
        );
    }
    if let Some(out) = &args.out {
        experiment::prepare_output_dir(out, args.force)?;
        experiment::write_table(&out.join("gradcheck.csv"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Failure::Solver(format!("{failed} gradient check(s) exceeded tolerance")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Elliptic(a) => run_experiment(a, "elliptic"),
        Command::Powergrid(a) => run_experiment(a, "powergrid"),
        Command::Score(a) => run_score(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
