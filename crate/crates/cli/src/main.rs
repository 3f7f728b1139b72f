use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use lstd_lab::analysis::{self, FixedPoint, Prop1MonteCarlo, Prop1Report};
use lstd_lab::harness::{self, Algorithm, ExperimentConfig, ResultRecord};
use lstd_lab::mrp::{self, FeatureKind, MrpSnapshot};

/// LSTD(λ) experiments on random Markov reward processes.
#[derive(Parser)]
#[command(name = "lstd-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random MRP and write it as JSON.
    GenMrp {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        branch: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        /// Also store a feature map of this kind.
        #[arg(long)]
        features: Option<FeatureKind>,
        #[arg(long, default_value_t = 0)]
        feature_seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a single sweep cell and print its record.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algo: Algorithm,
        /// A value from the config's λ grid.
        #[arg(long)]
        lambda: f64,
        /// A value from the config's α grid (step-size grid for td_baseline).
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Run the full sweep and write the records as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to LSTD_LAB_THREADS or the CPU count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Closed-form single-state quantities, optionally checked by Monte Carlo.
    Prop1 {
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long = "T")]
        steps: usize,
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        sigma: f64,
        /// Monte-Carlo runs; 0 skips the simulation.
        #[arg(long, default_value_t = 0)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Asymptotic Ā, b̄ and θ̄ for a stored MRP.
    FixedPoint {
        #[arg(long)]
        mrp: PathBuf,
        /// Feature kind; uses the features stored with the MRP when omitted.
        #[arg(long)]
        features: Option<FeatureKind>,
        #[arg(long, default_value_t = 0)]
        feature_seed: u64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        gamma: f64,
    },
    /// Per-algorithm wall time of one pass over the hyperparameter grid.
    Timing {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let text = serde_json::to_string_pretty(value)?;
            std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
        }
        None => print_json(value),
    }
}

fn grid_index(grid: &[f64], value: f64, what: &str) -> Result<usize> {
    match grid.iter().position(|&g| g == value) {
        Some(i) => Ok(i),
        None => bail!("{what} {value} is not in the configured grid {grid:?}"),
    }
}

#[derive(Serialize)]
struct RunOutput<'a> {
    config: &'a ExperimentConfig,
    record: &'a ResultRecord,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    records: usize,
    failed: usize,
    best: Vec<harness::BestAlpha>,
}

#[derive(Serialize)]
struct Prop1Output {
    closed_form: Prop1Report,
    #[serde(skip_serializing_if = "Option::is_none")]
    monte_carlo: Option<Prop1MonteCarlo>,
}

#[derive(Serialize)]
struct FixedPointOutput<'a> {
    mrp: &'a Path,
    features: FeatureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_seed: Option<u64>,
    lambda: f64,
    gamma: f64,
    #[serde(flatten)]
    fixed_point: FixedPoint,
}

#[derive(Serialize)]
struct TimingOutput<'a> {
    config: &'a ExperimentConfig,
    reps: usize,
    rows: Vec<harness::TimingRow>,
}

/// Returns whether every evaluated cell succeeded.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::GenMrp { n, branch, sigma, seed, features, feature_seed, out } => {
            let model = mrp::generate_random_mrp(n, branch, sigma, seed)?;
            let features = features.map(|kind| mrp::build_features(&model, kind, feature_seed));
            write_json(&MrpSnapshot { model, features }, out.as_deref())?;
            Ok(true)
        }
        Command::Run { config, algo, lambda, alpha, run } => {
            let config = ExperimentConfig::load(&config)?;
            let l = grid_index(&config.lambda_grid, lambda, "lambda")?;
            let a = grid_index(config.grid(algo), alpha, "alpha")?;
            let record = harness::run_cell(&config, algo, l, a, run)?;
            print_json(&RunOutput { config: &config, record: &record })?;
            if record.failed {
                eprintln!("cell failed: singular system");
            }
            Ok(!record.failed)
        }
        Command::Sweep { config, out, threads } => {
            let config = ExperimentConfig::load(&config)?;
            let threads = threads.unwrap_or_else(harness::default_threads);
            let records = harness::run_sweep(&config, threads)?;
            harness::write_records(&records, &out)?;
            let failed = records.iter().filter(|r| r.failed).count();
            let best = harness::best_over_alpha(&records);
            for b in &best {
                eprintln!("{:<12} lambda {:<5} best alpha {:<10} mse {:.6e} ± {:.2e}", b.algo, b.lambda, b.alpha, b.best_mse_mean, b.std);
            }
            eprintln!("{} records written to {} ({failed} failed)", records.len(), out.display());
            print_json(&SweepSummary { config: &config, out: &out, records: records.len(), failed, best })?;
            Ok(failed == 0)
        }
        Command::Prop1 { lambda, gamma, steps, mu, sigma, runs, seed } => {
            if sigma.is_nan() || sigma < 0.0 {
                bail!("sigma must be >= 0, got {sigma}");
            }
            let closed_form = analysis::prop1_closed_forms(lambda, gamma, steps, mu, sigma * sigma)?;
            let monte_carlo = match runs {
                0 => None,
                _ => Some(analysis::prop1_monte_carlo(lambda, gamma, steps, mu, sigma, runs, seed)?),
            };
            eprintln!(
                "exact bias {:.6e} (leading {:.6e}), variance ratio {:.6} (leading {:.6})",
                closed_form.bias_unc_exact, closed_form.bias_unc_leading, closed_form.var_ratio_exact, closed_form.var_ratio_leading
            );
            if let Some(mc) = &monte_carlo {
                eprintln!("monte carlo: mean theta_boy {:.6}, variance ratio {:.6}", mc.mean_theta_boy, mc.var_ratio());
            }
            print_json(&Prop1Output { closed_form, monte_carlo })?;
            Ok(true)
        }
        Command::FixedPoint { mrp: path, features, feature_seed, lambda, gamma } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let snapshot: MrpSnapshot = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            snapshot.model.validate()?;
            let (fmap, seed) = match (features, snapshot.features) {
                (Some(kind), _) => (mrp::build_features(&snapshot.model, kind, feature_seed), Some(feature_seed)),
                (None, Some(stored)) => (stored, None),
                (None, None) => bail!("{} stores no features; pass --features", path.display()),
            };
            let fixed_point = analysis::fixed_point(&snapshot.model, &fmap, lambda, gamma)?;
            print_json(&FixedPointOutput { mrp: &path, features: fmap.kind, feature_seed: seed, lambda, gamma, fixed_point })?;
            Ok(true)
        }
        Command::Timing { config, reps } => {
            let config = ExperimentConfig::load(&config)?;
            let rows = harness::timing_run(&config, reps)?;
            for r in &rows {
                eprintln!("{:<12} {:>4} cells  {:.4} s ± {:.4} s (x{:.4})", r.algo, r.cells, r.mean_s, r.std_s, r.normalization);
            }
            print_json(&TimingOutput { config: &config, reps, rows })?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
