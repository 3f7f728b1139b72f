//! λ×α sweeps over random MRPs.
//!
//! A run draws one MRP, one feature map and one sample path. Every
//! hyperparameter cell of that run sees the same path, so cells that differ
//! only in α share the accumulated `A` and `b`; [`run_sweep`] exploits this by
//! evaluating all α of a (strategy, λ, run) group in a single pass. The
//! records are identical to evaluating each cell on its own with [`run_cell`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::mean_var;
use crate::engine::{LstdEstimator, Strategy, TrueOnlineTd};
use crate::linalg::{dot, SolveWorkspace, Vector};
use crate::mrp::{self, FeatureKind, FeatureMap, MrpError, MrpModel, Simulator};
use crate::seed::{cell_seed, stream_seed, Stream};

/// Environment variable bounding the sweep worker pool.
pub const THREADS_ENV: &str = "LSTD_LAB_THREADS";

pub const CSV_HEADER: [&str; 10] = ["mrp", "features", "algo", "lambda", "alpha", "run", "seed", "mse", "wall_ms", "failed"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("run {run}: {source}")]
    Environment { run: usize, source: MrpError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}, record {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Uncorrected,
    Boyan,
    Mixed,
    TdBaseline,
}

impl Algorithm {
    pub const LSTD: [Algorithm; 3] = [Algorithm::Uncorrected, Algorithm::Boyan, Algorithm::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Uncorrected => "uncorrected",
            Algorithm::Boyan => "boyan",
            Algorithm::Mixed => "mixed",
            Algorithm::TdBaseline => "td_baseline",
        }
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Algorithm::Uncorrected => Some(Strategy::Uncorrected),
            Algorithm::Boyan => Some(Strategy::Boyan),
            Algorithm::Mixed => Some(Strategy::Mixed),
            Algorithm::TdBaseline => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uncorrected" => Ok(Self::Uncorrected),
            "boyan" => Ok(Self::Boyan),
            "mixed" => Ok(Self::Mixed),
            "td_baseline" => Ok(Self::TdBaseline),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

/// `(n, branch, sigma)`, serialized as a three-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct MrpTriple {
    pub n: usize,
    pub branch: usize,
    pub sigma: f64,
}

impl MrpTriple {
    pub const SMALL: MrpTriple = MrpTriple { n: 10, branch: 3, sigma: 0.1 };
    pub const LARGE: MrpTriple = MrpTriple { n: 100, branch: 10, sigma: 0.1 };
    pub const DETERMINISTIC: MrpTriple = MrpTriple { n: 100, branch: 3, sigma: 0.0 };

    pub fn label(&self) -> String {
        if *self == Self::SMALL {
            "small".into()
        } else if *self == Self::LARGE {
            "large".into()
        } else if *self == Self::DETERMINISTIC {
            "deterministic".into()
        } else {
            format!("mrp-{}-{}-{}", self.n, self.branch, self.sigma)
        }
    }
}

impl From<(usize, usize, f64)> for MrpTriple {
    fn from((n, branch, sigma): (usize, usize, f64)) -> Self {
        Self { n, branch, sigma }
    }
}

impl From<MrpTriple> for (usize, usize, f64) {
    fn from(t: MrpTriple) -> Self {
        (t.n, t.branch, t.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Factor `A + αI` afresh at every evaluation.
    Direct,
    /// Keep `(A + αI)⁻¹` current with one Sherman-Morrison step per rank-one update.
    ShermanMorrison,
}

/// `{i/100 | i = 0, 10, …, 90, 91, …, 100}`
pub fn default_lambda_grid() -> Vec<f64> {
    (0..90).step_by(10).chain(90..=100).map(|i| i as f64 / 100.0).collect()
}

/// `{2^i | i = −8, …, 8}`
pub fn default_alpha_grid() -> Vec<f64> {
    (-8..=8).map(|i| 2f64.powi(i)).collect()
}

/// 30 step sizes spaced evenly in log scale over `[2⁻¹⁶, 2]`.
pub fn default_td_step_sizes() -> Vec<f64> {
    (0..30).map(|i| 2f64.powf(-16.0 + 17.0 * i as f64 / 29.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name written to the `mrp` column; derived from the triple when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub mrp_triple: MrpTriple,
    pub feature_kind: FeatureKind,
    pub algorithms: Vec<Algorithm>,
    pub lambda_grid: Vec<f64>,
    /// Regularization coefficients for the LSTD strategies.
    pub alpha_grid: Vec<f64>,
    /// Step sizes for the TD baseline.
    pub td_step_sizes: Vec<f64>,
    #[serde(rename = "T")]
    pub steps: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub gamma: f64,
    pub solve_mode: SolveMode,
    /// Solve (and score) every `solve_stride` steps.
    pub solve_stride: usize,
    pub start_state: usize,
    /// Use this one MRP for every run instead of drawing a fresh one per run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrp_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: None,
            mrp_triple: MrpTriple::SMALL,
            feature_kind: FeatureKind::Tabular,
            algorithms: Algorithm::LSTD.to_vec(),
            lambda_grid: default_lambda_grid(),
            alpha_grid: default_alpha_grid(),
            td_step_sizes: default_td_step_sizes(),
            steps: 10_000,
            runs: 50,
            base_seed: 0,
            gamma: 0.99,
            solve_mode: SolveMode::Direct,
            solve_stride: 1,
            start_state: 0,
            mrp_seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: Self = serde_json::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn mrp_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.mrp_triple.label())
    }

    /// Hyperparameter grid searched for `algo`: α for LSTD, step sizes for TD.
    pub fn grid(&self, algo: Algorithm) -> &[f64] {
        match algo {
            Algorithm::TdBaseline => &self.td_step_sizes,
            _ => &self.alpha_grid,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        let MrpTriple { n, branch, sigma } = self.mrp_triple;
        if n == 0 || branch == 0 || branch > n || !(sigma.is_finite() && sigma >= 0.0) {
            return bad(format!("mrp_triple ({n}, {branch}, {sigma}) needs 1 <= branch <= n and sigma >= 0"));
        }
        if self.algorithms.is_empty() {
            return bad("no algorithms".into());
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("lambda_grid must be a nonempty list of values in [0, 1]".into());
        }
        let uses_lstd = self.algorithms.iter().any(|a| a.strategy().is_some());
        if uses_lstd && (self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0))) {
            return bad("alpha_grid must be a nonempty list of finite values >= 0".into());
        }
        let uses_td = self.algorithms.contains(&Algorithm::TdBaseline);
        if uses_td && (self.td_step_sizes.is_empty() || self.td_step_sizes.iter().any(|a| !(a.is_finite() && *a > 0.0))) {
            return bad("td_step_sizes must be a nonempty list of finite values > 0".into());
        }
        if self.lambda_grid.len() > 1 << 16 || self.grid_len_max() > 1 << 16 || self.runs as u64 > u32::MAX as u64 {
            return bad("grid too large for seed packing".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.solve_stride == 0 {
            return bad("solve_stride must be at least 1".into());
        }
        if self.start_state >= n {
            return bad(format!("start_state {} out of range for {n} states", self.start_state));
        }
        Ok(())
    }

    fn grid_len_max(&self) -> usize {
        self.alpha_grid.len().max(self.td_step_sizes.len())
    }
}

/// One evaluated sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub mrp: String,
    pub features: FeatureKind,
    pub algo: Algorithm,
    pub lambda: f64,
    /// Regularization coefficient, or step size for the TD baseline.
    pub alpha: f64,
    pub run: usize,
    pub seed: u64,
    pub mse: f64,
    pub wall_ms: f64,
    pub failed: bool,
}

impl ResultRecord {
    /// Equality ignoring the wall-clock field.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self { wall_ms: 0.0, ..r.clone() };
        let (a, b) = (strip(self), strip(other));
        a.mse.to_bits() == b.mse.to_bits() && Self { mse: 0.0, ..a } == Self { mse: 0.0, ..b }
    }
}

/// Everything about one run that does not depend on the hyperparameters.
#[derive(Clone, Debug)]
pub struct RunEnvironment {
    pub run: usize,
    pub model: MrpModel,
    pub features: FeatureMap,
    pub stationary: Vector,
    pub values: Vector,
    /// `Σ_s π(s) v(s)²`
    pub value_scale: f64,
    pub trajectory_seed: u64,
}

impl RunEnvironment {
    pub fn build(config: &ExperimentConfig, run: usize) -> Result<Self, HarnessError> {
        let env_err = |source| HarnessError::Environment { run, source };
        let MrpTriple { n, branch, sigma } = config.mrp_triple;
        let mrp_seed = config.mrp_seed.unwrap_or_else(|| stream_seed(config.base_seed, Stream::Mrp, run as u64));
        let model = mrp::generate_random_mrp(n, branch, sigma, mrp_seed).map_err(env_err)?;
        let features = mrp::build_features(&model, config.feature_kind, stream_seed(mrp_seed, Stream::Features, 0));
        let stationary = mrp::stationary_distribution(&model).map_err(env_err)?;
        let values = mrp::true_values(&model, config.gamma).map_err(env_err)?;
        let value_scale = stationary.iter().zip(values.iter()).map(|(p, v)| p * v * v).sum();
        Ok(Self {
            run,
            model,
            features,
            stationary,
            values,
            value_scale,
            trajectory_seed: stream_seed(config.base_seed, Stream::Trajectory, run as u64),
        })
    }

    /// `Σ_s π(s)(φ(s)ᵀθ − v(s))²`
    pub fn weighted_value_error(&self, theta: &[f64]) -> f64 {
        (0..self.model.n)
            .map(|s| {
                let e = dot(self.features.row(s), theta) - self.values[s];
                self.stationary[s] * e * e
            })
            .sum()
    }

    /// Error normalized by the π-weighted squared true values.
    pub fn normalized_error(&self, theta: &[f64]) -> f64 {
        let err = self.weighted_value_error(theta);
        if self.value_scale > 0.0 {
            err / self.value_scale
        } else {
            err
        }
    }
}

struct Accumulator {
    sum: f64,
    count: usize,
    failed: bool,
}

/// Evaluates the cells `(algo, lambda_grid[lambda_idx], grid[i], run)` for
/// every `i` in `grid_indices`, all on the run's shared sample path.
pub fn evaluate_cells(
    config: &ExperimentConfig,
    env: &RunEnvironment,
    algo: Algorithm,
    lambda_idx: usize,
    grid_indices: &[usize],
) -> Vec<ResultRecord> {
    let start = Instant::now();
    let lambda = config.lambda_grid[lambda_idx];
    let grid = config.grid(algo);
    let params: Vec<f64> = grid_indices.iter().map(|&i| grid[i]).collect();
    let accs = match algo.strategy() {
        Some(strategy) => run_lstd(config, env, strategy, lambda, &params),
        None => run_td(config, env, lambda, &params),
    };
    let per_cell_ms = start.elapsed().as_secs_f64() * 1e3 / grid_indices.len().max(1) as f64;
    grid_indices
        .iter()
        .zip(accs)
        .map(|(&gi, acc)| {
            let mse = if acc.failed {
                f64::NAN
            } else if acc.count == 0 {
                0.0
            } else {
                acc.sum / acc.count as f64
            };
            ResultRecord {
                mrp: config.mrp_label(),
                features: config.feature_kind,
                algo,
                lambda,
                alpha: grid[gi],
                run: env.run,
                seed: cell_seed(config.base_seed, lambda_idx, gi, env.run),
                mse,
                wall_ms: per_cell_ms,
                failed: acc.failed,
            }
        })
        .collect()
}

fn fresh_accumulators(k: usize) -> Vec<Accumulator> {
    (0..k).map(|_| Accumulator { sum: 0.0, count: 0, failed: false }).collect()
}

fn run_lstd(config: &ExperimentConfig, env: &RunEnvironment, strategy: Strategy, lambda: f64, alphas: &[f64]) -> Vec<Accumulator> {
    let d = env.features.d;
    let mut est = LstdEstimator::new(strategy, d, lambda, config.gamma);
    let handles: Vec<usize> = match config.solve_mode {
        SolveMode::ShermanMorrison => alphas.iter().map(|&a| est.track_inverse(a)).collect(),
        SolveMode::Direct => Vec::new(),
    };
    let mut accs = fresh_accumulators(alphas.len());
    let mut ws = SolveWorkspace::new(d);
    let mut theta = vec![0.0; d];
    let mut sim = Simulator::new(&env.model, config.start_state, env.trajectory_seed);
    for t in 1..=config.steps {
        let tr = sim.step();
        est.observe(env.features.row(tr.state), tr.reward, env.features.row(tr.next_state));
        if t % config.solve_stride != 0 {
            continue;
        }
        for (i, acc) in accs.iter_mut().enumerate() {
            if acc.failed {
                continue;
            }
            let solved = match config.solve_mode {
                SolveMode::Direct => est.solve_weights_into(alphas[i], &mut ws, &mut theta),
                SolveMode::ShermanMorrison => est.tracked_weights_into(handles[i], &mut theta),
            };
            let err = solved.map(|()| env.normalized_error(&theta));
            match err {
                Ok(e) if e.is_finite() => {
                    acc.sum += e;
                    acc.count += 1;
                }
                _ => acc.failed = true,
            }
        }
    }
    accs
}

fn run_td(config: &ExperimentConfig, env: &RunEnvironment, lambda: f64, step_sizes: &[f64]) -> Vec<Accumulator> {
    let d = env.features.d;
    let mut learners: Vec<TrueOnlineTd> = step_sizes.iter().map(|&a| TrueOnlineTd::new(d, a, lambda, config.gamma)).collect();
    let mut accs = fresh_accumulators(step_sizes.len());
    let mut sim = Simulator::new(&env.model, config.start_state, env.trajectory_seed);
    for t in 1..=config.steps {
        let tr = sim.step();
        let (phi, next) = (env.features.row(tr.state), env.features.row(tr.next_state));
        let score = t % config.solve_stride == 0;
        for (td, acc) in learners.iter_mut().zip(accs.iter_mut()) {
            if acc.failed {
                continue;
            }
            td.step(phi, next, tr.reward);
            if score {
                let e = env.normalized_error(td.theta());
                if e.is_finite() {
                    acc.sum += e;
                    acc.count += 1;
                } else {
                    acc.failed = true;
                }
            }
        }
    }
    accs
}

/// One sweep cell, evaluated on its own.
pub fn run_cell(
    config: &ExperimentConfig,
    algo: Algorithm,
    lambda_idx: usize,
    grid_idx: usize,
    run: usize,
) -> Result<ResultRecord, HarnessError> {
    config.validate()?;
    if lambda_idx >= config.lambda_grid.len() || grid_idx >= config.grid(algo).len() || run >= config.runs {
        return Err(HarnessError::InvalidConfig(format!(
            "cell (lambda {lambda_idx}, grid {grid_idx}, run {run}) outside the configured grid"
        )));
    }
    let env = RunEnvironment::build(config, run)?;
    Ok(evaluate_cells(config, &env, algo, lambda_idx, &[grid_idx]).remove(0))
}

/// Worker count from `LSTD_LAB_THREADS`, else the number of logical CPUs.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn record_order(a: &ResultRecord, b: &ResultRecord) -> std::cmp::Ordering {
    a.algo
        .cmp(&b.algo)
        .then(a.lambda.total_cmp(&b.lambda))
        .then(a.alpha.total_cmp(&b.alpha))
        .then(a.run.cmp(&b.run))
}

/// Every cell of `algorithms × lambda_grid × grid × runs`, sorted by
/// (algorithm, λ, α, run). The result does not depend on `threads`.
pub fn run_sweep(config: &ExperimentConfig, threads: usize) -> Result<Vec<ResultRecord>, HarnessError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    pool.install(|| {
        let envs = (0..config.runs)
            .into_par_iter()
            .map(|run| RunEnvironment::build(config, run))
            .collect::<Result<Vec<_>, _>>()?;
        let groups: Vec<(Algorithm, usize, usize)> = config
            .algorithms
            .iter()
            .flat_map(|&algo| (0..config.lambda_grid.len()).flat_map(move |l| (0..config.runs).map(move |r| (algo, l, r))))
            .collect();
        let mut records: Vec<ResultRecord> = groups
            .into_par_iter()
            .flat_map_iter(|(algo, l, run)| {
                let all: Vec<usize> = (0..config.grid(algo).len()).collect();
                evaluate_cells(config, &envs[run], algo, l, &all)
            })
            .collect();
        records.sort_by(record_order);
        Ok(records)
    })
}

/// Best mean MSE over the α grid for one (algorithm, λ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestAlpha {
    pub mrp: String,
    pub features: FeatureKind,
    pub algo: Algorithm,
    pub lambda: f64,
    pub alpha: f64,
    pub best_mse_mean: f64,
    /// Standard deviation of the per-run MSE at the chosen α.
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    mrp: String,
    features: FeatureKind,
    algo: Algorithm,
    lambda_bits: OrdF64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// For each (algorithm, λ): the α whose mean MSE over runs is lowest (ties go
/// to the smaller α), with that mean and the run-to-run standard deviation.
/// An α with any failed run is never selected.
pub fn best_over_alpha(records: &[ResultRecord]) -> Vec<BestAlpha> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<OrdF64, Vec<&ResultRecord>>> = BTreeMap::new();
    for r in records {
        let key = GroupKey { mrp: r.mrp.clone(), features: r.features, algo: r.algo, lambda_bits: OrdF64(r.lambda) };
        groups.entry(key).or_default().entry(OrdF64(r.alpha)).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|(key, by_alpha)| {
            let mut best: Option<(f64, f64, f64, usize)> = None;
            for (alpha, mut cell) in by_alpha {
                if cell.iter().any(|r| r.failed || !r.mse.is_finite()) {
                    continue;
                }
                cell.sort_by_key(|r| r.run);
                let mses: Vec<f64> = cell.iter().map(|r| r.mse).collect();
                let (mean, var) = mean_var(&mses);
                if best.is_none_or(|(m, ..)| mean < m) {
                    best = Some((mean, var.sqrt(), alpha.0, mses.len()));
                }
            }
            best.map(|(mean, std, alpha, runs)| BestAlpha {
                mrp: key.mrp,
                features: key.features,
                algo: key.algo,
                lambda: key.lambda_bits.0,
                alpha,
                best_mse_mean: mean,
                std,
                runs,
            })
        })
        .collect()
}

/// Per-algorithm wall time of one full pass over the hyperparameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub algo: Algorithm,
    pub cells: usize,
    /// Factor applied to raw times so that every algorithm is reported per
    /// LSTD-grid-sized run (`|λ|·|α| / (|λ|·|step sizes|)` for the TD baseline).
    pub normalization: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub samples_s: Vec<f64>,
}

/// Times `reps` passes over the grid for every configured algorithm, single
/// threaded, each cell run from scratch on run 0's environment.
///
/// Algorithms are interleaved cell by cell, with the order rotated between
/// cells, so that load from elsewhere on the machine is spread evenly over
/// them. An algorithm's sample for one repetition is the sum of its cell times.
pub fn timing_run(config: &ExperimentConfig, reps: usize) -> Result<Vec<TimingRow>, HarnessError> {
    config.validate()?;
    if reps == 0 {
        return Err(HarnessError::InvalidConfig("timing needs at least one repetition".into()));
    }
    let env = RunEnvironment::build(config, 0)?;
    let algos = &config.algorithms;
    let k = algos.len();
    let lstd_cells = config.lambda_grid.len() * config.alpha_grid.len();
    let widest = algos.iter().map(|&a| config.grid(a).len()).max().unwrap_or(0);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); k];
    let mut turn = 0;
    for _ in 0..reps {
        let mut totals = vec![0.0; k];
        for l in 0..config.lambda_grid.len() {
            for g in 0..widest {
                for j in 0..k {
                    let a = (turn + j) % k;
                    if g >= config.grid(algos[a]).len() {
                        continue;
                    }
                    let start = Instant::now();
                    std::hint::black_box(evaluate_cells(config, &env, algos[a], l, &[g]));
                    totals[a] += start.elapsed().as_secs_f64();
                }
                turn += 1;
            }
        }
        for (s, t) in samples.iter_mut().zip(totals) {
            s.push(t);
        }
    }
    Ok(algos
        .iter()
        .zip(samples)
        .map(|(&algo, raw)| {
            let cells = config.lambda_grid.len() * config.grid(algo).len();
            let normalization = if algo == Algorithm::TdBaseline { lstd_cells as f64 / cells as f64 } else { 1.0 };
            let scaled: Vec<f64> = raw.iter().map(|s| s * normalization).collect();
            let (mean_s, var) = mean_var(&scaled);
            TimingRow { algo, cells, normalization, mean_s, std_s: var.sqrt(), samples_s: scaled }
        })
        .collect())
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes records as CSV, sorted by (algorithm, λ, α, run).
pub fn write_records(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let csv_err = |source| HarnessError::Csv { path: path.display().to_string(), source };
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| record_order(a, b));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in sorted {
        w.write_record([
            r.mrp.clone(),
            r.features.to_string(),
            r.algo.to_string(),
            fmt_f64(r.lambda),
            fmt_f64(r.alpha),
            r.run.to_string(),
            r.seed.to_string(),
            fmt_f64(r.mse),
            fmt_f64(r.wall_ms),
            r.failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>, HarnessError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| HarnessError::Csv { path: p.clone(), source })?;
    let header = rdr.headers().map_err(|source| HarnessError::Csv { path: p.clone(), source })?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(HarnessError::Parse { path: p, line: 0, msg: format!("unexpected header {header:?}") });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|source| HarnessError::Csv { path: p.clone(), source })?;
        let err = |msg: String| HarnessError::Parse { path: p.clone(), line: i + 1, msg };
        let f = |k: usize| -> Result<f64, HarnessError> { row[k].parse::<f64>().map_err(|e| err(format!("{}: {e}", CSV_HEADER[k]))) };
        out.push(ResultRecord {
            mrp: row[0].to_string(),
            features: row[1].parse().map_err(err)?,
            algo: row[2].parse().map_err(err)?,
            lambda: f(3)?,
            alpha: f(4)?,
            run: row[5].parse().map_err(|e| err(format!("run: {e}")))?,
            seed: row[6].parse().map_err(|e| err(format!("seed: {e}")))?,
            mse: f(7)?,
            wall_ms: f(8)?,
            failed: row[9].parse().map_err(|e| err(format!("failed: {e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            lambda_grid: vec![0.0, 0.5, 1.0],
            alpha_grid: vec![0.25, 1.0, 4.0],
            td_step_sizes: vec![0.01, 0.1],
            steps: 200,
            runs: 3,
            base_seed: 9,
            gamma: 0.9,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_grids() {
        let l = default_lambda_grid();
        assert_eq!(l.len(), 20);
        assert_eq!(l[0], 0.0);
        assert_eq!(l[9], 0.9);
        assert_eq!(l[10], 0.91);
        assert_eq!(l[19], 1.0);
        let a = default_alpha_grid();
        assert_eq!(a.len(), 17);
        assert_eq!(a[0], 1.0 / 256.0);
        assert_eq!(a[16], 256.0);
        let td = default_td_step_sizes();
        assert_eq!(td.len(), 30);
        assert_eq!(td[0], 2f64.powi(-16));
        assert!((td[29] - 2.0).abs() < 1e-15);
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.runs, 50);
        assert_eq!(cfg.lambda_grid.len() * cfg.alpha_grid.len(), 340);
        assert_eq!(cfg.lambda_grid.len() * cfg.td_step_sizes.len(), 600);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig { mrp_seed: Some(4), ..tiny_config() };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"mrp_triple\":[10,3,0.1]"));
        assert!(json.contains("\"T\":200"));
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);

        let partial = ExperimentConfig::from_json(r#"{"T": 50, "runs": 2, "algorithms": ["boyan"]}"#).unwrap();
        assert_eq!(partial.steps, 50);
        assert_eq!(partial.alpha_grid.len(), 17);
        assert!(ExperimentConfig::from_json(r#"{"T": 50, "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"gamma": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"lambda_grid": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"mrp_triple": [3, 4, 0.0]}"#).is_err());
    }

    #[test]
    fn single_state_boyan_is_exact_from_first_step() {
        let cfg = ExperimentConfig {
            mrp_triple: MrpTriple { n: 1, branch: 1, sigma: 0.0 },
            algorithms: vec![Algorithm::Boyan],
            lambda_grid: vec![0.0],
            alpha_grid: vec![0.0],
            steps: 50,
            runs: 1,
            gamma: 0.9,
            ..ExperimentConfig::default()
        };
        let rec = run_cell(&cfg, Algorithm::Boyan, 0, 0, 0).unwrap();
        assert!(!rec.failed);
        assert!(rec.mse < 1e-28, "{}", rec.mse);
    }

    #[test]
    fn run_cell_is_deterministic_and_matches_sweep() {
        let cfg = ExperimentConfig { algorithms: vec![Algorithm::Uncorrected, Algorithm::Mixed, Algorithm::TdBaseline], ..tiny_config() };
        let a = run_cell(&cfg, Algorithm::Mixed, 1, 2, 1).unwrap();
        let b = run_cell(&cfg, Algorithm::Mixed, 1, 2, 1).unwrap();
        assert!(a.same_outcome(&b));
        let sweep = run_sweep(&cfg, 1).unwrap();
        assert_eq!(sweep.len(), 2 * 3 * 3 * 3 + 3 * 2 * 3);
        let hit = sweep
            .iter()
            .find(|r| r.algo == Algorithm::Mixed && r.lambda == 0.5 && r.alpha == 4.0 && r.run == 1)
            .unwrap();
        assert!(hit.same_outcome(&a));
        let td = run_cell(&cfg, Algorithm::TdBaseline, 2, 1, 0).unwrap();
        let hit = sweep
            .iter()
            .find(|r| r.algo == Algorithm::TdBaseline && r.lambda == 1.0 && r.alpha == 0.1 && r.run == 0)
            .unwrap();
        assert!(hit.same_outcome(&td));
    }

    #[test]
    fn sweep_is_thread_independent() {
        let cfg = tiny_config();
        let one = run_sweep(&cfg, 1).unwrap();
        let four = run_sweep(&cfg, 4).unwrap();
        assert_eq!(one.len(), four.len());
        assert!(one.iter().zip(&four).all(|(a, b)| a.same_outcome(b)));
    }

    #[test]
    fn sherman_morrison_mode_agrees_with_direct() {
        let direct = ExperimentConfig { lambda_grid: vec![0.5], runs: 2, steps: 500, ..tiny_config() };
        let sm = ExperimentConfig { solve_mode: SolveMode::ShermanMorrison, ..direct.clone() };
        let a = run_sweep(&direct, 1).unwrap();
        let b = run_sweep(&sm, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.mse - y.mse).abs() <= 1e-8 * x.mse.max(1e-12), "{} vs {}", x.mse, y.mse);
        }
    }

    #[test]
    fn unregularized_cells_fail_without_aborting() {
        let cfg = ExperimentConfig { alpha_grid: vec![0.0, 1.0], lambda_grid: vec![0.5], runs: 1, ..tiny_config() };
        let recs = run_sweep(&cfg, 1).unwrap();
        for r in &recs {
            if r.alpha == 0.0 {
                // a 10-state tabular A is rank one after the first step
                assert!(r.failed && r.mse.is_nan());
            } else {
                assert!(!r.failed && r.mse >= 0.0);
            }
        }
    }

    #[test]
    fn stride_scores_fewer_steps() {
        let cfg = ExperimentConfig { solve_stride: 50, lambda_grid: vec![0.5], alpha_grid: vec![1.0], runs: 1, ..tiny_config() };
        let rec = run_cell(&cfg, Algorithm::Boyan, 0, 0, 0).unwrap();
        assert!(!rec.failed && rec.mse > 0.0);
    }

    fn synthetic(algo: Algorithm, alpha: f64, run: usize, mse: f64) -> ResultRecord {
        ResultRecord {
            mrp: "m".into(),
            features: FeatureKind::Tabular,
            algo,
            lambda: 0.5,
            alpha,
            run,
            seed: 0,
            mse,
            wall_ms: 0.0,
            failed: false,
        }
    }

    #[test]
    fn best_over_alpha_examples() {
        let single = vec![synthetic(Algorithm::Boyan, 2.0, 0, 0.3), synthetic(Algorithm::Boyan, 2.0, 1, 0.5)];
        let best = best_over_alpha(&single);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].alpha, 2.0);
        assert!((best[0].best_mse_mean - 0.4).abs() < 1e-15);
        assert!((best[0].std - 0.02f64.sqrt()).abs() < 1e-15);

        let mut recs = single.clone();
        recs.push(synthetic(Algorithm::Boyan, 8.0, 0, 0.0));
        recs.push(synthetic(Algorithm::Boyan, 8.0, 1, 0.0));
        let best = best_over_alpha(&recs);
        assert_eq!((best[0].alpha, best[0].best_mse_mean), (8.0, 0.0));

        // tie goes to the smaller alpha; failed alphas are skipped
        let mut recs = vec![
            synthetic(Algorithm::Mixed, 4.0, 0, 0.1),
            synthetic(Algorithm::Mixed, 1.0, 0, 0.1),
            synthetic(Algorithm::Mixed, 0.5, 0, 0.01),
        ];
        recs[2].failed = true;
        let best = best_over_alpha(&recs);
        assert_eq!(best[0].alpha, 1.0);
    }

    #[test]
    fn best_over_alpha_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let alphas = default_alpha_grid();
        let mut recs = Vec::new();
        for &a in &alphas {
            for run in 0..7 {
                recs.push(synthetic(Algorithm::Uncorrected, a, run, rng.random_range(0.0..1.0)));
            }
        }
        let best = best_over_alpha(&recs);
        let mut scan = (f64::INFINITY, 0.0);
        for &a in &alphas {
            let m: f64 = recs.iter().filter(|r| r.alpha == a).map(|r| r.mse).sum::<f64>() / 7.0;
            if m < scan.0 {
                scan = (m, a);
            }
        }
        assert_eq!(best[0].alpha, scan.1);
        assert!((best[0].best_mse_mean - scan.0).abs() < 1e-14);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        write_records(&[], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), "mrp,features,algo,lambda,alpha,run,seed,mse,wall_ms,failed\n");

        let mut r = synthetic(Algorithm::TdBaseline, 0.1, 3, 1.0 / 3.0);
        r.seed = u64::MAX;
        r.wall_ms = 0.123;
        let one = dir.path().join("one.csv");
        write_records(std::slice::from_ref(&r), &one).unwrap();
        let text = std::fs::read_to_string(&one).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("3.3333333333333331e-1"));
        let back = read_records(&one).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn timing_of_empty_run_is_tiny() {
        let cfg = ExperimentConfig { steps: 0, ..tiny_config() };
        let rows = timing_run(&cfg, 2).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mean_s < 0.05 && r.samples_s.len() == 2));
    }
}
