//! Random Markov reward processes, state features, and their ground truths.
//!
//! Rewards follow the "reward on leaving" convention: `r_{t+1}` has
//! conditional mean `R(s_t)`, so the true value function is `(I − γP)⁻¹R`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::seed::rng_from_seed;

/// Generation attempts before giving up on an ergodic chain.
pub const MAX_ERGODIC_RETRIES: usize = 100;

/// Row sums of `P` must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MrpError {
    #[error("invalid MRP parameters: {0}")]
    InvalidParameters(String),
    #[error("no chain with a single recurrent class found for n={n}, branch={branch} after {retries} attempts")]
    NotErgodic { n: usize, branch: usize, retries: usize },
    #[error("chain has {classes} closed classes; the stationary distribution is not unique")]
    MultipleRecurrentClasses { classes: usize },
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A finite Markov reward process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrpModel {
    pub n: usize,
    pub branch: usize,
    pub sigma: f64,
    #[serde(rename = "P")]
    pub transitions: Matrix,
    #[serde(rename = "R")]
    pub rewards: Vector,
}

impl MrpModel {
    /// Builds a model from explicit parts and checks its structural invariants.
    pub fn new(transitions: Matrix, rewards: Vector, sigma: f64) -> Result<Self, MrpError> {
        let n = transitions.rows();
        let branch = (0..n).map(|s| transitions.row(s).iter().filter(|&&p| p != 0.0).count()).max();
        let model = Self { n, branch: branch.unwrap_or(0), sigma, transitions, rewards };
        model.validate()?;
        Ok(model)
    }

    /// A single state that loops on itself and pays `mu` on average.
    pub fn single_state(mu: f64, sigma: f64) -> Self {
        Self {
            n: 1,
            branch: 1,
            sigma,
            transitions: Matrix::identity(1),
            rewards: vec![mu].into(),
        }
    }

    /// Checks shape, stochasticity and finiteness (not ergodicity).
    pub fn validate(&self) -> Result<(), MrpError> {
        let bad = |msg: String| Err(MrpError::Malformed(msg));
        if self.n == 0 {
            return bad("no states".into());
        }
        if self.transitions.rows() != self.n || self.transitions.cols() != self.n {
            return bad(format!(
                "P is {}x{}, expected {n}x{n}",
                self.transitions.rows(),
                self.transitions.cols(),
                n = self.n
            ));
        }
        if self.rewards.dim() != self.n {
            return bad(format!("R has {} entries, expected {}", self.rewards.dim(), self.n));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be a finite nonnegative number, got {}", self.sigma));
        }
        if !self.rewards.iter().all(|r| r.is_finite()) {
            return bad("non-finite reward".into());
        }
        for s in 0..self.n {
            let row = self.transitions.row(s);
            if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                return bad(format!("row {s} has a negative or non-finite probability"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("row {s} sums to {sum}"));
            }
        }
        Ok(())
    }

    pub fn successors(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.transitions.row(s).iter().copied().enumerate().filter(|&(_, p)| p > 0.0)
    }
}

/// Samples a random MRP with `branch` successors per state.
///
/// Successor sets are drawn uniformly without replacement, their probabilities
/// uniformly on (0, 1) and then normalized, and the expected rewards from a
/// standard normal. Draws with more than one closed class are discarded and
/// redrawn from the same generator, so the result is a pure function of the
/// arguments. Transient states are allowed: with few successors per state
/// some states usually have no incoming edge at all.
pub fn generate_random_mrp(n: usize, branch: usize, sigma: f64, seed: u64) -> Result<MrpModel, MrpError> {
    if n == 0 || branch == 0 || branch > n {
        return Err(MrpError::InvalidParameters(format!("need 1 <= branch <= n, got n={n}, branch={branch}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(MrpError::InvalidParameters(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..MAX_ERGODIC_RETRIES {
        let mut p = Matrix::zeros(n, n);
        for s in 0..n {
            let succ = sample(&mut rng, n, branch);
            let weights: Vec<f64> = (0..branch).map(|_| 1.0 - rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in succ.iter().zip(&weights) {
                p[(s, j)] = w / total;
            }
            renormalize(p.row_mut(s));
        }
        let rewards: Vector = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let model = MrpModel { n, branch, sigma, transitions: p, rewards };
        if is_ergodic(&model) {
            return Ok(model);
        }
    }
    Err(MrpError::NotErgodic { n, branch, retries: MAX_ERGODIC_RETRIES })
}

/// Pushes rounding residue onto the largest entry so the row sums to 1.
fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if let Some(max) = row.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += 1.0 - sum;
    }
}

fn is_ergodic(model: &MrpModel) -> bool {
    recurrent_classes(model).len() == 1
}

/// Closed communicating classes of the chain, each sorted, in order of their
/// smallest state. A state outside every class is transient.
pub fn recurrent_classes(model: &MrpModel) -> Vec<Vec<usize>> {
    let n = model.n;
    let reach: Vec<Vec<bool>> = (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for (v, _) in model.successors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen
        })
        .collect();
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for s in 0..n {
        if assigned[s] {
            continue;
        }
        // s is recurrent iff everything it reaches reaches back
        if (0..n).all(|t| !reach[s][t] || reach[t][s]) {
            let class: Vec<usize> = (0..n).filter(|&t| reach[s][t]).collect();
            for &t in &class {
                assigned[t] = true;
            }
            classes.push(class);
        }
    }
    classes
}

/// Stationary distribution `π` with `πᵀP = πᵀ`, `Σπ = 1`.
///
/// Requires a single closed class; transient states get exactly zero mass.
/// Solves `(Pᵀ − I)π = 0` restricted to the recurrent states, with one
/// equation replaced by the normalization row.
pub fn stationary_distribution(model: &MrpModel) -> Result<Vector, MrpError> {
    let classes = recurrent_classes(model);
    if classes.len() != 1 {
        return Err(MrpError::MultipleRecurrentClasses { classes: classes.len() });
    }
    let class = &classes[0];
    let m = class.len();
    let p = &model.transitions;
    let mut system = Matrix::from_fn(m, m, |i, j| p[(class[j], class[i])] - if i == j { 1.0 } else { 0.0 });
    system.row_mut(m - 1).fill(1.0);
    let mut rhs = vec![0.0; m];
    rhs[m - 1] = 1.0;
    let sol = linalg::solve_regularized(&system, &rhs, 0.0)?;
    let mut pi = Vector::zeros(model.n);
    for (&s, &x) in class.iter().zip(sol.iter()) {
        pi[s] = x.max(0.0);
    }
    Ok(pi)
}

/// Exact discounted values `v = (I − γP)⁻¹R`.
pub fn true_values(model: &MrpModel, gamma: f64) -> Result<Vector, MrpError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(MrpError::InvalidParameters(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let system = Matrix::identity(model.n).sub(&model.transitions.scaled(gamma))?;
    Ok(linalg::solve_regularized(&system, &model.rewards, 0.0)?)
}

/// `c = max(max_s |R(s)|, max_{s,j} |Φ[s,j]|)`: a uniform bound on rewards and features.
pub fn reward_feature_bound(model: &MrpModel, features: &FeatureMap) -> f64 {
    model.rewards.norm_inf().max(features.phi.max_abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Tabular,
    Binary,
    #[serde(alias = "non-binary")]
    Nonbinary,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Tabular => "tabular",
            FeatureKind::Binary => "binary",
            FeatureKind::Nonbinary => "nonbinary",
        }
    }

    /// Feature dimension for an `n`-state process.
    pub fn dim(self, n: usize) -> usize {
        match self {
            FeatureKind::Tabular => n,
            // floor(log2 n) + 1
            FeatureKind::Binary | FeatureKind::Nonbinary => (usize::BITS - n.leading_zeros()) as usize,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tabular" => Ok(Self::Tabular),
            "binary" => Ok(Self::Binary),
            "nonbinary" | "non-binary" => Ok(Self::Nonbinary),
            other => Err(format!("unknown feature kind `{other}` (tabular, binary, nonbinary)")),
        }
    }
}

/// Per-state feature vectors; row `s` of `phi` is `φ(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub d: usize,
    #[serde(rename = "Phi")]
    pub phi: Matrix,
}

impl FeatureMap {
    pub fn row(&self, s: usize) -> &[f64] {
        self.phi.row(s)
    }

    pub fn n_states(&self) -> usize {
        self.phi.rows()
    }
}

/// Builds the feature map of `kind` for `model`, deterministic in `seed`.
///
/// Binary rows are uniform over the nonzero points of `{0,1}^d`, scaled by
/// `1/√(number of ones)`; non-binary rows are standard normal draws normalized
/// to unit length.
pub fn build_features(model: &MrpModel, kind: FeatureKind, seed: u64) -> FeatureMap {
    let n = model.n;
    let d = kind.dim(n);
    let mut rng = rng_from_seed(seed);
    let phi = match kind {
        FeatureKind::Tabular => Matrix::identity(n),
        FeatureKind::Binary => {
            let mut phi = Matrix::zeros(n, d);
            for s in 0..n {
                let code: u64 = rng.random_range(1..(1u64 << d));
                let ones = code.count_ones() as f64;
                for (j, x) in phi.row_mut(s).iter_mut().enumerate() {
                    if code >> j & 1 == 1 {
                        *x = 1.0 / ones.sqrt();
                    }
                }
            }
            phi
        }
        FeatureKind::Nonbinary => {
            let mut phi = Matrix::zeros(n, d);
            for s in 0..n {
                let row = phi.row_mut(s);
                let norm = loop {
                    for x in row.iter_mut() {
                        *x = rng.sample(StandardNormal);
                    }
                    let norm = linalg::dot(row, row).sqrt();
                    if norm > 1e-8 {
                        break norm;
                    }
                };
                row.iter_mut().for_each(|x| *x /= norm);
            }
            phi
        }
    };
    FeatureMap { kind, d, phi }
}

/// Samples `s_{t+1} ~ P(s_t, ·)` and `r_{t+1} = R(s_t) + σξ`.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    model: &'a MrpModel,
    table: Vec<Vec<(usize, f64)>>,
    rng: ChaCha8Rng,
    state: usize,
}

/// One observed transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub reward: f64,
    pub next_state: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a MrpModel, start: usize, seed: u64) -> Self {
        assert!(start < model.n, "start state {start} out of range for {} states", model.n);
        let table = (0..model.n)
            .map(|s| {
                let mut acc = 0.0;
                model
                    .successors(s)
                    .map(|(j, p)| {
                        acc += p;
                        (j, acc)
                    })
                    .collect()
            })
            .collect();
        Self { model, table, rng: rng_from_seed(seed), state: start }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn step(&mut self) -> Transition {
        let s = self.state;
        let u: f64 = self.rng.random();
        let row = &self.table[s];
        // the last successor absorbs any rounding shortfall in the cumulative sums
        let next = row.iter().find(|&&(_, c)| u < c).unwrap_or(&row[row.len() - 1]).0;
        let xi: f64 = self.rng.sample(StandardNormal);
        let reward = self.model.rewards[s] + self.model.sigma * xi;
        self.state = next;
        Transition { state: s, reward, next_state: next }
    }
}

impl Iterator for Simulator<'_> {
    type Item = Transition;

    fn next(&mut self) -> Option<Transition> {
        Some(self.step())
    }
}

/// A recorded sample path `s_0..s_T`, `r_1..r_T`, `φ_0..φ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
    pub features: Vec<Vector>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Builds a trajectory from explicit features and rewards (`φ_0..φ_T`, `r_1..r_T`).
    /// States are numbered by position.
    pub fn from_parts(features: Vec<Vector>, rewards: Vec<f64>) -> Self {
        assert_eq!(features.len(), rewards.len() + 1, "need one more feature than reward");
        Self { states: (0..features.len()).collect(), rewards, features }
    }
}

/// Simulates `steps` transitions from `start`.
pub fn simulate(model: &MrpModel, features: &FeatureMap, steps: usize, start: usize, seed: u64) -> Trajectory {
    let mut sim = Simulator::new(model, start, seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut rewards = Vec::with_capacity(steps);
    states.push(start);
    for tr in sim.by_ref().take(steps) {
        rewards.push(tr.reward);
        states.push(tr.next_state);
    }
    let features = states.iter().map(|&s| Vector::from(features.row(s))).collect();
    Trajectory { states, rewards, features }
}

/// Snapshot document holding a model and, optionally, its features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrpSnapshot {
    #[serde(flatten)]
    pub model: MrpModel,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureMap>,
}
