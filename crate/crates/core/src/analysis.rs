//! Closed-form oracles for LSTD(λ).
//!
//! * [`fixed_point`]: the almost-sure limits `Ā`, `b̄` of `A_T/T`, `b_T/T` on an
//!   ergodic chain, and `θ̄ = Ā⁻¹b̄`.
//! * [`lemma1_tail_bound`]: bound on how far the truncated reward vector drifts
//!   from its untruncated counterpart, per step.
//! * [`prop1_closed_forms`] / [`prop1_monte_carlo`]: exact finite-`T` bias and
//!   variance of the Uncorrected and Boyan estimators on a single state that
//!   pays i.i.d. rewards, and a simulation of the same setting.

use rayon::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::mrp::{self, FeatureMap, MrpError, MrpModel};
use crate::seed::{rng_from_seed, splitmix64};

/// Fewest Monte-Carlo runs accepted by [`prop1_monte_carlo`].
pub const MIN_MONTE_CARLO_RUNS: usize = 1000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Mrp(#[from] MrpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn check_discount(lambda: f64, gamma: f64) -> Result<(), AnalysisError> {
    if !(0.0..1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(AnalysisError::InvalidArgument(format!(
            "need 0 <= gamma < 1 and 0 <= lambda <= 1, got gamma={gamma}, lambda={lambda}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub a_bar: Matrix,
    pub b_bar: Vector,
    pub theta_bar: Vector,
}

/// `Ā = ΦᵀD(I − γP)(I − λγP)⁻¹Φ`, `b̄ = ΦᵀD(I − λγP)⁻¹R` with `D = Diag(π)`.
pub fn fixed_point(model: &MrpModel, features: &FeatureMap, lambda: f64, gamma: f64) -> Result<FixedPoint, AnalysisError> {
    check_discount(lambda, gamma)?;
    if features.n_states() != model.n {
        return Err(AnalysisError::InvalidArgument(format!(
            "features cover {} states, model has {}",
            features.n_states(),
            model.n
        )));
    }
    let n = model.n;
    let pi = mrp::stationary_distribution(model)?;
    let p = &model.transitions;
    let resolvent = linalg::linear_system_inverse(&Matrix::identity(n).sub(&p.scaled(lambda * gamma))?)?;
    let one_step = Matrix::identity(n).sub(&p.scaled(gamma))?;

    // ΦᵀD, d×n
    let phi = &features.phi;
    let weighted = Matrix::from_fn(features.d, n, |j, s| phi[(s, j)] * pi[s]);
    let a_bar = weighted.matmul(&one_step)?.matmul(&resolvent)?.matmul(phi)?;
    let b_bar = weighted.matmul(&resolvent)?.matvec(&model.rewards)?;
    let theta_bar = linalg::solve_regularized(&a_bar, &b_bar, 0.0)?;
    Ok(FixedPoint { a_bar, b_bar, theta_bar })
}

/// `c² · γ/(1−γ) · (1/T) · (1 − (λγ)^T)/(1 − λγ)`.
pub fn lemma1_tail_bound(c: f64, lambda: f64, gamma: f64, steps: usize) -> f64 {
    assert!(steps >= 1, "horizon must be at least one step");
    let lg = lambda * gamma;
    assert!((0.0..1.0).contains(&gamma) && (0.0..1.0).contains(&lg), "need gamma < 1 and lambda*gamma < 1");
    c * c * gamma / (1.0 - gamma) / steps as f64 * (1.0 - lg.powi(steps as i32)) / (1.0 - lg)
}

/// Exact finite-horizon quantities for the single-state process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub lambda: f64,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub mu: f64,
    pub sigma_sq: f64,
    pub a_boy_t: f64,
    pub a_unc_t: f64,
    pub delta_t: f64,
    pub e_b_t: f64,
    pub var_b_t: f64,
    pub bias_unc_exact: f64,
    pub bias_unc_leading: f64,
    pub var_ratio_exact: f64,
    pub var_ratio_leading: f64,
    pub mean_theta_boy: f64,
    pub mean_theta_unc: f64,
    pub var_theta_boy: f64,
    pub var_theta_unc: f64,
}

/// Weights `(1 − (λγ)^n)/(1 − λγ)` for `n = 1..=T`: reward `R_n`'s coefficient in `b_T`.
fn reward_weights(lambda: f64, gamma: f64, steps: usize) -> Vec<f64> {
    let lg = lambda * gamma;
    let mut pow = 1.0;
    (1..=steps)
        .map(|_| {
            pow *= lg;
            (1.0 - pow) / (1.0 - lg)
        })
        .collect()
}

pub fn prop1_closed_forms(lambda: f64, gamma: f64, steps: usize, mu: f64, sigma_sq: f64) -> Result<Prop1Report, AnalysisError> {
    check_discount(lambda, gamma)?;
    if steps == 0 {
        return Err(AnalysisError::InvalidArgument("T must be at least 1".into()));
    }
    let lg = lambda * gamma;
    let w = reward_weights(lambda, gamma, steps);
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    let a_boy_t = (1.0 - gamma) * s1;
    let delta_t = gamma * (1.0 - lg.powi(steps as i32)) / (1.0 - lg);
    let a_unc_t = a_boy_t + delta_t;
    let e_b_t = mu * s1;
    let var_b_t = sigma_sq * s2;
    let t = steps as f64;
    Ok(Prop1Report {
        lambda,
        gamma,
        steps,
        mu,
        sigma_sq,
        a_boy_t,
        a_unc_t,
        delta_t,
        e_b_t,
        var_b_t,
        bias_unc_exact: -(delta_t / (a_boy_t + delta_t)) * mu / (1.0 - gamma),
        bias_unc_leading: -gamma * mu / ((1.0 - gamma).powi(2) * t),
        var_ratio_exact: ((a_boy_t + delta_t) / a_boy_t).powi(2),
        var_ratio_leading: 1.0 + 2.0 * gamma / ((1.0 - gamma) * t),
        mean_theta_boy: mu / (1.0 - gamma),
        mean_theta_unc: e_b_t / a_unc_t,
        var_theta_boy: var_b_t / (a_boy_t * a_boy_t),
        var_theta_unc: var_b_t / (a_unc_t * a_unc_t),
    })
}

/// Empirical moments from [`prop1_monte_carlo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1MonteCarlo {
    pub runs: usize,
    pub seed: u64,
    pub mean_b: f64,
    pub var_b: f64,
    pub mean_theta_unc: f64,
    pub mean_theta_boy: f64,
    pub var_theta_unc: f64,
    pub var_theta_boy: f64,
}

impl Prop1MonteCarlo {
    pub fn var_ratio(&self) -> f64 {
        self.var_theta_boy / self.var_theta_unc
    }
}

/// Sample mean and unbiased variance, accumulated relative to the first sample
/// so that constant input yields exactly that constant and zero variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let Some(&k) = xs.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.len() as f64;
    let (s, ss) = xs.iter().fold((0.0, 0.0), |(s, ss), &x| (s + (x - k), ss + (x - k) * (x - k)));
    let var = if xs.len() > 1 { ((ss - s * s / n) / (n - 1.0)).max(0.0) } else { 0.0 };
    (k + s / n, var)
}

/// Simulates `runs` independent single-state episodes of length `T` with
/// rewards `μ + σξ` and forms `b_T`, `θ^Boy = b_T/A^Boy_T`, `θ^Unc = b_T/A^Unc_T`.
///
/// Run `i` draws from its own generator seeded by `splitmix64(seed + i)`, so the
/// output does not depend on how runs are scheduled across threads.
pub fn prop1_monte_carlo(
    lambda: f64,
    gamma: f64,
    steps: usize,
    mu: f64,
    sigma: f64,
    runs: usize,
    seed: u64,
) -> Result<Prop1MonteCarlo, AnalysisError> {
    if runs < MIN_MONTE_CARLO_RUNS {
        return Err(AnalysisError::InvalidArgument(format!(
            "need at least {MIN_MONTE_CARLO_RUNS} runs, got {runs}"
        )));
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(AnalysisError::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let closed = prop1_closed_forms(lambda, gamma, steps, mu, sigma * sigma)?;
    let w = reward_weights(lambda, gamma, steps);
    let s1: f64 = w.iter().sum();

    let b: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(splitmix64(seed.wrapping_add(i as u64)));
            w.iter()
                .map(|wn| {
                    let xi: f64 = rng.sample(StandardNormal);
                    wn * (mu + sigma * xi)
                })
                .sum()
        })
        .collect();
    // b / A^Boy written as (b / Σw) / (1 − γ) so noise-free runs hit μ/(1−γ) exactly
    let theta_boy: Vec<f64> = b.iter().map(|x| x / s1 / (1.0 - gamma)).collect();
    let theta_unc: Vec<f64> = b.iter().map(|x| x / closed.a_unc_t).collect();
    let (mean_b, var_b) = mean_var(&b);
    let (mean_theta_boy, var_theta_boy) = mean_var(&theta_boy);
    let (mean_theta_unc, var_theta_unc) = mean_var(&theta_unc);
    Ok(Prop1MonteCarlo { runs, seed, mean_b, var_b, mean_theta_unc, mean_theta_boy, var_theta_unc, var_theta_boy })
}
