//! Online LSTD(λ) estimators.
//!
//! All three strategies share the eligibility trace `z_T = λγ z_{T−1} + φ_T`
//! and the reward vector `b_{T+1} = b_T + z_T r_{T+1}`. They differ only in how
//! the matrix `A` is accumulated:
//!
//! * Uncorrected: `A_{T+1} = A_T + (z_T − γ z_{T−1}) φ_Tᵀ`
//! * Boyan:       `A_{T+1} = A_T + z_T (φ_T − γ φ_{T+1})ᵀ`
//! * Mixed:       Boyan's increment applied as two rank-one pieces,
//!   `+ z_T φ_Tᵀ` then `− γ z_T φ_{T+1}ᵀ`. Between the two pieces the matrix
//!   equals the Uncorrected one.
//!
//! The `forward_*` functions evaluate the same quantities from their defining
//! double sums in O(T²) time and serve as oracles for the recursions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, axpy, dot, LinalgError, Matrix, ShermanMorrisonScratch, SolveWorkspace, Vector};
use crate::mrp::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uncorrected,
    Boyan,
    Mixed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uncorrected, Strategy::Boyan, Strategy::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Uncorrected => "uncorrected",
            Strategy::Boyan => "boyan",
            Strategy::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uncorrected" => Ok(Self::Uncorrected),
            "boyan" => Ok(Self::Boyan),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Accumulating eligibility trace.
///
/// `z_prev` (the trace before the latest update, zero initially) is only kept
/// when the owner asked for it; Uncorrected LSTD needs it, the other
/// strategies do not pay for the copy.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceState {
    z: Vector,
    z_prev: Option<Vector>,
    lambda: f64,
    gamma: f64,
}

impl TraceState {
    pub fn new(d: usize, lambda: f64, gamma: f64) -> Self {
        Self { z: Vector::zeros(d), z_prev: Some(Vector::zeros(d)), lambda, gamma }
    }

    /// A trace that does not remember its previous value.
    pub fn without_history(d: usize, lambda: f64, gamma: f64) -> Self {
        Self { z: Vector::zeros(d), z_prev: None, lambda, gamma }
    }

    pub fn z(&self) -> &Vector {
        &self.z
    }

    pub fn z_prev(&self) -> Option<&Vector> {
        self.z_prev.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `z ← λγ z + φ`, saving the old `z` first if history is kept.
    pub fn update(&mut self, phi: &[f64]) {
        debug_assert_eq!(phi.len(), self.z.dim());
        if let Some(prev) = self.z_prev.as_mut() {
            prev.copy_from_slice(&self.z);
        }
        let decay = self.lambda * self.gamma;
        for (z, &p) in self.z.iter_mut().zip(phi) {
            *z = decay * *z + p;
        }
    }
}

/// Inverse of `A + αI` kept current through Sherman-Morrison updates.
#[derive(Clone, Debug)]
struct TrackedInverse {
    alpha: f64,
    inv: Option<Matrix>,
}

impl TrackedInverse {
    fn refresh(&mut self, a: &Matrix) {
        let mut shifted = a.clone();
        shifted.add_diag(self.alpha);
        self.inv = linalg::linear_system_inverse(&shifted).ok();
    }
}

/// Running `A`, `b` and trace of one LSTD(λ) estimator.
#[derive(Clone, Debug)]
pub struct LstdEstimator {
    strategy: Strategy,
    gamma: f64,
    a: Matrix,
    b: Vector,
    trace: TraceState,
    step: usize,
    half_pending: bool,
    scratch: Vec<f64>,
    tracked: Vec<TrackedInverse>,
    sm: ShermanMorrisonScratch,
}

impl LstdEstimator {
    pub fn new(strategy: Strategy, d: usize, lambda: f64, gamma: f64) -> Self {
        let trace = match strategy {
            Strategy::Uncorrected => TraceState::new(d, lambda, gamma),
            Strategy::Boyan | Strategy::Mixed => TraceState::without_history(d, lambda, gamma),
        };
        Self {
            strategy,
            gamma,
            a: Matrix::zeros(d, d),
            b: Vector::zeros(d),
            trace,
            step: 0,
            half_pending: false,
            scratch: vec![0.0; d],
            tracked: Vec::new(),
            sm: ShermanMorrisonScratch::new(d),
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn trace(&self) -> &TraceState {
        &self.trace
    }

    /// Number of transitions consumed.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Maintains `(A + αI)⁻¹` incrementally from now on; returns its handle.
    ///
    /// Must be called before the first update.
    pub fn track_inverse(&mut self, alpha: f64) -> usize {
        assert_eq!(self.step, 0, "inverses must be tracked from the start");
        let d = self.dim();
        let inv = (alpha != 0.0).then(|| Matrix::identity(d).scaled(1.0 / alpha));
        self.tracked.push(TrackedInverse { alpha, inv });
        self.tracked.len() - 1
    }

    fn apply_rank_one(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        self.a.add_outer(scale, u, v);
        for t in &mut self.tracked {
            let ok = match t.inv.as_mut() {
                Some(inv) => self.sm.update_scaled(inv, scale, u, v).is_ok(),
                None => false,
            };
            if !ok {
                t.refresh(&self.a);
            }
        }
    }

    /// Uncorrected update for the transition leaving the state with feature `phi_t`.
    pub fn step_uncorrected(&mut self, phi_t: &[f64], r_next: f64) {
        debug_assert_eq!(self.strategy, Strategy::Uncorrected);
        self.trace.update(phi_t);
        let z = &self.trace.z;
        let z_prev = self.trace.z_prev.as_ref().expect("uncorrected trace keeps history");
        let mut u = std::mem::take(&mut self.scratch);
        for ((u, &z), &zp) in u.iter_mut().zip(z.iter()).zip(z_prev.iter()) {
            *u = z - self.gamma * zp;
        }
        axpy(r_next, z, &mut self.b);
        self.apply_rank_one(1.0, &u, phi_t);
        self.scratch = u;
        self.step += 1;
    }

    /// Boyan update for the transition `phi_k → phi_next` paying `r_next`.
    pub fn step_boyan(&mut self, phi_k: &[f64], phi_next: &[f64], r_next: f64) {
        debug_assert_eq!(self.strategy, Strategy::Boyan);
        self.trace.update(phi_k);
        let mut v = std::mem::take(&mut self.scratch);
        for ((v, &p), &q) in v.iter_mut().zip(phi_k).zip(phi_next) {
            *v = p - self.gamma * q;
        }
        axpy(r_next, &self.trace.z, &mut self.b);
        let z = std::mem::take(&mut self.trace.z);
        self.apply_rank_one(1.0, &z, &v);
        self.trace.z = z;
        self.scratch = v;
        self.step += 1;
    }

    /// First Mixed half-update: advance the trace with `phi_k`, then `A += z_k φ_kᵀ`.
    ///
    /// Afterwards `A` equals the Uncorrected matrix after the same number of steps.
    pub fn mixed_first_half(&mut self, phi_k: &[f64], r_next: f64) {
        debug_assert_eq!(self.strategy, Strategy::Mixed);
        assert!(!self.half_pending, "second half of the previous step is still pending");
        self.trace.update(phi_k);
        axpy(r_next, &self.trace.z, &mut self.b);
        let z = std::mem::take(&mut self.trace.z);
        self.apply_rank_one(1.0, &z, phi_k);
        self.trace.z = z;
        self.half_pending = true;
        self.step += 1;
    }

    /// Second Mixed half-update: `A −= γ z_k φ_{k+1}ᵀ`.
    pub fn mixed_second_half(&mut self, phi_next: &[f64]) {
        debug_assert_eq!(self.strategy, Strategy::Mixed);
        assert!(self.half_pending, "no first half to complete");
        let z = std::mem::take(&mut self.trace.z);
        self.apply_rank_one(-self.gamma, &z, phi_next);
        self.trace.z = z;
        self.half_pending = false;
    }

    pub fn step_mixed(&mut self, phi_k: &[f64], phi_next: &[f64], r_next: f64) {
        self.mixed_first_half(phi_k, r_next);
        self.mixed_second_half(phi_next);
    }

    /// Feeds one transition to whichever strategy this estimator runs.
    pub fn observe(&mut self, phi: &[f64], reward: f64, phi_next: &[f64]) {
        match self.strategy {
            Strategy::Uncorrected => self.step_uncorrected(phi, reward),
            Strategy::Boyan => self.step_boyan(phi, phi_next, reward),
            Strategy::Mixed => self.step_mixed(phi, phi_next, reward),
        }
    }

    /// `θ` solving `(A + αI) θ = b`.
    pub fn solve_weights(&self, alpha: f64) -> Result<Vector, LinalgError> {
        linalg::solve_regularized(&self.a, &self.b, alpha)
    }

    pub fn solve_weights_into(&self, alpha: f64, ws: &mut SolveWorkspace, out: &mut [f64]) -> Result<(), LinalgError> {
        ws.solve_regularized_into(&self.a, &self.b, alpha, out)
    }

    /// `θ = (A + αI)⁻¹ b` from a tracked inverse.
    pub fn tracked_weights_into(&self, handle: usize, out: &mut [f64]) -> Result<(), LinalgError> {
        let t = &self.tracked[handle];
        match &t.inv {
            Some(inv) => {
                inv.matvec_into(&self.b, out);
                Ok(())
            }
            None => Err(LinalgError::SingularSystem { column: 0, magnitude: 0.0 }),
        }
    }
}

fn check_horizon(traj: &Trajectory, steps: usize) {
    assert!(
        traj.len() >= steps && traj.features.len() > steps,
        "trajectory has {} transitions, {steps} requested",
        traj.len()
    );
}

/// `A^Unc_T` from its defining double sum.
pub fn forward_a_uncorrected(traj: &Trajectory, lambda: f64, gamma: f64, steps: usize) -> Matrix {
    check_horizon(traj, steps);
    let d = traj.features[0].dim();
    let mut a = Matrix::zeros(d, d);
    let mut row = vec![0.0; d];
    for t in 0..steps {
        row.copy_from_slice(&traj.features[t]);
        for m in 1..steps - t {
            let coef = (1.0 - lambda) * gamma * (lambda * gamma).powi(m as i32 - 1);
            axpy(-coef, &traj.features[t + m], &mut row);
        }
        a.add_outer(1.0, &traj.features[t], &row);
    }
    a
}

/// `A^Boy_T` from its defining double sum (including the end-of-data term).
pub fn forward_a_boyan(traj: &Trajectory, lambda: f64, gamma: f64, steps: usize) -> Matrix {
    check_horizon(traj, steps);
    let d = traj.features[0].dim();
    let mut a = Matrix::zeros(d, d);
    let mut row = vec![0.0; d];
    for t in 0..steps {
        row.copy_from_slice(&traj.features[t]);
        for m in 1..steps - t {
            let coef = (1.0 - lambda) * gamma * (lambda * gamma).powi(m as i32 - 1);
            axpy(-coef, &traj.features[t + m], &mut row);
        }
        let tail = gamma * (lambda * gamma).powi((steps - t - 1) as i32);
        axpy(-tail, &traj.features[steps], &mut row);
        a.add_outer(1.0, &traj.features[t], &row);
    }
    a
}

/// `b_T` from its defining double sum.
pub fn forward_b(traj: &Trajectory, lambda: f64, gamma: f64, steps: usize) -> Vector {
    check_horizon(traj, steps);
    let d = traj.features[0].dim();
    let mut b = Vector::zeros(d);
    for t in 0..steps {
        let ret: f64 = (0..steps - t).map(|m| (lambda * gamma).powi(m as i32) * traj.rewards[t + m]).sum();
        axpy(ret, &traj.features[t], &mut b);
    }
    b
}

/// True online TD(λ) with a dutch trace.
#[derive(Clone, Debug)]
pub struct TrueOnlineTd {
    theta: Vector,
    z: Vector,
    v_old: f64,
    step_size: f64,
    lambda: f64,
    gamma: f64,
}

impl TrueOnlineTd {
    pub fn new(d: usize, step_size: f64, lambda: f64, gamma: f64) -> Self {
        assert!(step_size >= 0.0, "step size must be nonnegative");
        Self { theta: Vector::zeros(d), z: Vector::zeros(d), v_old: 0.0, step_size, lambda, gamma }
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn trace(&self) -> &Vector {
        &self.z
    }

    pub fn v_old(&self) -> f64 {
        self.v_old
    }

    pub fn set_v_old(&mut self, v: f64) {
        self.v_old = v;
    }

    pub fn step(&mut self, phi: &[f64], phi_next: &[f64], reward: f64) {
        let alpha = self.step_size;
        let gl = self.gamma * self.lambda;
        let v = dot(&self.theta, phi);
        let v_next = dot(&self.theta, phi_next);
        let delta = reward + self.gamma * v_next - v;
        let ez = dot(&self.z, phi);
        for (z, &p) in self.z.iter_mut().zip(phi) {
            *z = gl * *z + (1.0 - alpha * gl * ez) * p;
        }
        axpy(alpha * (delta + v - self.v_old), &self.z, &mut self.theta);
        axpy(-alpha * (v - self.v_old), phi, &mut self.theta);
        self.v_old = v_next;
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.z.iter()).all(|x| x.is_finite()) && self.v_old.is_finite()
    }
}
