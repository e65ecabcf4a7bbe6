//! Path-wise inequalities that hold on every trajectory when `A_max ≤ 1`.

use nalgebra::DVector;

use super::{LsaError, Trajectory};
use crate::linalg::LyapunovCertificate;

/// Slack for rounding when an inequality is tight.
const REL_SLACK: f64 = 1e-12;

fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + REL_SLACK) + f64::MIN_POSITIVE
}

/// Outcome of one inequality checked at many places.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InequalityCheck {
    pub checked: usize,
    pub violations: usize,
    /// Largest lhs/rhs seen (0 when every lhs was 0).
    pub worst_ratio: f64,
}

impl InequalityCheck {
    fn record(&mut self, lhs: f64, rhs: f64) {
        self.checked += 1;
        if !holds(lhs, rhs) {
            self.violations += 1;
        }
        if lhs > 0.0 {
            let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
            self.worst_ratio = self.worst_ratio.max(ratio);
        }
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }

    pub fn absorb(&mut self, other: &InequalityCheck) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
    }
}

/// The three window inequalities comparing Θ_{k+τ} with Θ_k:
///
/// 1. `‖Θ_τ−Θ_0‖ ≤ 2ετ‖Θ_0‖ + 2ετ b_max`
/// 2. `‖Θ_τ−Θ_0‖ ≤ 4ετ‖Θ_τ‖ + 4ετ b_max`
/// 3. `‖Θ_τ−Θ_0‖² ≤ 32ε²τ²‖Θ_τ‖² + 32ε²τ² b_max²`
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Lemma1Report {
    pub windows: usize,
    pub first: InequalityCheck,
    pub second: InequalityCheck,
    pub third: InequalityCheck,
}

impl Lemma1Report {
    pub fn holds(&self) -> bool {
        self.first.holds() && self.second.holds() && self.third.holds()
    }

    pub fn absorb(&mut self, other: &Lemma1Report) {
        self.windows += other.windows;
        self.first.absorb(&other.first);
        self.second.absorb(&other.second);
        self.third.absorb(&other.third);
    }
}

fn check_window<S>(traj: &Trajectory<S>, start: usize, tau: usize, b_max: f64, report: &mut Lemma1Report) {
    // a non-increasing schedule peaks at the window start
    let eps = traj.step_size(start);
    let et = eps * tau as f64;
    let t0 = &traj.theta[start];
    let tt = &traj.theta[start + tau];
    let diff = (tt - t0).norm();
    let (n0, nt) = (t0.norm(), tt.norm());
    report.windows += 1;
    report.first.record(diff, 2.0 * et * n0 + 2.0 * et * b_max);
    report.second.record(diff, 4.0 * et * nt + 4.0 * et * b_max);
    report.third.record(diff * diff, 32.0 * et * et * (nt * nt + b_max * b_max));
}

fn check_lemma1_pre<S>(traj: &Trajectory<S>, tau: usize) -> Result<(), LsaError> {
    if tau == 0 {
        return Err(LsaError::PreconditionViolated("tau must be at least 1".into()));
    }
    if tau > traj.steps() {
        return Err(LsaError::PreconditionViolated(format!(
            "tau = {tau} exceeds trajectory length {}",
            traj.steps()
        )));
    }
    let et = traj.step_size(0) * tau as f64;
    if et > 0.25 {
        return Err(LsaError::PreconditionViolated(format!("eps*tau = {et} > 1/4")));
    }
    Ok(())
}

/// Checks the window `[0, τ]`. The caller guarantees `A_max ≤ 1`.
pub fn check_lemma1<S>(traj: &Trajectory<S>, tau: usize, b_max: f64) -> Result<Lemma1Report, LsaError> {
    check_lemma1_pre(traj, tau)?;
    let mut report = Lemma1Report::default();
    check_window(traj, 0, tau, b_max, &mut report);
    Ok(report)
}

/// Checks every window `[k, k+τ]` inside the trajectory.
pub fn check_lemma1_windows<S>(
    traj: &Trajectory<S>,
    tau: usize,
    b_max: f64,
) -> Result<Lemma1Report, LsaError> {
    check_lemma1_pre(traj, tau)?;
    let mut report = Lemma1Report::default();
    for start in 0..=traj.steps() - tau {
        check_window(traj, start, tau, b_max, &mut report);
    }
    Ok(report)
}

/// `|ΔΘ_kᵀ P ΔΘ_k| ≤ 2ε_k² γ_max (‖Θ_k‖² + b_max²)` on every step.
pub fn check_lemma2<S>(traj: &Trajectory<S>, cert: &LyapunovCertificate, b_max: f64) -> InequalityCheck {
    let mut check = InequalityCheck::default();
    for k in 0..traj.steps() {
        let delta: DVector<f64> = &traj.theta[k + 1] - &traj.theta[k];
        let lhs = cert.quadratic_form(&delta).abs();
        let eps = traj.step_size(k);
        let n = traj.theta[k].norm();
        check.record(lhs, 2.0 * eps * eps * cert.gamma_max * (n * n + b_max * b_max));
    }
    check
}

/// `‖Θ_{k+1} − Θ_k‖ ≤ ε_k (‖Θ_k‖ + b_max)` on every step.
pub fn check_step_bound<S>(traj: &Trajectory<S>, b_max: f64) -> InequalityCheck {
    let mut check = InequalityCheck::default();
    for k in 0..traj.steps() {
        let lhs = (&traj.theta[k + 1] - &traj.theta[k]).norm();
        check.record(lhs, traj.step_size(k) * (traj.theta[k].norm() + b_max));
    }
    check
}

/// `‖Θ_k‖ ≤ (1+ε)^k ‖Θ_0‖ + ε b_max Σ_{j<k} (1+ε)^j`, with the products
/// taken over ε_j for a step sequence.
pub fn check_growth_bound<S>(traj: &Trajectory<S>, b_max: f64) -> InequalityCheck {
    let mut check = InequalityCheck::default();
    let mut bound = traj.theta[0].norm();
    for k in 0..traj.steps() {
        let eps = traj.step_size(k);
        bound = (1.0 + eps) * bound + eps * b_max;
        check.record(traj.theta[k + 1].norm(), bound);
    }
    check
}

/// Running totals over many trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathwiseSweep {
    pub trajectories: usize,
    pub lemma1: Lemma1Report,
    pub lemma2: InequalityCheck,
    pub step_bound: InequalityCheck,
    pub growth_bound: InequalityCheck,
}

impl PathwiseSweep {
    /// Runs every path-wise check on one trajectory.
    pub fn check<S>(
        &mut self,
        traj: &Trajectory<S>,
        tau: usize,
        b_max: f64,
        cert: &LyapunovCertificate,
    ) -> Result<(), LsaError> {
        self.lemma1.absorb(&check_lemma1_windows(traj, tau, b_max)?);
        self.lemma2.absorb(&check_lemma2(traj, cert, b_max));
        self.step_bound.absorb(&check_step_bound(traj, b_max));
        self.growth_bound.absorb(&check_growth_bound(traj, b_max));
        self.trajectories += 1;
        Ok(())
    }

    pub fn absorb(&mut self, other: &PathwiseSweep) {
        self.trajectories += other.trajectories;
        self.lemma1.absorb(&other.lemma1);
        self.lemma2.absorb(&other.lemma2);
        self.step_bound.absorb(&other.step_bound);
        self.growth_bound.absorb(&other.growth_bound);
    }

    pub fn violations(&self) -> usize {
        self.lemma1.first.violations
            + self.lemma1.second.violations
            + self.lemma1.third.violations
            + self.lemma2.violations
            + self.step_bound.violations
            + self.growth_bound.violations
    }
}
