//! Finite-time moment bounds and the constants behind them.
//!
//! All bounds are for the centered recursion (equilibrium at 0) with a
//! quadratic Lyapunov function `W(θ) = θᵀPθ`, where P comes from
//! [`crate::linalg::solve_lyapunov`].

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{eig_extremes_symmetric, symmetric_part, LinalgError};
use crate::lsa::StepSchedule;

/// Largest admissible `ετ`.
pub const EPS_TAU_MAX: f64 = 0.25;
/// Largest admissible `κ₁ετ + εγ_max`.
pub const DRIFT_MAX: f64 = 0.05;
/// Above this order the double factorial is evaluated through logarithms.
pub const LOG_DOUBLE_FACTORIAL_FROM: u32 = 150;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("step size invalid: eps*tau = {eps_tau}, kappa1*eps*tau + eps*gamma_max = {drift}")]
    StepInvalid { eps_tau: f64, drift: f64 },
    #[error("k = {k} is below the burn-in {min}")]
    KTooSmall { k: usize, min: usize },
    #[error("moment order {n} exceeds the admissible maximum {max}")]
    MomentOrderTooHigh { n: u32, max: f64 },
    #[error("step schedule invalid: {0}")]
    ScheduleInvalid(String),
    #[error("symmetric part is not negative definite (largest eigenvalue {lambda_max})")]
    NotNegativeDefinite { lambda_max: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub fn kappa1(gamma_max: f64, b_max: f64) -> f64 {
    62.0 * gamma_max * (1.0 + b_max)
}

pub fn kappa2(gamma_max: f64, b_max: f64) -> f64 {
    55.0 * gamma_max * (1.0 + b_max).powi(3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    pub b_max: f64,
    /// Recorded when known; the bounds assume `A_max ≤ 1`.
    pub a_max: Option<f64>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub tau: usize,
    pub epsilon: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa2_tilde: f64,
    /// `ετ ≤ 1/4`
    pub eps_tau_ok: bool,
    /// `κ₁ετ + εγ_max ≤ 0.05`
    pub drift_ok: bool,
}

impl BoundConstants {
    pub fn eps_tau(&self) -> f64 {
        self.epsilon * self.tau as f64
    }

    pub fn drift(&self) -> f64 {
        self.kappa1 * self.eps_tau() + self.epsilon * self.gamma_max
    }

    pub fn a_max_ok(&self) -> bool {
        self.a_max.is_none_or(|a| a <= 1.0)
    }

    pub fn valid(&self) -> bool {
        self.eps_tau_ok && self.drift_ok && self.a_max_ok()
    }

    pub fn with_a_max(mut self, a_max: f64) -> Self {
        self.a_max = Some(a_max);
        self
    }

    /// `1 − 0.9ε/γ_max`
    pub fn contraction(&self) -> f64 {
        1.0 - 0.9 * self.epsilon / self.gamma_max
    }

    fn require_valid(&self) -> Result<(), BoundsError> {
        if self.valid() {
            Ok(())
        } else {
            Err(BoundsError::StepInvalid {
                eps_tau: self.eps_tau(),
                drift: self.drift(),
            })
        }
    }
}

fn positive(name: &str, x: f64) -> Result<(), BoundsError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(BoundsError::InvalidInput(format!("{name} must be positive, got {x}")))
    }
}

pub fn compute_constants(
    b_max: f64,
    gamma_min: f64,
    gamma_max: f64,
    tau: usize,
    epsilon: f64,
) -> Result<BoundConstants, BoundsError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(BoundsError::InvalidStep(epsilon));
    }
    if !(b_max >= 0.0 && b_max.is_finite()) {
        return Err(BoundsError::InvalidInput(format!("b_max must be non-negative, got {b_max}")));
    }
    positive("gamma_min", gamma_min)?;
    positive("gamma_max", gamma_max)?;
    if gamma_min > gamma_max {
        return Err(BoundsError::InvalidInput("gamma_min exceeds gamma_max".into()));
    }
    if tau == 0 {
        return Err(BoundsError::InvalidInput("tau must be at least 1".into()));
    }
    let k1 = kappa1(gamma_max, b_max);
    let k2 = kappa2(gamma_max, b_max);
    let et = epsilon * tau as f64;
    Ok(BoundConstants {
        b_max,
        a_max: None,
        gamma_min,
        gamma_max,
        tau,
        epsilon,
        kappa1: k1,
        kappa2: k2,
        kappa2_tilde: 2.0 * (k2 + gamma_max * b_max * b_max),
        eps_tau_ok: et <= EPS_TAU_MAX,
        drift_ok: k1 * et + epsilon * gamma_max <= DRIFT_MAX,
    })
}

/// The two parts of the mean-square bound at a given k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSquareTerms {
    pub transient: f64,
    pub steady_state: f64,
}

impl MeanSquareTerms {
    pub fn total(&self) -> f64 {
        self.transient + self.steady_state
    }
}

/// `(γ_max/γ_min)(1.5‖Θ_0‖ + 0.5 b_max)²`
fn initial_term(gamma_ratio: f64, theta0_norm: f64, b_max: f64) -> f64 {
    let s = 1.5 * theta0_norm + 0.5 * b_max;
    gamma_ratio * s * s
}

/// `κ̃₂ γ_max ε τ / (0.9 γ_min)`
pub fn steady_state_term(c: &BoundConstants) -> f64 {
    c.kappa2_tilde * c.gamma_max * c.eps_tau() / (0.9 * c.gamma_min)
}

/// `transient(k) = (γ_max/γ_min)(1 − 0.9ε/γ_max)^{k−τ}(1.5‖Θ_0‖ + 0.5b_max)²`
fn transient_term(c: &BoundConstants, theta0_norm: f64, k: usize) -> f64 {
    let base = initial_term(c.gamma_max / c.gamma_min, theta0_norm, c.b_max);
    let n = (k - c.tau) as f64;
    base * (n * (-0.9 * c.epsilon / c.gamma_max).ln_1p()).exp()
}

pub fn mean_square_terms(
    c: &BoundConstants,
    theta0_norm: f64,
    k: usize,
) -> Result<MeanSquareTerms, BoundsError> {
    c.require_valid()?;
    if k < c.tau {
        return Err(BoundsError::KTooSmall { k, min: c.tau });
    }
    Ok(MeanSquareTerms {
        transient: transient_term(c, theta0_norm, k),
        steady_state: steady_state_term(c),
    })
}

/// Upper bound on `E‖Θ_k‖²` for `k ≥ τ`.
pub fn mean_square_bound(c: &BoundConstants, theta0_norm: f64, k: usize) -> Result<f64, BoundsError> {
    mean_square_terms(c, theta0_norm, k).map(|t| t.total())
}

/// Smallest `k ≥ τ` whose transient term is at most `(target_multiple − 1)`
/// times the steady-state term.
pub fn sample_complexity(
    c: &BoundConstants,
    theta0_norm: f64,
    target_multiple: f64,
) -> Result<usize, BoundsError> {
    c.require_valid()?;
    if !(target_multiple > 1.0 && target_multiple.is_finite()) {
        return Err(BoundsError::InvalidInput(format!(
            "target multiple must exceed 1, got {target_multiple}"
        )));
    }
    let threshold = (target_multiple - 1.0) * steady_state_term(c);
    let ok = |k: usize| transient_term(c, theta0_norm, k) <= threshold;
    if ok(c.tau) {
        return Ok(c.tau);
    }
    let g = transient_term(c, theta0_norm, c.tau);
    let log_r = (-0.9 * c.epsilon / c.gamma_max).ln_1p();
    let mut j = ((threshold / g).ln() / log_r).ceil().max(1.0) as usize;
    // the closed form can be off by one in floating point
    while !ok(c.tau + j) {
        j += 1;
    }
    while j > 1 && ok(c.tau + j - 1) {
        j -= 1;
    }
    Ok(c.tau + j)
}

/// `ln (2n−1)!!`
pub fn ln_double_factorial_odd(n: u32) -> f64 {
    (1..=n).map(|i| (2.0 * i as f64 - 1.0).ln()).sum()
}

/// `(2n−1)!!`, possibly +∞ for large n.
pub fn double_factorial_odd(n: u32) -> f64 {
    if n > LOG_DOUBLE_FACTORIAL_FROM {
        ln_double_factorial_odd(n).exp()
    } else {
        (1..=n).map(|i| (2 * i - 1) as f64).product()
    }
}

/// Default `(c, c̃)`: `c = 11κ̃₂γ_max/γ_min` and `c̃ = 10γ_max/9`.
pub fn default_moment_constants(c: &BoundConstants) -> (f64, f64) {
    (
        11.0 * c.kappa2_tilde * c.gamma_max / c.gamma_min,
        10.0 * c.gamma_max / 9.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HigherMomentBound {
    /// `(2n−1)!! (c τ ε)^n`
    pub bound: f64,
    /// `ln` of the bound, finite even when the bound overflows.
    pub ln_bound: f64,
    /// Iteration after which the bound applies.
    pub k_n: usize,
}

/// Largest n with `ετn ≤ (1/(4√γ_min))(1/γ_min + b_max)`.
pub fn max_moment_order(c: &BoundConstants) -> f64 {
    (1.0 / (4.0 * c.gamma_min.sqrt())) * (1.0 / c.gamma_min + c.b_max) / c.eps_tau()
}

pub fn higher_moment_bound(
    c: &BoundConstants,
    n: u32,
    c_const: f64,
    c_tilde: f64,
) -> Result<HigherMomentBound, BoundsError> {
    if n == 0 {
        return Err(BoundsError::InvalidInput("moment order must be at least 1".into()));
    }
    positive("c", c_const)?;
    positive("c_tilde", c_tilde)?;
    let max = max_moment_order(c);
    if n as f64 > max {
        return Err(BoundsError::MomentOrderTooHigh { n, max });
    }
    let x = c_const * c.eps_tau();
    let (bound, ln_bound) = if n > LOG_DOUBLE_FACTORIAL_FROM {
        let ln = ln_double_factorial_odd(n) + n as f64 * x.ln();
        (ln.exp(), ln)
    } else {
        let b: f64 = (1..=n).map(|i| (2 * i - 1) as f64 * x).product();
        (b, b.ln())
    };
    let harmonic: f64 = (1..=n).map(|m| 1.0 / m as f64).sum();
    let k_n = n as f64 * c.tau as f64 + (c_tilde / c.epsilon) * (1.0 / c.epsilon).ln() * harmonic;
    Ok(HigherMomentBound {
        bound,
        ln_bound,
        k_n: k_n.ceil() as usize,
    })
}

/// Constants for a non-increasing step sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DiminishingConstants {
    pub k_star: usize,
    /// `max_{k ≥ k*} ε_{k−τ_{ε_k}} / ε_k` over the horizon.
    pub kappa_s: f64,
    /// `2κ₂κ_s + 2γ_max b_max²`
    pub kappa2_check: f64,
    pub k_hat: usize,
    /// `τ_{ε_j}` for j below the horizon.
    pub taus: Vec<usize>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub b_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub horizon: usize,
}

/// Builds [`DiminishingConstants`] over `horizon` steps; `tau_of(δ)` supplies
/// the mixing time at accuracy δ.
pub fn diminishing_constants<E, F>(
    schedule: &StepSchedule,
    horizon: usize,
    mut tau_of: F,
    b_max: f64,
    gamma_min: f64,
    gamma_max: f64,
) -> Result<DiminishingConstants, BoundsError>
where
    E: std::fmt::Display,
    F: FnMut(f64) -> Result<usize, E>,
{
    positive("gamma_min", gamma_min)?;
    positive("gamma_max", gamma_max)?;
    if horizon < 2 {
        return Err(BoundsError::InvalidInput("horizon must be at least 2".into()));
    }
    if let Some(len) = schedule.len() {
        if len < horizon {
            return Err(BoundsError::ScheduleInvalid(format!(
                "{len} steps available, horizon is {horizon}"
            )));
        }
    }
    let eps: Vec<f64> = (0..horizon).map(|j| schedule.at(j).unwrap()).collect();
    if eps.windows(2).any(|w| w[1] > w[0]) {
        return Err(BoundsError::ScheduleInvalid("steps increase".into()));
    }
    // τ_ε is non-increasing in ε, so consecutive equal steps share it
    let mut taus = Vec::with_capacity(horizon);
    for (j, &e) in eps.iter().enumerate() {
        let t = if j > 0 && e == eps[j - 1] {
            taus[j - 1]
        } else {
            tau_of(e).map_err(|err| BoundsError::ScheduleInvalid(format!("mixing time at {e}: {err}")))?
        };
        taus.push(t);
    }
    let k_star = match (1..horizon).rev().find(|&k| k < taus[k]) {
        Some(last_bad) => last_bad + 1,
        None => 1,
    };
    if k_star >= horizon {
        return Err(BoundsError::ScheduleInvalid("k - tau_k stays negative over the horizon".into()));
    }
    let kappa_s = (k_star..horizon)
        .map(|k| eps[k - taus[k]] / eps[k])
        .fold(1.0, f64::max);
    let k1 = kappa1(gamma_max, b_max);
    let k2 = kappa2(gamma_max, b_max);
    let k_hat = (k_star..horizon)
        .take_while(|&k| k as f64 * eps[0] <= EPS_TAU_MAX)
        .find(|&k| k1 * kappa_s * eps[k] * taus[k] as f64 + gamma_max * eps[k] <= DRIFT_MAX)
        .ok_or_else(|| {
            BoundsError::ScheduleInvalid(format!(
                "no k in [k*, 1/(4 eps_0)] meets the drift condition (k* = {k_star})"
            ))
        })?;
    Ok(DiminishingConstants {
        k_star,
        kappa_s,
        kappa2_check: 2.0 * k2 * kappa_s + 2.0 * gamma_max * b_max * b_max,
        k_hat,
        taus,
        kappa1: k1,
        kappa2: k2,
        b_max,
        gamma_min,
        gamma_max,
        horizon,
    })
}

/// Bound values at each k of `ks` (sorted, each in `[k̂, horizon]`).
pub fn diminishing_bound_curve(
    dc: &DiminishingConstants,
    schedule: &StepSchedule,
    theta0_norm: f64,
    ks: &[usize],
) -> Result<Vec<f64>, BoundsError> {
    if ks.windows(2).any(|w| w[1] < w[0]) {
        return Err(BoundsError::InvalidInput("k values must be sorted".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k < dc.k_hat) {
        return Err(BoundsError::KTooSmall { k, min: dc.k_hat });
    }
    if let Some(&k) = ks.iter().find(|&&k| k > dc.horizon) {
        return Err(BoundsError::InvalidInput(format!("k = {k} beyond horizon {}", dc.horizon)));
    }
    let mut product = initial_term(dc.gamma_max / dc.gamma_min, theta0_norm, dc.b_max);
    let mut sum = 0.0;
    let mut j = dc.k_hat;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        while j < k {
            let e = schedule.at(j).expect("horizon checked");
            let a = 1.0 - 0.9 * e / dc.gamma_max;
            product *= a;
            sum = a * sum + e * e * dc.taus[j] as f64;
            j += 1;
        }
        out.push(product + dc.kappa2_check * sum);
    }
    Ok(out)
}

/// `(γ_max/γ_min)(1.5‖Θ_0‖+0.5b_max)² Π a_j + κ̌₂ Σ_j b_j Π_{l>j} a_l` with
/// `a_j = 1 − 0.9ε_j/γ_max` and `b_j = ε_j² τ_{ε_j}`, products over `[k̂, k)`.
pub fn diminishing_bound(
    dc: &DiminishingConstants,
    schedule: &StepSchedule,
    theta0_norm: f64,
    k: usize,
) -> Result<f64, BoundsError> {
    Ok(diminishing_bound_curve(dc, schedule, theta0_norm, &[k])?[0])
}

/// Closed form of [`diminishing_bound`] when every step is ε and τ_ε = τ:
/// `G r^{k−k̂} + κ̌₂ ε τ γ_max (1 − r^{k−k̂}) / 0.9`, `r = 1 − 0.9ε/γ_max`.
pub fn constant_schedule_bound(
    dc: &DiminishingConstants,
    epsilon: f64,
    tau: usize,
    theta0_norm: f64,
    k: usize,
) -> Result<f64, BoundsError> {
    if k < dc.k_hat {
        return Err(BoundsError::KTooSmall { k, min: dc.k_hat });
    }
    let g = initial_term(dc.gamma_max / dc.gamma_min, theta0_norm, dc.b_max);
    let n = (k - dc.k_hat) as f64;
    let rn = (n * (-0.9 * epsilon / dc.gamma_max).ln_1p()).exp();
    Ok(g * rn + dc.kappa2_check * epsilon * tau as f64 * dc.gamma_max * (-(rn - 1.0)) / 0.9)
}

/// Bound using `‖θ‖²` as the Lyapunov function, for Ā with a negative
/// definite symmetric part: `(1 − 0.9ρε)^{k−τ}(1.5‖Θ_0‖+0.5b_max)² + κ̃₂ετ/0.9`
/// with `ρ = −λ_max((Ā+Āᵀ)/2)`.
pub fn neg_def_bound(
    a_bar: &DMatrix<f64>,
    b_max: f64,
    theta0_norm: f64,
    k: usize,
    tau: usize,
    epsilon: f64,
) -> Result<f64, BoundsError> {
    let (_, lambda_max) = eig_extremes_symmetric(&symmetric_part(a_bar))?;
    if lambda_max >= 0.0 {
        return Err(BoundsError::NotNegativeDefinite { lambda_max });
    }
    let rho = -lambda_max;
    let c = compute_constants(b_max, 1.0, 1.0, tau, epsilon)?;
    c.require_valid()?;
    if k < tau {
        return Err(BoundsError::KTooSmall { k, min: tau });
    }
    let factor = ((k - tau) as f64 * (-0.9 * rho * epsilon).ln_1p()).exp();
    Ok(factor * initial_term(1.0, theta0_norm, b_max) + c.kappa2_tilde * c.eps_tau() / 0.9)
}

/// ρ for [`neg_def_bound`].
pub fn neg_def_rate(a_bar: &DMatrix<f64>) -> Result<f64, BoundsError> {
    let (_, lambda_max) = eig_extremes_symmetric(&symmetric_part(a_bar))?;
    if lambda_max >= 0.0 {
        return Err(BoundsError::NotNegativeDefinite { lambda_max });
    }
    Ok(-lambda_max)
}
