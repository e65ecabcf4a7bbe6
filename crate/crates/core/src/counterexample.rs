//! Scalar recursion `Θ_{k+1} = (1 + εA_k)Θ_k + εb_k` with i.i.d. two-point
//! noise, whose high-order steady-state moments do not exist.
//!
//! Independence makes the moments close under the update, so
//! `E[Θ_{k+1}^m] = Σ_j C(m,j) c_{m,j} E[Θ_k^j]` is propagated exactly.

use nalgebra::DVector;
use thiserror::Error;

use crate::lsa::{run_ensemble, EnsembleConfig, LsaError, StepSchedule};
use crate::markov::{FiniteChain, MarkovError, MarkovNoiseModel};

/// Magnitude past which a moment is reported as overflowed.
pub const OVERFLOW_LIMIT: f64 = 1e300;
/// Largest order supported by the floating-point Pascal table.
pub const MAX_ORDER: usize = 200;
/// Search cap for [`divergence_threshold`].
pub const THRESHOLD_SEARCH_CAP: usize = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterexampleError {
    #[error("epsilon must be non-negative and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooHigh(usize),
    #[error("order must be even, got {0}")]
    OddOrder(usize),
    #[error("number of steps must be at least 1")]
    NoSteps,
    #[error("no even order up to {cap} has leading coefficient above 1")]
    NoThreshold { cap: usize },
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Lsa(#[from] LsaError),
}

/// `(A, b) = (a_plus, b_plus)` or `(a_minus, b_minus)` with probability ½ each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPointScalarModel {
    pub a_plus: f64,
    pub b_plus: f64,
    pub a_minus: f64,
    pub b_minus: f64,
    pub epsilon: f64,
}

impl TwoPointScalarModel {
    /// `A(1) = b(1) = 1`, `A(−1) = −2`, `b(−1) = −1`.
    pub fn standard(epsilon: f64) -> Result<Self, CounterexampleError> {
        Self::new(1.0, 1.0, -2.0, -1.0, epsilon)
    }

    pub fn new(a_plus: f64, b_plus: f64, a_minus: f64, b_minus: f64, epsilon: f64) -> Result<Self, CounterexampleError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(CounterexampleError::InvalidEpsilon(epsilon));
        }
        Ok(Self {
            a_plus,
            b_plus,
            a_minus,
            b_minus,
            epsilon,
        })
    }

    pub fn mean_a(&self) -> f64 {
        0.5 * (self.a_plus + self.a_minus)
    }

    pub fn mean_b(&self) -> f64 {
        0.5 * (self.b_plus + self.b_minus)
    }

    /// `c_{m,j} = ½[(1+εa₊)^j (εb₊)^{m−j} + (1+εa₋)^j (εb₋)^{m−j}]`
    pub fn coefficient(&self, m: usize, j: usize) -> f64 {
        let e = self.epsilon;
        let term = |a: f64, b: f64| (1.0 + e * a).powi(j as i32) * (e * b).powi((m - j) as i32);
        0.5 * (term(self.a_plus, self.b_plus) + term(self.a_minus, self.b_minus))
    }

    /// `E[(1 + εA)^m]`
    pub fn leading_coefficient(&self, m: usize) -> f64 {
        self.coefficient(m, m)
    }

    /// The same noise as a two-state i.i.d. [`MarkovNoiseModel`].
    pub fn noise_model(&self) -> Result<MarkovNoiseModel, CounterexampleError> {
        Ok(MarkovNoiseModel::scalar(
            FiniteChain::iid(&[0.5, 0.5])?,
            &[self.a_plus, self.a_minus],
            &[self.b_plus, self.b_minus],
        )?)
    }
}

/// Rows 0..=m of Pascal's triangle.
pub fn binomial_table(m: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    for n in 0..=m {
        let mut row = vec![1.0; n + 1];
        for j in 1..n {
            row[j] = rows[n - 1][j - 1] + rows[n - 1][j];
        }
        rows.push(row);
    }
    rows
}

/// `values[k][j] = E[Θ_k^j]` for k ≤ K, j ≤ m.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub max_order: usize,
    pub values: Vec<Vec<f64>>,
    /// Set once a moment (or one it depends on) exceeds [`OVERFLOW_LIMIT`].
    pub overflowed: Vec<Vec<bool>>,
}

impl MomentTable {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn moment(&self, k: usize, j: usize) -> f64 {
        self.values[k][j]
    }

    /// `(first k with E[Θ_k^j] > level, whether the sequence is non-decreasing
    /// from that k to the end)`.
    pub fn growth_past(&self, j: usize, level: f64) -> Option<(usize, bool)> {
        let first = (0..self.values.len()).find(|&k| self.overflowed[k][j] || self.values[k][j] > level)?;
        let monotone = (first..self.values.len() - 1)
            .all(|k| self.overflowed[k + 1][j] || self.values[k + 1][j] >= self.values[k][j]);
        Some((first, monotone))
    }
}

pub fn exact_moment_recursion(
    model: &TwoPointScalarModel,
    max_order: usize,
    steps: usize,
    theta0: f64,
) -> Result<MomentTable, CounterexampleError> {
    if max_order > MAX_ORDER {
        return Err(CounterexampleError::OrderTooHigh(max_order));
    }
    if max_order % 2 == 1 {
        return Err(CounterexampleError::OddOrder(max_order));
    }
    if steps == 0 {
        return Err(CounterexampleError::NoSteps);
    }
    let binom = binomial_table(max_order);
    let weights: Vec<Vec<f64>> = (0..=max_order)
        .map(|m| (0..=m).map(|j| binom[m][j] * model.coefficient(m, j)).collect())
        .collect();
    let mut values = Vec::with_capacity(steps + 1);
    let mut overflowed = Vec::with_capacity(steps + 1);
    let first: Vec<f64> = (0..=max_order).map(|j| theta0.powi(j as i32)).collect();
    overflowed.push(first.iter().map(|v| !(v.abs() <= OVERFLOW_LIMIT)).collect::<Vec<_>>());
    values.push(first);
    for _ in 0..steps {
        let prev: &Vec<f64> = values.last().unwrap();
        let prev_over: &Vec<bool> = overflowed.last().unwrap();
        let mut next = vec![0.0; max_order + 1];
        let mut over = vec![false; max_order + 1];
        for m in 0..=max_order {
            if prev_over[..=m].iter().any(|&o| o) {
                next[m] = f64::INFINITY;
                over[m] = true;
                continue;
            }
            let v: f64 = (0..=m).map(|j| weights[m][j] * prev[j]).sum();
            over[m] = !(v.abs() <= OVERFLOW_LIMIT);
            next[m] = if over[m] { f64::INFINITY } else { v };
        }
        values.push(next);
        overflowed.push(over);
    }
    Ok(MomentTable {
        max_order,
        values,
        overflowed,
    })
}

/// Fixed point of the exact recursion for orders 0..=m, or None when some
/// `E[(1+εA)^j] ≥ 1` (no finite steady-state moment of that order).
pub fn stationary_moments(model: &TwoPointScalarModel, max_order: usize) -> Result<Option<Vec<f64>>, CounterexampleError> {
    if max_order > MAX_ORDER {
        return Err(CounterexampleError::OrderTooHigh(max_order));
    }
    let binom = binomial_table(max_order);
    let mut x = vec![1.0];
    for m in 1..=max_order {
        let lead = model.leading_coefficient(m);
        if lead >= 1.0 {
            return Ok(None);
        }
        let forcing: f64 = (0..m).map(|j| binom[m][j] * model.coefficient(m, j) * x[j]).sum();
        x.push(forcing / (1.0 - lead));
    }
    Ok(Some(x))
}

/// Smallest even m with `½[(1+ε)^m + (1−2ε)^m] > 1` (in general
/// `E[(1+εA)^m] > 1`). Requires `0 < ε < 0.5` for the standard model.
pub fn divergence_threshold(epsilon: f64) -> Result<usize, CounterexampleError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(CounterexampleError::InvalidEpsilon(epsilon));
    }
    divergence_threshold_for(&TwoPointScalarModel::standard(epsilon)?)
}

pub fn divergence_threshold_for(model: &TwoPointScalarModel) -> Result<usize, CounterexampleError> {
    let e = model.epsilon;
    let (lp, lm) = ((1.0 + e * model.a_plus).abs().ln(), (1.0 + e * model.a_minus).abs().ln());
    let mut m = 2;
    while m <= THRESHOLD_SEARCH_CAP {
        // log-domain so that huge m does not overflow
        let (x, y) = (m as f64 * lp, m as f64 * lm);
        let hi = x.max(y);
        let log_mean = hi + ((x - hi).exp() + (y - hi).exp()).ln() - std::f64::consts::LN_2;
        if log_mean > 0.0 {
            return Ok(m);
        }
        m += 2;
    }
    Err(CounterexampleError::NoThreshold { cap: THRESHOLD_SEARCH_CAP })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossCheck {
    pub order: usize,
    pub steps: usize,
    pub exact: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub n_runs: usize,
}

impl CrossCheck {
    /// `|empirical − exact|` in standard errors (0 when both agree exactly).
    pub fn z_score(&self) -> f64 {
        let diff = (self.empirical - self.exact).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }

    pub fn within(&self, n_se: f64) -> bool {
        self.z_score() <= n_se
    }
}

/// Compares `E[Θ_K^m]` from the exact recursion with a seeded ensemble.
pub fn monte_carlo_cross_check(
    model: &TwoPointScalarModel,
    order: usize,
    steps: usize,
    n_runs: usize,
    seed: u64,
    theta0: f64,
) -> Result<CrossCheck, CounterexampleError> {
    if order % 2 == 1 {
        return Err(CounterexampleError::OddOrder(order));
    }
    let table = exact_moment_recursion(model, order.max(2), steps, theta0)?;
    let exact = table.moment(steps, order);
    if model.epsilon == 0.0 {
        // frozen dynamics: every run stays at Θ_0
        return Ok(CrossCheck {
            order,
            steps,
            exact,
            empirical: theta0.powi(order as i32),
            std_error: 0.0,
            n_runs,
        });
    }
    let noise = model.noise_model()?;
    let schedule = StepSchedule::constant(model.epsilon)?;
    let moments = run_ensemble(
        &noise,
        DVector::from_element(1, theta0).as_slice(),
        &schedule,
        steps,
        &EnsembleConfig {
            n_runs,
            orders: vec![(order / 2) as u32],
            record_steps: vec![steps],
            base_seed: seed,
            x0: None,
        },
    )?;
    Ok(CrossCheck {
        order,
        steps,
        exact,
        empirical: moments.estimates[0][0],
        std_error: moments.std_errors[0][0],
        n_runs,
    })
}
