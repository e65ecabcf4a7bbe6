//! Finite Markov chains and the Markov-modulated pair `(A(x), b(x))` that
//! drives the stochastic approximation recursion.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use thiserror::Error;

use crate::linalg::induced_norm;

pub const ROW_SUM_TOL: f64 = 1e-12;
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;
/// Steady-state mean of b must vanish to this (times `max(1, b_max)`).
pub const STEADY_STATE_BIAS_TOL: f64 = 1e-10;
pub const DEFAULT_K_CAP: usize = 10_000;
/// Window used by the geometric-tail certificate.
pub const TAIL_WINDOW: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("transition matrix is empty")]
    Empty,
    #[error("transition matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("transition entry ({row}, {col}) = {value} is outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    NonStochastic { row: usize, sum: f64 },
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("stationary distribution could not be computed (residual {residual:e})")]
    StationaryFailed { residual: f64 },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model contains non-finite values")]
    NonFinite,
    #[error("delta must be positive and finite, got {0}")]
    InvalidDelta(f64),
    #[error("no mixing time <= {cap} for delta = {delta:e} (last deviation {last_deviation:e})")]
    MixingExceedsCap {
        cap: usize,
        delta: f64,
        last_deviation: f64,
    },
    #[error("steady-state mean of b is not zero (norm {norm:e})")]
    SteadyStateBiased { norm: f64 },
}

/// Row-stochastic transition matrix on `{0, …, n−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    transition: DMatrix<f64>,
}

impl FiniteChain {
    pub fn new(transition: DMatrix<f64>) -> Result<Self, MarkovError> {
        let (rows, cols) = transition.shape();
        if rows == 0 {
            return Err(MarkovError::Empty);
        }
        if rows != cols {
            return Err(MarkovError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let value = transition[(i, j)];
                if !(0.0..=1.0).contains(&value) {
                    return Err(MarkovError::EntryOutOfRange { row: i, col: j, value });
                }
                sum += value;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::NonStochastic { row: i, sum });
            }
        }
        Ok(Self { transition })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MarkovError> {
        let n = rows.len();
        if n == 0 {
            return Err(MarkovError::Empty);
        }
        for row in rows {
            if row.len() != n {
                return Err(MarkovError::NotSquare { rows: n, cols: row.len() });
            }
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Every row equal to `p`: the chain produces i.i.d. draws from `p`.
    pub fn iid(p: &[f64]) -> Result<Self, MarkovError> {
        let n = p.len();
        Self::new(DMatrix::from_fn(n, n, |_, j| p[j]))
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states()).filter(move |&j| self.transition[(i, j)] > 0.0)
    }

    fn reaches_all(&self, start: usize, forward: bool) -> bool {
        let n = self.n_states();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let edge = if forward {
                    self.transition[(u, v)]
                } else {
                    self.transition[(v, u)]
                };
                if edge > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Strong connectivity of the transition graph.
    pub fn is_irreducible(&self) -> bool {
        self.reaches_all(0, true) && self.reaches_all(0, false)
    }

    /// Period of an irreducible chain: gcd over edges `u→v` of
    /// `level(u) + 1 − level(v)` for BFS levels from state 0.
    pub fn period(&self) -> Option<usize> {
        if !self.is_irreducible() {
            return None;
        }
        let n = self.n_states();
        let mut level = vec![usize::MAX; n];
        level[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in self.successors(u) {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let mut g = 0usize;
        for u in 0..n {
            for v in self.successors(u) {
                let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
                g = gcd(g, diff);
            }
        }
        Some(g)
    }

    pub fn is_aperiodic(&self) -> bool {
        self.period() == Some(1)
    }

    /// Unique π with `πΓ = π`, `Σπ = 1`.
    pub fn stationary_distribution(&self) -> Result<DVector<f64>, MarkovError> {
        if !self.is_irreducible() {
            return Err(MarkovError::NotIrreducible);
        }
        let n = self.n_states();
        // (Γᵀ − I)π = 0 with the last equation replaced by Σπ = 1.
        let mut system = self.transition.transpose() - DMatrix::<f64>::identity(n, n);
        for j in 0..n {
            system[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[n - 1] = 1.0;
        let lu = system.clone().lu();
        let mut pi = lu
            .solve(&rhs)
            .ok_or(MarkovError::StationaryFailed { residual: f64::NAN })?;
        // one step of iterative refinement
        let correction = lu.solve(&(&rhs - &system * &pi)).unwrap_or_else(|| DVector::zeros(n));
        pi += correction;
        let total = pi.sum();
        pi /= total;

        let residual = (pi.transpose() * &self.transition - pi.transpose()).amax();
        if residual > STATIONARY_RESIDUAL_TOL || pi.iter().any(|&p| !(p > 0.0)) {
            return Err(MarkovError::StationaryFailed { residual });
        }
        Ok(pi)
    }

    /// `Γᵏ` by repeated squaring.
    pub fn power(&self, k: usize) -> DMatrix<f64> {
        let n = self.n_states();
        let mut result = DMatrix::<f64>::identity(n, n);
        let mut base = self.transition.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        result
    }

    /// `max_i ‖(Γᵏ)_i − π‖₁` for k = 1..=k_cap (total-variation style profile).
    pub fn l1_mixing_profile(&self, k_cap: usize) -> Result<MixingProfile, MarkovError> {
        let pi = self.stationary_distribution()?;
        let n = self.n_states();
        let floor = deviation_floor(n, 1.0);
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut builder = ProfileBuilder::new(k_cap, floor);
        for _ in 1..=k_cap {
            power = &power * &self.transition;
            let dev = (0..n)
                .map(|i| (0..n).map(|j| (power[(i, j)] - pi[j]).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if builder.push(dev, dev, 0.0) {
                break;
            }
        }
        Ok(builder.finish())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Numerical zero for deviations computed from powers of Γ.
fn deviation_floor(n_states: usize, scale: f64) -> f64 {
    64.0 * f64::EPSILON * n_states as f64 * scale.max(1.0)
}

/// Finite noise chain with a matrix `A(x)` and vector `b(x)` per state.
#[derive(Debug, Clone)]
pub struct MarkovNoiseModel {
    chain: FiniteChain,
    a_of: Vec<DMatrix<f64>>,
    b_of: Vec<DVector<f64>>,
    dim: usize,
    stationary: DVector<f64>,
    a_max: f64,
    b_max: f64,
    pub(crate) tables: SamplerTables,
}

/// Flat copies of the model used by the simulation hot loop.
#[derive(Debug, Clone)]
pub(crate) struct SamplerTables {
    /// Transition rows, then the stationary law as row n.
    pub sampler: AliasRows,
    /// n blocks of d×d, row-major.
    pub a_flat: Vec<f64>,
    /// n blocks of d.
    pub b_flat: Vec<f64>,
    pub n: usize,
    /// Nonzeros of the A blocks when at most half the entries are nonzero.
    pub sparse: Option<SparseRows>,
}

/// Compressed rows for all A blocks: row `x·d + r` spans
/// `row_start[x·d + r]..row_start[x·d + r + 1]`, columns ascending.
#[derive(Debug, Clone)]
pub(crate) struct SparseRows {
    pub row_start: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    fn from_dense(a_flat: &[f64], d: usize) -> Option<Self> {
        let nnz = a_flat.iter().filter(|&&x| x != 0.0).count();
        if d < 3 || 2 * nnz > a_flat.len() {
            return None;
        }
        let mut row_start = Vec::with_capacity(a_flat.len() / d + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_start.push(0);
        for row in a_flat.chunks_exact(d) {
            for (c, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    cols.push(c);
                    vals.push(x);
                }
            }
            row_start.push(cols.len());
        }
        Some(Self { row_start, cols, vals })
    }
}

/// Walker alias tables for a set of distributions (Vose's construction).
/// A draw uses one 64-bit word r: the high half of `r·m` (as a 128-bit
/// product) picks a column and the low half, read as a fraction, chooses
/// between the column's own state and its alias. Only states with positive
/// probability are stored, so no other state is ever returned.
#[derive(Debug, Clone, Default)]
pub(crate) struct AliasRows {
    /// `(start, m)` per row.
    rows: Vec<(usize, u64)>,
    entries: Vec<AliasEntry>,
}

#[derive(Debug, Clone, Copy)]
struct AliasEntry {
    keep: f64,
    own: usize,
    alias: usize,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

impl AliasRows {
    pub fn new(rows: impl IntoIterator<Item = Vec<f64>>) -> Self {
        let mut t = Self::default();
        for row in rows {
            t.push_row(&row);
        }
        t
    }

    fn push_row(&mut self, p: &[f64]) {
        let support: Vec<usize> = (0..p.len()).filter(|&j| p[j] > 0.0).collect();
        let m = support.len();
        let total: f64 = support.iter().map(|&j| p[j]).sum();
        let mut scaled: Vec<f64> = support.iter().map(|&j| p[j] * m as f64 / total).collect();
        let mut keep = vec![1.0; m];
        let mut alias = support.clone();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            keep[s] = scaled[s];
            alias[s] = support[l];
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // whatever is left over has mass 1 up to rounding and keeps itself
        self.rows.push((self.entries.len(), m as u64));
        self.entries.extend((0..m).map(|i| AliasEntry {
            keep: keep[i],
            own: support[i],
            alias: alias[i],
        }));
    }

    #[inline]
    pub fn sample(&self, row: usize, r: u64) -> usize {
        let (start, m) = self.rows[row];
        let product = r as u128 * m as u128;
        let e = self.entries[start + (product >> 64) as usize];
        let frac = ((product as u64) >> 11) as f64 * TWO_POW_M53;
        if frac < e.keep {
            e.own
        } else {
            e.alias
        }
    }

    /// Probability of `state` under row `row` implied by the table.
    #[cfg(test)]
    fn implied(&self, row: usize, state: usize) -> f64 {
        let (start, m) = self.rows[row];
        self.entries[start..start + m as usize]
            .iter()
            .map(|e| {
                let mut q = 0.0;
                if e.own == state {
                    q += e.keep;
                }
                if e.alias == state {
                    q += 1.0 - e.keep;
                }
                q / m as f64
            })
            .sum()
    }
}

/// Alias rows `0..n` for the transitions and row `n` for the stationary law.
pub(crate) fn chain_sampler(transition: &DMatrix<f64>, stationary: &DVector<f64>) -> AliasRows {
    let n = transition.nrows();
    AliasRows::new(
        (0..n)
            .map(|i| transition.row(i).iter().copied().collect::<Vec<f64>>())
            .chain(std::iter::once(stationary.iter().copied().collect())),
    )
}

impl MarkovNoiseModel {
    pub fn new(
        chain: FiniteChain,
        a_of: Vec<DMatrix<f64>>,
        b_of: Vec<DVector<f64>>,
    ) -> Result<Self, MarkovError> {
        let n = chain.n_states();
        if a_of.len() != n {
            return Err(MarkovError::DimensionMismatch {
                what: "number of A matrices",
                expected: n,
                got: a_of.len(),
            });
        }
        if b_of.len() != n {
            return Err(MarkovError::DimensionMismatch {
                what: "number of b vectors",
                expected: n,
                got: b_of.len(),
            });
        }
        let dim = a_of[0].nrows();
        if dim == 0 {
            return Err(MarkovError::Empty);
        }
        for a in &a_of {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(MarkovError::DimensionMismatch {
                    what: "A matrix size",
                    expected: dim,
                    got: if a.nrows() != dim { a.nrows() } else { a.ncols() },
                });
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(MarkovError::NonFinite);
            }
        }
        for b in &b_of {
            if b.len() != dim {
                return Err(MarkovError::DimensionMismatch {
                    what: "b vector length",
                    expected: dim,
                    got: b.len(),
                });
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(MarkovError::NonFinite);
            }
        }
        let stationary = chain.stationary_distribution()?;
        let a_max = a_of.iter().map(induced_norm).fold(0.0, f64::max);
        let b_max = b_of.iter().map(|b| b.norm()).fold(0.0, f64::max);

        let t = chain.transition();
        let a_flat: Vec<f64> = a_of
            .iter()
            .flat_map(|a| (0..dim).flat_map(move |r| (0..dim).map(move |c| a[(r, c)])))
            .collect();
        let tables = SamplerTables {
            sampler: chain_sampler(t, &stationary),
            sparse: SparseRows::from_dense(&a_flat, dim),
            a_flat,
            b_flat: b_of.iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()).collect(),
            n,
        };

        Ok(Self {
            chain,
            a_of,
            b_of,
            dim,
            stationary,
            a_max,
            b_max,
            tables,
        })
    }

    /// Scalar model: `A(x) = [a[x]]`, `b(x) = [b[x]]`.
    pub fn scalar(chain: FiniteChain, a: &[f64], b: &[f64]) -> Result<Self, MarkovError> {
        Self::new(
            chain,
            a.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            b.iter().map(|&v| DVector::from_element(1, v)).collect(),
        )
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }
    pub fn a_of(&self, state: usize) -> &DMatrix<f64> {
        &self.a_of[state]
    }
    pub fn b_of(&self, state: usize) -> &DVector<f64> {
        &self.b_of[state]
    }
    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }
    /// `max_x ‖A(x)‖` (induced 2-norm).
    pub fn a_max(&self) -> f64 {
        self.a_max
    }
    /// `max_x ‖b(x)‖`
    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    /// `Ā = Σ_x π(x) A(x)`
    pub fn a_bar(&self) -> DMatrix<f64> {
        self.weighted_a(self.stationary.iter().copied())
    }

    /// `b̄ = Σ_x π(x) b(x)`
    pub fn b_bar(&self) -> DVector<f64> {
        self.weighted_b(self.stationary.iter().copied())
    }

    fn weighted_a(&self, weights: impl Iterator<Item = f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for (w, a) in weights.zip(&self.a_of) {
            if w != 0.0 {
                acc += a * w;
            }
        }
        acc
    }

    fn weighted_b(&self, weights: impl Iterator<Item = f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for (w, b) in weights.zip(&self.b_of) {
            if w != 0.0 {
                acc += b * w;
            }
        }
        acc
    }

    /// Exact `E[A(X_k) | X_0 = i]` and `E[b(X_k) | X_0 = i]` for every i.
    pub fn conditional_means(&self, k: usize) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let power = self.chain.power(k);
        self.means_from_power(&power)
    }

    fn means_from_power(&self, power: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let n = self.n_states();
        let a = (0..n)
            .map(|i| self.weighted_a(power.row(i).iter().copied()))
            .collect();
        let b = (0..n)
            .map(|i| self.weighted_b(power.row(i).iter().copied()))
            .collect();
        (a, b)
    }

    fn check_unbiased(&self) -> Result<(), MarkovError> {
        let norm = self.b_bar().norm();
        if norm > STEADY_STATE_BIAS_TOL * self.b_max.max(1.0) {
            return Err(MarkovError::SteadyStateBiased { norm });
        }
        Ok(())
    }

    /// Deviations `max_i ‖Ā − E[A(X_k)|X_0=i]‖` and `max_i ‖E[b(X_k)|X_0=i]‖`
    /// for k = 1.. until either `k_cap` or the deviations sit at the
    /// numerical floor for [`TAIL_WINDOW`] consecutive steps.
    pub fn mixing_profile(&self, k_cap: usize) -> Result<MixingProfile, MarkovError> {
        self.check_unbiased()?;
        let n = self.n_states();
        let a_bar = self.a_bar();
        let floor = deviation_floor(n, self.a_max + self.b_max);
        let mut builder = ProfileBuilder::new(k_cap, floor);
        let mut power = DMatrix::<f64>::identity(n, n);
        for _ in 1..=k_cap {
            power = &power * self.chain.transition();
            let (a_means, b_means) = self.means_from_power(&power);
            let dev_a = a_means
                .iter()
                .map(|m| induced_norm(&(&a_bar - m)))
                .fold(0.0, f64::max);
            let dev_b = b_means.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if builder.push(dev_a.max(dev_b), dev_a, dev_b) {
                break;
            }
        }
        Ok(builder.finish())
    }

    /// Mixing time τ_δ with the default cap.
    pub fn mixing_time(&self, delta: f64) -> Result<usize, MarkovError> {
        self.mixing_time_capped(delta, DEFAULT_K_CAP)
    }

    pub fn mixing_time_capped(&self, delta: f64, k_cap: usize) -> Result<usize, MarkovError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(MarkovError::InvalidDelta(delta));
        }
        self.mixing_profile(k_cap)?.tau(delta)
    }

    /// Least-squares estimate of K in `τ_δ ≤ K log(1/δ)`.
    pub fn geometric_mixing_fit(
        &self,
        deltas: &[f64],
        k_cap: usize,
    ) -> Result<GeometricMixingFit, MarkovError> {
        let profile = self.mixing_profile(k_cap)?;
        let mut points = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(MarkovError::InvalidDelta(delta));
            }
            points.push((delta, profile.tau(delta)?));
        }
        Ok(GeometricMixingFit::from_points(points))
    }
}

/// Deviation sequence of the conditional means from their stationary values.
#[derive(Debug, Clone)]
pub struct MixingProfile {
    /// `deviations[k-1]` is the combined deviation at step k.
    pub deviations: Vec<f64>,
    pub a_deviations: Vec<f64>,
    pub b_deviations: Vec<f64>,
    pub k_cap: usize,
    /// Deviations reached the numerical floor and stayed there.
    pub reached_floor: bool,
    /// `dev(K) / dev(K − 10)` at the last computed step (None when too short).
    pub tail_ratio: Option<f64>,
}

impl MixingProfile {
    /// Geometric-tail certificate: either converged to the floor or still
    /// contracting over the last window.
    pub fn certified(&self) -> bool {
        self.reached_floor || self.tail_ratio.is_some_and(|r| r < 1.0)
    }

    /// Smallest τ ≥ 1 such that every computed deviation from step τ on is ≤ δ.
    pub fn tau(&self, delta: f64) -> Result<usize, MarkovError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(MarkovError::InvalidDelta(delta));
        }
        let last = self.deviations.last().copied().unwrap_or(f64::INFINITY);
        if last > delta || !self.certified() {
            return Err(MarkovError::MixingExceedsCap {
                cap: self.k_cap,
                delta,
                last_deviation: last,
            });
        }
        Ok(match self.deviations.iter().rposition(|&d| d > delta) {
            Some(idx) => idx + 2,
            None => 1,
        })
    }

    pub fn deviation_at(&self, k: usize) -> Option<f64> {
        if k == 0 {
            return None;
        }
        self.deviations
            .get(k - 1)
            .copied()
            .or_else(|| self.reached_floor.then_some(0.0))
    }
}

struct ProfileBuilder {
    k_cap: usize,
    floor: f64,
    deviations: Vec<f64>,
    a_dev: Vec<f64>,
    b_dev: Vec<f64>,
    floor_run: usize,
}

impl ProfileBuilder {
    fn new(k_cap: usize, floor: f64) -> Self {
        Self {
            k_cap,
            floor,
            deviations: Vec::new(),
            a_dev: Vec::new(),
            b_dev: Vec::new(),
            floor_run: 0,
        }
    }

    /// Returns true once the floor has held for a full window.
    fn push(&mut self, dev: f64, dev_a: f64, dev_b: f64) -> bool {
        self.deviations.push(dev);
        self.a_dev.push(dev_a);
        self.b_dev.push(dev_b);
        if dev <= self.floor {
            self.floor_run += 1;
        } else {
            self.floor_run = 0;
        }
        self.floor_run >= TAIL_WINDOW
    }

    fn finish(self) -> MixingProfile {
        let len = self.deviations.len();
        let tail_ratio = (len > TAIL_WINDOW).then(|| {
            let now = self.deviations[len - 1];
            let then = self.deviations[len - 1 - TAIL_WINDOW];
            if then > 0.0 {
                now / then
            } else if now == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        });
        MixingProfile {
            reached_floor: self.floor_run >= TAIL_WINDOW,
            deviations: self.deviations,
            a_deviations: self.a_dev,
            b_deviations: self.b_dev,
            k_cap: self.k_cap,
            tail_ratio,
        }
    }
}

/// Fit of τ_δ against log(1/δ).
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMixingFit {
    pub points: Vec<(f64, usize)>,
    /// Slope of the least-squares line through the origin.
    pub k_fit: f64,
    /// `max τ_δ / log(1/δ)`: the smallest K consistent with every point.
    pub k_envelope: f64,
}

impl GeometricMixingFit {
    pub fn from_points(points: Vec<(f64, usize)>) -> Self {
        let (mut sxy, mut sxx, mut envelope) = (0.0, 0.0, 0.0_f64);
        for &(delta, tau) in &points {
            let x = (1.0 / delta).ln();
            sxy += x * tau as f64;
            sxx += x * x;
            envelope = envelope.max(tau as f64 / x);
        }
        Self {
            k_fit: if sxx > 0.0 { sxy / sxx } else { f64::NAN },
            k_envelope: envelope,
            points,
        }
    }
}
