//! Seeded Monte Carlo estimates of `E[‖Θ_k‖^{2n}]`.
//!
//! Runs are reduced along a binary tree over run indices whose shape depends
//! only on `n_runs`, so results are bit-identical for any rayon pool size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, LsaError, NoiseProcess, StepSchedule};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Subtrees smaller than this are reduced on the calling thread.
const PARALLEL_GRAIN: usize = 64;

/// Runs simulated together in one leaf of the reduction tree.
const LOCKSTEP_RUNS: usize = 16;

/// `n·ln‖Θ‖²` above this is accumulated in the log domain.
const LOG_SAFE: f64 = 700.0;

/// splitmix64 finalizer applied to `base_seed + (index + 1)·φ64`.
pub fn derive_seed(base_seed: u64, index: u64) -> u64 {
    let mut z = base_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub n_runs: usize,
    /// Moment orders n; the estimated quantity is `‖Θ_k‖^{2n}`.
    pub orders: Vec<u32>,
    /// Iterations k (0 ≤ k ≤ horizon) at which moments are recorded.
    pub record_steps: Vec<usize>,
    pub base_seed: u64,
    /// Fixed X_0 for every run; stationary draw when absent.
    pub x0: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMoments {
    pub orders: Vec<u32>,
    pub record_steps: Vec<usize>,
    /// `estimates[r][j]`: sample mean of `‖Θ_{record_steps[r]}‖^{2·orders[j]}`.
    pub estimates: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
    /// Set where at least one sample needed the log-domain path.
    pub overflowed: Vec<Vec<bool>>,
    pub n_runs: usize,
    pub seed: u64,
}

impl EnsembleMoments {
    fn index(&self, k: usize, n: u32) -> Option<(usize, usize)> {
        let r = self.record_steps.binary_search(&k).ok()?;
        let j = self.orders.iter().position(|&o| o == n)?;
        Some((r, j))
    }

    pub fn estimate(&self, k: usize, n: u32) -> Option<f64> {
        self.index(k, n).map(|(r, j)| self.estimates[r][j])
    }

    pub fn std_error(&self, k: usize, n: u32) -> Option<f64> {
        self.index(k, n).map(|(r, j)| self.std_errors[r][j])
    }
}

/// Running (count, mean, M2) with a log-sum-exp side channel for samples
/// too large to hold in f64.
#[derive(Debug, Clone, Copy)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
    log_big: f64,
}

impl Moments {
    const EMPTY: Self = Self {
        count: 0.0,
        mean: 0.0,
        m2: 0.0,
        log_big: f64::NEG_INFINITY,
    };

    fn single_finite(x: f64) -> Self {
        Self {
            count: 1.0,
            mean: x,
            m2: 0.0,
            log_big: f64::NEG_INFINITY,
        }
    }

    fn single_log(log_x: f64) -> Self {
        Self {
            count: 1.0,
            log_big: log_x,
            ..Self::EMPTY
        }
    }

    fn merge(self, other: Self) -> Self {
        let log_big = log_add_exp(self.log_big, other.log_big);
        if self.count == 0.0 {
            return Self { log_big, ..other };
        }
        if other.count == 0.0 {
            return Self { log_big, ..self };
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + delta * (other.count / count),
            m2: self.m2 + other.m2 + delta * delta * (self.count * other.count / count),
            log_big,
        }
    }

    /// (estimate, standard error, overflowed) over `total` samples.
    fn finish(self, total: usize) -> (f64, f64, bool) {
        let total_f = total as f64;
        if self.log_big == f64::NEG_INFINITY {
            let var = if total > 1 { self.m2 / (total_f - 1.0) } else { 0.0 };
            return (self.mean, (var / total_f).sqrt(), false);
        }
        // finite part contributes mean·count; big part exp(log_big)
        let finite_sum = self.mean * self.count;
        let log_total = if finite_sum > 0.0 {
            log_add_exp(finite_sum.ln(), self.log_big)
        } else {
            self.log_big
        };
        ((log_total - total_f.ln()).exp(), f64::INFINITY, true)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    if m == f64::INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `‖Θ‖²` below this for every order in use takes the direct path without a log.
fn direct_limit(orders: &[u32]) -> f64 {
    let top = orders.iter().copied().max().unwrap_or(1).max(1);
    // a hair under the exact cut so rounding never sends a log-path sample here
    (LOG_SAFE / top as f64).exp() * (1.0 - 1e-12)
}

fn sample(norm_sq: f64, order: u32, limit: f64) -> Moments {
    if order == 0 {
        return Moments::single_finite(1.0);
    }
    if norm_sq < limit {
        return Moments::single_finite(norm_sq.powi(order as i32));
    }
    if !norm_sq.is_finite() {
        return Moments::single_log(f64::INFINITY);
    }
    let log_x = order as f64 * norm_sq.ln();
    if log_x > LOG_SAFE {
        Moments::single_log(log_x)
    } else {
        Moments::single_finite(norm_sq.powi(order as i32))
    }
}

fn validate(config: &EnsembleConfig, steps: usize) -> Result<(Vec<usize>, Vec<u32>), LsaError> {
    if config.n_runs < 2 {
        return Err(LsaError::TooFewRuns(config.n_runs));
    }
    if config.orders.is_empty() {
        return Err(LsaError::NoOrders);
    }
    let mut records = config.record_steps.clone();
    records.sort_unstable();
    records.dedup();
    if let Some(&step) = records.iter().find(|&&k| k > steps) {
        return Err(LsaError::RecordOutOfRange { step, steps });
    }
    let mut orders = config.orders.clone();
    orders.dedup();
    Ok((records, orders))
}

/// Monte Carlo moments over `config.n_runs` independent trajectories.
pub fn run_ensemble<N: NoiseProcess>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    config: &EnsembleConfig,
) -> Result<EnsembleMoments, LsaError> {
    check_inputs(noise, theta0, schedule, steps, config.x0)?;
    let (records, orders) = validate(config, steps)?;

    let limit = direct_limit(&orders);
    let reduce_leaf = |lo: usize, hi: usize| -> Vec<Moments> {
        let mut rngs: Vec<ChaCha8Rng> = (lo..hi)
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(config.base_seed, i as u64)))
            .collect();
        let runs = hi - lo;
        let norms = noise.squared_norms(theta0, schedule, steps, config.x0, &mut rngs, &records);
        let mut powers = Vec::with_capacity(runs);
        let mut acc = Vec::with_capacity(records.len() * orders.len());
        for row in norms.chunks_exact(runs) {
            for &o in &orders {
                acc.push(leaf_moments(row, o, limit, &mut powers));
            }
        }
        acc
    };
    let acc = reduce_range(0, config.n_runs, &reduce_leaf);

    let width = orders.len();
    let mut estimates = Vec::with_capacity(records.len());
    let mut std_errors = Vec::with_capacity(records.len());
    let mut overflowed = Vec::with_capacity(records.len());
    for row in acc.chunks(width) {
        let (mut e, mut s, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for (m, &order) in row.iter().zip(&orders) {
            let (est, se, big) = if order == 0 {
                (1.0, 0.0, false)
            } else {
                m.finish(config.n_runs)
            };
            e.push(est);
            s.push(se);
            o.push(big);
        }
        estimates.push(e);
        std_errors.push(s);
        overflowed.push(o);
    }
    Ok(EnsembleMoments {
        orders,
        record_steps: records,
        estimates,
        std_errors,
        overflowed,
        n_runs: config.n_runs,
        seed: config.base_seed,
    })
}

/// Moments of `‖Θ‖^{2·order}` over one leaf's runs: two passes when every
/// sample is small enough to power directly, a merge tree otherwise.
fn leaf_moments(norm_sq: &[f64], order: u32, limit: f64, powers: &mut Vec<f64>) -> Moments {
    if order == 0 || norm_sq.iter().any(|&x| !(x < limit)) {
        let samples: Vec<Moments> = norm_sq.iter().map(|&x| sample(x, order, limit)).collect();
        return tree(&samples);
    }
    powers.clear();
    powers.extend(norm_sq.iter().map(|&x| x.powi(order as i32)));
    let count = powers.len() as f64;
    let mean = powers.iter().sum::<f64>() / count;
    let m2 = powers.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>();
    Moments {
        count,
        mean,
        m2,
        log_big: f64::NEG_INFINITY,
    }
}

/// Merge of single-run samples along a midpoint tree.
fn tree(samples: &[Moments]) -> Moments {
    if samples.len() == 1 {
        return samples[0];
    }
    let mid = samples.len() / 2;
    tree(&samples[..mid]).merge(tree(&samples[mid..]))
}

fn reduce_range<F>(lo: usize, hi: usize, leaf: &F) -> Vec<Moments>
where
    F: Fn(usize, usize) -> Vec<Moments> + Sync,
{
    if hi - lo <= LOCKSTEP_RUNS {
        return leaf(lo, hi);
    }
    let mid = lo + (hi - lo) / 2;
    let (left, right) = if hi - lo > PARALLEL_GRAIN {
        rayon::join(|| reduce_range(lo, mid, leaf), || reduce_range(mid, hi, leaf))
    } else {
        (reduce_range(lo, mid, leaf), reduce_range(mid, hi, leaf))
    };
    let mut merged = left;
    for (a, b) in merged.iter_mut().zip(right) {
        *a = a.merge(b);
    }
    merged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::simulate;
    use crate::markov::{FiniteChain, MarkovNoiseModel};
    use nalgebra::{DMatrix, DVector};

    fn config(n_runs: usize, orders: Vec<u32>, records: Vec<usize>, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            n_runs,
            orders,
            record_steps: records,
            base_seed: seed,
            x0: None,
        }
    }

    #[test]
    fn seed_derivation_reference_values() {
        // splitmix64 with state 0 yields 0xE220A8397B1DCDAF as its first output
        assert_eq!(derive_seed(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(derive_seed(1, 0), derive_seed(0, 1));
    }

    #[test]
    fn constant_trajectories_are_exact() {
        let model = MarkovNoiseModel::new(
            FiniteChain::iid(&[0.3, 0.7]).unwrap(),
            vec![DMatrix::zeros(2, 2); 2],
            vec![DVector::zeros(2); 2],
        )
        .unwrap();
        let s = StepSchedule::constant(0.1).unwrap();
        let m = run_ensemble(&model, &[3.0, 4.0], &s, 20, &config(300, vec![0, 1, 2], vec![0, 7, 20], 3))
            .unwrap();
        for &k in &[0, 7, 20] {
            assert_eq!(m.estimate(k, 0), Some(1.0));
            assert_eq!(m.estimate(k, 1), Some(25.0));
            assert_eq!(m.estimate(k, 2), Some(625.0));
            assert_eq!(m.std_error(k, 2), Some(0.0));
        }
    }

    #[test]
    fn deterministic_decay_moments() {
        let model = MarkovNoiseModel::scalar(FiniteChain::iid(&[1.0]).unwrap(), &[-1.0], &[0.0]).unwrap();
        let s = StepSchedule::constant(0.1).unwrap();
        let m = run_ensemble(&model, &[2.0], &s, 30, &config(10, vec![1], vec![0, 5, 30], 0)).unwrap();
        for &k in &[0usize, 5, 30] {
            let exact = 0.81f64.powi(k as i32) * 4.0;
            assert!((m.estimate(k, 1).unwrap() - exact).abs() <= 1e-13 * exact);
            assert_eq!(m.std_error(k, 1), Some(0.0));
        }
    }

    #[test]
    fn matches_direct_accumulation() {
        let chain = FiniteChain::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let model = MarkovNoiseModel::scalar(chain, &[-1.0, 0.5], &[0.6, -0.8]).unwrap();
        let s = StepSchedule::constant(0.05).unwrap();
        let cfg = config(257, vec![1, 2], vec![3, 40], 99);
        let m = run_ensemble(&model, &[1.0], &s, 40, &cfg).unwrap();
        for &k in &[3usize, 40] {
            let samples: Vec<f64> = (0..257)
                .map(|r| {
                    let t = simulate(&model, &[1.0], &s, 40, derive_seed(99, r), None).unwrap();
                    t.theta[k][0].powi(2)
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / 257.0;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 256.0;
            let est = m.estimate(k, 1).unwrap();
            assert!((est - mean).abs() <= 1e-12 * mean, "{est} vs {mean}");
            let se = m.std_error(k, 1).unwrap();
            assert!((se - (var / 257.0).sqrt()).abs() <= 1e-9 * se);
        }
    }

    #[test]
    fn bit_identical_across_pool_sizes() {
        let chain = FiniteChain::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let model = MarkovNoiseModel::scalar(chain, &[-1.0, 0.5], &[0.6, -0.8]).unwrap();
        let s = StepSchedule::constant(0.05).unwrap();
        let cfg = config(1000, vec![1, 3], vec![10, 50], 7);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_ensemble(&model, &[0.5], &s, 50, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
        assert_eq!(run(1), run_ensemble(&model, &[0.5], &s, 50, &cfg).unwrap());
    }

    #[test]
    fn overflow_uses_log_domain() {
        let model = MarkovNoiseModel::scalar(FiniteChain::iid(&[1.0]).unwrap(), &[0.0], &[0.0]).unwrap();
        let s = StepSchedule::constant(0.1).unwrap();
        let m = run_ensemble(&model, &[1e100], &s, 2, &config(4, vec![1, 2], vec![2], 1)).unwrap();
        let e1 = m.estimate(2, 1).unwrap();
        assert!((e1 / 1e200 - 1.0).abs() < 1e-15);
        assert!(!m.overflowed[0][0]);
        assert_eq!(m.estimate(2, 2), Some(f64::INFINITY));
        assert_eq!(m.std_error(2, 2), Some(f64::INFINITY));
        assert!(m.overflowed[0][1]);

        let modest = run_ensemble(&model, &[1e40], &s, 2, &config(4, vec![5], vec![2], 1)).unwrap();
        // 1e400 is outside f64, so the log-domain mean itself overflows
        assert_eq!(modest.estimate(2, 5), Some(f64::INFINITY));
        // ‖Θ‖^10 = 1e305: representable, but past the direct-power threshold
        let theta = 10f64.powf(30.5);
        let inside = run_ensemble(&model, &[theta], &s, 2, &config(4, vec![5], vec![2], 1)).unwrap();
        let v = inside.estimate(2, 5).unwrap();
        assert!(inside.overflowed[0][0]);
        assert!((v / (theta * theta).powi(5) - 1.0).abs() < 1e-11, "{v}");
    }

    #[test]
    fn config_errors() {
        let model = MarkovNoiseModel::scalar(FiniteChain::iid(&[1.0]).unwrap(), &[0.0], &[0.0]).unwrap();
        let s = StepSchedule::constant(0.1).unwrap();
        assert_eq!(
            run_ensemble(&model, &[1.0], &s, 5, &config(1, vec![1], vec![1], 0)).unwrap_err(),
            LsaError::TooFewRuns(1)
        );
        assert_eq!(
            run_ensemble(&model, &[1.0], &s, 5, &config(2, vec![], vec![1], 0)).unwrap_err(),
            LsaError::NoOrders
        );
        assert!(matches!(
            run_ensemble(&model, &[1.0], &s, 5, &config(2, vec![1], vec![6], 0)).unwrap_err(),
            LsaError::RecordOutOfRange { .. }
        ));
    }
}
