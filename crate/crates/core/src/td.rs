//! TD(0) and TD(λ) policy evaluation as centered linear stochastic
//! approximation.
//!
//! Features are the rows of an N×d matrix `F` (`φ(i)ᵀ` is row i). The
//! compiled recursion runs on `Θ − θ*`, so its equilibrium is 0.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::{induced_norm, solve_gaussian, solve_lyapunov, symmetric_eigen, LinalgError, LyapunovCertificate};
use crate::lsa::{LsaError, NoiseProcess};
use crate::markov::{chain_sampler, AliasRows, FiniteChain, MarkovError, MarkovNoiseModel, DEFAULT_K_CAP};

/// Relative eigenvalue threshold for the full-column-rank check on `FᵀF`.
pub const RANK_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdError {
    #[error("feature matrix does not have full column rank")]
    RankDeficientFeatures,
    #[error("all feature vectors are zero")]
    ZeroFeatures,
    #[error("compiled mean matrix is not Hurwitz")]
    NotHurwitz,
    #[error("discount must lie in [0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("lambda {lambda} is not allowed here: {reason}")]
    InvalidLambda { lambda: f64, reason: &'static str },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("chain is periodic")]
    Periodic,
    #[error("non-finite rewards or features")]
    NonFinite,
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdProblem {
    pub chain: FiniteChain,
    /// Expected reward `c̄(i)` per state.
    pub rewards: DVector<f64>,
    pub discount: f64,
    /// N×d, row i is `φ(i)ᵀ`.
    pub features: DMatrix<f64>,
    pub lambda: f64,
}

impl TdProblem {
    pub fn new(
        chain: FiniteChain,
        rewards: DVector<f64>,
        discount: f64,
        features: DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self, TdError> {
        let n = chain.n_states();
        if rewards.len() != n {
            return Err(TdError::DimensionMismatch {
                what: "rewards",
                expected: n,
                got: rewards.len(),
            });
        }
        if features.nrows() != n {
            return Err(TdError::DimensionMismatch {
                what: "feature rows",
                expected: n,
                got: features.nrows(),
            });
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(TdError::InvalidDiscount(discount));
        }
        if !(0.0..1.0).contains(&lambda) {
            return Err(TdError::InvalidLambda {
                lambda,
                reason: "must lie in [0, 1)",
            });
        }
        if rewards.iter().chain(features.iter()).any(|x| !x.is_finite()) {
            return Err(TdError::NonFinite);
        }
        if features.iter().all(|&x| x == 0.0) {
            return Err(TdError::ZeroFeatures);
        }
        if features.ncols() == 0 || features.ncols() > n {
            return Err(TdError::RankDeficientFeatures);
        }
        let gram = features.transpose() * &features;
        let eig = symmetric_eigen(&gram)?;
        let top = eig.values[eig.values.len() - 1];
        if eig.values[0] <= RANK_REL_TOL * top {
            return Err(TdError::RankDeficientFeatures);
        }
        Ok(Self {
            chain,
            rewards,
            discount,
            features,
            lambda,
        })
    }

    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn phi(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// `max_i ‖φ(i)‖`
    pub fn phi_max(&self) -> f64 {
        self.features.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// `max_i |c̄(i)|`
    pub fn c_max(&self) -> f64 {
        self.rewards.amax()
    }

    /// Largest `φ_max` for which every `‖A(x)‖ ≤ 1`.
    pub fn normalization_target(&self) -> f64 {
        ((1.0 - self.discount * self.lambda) / (1.0 + self.discount)).sqrt()
    }
}

/// Scales the features by `s = min(1, target/φ_max)`.
pub fn normalize_features(p: &TdProblem) -> Result<(TdProblem, f64), TdError> {
    let phi_max = p.phi_max();
    if phi_max == 0.0 {
        return Err(TdError::ZeroFeatures);
    }
    let scale = (p.normalization_target() / phi_max).min(1.0);
    let mut scaled = p.clone();
    if scale < 1.0 {
        scaled.features *= scale;
    }
    Ok((scaled, scale))
}

/// `V = (I − αΓ)⁻¹ c̄`
pub fn value_function(p: &TdProblem) -> Result<DVector<f64>, TdError> {
    let n = p.n_states();
    let m = DMatrix::identity(n, n) - p.chain.transition() * p.discount;
    Ok(solve_gaussian(&m, &p.rewards)?)
}

fn require_ergodic(p: &TdProblem) -> Result<DVector<f64>, TdError> {
    let pi = p.chain.stationary_distribution()?;
    if !p.chain.is_aperiodic() {
        return Err(TdError::Periodic);
    }
    Ok(pi)
}

/// `(Ã, b̃, θ*)` for the given problem: `Ã = FᵀD(U − I)F`, `b̃ = FᵀD c̃`
/// with `U = (1−λ)αΓ(I − αλΓ)⁻¹` and `c̃ = (I − αλΓ)⁻¹c̄`.
pub fn mean_system(p: &TdProblem) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>), TdError> {
    let pi = require_ergodic(p)?;
    let n = p.n_states();
    let gamma = p.chain.transition();
    let (alpha, lambda) = (p.discount, p.lambda);
    let eye = DMatrix::<f64>::identity(n, n);
    let resolvent_arg = &eye - gamma * (alpha * lambda);
    // (I − αλΓ)⁻¹ applied column by column
    let mut resolvent = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = solve_gaussian(&resolvent_arg, &eye.column(j).into_owned())?;
        resolvent.set_column(j, &col);
    }
    let u = gamma * (alpha * (1.0 - lambda)) * &resolvent;
    let c_tilde = &resolvent * &p.rewards;
    let f = &p.features;
    let ftd = f.transpose() * DMatrix::from_diagonal(&pi);
    let a_tilde = &ftd * (u - eye) * f;
    let b_tilde = &ftd * c_tilde;
    let theta_star = solve_gaussian(&a_tilde, &(-&b_tilde))?;
    Ok((a_tilde, b_tilde, theta_star))
}

/// Eligibility-trace noise `X_k = (Z_k, Z_{k+1}, φ_k)`.
#[derive(Debug, Clone)]
pub struct TraceNoise {
    n: usize,
    d: usize,
    /// `αλ`
    decay: f64,
    discount: f64,
    features: Vec<f64>,
    rewards: Vec<f64>,
    theta_star: Vec<f64>,
    /// Transition rows, then the stationary law as row n.
    sampler: AliasRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceState {
    pub z: usize,
    pub z_next: usize,
    pub trace: Vec<f64>,
}

impl TraceNoise {
    fn phi(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn sample_next<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> usize {
        self.sampler.sample(z, rng.next_u64())
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}

impl NoiseProcess for TraceNoise {
    type State = TraceState;

    fn dim(&self) -> usize {
        self.d
    }

    fn validate_initial(&self, x0: Option<usize>) -> Result<(), LsaError> {
        match x0 {
            Some(state) if state >= self.n => Err(LsaError::InvalidInitialState {
                state,
                n_states: self.n,
            }),
            _ => Ok(()),
        }
    }

    /// `x0` fixes `Z_0`; the trace starts at `φ(Z_0)`.
    fn initial_state<R: Rng + ?Sized>(&self, x0: Option<usize>, rng: &mut R) -> TraceState {
        let z = x0.unwrap_or_else(|| self.sampler.sample(self.n, rng.next_u64()));
        let z_next = self.sample_next(z, rng);
        TraceState {
            z,
            z_next,
            trace: self.phi(z).to_vec(),
        }
    }

    fn advance<R: Rng + ?Sized>(&self, state: &mut TraceState, rng: &mut R) {
        state.z = state.z_next;
        state.z_next = self.sample_next(state.z, rng);
        let phi = &self.features[state.z * self.d..(state.z + 1) * self.d];
        for (t, p) in state.trace.iter_mut().zip(phi) {
            *t = self.decay * *t + p;
        }
    }

    /// `−φ_k (φ(z) − αφ(z′))ᵀ(θ + θ*) + c̄(z) φ_k`
    fn drift(&self, state: &TraceState, theta: &[f64], out: &mut [f64]) {
        let (pz, pn) = (self.phi(state.z), self.phi(state.z_next));
        let mut inner = 0.0;
        for j in 0..self.d {
            inner += (pz[j] - self.discount * pn[j]) * (theta[j] + self.theta_star[j]);
        }
        let coef = self.rewards[state.z] - inner;
        for (o, t) in out.iter_mut().zip(&state.trace) {
            *o = coef * t;
        }
    }
}

#[derive(Debug, Clone)]
pub enum TdNoise {
    /// TD(0): the chain on pairs `(Z_k, Z_{k+1})`.
    Pair(MarkovNoiseModel),
    Trace(TraceNoise),
}

#[derive(Debug, Clone)]
pub struct CompiledTd {
    pub noise: TdNoise,
    /// The problem after feature normalization.
    pub problem: TdProblem,
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub normalization_scale: f64,
    pub certificate: LyapunovCertificate,
    /// Pair states `(z, z′)` with `Γ_{zz′} > 0`, in noise-state order (TD(0)).
    pub pairs: Vec<(usize, usize)>,
}

impl CompiledTd {
    pub fn pair_model(&self) -> Option<&MarkovNoiseModel> {
        match &self.noise {
            TdNoise::Pair(m) => Some(m),
            TdNoise::Trace(_) => None,
        }
    }

    pub fn trace_noise(&self) -> Option<&TraceNoise> {
        match &self.noise {
            TdNoise::Trace(t) => Some(t),
            TdNoise::Pair(_) => None,
        }
    }

    fn trace_factor(&self) -> f64 {
        1.0 / (1.0 - self.problem.discount * self.problem.lambda)
    }

    /// Largest `‖φ(z) − αφ(z′)‖` over transitions with positive probability.
    fn max_td_direction(&self) -> f64 {
        let p = &self.problem;
        let g = p.chain.transition();
        let mut best = 0.0_f64;
        for z in 0..p.n_states() {
            for zn in 0..p.n_states() {
                if g[(z, zn)] > 0.0 {
                    best = best.max((p.phi(z) - p.phi(zn) * p.discount).norm());
                }
            }
        }
        best
    }

    /// `sup_x ‖A(x)‖`: exact over pairs for TD(0); the trace bound for TD(λ).
    pub fn a_max(&self) -> f64 {
        match &self.noise {
            TdNoise::Pair(m) => m.a_max(),
            TdNoise::Trace(_) => self.problem.phi_max() * self.trace_factor() * self.max_td_direction(),
        }
    }

    /// `sup_x ‖b(x)‖`: exact over pairs for TD(0); a trace-based bound for TD(λ).
    pub fn b_max(&self) -> f64 {
        match &self.noise {
            TdNoise::Pair(m) => m.b_max(),
            TdNoise::Trace(_) => {
                let p = &self.problem;
                let g = p.chain.transition();
                let ts = self.theta_star.norm();
                let mut best = 0.0_f64;
                for z in 0..p.n_states() {
                    for zn in 0..p.n_states() {
                        if g[(z, zn)] > 0.0 {
                            let dir = (p.phi(z) - p.phi(zn) * p.discount).norm();
                            best = best.max(p.rewards[z].abs() + dir * ts);
                        }
                    }
                }
                p.phi_max() * self.trace_factor() * best
            }
        }
    }

    /// Mixing time at accuracy δ. TD(0) is exact on the pair chain. TD(λ)
    /// adds the trace truncation length to the state-chain mixing time:
    /// `τ_chain(δ/2) + ⌈log(2C/δ) / log(1/(αλ))⌉`, `C = φ_max²(1+α)/(1−αλ)`.
    pub fn mixing_time(&self, delta: f64) -> Result<usize, TdError> {
        match &self.noise {
            TdNoise::Pair(m) => Ok(m.mixing_time(delta)?),
            TdNoise::Trace(t) => {
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(MarkovError::InvalidDelta(delta).into());
                }
                let p = &self.problem;
                let phi_max = p.phi_max();
                let c = phi_max * phi_max * (1.0 + p.discount) * self.trace_factor();
                // chain part: deviations are at most sup(‖A‖, ‖b‖) times the l1 distance
                let scale = self.a_max().max(self.b_max()).max(f64::MIN_POSITIVE);
                let profile = p.chain.l1_mixing_profile(DEFAULT_K_CAP)?;
                let tau_chain = profile.tau(delta / (2.0 * scale))?;
                let decay = t.decay();
                let tail = if decay == 0.0 || 2.0 * c <= delta {
                    0
                } else {
                    ((2.0 * c / delta).ln() / (1.0 / decay).ln()).ceil() as usize
                };
                Ok(tau_chain + tail)
            }
        }
    }
}

fn finish(
    scaled: TdProblem,
    scale: f64,
    noise_of: impl FnOnce(&TdProblem, &DVector<f64>) -> Result<(TdNoise, Vec<(usize, usize)>), TdError>,
) -> Result<CompiledTd, TdError> {
    let (a_tilde, b_tilde, theta_star) = mean_system(&scaled)?;
    let certificate = solve_lyapunov(&a_tilde)?;
    if !certificate.hurwitz {
        return Err(TdError::NotHurwitz);
    }
    let (noise, pairs) = noise_of(&scaled, &theta_star)?;
    Ok(CompiledTd {
        noise,
        problem: scaled,
        a_tilde,
        b_tilde,
        theta_star,
        normalization_scale: scale,
        certificate,
        pairs,
    })
}

/// TD(0) on the pair chain with `A((z,z′)) = −φ(z)(φ(z) − αφ(z′))ᵀ` and
/// centered `b((z,z′)) = A((z,z′))θ* + c̄(z)φ(z)`.
pub fn compile_td0(p: &TdProblem) -> Result<CompiledTd, TdError> {
    if p.lambda != 0.0 {
        return Err(TdError::InvalidLambda {
            lambda: p.lambda,
            reason: "TD(0) needs lambda = 0",
        });
    }
    let (scaled, scale) = normalize_features(p)?;
    finish(scaled, scale, |s, theta_star| {
        let n = s.n_states();
        let g = s.chain.transition();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|z| (0..n).map(move |zn| (z, zn)))
            .filter(|&(z, zn)| g[(z, zn)] > 0.0)
            .collect();
        let m = pairs.len();
        let index_of = |z: usize, zn: usize| pairs.iter().position(|&q| q == (z, zn));
        let mut t = DMatrix::zeros(m, m);
        for (i, &(_, zn)) in pairs.iter().enumerate() {
            for znn in 0..n {
                if let Some(j) = index_of(zn, znn) {
                    t[(i, j)] = g[(zn, znn)];
                }
            }
        }
        let pair_chain = FiniteChain::new(t)?;
        let mut a_of = Vec::with_capacity(m);
        let mut b_of = Vec::with_capacity(m);
        for &(z, zn) in &pairs {
            let pz = s.phi(z);
            let dir = &pz - s.phi(zn) * s.discount;
            let a = -(&pz * dir.transpose());
            let b = &a * theta_star + &pz * s.rewards[z];
            a_of.push(a);
            b_of.push(b);
        }
        let model = MarkovNoiseModel::new(pair_chain, a_of, b_of)?;
        Ok((TdNoise::Pair(model), pairs))
    })
}

/// TD(λ) with the eligibility-trace noise state.
pub fn compile_tdlambda(p: &TdProblem) -> Result<CompiledTd, TdError> {
    if !(p.lambda > 0.0 && p.lambda < 1.0) {
        return Err(TdError::InvalidLambda {
            lambda: p.lambda,
            reason: "TD(lambda) needs 0 < lambda < 1",
        });
    }
    let (scaled, scale) = normalize_features(p)?;
    finish(scaled, scale, |s, theta_star| {
        let n = s.n_states();
        let pi = s.chain.stationary_distribution()?;
        let g = s.chain.transition();
        let noise = TraceNoise {
            n,
            d: s.dim(),
            decay: s.discount * s.lambda,
            discount: s.discount,
            features: (0..n).flat_map(|i| s.phi(i).iter().copied().collect::<Vec<_>>()).collect(),
            rewards: s.rewards.iter().copied().collect(),
            theta_star: theta_star.iter().copied().collect(),
            sampler: chain_sampler(g, &pi),
        };
        Ok((TdNoise::Trace(noise), Vec::new()))
    })
}

/// `max_{pairs} ‖A((z,z′))‖` for a pair model, by direct enumeration.
pub fn max_pair_norm(model: &MarkovNoiseModel) -> f64 {
    (0..model.n_states()).map(|x| induced_norm(model.a_of(x))).fold(0.0, f64::max)
}
