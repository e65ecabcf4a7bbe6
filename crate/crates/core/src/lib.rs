//! Linear stochastic approximation driven by finite Markov noise.
//!
//! Simulation, Lyapunov certificates, mixing times and the finite-time moment
//! bounds that go with them, plus TD(0)/TD(λ) instances and a scalar example
//! whose high-order moments diverge.

pub mod bounds;
pub mod counterexample;
pub mod linalg;
pub mod lsa;
pub mod markov;
pub mod td;

pub use bounds::{compute_constants, mean_square_bound, BoundConstants, BoundsError, DiminishingConstants};
pub use linalg::{solve_lyapunov, LinalgError, LyapunovCertificate};
pub use lsa::{run_ensemble, simulate, EnsembleConfig, EnsembleMoments, LsaError, NoiseProcess, StepSchedule, Trajectory};
pub use markov::{FiniteChain, MarkovError, MarkovNoiseModel, MixingProfile};
pub use td::{compile_td0, compile_tdlambda, CompiledTd, TdError, TdProblem};
