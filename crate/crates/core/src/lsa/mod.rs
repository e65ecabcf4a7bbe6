//! Simulation of `Θ_{k+1} = Θ_k + ε_k (A(X_k) Θ_k + b(X_k))`.
//!
//! The recursion is generic over a [`NoiseProcess`]: a finite
//! [`MarkovNoiseModel`] is the common case, and the TD(λ) simulator in
//! [`crate::td`] supplies a noise state that carries an eligibility trace.

mod ensemble;
mod lemmas;

pub use ensemble::{derive_seed, run_ensemble, EnsembleConfig, EnsembleMoments};
pub use lemmas::{
    check_growth_bound, check_lemma1, check_lemma1_windows, check_lemma2, check_step_bound,
    InequalityCheck, Lemma1Report, PathwiseSweep,
};

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::markov::MarkovNoiseModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsaError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("step sequence increases at index {index}")]
    NotNonIncreasing { index: usize },
    #[error("step sequence is empty")]
    EmptySchedule,
    #[error("step sequence has {len} entries but {steps} steps were requested")]
    ScheduleTooShort { len: usize, steps: usize },
    #[error("number of steps must be at least 1")]
    NoSteps,
    #[error("initial vector has length {got}, model dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial state {state} is out of range for {n_states} states")]
    InvalidInitialState { state: usize, n_states: usize },
    #[error("ensemble needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("at least one moment order is required")]
    NoOrders,
    #[error("record step {step} exceeds the horizon {steps}")]
    RecordOutOfRange { step: usize, steps: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
}

/// Step sizes ε_k.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Constant { epsilon: f64 },
    /// Non-increasing sequence; entry k is used at iteration k.
    Sequence { epsilons: Vec<f64> },
}

impl StepSchedule {
    pub fn constant(epsilon: f64) -> Result<Self, LsaError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(LsaError::InvalidStep(epsilon));
        }
        Ok(Self::Constant { epsilon })
    }

    pub fn sequence(epsilons: Vec<f64>) -> Result<Self, LsaError> {
        if epsilons.is_empty() {
            return Err(LsaError::EmptySchedule);
        }
        if let Some(bad) = epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(LsaError::InvalidStep(*bad));
        }
        if let Some(index) = epsilons.windows(2).position(|w| w[1] > w[0]) {
            return Err(LsaError::NotNonIncreasing { index: index + 1 });
        }
        Ok(Self::Sequence { epsilons })
    }

    /// `ε_j = ε₀ / (j + 1)^power` for j < len.
    pub fn polynomial(eps0: f64, power: f64, len: usize) -> Result<Self, LsaError> {
        Self::sequence((0..len).map(|j| eps0 / ((j + 1) as f64).powf(power)).collect())
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        match self {
            Self::Constant { epsilon } => Some(*epsilon),
            Self::Sequence { epsilons } => epsilons.get(k).copied(),
        }
    }

    /// Number of available steps (None for a constant schedule).
    pub fn len(&self) -> Option<usize> {
        match self {
            Self::Constant { .. } => None,
            Self::Sequence { epsilons } => Some(epsilons.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// The largest step, ε₀ for a sequence.
    pub fn max_step(&self) -> f64 {
        match self {
            Self::Constant { epsilon } => *epsilon,
            Self::Sequence { epsilons } => epsilons[0],
        }
    }

    pub(crate) fn check_covers(&self, steps: usize) -> Result<(), LsaError> {
        match self.len() {
            Some(len) if len < steps => Err(LsaError::ScheduleTooShort { len, steps }),
            _ => Ok(()),
        }
    }
}

/// A source of `(A(x), b(x))` driven by a Markov state.
pub trait NoiseProcess: Sync {
    type State: Clone + Send;

    fn dim(&self) -> usize;

    /// Rejects initial-state requests the process cannot honour.
    fn validate_initial(&self, x0: Option<usize>) -> Result<(), LsaError>;

    /// X_0: the given state, or a draw from the stationary law.
    fn initial_state<R: Rng + ?Sized>(&self, x0: Option<usize>, rng: &mut R) -> Self::State;

    /// X_k → X_{k+1}
    fn advance<R: Rng + ?Sized>(&self, state: &mut Self::State, rng: &mut R);

    /// `out = A(x) θ + b(x)`
    fn drift(&self, state: &Self::State, theta: &[f64], out: &mut [f64]);

    /// Runs `steps` updates from `theta0`, calling `visit(k, Θ_k, X_k)` before
    /// each one, and returns Θ_K. Overrides must agree bit for bit with the
    /// default.
    fn run_path<R, F>(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        x0: Option<usize>,
        rng: &mut R,
        visit: F,
    ) -> Vec<f64>
    where
        Self: Sized,
        R: Rng + ?Sized,
        F: FnMut(usize, &[f64], &Self::State),
    {
        drive_generic(self, theta0, schedule, steps, x0, rng, visit)
    }

    /// `‖Θ_k‖²` for each run driven by one of `rngs` and each `k` in the
    /// ascending `records` (`k = steps` meaning Θ_K), laid out as
    /// `out[r·runs + j]`. Each run matches [`NoiseProcess::run_path`] exactly.
    fn squared_norms<R>(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        x0: Option<usize>,
        rngs: &mut [R],
        records: &[usize],
    ) -> Vec<f64>
    where
        Self: Sized,
        R: Rng,
    {
        let runs = rngs.len();
        let mut out = vec![0.0; records.len() * runs];
        for (j, rng) in rngs.iter_mut().enumerate() {
            let mut next = 0;
            let last = self.run_path(theta0, schedule, steps, x0, rng, |k, theta, _| {
                if next < records.len() && records[next] == k {
                    out[next * runs + j] = norm_sq(theta);
                    next += 1;
                }
            });
            if next < records.len() {
                out[next * runs + j] = norm_sq(&last);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn norm_sq(theta: &[f64]) -> f64 {
    theta.iter().fold(0.0, |acc, t| acc + t * t)
}

/// `out = a·theta + b` for row-major `a`.
#[inline]
pub(crate) fn affine(a: &[f64], b: &[f64], theta: &[f64], out: &mut [f64]) {
    let d = theta.len();
    for ((o, row), bi) in out.iter_mut().zip(a.chunks_exact(d)).zip(b) {
        *o = row.iter().zip(theta).fold(*bi, |acc, (x, t)| acc + x * t);
    }
}

/// [`affine`] with the dimension known at compile time so the loops unroll.
/// Same summation order, so results are bit-identical.
#[inline]
fn affine_fixed<const D: usize>(a: &[f64], b: &[f64], theta: &[f64], out: &mut [f64]) {
    let a: &[f64] = &a[..D * D];
    let theta: &[f64; D] = theta.try_into().expect("dimension");
    let b: &[f64; D] = b.try_into().expect("dimension");
    let out: &mut [f64; D] = out.try_into().expect("dimension");
    for r in 0..D {
        let mut acc = b[r];
        for c in 0..D {
            acc += a[r * D + c] * theta[c];
        }
        out[r] = acc;
    }
}

impl NoiseProcess for MarkovNoiseModel {
    type State = usize;

    fn dim(&self) -> usize {
        MarkovNoiseModel::dim(self)
    }

    fn validate_initial(&self, x0: Option<usize>) -> Result<(), LsaError> {
        match x0 {
            Some(state) if state >= self.n_states() => Err(LsaError::InvalidInitialState {
                state,
                n_states: self.n_states(),
            }),
            _ => Ok(()),
        }
    }

    fn initial_state<R: Rng + ?Sized>(&self, x0: Option<usize>, rng: &mut R) -> usize {
        match x0 {
            Some(state) => state,
            None => self.tables.sampler.sample(self.tables.n, rng.next_u64()),
        }
    }

    #[inline]
    fn advance<R: Rng + ?Sized>(&self, state: &mut usize, rng: &mut R) {
        *state = self.tables.sampler.sample(*state, rng.next_u64());
    }

    #[inline]
    fn drift(&self, state: &usize, theta: &[f64], out: &mut [f64]) {
        let d = theta.len();
        let b = &self.tables.b_flat[*state * d..(*state + 1) * d];
        if let Some(sp) = &self.tables.sparse {
            // skipping exact zeros leaves every partial sum unchanged
            let starts = &sp.row_start[*state * d..=(*state + 1) * d];
            for ((o, bi), w) in out.iter_mut().zip(b).zip(starts.windows(2)) {
                let (cols, vals) = (&sp.cols[w[0]..w[1]], &sp.vals[w[0]..w[1]]);
                *o = cols.iter().zip(vals).fold(*bi, |acc, (&c, x)| acc + x * theta[c]);
            }
            return;
        }
        let a = &self.tables.a_flat[*state * d * d..(*state + 1) * d * d];
        match d {
            1 => affine_fixed::<1>(a, b, theta, out),
            2 => affine_fixed::<2>(a, b, theta, out),
            3 => affine_fixed::<3>(a, b, theta, out),
            4 => affine_fixed::<4>(a, b, theta, out),
            5 => affine_fixed::<5>(a, b, theta, out),
            6 => affine_fixed::<6>(a, b, theta, out),
            _ => affine(a, b, theta, out),
        }
    }

    fn run_path<R, F>(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        x0: Option<usize>,
        rng: &mut R,
        visit: F,
    ) -> Vec<f64>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &[f64], &usize),
    {
        if self.tables.sparse.is_some() {
            return drive_sparse(self, theta0, schedule, steps, x0, rng, visit);
        }
        match self.dim() {
            1 => drive_fixed::<1, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            2 => drive_fixed::<2, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            3 => drive_fixed::<3, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            4 => drive_fixed::<4, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            5 => drive_fixed::<5, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            6 => drive_fixed::<6, _, _>(self, theta0, schedule, steps, x0, rng, visit),
            _ => drive_generic(self, theta0, schedule, steps, x0, rng, visit),
        }
    }

    fn squared_norms<R: Rng>(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        x0: Option<usize>,
        rngs: &mut [R],
        records: &[usize],
    ) -> Vec<f64> {
        let lockstep = Lockstep {
            model: self,
            schedule,
            steps,
            records,
        };
        if self.tables.sparse.is_some() {
            let (offsets, active) = active_rows(self);
            let rows = offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
            let width = active.iter().map(|ar| ar.end - ar.start).max().unwrap_or(0);
            return match (rows, width) {
                (0..=1, 0..=2) => lockstep.padded::<1, 2, R>(theta0, x0, rngs),
                (0..=1, 3..=4) => lockstep.padded::<1, 4, R>(theta0, x0, rngs),
                (2, 0..=2) => lockstep.padded::<2, 2, R>(theta0, x0, rngs),
                (2, 3..=4) => lockstep.padded::<2, 4, R>(theta0, x0, rngs),
                _ => lockstep.sparse(theta0, x0, rngs),
            };
        }
        match self.dim() {
            1 => lockstep.fixed::<1, R>(theta0, x0, rngs),
            2 => lockstep.fixed::<2, R>(theta0, x0, rngs),
            3 => lockstep.fixed::<3, R>(theta0, x0, rngs),
            4 => lockstep.fixed::<4, R>(theta0, x0, rngs),
            5 => lockstep.fixed::<5, R>(theta0, x0, rngs),
            6 => lockstep.fixed::<6, R>(theta0, x0, rngs),
            _ => {
                let mut out = vec![0.0; records.len() * rngs.len()];
                let runs = rngs.len();
                for (j, rng) in rngs.iter_mut().enumerate() {
                    let single = lockstep.one_run(theta0, x0, rng);
                    for (r, v) in single.into_iter().enumerate() {
                        out[r * runs + j] = v;
                    }
                }
                out
            }
        }
    }
}

/// Several runs of a finite-state model advanced together one step at a
/// time, so the independent runs overlap in the pipeline. Per run the
/// arithmetic is that of the single-run kernels.
struct Lockstep<'a> {
    model: &'a MarkovNoiseModel,
    schedule: &'a StepSchedule,
    steps: usize,
    records: &'a [usize],
}

impl Lockstep<'_> {
    fn one_run<R: Rng>(&self, theta0: &[f64], x0: Option<usize>, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut next = 0;
        let last = drive_generic(self.model, theta0, self.schedule, self.steps, x0, rng, |k, theta, _| {
            if next < self.records.len() && self.records[next] == k {
                out.push(norm_sq(theta));
                next += 1;
            }
        });
        if next < self.records.len() {
            out.push(norm_sq(&last));
        }
        out
    }

    fn fixed<const D: usize, R: Rng>(&self, theta0: &[f64], x0: Option<usize>, rngs: &mut [R]) -> Vec<f64> {
        let t = &self.model.tables;
        let a: Vec<[[f64; D]; D]> = t
            .a_flat
            .chunks_exact(D * D)
            .map(|block| std::array::from_fn(|r| std::array::from_fn(|c| block[r * D + c])))
            .collect();
        let b: Vec<[f64; D]> = t.b_flat.chunks_exact(D).map(|v| std::array::from_fn(|r| v[r])).collect();
        let start: [f64; D] = theta0.try_into().expect("dimension checked");
        let runs = rngs.len();
        let mut theta = vec![start; runs];
        let mut state: Vec<usize> = rngs.iter_mut().map(|rng| self.model.initial_state(x0, rng)).collect();
        let mut out = vec![0.0; self.records.len() * runs];
        let mut next = 0;
        for k in 0..self.steps {
            if next < self.records.len() && self.records[next] == k {
                for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(&theta) {
                    *o = norm_sq(th);
                }
                next += 1;
            }
            let eps = self.schedule.at(k).expect("schedule covers horizon");
            let advance = k + 1 < self.steps;
            for ((th, x), rng) in theta.iter_mut().zip(state.iter_mut()).zip(rngs.iter_mut()) {
                let (ax, bx) = (&a[*x], &b[*x]);
                let mut g = [0.0; D];
                for r in 0..D {
                    let mut acc = bx[r];
                    for c in 0..D {
                        acc += ax[r][c] * th[c];
                    }
                    g[r] = acc;
                }
                for r in 0..D {
                    th[r] += eps * g[r];
                }
                if advance {
                    *x = t.sampler.sample(*x, rng.next_u64());
                }
            }
        }
        if next < self.records.len() {
            for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(&theta) {
                *o = norm_sq(th);
            }
        }
        out
    }

    /// Sparse models with at most `ROWS` active rows per state and `WIDTH`
    /// nonzeros per row. Short rows are padded with zero terms on column 0
    /// and missing rows with a zero row 0; these add exact zeros, which
    /// change nothing but possibly the sign of a zero.
    fn padded<const ROWS: usize, const WIDTH: usize, R: Rng>(
        &self,
        theta0: &[f64],
        x0: Option<usize>,
        rngs: &mut [R],
    ) -> Vec<f64> {
        let t = &self.model.tables;
        let sp = t.sparse.as_ref().expect("sparse tables");
        let (offsets, active) = active_rows(self.model);
        let d = theta0.len();
        let blank = Padded {
            row: 0,
            b: 0.0,
            cols: [0; WIDTH],
            vals: [0.0; WIDTH],
        };
        let program: Vec<[Padded<WIDTH>; ROWS]> = offsets
            .windows(2)
            .map(|w| {
                let mut slots = [blank; ROWS];
                for (slot, ar) in slots.iter_mut().zip(&active[w[0]..w[1]]) {
                    slot.row = ar.row;
                    slot.b = ar.b;
                    for (i, e) in (ar.start..ar.end).enumerate() {
                        slot.cols[i] = sp.cols[e];
                        slot.vals[i] = sp.vals[e];
                    }
                }
                slots
            })
            .collect();
        let runs = rngs.len();
        let mut theta: Vec<f64> = theta0.repeat(runs);
        let mut state: Vec<usize> = rngs.iter_mut().map(|rng| self.model.initial_state(x0, rng)).collect();
        let mut out = vec![0.0; self.records.len() * runs];
        let mut next = 0;
        for k in 0..self.steps {
            if next < self.records.len() && self.records[next] == k {
                for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(theta.chunks_exact(d)) {
                    *o = norm_sq(th);
                }
                next += 1;
            }
            let eps = self.schedule.at(k).expect("schedule covers horizon");
            let advance = k + 1 < self.steps;
            for ((th, x), rng) in theta.chunks_exact_mut(d).zip(state.iter_mut()).zip(rngs.iter_mut()) {
                let slots = &program[*x];
                let mut g = [0.0; ROWS];
                for (gi, slot) in g.iter_mut().zip(slots) {
                    let mut acc = slot.b;
                    for i in 0..WIDTH {
                        acc += slot.vals[i] * th[slot.cols[i]];
                    }
                    *gi = acc;
                }
                for (gi, slot) in g.iter().zip(slots) {
                    th[slot.row] += eps * gi;
                }
                if advance {
                    *x = t.sampler.sample(*x, rng.next_u64());
                }
            }
        }
        if next < self.records.len() {
            for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(theta.chunks_exact(d)) {
                *o = norm_sq(th);
            }
        }
        out
    }

    fn sparse<R: Rng>(&self, theta0: &[f64], x0: Option<usize>, rngs: &mut [R]) -> Vec<f64> {
        let t = &self.model.tables;
        let sp = t.sparse.as_ref().expect("sparse tables");
        let (offsets, active) = active_rows(self.model);
        let d = theta0.len();
        let runs = rngs.len();
        let mut theta: Vec<f64> = theta0.repeat(runs);
        let mut state: Vec<usize> = rngs.iter_mut().map(|rng| self.model.initial_state(x0, rng)).collect();
        let mut g = vec![0.0; d];
        let mut out = vec![0.0; self.records.len() * runs];
        let mut next = 0;
        for k in 0..self.steps {
            if next < self.records.len() && self.records[next] == k {
                for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(theta.chunks_exact(d)) {
                    *o = norm_sq(th);
                }
                next += 1;
            }
            let eps = self.schedule.at(k).expect("schedule covers horizon");
            let advance = k + 1 < self.steps;
            for ((th, x), rng) in theta.chunks_exact_mut(d).zip(state.iter_mut()).zip(rngs.iter_mut()) {
                let rows = &active[offsets[*x]..offsets[*x + 1]];
                for (gi, ar) in g.iter_mut().zip(rows) {
                    let (cols, vals) = (&sp.cols[ar.start..ar.end], &sp.vals[ar.start..ar.end]);
                    *gi = cols.iter().zip(vals).fold(ar.b, |acc, (&c, v)| acc + v * th[c]);
                }
                for (gi, ar) in g.iter().zip(rows) {
                    th[ar.row] += eps * gi;
                }
                if advance {
                    *x = t.sampler.sample(*x, rng.next_u64());
                }
            }
        }
        if next < self.records.len() {
            for (o, th) in out[next * runs..(next + 1) * runs].iter_mut().zip(theta.chunks_exact(d)) {
                *o = norm_sq(th);
            }
        }
        out
    }
}

/// [`drive_generic`] for a finite-state model of dimension `D`, with Θ and
/// the per-state `(A, b)` held in fixed-size arrays. Zero entries of A are
/// multiplied rather than skipped, which changes nothing for finite Θ.
fn drive_fixed<const D: usize, R, F>(
    model: &MarkovNoiseModel,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    x0: Option<usize>,
    rng: &mut R,
    mut visit: F,
) -> Vec<f64>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &usize),
{
    let t = &model.tables;
    let a: Vec<[[f64; D]; D]> = t
        .a_flat
        .chunks_exact(D * D)
        .map(|block| std::array::from_fn(|r| std::array::from_fn(|c| block[r * D + c])))
        .collect();
    let b: Vec<[f64; D]> = t.b_flat.chunks_exact(D).map(|v| std::array::from_fn(|r| v[r])).collect();
    let mut theta: [f64; D] = theta0.try_into().expect("dimension checked");
    let mut state = model.initial_state(x0, rng);
    for k in 0..steps {
        visit(k, &theta, &state);
        let eps = schedule.at(k).expect("schedule covers horizon");
        let (ax, bx) = (&a[state], &b[state]);
        let mut g = [0.0; D];
        for r in 0..D {
            let mut acc = bx[r];
            for c in 0..D {
                acc += ax[r][c] * theta[c];
            }
            g[r] = acc;
        }
        for r in 0..D {
            theta[r] += eps * g[r];
        }
        if k + 1 < steps {
            state = t.sampler.sample(state, rng.next_u64());
        }
    }
    theta.to_vec()
}

#[derive(Debug, Clone, Copy)]
struct Padded<const WIDTH: usize> {
    row: usize,
    b: f64,
    cols: [usize; WIDTH],
    vals: [f64; WIDTH],
}

/// One row of some A(x) or b(x) that is not identically zero.
#[derive(Debug, Clone, Copy)]
struct ActiveRow {
    row: usize,
    b: f64,
    start: usize,
    end: usize,
}

/// Per state, the rows of A(x) or b(x) that are not identically zero;
/// state x owns `active[offsets[x]..offsets[x + 1]]`.
fn active_rows(model: &MarkovNoiseModel) -> (Vec<usize>, Vec<ActiveRow>) {
    let t = &model.tables;
    let sp = t.sparse.as_ref().expect("sparse tables");
    let d = model.dim();
    let mut offsets = vec![0];
    let mut active = Vec::new();
    for x in 0..t.n {
        for r in 0..d {
            let (start, end) = (sp.row_start[x * d + r], sp.row_start[x * d + r + 1]);
            let b = t.b_flat[x * d + r];
            if start < end || b != 0.0 {
                active.push(ActiveRow { row: r, b, start, end });
            }
        }
        offsets.push(active.len());
    }
    (offsets, active)
}

/// [`drive_generic`] over the sparse drift: rows where both A(x) and b(x)
/// vanish are left alone, the others are summed as in the sparse drift.
fn drive_sparse<R, F>(
    model: &MarkovNoiseModel,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    x0: Option<usize>,
    rng: &mut R,
    mut visit: F,
) -> Vec<f64>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &usize),
{
    let t = &model.tables;
    let sp = t.sparse.as_ref().expect("sparse tables");
    let d = theta0.len();
    let (offsets, active) = active_rows(model);
    let mut theta = theta0.to_vec();
    let mut g = vec![0.0; d];
    let mut state = model.initial_state(x0, rng);
    for k in 0..steps {
        visit(k, &theta, &state);
        let eps = schedule.at(k).expect("schedule covers horizon");
        let rows = &active[offsets[state]..offsets[state + 1]];
        for (gi, ar) in g.iter_mut().zip(rows) {
            let (cols, vals) = (&sp.cols[ar.start..ar.end], &sp.vals[ar.start..ar.end]);
            *gi = cols.iter().zip(vals).fold(ar.b, |acc, (&c, x)| acc + x * theta[c]);
        }
        for (gi, ar) in g.iter().zip(rows) {
            theta[ar.row] += eps * gi;
        }
        if k + 1 < steps {
            state = t.sampler.sample(state, rng.next_u64());
        }
    }
    theta
}

/// Θ_0..Θ_K together with the noise states X_0..X_{K−1} that produced them.
#[derive(Debug, Clone)]
pub struct Trajectory<S = usize> {
    pub theta: Vec<DVector<f64>>,
    pub noise_path: Vec<S>,
    pub schedule: StepSchedule,
}

impl<S> Trajectory<S> {
    pub fn steps(&self) -> usize {
        self.noise_path.len()
    }

    /// `ε_k`
    pub fn step_size(&self, k: usize) -> f64 {
        self.schedule.at(k).expect("schedule covers trajectory")
    }
}

impl Trajectory<usize> {
    /// Largest deviation of `Θ_{k+1} − Θ_k` from `ε_k (A(X_k)Θ_k + b(X_k))`,
    /// recomputed with dense model matrices.
    pub fn reconstruction_error(&self, model: &MarkovNoiseModel) -> f64 {
        (0..self.steps())
            .map(|k| {
                let x = self.noise_path[k];
                let th = &self.theta[k];
                let expected = (model.a_of(x) * th + model.b_of(x)) * self.step_size(k);
                (&self.theta[k + 1] - th - expected).amax()
            })
            .fold(0.0, f64::max)
    }
}

fn check_inputs<N: NoiseProcess>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    x0: Option<usize>,
) -> Result<(), LsaError> {
    if steps == 0 {
        return Err(LsaError::NoSteps);
    }
    if theta0.len() != noise.dim() {
        return Err(LsaError::DimensionMismatch {
            expected: noise.dim(),
            got: theta0.len(),
        });
    }
    schedule.check_covers(steps)?;
    noise.validate_initial(x0)
}

/// Runs the recursion for `steps` iterations, calling `visit(k, Θ_k, X_k)`
/// before each update, and returns Θ_K. Inputs are assumed validated.
pub(crate) fn drive<N, R, F>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    x0: Option<usize>,
    rng: &mut R,
    visit: F,
) -> Vec<f64>
where
    N: NoiseProcess,
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &N::State),
{
    noise.run_path(theta0, schedule, steps, x0, rng, visit)
}

/// The reference update loop: visit, drift, step, then advance the state.
pub fn drive_generic<N, R, F>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    x0: Option<usize>,
    rng: &mut R,
    mut visit: F,
) -> Vec<f64>
where
    N: NoiseProcess,
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &N::State),
{
    let d = theta0.len();
    let mut theta = theta0.to_vec();
    let mut drift = vec![0.0; d];
    let mut state = noise.initial_state(x0, rng);
    for k in 0..steps {
        visit(k, &theta, &state);
        let eps = schedule.at(k).expect("schedule covers horizon");
        noise.drift(&state, &theta, &mut drift);
        for (t, g) in theta.iter_mut().zip(&drift) {
            *t += eps * g;
        }
        if k + 1 < steps {
            noise.advance(&mut state, rng);
        }
    }
    theta
}

/// Fresh generator for a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Simulate one trajectory of length `steps`, deterministic in `seed`.
pub fn simulate<N: NoiseProcess>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    seed: u64,
    x0: Option<usize>,
) -> Result<Trajectory<N::State>, LsaError> {
    check_inputs(noise, theta0, schedule, steps, x0)?;
    let mut rng = rng_from_seed(seed);
    let mut theta = Vec::with_capacity(steps + 1);
    let mut noise_path = Vec::with_capacity(steps);
    let last = drive(noise, theta0, schedule, steps, x0, &mut rng, |_, th, x| {
        theta.push(DVector::from_column_slice(th));
        noise_path.push(x.clone());
    });
    theta.push(DVector::from_vec(last));
    Ok(Trajectory {
        theta,
        noise_path,
        schedule: schedule.clone(),
    })
}

/// Streaming variant of [`simulate`] for long horizons: `visit(k, Θ_k, X_k)`
/// for k < steps, returning Θ_K without storing the path.
pub fn simulate_with<N, F>(
    noise: &N,
    theta0: &[f64],
    schedule: &StepSchedule,
    steps: usize,
    seed: u64,
    x0: Option<usize>,
    visit: F,
) -> Result<Vec<f64>, LsaError>
where
    N: NoiseProcess,
    F: FnMut(usize, &[f64], &N::State),
{
    check_inputs(noise, theta0, schedule, steps, x0)?;
    let mut rng = rng_from_seed(seed);
    Ok(drive(noise, theta0, schedule, steps, x0, &mut rng, visit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::FiniteChain;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn single_state(a: f64, b: f64) -> MarkovNoiseModel {
        MarkovNoiseModel::scalar(FiniteChain::iid(&[1.0]).unwrap(), &[a], &[b]).unwrap()
    }

    #[test]
    fn fixed_kernel_matches_generic_bitwise() {
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.25, 0.25, 0.5]]).unwrap();
        let pi = chain.stationary_distribution().unwrap();
        for d in 1..=7 {
            // every other entry zero so the sparse drift is exercised for d ≥ 3
            let a: Vec<DMatrix<f64>> = (0..3)
                .map(|x| {
                    DMatrix::from_fn(d, d, |r, c| {
                        if (r + c + x) % 2 == 0 {
                            ((r * 3 + c * 5 + x * 7) % 11) as f64 / 11.0 - 0.6
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let raw: Vec<DVector<f64>> =
                (0..3).map(|x| DVector::from_fn(d, |r, _| ((r + 2 * x) % 5) as f64 - 2.0)).collect();
            let mean = raw.iter().zip(pi.iter()).fold(DVector::zeros(d), |acc, (v, p)| acc + v * *p);
            let b = raw.into_iter().map(|v| v - &mean).collect();
            let model = MarkovNoiseModel::new(chain.clone(), a, b).unwrap();
            let theta0: Vec<f64> = (0..d).map(|i| 1.0 - 0.3 * i as f64).collect();
            let schedule = StepSchedule::polynomial(0.2, 0.6, 500).unwrap();
            let mut seen_fast = Vec::new();
            let fast = model.run_path(&theta0, &schedule, 500, None, &mut rng_from_seed(9), |k, th, &x| {
                seen_fast.push((k, th.to_vec(), x))
            });
            let mut seen_slow = Vec::new();
            let slow = drive_generic(&model, &theta0, &schedule, 500, None, &mut rng_from_seed(9), |k, th, &x| {
                seen_slow.push((k, th.to_vec(), x))
            });
            assert_eq!(fast, slow, "d = {d}");
            assert_eq!(seen_fast, seen_slow, "d = {d}");
        }
    }

    #[test]
    fn sparse_kernel_skips_inactive_rows() {
        // A(x) and b(x) live on row x only, as with tabular features
        let n = 5;
        let chain = FiniteChain::from_rows(&vec![vec![0.2; n]; n]).unwrap();
        let a: Vec<DMatrix<f64>> = (0..n)
            .map(|x| DMatrix::from_fn(n, n, |r, c| if r != x { 0.0 } else if c == x { -0.9 } else { 0.1 * ((c + 1) % n) as f64 }))
            .collect();
        let raw: Vec<f64> = vec![0.3, -0.1, 0.05, 0.0, -0.25];
        let mean = raw.iter().sum::<f64>() / n as f64;
        let b: Vec<DVector<f64>> = (0..n).map(|x| DVector::from_fn(n, |r, _| if r == x { raw[x] - mean } else { 0.0 })).collect();
        let model = MarkovNoiseModel::new(chain, a, b).unwrap();
        assert!(model.tables.sparse.is_some());
        let theta0 = vec![0.4, -0.2, 0.1, 0.0, 0.7];
        let schedule = StepSchedule::constant(0.05).unwrap();
        let fast = model.run_path(&theta0, &schedule, 2000, Some(1), &mut rng_from_seed(4), |_, _, _| {});
        let slow = drive_generic(&model, &theta0, &schedule, 2000, Some(1), &mut rng_from_seed(4), |_, _, _| {});
        assert_eq!(fast, slow);
        let mut rngs = vec![rng_from_seed(4), rng_from_seed(8)];
        let batch = model.squared_norms(&theta0, &schedule, 2000, Some(1), &mut rngs, &[2000]);
        assert_eq!(batch[0], norm_sq(&slow));
    }

    /// Squared norms at `records` for one run of the reference loop.
    fn reference_norms(model: &MarkovNoiseModel, theta0: &[f64], schedule: &StepSchedule, steps: usize, seed: u64, records: &[usize]) -> Vec<f64> {
        let mut out = Vec::new();
        let last = drive_generic(model, theta0, schedule, steps, None, &mut rng_from_seed(seed), |k, th, _| {
            if records.contains(&k) {
                out.push(norm_sq(th));
            }
        });
        if records.contains(&steps) {
            out.push(norm_sq(&last));
        }
        out
    }

    #[test]
    fn lockstep_runs_match_single_runs() {
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.25, 0.25, 0.5]]).unwrap();
        let pi = chain.stationary_distribution().unwrap();
        // (dimension, nonzero pattern of A, b nonzero): dense, padded sparse, general sparse
        let patterns: Vec<(usize, fn(usize, usize, usize) -> bool, bool)> = vec![
            (2, |_, _, _| true, true),
            (7, |_, _, _| true, true),
            (4, |r, c, x| r == x && c <= x + 1, false),
            (5, |r, c, x| r <= x.min(1) && (c + x) % 2 == 0, false),
            (6, |r, c, x| r % 2 == x % 2 && c != r, true),
        ];
        for (d, keep, with_b) in patterns {
            let a: Vec<DMatrix<f64>> = (0..3)
                .map(|x| DMatrix::from_fn(d, d, |r, c| if keep(r, c, x) { ((r * 3 + c * 5 + x * 7) % 11) as f64 / 22.0 - 0.4 } else { 0.0 }))
                .collect();
            let raw: Vec<DVector<f64>> = (0..3)
                .map(|x| DVector::from_fn(d, |r, _| if with_b && r <= x { (r + x) as f64 - 1.5 } else { 0.0 }))
                .collect();
            let mean = raw.iter().zip(pi.iter()).fold(DVector::zeros(d), |acc, (v, p)| acc + v * *p);
            let b = raw.into_iter().map(|v| v - &mean).collect();
            let model = MarkovNoiseModel::new(chain.clone(), a, b).unwrap();
            let theta0: Vec<f64> = (0..d).map(|i| 0.5 - 0.2 * i as f64).collect();
            let schedule = StepSchedule::polynomial(0.1, 0.5, 300).unwrap();
            let records = [0, 1, 7, 150, 299, 300];
            let seeds = [3u64, 4, 5];
            let mut rngs: Vec<_> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
            let batch = model.squared_norms(&theta0, &schedule, 300, None, &mut rngs, &records);
            for (j, &seed) in seeds.iter().enumerate() {
                let single = reference_norms(&model, &theta0, &schedule, 300, seed, &records);
                let column: Vec<f64> = (0..records.len()).map(|r| batch[r * seeds.len() + j]).collect();
                assert_eq!(column, single, "d = {d}, run {j}");
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::constant(0.0).is_err());
        assert!(StepSchedule::constant(f64::NAN).is_err());
        assert_eq!(
            StepSchedule::sequence(vec![0.1, 0.2]).unwrap_err(),
            LsaError::NotNonIncreasing { index: 1 }
        );
        let poly = StepSchedule::polynomial(0.5, 1.0, 4).unwrap();
        assert_eq!(poly.at(3), Some(0.125));
        assert_eq!(poly.at(4), None);
    }

    #[test]
    fn zero_model_is_fixed_point() {
        let model = MarkovNoiseModel::new(
            FiniteChain::iid(&[0.5, 0.5]).unwrap(),
            vec![DMatrix::zeros(2, 2); 2],
            vec![DVector::zeros(2); 2],
        )
        .unwrap();
        let traj = simulate(&model, &[1.0, -2.0], &StepSchedule::constant(0.3).unwrap(), 50, 1, None)
            .unwrap();
        assert!(traj.theta.iter().all(|t| t.as_slice() == [1.0, -2.0]));
    }

    #[test]
    fn deterministic_decay() {
        let model = single_state(-1.0, 0.0);
        let traj = simulate(&model, &[3.0], &StepSchedule::constant(0.1).unwrap(), 60, 9, None).unwrap();
        for (k, th) in traj.theta.iter().enumerate() {
            assert_relative_eq!(th[0], 0.9f64.powi(k as i32) * 3.0, max_relative = 1e-13);
        }
        assert_eq!(traj.steps(), 60);
        assert_eq!(traj.theta.len(), 61);
    }

    #[test]
    fn same_seed_same_path() {
        let chain = FiniteChain::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let model = MarkovNoiseModel::scalar(chain, &[-0.5, -0.2], &[1.0, -2.0]).unwrap();
        let s = StepSchedule::constant(0.05).unwrap();
        let a = simulate(&model, &[0.0], &s, 200, 42, None).unwrap();
        let b = simulate(&model, &[0.0], &s, 200, 42, None).unwrap();
        let c = simulate(&model, &[0.0], &s, 200, 43, None).unwrap();
        assert_eq!(a.noise_path, b.noise_path);
        assert_eq!(a.theta, b.theta);
        assert_ne!(a.noise_path, c.noise_path);
        assert!(a.reconstruction_error(&model) <= 1e-15);
    }

    #[test]
    fn chain_frequencies_follow_stationary_law() {
        let chain = FiniteChain::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let model = MarkovNoiseModel::scalar(chain, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let traj = simulate(&model, &[0.0], &StepSchedule::constant(0.1).unwrap(), 200_000, 5, Some(1))
            .unwrap();
        assert_eq!(traj.noise_path[0], 1);
        let ones = traj.noise_path.iter().filter(|&&x| x == 0).count() as f64 / 200_000.0;
        assert!((ones - 2.0 / 3.0).abs() < 0.01, "{ones}");
    }

    #[test]
    fn input_errors() {
        let model = single_state(-1.0, 0.0);
        let s = StepSchedule::constant(0.1).unwrap();
        assert_eq!(simulate(&model, &[1.0], &s, 0, 0, None).unwrap_err(), LsaError::NoSteps);
        assert!(matches!(
            simulate(&model, &[1.0, 2.0], &s, 3, 0, None).unwrap_err(),
            LsaError::DimensionMismatch { .. }
        ));
        assert!(matches!(
            simulate(&model, &[1.0], &s, 3, 0, Some(4)).unwrap_err(),
            LsaError::InvalidInitialState { .. }
        ));
        let short = StepSchedule::sequence(vec![0.1, 0.1]).unwrap();
        assert!(matches!(
            simulate(&model, &[1.0], &short, 3, 0, None).unwrap_err(),
            LsaError::ScheduleTooShort { .. }
        ));
    }
}
