//! One runner per experiment kind. Each returns a table plus scalar summary.

use std::path::Path;

use lsa_core::bounds::{compute_constants, mean_square_bound, steady_state_term};
use lsa_core::counterexample::{
    divergence_threshold_for, exact_moment_recursion, monte_carlo_cross_check, stationary_moments,
    TwoPointScalarModel, MAX_ORDER,
};
use lsa_core::markov::DEFAULT_K_CAP;
use lsa_core::td::TdNoise;
use lsa_core::{
    compile_td0, compile_tdlambda, run_ensemble, solve_lyapunov, CompiledTd, EnsembleConfig, EnsembleMoments,
    LyapunovCertificate, MarkovNoiseModel, StepSchedule,
};
use lsa_core::lsa::simulate_with;
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use crate::config::{Experiment, ModelSpec, TdSpec};
use crate::error::CliError;
use crate::table::{Cell, Table};

/// Margin, in standard errors, added to the empirical mean before comparing
/// with the bound.
pub const DOMINATION_SE: f64 = 3.0;

/// Slack on `A_max ≤ 1` for models that are normalized in floating point.
const A_MAX_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub table: Table,
    pub summary: Map<String, Value>,
}

/// The recursion to drive: a plain Markov model or a compiled TD problem.
enum Driver {
    Markov(MarkovNoiseModel),
    Td(Box<CompiledTd>),
}

fn compile(spec: &TdSpec, base: &Path) -> Result<CompiledTd, CliError> {
    let p = spec.resolve(base)?;
    Ok(if p.lambda == 0.0 {
        compile_td0(&p)?
    } else {
        compile_tdlambda(&p)?
    })
}

fn driver(model: &Option<ModelSpec>, td: &Option<TdSpec>, base: &Path) -> Result<Driver, CliError> {
    match (model, td) {
        (Some(m), None) => Ok(Driver::Markov(m.resolve(base)?)),
        (None, Some(t)) => Ok(Driver::Td(Box::new(compile(t, base)?))),
        _ => Err(CliError::config("exactly one of `model` and `td` is required")),
    }
}

impl Driver {
    fn dim(&self) -> usize {
        match self {
            Driver::Markov(m) => m.dim(),
            Driver::Td(c) => c.theta_star.len(),
        }
    }

    fn a_max(&self) -> f64 {
        match self {
            Driver::Markov(m) => m.a_max(),
            Driver::Td(c) => c.a_max(),
        }
    }

    fn b_max(&self) -> f64 {
        match self {
            Driver::Markov(m) => m.b_max(),
            Driver::Td(c) => c.b_max(),
        }
    }

    fn certificate(&self) -> Result<LyapunovCertificate, CliError> {
        match self {
            Driver::Markov(m) => Ok(solve_lyapunov(&m.a_bar())?),
            Driver::Td(c) => Ok(c.certificate.clone()),
        }
    }

    fn mixing_time(&self, delta: f64, k_cap: Option<usize>) -> Result<usize, CliError> {
        match self {
            Driver::Markov(m) => Ok(m.mixing_time_capped(delta, k_cap.unwrap_or(DEFAULT_K_CAP))?),
            Driver::Td(c) => Ok(c.mixing_time(delta)?),
        }
    }

    /// Initial iterate; TD runs in centered coordinates, so the default there
    /// is the image `−θ*` of the origin.
    fn theta0(&self, given: &Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
        let d = self.dim();
        let theta0 = match (given, self) {
            (Some(v), _) => v.clone(),
            (None, Driver::Markov(_)) => vec![0.0; d],
            (None, Driver::Td(c)) => c.theta_star.iter().map(|x| -x).collect(),
        };
        if theta0.len() != d {
            return Err(CliError::config(format!("theta0 has length {}, dimension is {d}", theta0.len())));
        }
        Ok(theta0)
    }

    fn ensemble(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        config: &EnsembleConfig,
    ) -> Result<EnsembleMoments, CliError> {
        Ok(match self {
            Driver::Markov(m) => run_ensemble(m, theta0, schedule, steps, config)?,
            Driver::Td(c) => match &c.noise {
                TdNoise::Pair(m) => run_ensemble(m, theta0, schedule, steps, config)?,
                TdNoise::Trace(t) => run_ensemble(t, theta0, schedule, steps, config)?,
            },
        })
    }

    /// Streams one trajectory as `(k, chain state, Θ_k)` and returns Θ_K.
    fn trajectory<F: FnMut(usize, usize, &[f64])>(
        &self,
        theta0: &[f64],
        schedule: &StepSchedule,
        steps: usize,
        seed: u64,
        x0: Option<usize>,
        mut visit: F,
    ) -> Result<Vec<f64>, CliError> {
        Ok(match self {
            Driver::Markov(m) => simulate_with(m, theta0, schedule, steps, seed, x0, |k, th, &x| visit(k, x, th))?,
            Driver::Td(c) => match &c.noise {
                TdNoise::Pair(m) => {
                    simulate_with(m, theta0, schedule, steps, seed, x0, |k, th, &x| visit(k, c.pairs[x].0, th))?
                }
                TdNoise::Trace(t) => simulate_with(t, theta0, schedule, steps, seed, x0, |k, th, s| visit(k, s.z, th))?,
            },
        })
    }
}

fn matrix_rows(table: &mut Table, name: &str, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            table.push(vec![name.into(), i.into(), j.into(), m[(i, j)].into()]);
        }
    }
}

fn scalar_row(table: &mut Table, name: &str, value: Cell) {
    table.push(vec![name.into(), Cell::Empty, Cell::Empty, value]);
}

fn quantity_table() -> Table {
    Table::new(&["quantity", "row", "col", "value"])
}

fn require_sources_ok(a_max: f64) -> Result<(), CliError> {
    if a_max > 1.0 + A_MAX_SLACK {
        return Err(CliError::model(format!("sup ||A(x)|| = {a_max} exceeds 1")));
    }
    Ok(())
}

fn record_grid(
    record_steps: &Option<Vec<usize>>,
    record_every: Option<usize>,
    start: usize,
    steps: usize,
) -> Result<Vec<usize>, CliError> {
    match (record_steps, record_every) {
        (Some(_), Some(_)) => Err(CliError::config("give at most one of record_steps and record_every")),
        (Some(ks), None) => {
            if ks.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::config("record_steps must be strictly increasing"));
            }
            Ok(ks.clone())
        }
        (None, every) => {
            let every = every.unwrap_or_else(|| (steps / 100).max(1));
            if every == 0 {
                return Err(CliError::config("record_every must be at least 1"));
            }
            Ok((start..=steps).step_by(every).collect())
        }
    }
}

fn lyapunov(a_bar: &DMatrix<f64>) -> Result<Outcome, CliError> {
    let cert = solve_lyapunov(a_bar)?;
    let mut table = quantity_table();
    matrix_rows(&mut table, "p", &cert.p);
    scalar_row(&mut table, "gamma_min", cert.gamma_min.into());
    scalar_row(&mut table, "gamma_max", cert.gamma_max.into());
    scalar_row(&mut table, "residual", cert.residual.into());
    scalar_row(&mut table, "hurwitz", cert.hurwitz.into());
    let mut summary = Map::new();
    summary.insert("hurwitz".into(), json!(cert.hurwitz));
    summary.insert("dimension".into(), json!(a_bar.nrows()));
    Ok(Outcome { table, summary })
}

fn mixing(d: &Driver, deltas: &[f64], k_cap: Option<usize>) -> Result<Outcome, CliError> {
    if deltas.is_empty() {
        return Err(CliError::config("deltas is empty"));
    }
    let mut table = Table::new(&["delta", "tau"]);
    for &delta in deltas {
        let tau = d.mixing_time(delta, k_cap)?;
        table.push(vec![delta.into(), tau.into()]);
    }
    let mut summary = Map::new();
    summary.insert("a_max".into(), json!(d.a_max()));
    summary.insert("b_max".into(), json!(d.b_max()));
    if let Driver::Markov(m) = d {
        summary.insert("stationary".into(), json!(m.stationary().as_slice()));
    }
    Ok(Outcome { table, summary })
}

fn simulate(
    d: &Driver,
    schedule: &StepSchedule,
    steps: usize,
    theta0: &[f64],
    seed: u64,
    x0: Option<usize>,
) -> Result<Outcome, CliError> {
    let dim = d.dim();
    let mut columns: Vec<String> = vec!["k".into(), "state".into(), "step_size".into()];
    columns.extend((0..dim).map(|i| format!("theta_{i}")));
    columns.push("norm".into());
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut table = Table::new(&names);
    let row = |k: usize, state: Cell, step: Cell, theta: &[f64]| {
        let mut r = vec![k.into(), state, step];
        r.extend(theta.iter().map(|&t| Cell::Real(t)));
        r.push(theta.iter().map(|t| t * t).sum::<f64>().sqrt().into());
        r
    };
    let last = d.trajectory(theta0, schedule, steps, seed, x0, |k, x, th| {
        table.push(row(k, x.into(), schedule.at(k).into(), th));
    })?;
    table.push(row(steps, Cell::Empty, Cell::Empty, &last));
    let mut summary = Map::new();
    summary.insert("final_norm".into(), json!(last.iter().map(|t| t * t).sum::<f64>().sqrt()));
    Ok(Outcome { table, summary })
}

#[allow(clippy::too_many_arguments)]
fn bound_check(
    d: &Driver,
    epsilon: f64,
    delta: Option<f64>,
    steps: usize,
    n_runs: usize,
    record_every: Option<usize>,
    theta0: &[f64],
    x0: Option<usize>,
    seed: u64,
) -> Result<Outcome, CliError> {
    let a_max = d.a_max();
    require_sources_ok(a_max)?;
    let cert = d.certificate()?;
    if !cert.hurwitz {
        return Err(CliError::model("mean matrix is not Hurwitz"));
    }
    let tau = d.mixing_time(delta.unwrap_or(epsilon), None)?;
    let b_max = d.b_max();
    let c = compute_constants(b_max, cert.gamma_min, cert.gamma_max, tau, epsilon)?.with_a_max(a_max);
    let theta0_norm = theta0.iter().map(|t| t * t).sum::<f64>().sqrt();
    // fails early, before any simulation, when the step is outside the valid region
    mean_square_bound(&c, theta0_norm, tau)?;
    if steps < tau {
        return Err(CliError::config(format!("steps = {steps} is below tau = {tau}")));
    }
    let record_steps: Vec<usize> = (tau..=steps).step_by(record_every.unwrap_or(tau).max(1)).collect();
    let schedule = StepSchedule::constant(epsilon)?;
    let moments = d.ensemble(
        theta0,
        &schedule,
        steps,
        &EnsembleConfig {
            n_runs,
            orders: vec![1],
            record_steps: record_steps.clone(),
            base_seed: seed,
            x0,
        },
    )?;
    let mut table = Table::new(&["k", "empirical_msq", "std_err", "theorem1_bound", "dominated"]);
    let mut all = true;
    let mut worst = 0.0_f64;
    for (r, &k) in record_steps.iter().enumerate() {
        let est = moments.estimates[r][0];
        let se = moments.std_errors[r][0];
        let bound = mean_square_bound(&c, theta0_norm, k)?;
        let upper = est + DOMINATION_SE * se;
        let dominated = upper <= bound;
        all &= dominated;
        worst = worst.max(upper / bound);
        table.push(vec![k.into(), est.into(), se.into(), bound.into(), dominated.into()]);
    }
    let mut summary = Map::new();
    summary.insert("all_dominated".into(), json!(all));
    summary.insert("worst_ratio".into(), json!(worst));
    summary.insert("tau".into(), json!(tau));
    summary.insert("epsilon".into(), json!(epsilon));
    summary.insert("a_max".into(), json!(a_max));
    summary.insert("b_max".into(), json!(b_max));
    summary.insert("gamma_min".into(), json!(cert.gamma_min));
    summary.insert("gamma_max".into(), json!(cert.gamma_max));
    summary.insert("kappa1".into(), json!(c.kappa1));
    summary.insert("kappa2".into(), json!(c.kappa2));
    summary.insert("kappa2_tilde".into(), json!(c.kappa2_tilde));
    summary.insert("steady_state_term".into(), json!(steady_state_term(&c)));
    summary.insert("n_runs".into(), json!(n_runs));
    Ok(Outcome { table, summary })
}

fn td(c: &CompiledTd, delta: Option<f64>) -> Result<Outcome, CliError> {
    let mut table = quantity_table();
    matrix_rows(&mut table, "a_tilde", &c.a_tilde);
    matrix_rows(&mut table, "b_tilde", &DMatrix::from_column_slice(c.b_tilde.len(), 1, c.b_tilde.as_slice()));
    matrix_rows(
        &mut table,
        "theta_star",
        &DMatrix::from_column_slice(c.theta_star.len(), 1, c.theta_star.as_slice()),
    );
    matrix_rows(&mut table, "p", &c.certificate.p);
    scalar_row(&mut table, "normalization_scale", c.normalization_scale.into());
    scalar_row(&mut table, "gamma_min", c.certificate.gamma_min.into());
    scalar_row(&mut table, "gamma_max", c.certificate.gamma_max.into());
    scalar_row(&mut table, "a_max", c.a_max().into());
    scalar_row(&mut table, "b_max", c.b_max().into());
    scalar_row(&mut table, "hurwitz", c.certificate.hurwitz.into());
    let mut summary = Map::new();
    if let Some(delta) = delta {
        let tau = c.mixing_time(delta)?;
        scalar_row(&mut table, "tau", tau.into());
        summary.insert("tau".into(), json!(tau));
    }
    summary.insert("dimension".into(), json!(c.theta_star.len()));
    summary.insert("lambda".into(), json!(c.problem.lambda));
    Ok(Outcome { table, summary })
}

fn counterexample(
    epsilon: f64,
    max_order: usize,
    steps: usize,
    theta0: f64,
    cross: Option<&crate::config::CrossCheckSpec>,
    seed: u64,
) -> Result<Outcome, CliError> {
    if max_order < 2 || max_order % 2 == 1 || max_order > MAX_ORDER {
        return Err(CliError::config(format!("max_order must be even and in [2, {MAX_ORDER}]")));
    }
    let model = TwoPointScalarModel::standard(epsilon)?;
    let threshold = divergence_threshold_for(&model)?;
    let exact = exact_moment_recursion(&model, max_order, steps, theta0)?;
    let mut table = Table::new(&[
        "order",
        "leading_coefficient",
        "moment_final",
        "fixed_point",
        "diverged",
        "divergence_threshold",
    ]);
    for m in (2..=max_order).step_by(2) {
        let fixed = stationary_moments(&model, m)?.map(|v| v[m]);
        table.push(vec![
            m.into(),
            model.leading_coefficient(m).into(),
            exact.moment(steps, m).into(),
            fixed.into(),
            (m >= threshold).into(),
            threshold.into(),
        ]);
    }
    let mut summary = Map::new();
    summary.insert("divergence_threshold".into(), json!(threshold));
    if let Some(spec) = cross {
        let check = monte_carlo_cross_check(&model, spec.order, spec.steps, spec.n_runs, seed, theta0)?;
        summary.insert(
            "cross_check".into(),
            json!({
                "order": check.order,
                "steps": check.steps,
                "exact": check.exact,
                "empirical": check.empirical,
                "std_error": check.std_error,
                "z_score": check.z_score(),
                "n_runs": check.n_runs,
            }),
        );
    }
    Ok(Outcome { table, summary })
}

fn moments(
    d: &Driver,
    schedule: &StepSchedule,
    steps: usize,
    theta0: &[f64],
    config: &EnsembleConfig,
) -> Result<Outcome, CliError> {
    let m = d.ensemble(theta0, schedule, steps, config)?;
    let mut table = Table::new(&["k", "order", "estimate", "std_err", "overflowed"]);
    for (r, &k) in m.record_steps.iter().enumerate() {
        for (j, &n) in m.orders.iter().enumerate() {
            table.push(vec![
                k.into(),
                (n as usize).into(),
                m.estimates[r][j].into(),
                m.std_errors[r][j].into(),
                m.overflowed[r][j].into(),
            ]);
        }
    }
    let mut summary = Map::new();
    summary.insert("n_runs".into(), json!(m.n_runs));
    summary.insert("a_max".into(), json!(d.a_max()));
    summary.insert("b_max".into(), json!(d.b_max()));
    Ok(Outcome { table, summary })
}

/// Runs the experiment on the current rayon pool.
pub fn run_experiment(experiment: &Experiment, base: &Path, seed: u64) -> Result<Outcome, CliError> {
    match experiment {
        Experiment::Lyapunov { a_bar } => lyapunov(&a_bar.resolve(base)?),
        Experiment::Mixing { model, td, deltas, k_cap } => mixing(&driver(model, td, base)?, deltas, *k_cap),
        Experiment::Simulate {
            model,
            td,
            schedule,
            steps,
            theta0,
            x0,
        } => {
            let d = driver(model, td, base)?;
            let schedule = schedule.resolve(base, *steps)?;
            simulate(&d, &schedule, *steps, &d.theta0(theta0)?, seed, *x0)
        }
        Experiment::BoundCheck {
            model,
            td,
            epsilon,
            delta,
            steps,
            n_runs,
            record_every,
            theta0,
            x0,
        } => {
            let d = driver(model, td, base)?;
            let theta0 = d.theta0(theta0)?;
            bound_check(&d, *epsilon, *delta, *steps, *n_runs, *record_every, &theta0, *x0, seed)
        }
        Experiment::Td0 { problem, delta } => {
            let p = problem.resolve(base)?;
            td(&compile_td0(&p)?, *delta)
        }
        Experiment::Tdlambda { problem, delta } => {
            let p = problem.resolve(base)?;
            td(&compile_tdlambda(&p)?, *delta)
        }
        Experiment::Counterexample {
            epsilon,
            max_order,
            steps,
            theta0,
            cross_check,
        } => counterexample(
            *epsilon,
            max_order.unwrap_or(10),
            steps.unwrap_or(1000),
            theta0.unwrap_or(0.0),
            cross_check.as_ref(),
            seed,
        ),
        Experiment::Moments {
            model,
            td,
            schedule,
            steps,
            n_runs,
            orders,
            record_steps,
            record_every,
            theta0,
            x0,
        } => {
            let d = driver(model, td, base)?;
            let schedule = schedule.resolve(base, *steps)?;
            let theta0 = d.theta0(theta0)?;
            let config = EnsembleConfig {
                n_runs: *n_runs,
                orders: orders.clone(),
                record_steps: record_grid(record_steps, *record_every, 0, *steps)?,
                base_seed: seed,
                x0: *x0,
            };
            moments(&d, &schedule, *steps, &theta0, &config)
        }
    }
}
