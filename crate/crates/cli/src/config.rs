//! Experiment documents: one JSON object with a `kind` discriminator.

use std::path::{Path, PathBuf};

use lsa_core::td::TdProblem;
use lsa_core::{FiniteChain, MarkovNoiseModel, StepSchedule};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Seed used when neither the config nor `--seed` supplies one.
pub const DEFAULT_SEED: u64 = 0x5EED_0000_2024_0001;

/// A matrix given inline as rows, or as `{"file": path}` naming a JSON file
/// that holds the rows. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSource {
    Inline(Vec<Vec<f64>>),
    File { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSource {
    Inline(Vec<f64>),
    File { file: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(base: &Path, file: &Path) -> Result<T, CliError> {
    let path = base.join(file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl MatrixSource {
    pub fn rows(&self, base: &Path) -> Result<Vec<Vec<f64>>, CliError> {
        match self {
            MatrixSource::Inline(rows) => Ok(rows.clone()),
            MatrixSource::File { file } => read_json(base, file),
        }
    }

    pub fn resolve(&self, base: &Path) -> Result<DMatrix<f64>, CliError> {
        let rows = self.rows(base)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(CliError::config("matrix is empty"));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(CliError::config("matrix rows have different lengths"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

impl VectorSource {
    pub fn values(&self, base: &Path) -> Result<Vec<f64>, CliError> {
        match self {
            VectorSource::Inline(v) => Ok(v.clone()),
            VectorSource::File { file } => read_json(base, file),
        }
    }

    pub fn resolve(&self, base: &Path) -> Result<DVector<f64>, CliError> {
        Ok(DVector::from_vec(self.values(base)?))
    }
}

/// Markov noise model: chain plus one `(A(x), b(x))` per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub transition: MatrixSource,
    pub a: Vec<MatrixSource>,
    pub b: Vec<VectorSource>,
}

impl ModelSpec {
    pub fn resolve(&self, base: &Path) -> Result<MarkovNoiseModel, CliError> {
        let chain = FiniteChain::from_rows(&self.transition.rows(base)?)?;
        let a = self.a.iter().map(|m| m.resolve(base)).collect::<Result<Vec<_>, _>>()?;
        let b = self.b.iter().map(|v| v.resolve(base)).collect::<Result<Vec<_>, _>>()?;
        Ok(MarkovNoiseModel::new(chain, a, b)?)
    }
}

/// Policy-evaluation problem; `lambda = 0` selects TD(0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdSpec {
    pub transition: MatrixSource,
    pub rewards: VectorSource,
    pub discount: f64,
    /// N×d, row i is the feature vector of state i.
    pub features: MatrixSource,
    #[serde(default)]
    pub lambda: f64,
}

impl TdSpec {
    pub fn resolve(&self, base: &Path) -> Result<TdProblem, CliError> {
        let chain = FiniteChain::from_rows(&self.transition.rows(base)?)?;
        Ok(TdProblem::new(
            chain,
            self.rewards.resolve(base)?,
            self.discount,
            self.features.resolve(base)?,
            self.lambda,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { epsilon: f64 },
    /// `ε_j = eps0 / (j+1)^power`
    Polynomial { eps0: f64, power: f64 },
    Sequence { epsilons: VectorSource },
}

impl ScheduleSpec {
    pub fn resolve(&self, base: &Path, steps: usize) -> Result<StepSchedule, CliError> {
        Ok(match self {
            ScheduleSpec::Constant { epsilon } => StepSchedule::constant(*epsilon)?,
            ScheduleSpec::Polynomial { eps0, power } => StepSchedule::polynomial(*eps0, *power, steps)?,
            ScheduleSpec::Sequence { epsilons } => StepSchedule::sequence(epsilons.values(base)?)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossCheckSpec {
    pub order: usize,
    pub steps: usize,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Lyapunov {
        a_bar: MatrixSource,
    },
    Mixing {
        model: Option<ModelSpec>,
        td: Option<TdSpec>,
        deltas: Vec<f64>,
        k_cap: Option<usize>,
    },
    Simulate {
        model: Option<ModelSpec>,
        td: Option<TdSpec>,
        schedule: ScheduleSpec,
        steps: usize,
        theta0: Option<Vec<f64>>,
        x0: Option<usize>,
    },
    BoundCheck {
        model: Option<ModelSpec>,
        td: Option<TdSpec>,
        epsilon: f64,
        /// Mixing accuracy; defaults to `epsilon`.
        delta: Option<f64>,
        steps: usize,
        n_runs: usize,
        /// Spacing of recorded k; defaults to τ.
        record_every: Option<usize>,
        theta0: Option<Vec<f64>>,
        x0: Option<usize>,
    },
    Td0 {
        problem: TdSpec,
        delta: Option<f64>,
    },
    Tdlambda {
        problem: TdSpec,
        delta: Option<f64>,
    },
    Counterexample {
        epsilon: f64,
        max_order: Option<usize>,
        steps: Option<usize>,
        theta0: Option<f64>,
        cross_check: Option<CrossCheckSpec>,
    },
    Moments {
        model: Option<ModelSpec>,
        td: Option<TdSpec>,
        schedule: ScheduleSpec,
        steps: usize,
        n_runs: usize,
        orders: Vec<u32>,
        record_steps: Option<Vec<usize>>,
        record_every: Option<usize>,
        theta0: Option<Vec<f64>>,
        x0: Option<usize>,
    },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Lyapunov { .. } => "lyapunov",
            Experiment::Mixing { .. } => "mixing",
            Experiment::Simulate { .. } => "simulate",
            Experiment::BoundCheck { .. } => "bound-check",
            Experiment::Td0 { .. } => "td0",
            Experiment::Tdlambda { .. } => "tdlambda",
            Experiment::Counterexample { .. } => "counterexample",
            Experiment::Moments { .. } => "moments",
        }
    }
}

/// A parsed document. `seed` and `output` sit beside `kind` at top level.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Directory that relative file references resolve against.
    pub base_dir: PathBuf,
    /// The document as given, echoed into the manifest.
    pub raw: Value,
}

impl ExperimentConfig {
    pub fn from_value(raw: Value, base_dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let mut object = match raw.clone() {
            Value::Object(map) => map,
            _ => return Err(CliError::config("config must be a JSON object")),
        };
        let seed = match object.remove("seed") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_u64()
                    .ok_or_else(|| CliError::config("seed must be an unsigned 64-bit integer"))?,
            ),
        };
        let output = match object.remove("output") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(CliError::config("output must be a string")),
        };
        let experiment: Experiment =
            serde_json::from_value(Value::Object(object)).map_err(|e| CliError::config(e.to_string()))?;
        Ok(Self {
            experiment,
            seed,
            output,
            base_dir: base_dir.into(),
            raw,
        })
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        Self::from_value(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }
}
