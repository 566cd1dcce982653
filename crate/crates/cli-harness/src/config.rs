//! JSON run configuration: schema, per-example defaults, validation, and
//! the canonical (fully resolved) form.
//!
//! `load_config` parses and rejects unknown keys; `RunConfig::resolve` fills
//! defaults from the example bundle, validates every field with its key
//! path in the error message, and returns both the resolved run and the
//! canonical config, so `serialize(load(x))` is a fixed point.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::toy::toy_bundle;
use crate::CliError;
use bilevel::BiLevelConfig;
use examples::{mnar_default_bundle, sens_bundle, shift_bundle, Comparator, ExampleBundle};

/// Regularization weight used for the sensitivity example when the config
/// does not name one.
pub const DEFAULT_SENS_LAMBDA: f64 = 1e-3;

/// Which worked example a run targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExampleId {
    Mnar,
    Sensitivity,
    Shift,
    /// Closed-form fixture; only meaningful for `estimate` and `solve`.
    Analytic(String),
    Toy,
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExampleId::Mnar => f.write_str("mnar"),
            ExampleId::Sensitivity => f.write_str("sensitivity"),
            ExampleId::Shift => f.write_str("shift"),
            ExampleId::Analytic(id) => write!(f, "analytic:{id}"),
            ExampleId::Toy => f.write_str("toy"),
        }
    }
}

impl FromStr for ExampleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnar" => Ok(ExampleId::Mnar),
            "sensitivity" => Ok(ExampleId::Sensitivity),
            "shift" => Ok(ExampleId::Shift),
            "toy" => Ok(ExampleId::Toy),
            other => {
                if let Some(id) = other.strip_prefix("analytic:") {
                    let known = examples::analytic_problems();
                    if known.iter().any(|a| a.id == id) {
                        Ok(ExampleId::Analytic(id.to_string()))
                    } else {
                        let ids: Vec<&str> = known.iter().map(|a| a.id).collect();
                        Err(format!(
                            "example: unknown analytic fixture {id:?}; available: {}",
                            ids.join(", ")
                        ))
                    }
                } else {
                    Err(format!(
                        "example: unknown value {other:?}; expected one of mnar, \
                         sensitivity, shift, toy, analytic:<id>"
                    ))
                }
            }
        }
    }
}

impl Serialize for ExampleId {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExampleId {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        String::deserialize(de)?.parse().map_err(D::Error::custom)
    }
}

/// Solver selection as written in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverSpec {
    Neural {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<usize>,
    },
    Polynomial { degree: usize },
}

/// Stopping tolerance: a single number applies to both the beta and the
/// solution-weight step norms; the object form sets them separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tol {
    Both(f64),
    Split { beta: f64, omega: f64 },
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One run request. Every field except `example` is optional; omitted
/// fields take the target example's tuned defaults. Unknown keys are
/// rejected at parse time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub example: ExampleId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<Tol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    /// Tikhonov weight; only valid for the sensitivity example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Reference estimators to run per replication, as solver labels
    /// ("poly:<degree>", "oracle", "biased").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparators: Option<Vec<String>>,
    /// Default output path; the --out flag overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Record wall-clock milliseconds in simulation rows. Off by default
    /// because timing is the one column that breaks byte-reproducibility.
    #[serde(default, skip_serializing_if = "is_false")]
    pub timing: bool,
}

impl RunConfig {
    /// All-defaults request for the given example.
    pub fn bare(example: ExampleId) -> RunConfig {
        RunConfig {
            example,
            n: None,
            reps: None,
            base_seed: None,
            solver: None,
            gamma: None,
            max_iter: None,
            tol: None,
            j1: None,
            j2: None,
            lr_beta: None,
            lr_omega: None,
            fd_step: None,
            lambda: None,
            batch: None,
            comparators: None,
            out: None,
            timing: false,
        }
    }
}

/// Fully resolved solver choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Neural { width: usize, depth: usize },
    Poly { degree: usize },
}

impl SolverKind {
    pub fn label(&self) -> String {
        match self {
            SolverKind::Neural { .. } => "neural".into(),
            SolverKind::Poly { degree } => format!("poly:{degree}"),
        }
    }

    fn spec(&self) -> SolverSpec {
        match *self {
            SolverKind::Neural { width, depth } => SolverSpec::Neural {
                width: Some(width),
                depth: Some(depth),
            },
            SolverKind::Poly { degree } => SolverSpec::Polynomial { degree },
        }
    }
}

/// A validated simulation run with every knob resolved.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    /// Canonical config: re-serializing and re-resolving it is a no-op.
    pub config: RunConfig,
    pub example: ExampleId,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub solver: SolverKind,
    pub comparators: Vec<Comparator>,
    /// Seed field is a placeholder; the sweep reseeds per replication.
    pub bilevel: BiLevelConfig,
    pub lambda: Option<f64>,
    pub out: Option<PathBuf>,
    pub timing: bool,
    /// Dimension of the target parameter.
    pub q: usize,
    pub beta_star: Vec<f64>,
}

/// A validated analytic-fixture solve.
#[derive(Clone, Debug)]
pub struct ResolvedAnalytic {
    pub config: RunConfig,
    pub id: String,
    pub solver: SolverKind,
    pub j1: usize,
    pub j2: usize,
    /// Training steps for the neural path; ignored by the polynomial one.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub enum Resolved {
    Sim(Box<ResolvedRun>),
    Analytic(ResolvedAnalytic),
}

impl Resolved {
    pub fn canonical_config(&self) -> &RunConfig {
        match self {
            Resolved::Sim(r) => &r.config,
            Resolved::Analytic(a) => &a.config,
        }
    }

    /// Unwraps a simulation run; analytic fixtures have no estimand.
    pub fn into_sim(self, command: &str) -> Result<ResolvedRun, CliError> {
        match self {
            Resolved::Sim(r) => Ok(*r),
            Resolved::Analytic(a) => Err(CliError::Config(format!(
                "example: analytic:{} has no estimand; `{command}` needs a statistical \
                 example (use `solve` for fixtures)",
                a.id
            ))),
        }
    }
}

struct SimDefaults {
    n: usize,
    reps: usize,
}

fn sim_defaults(example: &ExampleId) -> SimDefaults {
    match example {
        ExampleId::Mnar => SimDefaults { n: 500, reps: 20 },
        ExampleId::Sensitivity => SimDefaults { n: 1000, reps: 10 },
        ExampleId::Shift => SimDefaults { n: 10_000, reps: 20 },
        ExampleId::Toy => SimDefaults { n: 200, reps: 5 },
        ExampleId::Analytic(_) => SimDefaults { n: 1, reps: 1 },
    }
}

/// Constructs the example bundle a resolved run refers to. Cheap; workers
/// call it once per thread because problem closures are not clonable across
/// examples in any other way.
pub fn build_bundle(example: &ExampleId, lambda: Option<f64>) -> Result<ExampleBundle, CliError> {
    match example {
        ExampleId::Mnar => Ok(mnar_default_bundle()),
        ExampleId::Sensitivity => {
            sens_bundle(|_u, _x| 1.0, lambda.unwrap_or(DEFAULT_SENS_LAMBDA))
                .map_err(|e| CliError::Config(format!("lambda: {e}")))
        }
        ExampleId::Shift => Ok(shift_bundle()),
        ExampleId::Toy => Ok(toy_bundle()),
        ExampleId::Analytic(id) => Err(CliError::Config(format!(
            "example: analytic:{id} is not a simulation example"
        ))),
    }
}

fn parse_comparator(s: &str) -> Result<Comparator, String> {
    match s {
        "oracle" => Ok(Comparator::Oracle),
        "biased" => Ok(Comparator::Biased),
        other => {
            if let Some(d) = other.strip_prefix("poly:") {
                d.parse::<usize>()
                    .map(Comparator::Polynomial)
                    .map_err(|_| format!("invalid polynomial degree {d:?}"))
            } else {
                Err(format!(
                    "unknown comparator {other:?}; expected \"poly:<degree>\", \
                     \"oracle\", or \"biased\""
                ))
            }
        }
    }
}

fn require_positive(value: f64, field: &str) -> Result<(), CliError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{field}: must be a positive finite number, got {value}"
        )))
    }
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        match &self.example {
            ExampleId::Analytic(id) => self.resolve_analytic(id.clone()),
            _ => self.resolve_sim(),
        }
    }

    fn resolve_sim(&self) -> Result<Resolved, CliError> {
        if self.lambda.is_some() && self.example != ExampleId::Sensitivity {
            return Err(CliError::Config(format!(
                "lambda: only valid for example \"sensitivity\", not \"{}\"",
                self.example
            )));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(CliError::Config(format!(
                    "lambda: must be a finite number >= 0, got {l}"
                )));
            }
        }
        let lambda = match self.example {
            ExampleId::Sensitivity => Some(self.lambda.unwrap_or(DEFAULT_SENS_LAMBDA)),
            _ => None,
        };
        let bundle = build_bundle(&self.example, lambda)?;

        let d = sim_defaults(&self.example);
        let n = self.n.unwrap_or(d.n);
        let reps = self.reps.unwrap_or(d.reps);
        if n == 0 {
            return Err(CliError::Config("n: must be >= 1".into()));
        }
        if reps == 0 {
            return Err(CliError::Config("reps: must be >= 1".into()));
        }
        let base_seed = self.base_seed.unwrap_or(1);

        let solver = match self
            .solver
            .clone()
            .unwrap_or(SolverSpec::Neural { width: None, depth: None })
        {
            SolverSpec::Neural { width, depth } => {
                let width = width.unwrap_or(bundle.arch.width);
                let depth = depth.unwrap_or(bundle.arch.depth);
                if width == 0 {
                    return Err(CliError::Config("solver.width: must be >= 1".into()));
                }
                SolverKind::Neural { width, depth }
            }
            SolverSpec::Polynomial { degree } => SolverKind::Poly { degree },
        };

        let mut cfg = bundle.config.clone();
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        match self.tol {
            Some(Tol::Both(x)) => {
                cfg.tol_beta = x;
                cfg.tol_omega = x;
            }
            Some(Tol::Split { beta, omega }) => {
                cfg.tol_beta = beta;
                cfg.tol_omega = omega;
            }
            None => {}
        }
        if let Some(v) = self.j1 {
            cfg.j1 = v;
        }
        if let Some(v) = self.j2 {
            cfg.j2 = v;
        }
        if let Some(v) = self.lr_beta {
            cfg.lr_beta = v;
        }
        if let Some(v) = self.lr_omega {
            cfg.lr_omega = v;
        }
        if let Some(v) = self.fd_step {
            cfg.fd_step = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }

        if cfg.gamma == 0 {
            return Err(CliError::Config("gamma: must be >= 1".into()));
        }
        if cfg.max_iter == 0 {
            return Err(CliError::Config("max_iter: must be >= 1".into()));
        }
        if cfg.j1 == 0 {
            return Err(CliError::Config("j1: must be >= 1".into()));
        }
        if cfg.j2 == 0 {
            return Err(CliError::Config("j2: must be >= 1".into()));
        }
        require_positive(cfg.tol_beta, "tol.beta")?;
        require_positive(cfg.tol_omega, "tol.omega")?;
        require_positive(cfg.lr_beta, "lr_beta")?;
        require_positive(cfg.lr_omega, "lr_omega")?;
        require_positive(cfg.fd_step, "fd_step")?;

        let labels: Vec<String> = match &self.comparators {
            Some(list) => list.clone(),
            None => bundle.comparators.iter().map(|c| c.label()).collect(),
        };
        let mut comparators = Vec::with_capacity(labels.len());
        let mut seen = vec![solver.label()];
        for (i, raw) in labels.iter().enumerate() {
            let c = parse_comparator(raw)
                .map_err(|e| CliError::Config(format!("comparators[{i}]: {e}")))?;
            let missing = match c {
                Comparator::Oracle => bundle.oracle.is_none(),
                Comparator::Biased => bundle.biased.is_none(),
                Comparator::Polynomial(_) => false,
            };
            if missing {
                return Err(CliError::Config(format!(
                    "comparators[{i}]: {raw} is not available for example \"{}\"",
                    self.example
                )));
            }
            let label = c.label();
            if seen.contains(&label) {
                return Err(CliError::Config(format!(
                    "comparators[{i}]: duplicate solver label \"{label}\""
                )));
            }
            seen.push(label);
            comparators.push(c);
        }

        let config = RunConfig {
            example: self.example.clone(),
            n: Some(n),
            reps: Some(reps),
            base_seed: Some(base_seed),
            solver: Some(solver.spec()),
            gamma: Some(cfg.gamma),
            max_iter: Some(cfg.max_iter),
            tol: Some(Tol::Split { beta: cfg.tol_beta, omega: cfg.tol_omega }),
            j1: Some(cfg.j1),
            j2: Some(cfg.j2),
            lr_beta: Some(cfg.lr_beta),
            lr_omega: Some(cfg.lr_omega),
            fd_step: Some(cfg.fd_step),
            lambda,
            batch: Some(cfg.batch),
            comparators: Some(seen[1..].to_vec()),
            out: self.out.clone(),
            timing: self.timing,
        };

        Ok(Resolved::Sim(Box::new(ResolvedRun {
            config,
            example: self.example.clone(),
            n,
            reps,
            base_seed,
            solver,
            comparators,
            bilevel: cfg,
            lambda,
            out: self.out.clone(),
            timing: self.timing,
            q: bundle.beta_star.len(),
            beta_star: bundle.beta_star.clone(),
        })))
    }

    fn resolve_analytic(&self, id: String) -> Result<Resolved, CliError> {
        let inapplicable: [(&str, bool); 9] = [
            ("n", self.n.is_some()),
            ("reps", self.reps.is_some()),
            ("gamma", self.gamma.is_some()),
            ("tol", self.tol.is_some()),
            ("lr_beta", self.lr_beta.is_some()),
            ("fd_step", self.fd_step.is_some()),
            ("lambda", self.lambda.is_some()),
            ("batch", self.batch.is_some()),
            ("comparators", self.comparators.is_some()),
        ];
        for (field, set) in inapplicable {
            if set {
                return Err(CliError::Config(format!(
                    "{field}: not applicable to analytic fixtures"
                )));
            }
        }

        let solver = match self
            .solver
            .clone()
            .unwrap_or(SolverSpec::Polynomial { degree: 3 })
        {
            SolverSpec::Neural { width, depth } => {
                let width = width.unwrap_or(16);
                let depth = depth.unwrap_or(2);
                if width == 0 {
                    return Err(CliError::Config("solver.width: must be >= 1".into()));
                }
                SolverKind::Neural { width, depth }
            }
            SolverSpec::Polynomial { degree } => SolverKind::Poly { degree },
        };
        let j1 = self.j1.unwrap_or(64);
        let j2 = self.j2.unwrap_or(64);
        if j1 == 0 {
            return Err(CliError::Config("j1: must be >= 1".into()));
        }
        if j2 == 0 {
            return Err(CliError::Config("j2: must be >= 1".into()));
        }
        let steps = self.max_iter.unwrap_or(5000);
        if steps == 0 {
            return Err(CliError::Config("max_iter: must be >= 1".into()));
        }
        let lr = self.lr_omega.unwrap_or(3e-3);
        require_positive(lr, "lr_omega")?;
        let seed = self.base_seed.unwrap_or(1);

        let mut config = RunConfig::bare(ExampleId::Analytic(id.clone()));
        config.solver = Some(solver.spec());
        config.j1 = Some(j1);
        config.j2 = Some(j2);
        config.max_iter = Some(steps);
        config.lr_omega = Some(lr);
        config.base_seed = Some(seed);
        config.out = self.out.clone();
        config.timing = self.timing;

        Ok(Resolved::Analytic(ResolvedAnalytic {
            config,
            id,
            solver,
            j1,
            j2,
            steps,
            lr,
            seed,
            out: self.out.clone(),
        }))
    }
}

/// Parses a config from JSON text. Unknown keys and malformed values are
/// configuration errors.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// Reads and parses a config file. A missing or unreadable file is an I/O
/// error; bad contents are a configuration error.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    parse_config(&text)
}
