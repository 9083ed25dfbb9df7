use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::error::{ConfigError, Error, Result, Violation};
use crate::linalg::{Matrix, Vector};
use crate::min_energy::{self, Direction};
use crate::nonlinear::{ClassKInf, Minimizer, StageCost, TrackerBackend};
use crate::random::{self, seeded_rng};
use crate::registry;
use crate::system::{ControlledSystem, FnSystem, LinearSystem, NonlinearSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DeadbeatObserver,
    Mhe,
    MinEnergy,
    NlObserver,
    NlTracker,
    Dualize,
    CheckAssumptions,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::DeadbeatObserver,
        Mode::Mhe,
        Mode::MinEnergy,
        Mode::NlObserver,
        Mode::NlTracker,
        Mode::Dualize,
        Mode::CheckAssumptions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DeadbeatObserver => "deadbeat-observer",
            Mode::Mhe => "mhe",
            Mode::MinEnergy => "min-energy",
            Mode::NlObserver => "nl-observer",
            Mode::NlTracker => "nl-tracker",
            Mode::Dualize => "dualize",
            Mode::CheckAssumptions => "check-assumptions",
        }
    }

    /// Modes that simulate and write a trace.
    pub fn simulates(self) -> bool {
        !matches!(self, Mode::Dualize | Mode::CheckAssumptions)
    }

    /// Initial-state field other than `x0` that a simulation needs.
    fn companion_state(self) -> Option<&'static str> {
        match self {
            Mode::DeadbeatObserver | Mode::Mhe | Mode::NlObserver => Some("z0"),
            Mode::MinEnergy | Mode::NlTracker => Some("xhat0"),
            Mode::Dualize | Mode::CheckAssumptions => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`; expected one of {:?}", Mode::ALL.map(Mode::as_str)))
    }
}

/// What the document is going to be used for. Synthesis skips the
/// initial-state and step requirements of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Run,
    Synthesize,
}

#[derive(Clone)]
pub enum SystemSpec {
    Linear(LinearSystem),
    Plant(Arc<FnSystem>),
    Controlled {
        system: Arc<dyn ControlledSystem>,
        default_cost: StageCost,
        equilibrium: Option<Vector>,
    },
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemSpec::Linear(s) => f.debug_tuple("Linear").field(s).finish(),
            SystemSpec::Plant(p) => f.debug_tuple("Plant").field(&p.name()).finish(),
            SystemSpec::Controlled { system, .. } => f.debug_tuple("Controlled").field(system).finish(),
        }
    }
}

impl SystemSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::Linear(s) => s.n(),
            SystemSpec::Plant(p) => p.state_dim(),
            SystemSpec::Controlled { system, .. } => system.state_dim(),
        }
    }

    pub fn linear(&self) -> Option<&LinearSystem> {
        match self {
            SystemSpec::Linear(s) => Some(s),
            _ => None,
        }
    }
}

/// A validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub system: SystemSpec,
    /// Identifies the system across runs; equal labels mean equal systems.
    pub system_label: String,
    pub horizon: usize,
    /// Weight resolved to the dimension the mode needs.
    pub r: Option<Matrix>,
    pub stage_cost: Option<StageCost>,
    pub x0: Option<Vector>,
    pub z0: Option<Vector>,
    pub xhat0: Option<Vector>,
    pub steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub minimizer: Minimizer,
    pub tracker_backend: Option<TrackerBackend>,
    pub terminal_tol: f64,
    pub direction: Option<Direction>,
    pub samples: usize,
    pub sample_center: Option<Vector>,
    pub sample_half_width: f64,
    pub alpha3: ClassKInf,
    pub alpha4: ClassKInf,
    pub name: Option<String>,
    /// The document this config was built from.
    pub document: Value,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "name",
    "system",
    "N",
    "R",
    "stage_cost",
    "x0",
    "z0",
    "xhat0",
    "steps",
    "seed",
    "out",
    "minimizer",
    "tracker",
    "direction",
    "samples",
    "sample_center",
    "sample_half_width",
    "alpha3",
    "alpha4",
    "sweep",
];

/// Read and validate a JSON experiment file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    config_from_value(&parse_document(text)?, Purpose::Run)
}

/// Parse JSON text, reporting syntax errors with their position.
pub fn parse_document(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        Error::Config(ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    })
}

/// Validate a parsed document. Every violation found is reported at once.
pub fn config_from_value(doc: &Value, purpose: Purpose) -> Result<ExperimentConfig> {
    let Some(obj) = doc.as_object() else {
        return Err(invalid(vec![Violation::schema("(root)", "expected a JSON object")]));
    };
    let mut v = Vec::new();
    for key in obj.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            v.push(Violation::schema(key.clone(), "unknown field"));
        }
    }

    let mode = match obj.get("mode") {
        None => {
            v.push(Violation::schema("mode", "required"));
            None
        }
        Some(Value::String(s)) => s.parse::<Mode>().map_err(|e| v.push(Violation::schema("mode", e))).ok(),
        Some(_) => {
            v.push(Violation::schema("mode", "expected a string"));
            None
        }
    };
    let seed = optional_uint(obj, "seed", &mut v).unwrap_or(0);
    let horizon = match obj.get("N") {
        None => {
            v.push(Violation::schema("N", "required"));
            None
        }
        Some(_) => match optional_uint(obj, "N", &mut v) {
            Some(0) => {
                v.push(Violation::schema("N", "horizon must be at least 1"));
                None
            }
            n => n.map(|n| n as usize),
        },
    };
    let steps = optional_uint(obj, "steps", &mut v).map(|s| s as usize);
    let direction = match obj.get("direction") {
        None => None,
        Some(Value::String(s)) => s.parse::<Direction>().map_err(|e| v.push(Violation::schema("direction", e.to_string()))).ok(),
        Some(_) => {
            v.push(Violation::schema("direction", "expected a string"));
            None
        }
    };
    if mode == Some(Mode::Dualize) && direction.is_none() && !obj.contains_key("direction") {
        v.push(Violation::schema("direction", "required for mode dualize"));
    }

    let system = match obj.get("system") {
        None => {
            v.push(Violation::schema("system", "required"));
            None
        }
        Some(block) => parse_system(block, mode, direction, seed, &mut v),
    };
    if let (Some(mode), Some((spec, _))) = (mode, &system) {
        check_compatibility(mode, spec, direction, &mut v);
    }

    let n = system.as_ref().map(|(s, _)| s.state_dim());
    let vector_field = |key: &str, v: &mut Vec<Violation>| -> Option<Vector> {
        let raw = obj.get(key)?;
        let vec = parse_vector(raw).map_err(|e| v.push(Violation::schema(key, e))).ok()?;
        if let Some(n) = n {
            if vec.len() != n {
                v.push(Violation::dimension(key, format!("expected {n} entries, got {}", vec.len())));
                return None;
            }
        }
        Some(vec)
    };
    let x0 = vector_field("x0", &mut v);
    let z0 = vector_field("z0", &mut v);
    let xhat0 = vector_field("xhat0", &mut v);
    let sample_center = vector_field("sample_center", &mut v);

    if purpose == Purpose::Run {
        if let Some(mode) = mode.filter(|m| m.simulates()) {
            for key in ["x0", mode.companion_state().unwrap_or("x0"), "steps"] {
                if !obj.contains_key(key) && !v.iter().any(|x| x.field == key) {
                    v.push(Violation::schema(key, format!("required for mode {mode}")));
                }
            }
        }
    }

    let r = match (mode, &system) {
        (Some(mode), Some((spec, _))) => resolve_weight(obj.get("R"), mode, spec, direction, &mut v),
        _ => None,
    };
    let stage_cost = match (mode, &system) {
        (Some(mode), Some((spec, _))) => resolve_stage_cost(obj.get("stage_cost"), mode, spec, r.as_ref(), &mut v),
        _ => None,
    };

    let minimizer = match obj.get("minimizer") {
        None => Minimizer::default(),
        Some(raw) => serde_json::from_value::<Minimizer>(raw.clone())
            .map_err(|e| v.push(Violation::schema("minimizer", e.to_string())))
            .ok()
            .filter(|m| {
                let ok = m.tol > 0.0 && m.half_width > 0.0 && m.max_iter > 0;
                if !ok {
                    v.push(Violation::schema("minimizer", "tol, half_width and max_iter must be positive"));
                }
                ok
            })
            .unwrap_or_default(),
    };
    let (tracker_backend, terminal_tol) = parse_tracker(obj.get("tracker"), &mut v);
    let samples = optional_uint(obj, "samples", &mut v).unwrap_or(200) as usize;
    let sample_half_width = match obj.get("sample_half_width") {
        None => 1.0,
        Some(raw) => match raw.as_f64().filter(|h| h.is_finite() && *h > 0.0) {
            Some(h) => h,
            None => {
                v.push(Violation::schema("sample_half_width", "expected a positive number"));
                1.0
            }
        },
    };
    let alpha3 = parse_alpha(obj.get("alpha3"), "alpha3", ClassKInf::Power { c: 1e-3, p: 2.0 }, &mut v);
    let alpha4 = parse_alpha(obj.get("alpha4"), "alpha4", ClassKInf::identity(), &mut v);
    let out = match obj.get("out") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if !s.is_empty() => Some(PathBuf::from(s)),
        Some(_) => {
            v.push(Violation::schema("out", "expected a non-empty path string"));
            None
        }
    };
    let name = match obj.get("name") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            v.push(Violation::schema("name", "expected a string"));
            None
        }
    };
    if let Some(sweep) = obj.get("sweep") {
        check_sweep(sweep, &mut v);
    }

    if !v.is_empty() {
        return Err(invalid(v));
    }
    let (system, system_label) = system.expect("checked above");
    Ok(ExperimentConfig {
        mode: mode.expect("checked above"),
        system,
        system_label,
        horizon: horizon.expect("checked above"),
        r,
        stage_cost,
        x0,
        z0,
        xhat0,
        steps: steps.unwrap_or(0),
        seed,
        out,
        minimizer,
        tracker_backend,
        terminal_tol,
        direction,
        samples,
        sample_center,
        sample_half_width,
        alpha3,
        alpha4,
        name,
        document: doc.clone(),
    })
}

fn invalid(v: Vec<Violation>) -> Error {
    Error::Config(ConfigError::Invalid(v))
}

fn optional_uint(obj: &Map<String, Value>, key: &str, v: &mut Vec<Violation>) -> Option<u64> {
    let raw = obj.get(key)?;
    match raw.as_u64() {
        Some(x) => Some(x),
        None => {
            v.push(Violation::schema(key, "expected a nonnegative integer"));
            None
        }
    }
}

fn number(raw: &Value) -> std::result::Result<f64, String> {
    raw.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite number, got {raw}"))
}

fn parse_vector(raw: &Value) -> std::result::Result<Vector, String> {
    match raw {
        Value::Number(_) => Ok(Vector::from_element(1, number(raw)?)),
        Value::Array(items) => {
            if items.is_empty() {
                return Err("empty vector".into());
            }
            let vals = items.iter().map(number).collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(Vector::from_vec(vals))
        }
        _ => Err("expected an array of numbers".into()),
    }
}

/// Nested row-major arrays, or a bare number for a 1×1 matrix.
pub fn parse_matrix(raw: &Value) -> std::result::Result<Matrix, String> {
    match raw {
        Value::Number(_) => Ok(Matrix::from_element(1, 1, number(raw)?)),
        Value::Array(rows) => {
            if rows.is_empty() {
                return Err("empty matrix".into());
            }
            let mut data = Vec::new();
            let mut width = None;
            for (i, row) in rows.iter().enumerate() {
                let Value::Array(cells) = row else {
                    return Err(format!("row {i} is not an array"));
                };
                if cells.is_empty() {
                    return Err(format!("row {i} is empty"));
                }
                match width {
                    None => width = Some(cells.len()),
                    Some(w) if w != cells.len() => {
                        return Err(format!("ragged rows: row 0 has {w} entries, row {i} has {}", cells.len()));
                    }
                    _ => {}
                }
                for c in cells {
                    data.push(number(c)?);
                }
            }
            Ok(Matrix::from_row_slice(rows.len(), width.unwrap_or(0), &data))
        }
        _ => Err("expected nested arrays of numbers".into()),
    }
}

fn fingerprint(parts: &[&Matrix]) -> u64 {
    let mut h = DefaultHasher::new();
    for m in parts {
        (m.nrows(), m.ncols()).hash(&mut h);
        for x in m.iter() {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn linear_label(sys: &LinearSystem) -> String {
    let mut parts = vec![sys.a()];
    parts.extend(sys.b());
    parts.extend(sys.c());
    format!("linear(n={}, m={}, p={})#{:016x}", sys.n(), sys.m(), sys.p(), fingerprint(&parts))
}

fn parse_system(
    block: &Value,
    mode: Option<Mode>,
    direction: Option<Direction>,
    seed: u64,
    v: &mut Vec<Violation>,
) -> Option<(SystemSpec, String)> {
    let Some(obj) = block.as_object() else {
        v.push(Violation::schema("system", "expected an object"));
        return None;
    };
    let kind = obj.get("kind").and_then(Value::as_str).unwrap_or("linear");
    match kind {
        "linear" => parse_linear(obj, v),
        "random" => generate_random(obj, mode, direction, seed, v),
        "builtin" => {
            let Some(name) = obj.get("name").and_then(Value::as_str) else {
                v.push(Violation::schema("system.name", "required string for a builtin system"));
                return None;
            };
            let params = match obj.get("params") {
                None => Map::new(),
                Some(Value::Object(p)) => p.clone(),
                Some(_) => {
                    v.push(Violation::schema("system.params", "expected an object"));
                    return None;
                }
            };
            let label = format!("{name}{}", Value::Object(params.clone()));
            let result = if registry::PLANTS.contains(&name) {
                registry::builtin_plant(name, &params).map(|p| SystemSpec::Plant(Arc::new(p)))
            } else {
                registry::builtin_controlled(name, &params).map(|(system, default_cost, equilibrium)| {
                    SystemSpec::Controlled {
                        system,
                        default_cost,
                        equilibrium,
                    }
                })
            };
            match result {
                Ok(spec) => Some((spec, label)),
                Err(Error::UnknownBuiltin(_)) => {
                    let known: Vec<_> = registry::PLANTS.iter().chain(registry::CONTROLLED).collect();
                    v.push(Violation::schema("system.name", format!("unknown builtin `{name}`; known: {known:?}")));
                    None
                }
                Err(e) => {
                    v.push(Violation::schema("system.params", e.to_string()));
                    None
                }
            }
        }
        other => {
            v.push(Violation::schema("system.kind", format!("expected linear, random or builtin, got `{other}`")));
            None
        }
    }
}

fn parse_linear(obj: &Map<String, Value>, v: &mut Vec<Violation>) -> Option<(SystemSpec, String)> {
    for key in obj.keys() {
        if !["kind", "A", "B", "C"].contains(&key.as_str()) {
            v.push(Violation::schema(format!("system.{key}"), "unknown field"));
        }
    }
    let mut field = |key: &str| -> Option<Matrix> {
        let raw = obj.get(key)?;
        parse_matrix(raw).map_err(|e| v.push(Violation::schema(format!("system.{key}"), e))).ok()
    };
    let (a, b, c) = (field("A"), field("B"), field("C"));
    let Some(a) = a else {
        if !obj.contains_key("A") {
            v.push(Violation::schema("system.A", "required for a linear system"));
        }
        return None;
    };
    let n = a.nrows();
    let mut ok = true;
    if a.ncols() != n {
        v.push(Violation::dimension("system.A", format!("must be square, got {}x{}", a.nrows(), a.ncols())));
        ok = false;
    }
    if let Some(b) = &b {
        if b.nrows() != n {
            v.push(Violation::dimension("system.B", format!("expected {n} rows, got {}", b.nrows())));
            ok = false;
        }
    }
    if let Some(c) = &c {
        if c.ncols() != n {
            v.push(Violation::dimension("system.C", format!("expected {n} columns, got {}", c.ncols())));
            ok = false;
        }
    }
    if !ok {
        return None;
    }
    match LinearSystem::new(a, b, c) {
        Ok(sys) => {
            let label = linear_label(&sys);
            Some((SystemSpec::Linear(sys), label))
        }
        Err(e) => {
            v.push(Violation::schema("system", e.to_string()));
            None
        }
    }
}

fn generate_random(
    obj: &Map<String, Value>,
    mode: Option<Mode>,
    direction: Option<Direction>,
    seed: u64,
    v: &mut Vec<Violation>,
) -> Option<(SystemSpec, String)> {
    for key in obj.keys() {
        if !["kind", "n", "p", "m", "margin"].contains(&key.as_str()) {
            v.push(Violation::schema(format!("system.{key}"), "unknown field"));
        }
    }
    let mut dim = |key: &str, default: u64| -> Option<usize> {
        match obj.get(key) {
            None => Some(default as usize),
            Some(raw) => match raw.as_u64().filter(|d| (1..=64).contains(d)) {
                Some(d) => Some(d as usize),
                None => {
                    v.push(Violation::schema(format!("system.{key}"), "expected an integer in 1..=64"));
                    None
                }
            },
        }
    };
    let (n, p, m) = (dim("n", 0), dim("p", 1), dim("m", 1));
    let margin = match obj.get("margin") {
        None => random::DEFAULT_MARGIN,
        Some(raw) => match raw.as_f64().filter(|x| *x > 0.0 && *x < 1.0) {
            Some(x) => x,
            None => {
                v.push(Violation::schema("system.margin", "expected a number in (0, 1)"));
                return None;
            }
        },
    };
    if obj.get("n").is_none() {
        v.push(Violation::schema("system.n", "required for a random system"));
        return None;
    }
    let (n, p, m) = (n?, p?, m?);
    let wants_input = match mode {
        Some(Mode::MinEnergy | Mode::NlTracker) => true,
        Some(Mode::Dualize) => direction == Some(Direction::ControlToEstimation),
        _ => false,
    };
    let mut rng = seeded_rng(seed);
    let built = if wants_input {
        random::random_controllable(&mut rng, n, m, margin).and_then(|(a, b)| LinearSystem::controlled(a, b))
    } else {
        random::random_observable(&mut rng, n, p, margin).and_then(|(a, c)| LinearSystem::observed(a, c))
    };
    match built {
        Ok(sys) => {
            let label = linear_label(&sys);
            Some((SystemSpec::Linear(sys), label))
        }
        Err(e) => {
            v.push(Violation::schema("system", e.to_string()));
            None
        }
    }
}

fn check_compatibility(mode: Mode, spec: &SystemSpec, direction: Option<Direction>, v: &mut Vec<Violation>) {
    let problem = match (mode, spec) {
        (Mode::DeadbeatObserver | Mode::Mhe | Mode::NlObserver | Mode::CheckAssumptions, SystemSpec::Linear(s))
            if s.c().is_none() =>
        {
            Some("an output matrix C is required")
        }
        (Mode::Mhe, SystemSpec::Plant(_)) => Some("mode mhe needs a linear system; use nl-observer for builtins"),
        (Mode::MinEnergy, SystemSpec::Linear(s)) if s.b().is_none() => Some("an input matrix B is required"),
        (Mode::NlTracker, SystemSpec::Linear(s)) if s.b().is_none() => Some("an input matrix B is required"),
        (Mode::MinEnergy | Mode::Dualize, SystemSpec::Plant(_) | SystemSpec::Controlled { .. }) => {
            Some("this mode needs a linear system")
        }
        (Mode::NlTracker, SystemSpec::Plant(_)) => Some("mode nl-tracker needs a controlled system"),
        (
            Mode::DeadbeatObserver | Mode::Mhe | Mode::NlObserver | Mode::CheckAssumptions,
            SystemSpec::Controlled { .. },
        ) => Some("this mode needs an observed plant, not a controlled system"),
        (Mode::Dualize, SystemSpec::Linear(s)) => match direction {
            Some(Direction::ControlToEstimation) if s.b().is_none() => Some("control-to-estimation needs B"),
            Some(Direction::EstimationToControl) if s.c().is_none() => Some("estimation-to-control needs C"),
            _ => None,
        },
        _ => None,
    };
    if let Some(msg) = problem {
        v.push(Violation::schema("system", format!("{msg} (mode {mode})")));
    }
}

enum WeightSpec {
    Scalar(f64),
    Diag(Vec<f64>),
    Full(Matrix),
}

impl WeightSpec {
    fn parse(raw: &Value) -> std::result::Result<Self, String> {
        match raw {
            Value::Number(_) => Ok(WeightSpec::Scalar(number(raw)?)),
            Value::String(s) => {
                let Some(rest) = s.strip_prefix("diag:") else {
                    return Err(format!("expected `diag:a,b,...`, got `{s}`"));
                };
                let vals = rest
                    .split(',')
                    .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad diagonal entry `{t}`: {e}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(WeightSpec::Diag(vals))
            }
            _ => parse_matrix(raw).map(WeightSpec::Full),
        }
    }

    fn resolve(&self, dim: usize) -> std::result::Result<Matrix, String> {
        match self {
            WeightSpec::Scalar(c) => Ok(Matrix::identity(dim, dim) * *c),
            WeightSpec::Diag(d) if d.len() == dim => Ok(Matrix::from_diagonal(&Vector::from_vec(d.clone()))),
            WeightSpec::Diag(d) => Err(format!("expected {dim} diagonal entries, got {}", d.len())),
            WeightSpec::Full(m) if m.nrows() == dim && m.ncols() == dim => Ok(m.clone()),
            WeightSpec::Full(m) => Err(format!("expected {dim}x{dim}, got {}x{}", m.nrows(), m.ncols())),
        }
    }
}

/// Dimension of `R` for the mode, if the mode uses `R`.
fn weight_dim(mode: Mode, spec: &SystemSpec, direction: Option<Direction>) -> Option<usize> {
    let sys = spec.linear();
    match mode {
        Mode::Mhe | Mode::NlObserver | Mode::CheckAssumptions => match spec {
            SystemSpec::Linear(s) => Some(s.p()),
            SystemSpec::Plant(p) => Some(p.output_dim()),
            SystemSpec::Controlled { .. } => None,
        },
        Mode::MinEnergy | Mode::NlTracker => sys.map(|s| s.m()),
        Mode::Dualize => match direction? {
            Direction::ControlToEstimation => sys.map(|s| s.m()),
            Direction::EstimationToControl => sys.map(|s| s.p()),
        },
        Mode::DeadbeatObserver => None,
    }
}

fn resolve_weight(
    raw: Option<&Value>,
    mode: Mode,
    spec: &SystemSpec,
    direction: Option<Direction>,
    v: &mut Vec<Violation>,
) -> Option<Matrix> {
    let dim = weight_dim(mode, spec, direction)?;
    if dim == 0 {
        return None;
    }
    let Some(raw) = raw else {
        return Some(Matrix::identity(dim, dim));
    };
    let parsed = WeightSpec::parse(raw).map_err(|e| v.push(Violation::schema("R", e))).ok()?;
    let m = parsed.resolve(dim).map_err(|e| v.push(Violation::dimension("R", e))).ok()?;
    if let Err(e) = crate::linalg::check_spd(&m, "R") {
        v.push(Violation::schema("R", e.to_string()));
        return None;
    }
    Some(m)
}

fn parse_stage_cost(raw: &Value, dim: usize) -> std::result::Result<StageCost, Violation> {
    let schema = |e: String| Violation::schema("stage_cost", e);
    let quad = |w: Matrix| StageCost::quadratic(w).map_err(|e| schema(e.to_string()));
    match raw {
        Value::String(s) if s == "abs" => Ok(StageCost::abs()),
        Value::String(s) if s == "quad" => quad(Matrix::identity(dim, dim)),
        Value::String(s) if s.starts_with("quad:") => {
            let rest = &s["quad:".len()..];
            let spec = match rest.parse::<f64>() {
                Ok(c) => WeightSpec::Scalar(c),
                Err(_) => WeightSpec::parse(&Value::String(rest.to_string())).map_err(schema)?,
            };
            quad(spec.resolve(dim).map_err(|e| Violation::dimension("stage_cost", e))?)
        }
        Value::Object(o) if o.len() == 1 && o.contains_key("quad") => {
            let spec = WeightSpec::parse(&o["quad"]).map_err(schema)?;
            quad(spec.resolve(dim).map_err(|e| Violation::dimension("stage_cost", e))?)
        }
        Value::Object(o) if o.len() == 1 && o.contains_key("table") => {
            StageCost::table(parse_knots(&o["table"]).map_err(schema)?).map_err(|e| schema(e.to_string()))
        }
        _ => Err(schema(format!(
            "expected \"abs\", \"quad\", \"quad:<c>\", \"quad:diag:...\", {{\"quad\": M}} or {{\"table\": [[s, g], ...]}}, got {raw}"
        ))),
    }
}

fn parse_knots(raw: &Value) -> std::result::Result<Vec<(f64, f64)>, String> {
    let m = parse_matrix(raw)?;
    if m.ncols() != 2 {
        return Err("table knots must be [s, value] pairs".into());
    }
    Ok((0..m.nrows()).map(|i| (m[(i, 0)], m[(i, 1)])).collect())
}

fn resolve_stage_cost(
    raw: Option<&Value>,
    mode: Mode,
    spec: &SystemSpec,
    r: Option<&Matrix>,
    v: &mut Vec<Violation>,
) -> Option<StageCost> {
    let dim = match (mode, spec) {
        (Mode::NlObserver | Mode::CheckAssumptions, SystemSpec::Linear(s)) => s.p(),
        (Mode::NlObserver | Mode::CheckAssumptions, SystemSpec::Plant(p)) => p.output_dim(),
        (Mode::NlTracker, _) => spec.state_dim(),
        _ => {
            if raw.is_some() {
                v.push(Violation::schema("stage_cost", format!("not used by mode {mode}")));
            }
            return None;
        }
    };
    if let Some(raw) = raw {
        return parse_stage_cost(raw, dim).map_err(|e| v.push(e)).ok();
    }
    let built = match spec {
        SystemSpec::Controlled { default_cost, .. } => Ok(default_cost.clone()),
        SystemSpec::Linear(s) if mode == Mode::NlTracker => {
            let r = r.cloned().unwrap_or_else(|| Matrix::identity(s.m(), s.m()));
            min_energy::tracking_weight(s.require_b().ok()?, &r).and_then(StageCost::quadratic)
        }
        _ => StageCost::quadratic(r.cloned().unwrap_or_else(|| Matrix::identity(dim, dim))),
    };
    built.map_err(|e| v.push(Violation::schema("stage_cost", e.to_string()))).ok()
}

fn parse_tracker(raw: Option<&Value>, v: &mut Vec<Violation>) -> (Option<TrackerBackend>, f64) {
    let default_tol = 1e-6;
    let Some(raw) = raw else {
        return (None, default_tol);
    };
    let Some(obj) = raw.as_object() else {
        v.push(Violation::schema("tracker", "expected an object"));
        return (None, default_tol);
    };
    for key in obj.keys() {
        if !["backend", "terminal_tol"].contains(&key.as_str()) {
            v.push(Violation::schema(format!("tracker.{key}"), "unknown field"));
        }
    }
    let backend = obj.get("backend").and_then(|b| {
        serde_json::from_value::<TrackerBackend>(b.clone())
            .map_err(|e| v.push(Violation::schema("tracker.backend", e.to_string())))
            .ok()
    });
    let tol = match obj.get("terminal_tol") {
        None => default_tol,
        Some(t) => match t.as_f64().filter(|t| *t > 0.0) {
            Some(t) => t,
            None => {
                v.push(Violation::schema("tracker.terminal_tol", "expected a positive number"));
                default_tol
            }
        },
    };
    (backend, tol)
}

fn parse_alpha(raw: Option<&Value>, field: &str, default: ClassKInf, v: &mut Vec<Violation>) -> ClassKInf {
    let Some(raw) = raw else {
        return default;
    };
    let parsed = match raw {
        Value::String(s) if s == "identity" => Ok(ClassKInf::identity()),
        Value::Number(_) => number(raw).map(ClassKInf::Linear),
        Value::Object(o) if o.len() == 1 && o.contains_key("linear") => number(&o["linear"]).map(ClassKInf::Linear),
        Value::Object(o) if o.len() == 1 && o.contains_key("power") => match o["power"].as_array().map(Vec::as_slice) {
            Some([c, p]) => number(c).and_then(|c| number(p).map(|p| ClassKInf::Power { c, p })),
            _ => Err("power expects [c, p]".into()),
        },
        Value::Object(o) if o.len() == 1 && o.contains_key("table") => {
            parse_knots(&o["table"]).and_then(|k| ClassKInf::table(k).map_err(|e| e.to_string()))
        }
        _ => Err("expected \"identity\", a number, {\"linear\": c}, {\"power\": [c, p]} or {\"table\": [...]}".into()),
    };
    match parsed.and_then(|f| f.spot_check().map(|_| f).map_err(|e| e.to_string())) {
        Ok(f) => f,
        Err(e) => {
            v.push(Violation::schema(field, e));
            default
        }
    }
}

fn check_sweep(raw: &Value, v: &mut Vec<Violation>) {
    let Some(obj) = raw.as_object() else {
        v.push(Violation::schema("sweep", "expected an object"));
        return;
    };
    for (key, list) in obj {
        if !["N", "seeds"].contains(&key.as_str()) {
            v.push(Violation::schema(format!("sweep.{key}"), "unknown field; expected N or seeds"));
            continue;
        }
        let ok = list
            .as_array()
            .is_some_and(|a| !a.is_empty() && a.iter().all(|x| x.as_u64().is_some_and(|n| key != "N" || n >= 1)));
        if !ok {
            v.push(Violation::schema(format!("sweep.{key}"), "expected a non-empty array of nonnegative integers (N ≥ 1)"));
        }
    }
}
