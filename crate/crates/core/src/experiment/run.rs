use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{ExperimentConfig, Mode, SystemSpec};
use crate::deadbeat::{self, DeadbeatGain, EquationStackSolver};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::min_energy::{self, Direction};
use crate::mhe;
use crate::nonlinear::{self, SampleSpec, TrackerProgram};
use crate::system::{
    is_full_column_rank, observability_stack, LinearTracking, NonlinearSystem, TraceRecord, DEFAULT_RANK_TOL,
};

/// Error level for `steps_to_1e-6`.
pub const CONVERGED_TOL: f64 = 1e-6;
/// Error level for `steps_to_zero`.
pub const ZERO_TOL: f64 = 1e-9;

/// Summary of one experiment. Every metric can be recomputed from the
/// trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub name: Option<String>,
    pub system: String,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub seed: u64,
    pub steps: usize,
    /// Synthesized gains by name, row-major.
    pub gains: BTreeMap<String, Vec<Vec<f64>>>,
    pub spectral_radius: Option<f64>,
    pub csv_path: Option<String>,
    pub columns: Vec<String>,
    /// `err_norm` of the last trace row.
    pub final_error: Option<f64>,
    /// First `k` from which every later `err_norm` is at most 1e−6.
    #[serde(rename = "steps_to_1e-6")]
    pub steps_to_tol: Option<usize>,
    /// Same with 1e−9.
    pub steps_to_zero: Option<usize>,
    pub max_identity_residual: Option<f64>,
    pub monotonicity_violations: Option<usize>,
    /// `J` or `V` at `k = 0`.
    pub initial_cost: Option<f64>,
    pub warnings: Vec<String>,
    pub diagnostics: Option<Value>,
    #[serde(skip)]
    pub csv: String,
}

impl RunReport {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            mode: cfg.mode,
            name: cfg.name.clone(),
            system: cfg.system_label.clone(),
            horizon: cfg.horizon,
            seed: cfg.seed,
            steps: cfg.steps,
            gains: BTreeMap::new(),
            spectral_radius: None,
            csv_path: None,
            columns: Vec::new(),
            final_error: None,
            steps_to_tol: None,
            steps_to_zero: None,
            max_identity_residual: None,
            monotonicity_violations: None,
            initial_cost: None,
            warnings: Vec::new(),
            diagnostics: None,
            csv: String::new(),
        }
    }

    pub fn gain(&self, name: &str) -> Option<Matrix> {
        let rows = self.gains.get(name)?;
        let ncols = rows.first().map_or(0, Vec::len);
        Some(Matrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn system_of(spec: &SystemSpec) -> Option<&dyn NonlinearSystem> {
    match spec {
        SystemSpec::Linear(s) => Some(s),
        SystemSpec::Plant(p) => Some(p.as_ref()),
        SystemSpec::Controlled { .. } => None,
    }
}

/// Gains and spectral data only; no simulation and no trace.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<RunReport> {
    let context = format!("mode {}", cfg.mode);
    synthesize_inner(cfg).map_err(|e| e.in_context(&context))
}

fn synthesize_inner(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::new(cfg);
    let n = cfg.horizon;
    match (cfg.mode, &cfg.system) {
        (Mode::DeadbeatObserver, SystemSpec::Linear(s)) => {
            let (a, c) = (s.a(), s.require_c()?);
            if c.nrows() == 1 {
                let g = deadbeat::deadbeat_observer_gain(a, c)?;
                report.spectral_radius = Some(DeadbeatGain::closed_loop_radius(&(a - &g.gain * c)));
                report.gains.insert("L".into(), rows(&g.gain));
            } else {
                report.warnings.push("closed-form deadbeat gain needs a scalar output; none reported".into());
            }
            if let Some(b) = s.b().filter(|b| b.ncols() == 1) {
                let k = deadbeat::deadbeat_tracker_gain(a, b)?;
                report.gains.insert("K".into(), rows(&k.gain));
            }
        }
        (Mode::Mhe, SystemSpec::Linear(s)) => {
            let r = cfg.r.as_ref().expect("resolved weight");
            let w = mhe::horizon_weights(s.a(), s.require_c()?, n, r)?;
            let g = mhe::gain_from_weights(&w, s.a(), s.require_c()?);
            report.spectral_radius = Some(g.spectral_radius);
            report.gains.insert("L".into(), rows(&g.l));
            report.diagnostics = Some(json!({"Q": rows(&w.q), "H": rows(&w.h)}));
        }
        (Mode::MinEnergy, SystemSpec::Linear(s)) => {
            let (a, b) = (s.a(), s.require_b()?);
            let r = cfg.r.as_ref().expect("resolved weight");
            let gram = min_energy::weighted_gramian(a, b, n, r)?;
            let k = min_energy::kleinman_gain(a, b, n, r)?;
            report.spectral_radius = Some(linalg::spectral_radius(&(a - b * &k)));
            report.gains.insert("K".into(), rows(&k));
            report.warnings.extend(min_energy::definiteness_warning(a));
            let mut diag = json!({"G": rows(&gram.g)});
            if let (Some(x0), Some(xhat0)) = (&cfg.x0, &cfg.xhat0) {
                let sol = min_energy::solve_min_energy(a, b, n, r, xhat0, x0)?;
                report.initial_cost = Some(sol.cost);
                diag["inputs"] = json!(sol.inputs.iter().map(|u| u.as_slice().to_vec()).collect::<Vec<_>>());
                diag["terminal_residual"] = json!(sol.terminal_residual(&(linalg::mat_pow(a, n) * x0)));
            }
            report.diagnostics = Some(diag);
        }
        (Mode::Dualize, SystemSpec::Linear(s)) => {
            let direction = cfg.direction.expect("validated");
            let (map, gain_name) = match direction {
                Direction::ControlToEstimation => (s.require_b()?, "L"),
                Direction::EstimationToControl => (s.require_c()?, "K"),
            };
            let r = cfg.r.as_ref().expect("resolved weight");
            let dual = min_energy::dualize(s.a(), map, n, r, direction)?;
            report.spectral_radius = Some(dual.spectral_radius);
            report.gains.insert(gain_name.into(), rows(&dual.gain));
            report.diagnostics = Some(json!({
                "direction": direction,
                "A": rows(&dual.a),
                "map": rows(&dual.map),
            }));
        }
        _ => {}
    }
    Ok(report)
}

/// Run the experiment the config describes. Writes `trace.csv` and
/// `report.json` into `cfg.out` when it is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let context = format!("mode {}", cfg.mode);
    let mut report = synthesize(cfg)?;
    simulate(cfg, &mut report).map_err(|e| e.in_context(&context))?;
    if let Some(dir) = &cfg.out {
        write_outputs(dir, &mut report)?;
    }
    Ok(report)
}

fn write_outputs(dir: &Path, report: &mut RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if !report.columns.is_empty() {
        let path = dir.join("trace.csv");
        std::fs::write(&path, &report.csv)?;
        report.csv_path = Some(path.display().to_string());
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Solver(e.to_string()))?;
    std::fs::write(dir.join("report.json"), text + "\n")?;
    Ok(())
}

fn required<'a>(v: &'a Option<Vector>, name: &str) -> Result<&'a Vector> {
    v.as_ref().ok_or_else(|| Error::param(name, "required to simulate"))
}

fn simulate(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let n = cfg.horizon;
    let steps = cfg.steps;
    match cfg.mode {
        Mode::DeadbeatObserver => {
            let sys = system_of(&cfg.system).expect("validated");
            let solver = match cfg.system {
                SystemSpec::Linear(_) => EquationStackSolver::exact_linear(),
                _ => EquationStackSolver::default(),
            };
            let (z0, x0) = (required(&cfg.z0, "z0")?, required(&cfg.x0, "x0")?);
            // The run needs at least N steps; later records do not change earlier ones.
            let mut recs = deadbeat::run_deadbeat_observer(sys, n, z0, x0, steps.max(n), &solver)?;
            recs.truncate(steps + 1);
            let dim = sys.state_dim();
            let mut cols = vec!["k".to_string()];
            cols.extend((1..=dim).map(|i| format!("x_{i}")));
            cols.extend((1..=dim).map(|i| format!("xhat_{i}")));
            cols.extend(["err_norm".into(), "stack_residual".into()]);
            let body = recs
                .iter()
                .map(|r| {
                    let mut row = vec![r.k.to_string()];
                    row.extend(r.x.iter().map(|v| num(*v)));
                    row.extend(r.xhat.iter().map(|v| num(*v)));
                    row.push(num(r.err_norm));
                    row.push(opt(r.identity_residual));
                    row
                })
                .collect();
            finish(report, cols, body, &recs, Monotone::NotApplicable);
        }
        Mode::Mhe => {
            let s = cfg.system.linear().expect("validated");
            let (z0, x0) = (required(&cfg.z0, "z0")?, required(&cfg.x0, "x0")?);
            let r = cfg.r.as_ref().expect("resolved weight");
            let recs = mhe::run_linear_mhe(s.a(), s.require_c()?, n, r, z0, x0, steps)?;
            let cols = ["k", "err_norm", "J", "lyap_lhs", "lyap_rhs", "identity_residual"];
            let body = recs
                .iter()
                .map(|r| {
                    vec![
                        r.k.to_string(),
                        num(r.err_norm),
                        opt(r.cost),
                        opt(r.lyap.map(|l| l.0)),
                        opt(r.lyap.map(|l| l.1)),
                        opt(r.identity_residual),
                    ]
                })
                .collect();
            finish(report, strings(&cols), body, &recs, Monotone::Lyapunov);
        }
        Mode::MinEnergy => {
            let s = cfg.system.linear().expect("validated");
            let (xhat0, x0) = (required(&cfg.xhat0, "xhat0")?, required(&cfg.x0, "x0")?);
            let r = cfg.r.as_ref().expect("resolved weight");
            let recs = min_energy::run_tracker_linear(s.a(), s.require_b()?, n, r, xhat0, x0, steps)?;
            let mut cols = strings(&["k", "err_norm", "V"]);
            cols.extend((1..=s.m()).map(|i| format!("u_{i}")));
            let body = recs
                .iter()
                .map(|r| {
                    let mut row = vec![r.k.to_string(), num(r.err_norm), opt(r.cost)];
                    row.extend(r.u.iter().flat_map(|u| u.iter().map(|v| num(*v))));
                    row
                })
                .collect();
            finish(report, cols, body, &recs, Monotone::Decreasing);
        }
        Mode::NlObserver => {
            let sys = system_of(&cfg.system).expect("validated");
            let (z0, x0) = (required(&cfg.z0, "z0")?, required(&cfg.x0, "x0")?);
            let cost = cfg.stage_cost.as_ref().expect("resolved stage cost");
            let recs = nonlinear::run_nl_observer(sys, cost, n, z0, x0, steps, &cfg.minimizer)?;
            let degraded = recs.iter().filter(|r| r.feasible == Some(false)).count();
            if degraded > 0 {
                report.warnings.push(format!("{degraded} step(s) with a degraded selector search"));
            }
            let body = recs
                .iter()
                .map(|r| vec![r.k.to_string(), num(r.err_norm), opt(r.cost), flag(r.feasible)])
                .collect();
            finish(report, strings(&["k", "err_norm", "J", "feasible"]), body, &recs, Monotone::NotApplicable);
        }
        Mode::NlTracker => {
            let program = tracker_program(cfg)?;
            let (xhat0, x0) = (required(&cfg.xhat0, "xhat0")?, required(&cfg.x0, "x0")?);
            let recs = nonlinear::run_nl_tracker(&program, xhat0, x0, steps)?;
            let dim = program.system.input_set().dim();
            let mut cols = strings(&["k", "err_norm", "V", "feasible", "terminal_residual"]);
            cols.extend((1..=dim).map(|i| format!("u_{i}")));
            let body = recs
                .iter()
                .map(|r| {
                    let mut row = vec![r.k.to_string(), num(r.err_norm), opt(r.cost), flag(r.feasible), opt(r.identity_residual)];
                    row.extend(r.u.iter().flat_map(|u| u.iter().map(|v| num(*v))));
                    row
                })
                .collect();
            finish(report, cols, body, &recs, Monotone::Decreasing);
        }
        Mode::CheckAssumptions => check_assumptions(cfg, report)?,
        Mode::Dualize => {}
    }
    Ok(())
}

/// Tracker program for the config's controlled system.
pub fn tracker_program(cfg: &ExperimentConfig) -> Result<TrackerProgram> {
    let cost = cfg.stage_cost.clone().expect("resolved stage cost");
    let (system, equilibrium): (Arc<dyn crate::system::ControlledSystem>, _) = match &cfg.system {
        SystemSpec::Controlled { system, equilibrium, .. } => (system.clone(), equilibrium.clone()),
        SystemSpec::Linear(s) => (Arc::new(LinearTracking::new(s.clone())?), None),
        SystemSpec::Plant(_) => return Err(Error::param("system", "a controlled system is required")),
    };
    let mut program = TrackerProgram::new(system, cost, cfg.horizon);
    if let Some(b) = &cfg.tracker_backend {
        program.backend = b.clone();
    }
    program.terminal_tol = cfg.terminal_tol;
    program.equilibrium = equilibrium;
    Ok(program)
}

fn check_assumptions(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let sys = system_of(&cfg.system).expect("validated");
    let cost = cfg.stage_cost.as_ref().expect("resolved stage cost");
    let center = cfg.sample_center.clone().unwrap_or_else(|| Vector::zeros(sys.state_dim()));
    let spec = SampleSpec::uniform_box(&center, cfg.sample_half_width, cfg.samples, cfg.seed);
    let obs = nonlinear::check_uniform_observability(sys, cost, cfg.horizon, &spec, &cfg.alpha3);
    let decay = nonlinear::check_j_decay(sys, cost, cfg.horizon, &spec, &cfg.alpha4, &cfg.minimizer)?;
    let outputs: Vec<(Vector, Vector)> = spec
        .pairs
        .iter()
        .map(|(a, b)| (sys.output_map(a), sys.output_map(b)))
        .collect();
    let bounds = cost.check_bounds(&outputs);
    let declarations = match &cfg.system {
        SystemSpec::Plant(p) => Some(p.declarations),
        _ => None,
    };
    let rank = match &cfg.system {
        SystemSpec::Linear(s) => {
            let w = observability_stack(s.a(), s.require_c()?, cfg.horizon)?;
            Some(is_full_column_rank(&w, DEFAULT_RANK_TOL)?)
        }
        _ => None,
    };
    if obs.violations > 0 {
        report.warnings.push(format!("uniform observability bound failed on {} sample(s)", obs.violations));
    }
    if decay.violations > 0 {
        report.warnings.push(format!("cost decay bound failed on {} sample(s)", decay.violations));
    }
    if !bounds.passed() {
        report.warnings.push("stage cost bounds or symmetry failed on samples".into());
    }
    if rank == Some(false) {
        report.warnings.push("observability stack is not full column rank".into());
    }
    report.diagnostics = Some(json!({
        "note": "sampling spot checks only; passing samples do not certify the assumptions",
        "uniform_observability": obs,
        "cost_decay": decay,
        "stage_cost_bounds": bounds,
        "declarations": declarations,
        "observability_rank_full": rank,
    }));
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Monotone {
    NotApplicable,
    /// `lyap_lhs ≤ lyap_rhs` on every row carrying the pair.
    Lyapunov,
    /// The cost column never increases.
    Decreasing,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn flag(b: Option<bool>) -> String {
    match b {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

fn strings(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Tolerance for the monotonicity counters.
pub fn lyapunov_violated(lhs: f64, rhs: f64) -> bool {
    lhs > rhs + 1e-12 * (1.0 + rhs.abs())
}

pub fn cost_increased(prev: f64, next: f64) -> bool {
    next > prev + 1e-9 * (1.0 + prev.abs())
}

/// First index from which every later error is at most `tol`.
pub fn settle_index(errors: &[f64], tol: f64) -> Option<usize> {
    if errors.last().is_none_or(|e| *e > tol) {
        return None;
    }
    let last_bad = errors.iter().rposition(|e| *e > tol);
    Some(last_bad.map_or(0, |i| i + 1))
}

fn finish(report: &mut RunReport, cols: Vec<String>, body: Vec<Vec<String>>, recs: &[TraceRecord], mono: Monotone) {
    let mut csv = cols.join(",");
    csv.push('\n');
    for row in body {
        let _ = writeln!(csv, "{}", row.join(","));
    }
    report.columns = cols;
    report.csv = csv;
    let errors: Vec<f64> = recs.iter().map(|r| r.err_norm).collect();
    report.final_error = errors.last().copied();
    report.steps_to_tol = settle_index(&errors, CONVERGED_TOL);
    report.steps_to_zero = settle_index(&errors, ZERO_TOL);
    report.max_identity_residual = recs
        .iter()
        .filter_map(|r| r.identity_residual)
        .map(f64::abs)
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    if report.mode == Mode::NlObserver {
        // The observer records its window discrepancy there, not an identity residual.
        report.max_identity_residual = None;
    }
    report.initial_cost = recs.first().and_then(|r| r.cost).or(report.initial_cost);
    report.monotonicity_violations = match mono {
        Monotone::NotApplicable => None,
        Monotone::Lyapunov => Some(recs.iter().filter_map(|r| r.lyap).filter(|(l, r)| lyapunov_violated(*l, *r)).count()),
        Monotone::Decreasing => Some(
            recs.windows(2)
                .filter(|w| matches!((w[0].cost, w[1].cost), (Some(a), Some(b)) if cost_increased(a, b)))
                .count(),
        ),
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{config_from_value, Purpose};
    use serde_json::json;

    fn scalar(mode: &str) -> Value {
        json!({
            "mode": mode,
            "system": {"A": [[2.0]], "B": [[1.0]], "C": [[1.0]]},
            "N": 2, "R": 1.0,
            "x0": [0.0], "z0": [1.0], "xhat0": [1.0],
            "steps": 6
        })
    }

    fn run(doc: &Value) -> RunReport {
        run_experiment(&config_from_value(doc, Purpose::Run).unwrap()).unwrap()
    }

    #[test]
    fn scalar_mhe_report() {
        let rep = run(&scalar("mhe"));
        assert!((rep.gain("L").unwrap()[(0, 0)] - 1.6).abs() < 1e-12);
        assert!((rep.spectral_radius.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(rep.monotonicity_violations, Some(0));
        assert_eq!(rep.csv.lines().count(), 8);
        assert!(rep.csv.starts_with("k,err_norm,J,lyap_lhs,lyap_rhs,identity_residual\n"));
    }

    #[test]
    fn scalar_min_energy_cost() {
        let rep = run(&scalar("min-energy"));
        assert!((rep.initial_cost.unwrap() - 3.2).abs() < 1e-12);
        assert!((rep.gain("K").unwrap()[(0, 0)] - 1.6).abs() < 1e-12);
        let inputs = &rep.diagnostics.as_ref().unwrap()["inputs"];
        assert!((inputs[0][0].as_f64().unwrap() + 1.6).abs() < 1e-12);
        assert!((inputs[1][0].as_f64().unwrap() + 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_gives_initial_row_only() {
        for mode in ["mhe", "min-energy", "deadbeat-observer", "nl-observer"] {
            let mut doc = scalar(mode);
            doc["steps"] = json!(0);
            if mode == "deadbeat-observer" {
                doc["N"] = json!(1);
            }
            let rep = run(&doc);
            assert_eq!(rep.csv.lines().count(), 2, "{mode}");
            assert!(rep.final_error.unwrap() > 0.0, "{mode}");
        }
    }

    #[test]
    fn settle_index_cases() {
        assert_eq!(settle_index(&[1.0, 1e-7, 1.0, 1e-8, 0.0], 1e-6), Some(3));
        assert_eq!(settle_index(&[0.0], 1e-6), Some(0));
        assert_eq!(settle_index(&[1.0], 1e-6), None);
        assert_eq!(settle_index(&[], 1e-6), None);
    }

    #[test]
    fn mode_context_on_errors() {
        let mut doc = scalar("nl-tracker");
        doc["system"] = json!({"kind": "builtin", "name": "integer_walk"});
        doc["x0"] = json!([0]);
        doc["xhat0"] = json!([3]);
        let err = run_experiment(&config_from_value(&doc, Purpose::Run).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("mode nl-tracker"), "{err}");
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut doc = scalar("mhe");
        doc["out"] = json!(dir.path().join("run"));
        let rep = run(&doc);
        let csv = std::fs::read_to_string(rep.csv_path.as_ref().unwrap()).unwrap();
        assert_eq!(csv, rep.csv);
        let back: RunReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
        assert_eq!(back.gains, rep.gains);
    }
}
