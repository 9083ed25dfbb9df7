use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::config::{config_from_value, Mode, Purpose};
use super::run::{run_experiment, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: Mode,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub seed: u64,
    pub spectral_radius: Option<f64>,
    pub final_error: Option<f64>,
    #[serde(rename = "steps_to_1e-6")]
    pub steps_to_tol: Option<usize>,
    pub steps_to_zero: Option<usize>,
    pub max_identity_residual: Option<f64>,
    pub monotonicity_violations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub system: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        fn cell<T: ToString>(x: &Option<T>) -> String {
            x.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        let mut out = String::from(
            "label,mode,N,seed,spectral_radius,final_error,steps_to_1e-6,steps_to_zero,max_identity_residual,monotonicity_violations\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.mode,
                r.horizon,
                r.seed,
                r.spectral_radius.map(|x| format!("{x:.16e}")).unwrap_or_default(),
                r.final_error.map(|x| format!("{x:.16e}")).unwrap_or_default(),
                cell(&r.steps_to_tol),
                cell(&r.steps_to_zero),
                r.max_identity_residual.map(|x| format!("{x:.16e}")).unwrap_or_default(),
                cell(&r.monotonicity_violations),
            );
        }
        out
    }
}

/// Line up convergence metrics of runs over one system.
pub fn compare_runs(reports: &[RunReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::param("reports", format!("need at least two reports, got {}", reports.len())));
    }
    let system = &reports[0].system;
    if let Some(other) = reports.iter().find(|r| &r.system != system) {
        return Err(Error::param(
            "reports",
            format!("reports cover different systems: `{system}` and `{}`", other.system),
        ));
    }
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            label: r.name.clone().unwrap_or_else(|| format!("{}#{i}", r.mode)),
            mode: r.mode,
            horizon: r.horizon,
            seed: r.seed,
            spectral_radius: r.spectral_radius,
            final_error: r.final_error,
            steps_to_tol: r.steps_to_tol,
            steps_to_zero: r.steps_to_zero,
            max_identity_residual: r.max_identity_residual,
            monotonicity_violations: r.monotonicity_violations,
        })
        .collect();
    Ok(Comparison {
        system: system.clone(),
        rows,
    })
}

/// Expand the `sweep` block (`{"N": [...], "seeds": [...]}`) into one
/// document per combination. Each gets its own `out/run_XXX` directory.
pub fn expand_sweep(doc: &Value) -> Result<Vec<Value>> {
    let mut base = doc.clone();
    let sweep = base.as_object_mut().and_then(|o| o.remove("sweep"));
    let list = |key: &str| -> Vec<Value> {
        sweep
            .as_ref()
            .and_then(|s| s.get(key))
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default()
    };
    let horizons = list("N");
    let seeds = list("seeds");
    let horizons = if horizons.is_empty() { vec![base.get("N").cloned()] } else { horizons.into_iter().map(Some).collect() };
    let seeds = if seeds.is_empty() { vec![base.get("seed").cloned()] } else { seeds.into_iter().map(Some).collect() };
    let out = base.get("out").and_then(Value::as_str).map(std::path::PathBuf::from);
    let mut docs = Vec::new();
    for n in &horizons {
        for seed in &seeds {
            let mut d = base.clone();
            let obj = d.as_object_mut().ok_or_else(|| Error::param("(root)", "expected a JSON object"))?;
            if let Some(n) = n {
                obj.insert("N".into(), n.clone());
            }
            if let Some(seed) = seed {
                obj.insert("seed".into(), seed.clone());
            }
            if let Some(dir) = &out {
                let sub = dir.join(format!("run_{:03}", docs.len()));
                obj.insert("out".into(), Value::String(sub.display().to_string()));
            }
            docs.push(d);
        }
    }
    Ok(docs)
}

/// Validate and run every combination of a sweep in parallel. The
/// outcomes come back in expansion order.
pub fn run_sweep(doc: &Value) -> Result<Vec<Result<RunReport>>> {
    // Validate the base document first so schema errors surface once.
    config_from_value(doc, Purpose::Run)?;
    let docs = expand_sweep(doc)?;
    Ok(docs
        .par_iter()
        .map(|d| config_from_value(d, Purpose::Run).and_then(|cfg| run_experiment(&cfg)))
        .collect())
}
