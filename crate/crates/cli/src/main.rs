use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use dual_horizon::experiment::{
    compare_runs, config_from_value, parse_document, run_experiment, run_sweep, synthesize, Purpose, RunReport,
};
use dual_horizon::{ConfigError, Error};

#[derive(Parser)]
#[command(name = "dual-horizon", version, about = "Finite-horizon observers and trackers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form deadbeat gains (scalar output / scalar input).
    SynthDeadbeat(Common),
    /// Moving-horizon observer gain L and its closed-loop spectral radius.
    SynthMhe(Common),
    /// Minimum-energy tracker gain K and the weighted Gramian.
    SynthMinenergy(Common),
    /// Transpose a pair and synthesize the dual gain.
    Dualize(Common),
    /// Simulate the deadbeat observer.
    RunDeadbeat(Common),
    /// Simulate the linear moving-horizon observer.
    RunMhe(Common),
    /// Simulate the linear minimum-energy tracker.
    RunTracker(Common),
    /// Simulate the optimization-based nonlinear observer.
    RunNlObserver(Common),
    /// Simulate the nonlinear tracker with a terminal equality constraint.
    RunNlTracker(Common),
    /// Sample the observer assumptions for a plant and stage cost.
    CheckAssumptions(Common),
    /// Run every combination of the config's `sweep` block in parallel.
    Sweep(Common),
    /// Tabulate convergence metrics from saved `report.json` files.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// JSON experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System block: inline JSON, a JSON file, or a builtin name.
    #[arg(long)]
    system: Option<String>,
    #[arg(long = "N")]
    horizon: Option<u64>,
    /// Weight: a number, `diag:a,b`, or a JSON matrix.
    #[arg(long = "R")]
    weight: Option<String>,
    /// `abs`, `quad`, `quad:<c>`, `quad:diag:a,b`, or JSON.
    #[arg(long)]
    stage_cost: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    z0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    xhat0: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `control-to-estimation` or `estimation-to-control`.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let obj = json!({"error": "usage", "exit_code": 2, "message": e.to_string().trim_end()});
            eprintln!("{obj}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    let (common, mode, purpose) = match command {
        Command::SynthDeadbeat(c) => (c, Some("deadbeat-observer"), Purpose::Synthesize),
        Command::SynthMhe(c) => (c, Some("mhe"), Purpose::Synthesize),
        Command::SynthMinenergy(c) => (c, Some("min-energy"), Purpose::Synthesize),
        Command::Dualize(c) => (c, Some("dualize"), Purpose::Run),
        Command::RunDeadbeat(c) => (c, Some("deadbeat-observer"), Purpose::Run),
        Command::RunMhe(c) => (c, Some("mhe"), Purpose::Run),
        Command::RunTracker(c) => (c, Some("min-energy"), Purpose::Run),
        Command::RunNlObserver(c) => (c, Some("nl-observer"), Purpose::Run),
        Command::RunNlTracker(c) => (c, Some("nl-tracker"), Purpose::Run),
        Command::CheckAssumptions(c) => (c, Some("check-assumptions"), Purpose::Run),
        Command::Sweep(c) => return sweep(c),
        Command::Compare { reports, format } => return compare(&reports, format),
    };
    let doc = build_document(&common, mode)?;
    let cfg = config_from_value(&doc, purpose)?;
    let report = match purpose {
        Purpose::Synthesize => synthesize(&cfg)?,
        Purpose::Run => run_experiment(&cfg)?,
    };
    match common.format {
        Format::Json => emit(&format!("{}\n", pretty(&report)?)),
        Format::Csv if report.columns.is_empty() => emit(&gains_csv(&report)),
        Format::Csv => emit(&report.csv),
    }
    Ok(ExitCode::SUCCESS)
}

/// Write to stdout; a closed pipe ends the process quietly.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("{}", json!({"error": "io", "exit_code": 4, "message": e.to_string()}));
        std::process::exit(4);
    }
}

fn pretty(v: &impl serde::Serialize) -> Result<String, Error> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Solver(e.to_string()))
}

fn gains_csv(report: &RunReport) -> String {
    let mut out = String::from("gain,row,col,value\n");
    for (name, rows) in &report.gains {
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{name},{i},{j},{v:.16e}\n"));
            }
        }
    }
    out
}

fn read_json_file(path: &Path) -> Result<Value, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_document(&text)
}

/// Inline JSON when it parses, otherwise the raw string.
fn json_or_string(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

/// `[1, 2]`, `1` or `1,2`.
fn parse_list(flag: &str, s: &str) -> Result<Value, Error> {
    if let Ok(v) = serde_json::from_str::<Value>(s) {
        return Ok(v);
    }
    let items = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(flag, format!("expected numbers separated by commas, got `{s}`")))?;
    Ok(json!(items))
}

fn usage(flag: &str, message: String) -> Error {
    Error::Config(ConfigError::Invalid(vec![dual_horizon::Violation::schema(flag, message)]))
}

fn parse_system(s: &str) -> Result<Value, Error> {
    let trimmed = s.trim_start();
    if trimmed.starts_with('{') {
        return parse_document(s);
    }
    let path = Path::new(s);
    if path.exists() {
        return read_json_file(path);
    }
    Ok(json!({"kind": "builtin", "name": s}))
}

fn build_document(c: &Common, mode: Option<&str>) -> Result<Value, Error> {
    let mut doc = match &c.config {
        Some(path) => read_json_file(path)?,
        None => Value::Object(Map::new()),
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| usage("--config", "the config file must hold a JSON object".into()))?;
    if let Some(mode) = mode {
        match obj.get("mode").and_then(Value::as_str) {
            Some(existing) if existing != mode => {
                return Err(usage("mode", format!("config declares mode `{existing}` but this command runs `{mode}`")));
            }
            _ => {
                obj.insert("mode".into(), json!(mode));
            }
        }
    }
    if let Some(s) = &c.system {
        obj.insert("system".into(), parse_system(s)?);
    }
    if let Some(n) = c.horizon {
        obj.insert("N".into(), json!(n));
    }
    if let Some(r) = &c.weight {
        obj.insert("R".into(), json_or_string(r));
    }
    if let Some(s) = &c.stage_cost {
        obj.insert("stage_cost".into(), json_or_string(s));
    }
    if let Some(s) = c.steps {
        obj.insert("steps".into(), json!(s));
    }
    for (key, val) in [("x0", &c.x0), ("z0", &c.z0), ("xhat0", &c.xhat0)] {
        if let Some(v) = val {
            obj.insert(key.into(), parse_list(&format!("--{key}"), v)?);
        }
    }
    if let Some(s) = c.seed {
        obj.insert("seed".into(), json!(s));
    }
    if let Some(o) = &c.out {
        obj.insert("out".into(), json!(o.display().to_string()));
    }
    if let Some(d) = &c.direction {
        obj.insert("direction".into(), json!(d));
    }
    Ok(doc)
}

fn sweep(c: Common) -> Result<ExitCode, Error> {
    let doc = build_document(&c, None)?;
    let outcomes = run_sweep(&doc)?;
    let mut worst = 0u8;
    let mut entries = Vec::new();
    let mut csv = String::from("index,N,seed,status,spectral_radius,final_error,steps_to_1e-6\n");
    for (i, outcome) in outcomes.iter().enumerate() {
        match outcome {
            Ok(r) => {
                entries.push(json!({"index": i, "report": r}));
                csv.push_str(&format!(
                    "{i},{},{},ok,{},{},{}\n",
                    r.horizon,
                    r.seed,
                    r.spectral_radius.map(|x| format!("{x:.16e}")).unwrap_or_default(),
                    r.final_error.map(|x| format!("{x:.16e}")).unwrap_or_default(),
                    r.steps_to_tol.map(|k| k.to_string()).unwrap_or_default(),
                ));
            }
            Err(e) => {
                worst = worst.max(e.exit_code() as u8);
                eprintln!("{}", json!({"index": i, "error": e.to_json()}));
                entries.push(json!({"index": i, "error": e.to_json()}));
                csv.push_str(&format!("{i},,,{},,,\n", e.kind()));
            }
        }
    }
    match c.format {
        Format::Json => emit(&format!("{}\n", pretty(&entries)?)),
        Format::Csv => emit(&csv),
    }
    Ok(if worst == 0 { ExitCode::SUCCESS } else { ExitCode::from(worst) })
}

fn compare(paths: &[PathBuf], format: Format) -> Result<ExitCode, Error> {
    let reports = paths
        .iter()
        .map(|p| {
            let value = read_json_file(p)?;
            serde_json::from_value::<RunReport>(value)
                .map_err(|e| usage(&p.display().to_string(), format!("not a run report: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare_runs(&reports)?;
    match format {
        Format::Json => emit(&format!("{}\n", pretty(&table)?)),
        Format::Csv => emit(&table.to_csv()),
    }
    Ok(ExitCode::SUCCESS)
}
