//! Config-driven experiments: validation, dispatch, traces and reports.
//!
//! Trace CSV columns by mode (floats use 17 significant digits, empty
//! cells mean not applicable):
//!
//! | mode | columns |
//! |---|---|
//! | deadbeat-observer | `k, x_1..x_n, xhat_1..xhat_n, err_norm, stack_residual` |
//! | mhe | `k, err_norm, J, lyap_lhs, lyap_rhs, identity_residual` |
//! | min-energy | `k, err_norm, V, u_1..u_m` |
//! | nl-observer | `k, err_norm, J, feasible` |
//! | nl-tracker | `k, err_norm, V, feasible, terminal_residual, u_1..u_m` |

mod compare;
mod config;
mod run;

pub use compare::{compare_runs, expand_sweep, run_sweep, Comparison, ComparisonRow};
pub use config::{
    config_from_value, load_config, parse_config, parse_document, parse_matrix, ExperimentConfig, Mode, Purpose,
    SystemSpec,
};
pub use run::{
    cost_increased, lyapunov_violated, run_experiment, settle_index, synthesize, tracker_program, RunReport,
    CONVERGED_TOL, ZERO_TOL,
};
