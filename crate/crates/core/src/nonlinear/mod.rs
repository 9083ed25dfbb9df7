//! Nonlinear moving-horizon observer and tracker.

pub mod cost;
pub mod minimizer;
pub mod observer;
pub mod tracker;

pub use cost::{BoundCheck, ClassKInf, StageCost};
pub use minimizer::{MinResult, Minimizer, Problem, Strategy};
pub use observer::{
    check_j_decay, check_uniform_observability, nl_cost_j, nl_optimal_eta, run_nl_observer, window_discrepancy,
    DecayReport, EtaResult, ObservabilityReport, SampleSpec,
};
pub use tracker::{run_nl_tracker, tracker_solve, tracker_solve_warm, TrackerBackend, TrackerProgram, TrackerSolution};
