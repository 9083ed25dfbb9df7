//! Moving-horizon observer for nonlinear systems `x⁺ = f(x)`, `y = h(x)`.
//!
//! The selector minimizes
//! `J(ξ, z, y) = ℓ(h f^{N−1} ξ, y) + Σ_{i=0}^{N−2} ℓ(h fⁱ ξ, h fⁱ z)`
//! and the observer updates `z⁺ = f(η)`, `x̂ = f^{N−1}(z)`.

use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::nonlinear::cost::{ClassKInf, StageCost};
use crate::nonlinear::minimizer::{MinResult, Minimizer, Problem};
use crate::random::seeded_rng;
use crate::system::{NonlinearSystem, TraceRecord};

use rand::Rng;

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    Ok(())
}

/// `(h ξ, h f ξ, …, h f^{N−1} ξ)`.
fn output_window(sys: &dyn NonlinearSystem, horizon: usize, xi: &Vector) -> Vec<Vector> {
    sys.output_sequence(xi, horizon)
}

fn window_cost(cost: &StageCost, win_xi: &[Vector], win_z: &[Vector], y: &Vector) -> f64 {
    let n = win_xi.len();
    let mut total = cost.eval(&win_xi[n - 1], y);
    for i in 0..n - 1 {
        total += cost.eval(&win_xi[i], &win_z[i]);
    }
    total
}

pub fn nl_cost_j(sys: &dyn NonlinearSystem, cost: &StageCost, horizon: usize, xi: &Vector, z: &Vector, y: &Vector) -> Result<f64> {
    check_horizon(horizon)?;
    if xi.len() != sys.state_dim() || z.len() != sys.state_dim() || y.len() != sys.output_dim() {
        return Err(Error::dim("nl_cost_j", "xi, z or y has the wrong length"));
    }
    let j = window_cost(cost, &output_window(sys, horizon, xi), &output_window(sys, horizon, z), y);
    if !j.is_finite() {
        return Err(Error::Solver(format!("cost evaluated to {j}")));
    }
    Ok(j)
}

/// Selector with the achieved cost and minimizer diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaResult {
    pub eta: Vector,
    pub cost: f64,
    pub search: MinResult,
}

pub fn nl_optimal_eta(
    sys: &dyn NonlinearSystem,
    cost: &StageCost,
    horizon: usize,
    z: &Vector,
    y: &Vector,
    minimizer: &Minimizer,
) -> Result<EtaResult> {
    check_horizon(horizon)?;
    if z.len() != sys.state_dim() || y.len() != sys.output_dim() {
        return Err(Error::dim("nl_optimal_eta", "z or y has the wrong length"));
    }
    let win_z = output_window(sys, horizon, z);
    let objective = |xi: &Vector| window_cost(cost, &output_window(sys, horizon, xi), &win_z, y);
    let residual = |xi: &Vector| {
        let win = output_window(sys, horizon, xi);
        let mut parts: Vec<Vector> = Vec::with_capacity(horizon);
        parts.push(cost.residual(&win[horizon - 1], y).expect("residual form checked"));
        for i in 0..horizon - 1 {
            parts.push(cost.residual(&win[i], &win_z[i]).expect("residual form checked"));
        }
        let len = parts.iter().map(|p| p.len()).sum();
        Vector::from_iterator(len, parts.into_iter().flat_map(|p| p.into_iter().copied().collect::<Vec<_>>()))
    };
    let problem = Problem {
        cost: &objective,
        residual: if cost.has_residual_form() { Some(&residual) } else { None },
    };
    let search = minimizer.minimize(&problem, z);
    if !search.value.is_finite() || !linalg::vec_finite(&search.point) {
        return Err(Error::Solver("selector search produced no finite point".into()));
    }
    Ok(EtaResult {
        eta: search.point.clone(),
        cost: search.value,
        search,
    })
}

/// Simulate the observer against the plant; records `k = 0..=steps`.
///
/// `feasible` holds `false` for steps where the minimizer degraded, and
/// `identity_residual` holds the window discrepancy
/// `Σ_{i=0}^{N−2} ℓ(h fⁱ z, h fⁱ x̃)` from step `N−1` on.
pub fn run_nl_observer(
    sys: &dyn NonlinearSystem,
    cost: &StageCost,
    horizon: usize,
    z0: &Vector,
    x0: &Vector,
    steps: usize,
    minimizer: &Minimizer,
) -> Result<Vec<TraceRecord>> {
    check_horizon(horizon)?;
    let n = sys.state_dim();
    if z0.len() != n || x0.len() != n {
        return Err(Error::dim("initial state", format!("expected {n} entries")));
    }
    let mut history: Vec<Vector> = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut z = z0.clone();
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&z) {
            return Err(Error::Divergence { step: k });
        }
        history.push(x.clone());
        let y = sys.output_map(&x);
        let sel = nl_optimal_eta(sys, cost, horizon, &z, &y, minimizer)?;
        let mut rec = TraceRecord::new(k, x.clone(), sys.iterate(&z, horizon - 1));
        rec.cost = Some(sel.cost);
        rec.feasible = Some(!sel.search.degraded);
        if k + 1 >= horizon {
            let tx = history[k + 1 - horizon].clone();
            rec.identity_residual = Some(window_discrepancy(sys, cost, horizon, &z, &tx));
            rec.delayed_state = Some(tx);
        }
        rec.z = Some(z.clone());
        rec.y = Some(y);
        z = sys.state_map(&sel.eta);
        rec.eta = Some(sel.eta);
        records.push(rec);
        x = sys.state_map(&x);
    }
    Ok(records)
}

/// `Σ_{i=0}^{N−2} ℓ(h fⁱ z, h fⁱ x̃)`: bounds the sum of `α₄(J_k)` over a
/// run started with observer state `z` and delayed plant state `x̃`.
pub fn window_discrepancy(sys: &dyn NonlinearSystem, cost: &StageCost, horizon: usize, z: &Vector, tx: &Vector) -> f64 {
    let wz = output_window(sys, horizon, z);
    let wx = output_window(sys, horizon, tx);
    (0..horizon.saturating_sub(1)).map(|i| cost.eval(&wz[i], &wx[i])).sum()
}

/// State pairs `(z, x̃)` for the sampling diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub pairs: Vec<(Vector, Vector)>,
}

impl SampleSpec {
    /// `count` pairs drawn uniformly from the box `center ± half_width`.
    pub fn uniform_box(center: &Vector, half_width: f64, count: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            Vector::from_fn(center.len(), |i, _| center[i] + half_width * rng.gen_range(-1.0..=1.0))
        };
        let pairs = (0..count)
            .map(|_| {
                let a = draw(&mut rng);
                let b = draw(&mut rng);
                (a, b)
            })
            .collect();
        Self { pairs }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ObservabilityReport {
    pub samples: usize,
    /// Pairs with `α₃(ρ) = 0`, which pass vacuously.
    pub vacuous: usize,
    pub min_ratio: f64,
    pub violations: usize,
}

/// Spot-check `Σ_{i=0}^{N−1} ℓ(h fⁱ z, h fⁱ x̃) ≥ α₃(‖z − x̃‖)` on the
/// sampled pairs. A ratio below one is a violation.
pub fn check_uniform_observability(
    sys: &dyn NonlinearSystem,
    cost: &StageCost,
    horizon: usize,
    spec: &SampleSpec,
    alpha3: &ClassKInf,
) -> ObservabilityReport {
    let mut report = ObservabilityReport {
        samples: spec.pairs.len(),
        vacuous: 0,
        min_ratio: f64::INFINITY,
        violations: 0,
    };
    for (z, tx) in &spec.pairs {
        let bound = alpha3.eval((z - tx).norm());
        let wz = output_window(sys, horizon, z);
        let wx = output_window(sys, horizon, tx);
        let lhs: f64 = (0..horizon).map(|i| cost.eval(&wz[i], &wx[i])).sum();
        if bound <= 0.0 {
            report.vacuous += 1;
            continue;
        }
        let ratio = lhs / bound;
        report.min_ratio = report.min_ratio.min(ratio);
        if !(ratio >= 1.0 - 1e-12) {
            report.violations += 1;
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DecayReport {
    pub samples: usize,
    /// Largest `max(0, excess)` over the samples.
    pub max_excess: f64,
    pub violations: usize,
    pub degraded_searches: usize,
}

/// Spot-check
/// `α₄(J(η, z, y)) + Σ_{i=0}^{N−1} ℓ(h fⁱ η, h fⁱ x̃) ≤ Σ_{i=0}^{N−2} ℓ(h fⁱ z, h fⁱ x̃)`
/// with `y = h f^{N−1} x̃` and `η` the selector. A sample counts as a
/// violation when the excess exceeds `max(tol, 1e-9)·(1 + rhs)` with `tol`
/// the minimizer tolerance; `max_excess` is reported unfiltered.
pub fn check_j_decay(
    sys: &dyn NonlinearSystem,
    cost: &StageCost,
    horizon: usize,
    spec: &SampleSpec,
    alpha4: &ClassKInf,
    minimizer: &Minimizer,
) -> Result<DecayReport> {
    check_horizon(horizon)?;
    let mut report = DecayReport {
        samples: spec.pairs.len(),
        max_excess: 0.0,
        violations: 0,
        degraded_searches: 0,
    };
    for (z, tx) in &spec.pairs {
        let wx = output_window(sys, horizon, tx);
        let y = wx[horizon - 1].clone();
        let sel = nl_optimal_eta(sys, cost, horizon, z, &y, minimizer)?;
        if sel.search.degraded {
            report.degraded_searches += 1;
        }
        let we = output_window(sys, horizon, &sel.eta);
        let eta_sum: f64 = (0..horizon).map(|i| cost.eval(&we[i], &wx[i])).sum();
        let rhs = window_discrepancy(sys, cost, horizon, z, tx);
        let excess = alpha4.eval(sel.cost) + eta_sum - rhs;
        // The bound can hold with equality, so the excess is first order
        // in the selector error and the slack follows the minimizer tolerance.
        if excess > minimizer.tol.max(1e-9) * (1.0 + rhs.abs()) {
            report.violations += 1;
        }
        report.max_excess = report.max_excess.max(excess);
    }
    Ok(report)
}
