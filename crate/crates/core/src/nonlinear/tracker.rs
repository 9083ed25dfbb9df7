//! Moving-horizon tracker `x̂⁺ = F(x̂, u)` for a reference `x⁺ = f(x)`.
//!
//! At every step the state path `z₀ … z_N` minimizing `Σ ℓ(z_{i+1}, f z_i)`
//! with `z₀ = x̂`, `z_{i+1} ∈ F(z_i, U)` and `z_N = fᴺ(x)` is computed and
//! the first move `x̂⁺ = z₁` is applied.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::nonlinear::cost::StageCost;
use crate::nonlinear::minimizer::{Minimizer, Problem};
use crate::system::{ControlledSystem, InputSet, TraceRecord};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrackerBackend {
    /// Enumerate every input sequence of a finite input set.
    Exhaustive { max_sequences: usize },
    /// Single shooting over input sequences with an augmented Lagrangian
    /// on the terminal equality.
    Shooting {
        rounds: usize,
        initial_penalty: f64,
        detect_multiplicity: bool,
    },
}

impl TrackerBackend {
    pub fn exhaustive() -> Self {
        TrackerBackend::Exhaustive { max_sequences: 100_000 }
    }

    pub fn shooting() -> Self {
        TrackerBackend::Shooting {
            rounds: 6,
            initial_penalty: 10.0,
            detect_multiplicity: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerProgram {
    pub system: Arc<dyn ControlledSystem>,
    pub cost: StageCost,
    pub horizon: usize,
    pub backend: TrackerBackend,
    /// Allowed `‖z_N − fᴺ(x)‖∞`, relative to `1 + ‖fᴺ(x)‖∞`.
    pub terminal_tol: f64,
    /// Declared equilibrium `f(x_eq) = x_eq` when regulating to a point.
    pub equilibrium: Option<Vector>,
}

impl TrackerProgram {
    /// Backend chosen from the input set: exhaustive for finite sets.
    pub fn new(system: Arc<dyn ControlledSystem>, cost: StageCost, horizon: usize) -> Self {
        let backend = match system.input_set() {
            InputSet::Finite(_) => TrackerBackend::exhaustive(),
            InputSet::Box { .. } => TrackerBackend::shooting(),
        };
        Self {
            system,
            cost,
            horizon,
            backend,
            terminal_tol: 1e-6,
            equilibrium: None,
        }
    }

    /// `Σ_{i=0}^{N−1} ℓ(z_{i+1}, f z_i)`.
    pub fn path_cost(&self, states: &[Vector]) -> f64 {
        states
            .windows(2)
            .map(|w| self.cost.eval(&w[1], &self.system.reference_map(&w[0])))
            .sum()
    }

    fn rollout(&self, xhat: &Vector, inputs: &[Vector]) -> Vec<Vector> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(xhat.clone());
        for u in inputs {
            let next = self.system.transition(states.last().expect("non-empty"), u);
            states.push(next);
        }
        states
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerSolution {
    /// `φ₀ … φ_N`.
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    /// `V(x̂, x)`.
    pub value: f64,
    pub u0: Vector,
    /// Another admissible sequence reaches the same value along a
    /// different path.
    pub multiple: bool,
    pub terminal_residual: f64,
}

fn lexicographic(a: &Vector, b: &Vector) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

fn check_inputs(program: &TrackerProgram, xhat: &Vector, x: &Vector) -> Result<()> {
    if program.horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    let n = program.system.state_dim();
    if xhat.len() != n || x.len() != n {
        return Err(Error::dim("tracker state", format!("expected {n} entries")));
    }
    if !linalg::vec_finite(xhat) || !linalg::vec_finite(x) {
        return Err(Error::param("tracker state", "contains non-finite entries"));
    }
    Ok(())
}

/// Solve the tracker program at `(x̂, x)`.
pub fn tracker_solve(program: &TrackerProgram, xhat: &Vector, x: &Vector) -> Result<TrackerSolution> {
    tracker_solve_warm(program, xhat, x, None)
}

/// As [`tracker_solve`], starting the shooting backend from `warm`.
pub fn tracker_solve_warm(program: &TrackerProgram, xhat: &Vector, x: &Vector, warm: Option<&[Vector]>) -> Result<TrackerSolution> {
    check_inputs(program, xhat, x)?;
    let target = program.system.reference_iterate(x, program.horizon);
    match (&program.backend, program.system.input_set()) {
        (TrackerBackend::Exhaustive { max_sequences }, InputSet::Finite(set)) => {
            exhaustive(program, xhat, &target, set, *max_sequences)
        }
        (TrackerBackend::Exhaustive { .. }, InputSet::Box { .. }) => Err(Error::param(
            "backend",
            "exhaustive search needs a finite input set",
        )),
        (TrackerBackend::Shooting { rounds, initial_penalty, detect_multiplicity }, InputSet::Box { lower, upper }) => {
            shooting(program, xhat, &target, lower, upper, *rounds, *initial_penalty, *detect_multiplicity, warm)
        }
        (TrackerBackend::Shooting { .. }, InputSet::Finite(_)) => Err(Error::param(
            "backend",
            "shooting needs a box input set",
        )),
    }
}

fn terminal_ok(program: &TrackerProgram, end: &Vector, target: &Vector) -> (bool, f64) {
    let res = (end - target).amax();
    (res <= program.terminal_tol * (1.0 + target.amax()), res)
}

fn exhaustive(program: &TrackerProgram, xhat: &Vector, target: &Vector, set: &[Vector], budget: usize) -> Result<TrackerSolution> {
    if set.is_empty() {
        return Err(Error::param("U", "finite input set is empty"));
    }
    let horizon = program.horizon;
    let total = set.len().checked_pow(horizon as u32).filter(|t| *t <= budget);
    let Some(total) = total else {
        return Err(Error::param(
            "N",
            format!("{}^{horizon} input sequences exceed the budget of {budget}", set.len()),
        ));
    };
    let mut sorted = set.to_vec();
    sorted.sort_by(lexicographic);
    sorted.dedup();
    let n = xhat.len();
    let mut idx = vec![0usize; horizon];
    let mut best: Option<(f64, Vec<usize>, Vec<Vector>)> = None;
    let mut multiple = false;
    let mut nearest = f64::INFINITY;
    let mut lo = Vector::from_element(n, f64::INFINITY);
    let mut hi = Vector::from_element(n, f64::NEG_INFINITY);
    for _ in 0..total {
        let inputs: Vec<Vector> = idx.iter().map(|&i| sorted[i].clone()).collect();
        let states = program.rollout(xhat, &inputs);
        let end = states.last().expect("non-empty");
        let (ok, res) = terminal_ok(program, end, target);
        nearest = nearest.min(res);
        lo = lo.inf(end);
        hi = hi.sup(end);
        if ok {
            let value = program.path_cost(&states);
            match &best {
                None => best = Some((value, idx.clone(), states)),
                Some((bv, _, bstates)) => {
                    if value < *bv {
                        best = Some((value, idx.clone(), states));
                        multiple = false;
                    } else if (value - bv).abs() <= 1e-12 * (1.0 + bv.abs())
                        && states.iter().zip(bstates).any(|(p, q)| (p - q).amax() > 0.0)
                    {
                        multiple = true;
                    }
                }
            }
        }
        // Odometer with the last input varying fastest: lexicographic order.
        for pos in (0..horizon).rev() {
            idx[pos] += 1;
            if idx[pos] < sorted.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
    let Some((value, best_idx, states)) = best else {
        return Err(Error::Infeasible(format!(
            "target {:?} not reachable in {horizon} steps from {:?}: {total} sequences tried, terminal states span [{:?}, {:?}], nearest miss {nearest:e}",
            target.as_slice(),
            xhat.as_slice(),
            lo.as_slice(),
            hi.as_slice()
        )));
    };
    let inputs: Vec<Vector> = best_idx.iter().map(|&i| sorted[i].clone()).collect();
    let terminal_residual = (states.last().expect("non-empty") - target).amax();
    Ok(TrackerSolution {
        u0: inputs[0].clone(),
        states,
        inputs,
        value,
        multiple,
        terminal_residual,
    })
}

fn flatten(inputs: &[Vector]) -> Vector {
    let len = inputs.iter().map(|u| u.len()).sum();
    Vector::from_iterator(len, inputs.iter().flat_map(|u| u.iter().copied()))
}

struct Shooter<'a> {
    program: &'a TrackerProgram,
    xhat: &'a Vector,
    target: &'a Vector,
    lower: &'a Vector,
    upper: &'a Vector,
    m: usize,
}

impl Shooter<'_> {
    fn inputs(&self, w: &Vector) -> Vec<Vector> {
        (0..self.program.horizon)
            .map(|i| {
                Vector::from_fn(self.m, |j, _| w[i * self.m + j].clamp(self.lower[j], self.upper[j]))
            })
            .collect()
    }

    fn states(&self, w: &Vector) -> Vec<Vector> {
        self.program.rollout(self.xhat, &self.inputs(w))
    }

    fn terminal(&self, w: &Vector) -> Vector {
        self.states(w).last().expect("non-empty") - self.target
    }

    fn stage_residuals(&self, states: &[Vector]) -> Option<Vec<Vector>> {
        states
            .windows(2)
            .map(|s| self.program.cost.residual(&s[1], &self.program.system.reference_map(&s[0])))
            .collect()
    }

    /// Minimize `V + λᵀc + (μ/2)‖c‖²` from `start`.
    fn inner(&self, start: &Vector, lambda: &Vector, mu: f64) -> Vector {
        let objective = |w: &Vector| {
            let states = self.states(w);
            let c = states.last().expect("non-empty") - self.target;
            self.program.path_cost(&states) + lambda.dot(&c) + 0.5 * mu * c.norm_squared()
        };
        // (μ/2)‖c + λ/μ‖² differs from the penalty terms by a constant.
        let residual = |w: &Vector| {
            let states = self.states(w);
            let c = states.last().expect("non-empty") - self.target;
            let mut parts = self.stage_residuals(&states).expect("residual form checked");
            parts.push((c + lambda / mu) * (0.5 * mu).sqrt());
            flatten(&parts)
        };
        let problem = Problem {
            cost: &objective,
            residual: if self.program.cost.has_residual_form() { Some(&residual) } else { None },
        };
        let minimizer = Minimizer {
            tol: 1e-12,
            max_iter: 200,
            half_width: 1.0,
            ..Minimizer::default()
        };
        minimizer.descend(&problem, start).point
    }

    /// Minimum-norm Newton corrections onto the terminal constraint.
    fn project(&self, mut w: Vector) -> Vector {
        let tiny = 1e-14 * (1.0 + self.target.amax());
        for _ in 0..30 {
            let c = self.terminal(&w);
            if c.amax() <= tiny {
                break;
            }
            let mut jac = Matrix::zeros(c.len(), w.len());
            for j in 0..w.len() {
                let h = 1e-6 * (1.0 + w[j].abs());
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                jac.set_column(j, &((self.terminal(&wp) - self.terminal(&wm)) / (2.0 * h)));
            }
            let step = linalg::lstsq(&jac, &(-&c));
            let next = &w + &step;
            if self.terminal(&next).amax() >= c.amax() {
                break;
            }
            w = next;
        }
        w
    }

    fn solve(&self, start: Vector, rounds: usize, initial_penalty: f64) -> Vector {
        let mut w = start;
        let mut lambda = Vector::zeros(self.target.len());
        let mut mu = initial_penalty;
        for _ in 0..rounds {
            w = self.inner(&w, &lambda, mu);
            lambda += self.terminal(&w) * mu;
            mu *= 10.0;
        }
        self.project(w)
    }
}

#[allow(clippy::too_many_arguments)]
fn shooting(
    program: &TrackerProgram,
    xhat: &Vector,
    target: &Vector,
    lower: &Vector,
    upper: &Vector,
    rounds: usize,
    initial_penalty: f64,
    detect_multiplicity: bool,
    warm: Option<&[Vector]>,
) -> Result<TrackerSolution> {
    let m = lower.len();
    let shooter = Shooter {
        program,
        xhat,
        target,
        lower,
        upper,
        m,
    };
    let nominal = program.system.input_set().nominal();
    let start = match warm {
        Some(w) if w.len() == program.horizon && w.iter().all(|u| u.len() == m) => flatten(w),
        _ => flatten(&vec![nominal; program.horizon]),
    };
    let finish = |w: &Vector| {
        let inputs = shooter.inputs(w);
        let states = program.rollout(xhat, &inputs);
        let value = program.path_cost(&states);
        (inputs, states, value)
    };
    let w1 = shooter.solve(start.clone(), rounds, initial_penalty);
    let (inputs, states, value) = finish(&w1);
    let (ok, terminal_residual) = terminal_ok(program, states.last().expect("non-empty"), target);
    let mut best = (inputs, states, value, ok, terminal_residual);
    let mut multiple = false;
    if detect_multiplicity {
        let shifted = Vector::from_fn(start.len(), |i, _| start[i] + 0.5 * (1.0 + start[i].abs()) * if i % 2 == 0 { 1.0 } else { -1.0 });
        let w2 = shooter.solve(shifted, rounds, initial_penalty);
        let (inputs2, states2, value2) = finish(&w2);
        let (ok2, res2) = terminal_ok(program, states2.last().expect("non-empty"), target);
        if ok && ok2 {
            let close = (value2 - best.2).abs() <= 1e-8 * (1.0 + best.2.abs());
            let apart = (flatten(&inputs2) - flatten(&best.0)).amax() > 1e-4 * (1.0 + flatten(&best.0).amax());
            multiple = close && apart;
        }
        if ok2 && (!ok || value2 < best.2 - 1e-12 * (1.0 + best.2.abs())) {
            best = (inputs2, states2, value2, ok2, res2);
        }
    }
    let (inputs, states, value, ok, terminal_residual) = best;
    if !ok {
        return Err(Error::Infeasible(format!(
            "terminal residual {terminal_residual:e} exceeds {:e} after {rounds} penalty rounds",
            program.terminal_tol
        )));
    }
    Ok(TrackerSolution {
        u0: inputs[0].clone(),
        states,
        inputs,
        value,
        multiple,
        terminal_residual,
    })
}

/// Run the tracker; records `k = 0..=steps` with `cost = V(x̂_k, x_k)`,
/// the applied input, the terminal residual and, for every step but the
/// last, the decrease pair `(V(x̂⁺, x⁺), V(x̂, x) − ℓ(φ₁, f x̂))`.
pub fn run_nl_tracker(program: &TrackerProgram, xhat0: &Vector, x0: &Vector, steps: usize) -> Result<Vec<TraceRecord>> {
    check_inputs(program, xhat0, x0)?;
    let mut records: Vec<TraceRecord> = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut xhat = xhat0.clone();
    let mut warm: Option<Vec<Vector>> = None;
    let mut pending: Option<f64> = None;
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&xhat) {
            return Err(Error::Divergence { step: k });
        }
        let sol = tracker_solve_warm(program, &xhat, &x, warm.as_deref()).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!("step {k}: {msg}")),
            other => other,
        })?;
        if let (Some(rhs), Some(prev)) = (pending, records.last_mut()) {
            prev.lyap = Some((sol.value, rhs));
        }
        let step_cost = program.cost.eval(&sol.states[1], &program.system.reference_map(&xhat));
        pending = Some(sol.value - step_cost);
        let mut rec = TraceRecord::new(k, x.clone(), xhat.clone());
        rec.cost = Some(sol.value);
        rec.u = Some(sol.u0.clone());
        rec.feasible = Some(true);
        rec.identity_residual = Some(sol.terminal_residual);
        records.push(rec);
        let mut shifted = sol.inputs[1..].to_vec();
        shifted.push(program.system.input_set().nominal());
        warm = Some(shifted);
        xhat = sol.states[1].clone();
        x = program.system.reference_map(&x);
    }
    Ok(records)
}
