//! Finite-horizon minimum-energy tracking for linear systems.
//!
//! A copy `x̂⁺ = Ax̂ + Bu` of the plant `x⁺ = Ax` is steered so that after
//! `N` steps it lands on the plant's future state `AᴺX`, using the input
//! sequence of least `R⁻¹`-weighted energy. Only the first input is applied
//! and the program is solved again at the next step. The resulting state
//! feedback is the transpose of the moving-horizon observer gain for the
//! dual pair `(Aᵀ, Bᵀ)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SpdSolver, Vector};
use crate::mhe;
use crate::system::{controllability_stack, is_full_row_rank, TraceRecord, DEFAULT_RANK_TOL};

/// `G = Σ_{i=0}^{N−1} AⁱBRBᵀA^{iT}` with its factorization.
#[derive(Debug, Clone)]
pub struct WeightedGramian {
    pub g: Matrix,
    pub horizon: usize,
    stack: Matrix,
    solver: SpdSolver,
}

impl WeightedGramian {
    /// `G⁻¹ M`.
    pub fn solve(&self, m: &Matrix) -> Matrix {
        self.solver.solve(m)
    }

    pub fn solve_vec(&self, v: &Vector) -> Vector {
        self.solver.solve_vec(v)
    }
}

fn check_input_weight(b: &Matrix, r: &Matrix) -> Result<()> {
    if r.nrows() != b.ncols() || r.ncols() != b.ncols() {
        return Err(Error::dim(
            "R",
            format!("expected {m}x{m}, got {}x{}", r.nrows(), r.ncols(), m = b.ncols()),
        ));
    }
    linalg::check_spd(r, "R")
}

/// State weight `Q = B(BᵀB)⁻¹R⁻¹(BᵀB)⁻¹Bᵀ`. With it the stage cost
/// `(z⁺ − Az)ᵀQ(z⁺ − Az)` of a step `z⁺ = Az + Bu` equals `uᵀR⁻¹u`, which
/// makes the generic tracker reproduce the minimum-energy law.
pub fn tracking_weight(b: &Matrix, r: &Matrix) -> Result<Matrix> {
    check_input_weight(b, r)?;
    let btb = b.transpose() * b;
    let btb_inv = SpdSolver::new(&btb, "BᵀB")
        .map_err(|_| Error::RankDeficient("B is not full column rank".into()))?
        .inverse(b.ncols());
    let r_inv = SpdSolver::new(r, "R")?.inverse(r.nrows());
    Ok(linalg::symmetrize(&(b * &btb_inv * r_inv * &btb_inv * b.transpose())))
}

pub fn weighted_gramian(a: &Matrix, b: &Matrix, horizon: usize, r: &Matrix) -> Result<WeightedGramian> {
    let stack = controllability_stack(a, b, horizon)?;
    check_input_weight(b, r)?;
    if !is_full_row_rank(&stack, DEFAULT_RANK_TOL)? {
        return Err(Error::RankDeficient(format!(
            "controllability stack with N = {horizon} is not full row rank"
        )));
    }
    let (n, m) = (a.nrows(), b.ncols());
    let mut g = Matrix::zeros(n, n);
    for i in 0..horizon {
        let block = stack.columns(i * m, m);
        g += block * r * block.transpose();
    }
    let solver = SpdSolver::new(&g, "G")?;
    Ok(WeightedGramian { g, horizon, stack, solver })
}

/// `K = RBᵀA^{(N−1)T}G⁻¹Aᴺ`.
pub fn kleinman_gain(a: &Matrix, b: &Matrix, horizon: usize, r: &Matrix) -> Result<Matrix> {
    let gram = weighted_gramian(a, b, horizon, r)?;
    Ok(gain_from_gramian(&gram, a, b, r))
}

fn gain_from_gramian(gram: &WeightedGramian, a: &Matrix, b: &Matrix, r: &Matrix) -> Matrix {
    let tail = linalg::weighted_stack_solve(&gram.stack.transpose(), r).unwrap_or_else(|| {
        let lead = linalg::mat_pow(a, gram.horizon - 1) * b;
        gram.solve(&(lead * r))
    });
    tail.transpose() * linalg::mat_pow(a, gram.horizon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinEnergySolution {
    /// `v₀ … v_{N−1}`.
    pub inputs: Vec<Vector>,
    /// `z₀ … z_N`.
    pub states: Vec<Vector>,
    /// `Σ ‖v_i‖²_{R⁻¹}`.
    pub cost: f64,
    pub gain_k: Matrix,
}

impl MinEnergySolution {
    /// `‖z_N − target‖∞`.
    pub fn terminal_residual(&self, target: &Vector) -> f64 {
        (self.states.last().expect("at least one state") - target).amax()
    }
}

fn check_states(a: &Matrix, xhat: &Vector, x: &Vector) -> Result<()> {
    if xhat.len() != a.nrows() || x.len() != a.nrows() {
        return Err(Error::dim("state", format!("expected {} entries", a.nrows())));
    }
    if !linalg::vec_finite(xhat) || !linalg::vec_finite(x) {
        return Err(Error::param("state", "contains non-finite entries"));
    }
    Ok(())
}

/// Least-energy input sequence from `x̂` to `Aᴺx` in `N` steps:
/// `v_i = RBᵀA^{(N−1−i)T}G⁻¹Aᴺ(x − x̂)`.
pub fn solve_min_energy(a: &Matrix, b: &Matrix, horizon: usize, r: &Matrix, xhat: &Vector, x: &Vector) -> Result<MinEnergySolution> {
    check_states(a, xhat, x)?;
    let gram = weighted_gramian(a, b, horizon, r)?;
    let gain_k = gain_from_gramian(&gram, a, b, r);
    let pows = linalg::powers(a, horizon);
    let lam = gram.solve_vec(&(&pows[horizon] * (x - xhat)));
    let r_solver = SpdSolver::new(r, "R")?;
    let mut inputs = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(xhat.clone());
    let mut cost = 0.0;
    for i in 0..horizon {
        let v = r * (&pows[horizon - 1 - i] * b).transpose() * &lam;
        cost += v.dot(&r_solver.solve_vec(&v));
        let next = a * &states[i] + b * &v;
        inputs.push(v);
        states.push(next);
    }
    Ok(MinEnergySolution {
        inputs,
        states,
        cost,
        gain_k,
    })
}

/// `V(x̂, x) = (x̂−x)ᵀA^{NT}G⁻¹Aᴺ(x̂−x)`.
pub fn optimal_cost_v(a: &Matrix, b: &Matrix, horizon: usize, r: &Matrix, xhat: &Vector, x: &Vector) -> Result<f64> {
    check_states(a, xhat, x)?;
    let gram = weighted_gramian(a, b, horizon, r)?;
    Ok(cost_from_gramian(&gram, a, xhat, x))
}

fn cost_from_gramian(gram: &WeightedGramian, a: &Matrix, xhat: &Vector, x: &Vector) -> f64 {
    let d = linalg::mat_pow(a, gram.horizon) * (xhat - x);
    d.dot(&gram.solve_vec(&d))
}

/// `V` is only known to be positive definite for nonsingular `A`.
pub fn definiteness_warning(a: &Matrix) -> Option<String> {
    let sv = linalg::singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin <= DEFAULT_RANK_TOL * smax {
        Some("A is singular: the optimal cost is only positive semidefinite".to_string())
    } else {
        None
    }
}

/// Apply `u = v₀(x̂, x) = K(x − x̂)` every step; records `k = 0..=steps`
/// with `cost = V(x̂_k, x_k)` and the applied input.
pub fn run_tracker_linear(
    a: &Matrix,
    b: &Matrix,
    horizon: usize,
    r: &Matrix,
    xhat0: &Vector,
    x0: &Vector,
    steps: usize,
) -> Result<Vec<TraceRecord>> {
    check_states(a, xhat0, x0)?;
    let gram = weighted_gramian(a, b, horizon, r)?;
    let k_gain = gain_from_gramian(&gram, a, b, r);
    let mut records = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut xhat = xhat0.clone();
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&xhat) {
            return Err(Error::Divergence { step: k });
        }
        let u = &k_gain * (&x - &xhat);
        let mut rec = TraceRecord::new(k, x.clone(), xhat.clone());
        rec.cost = Some(cost_from_gramian(&gram, a, &xhat, &x));
        xhat = a * &xhat + b * &u;
        x = a * &x;
        rec.u = Some(u);
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `(A, B)` to the observer problem for `(Aᵀ, Bᵀ)`.
    ControlToEstimation,
    /// `(A, C)` to the tracker problem for `(Aᵀ, Cᵀ)`.
    EstimationToControl,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::ControlToEstimation => Direction::EstimationToControl,
            Direction::EstimationToControl => Direction::ControlToEstimation,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control-to-estimation" | "control->estimation" => Ok(Direction::ControlToEstimation),
            "estimation-to-control" | "estimation->control" => Ok(Direction::EstimationToControl),
            other => Err(Error::param(
                "direction",
                format!("expected control-to-estimation or estimation-to-control, got `{other}`"),
            )),
        }
    }
}

/// Dual problem data and its synthesized gain.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGain {
    pub direction: Direction,
    /// `Aᵀ`.
    pub a: Matrix,
    /// `Bᵀ` (an output matrix) or `Cᵀ` (an input matrix).
    pub map: Matrix,
    /// Observer gain `L` or tracker gain `K` of the dual pair.
    pub gain: Matrix,
    pub spectral_radius: f64,
}

/// Transpose the pair and synthesize the gain on the other side.
///
/// Feeding the returned `(a, map)` back with the flipped direction recovers
/// the original pair and the gain of the original problem.
pub fn dualize(a: &Matrix, map: &Matrix, horizon: usize, r: &Matrix, direction: Direction) -> Result<DualGain> {
    let at = a.transpose();
    let mt = map.transpose();
    match direction {
        Direction::ControlToEstimation => {
            let g = mhe::observer_gain_l(&at, &mt, horizon, r)?;
            Ok(DualGain {
                direction,
                a: at,
                map: mt,
                gain: g.l,
                spectral_radius: g.spectral_radius,
            })
        }
        Direction::EstimationToControl => {
            let k = kleinman_gain(&at, &mt, horizon, r)?;
            let spectral_radius = linalg::spectral_radius(&(&at - &mt * &k));
            Ok(DualGain {
                direction,
                a: at,
                map: mt,
                gain: k,
                spectral_radius,
            })
        }
    }
}
