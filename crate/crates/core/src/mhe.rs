//! Optimal moving-horizon observer for linear systems.
//!
//! The observer keeps an internal state `z` that estimates the state `N−1`
//! steps in the past. At every step it picks
//!
//! ```text
//! η = argmin_ξ ‖CA^{N−1}ξ − y‖²_R + Σ_{i=0}^{N−2} ‖CA^i ξ − CA^i z‖²_R
//! ```
//!
//! and updates `z⁺ = Aη`, `x̂ = A^{N−1} z`. With the Gram-type matrices
//! `Q = Σ_{i=0}^{N−2} (CA^i)ᵀR(CA^i)` and `H = (CA^{N−1})ᵀR(CA^{N−1})` the
//! minimizer has a closed form and the observer collapses to the classic
//! structure `x̂⁺ = Ax̂ + L(y − Cx̂)`.
//!
//! Besides synthesis the module exposes the algebraic identities that tie
//! the optimal cost to the Lyapunov-like decrease of `(z − x̃)ᵀQ(z − x̃)`,
//! where `x̃` is the plant state `N−1` steps ago, so simulations can check
//! them at runtime.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SpdSolver, Vector};
use crate::system::{is_full_column_rank, observability_stack, TraceRecord, DEFAULT_RANK_TOL};

/// `Q`, `H` and a factorization of `Q + H` for one `(A, C, N, R)`.
#[derive(Debug, Clone)]
pub struct HorizonWeights {
    pub horizon: usize,
    pub r: Matrix,
    pub q: Matrix,
    pub h: Matrix,
    stack: Matrix,
    qh: SpdSolver,
}

impl HorizonWeights {
    pub fn q_plus_h(&self) -> Matrix {
        &self.q + &self.h
    }

    /// `(Q+H)⁻¹ M`.
    pub fn solve(&self, m: &Matrix) -> Matrix {
        self.qh.solve(m)
    }

    pub fn solve_vec(&self, v: &Vector) -> Vector {
        self.qh.solve_vec(v)
    }
}

fn check_output_weight(c: &Matrix, r: &Matrix) -> Result<()> {
    if r.nrows() != c.nrows() || r.ncols() != c.nrows() {
        return Err(Error::dim(
            "R",
            format!("expected {p}x{p}, got {}x{}", r.nrows(), r.ncols(), p = c.nrows()),
        ));
    }
    linalg::check_spd(r, "R")
}

pub fn horizon_weights(a: &Matrix, c: &Matrix, horizon: usize, r: &Matrix) -> Result<HorizonWeights> {
    let w = observability_stack(a, c, horizon)?;
    check_output_weight(c, r)?;
    if !is_full_column_rank(&w, DEFAULT_RANK_TOL)? {
        return Err(Error::RankDeficient(format!(
            "observability stack with N = {horizon} is not full column rank"
        )));
    }
    let (n, p) = (a.nrows(), c.nrows());
    let mut q = Matrix::zeros(n, n);
    for i in 0..horizon - 1 {
        let block = w.rows(i * p, p);
        q += block.transpose() * r * block;
    }
    let last = w.rows((horizon - 1) * p, p);
    let h = last.transpose() * r * last;
    let qh = SpdSolver::new(&(&q + &h), "Q + H")?;
    Ok(HorizonWeights {
        horizon,
        r: r.clone(),
        q,
        h,
        stack: w,
        qh,
    })
}

/// `η = (Q+H)⁻¹A^{(N−1)T}CᵀRy + (Q+H)⁻¹Qz`.
pub fn optimal_eta(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, y: &Vector) -> Result<Vector> {
    if z.len() != a.nrows() || y.len() != c.nrows() {
        return Err(Error::dim("optimal_eta", "z or y has the wrong length"));
    }
    let last = c * linalg::mat_pow(a, weights.horizon - 1);
    let rhs = last.transpose() * (&weights.r * y) + &weights.q * z;
    Ok(weights.solve_vec(&rhs))
}

/// Observer gain with the spectral radius of `A − LC`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGainL {
    pub l: Matrix,
    pub spectral_radius: f64,
}

/// `L = Aᴺ(Q+H)⁻¹A^{(N−1)T}CᵀR`.
pub fn observer_gain_l(a: &Matrix, c: &Matrix, horizon: usize, r: &Matrix) -> Result<ObserverGainL> {
    let weights = horizon_weights(a, c, horizon, r)?;
    Ok(gain_from_weights(&weights, a, c))
}

pub(crate) fn gain_from_weights(weights: &HorizonWeights, a: &Matrix, c: &Matrix) -> ObserverGainL {
    let tail = linalg::weighted_stack_solve(&weights.stack, &weights.r).unwrap_or_else(|| {
        let last = c * linalg::mat_pow(a, weights.horizon - 1);
        weights.solve(&(last.transpose() * &weights.r))
    });
    let l = linalg::mat_pow(a, weights.horizon) * tail;
    let spectral_radius = linalg::spectral_radius(&(a - &l * c));
    ObserverGainL { l, spectral_radius }
}

/// `‖CA^{N−1}ξ − y‖²_R + Σ_{i=0}^{N−2}‖CA^iξ − CA^iz‖²_R`.
pub fn cost_j(a: &Matrix, c: &Matrix, r: &Matrix, horizon: usize, xi: &Vector, z: &Vector, y: &Vector) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    if xi.len() != a.nrows() || z.len() != a.nrows() || y.len() != c.nrows() || c.ncols() != a.nrows() {
        return Err(Error::dim("cost_j", "inconsistent vector or matrix sizes"));
    }
    if r.nrows() != c.nrows() || r.ncols() != c.nrows() {
        return Err(Error::dim("R", "must be p×p"));
    }
    let mut block = c.clone();
    let mut total = 0.0;
    for _ in 0..horizon - 1 {
        let d = &block * (xi - z);
        total += linalg::quad_form(r, &d);
        block = &block * a;
    }
    let d = &block * xi - y;
    Ok(total + linalg::quad_form(r, &d))
}

fn cost_from_weights(weights: &HorizonWeights, a: &Matrix, c: &Matrix, xi: &Vector, z: &Vector, y: &Vector) -> f64 {
    cost_j(a, c, &weights.r, weights.horizon, xi, z, y).expect("weights validated dimensions")
}

/// Terms of the identity `J(η,z,y) + (η−x̃)ᵀ(Q+H)(η−x̃) = (z−x̃)ᵀQ(z−x̃)`
/// evaluated with `y = CA^{N−1}x̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AramisTerms {
    pub cost: f64,
    pub eta_term: f64,
    pub z_term: f64,
}

impl AramisTerms {
    pub fn residual(&self) -> f64 {
        self.cost + self.eta_term - self.z_term
    }

    pub fn scale(&self) -> f64 {
        self.cost.abs() + self.eta_term.abs() + self.z_term.abs()
    }
}

pub fn aramis_terms(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, tx: &Vector) -> Result<AramisTerms> {
    let y = c * linalg::mat_pow(a, weights.horizon - 1) * tx;
    let eta = optimal_eta(weights, a, c, z, &y)?;
    let de = &eta - tx;
    let dz = z - tx;
    Ok(AramisTerms {
        cost: cost_from_weights(weights, a, c, &eta, z, &y),
        eta_term: linalg::quad_form(&weights.q_plus_h(), &de),
        z_term: linalg::quad_form(&weights.q, &dz),
    })
}

/// Residual of the cost/Lyapunov identity; zero up to roundoff.
pub fn aramis_residual(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, tx: &Vector) -> Result<f64> {
    Ok(aramis_terms(weights, a, c, z, tx)?.residual())
}

/// Max-abs entry of `Q(Q+H)⁻¹H − H(Q+H)⁻¹Q`.
pub fn hardy_residual(weights: &HorizonWeights) -> f64 {
    let left = &weights.q * weights.solve(&weights.h);
    let right = &weights.h * weights.solve(&weights.q);
    linalg::max_abs(&(left - right))
}

/// `J(η,z,y) − (z−x̃)ᵀH(Q+H)⁻¹Q(z−x̃)` with `y = CA^{N−1}x̃`.
pub fn atos_residual(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, tx: &Vector) -> Result<f64> {
    let terms = aramis_terms(weights, a, c, z, tx)?;
    let dz = z - tx;
    let form = (&weights.h * weights.solve_vec(&(&weights.q * &dz))).dot(&dz);
    Ok(terms.cost - form)
}

/// `(η−x̃)ᵀ(Q+H)(η−x̃) − (z−x̃)ᵀQ(Q+H)⁻¹Q(z−x̃)`.
pub fn portos_residual(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, tx: &Vector) -> Result<f64> {
    let terms = aramis_terms(weights, a, c, z, tx)?;
    let qdz = &weights.q * (z - tx);
    Ok(terms.eta_term - qdz.dot(&weights.solve_vec(&qdz)))
}

/// `(lhs, rhs)` of `(z⁺−x̃⁺)ᵀQ(z⁺−x̃⁺) ≤ (z−x̃)ᵀQ(z−x̃) − J(η,z,y)`,
/// where `z⁺ = Aη` and `x̃⁺ = Ax̃`.
pub fn lyap_decrement(weights: &HorizonWeights, a: &Matrix, c: &Matrix, z: &Vector, tx: &Vector) -> Result<(f64, f64)> {
    let y = c * linalg::mat_pow(a, weights.horizon - 1) * tx;
    let eta = optimal_eta(weights, a, c, z, &y)?;
    let next_err = a * (&eta - tx);
    let lhs = linalg::quad_form(&weights.q, &next_err);
    let rhs = linalg::quad_form(&weights.q, &(z - tx)) - cost_from_weights(weights, a, c, &eta, z, &y);
    Ok((lhs, rhs))
}

/// Largest `δ` such that `J_k ≤ δ` from `k₁` on guarantees `‖x̂_k − x_k‖ ≤ ε`
/// from `k₁ + N` on:
///
/// `δ = 6 λmin(WᵀW) λmin(R) ε² / ((2N³+3N²+N) λmax(A^{NT}Aᴺ))`.
pub fn claim_delta(horizon: usize, w: &Matrix, a: &Matrix, r: &Matrix, eps: f64) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    if !(eps >= 0.0) {
        return Err(Error::param("eps", "must be nonnegative"));
    }
    let (wtw_min, _) = linalg::sym_eig_extremes(&(w.transpose() * w));
    let (r_min, _) = linalg::sym_eig_extremes(r);
    let an = linalg::mat_pow(a, horizon);
    let (_, an_max) = linalg::sym_eig_extremes(&(an.transpose() * &an));
    let nf = horizon as f64;
    let coeff = 2.0 * nf.powi(3) + 3.0 * nf.powi(2) + nf;
    Ok(6.0 * wtw_min * r_min * eps * eps / (coeff * an_max))
}

/// Simulate the optimal observer against `x⁺ = Ax`, `y = Cx`.
///
/// Records `k = 0..=steps`. From `k = N−1` on every record carries the
/// delayed plant state `x̃_k = x_{k−N+1}`, the Lyapunov pair and the
/// residual of the cost identity.
pub fn run_linear_mhe(
    a: &Matrix,
    c: &Matrix,
    horizon: usize,
    r: &Matrix,
    z0: &Vector,
    x0: &Vector,
    steps: usize,
) -> Result<Vec<TraceRecord>> {
    let weights = horizon_weights(a, c, horizon, r)?;
    run_with_weights(&weights, a, c, z0, x0, steps)
}

pub(crate) fn run_with_weights(
    weights: &HorizonWeights,
    a: &Matrix,
    c: &Matrix,
    z0: &Vector,
    x0: &Vector,
    steps: usize,
) -> Result<Vec<TraceRecord>> {
    let n = a.nrows();
    if z0.len() != n || x0.len() != n {
        return Err(Error::dim("initial state", format!("expected {n} entries")));
    }
    let horizon = weights.horizon;
    let lift = linalg::mat_pow(a, horizon - 1);
    let mut history: Vec<Vector> = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut z = z0.clone();
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&z) {
            return Err(Error::Divergence { step: k });
        }
        history.push(x.clone());
        let y = c * &x;
        let eta = optimal_eta(weights, a, c, &z, &y)?;
        let mut rec = TraceRecord::new(k, x.clone(), &lift * &z);
        rec.cost = Some(cost_from_weights(weights, a, c, &eta, &z, &y));
        if k + 1 >= horizon {
            let tx = history[k + 1 - horizon].clone();
            rec.lyap = Some(lyap_decrement(weights, a, c, &z, &tx)?);
            rec.identity_residual = Some(aramis_residual(weights, a, c, &z, &tx)?);
            rec.delayed_state = Some(tx);
        }
        rec.z = Some(z.clone());
        rec.y = Some(y);
        z = a * &eta;
        rec.eta = Some(eta);
        records.push(rec);
        x = a * &x;
    }
    Ok(records)
}

/// Simulate `x̂⁺ = Ax̂ + L(y − Cx̂)`; records `k = 0..=steps`.
pub fn run_gain_observer(a: &Matrix, c: &Matrix, l: &Matrix, xhat0: &Vector, x0: &Vector, steps: usize) -> Result<Vec<TraceRecord>> {
    let n = a.nrows();
    if xhat0.len() != n || x0.len() != n || l.nrows() != n || l.ncols() != c.nrows() {
        return Err(Error::dim("gain observer", "inconsistent sizes"));
    }
    let mut records = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut xhat = xhat0.clone();
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&xhat) {
            return Err(Error::Divergence { step: k });
        }
        let y = c * &x;
        let next = a * &xhat + l * (&y - c * &xhat);
        let mut rec = TraceRecord::new(k, x.clone(), xhat.clone());
        rec.y = Some(y);
        records.push(rec);
        xhat = next;
        x = a * &x;
    }
    Ok(records)
}
