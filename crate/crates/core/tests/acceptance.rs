//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde_json::json;

use dual_horizon::deadbeat::{self, EquationStackSolver};
use dual_horizon::experiment::{config_from_value, run_experiment, Purpose};
use dual_horizon::min_energy::{self, Direction};
use dual_horizon::nonlinear::{
    run_nl_observer, run_nl_tracker, tracker_solve, Minimizer, StageCost, TrackerProgram,
};
use dual_horizon::random::{random_controllable, random_observable, random_spd, seeded_rng, uniform_vector, DEFAULT_MARGIN};
use dual_horizon::registry;
use dual_horizon::system::{FnControlled, InputSet, LinearSystem, LinearTracking};
use dual_horizon::{linalg, mhe, Error, Matrix, Vector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !{ $cond } {
            return Err(format!($($msg)+));
        }
    };
}

mod oracle {
    use super::*;

    pub fn pow(a: &Matrix, k: usize) -> Matrix {
        let mut p = Matrix::identity(a.nrows(), a.ncols());
        for _ in 0..k {
            p = &p * a;
        }
        p
    }

    /// Upper triangular `U` with `UᵀU = R`.
    pub fn chol_upper(r: &Matrix) -> Matrix {
        r.clone().cholesky().expect("SPD").l().transpose()
    }

    pub fn pinv_solve(m: &Matrix, b: &Vector) -> Vector {
        m.clone().svd(true, true).solve(b, 1e-14).expect("svd solve")
    }

    /// Weighted least squares for the window cost, solved directly.
    pub fn eta(a: &Matrix, c: &Matrix, r: &Matrix, n_h: usize, z: &Vector, y: &Vector) -> Vector {
        let (p, n) = (c.nrows(), a.nrows());
        let u = chol_upper(r);
        let mut m = Matrix::zeros(n_h * p, n);
        let mut b = Vector::zeros(n_h * p);
        for i in 0..n_h {
            let row = &u * c * pow(a, i);
            m.view_mut((i * p, 0), (p, n)).copy_from(&row);
            let target = if i + 1 == n_h { &u * y } else { &row * z };
            b.rows_mut(i * p, p).copy_from(&target);
        }
        pinv_solve(&m, &b)
    }

    pub fn cost_j(a: &Matrix, c: &Matrix, r: &Matrix, n_h: usize, xi: &Vector, z: &Vector, y: &Vector) -> f64 {
        let mut j = 0.0;
        for i in 0..n_h.saturating_sub(1) {
            let e = c * pow(a, i) * (xi - z);
            j += (e.transpose() * r * &e)[0];
        }
        let e = c * pow(a, n_h - 1) * xi - y;
        j + (e.transpose() * r * &e)[0]
    }

    pub fn q_and_h(a: &Matrix, c: &Matrix, r: &Matrix, n_h: usize) -> (Matrix, Matrix) {
        let n = a.nrows();
        let mut q = Matrix::zeros(n, n);
        for i in 0..n_h - 1 {
            let t = c * pow(a, i);
            q += t.transpose() * r * &t;
        }
        let t = c * pow(a, n_h - 1);
        (q, t.transpose() * r * &t)
    }

    /// `ρ(M) < 1` certified by `‖M^(2^j)‖_F < 1` for some `j ≤ 14`.
    pub fn certifies_stable(m: &Matrix) -> bool {
        let mut p = m.clone();
        for _ in 0..=14 {
            if p.norm() < 1.0 {
                return true;
            }
            p = &p * &p;
        }
        false
    }

    /// Minimum of `Σ vᵢᵀR⁻¹vᵢ` subject to the terminal equality, via the
    /// KKT system of the stacked QP.
    pub fn min_energy_qp(a: &Matrix, b: &Matrix, r: &Matrix, n_h: usize, xhat: &Vector, x: &Vector) -> (f64, Vec<Vector>) {
        let (n, m) = (a.nrows(), b.ncols());
        let nv = n_h * m;
        let r_inv = r.clone().try_inverse().expect("R invertible");
        let mut s = Matrix::zeros(n, nv);
        for i in 0..n_h {
            s.view_mut((0, i * m), (n, m)).copy_from(&(pow(a, n_h - 1 - i) * b));
        }
        let d = pow(a, n_h) * (x - xhat);
        let mut kkt = Matrix::zeros(nv + n, nv + n);
        for i in 0..n_h {
            kkt.view_mut((i * m, i * m), (m, m)).copy_from(&(&r_inv * 2.0));
        }
        kkt.view_mut((nv, 0), (n, nv)).copy_from(&s);
        kkt.view_mut((0, nv), (nv, n)).copy_from(&s.transpose());
        let mut rhs = Vector::zeros(nv + n);
        rhs.rows_mut(nv, n).copy_from(&d);
        let sol = kkt.lu().solve(&rhs).expect("KKT nonsingular");
        let inputs: Vec<Vector> = (0..n_h).map(|i| sol.rows(i * m, m).into_owned()).collect();
        let cost = inputs.iter().map(|v| (v.transpose() * &r_inv * v)[0]).sum();
        (cost, inputs)
    }
}

/// Random observable pair with `A` rescaled to spectral radius at most 1,
/// so long simulations stay in a range where differences of states are
/// not swamped by roundoff.
fn bounded_observable(rng: &mut impl Rng, n: usize, p: usize) -> (Matrix, Matrix) {
    let (a, c) = random_observable(rng, n, p, DEFAULT_MARGIN).unwrap();
    let rho = linalg::spectral_radius(&a);
    (a / rho.max(1.0), c)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

// 1
fn deadbeat_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let mut worst: f64 = 0.0;
    for run in 0..50 {
        let n = 2 + run % 3;
        let (a, c) = random_observable(&mut rng, n, 1, DEFAULT_MARGIN).unwrap();
        let sys = LinearSystem::observed(a.clone(), c.clone()).unwrap();
        let z0 = uniform_vector(&mut rng, n, 5.0);
        let x0 = uniform_vector(&mut rng, n, 1.0);
        let steps = 4 * n;
        let recs = deadbeat::run_deadbeat_observer(&sys, n, &z0, &x0, steps, &EquationStackSolver::exact_linear())
            .map_err(|e| format!("run {run}: {e}"))?;
        // The plant is simulated here, independently of the observer run.
        let mut x = x0.clone();
        for (k, rec) in recs.iter().enumerate() {
            ensure!((&rec.x - &x).amax() == 0.0, "run {run}: plant state mismatch at k={k}");
            if k >= n {
                let err = (&rec.xhat - &x).norm() / (1.0 + x.norm());
                worst = worst.max(err);
                ensure!(err <= 1e-8, "run {run}, n={n}, k={k}: relative error {err:e}");
            }
            x = &a * &x;
        }
        let gain = deadbeat::deadbeat_observer_gain(&a, &c).unwrap();
        let closed = &a - &gain.gain * &c;
        let nil = oracle::pow(&closed, n).amax() / (1.0 + closed.amax()).powi(n as i32);
        ensure!(nil <= 1e-9, "run {run}: (A−LC)^n not zero ({nil:e})");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("50 systems, worst relative error {worst:.1e}, {secs:.2} s"))
}

// 2
fn observer_stability() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(202);
    let mut min_margin = f64::INFINITY;
    for sys in 0..100 {
        let n = 1 + sys % 4;
        let p = 1 + (sys / 4) % 2;
        let (a, c) = random_observable(&mut rng, n, p, DEFAULT_MARGIN).unwrap();
        let r = random_spd(&mut rng, p);
        for horizon in n..=n + 2 {
            let g = mhe::observer_gain_l(&a, &c, horizon, &r).map_err(|e| format!("system {sys}, N={horizon}: {e}"))?;
            let closed = &a - &g.l * &c;
            let rho = linalg::spectral_radius(&closed);
            ensure!(rho < 1.0, "system {sys}, N={horizon}: spectral radius {rho}");
            ensure!(oracle::certifies_stable(&closed), "system {sys}, N={horizon}: no norm certificate for ρ < 1");
            ensure!((rho - g.spectral_radius).abs() <= 1e-12, "reported radius disagrees");
            min_margin = min_margin.min(1.0 - rho);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("300 gains, min margin 1 − ρ = {min_margin:.3e}, {secs:.2} s"))
}

// 3
fn horizon_identities() -> Outcome {
    let mut rng = seeded_rng(303);
    let (mut w_aramis, mut w_hardy, mut w_atos, mut w_oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = 1 + i % 4;
        let p = 1 + (i / 4) % 2;
        let horizon = n + (i / 8) % 3;
        let (a, c) = random_observable(&mut rng, n, p, DEFAULT_MARGIN).unwrap();
        let r = random_spd(&mut rng, p);
        let z = uniform_vector(&mut rng, n, 2.0);
        let tx = uniform_vector(&mut rng, n, 2.0);
        let w = mhe::horizon_weights(&a, &c, horizon, &r).unwrap();

        let terms = mhe::aramis_terms(&w, &a, &c, &z, &tx).unwrap();
        w_aramis = w_aramis.max(terms.residual().abs() / (1.0 + terms.scale()));

        let hardy = mhe::hardy_residual(&w) / (1.0 + linalg::max_abs(&w.q) + linalg::max_abs(&w.h));
        w_hardy = w_hardy.max(hardy);

        let atos = mhe::atos_residual(&w, &a, &c, &z, &tx).unwrap().abs() / (1.0 + terms.cost.abs());
        w_atos = w_atos.max(atos);

        // The same identity from independently built Q, H, η and J.
        let (q, h) = oracle::q_and_h(&a, &c, &r, horizon);
        let y = &c * oracle::pow(&a, horizon - 1) * &tx;
        let eta = oracle::eta(&a, &c, &r, horizon, &z, &y);
        let j = oracle::cost_j(&a, &c, &r, horizon, &eta, &z, &y);
        let de = &eta - &tx;
        let dz = &z - &tx;
        let lhs = j + (de.transpose() * (&q + &h) * &de)[0];
        let rhs = (dz.transpose() * &q * &dz)[0];
        w_oracle = w_oracle.max((lhs - rhs).abs() / (1.0 + lhs.abs() + rhs.abs()));
    }
    ensure!(w_aramis <= 1e-10, "cost identity residual {w_aramis:e}");
    ensure!(w_hardy <= 1e-12, "commutation identity residual {w_hardy:e}");
    ensure!(w_atos <= 1e-10, "closed-form cost residual {w_atos:e}");
    ensure!(w_oracle <= 1e-10, "oracle-built cost identity residual {w_oracle:e}");
    Ok(format!(
        "1000 instances: cost identity {w_aramis:.1e}, commutation {w_hardy:.1e}, closed-form cost {w_atos:.1e}, oracle {w_oracle:.1e}"
    ))
}

// 4
fn lyapunov_inequality() -> Outcome {
    let mut rng = seeded_rng(404);
    let mut worst = f64::NEG_INFINITY;
    for run in 0..100 {
        let n = 1 + run % 4;
        let p = 1 + (run / 4) % 2;
        let horizon = n + run % 3;
        let (a, c) = bounded_observable(&mut rng, n, p);
        let r = random_spd(&mut rng, p);
        let z0 = uniform_vector(&mut rng, n, 1.0);
        let x0 = uniform_vector(&mut rng, n, 1.0);
        let recs = mhe::run_linear_mhe(&a, &c, horizon, &r, &z0, &x0, 100).map_err(|e| format!("run {run}: {e}"))?;
        let mut checked = 0;
        for rec in &recs {
            if let Some((lhs, rhs)) = rec.lyap {
                worst = worst.max(lhs - rhs);
                ensure!(lhs <= rhs + 1e-12, "run {run}, k={}: {lhs:e} > {rhs:e} + 1e-12", rec.k);
                checked += 1;
            }
        }
        ensure!(checked > 100 - horizon, "run {run}: only {checked} steps carry the pair");
    }
    Ok(format!("100 runs × 100 steps, max lhs − rhs = {worst:.1e}"))
}

fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

// 5
fn duality() -> Outcome {
    let mut rng = seeded_rng(505);
    let (mut worst, mut worst_round) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let n = 1 + i % 4;
        let m = 1 + (i / 4) % 2;
        let horizon = n + (i / 8) % 3;
        let (a, b) = random_controllable(&mut rng, n, m, DEFAULT_MARGIN).unwrap();
        let r = random_spd(&mut rng, m);
        let k = min_energy::kleinman_gain(&a, &b, horizon, &r).unwrap();
        let l = mhe::observer_gain_l(&a.transpose(), &b.transpose(), horizon, &r).unwrap();
        worst = worst.max(inf_norm(&(&k - l.l.transpose())));

        let dual = min_energy::dualize(&a, &b, horizon, &r, Direction::ControlToEstimation).unwrap();
        let back = min_energy::dualize(&dual.a, &dual.map, horizon, &r, dual.direction.flip()).unwrap();
        let round = inf_norm(&(&back.a - &a)).max(inf_norm(&(&back.map - &b))).max(inf_norm(&(&back.gain - &k)));
        worst_round = worst_round.max(round);
    }
    ensure!(worst <= 1e-12, "‖K − Lᵀ‖∞ = {worst:e}");
    ensure!(worst_round <= 1e-12, "double dualization differs by {worst_round:e}");
    Ok(format!("200 instances, ‖K − Lᵀ‖∞ ≤ {worst:.1e}, round trip ≤ {worst_round:.1e}"))
}

// 6
fn minimum_energy() -> Outcome {
    let mut rng = seeded_rng(606);
    let (mut w_term, mut w_energy, mut w_law, mut w_qp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let n = 1 + i % 4;
        let m = 1 + (i / 4) % 2;
        let horizon = (n + (i / 8) % 3).min(6);
        let (a, b) = random_controllable(&mut rng, n, m, DEFAULT_MARGIN).unwrap();
        let r = random_spd(&mut rng, m);
        let xhat = uniform_vector(&mut rng, n, 2.0);
        let x = uniform_vector(&mut rng, n, 2.0);
        let sol = min_energy::solve_min_energy(&a, &b, horizon, &r, &xhat, &x).unwrap();

        // Roll the inputs out independently.
        let mut z = xhat.clone();
        for v in &sol.inputs {
            z = &a * &z + &b * v;
        }
        let target = oracle::pow(&a, horizon) * &x;
        w_term = w_term.max((&z - &target).norm() / (1.0 + target.norm()));

        let r_inv = r.clone().try_inverse().unwrap();
        let energy: f64 = sol.inputs.iter().map(|v| (v.transpose() * &r_inv * v)[0]).sum();
        let v_closed = min_energy::optimal_cost_v(&a, &b, horizon, &r, &xhat, &x).unwrap();
        w_energy = w_energy.max(rel(energy, v_closed));

        let k = min_energy::kleinman_gain(&a, &b, horizon, &r).unwrap();
        let law = (&sol.inputs[0] - &k * (&x - &xhat)).amax() / (1.0 + sol.inputs[0].amax());
        w_law = w_law.max(law);

        let (qp_cost, _) = oracle::min_energy_qp(&a, &b, &r, horizon, &xhat, &x);
        w_qp = w_qp.max(rel(qp_cost, v_closed));
    }
    ensure!(w_term <= 1e-9, "terminal residual {w_term:e}");
    ensure!(w_energy <= 1e-9, "input energy vs V {w_energy:e}");
    ensure!(w_law <= 1e-10, "first input vs K(x − x̂) {w_law:e}");
    ensure!(w_qp <= 1e-8, "QP oracle {w_qp:e}");
    Ok(format!(
        "100 instances: terminal {w_term:.1e}, energy {w_energy:.1e}, feedback {w_law:.1e}, QP oracle {w_qp:.1e}"
    ))
}

// 7
fn golden_scalar() -> Outcome {
    // a = 2, b = c = r = 1, N = 2.
    // Q = c²r = 1, H = (ca)²r = 4, L = a²·(Q+H)⁻¹·a·c·r = 4·2/5 = 1.6, a − Lc = 0.4.
    // G = b²r(1 + a²) = 5, K = r·b·a·G⁻¹·a² = 8/5 = 1.6.
    // V(x̂=1, x=0) = (a²(x̂−x))²/G = 16/5 = 3.2.
    // vᵢ = r·b·a^{1−i}·G⁻¹·a²·(x − x̂): v₀ = −8/5, v₁ = −4/5.
    let one = |v: f64| Matrix::from_element(1, 1, v);
    let (a, bc, r) = (one(2.0), one(1.0), one(1.0));
    let l = mhe::observer_gain_l(&a, &bc, 2, &r).unwrap();
    let k = min_energy::kleinman_gain(&a, &bc, 2, &r).unwrap();
    let xhat = Vector::from_element(1, 1.0);
    let x = Vector::from_element(1, 0.0);
    let v = min_energy::optimal_cost_v(&a, &bc, 2, &r, &xhat, &x).unwrap();
    let sol = min_energy::solve_min_energy(&a, &bc, 2, &r, &xhat, &x).unwrap();
    let checks = [
        ("L", l.l[(0, 0)], 1.6),
        ("K", k[(0, 0)], 1.6),
        ("closed-loop factor", l.spectral_radius, 0.4),
        ("a − bK", (&a - &bc * &k)[(0, 0)], 0.4),
        ("V(1, 0)", v, 3.2),
        ("v₀", sol.inputs[0][0], -1.6),
        ("v₁", sol.inputs[1][0], -0.8),
    ];
    for (name, got, want) in checks {
        ensure!((got - want).abs() <= 1e-12, "{name} = {got}, expected {want}");
    }
    let doc = json!({
        "mode": "mhe", "system": {"A": [[2]], "B": [[1]], "C": [[1]]}, "N": 2, "R": 1,
        "x0": [0], "z0": [1], "xhat0": [1], "steps": 5
    });
    let rep = run_experiment(&config_from_value(&doc, Purpose::Run).unwrap()).unwrap();
    ensure!((rep.gain("L").unwrap()[(0, 0)] - 1.6).abs() <= 1e-12, "report L");
    ensure!((rep.spectral_radius.unwrap() - 0.4).abs() <= 1e-12, "report spectral radius");
    let mut me = doc.clone();
    me["mode"] = json!("min-energy");
    let rep = run_experiment(&config_from_value(&me, Purpose::Run).unwrap()).unwrap();
    ensure!((rep.initial_cost.unwrap() - 3.2).abs() <= 1e-12, "report cost");
    Ok("L = K = 1.6, factor 0.4, V = 3.2, inputs (−1.6, −0.8)".into())
}

// 8
fn nonlinear_linear_equivalence() -> Outcome {
    let a = Matrix::from_row_slice(2, 2, &[0.95, 0.3, -0.25, 1.02]);
    let c = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let r = Matrix::from_element(1, 1, 2.0);
    let horizon = 3;
    let sys = LinearSystem::observed(a.clone(), c.clone()).unwrap();
    let z0 = Vector::from_vec(vec![0.8, -0.6]);
    let x0 = Vector::from_vec(vec![-0.4, 1.1]);
    let nl = run_nl_observer(&sys, &StageCost::quadratic(r.clone()).unwrap(), horizon, &z0, &x0, 40, &Minimizer::default())
        .map_err(|e| e.to_string())?;
    let lin = mhe::run_linear_mhe(&a, &c, horizon, &r, &z0, &x0, 40).unwrap();
    let mut w_obs = 0.0f64;
    for (p, q) in nl.iter().zip(&lin) {
        let de = (p.eta.as_ref().unwrap() - q.eta.as_ref().unwrap()).amax();
        let dx = (&p.xhat - &q.xhat).amax();
        w_obs = w_obs.max(de).max(dx);
    }
    ensure!(w_obs <= 1e-6, "observer trace differs by {w_obs:e}");

    let b = Matrix::from_row_slice(2, 1, &[0.2, 1.0]);
    let rt = Matrix::from_element(1, 1, 0.5);
    let q = min_energy::tracking_weight(&b, &rt).unwrap();
    let plant = LinearSystem::controlled(a.clone(), b.clone()).unwrap();
    let mut w_trk = 0.0f64;
    let mut rng = seeded_rng(808);
    for h in 2..=4 {
        let program = TrackerProgram::new(
            Arc::new(LinearTracking::new(plant.clone()).unwrap()),
            StageCost::quadratic(q.clone()).unwrap(),
            h,
        );
        let k = min_energy::kleinman_gain(&a, &b, h, &rt).unwrap();
        for _ in 0..5 {
            let xhat = uniform_vector(&mut rng, 2, 1.5);
            let x = uniform_vector(&mut rng, 2, 1.5);
            let sol = tracker_solve(&program, &xhat, &x).map_err(|e| e.to_string())?;
            let v = min_energy::optimal_cost_v(&a, &b, h, &rt, &xhat, &x).unwrap();
            let du = (&sol.u0 - &k * (&x - &xhat)).amax();
            w_trk = w_trk.max(rel(sol.value, v)).max(du);
        }
    }
    ensure!(w_trk <= 1e-6, "tracker differs from closed form by {w_trk:e}");
    Ok(format!("observer trace within {w_obs:.1e}, tracker V and u₀ within {w_trk:.1e}"))
}

// 9
fn cubic_observer() -> Outcome {
    let plant = registry::builtin_plant("cubic_output", &serde_json::Map::new()).unwrap();
    let cost = StageCost::quadratic(Matrix::identity(1, 1)).unwrap();
    let horizon = 2;
    let z0 = Vector::from_element(1, -0.7);
    let x0 = Vector::from_element(1, 1.3);
    let recs = run_nl_observer(&plant, &cost, horizon, &z0, &x0, 100, &Minimizer::default()).map_err(|e| e.to_string())?;
    let first_small = recs.iter().position(|r| r.err_norm <= 1e-6);
    ensure!(first_small.is_some(), "error never below 1e-6 (final {:e})", recs.last().unwrap().err_norm);
    ensure!(recs.last().unwrap().err_norm <= 1e-6, "final error {:e}", recs.last().unwrap().err_norm);
    let costs: Vec<f64> = recs.iter().map(|r| r.cost.unwrap()).collect();
    let tail_max = costs[costs.len() - 10..].iter().cloned().fold(0.0, f64::max);
    ensure!(tail_max <= 1e-20, "J does not vanish: last ten up to {tail_max:e}");
    // Σ_{k ≥ k₀} α₄(J_k) with α₄ the identity is bounded by the window
    // discrepancy at k₀, for every k₀ from N − 1 on.
    let mut worst_ratio = 0.0f64;
    for k0 in horizon - 1..recs.len() {
        let bound = recs[k0].identity_residual.expect("discrepancy recorded");
        let tail: f64 = costs[k0..].iter().sum();
        ensure!(tail <= bound + 1e-9 * (1.0 + bound), "k₀={k0}: Σ J = {tail:e} > {bound:e}");
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(tail / bound);
        }
    }
    Ok(format!(
        "error ≤ 1e-6 from step {}, Σ J / bound ≤ {worst_ratio:.3}",
        first_small.unwrap()
    ))
}

/// Every input sequence, cheapest feasible path value or `None`.
fn enumerate_oracle(program: &TrackerProgram, set: &[Vector], xhat: &Vector, x: &Vector) -> Option<f64> {
    let sys = &program.system;
    let mut target = x.clone();
    for _ in 0..program.horizon {
        target = sys.reference_map(&target);
    }
    let tol = program.terminal_tol * (1.0 + target.amax());
    let total = set.len().pow(program.horizon as u32);
    let mut best: Option<f64> = None;
    for code in 0..total {
        let mut rest = code;
        let mut z = xhat.clone();
        let mut value = 0.0;
        for _ in 0..program.horizon {
            let u = &set[rest % set.len()];
            rest /= set.len();
            let next = sys.transition(&z, u);
            value += program.cost.eval(&next, &sys.reference_map(&z));
            z = next;
        }
        if (&z - &target).amax() <= tol && best.is_none_or(|b| value < b) {
            best = Some(value);
        }
    }
    best
}

fn finite_instances() -> Vec<(Arc<dyn dual_horizon::system::ControlledSystem>, Vec<Vector>, StageCost)> {
    let s = |v: f64| Vector::from_element(1, v);
    let (walk, walk_cost, _) = registry::builtin_controlled("integer_walk", &serde_json::Map::new()).unwrap();
    let walk_set = vec![s(-1.0), s(0.0), s(1.0)];
    let halving_set = vec![s(-1.0), s(0.0), s(0.5), s(1.0)];
    let halving = FnControlled::new("halving", 1, InputSet::Finite(halving_set.clone()), |z, u| z * 0.5 + u, |x| x * 0.5);
    let v2 = |a: f64, b: f64| Vector::from_vec(vec![a, b]);
    let swap_set = vec![v2(0.0, 0.0), v2(1.0, 0.0), v2(-1.0, 0.0), v2(0.0, 1.0), v2(0.0, -1.0)];
    let swap = FnControlled::new(
        "swap_grid",
        2,
        InputSet::Finite(swap_set.clone()),
        |z, u| Vector::from_vec(vec![z[1] + u[0], z[0] + u[1]]),
        |x| Vector::from_vec(vec![x[1], x[0]]),
    );
    vec![
        (walk, walk_set, walk_cost),
        (Arc::new(halving), halving_set, StageCost::abs()),
        (Arc::new(swap), swap_set, StageCost::abs()),
    ]
}

// 10
fn tracker_decrease() -> Outcome {
    let mut runs = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut check_run = |program: &TrackerProgram, xhat0: &Vector, x0: &Vector, steps: usize| -> Result<(), String> {
        let recs = run_nl_tracker(program, xhat0, x0, steps).map_err(|e| e.to_string())?;
        for w in recs.windows(2) {
            let (next, rhs) = w[0].lyap.ok_or("missing decrease pair")?;
            ensure!(next == w[1].cost.unwrap(), "decrease pair does not match the next V");
            worst = worst.max(next - rhs);
            ensure!(next <= rhs + 1e-8, "k={}: V⁺ = {next:e} > V − ℓ(φ₁, f x̂) = {rhs:e}", w[0].k);
            ensure!(next <= w[0].cost.unwrap() + 1e-8, "V increased at k={}", w[0].k);
        }
        runs += 1;
        Ok(())
    };
    let s = |v: f64| Vector::from_element(1, v);
    let (walk, walk_cost, _) = registry::builtin_controlled("integer_walk", &serde_json::Map::new()).unwrap();
    let walk_program = TrackerProgram::new(walk, walk_cost, 5);
    for start in [-5.0, -2.0, 0.0, 3.0, 5.0] {
        check_run(&walk_program, &s(start), &s(0.0), 8)?;
    }
    let (pend, pend_cost, _) = registry::builtin_controlled("input_affine_pendulum", &serde_json::Map::new()).unwrap();
    let pend_program = TrackerProgram::new(pend, pend_cost, 3);
    check_run(&pend_program, &Vector::from_vec(vec![0.6, -0.4]), &Vector::from_vec(vec![0.1, 0.3]), 10)?;
    let a = Matrix::from_row_slice(2, 2, &[1.1, 0.4, -0.3, 0.9]);
    let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let rt = Matrix::from_element(1, 1, 0.5);
    let lin_program = TrackerProgram::new(
        Arc::new(LinearTracking::new(LinearSystem::controlled(a, b.clone()).unwrap()).unwrap()),
        StageCost::quadratic(min_energy::tracking_weight(&b, &rt).unwrap()).unwrap(),
        3,
    );
    check_run(&lin_program, &Vector::from_vec(vec![1.0, -0.5]), &Vector::from_vec(vec![-0.3, 0.8]), 12)?;

    let mut compared = 0;
    for (system, set, cost) in finite_instances() {
        let dim = system.state_dim();
        let max_h = (1..=12).take_while(|h| set.len().pow(*h as u32) <= 100_000).last().unwrap();
        for h in 1..=max_h {
            let program = TrackerProgram::new(system.clone(), cost.clone(), h);
            for start in [-3.0, -1.0, 0.0, 1.5, 2.0, 4.0] {
                let xhat = Vector::from_element(dim, start);
                let x = Vector::from_fn(dim, |i, _| if i == 0 { 1.0 } else { 0.0 });
                let oracle = enumerate_oracle(&program, &set, &xhat, &x);
                match (tracker_solve(&program, &xhat, &x), oracle) {
                    (Ok(sol), Some(v)) => ensure!(sol.value == v, "N={h}, start {start}: {} vs {v}", sol.value),
                    (Err(Error::Infeasible(_)), None) => {}
                    (got, want) => return Err(format!("N={h}, start {start}: backend {got:?}, enumeration {want:?}")),
                }
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{runs} runs, max V⁺ − (V − ℓ) = {worst:.1e}; {compared} finite problems match enumeration exactly"
    ))
}

// 11
fn claim_bound() -> Outcome {
    let mut rng = seeded_rng(1111);
    let mut exercised = 0;
    let mut tightest = 0.0f64;
    for run in 0..50 {
        let n = 1 + run % 4;
        let p = 1 + (run / 4) % 2;
        let horizon = n + run % 3;
        let (a, c) = bounded_observable(&mut rng, n, p);
        let r = random_spd(&mut rng, p);
        let z0 = uniform_vector(&mut rng, n, 2.0);
        let x0 = uniform_vector(&mut rng, n, 2.0);
        let recs = mhe::run_linear_mhe(&a, &c, horizon, &r, &z0, &x0, 80).map_err(|e| e.to_string())?;
        let stack = dual_horizon::system::observability_stack(&a, &c, horizon).unwrap();
        let costs: Vec<f64> = recs.iter().map(|r| r.cost.unwrap()).collect();
        for eps in [1.0, 1e-1, 1e-2, 1e-3, 1e-4] {
            let delta = mhe::claim_delta(horizon, &stack, &a, &r, eps).unwrap();
            // Smallest k₁ with J_k ≤ δ for every recorded k ≥ k₁.
            let Some(k1) = (0..costs.len()).find(|&k| costs[k..].iter().all(|j| *j <= delta)) else {
                continue;
            };
            for rec in recs.iter().filter(|r| r.k >= k1 + horizon) {
                ensure!(
                    rec.err_norm <= eps,
                    "run {run}, ε={eps:e}, k₁={k1}, k={}: error {:e} > ε",
                    rec.k,
                    rec.err_norm
                );
                tightest = tightest.max(rec.err_norm / eps);
                exercised += 1;
            }
        }
    }
    ensure!(exercised > 0, "premise never met");
    Ok(format!("{exercised} (run, ε, k) cases, max error/ε = {tightest:.3e}"))
}

// 12
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let docs = [
        json!({"mode": "mhe", "system": {"kind": "random", "n": 3, "p": 2}, "N": 4, "seed": 12,
               "x0": [1, -1, 0.5], "z0": [0, 0, 0], "steps": 50}),
        json!({"mode": "min-energy", "system": {"kind": "random", "n": 3, "m": 1}, "N": 3, "seed": 12,
               "x0": [1, -1, 0.5], "xhat0": [0, 0, 0], "steps": 30}),
        json!({"mode": "deadbeat-observer", "system": {"kind": "random", "n": 3, "p": 1}, "N": 3, "seed": 5,
               "x0": [1, 2, 3], "z0": [0, 0, 0], "steps": 12}),
        json!({"mode": "nl-observer", "system": {"kind": "builtin", "name": "cubic_output"}, "N": 2, "seed": 3,
               "x0": [1.3], "z0": [-0.7], "steps": 40}),
        json!({"mode": "nl-observer", "system": {"kind": "builtin", "name": "rotation_saturated"}, "N": 3,
               "x0": [0.5, -0.2], "z0": [0, 0], "steps": 20}),
        json!({"mode": "nl-tracker", "system": {"kind": "builtin", "name": "integer_walk"}, "N": 5,
               "x0": [0], "xhat0": [5], "steps": 8}),
        json!({"mode": "nl-tracker", "system": {"kind": "builtin", "name": "input_affine_pendulum"}, "N": 3,
               "x0": [0.1, 0.3], "xhat0": [0.6, -0.4], "steps": 8}),
    ];
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    for (i, doc) in docs.iter().enumerate() {
        let mut bytes = Vec::new();
        for rep in 0..3 {
            let mut d = doc.clone();
            let out = dir.path().join(format!("cfg{i}_rep{rep}"));
            d["out"] = json!(out.display().to_string());
            let cfg = config_from_value(&d, Purpose::Run).map_err(|e| e.to_string())?;
            // The last repetition runs on a single worker thread.
            let report = if rep == 2 { single.install(|| run_experiment(&cfg)) } else { run_experiment(&cfg) }
                .map_err(|e| format!("config {i}: {e}"))?;
            ensure!(report.csv_path.is_some(), "config {i}: no CSV written");
            bytes.push(std::fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
        }
        ensure!(bytes[0] == bytes[1] && bytes[1] == bytes[2], "config {i}: CSV output differs between runs");
    }
    Ok(format!("{} configs × 3 runs byte-identical (one on a single thread)", docs.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("deadbeat exactness", deadbeat_exactness),
        ("observer stability", observer_stability),
        ("horizon cost identities", horizon_identities),
        ("lyapunov inequality", lyapunov_inequality),
        ("estimation/control duality", duality),
        ("minimum-energy control", minimum_energy),
        ("golden scalar instance", golden_scalar),
        ("nonlinear solvers on linear data", nonlinear_linear_equivalence),
        ("cubic-output observer convergence", cubic_observer),
        ("tracker decrease and enumeration", tracker_decrease),
        ("cost threshold implies error bound", claim_bound),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<36} PASS  {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name:<36} FAIL  {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
