//! Deadbeat observer and tracker gains for scalar-output / scalar-input
//! linear systems, and the nonlinear deadbeat observer driven by the
//! stacked output equations.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::system::{
    controllability_stack, is_full_row_rank, observability_stack, NonlinearSystem, TraceRecord,
    DEFAULT_RANK_TOL,
};

/// Eigenvalue modulus accepted as "at the origin".
pub const PLACEMENT_TOL: f64 = 1e-6;

/// A deadbeat gain: `L` (n×1) for the observer or `K` (1×n) for the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadbeatGain {
    pub gain: Matrix,
    pub horizon: usize,
}

impl DeadbeatGain {
    /// Largest closed-loop eigenvalue modulus.
    pub fn closed_loop_radius(closed_loop: &Matrix) -> f64 {
        linalg::spectral_radius(closed_loop)
    }

    /// Nilpotency check `‖M^n‖ ≤ tol·(1 + ‖M‖)^n`, which bounds every
    /// eigenvalue of `M` by `(tol)^{1/n}·(1 + ‖M‖)`.
    pub fn is_nilpotent(closed_loop: &Matrix, tol: f64) -> bool {
        let n = closed_loop.nrows();
        let scale = (1.0 + linalg::max_abs(closed_loop)).powi(n as i32);
        linalg::max_abs(&linalg::mat_pow(closed_loop, n)) <= tol * scale
    }
}

/// `L = Aⁿ·O⁻¹·eₙ` for an observable pair with scalar output.
pub fn deadbeat_observer_gain(a: &Matrix, c: &Matrix) -> Result<DeadbeatGain> {
    if c.nrows() != 1 {
        return Err(Error::dim(
            "C",
            format!("closed-form deadbeat gain needs a scalar output, got {} rows", c.nrows()),
        ));
    }
    let n = a.nrows();
    let obs = observability_stack(a, c, n)?;
    if !is_full_row_rank(&obs, DEFAULT_RANK_TOL)? {
        return Err(Error::NotObservable("observability matrix is singular".into()));
    }
    let e_n = Matrix::from_column_slice(n, 1, linalg::unit(n, n - 1).as_slice());
    let w = linalg::solve_square(&obs, &e_n, "observability matrix")
        .map_err(|_| Error::NotObservable("observability matrix is singular".into()))?;
    Ok(DeadbeatGain {
        gain: linalg::mat_pow(a, n) * w,
        horizon: n,
    })
}

/// `K = eₙᵀ·𝒞⁻¹·Aⁿ` for a controllable pair with scalar input.
pub fn deadbeat_tracker_gain(a: &Matrix, b: &Matrix) -> Result<DeadbeatGain> {
    if b.ncols() != 1 {
        return Err(Error::dim(
            "B",
            format!("closed-form deadbeat gain needs a scalar input, got {} columns", b.ncols()),
        ));
    }
    let n = a.nrows();
    let ctrb = controllability_stack(a, b, n)?;
    if !is_full_row_rank(&ctrb, DEFAULT_RANK_TOL)? {
        return Err(Error::NotControllable("controllability matrix is singular".into()));
    }
    // Row eₙᵀ𝒞⁻¹ from 𝒞ᵀ r = eₙ.
    let e_n = Matrix::from_column_slice(n, 1, linalg::unit(n, n - 1).as_slice());
    let r = linalg::solve_square(&ctrb.transpose(), &e_n, "controllability matrix")
        .map_err(|_| Error::NotControllable("controllability matrix is singular".into()))?;
    Ok(DeadbeatGain {
        gain: r.transpose() * linalg::mat_pow(a, n),
        horizon: n,
    })
}

/// Closed-form deadbeat selector `η = z + O⁻¹eₙ(y − CAⁿ⁻¹z)` for a linear
/// scalar-output system.
pub fn deadbeat_eta_closed_form(a: &Matrix, c: &Matrix, z: &Vector, y: f64) -> Result<Vector> {
    let n = a.nrows();
    let obs = observability_stack(a, c, n)?;
    let e_n = Matrix::from_column_slice(n, 1, linalg::unit(n, n - 1).as_slice());
    let w = linalg::solve_square(&obs, &e_n, "observability matrix")
        .map_err(|_| Error::NotObservable("observability matrix is singular".into()))?;
    let predicted = (c * linalg::mat_pow(a, n - 1) * z)[0];
    Ok(z + w.column(0) * (y - predicted))
}

type ClosedFormSelector = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Root-finding strategy for the stacked output equations.
#[derive(Clone)]
pub enum EquationStackSolver {
    /// Direct (least-squares) solve; the system must be linear.
    ExactLinear { tol: f64 },
    /// Damped Newton with a central-difference Jacobian.
    Newton {
        tol: f64,
        max_iter: usize,
        /// Jacobian step is `fd_scale·(1 + ‖η‖)`.
        fd_scale: f64,
    },
    /// User-supplied `η(z, y)`; residuals are still verified.
    ClosedForm { tol: f64, selector: ClosedFormSelector },
}

impl fmt::Debug for EquationStackSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExactLinear { tol } => f.debug_struct("ExactLinear").field("tol", tol).finish(),
            Self::Newton {
                tol,
                max_iter,
                fd_scale,
            } => f
                .debug_struct("Newton")
                .field("tol", tol)
                .field("max_iter", max_iter)
                .field("fd_scale", fd_scale)
                .finish(),
            Self::ClosedForm { tol, .. } => f.debug_struct("ClosedForm").field("tol", tol).finish(),
        }
    }
}

impl Default for EquationStackSolver {
    fn default() -> Self {
        Self::Newton {
            tol: 1e-10,
            max_iter: 100,
            fd_scale: 1e-6,
        }
    }
}

impl EquationStackSolver {
    pub fn exact_linear() -> Self {
        Self::ExactLinear { tol: 1e-10 }
    }

    pub fn closed_form(selector: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        Self::ClosedForm {
            tol: 1e-10,
            selector: Arc::new(selector),
        }
    }

    fn tol(&self) -> f64 {
        match self {
            Self::ExactLinear { tol } | Self::Newton { tol, .. } | Self::ClosedForm { tol, .. } => {
                *tol
            }
        }
    }
}

/// Selector returned by [`deadbeat_select_eta`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackSolution {
    pub eta: Vector,
    /// Max-abs residual of the stacked equations.
    pub residual: f64,
    pub iterations: usize,
}

/// Right-hand side `[h(z), h(f z), ..., h(f^{N-2} z), y]`, flattened.
fn stack_target(sys: &dyn NonlinearSystem, horizon: usize, z: &Vector, y: &Vector) -> Vector {
    let mut parts = sys.output_sequence(z, horizon - 1);
    parts.push(y.clone());
    flatten(&parts)
}

fn flatten(parts: &[Vector]) -> Vector {
    let len = parts.iter().map(|p| p.len()).sum();
    Vector::from_iterator(len, parts.iter().flat_map(|p| p.iter().copied()))
}

fn stack_residual(sys: &dyn NonlinearSystem, horizon: usize, eta: &Vector, target: &Vector) -> Vector {
    flatten(&sys.output_sequence(eta, horizon)) - target
}

/// Solve `h(f^i η) = h(f^i z)` for `i < N−1` and `h(f^{N−1} η) = y`.
///
/// Residuals are accepted when their max-abs value is within
/// `tol·max(1, ‖target‖∞)`.
pub fn deadbeat_select_eta(
    sys: &dyn NonlinearSystem,
    horizon: usize,
    z: &Vector,
    y: &Vector,
    solver: &EquationStackSolver,
) -> Result<StackSolution> {
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    if z.len() != sys.state_dim() {
        return Err(Error::dim("z", format!("expected {} entries", sys.state_dim())));
    }
    if y.len() != sys.output_dim() {
        return Err(Error::dim("y", format!("expected {} entries", sys.output_dim())));
    }
    let target = stack_target(sys, horizon, z, y);
    let accept = solver.tol() * target.amax().max(1.0);

    let (eta, iterations) = match solver {
        EquationStackSolver::ExactLinear { .. } => {
            let lin = sys.as_linear().ok_or_else(|| {
                Error::param("solver", "exact-linear selector requires a linear system")
            })?;
            let w = observability_stack(lin.a(), lin.require_c()?, horizon)?;
            (linalg::lstsq(&w, &target), 1)
        }
        EquationStackSolver::ClosedForm { selector, .. } => (selector(z, y), 0),
        EquationStackSolver::Newton {
            max_iter, fd_scale, ..
        } => newton(sys, horizon, z, &target, accept, *max_iter, *fd_scale),
    };

    let residual = stack_residual(sys, horizon, &eta, &target).amax();
    if !residual.is_finite() || residual > accept {
        return Err(Error::SelectorFailure { residual });
    }
    Ok(StackSolution {
        eta,
        residual,
        iterations,
    })
}

fn newton(
    sys: &dyn NonlinearSystem,
    horizon: usize,
    start: &Vector,
    target: &Vector,
    accept: f64,
    max_iter: usize,
    fd_scale: f64,
) -> (Vector, usize) {
    let n = start.len();
    let mut eta = start.clone();
    let mut r = stack_residual(sys, horizon, &eta, target);
    let mut rnorm = r.norm();
    for it in 0..max_iter {
        if r.amax() <= accept {
            return (eta, it);
        }
        let h = fd_scale * (1.0 + eta.norm());
        let mut jac = Matrix::zeros(r.len(), n);
        for j in 0..n {
            let mut plus = eta.clone();
            let mut minus = eta.clone();
            plus[j] += h;
            minus[j] -= h;
            let col = (stack_residual(sys, horizon, &plus, target)
                - stack_residual(sys, horizon, &minus, target))
                / (2.0 * h);
            jac.set_column(j, &col);
        }
        let step = linalg::lstsq(&jac, &(-&r));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &eta + &step * t;
            let rt = stack_residual(sys, horizon, &trial, target);
            let nt = rt.norm();
            if nt.is_finite() && nt < rnorm {
                eta = trial;
                r = rt;
                rnorm = nt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return (eta, it + 1);
        }
    }
    (eta, max_iter)
}

/// Run `z⁺ = f(η)`, `x̂ = f^{N−1}(z)` against the plant `x⁺ = f(x)`.
///
/// Returns `steps + 1` records, `k = 0..=steps`.
pub fn run_deadbeat_observer(
    sys: &dyn NonlinearSystem,
    horizon: usize,
    z0: &Vector,
    x0: &Vector,
    steps: usize,
    solver: &EquationStackSolver,
) -> Result<Vec<TraceRecord>> {
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    if steps < horizon {
        return Err(Error::param("steps", format!("must be at least N = {horizon}")));
    }
    if z0.len() != sys.state_dim() || x0.len() != sys.state_dim() {
        return Err(Error::dim("initial state", format!("expected {} entries", sys.state_dim())));
    }
    let mut records = Vec::with_capacity(steps + 1);
    let mut history: Vec<Vector> = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut z = z0.clone();
    for k in 0..=steps {
        if !linalg::vec_finite(&x) || !linalg::vec_finite(&z) {
            return Err(Error::Divergence { step: k });
        }
        history.push(x.clone());
        let y = sys.output_map(&x);
        let sol = deadbeat_select_eta(sys, horizon, &z, &y, solver)?;
        let xhat = sys.iterate(&z, horizon - 1);
        let mut rec = TraceRecord::new(k, x.clone(), xhat);
        rec.z = Some(z.clone());
        rec.y = Some(y);
        rec.identity_residual = Some(sol.residual);
        if k + 1 >= horizon {
            rec.delayed_state = Some(history[k + 1 - horizon].clone());
        }
        z = sys.state_map(&sol.eta);
        rec.eta = Some(sol.eta);
        records.push(rec);
        x = sys.state_map(&x);
    }
    Ok(records)
}
