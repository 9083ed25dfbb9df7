//! System descriptions, trajectory iteration and the stacked
//! observability / controllability matrices.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Relative singular-value tolerance used for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Discrete-time linear system `x⁺ = Ax (+ Bu)`, `y = Cx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Matrix,
    b: Option<Matrix>,
    c: Option<Matrix>,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Option<Matrix>, c: Option<Matrix>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if a.nrows() != a.ncols() {
            return Err(Error::dim(
                "A",
                format!("must be square, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        let n = a.nrows();
        if !linalg::all_finite(&a) {
            return Err(Error::param("A", "contains non-finite entries"));
        }
        if let Some(b) = &b {
            if b.nrows() != n || b.ncols() == 0 {
                return Err(Error::dim(
                    "B",
                    format!("expected {n} rows, got {}x{}", b.nrows(), b.ncols()),
                ));
            }
            if !linalg::all_finite(b) {
                return Err(Error::param("B", "contains non-finite entries"));
            }
        }
        if let Some(c) = &c {
            if c.ncols() != n || c.nrows() == 0 {
                return Err(Error::dim(
                    "C",
                    format!("expected {n} columns, got {}x{}", c.nrows(), c.ncols()),
                ));
            }
            if !linalg::all_finite(c) {
                return Err(Error::param("C", "contains non-finite entries"));
            }
        }
        Ok(Self { a, b, c })
    }

    /// Autonomous system with output, `x⁺ = Ax`, `y = Cx`.
    pub fn observed(a: Matrix, c: Matrix) -> Result<Self> {
        Self::new(a, None, Some(c))
    }

    /// Controlled system without output, `x⁺ = Ax + Bu`.
    pub fn controlled(a: Matrix, b: Matrix) -> Result<Self> {
        Self::new(a, Some(b), None)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> Option<&Matrix> {
        self.b.as_ref()
    }

    pub fn c(&self) -> Option<&Matrix> {
        self.c.as_ref()
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.as_ref().map_or(0, |b| b.ncols())
    }

    pub fn p(&self) -> usize {
        self.c.as_ref().map_or(0, |c| c.nrows())
    }

    pub fn require_b(&self) -> Result<&Matrix> {
        self.b
            .as_ref()
            .ok_or_else(|| Error::param("B", "input matrix required"))
    }

    pub fn require_c(&self) -> Result<&Matrix> {
        self.c
            .as_ref()
            .ok_or_else(|| Error::param("C", "output matrix required"))
    }
}

/// Autonomous plant `x⁺ = f(x)`, `y = h(x)` on finite-dimensional real spaces.
///
/// Implementations must be deterministic and must not mutate shared state.
pub trait NonlinearSystem: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn state_map(&self, x: &Vector) -> Vector;
    fn output_map(&self, x: &Vector) -> Vector;

    /// The linear realization, when the system is linear.
    fn as_linear(&self) -> Option<&LinearSystem> {
        None
    }

    /// `f^k(x)`.
    fn iterate(&self, x: &Vector, k: usize) -> Vector {
        let mut s = x.clone();
        for _ in 0..k {
            s = self.state_map(&s);
        }
        s
    }

    /// `[h(x), h(f(x)), ..., h(f^{count-1}(x))]`.
    fn output_sequence(&self, x: &Vector, count: usize) -> Vec<Vector> {
        let mut out = Vec::with_capacity(count);
        let mut s = x.clone();
        for i in 0..count {
            out.push(self.output_map(&s));
            if i + 1 < count {
                s = self.state_map(&s);
            }
        }
        out
    }
}

impl NonlinearSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.n()
    }

    fn output_dim(&self) -> usize {
        self.p()
    }

    fn state_map(&self, x: &Vector) -> Vector {
        &self.a * x
    }

    fn output_map(&self, x: &Vector) -> Vector {
        match &self.c {
            Some(c) => c * x,
            None => Vector::zeros(0),
        }
    }

    fn as_linear(&self) -> Option<&LinearSystem> {
        Some(self)
    }
}

type VecMap = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;

/// Properties a registered system declares about itself. They are not
/// verified globally; sampling diagnostics can only spot-check them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Declarations {
    /// Unique solvability of the stacked output equations.
    pub unique_stack_solution: bool,
    /// Uniform observability and cost decay for the optimal observer.
    pub optimal_observer_conditions: bool,
}

/// Nonlinear system given by closures.
#[derive(Clone)]
pub struct FnSystem {
    name: String,
    state_dim: usize,
    output_dim: usize,
    f: VecMap,
    h: VecMap,
    pub declarations: Declarations,
}

impl FnSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        output_dim: usize,
        f: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        h: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            output_dim,
            f: Arc::new(f),
            h: Arc::new(h),
            declarations: Declarations::default(),
        }
    }

    pub fn with_declarations(mut self, d: Declarations) -> Self {
        self.declarations = d;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

impl NonlinearSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn state_map(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }

    fn output_map(&self, x: &Vector) -> Vector {
        (self.h)(x)
    }
}

/// Admissible inputs of a controlled system.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSet {
    /// Explicit finite list.
    Finite(Vec<Vector>),
    /// Axis-aligned box `lower ≤ u ≤ upper` (bounds may be infinite).
    Box { lower: Vector, upper: Vector },
}

impl InputSet {
    pub fn unbounded(dim: usize) -> Self {
        InputSet::Box {
            lower: Vector::from_element(dim, f64::NEG_INFINITY),
            upper: Vector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSet::Finite(v) => v.first().map_or(0, |u| u.len()),
            InputSet::Box { lower, .. } => lower.len(),
        }
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        match self {
            InputSet::Finite(v) => v.iter().any(|w| (w - u).amax() <= tol),
            InputSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(x, (lo, hi))| *x >= lo - tol && *x <= hi + tol),
        }
    }

    /// Projection onto a box set; identity for finite sets.
    pub fn project(&self, u: &Vector) -> Vector {
        match self {
            InputSet::Finite(_) => u.clone(),
            InputSet::Box { lower, upper } => Vector::from_iterator(
                u.len(),
                u.iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .map(|(x, (lo, hi))| x.clamp(*lo, *hi)),
            ),
        }
    }

    /// A point of the set used to initialize searches: zero when admissible.
    pub fn nominal(&self) -> Vector {
        match self {
            InputSet::Finite(v) => v[0].clone(),
            InputSet::Box { lower, .. } => self.project(&Vector::zeros(lower.len())),
        }
    }
}

/// Tracker plant `x̂⁺ = F(x̂, u)` following a reference `x⁺ = f(x)`.
pub trait ControlledSystem: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn transition(&self, x: &Vector, u: &Vector) -> Vector;
    fn reference_map(&self, x: &Vector) -> Vector;
    fn input_set(&self) -> &InputSet;

    fn reference_iterate(&self, x: &Vector, k: usize) -> Vector {
        let mut s = x.clone();
        for _ in 0..k {
            s = self.reference_map(&s);
        }
        s
    }

    /// The linear pair `(A, B)` when `F(z, u) = Az + Bu`, `f(x) = Ax`.
    fn as_linear(&self) -> Option<&LinearSystem> {
        None
    }
}

/// `F(z, u) = Az + Bu`, `f(x) = Ax` with unconstrained inputs.
#[derive(Debug, Clone)]
pub struct LinearTracking {
    sys: LinearSystem,
    inputs: InputSet,
}

impl LinearTracking {
    pub fn new(sys: LinearSystem) -> Result<Self> {
        let m = sys.require_b()?.ncols();
        Ok(Self {
            sys,
            inputs: InputSet::unbounded(m),
        })
    }
}

impl ControlledSystem for LinearTracking {
    fn state_dim(&self) -> usize {
        self.sys.n()
    }

    fn transition(&self, x: &Vector, u: &Vector) -> Vector {
        self.sys.a() * x + self.sys.b().expect("checked at construction") * u
    }

    fn reference_map(&self, x: &Vector) -> Vector {
        self.sys.a() * x
    }

    fn input_set(&self) -> &InputSet {
        &self.inputs
    }

    fn as_linear(&self) -> Option<&LinearSystem> {
        Some(&self.sys)
    }
}

type InputMap = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Controlled system given by closures.
#[derive(Clone)]
pub struct FnControlled {
    name: String,
    state_dim: usize,
    transition: InputMap,
    reference: VecMap,
    inputs: InputSet,
}

impl FnControlled {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        inputs: InputSet,
        transition: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        reference: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            transition: Arc::new(transition),
            reference: Arc::new(reference),
            inputs,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for FnControlled {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnControlled")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("inputs", &self.inputs)
            .finish()
    }
}

impl ControlledSystem for FnControlled {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn transition(&self, x: &Vector, u: &Vector) -> Vector {
        (self.transition)(x, u)
    }

    fn reference_map(&self, x: &Vector) -> Vector {
        (self.reference)(x)
    }

    fn input_set(&self) -> &InputSet {
        &self.inputs
    }
}

/// One simulation step. Fields that a given run does not produce are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    /// Plant state.
    pub x: Vector,
    /// Observer internal state.
    pub z: Option<Vector>,
    /// Selector chosen at this step.
    pub eta: Option<Vector>,
    /// Estimate (observer) or tracker state.
    pub xhat: Vector,
    pub y: Option<Vector>,
    /// Input applied by a tracker.
    pub u: Option<Vector>,
    /// `x_{k-N+1}`, available from step `N-1` on.
    pub delayed_state: Option<Vector>,
    /// J for observers, V for trackers.
    pub cost: Option<f64>,
    pub err_norm: f64,
    pub lyap: Option<(f64, f64)>,
    pub identity_residual: Option<f64>,
    pub feasible: Option<bool>,
}

impl TraceRecord {
    pub fn new(k: usize, x: Vector, xhat: Vector) -> Self {
        let err_norm = (&xhat - &x).norm();
        Self {
            k,
            x,
            z: None,
            eta: None,
            xhat,
            y: None,
            u: None,
            delayed_state: None,
            cost: None,
            err_norm,
            lyap: None,
            identity_residual: None,
            feasible: None,
        }
    }
}

fn check_horizon(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    Ok(())
}

/// `[C; CA; ...; CA^{N-1}]`, an `(N·p) × n` matrix.
pub fn observability_stack(a: &Matrix, c: &Matrix, horizon: usize) -> Result<Matrix> {
    check_horizon(horizon)?;
    if a.nrows() != a.ncols() {
        return Err(Error::dim("A", "must be square"));
    }
    if c.ncols() != a.nrows() {
        return Err(Error::dim(
            "C",
            format!("expected {} columns, got {}", a.nrows(), c.ncols()),
        ));
    }
    let (n, p) = (a.nrows(), c.nrows());
    let mut w = Matrix::zeros(horizon * p, n);
    let mut block = c.clone();
    for i in 0..horizon {
        w.view_mut((i * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    Ok(w)
}

/// `[B, AB, ..., A^{N-1}B]`, an `n × (N·m)` matrix.
pub fn controllability_stack(a: &Matrix, b: &Matrix, horizon: usize) -> Result<Matrix> {
    check_horizon(horizon)?;
    if a.nrows() != a.ncols() {
        return Err(Error::dim("A", "must be square"));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::dim(
            "B",
            format!("expected {} rows, got {}", a.nrows(), b.nrows()),
        ));
    }
    let (n, m) = (a.nrows(), b.ncols());
    let mut k = Matrix::zeros(n, horizon * m);
    let mut block = b.clone();
    for i in 0..horizon {
        k.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    Ok(k)
}

/// True iff `rows ≤ cols` and the `rows`-th singular value exceeds
/// `rel_tol` times the largest one.
pub fn is_full_row_rank(m: &Matrix, rel_tol: f64) -> Result<bool> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if !(rel_tol >= 0.0) {
        return Err(Error::param("rel_tol", "must be nonnegative"));
    }
    if m.nrows() > m.ncols() {
        return Ok(false);
    }
    let s = linalg::singular_values(m);
    let smax = s[0];
    if smax == 0.0 {
        return Ok(false);
    }
    Ok(s[m.nrows() - 1] > rel_tol * smax)
}

/// Full column rank, i.e. full row rank of the transpose.
pub fn is_full_column_rank(m: &Matrix, rel_tol: f64) -> Result<bool> {
    is_full_row_rank(&m.transpose(), rel_tol)
}

/// `[x0, f(x0), ..., f^steps(x0)]`.
pub fn iterate_autonomous(
    sys: &dyn NonlinearSystem,
    x0: &Vector,
    steps: usize,
) -> Result<Vec<Vector>> {
    if x0.len() != sys.state_dim() {
        return Err(Error::dim(
            "x0",
            format!("expected {} entries, got {}", sys.state_dim(), x0.len()),
        ));
    }
    if !linalg::vec_finite(x0) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    for k in 1..=steps {
        let next = sys.state_map(&out[k - 1]);
        if !linalg::vec_finite(&next) {
            return Err(Error::Divergence { step: k });
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, v)
    }

    #[test]
    fn observability_stack_examples() {
        let a = m(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        assert_eq!(
            observability_stack(&a, &c, 2).unwrap(),
            m(2, 2, &[1.0, 0.0, 1.0, 1.0])
        );
        assert_eq!(observability_stack(&a, &c, 1).unwrap(), c);
        let w = observability_stack(&m(1, 1, &[3.0]), &m(1, 1, &[1.0]), 3).unwrap();
        assert_eq!(w, m(3, 1, &[1.0, 3.0, 9.0]));
    }

    #[test]
    fn controllability_stack_examples() {
        let a = m(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        assert_eq!(
            controllability_stack(&a, &b, 2).unwrap(),
            m(2, 2, &[0.0, 1.0, 1.0, 1.0])
        );
        assert_eq!(controllability_stack(&a, &b, 1).unwrap(), b);
        let b2 = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = controllability_stack(&Matrix::zeros(2, 2), &b2, 3).unwrap();
        assert_eq!(k.columns(0, 2).into_owned(), b2);
        assert_eq!(k.columns(2, 4).into_owned(), Matrix::zeros(2, 4));
    }

    #[test]
    fn stacks_reject_bad_dimensions() {
        let a = Matrix::identity(2, 2);
        assert!(matches!(
            observability_stack(&a, &m(1, 3, &[1.0, 0.0, 0.0]), 2),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            controllability_stack(&a, &m(3, 1, &[1.0, 0.0, 0.0]), 2),
            Err(Error::Dimension { .. })
        ));
        assert!(observability_stack(&a, &m(1, 2, &[1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn rank_examples() {
        assert!(is_full_row_rank(&m(2, 2, &[1.0, 0.0, 1.0, 1.0]), DEFAULT_RANK_TOL).unwrap());
        assert!(!is_full_row_rank(&m(2, 2, &[1.0, 1.0, 1.0, 1.0]), DEFAULT_RANK_TOL).unwrap());
        let tall = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(is_full_column_rank(&tall, DEFAULT_RANK_TOL).unwrap());
        assert!(!is_full_row_rank(&tall, DEFAULT_RANK_TOL).unwrap());
        assert!(matches!(
            is_full_row_rank(&Matrix::zeros(0, 0), DEFAULT_RANK_TOL),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn iterate_examples() {
        let doubling = FnSystem::new("double", 1, 1, |x| x * 2.0, |x| x.clone());
        let xs = iterate_autonomous(&doubling, &Vector::from_vec(vec![1.0]), 3).unwrap();
        let vals: Vec<f64> = xs.iter().map(|v| v[0]).collect();
        assert_eq!(vals, vec![1.0, 2.0, 4.0, 8.0]);
        let xs = iterate_autonomous(&doubling, &Vector::from_vec(vec![1.0]), 0).unwrap();
        assert_eq!(xs.len(), 1);
        let cube = FnSystem::new("cube", 1, 1, |x| x.map(|v| v * v * v), |x| x.clone());
        let xs = iterate_autonomous(&cube, &Vector::from_vec(vec![2.0]), 2).unwrap();
        let vals: Vec<f64> = xs.iter().map(|v| v[0]).collect();
        assert_eq!(vals, vec![2.0, 8.0, 512.0]);
    }

    #[test]
    fn iterate_reports_divergence() {
        let cube = FnSystem::new("cube", 1, 1, |x| x.map(|v| v * v * v), |x| x.clone());
        let err = iterate_autonomous(&cube, &Vector::from_vec(vec![10.0]), 10).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if step > 1));
    }

    #[test]
    fn linear_system_validates_shapes() {
        let a = Matrix::identity(2, 2);
        assert!(LinearSystem::new(a.clone(), Some(Matrix::zeros(3, 1)), None).is_err());
        assert!(LinearSystem::new(a.clone(), None, Some(Matrix::zeros(1, 3))).is_err());
        assert!(LinearSystem::new(Matrix::zeros(2, 3), None, None).is_err());
        let mut bad = a.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(LinearSystem::new(bad, None, None).is_err());
    }

    #[test]
    fn input_set_membership_and_projection() {
        let s = InputSet::Box {
            lower: Vector::from_vec(vec![-1.0]),
            upper: Vector::from_vec(vec![1.0]),
        };
        assert!(s.contains(&Vector::from_vec(vec![0.5]), 0.0));
        assert!(!s.contains(&Vector::from_vec(vec![1.5]), 0.0));
        assert_eq!(s.project(&Vector::from_vec(vec![3.0]))[0], 1.0);
        let f = InputSet::Finite(vec![Vector::from_vec(vec![-1.0]), Vector::from_vec(vec![1.0])]);
        assert!(f.contains(&Vector::from_vec(vec![1.0]), 1e-12));
        assert!(!f.contains(&Vector::from_vec(vec![0.0]), 1e-12));
    }

    fn small_matrix(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |v| Matrix::from_row_slice(r, c, &v))
    }

    proptest! {
        #[test]
        fn observability_blocks_are_powers(a in small_matrix(3, 3), c in small_matrix(2, 3), horizon in 1usize..5) {
            let w = observability_stack(&a, &c, horizon).unwrap();
            for i in 0..horizon {
                let naive = &c * linalg::mat_pow(&a, i);
                let block = w.rows(i * 2, 2).into_owned();
                prop_assert!(linalg::max_abs(&(block - naive)) <= 1e-12);
            }
        }

        #[test]
        fn controllability_blocks_are_powers(a in small_matrix(3, 3), b in small_matrix(3, 2), horizon in 1usize..5) {
            let k = controllability_stack(&a, &b, horizon).unwrap();
            for i in 0..horizon {
                let naive = linalg::mat_pow(&a, i) * &b;
                let block = k.columns(i * 2, 2).into_owned();
                prop_assert!(linalg::max_abs(&(block - naive)) <= 1e-12);
            }
        }

        #[test]
        fn observable_pairs_have_full_column_rank_stack(a in small_matrix(3, 3), c in small_matrix(1, 3)) {
            let w = observability_stack(&a, &c, 3).unwrap();
            let s = linalg::singular_values(&w);
            // Only judge pairs whose conditioning is clear-cut.
            prop_assume!(s[2] > 1e-6 * s[0]);
            prop_assert!(is_full_column_rank(&w, DEFAULT_RANK_TOL).unwrap());
            prop_assert!(is_full_row_rank(&w.transpose(), DEFAULT_RANK_TOL).unwrap());
        }
    }
}
