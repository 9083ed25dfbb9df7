//! Stage costs and class-K∞ bounding functions.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

type PairFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Piecewise-linear `g` through `(0, 0)` and the given knots, extended
/// linearly past the last knot.
fn piecewise_linear(knots: &[(f64, f64)], s: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &(x, y) in knots {
        if s <= x {
            return prev.1 + (y - prev.1) * (s - prev.0) / (x - prev.0);
        }
        prev = (x, y);
    }
    let n = knots.len();
    let before = if n >= 2 { knots[n - 2] } else { (0.0, 0.0) };
    let slope = (prev.1 - before.1) / (prev.0 - before.0);
    prev.1 + slope * (s - prev.0)
}

fn validate_knots(knots: &[(f64, f64)], what: &str) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::param(what, "table needs at least one knot"));
    }
    let mut prev = (0.0, 0.0);
    for &(x, y) in knots {
        if !(x > prev.0) || !(y > prev.1) || !x.is_finite() || !y.is_finite() {
            return Err(Error::param(
                what,
                "knots must be finite with strictly increasing positive abscissae and values",
            ));
        }
        prev = (x, y);
    }
    Ok(())
}

/// A class-K∞ function given as an evaluable scalar map.
#[derive(Clone)]
pub enum ClassKInf {
    /// `c·s`.
    Linear(f64),
    /// `c·sᵖ`.
    Power { c: f64, p: f64 },
    /// Piecewise linear through `(0, 0)` and the knots.
    Table(Vec<(f64, f64)>),
    Custom(ScalarFn),
}

impl fmt::Debug for ClassKInf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassKInf::Linear(c) => write!(f, "Linear({c})"),
            ClassKInf::Power { c, p } => write!(f, "Power {{ c: {c}, p: {p} }}"),
            ClassKInf::Table(k) => write!(f, "Table({k:?})"),
            ClassKInf::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ClassKInf {
    pub fn identity() -> Self {
        ClassKInf::Linear(1.0)
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        ClassKInf::Custom(Arc::new(f))
    }

    pub fn table(knots: Vec<(f64, f64)>) -> Result<Self> {
        validate_knots(&knots, "class-K table")?;
        Ok(ClassKInf::Table(knots))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ClassKInf::Linear(c) => c * s,
            ClassKInf::Power { c, p } => c * s.powf(*p),
            ClassKInf::Table(k) => piecewise_linear(k, s),
            ClassKInf::Custom(f) => f(s),
        }
    }

    /// Zero at zero and strictly increasing on 20 log-spaced points in
    /// `[1e−4, 1e4]`. Only a spot check: the property cannot be verified.
    pub fn spot_check(&self) -> Result<()> {
        let at_zero = self.eval(0.0);
        if at_zero.abs() > 1e-12 {
            return Err(Error::param("class-K function", format!("value at 0 is {at_zero:e}")));
        }
        let mut prev = at_zero;
        for i in 0..20 {
            let s = 10f64.powf(-4.0 + 8.0 * i as f64 / 19.0);
            let v = self.eval(s);
            if !v.is_finite() || v <= prev {
                return Err(Error::param("class-K function", format!("not strictly increasing at s = {s:e}")));
            }
            prev = v;
        }
        Ok(())
    }
}

#[derive(Clone)]
enum Kind {
    Quadratic { weight: Matrix, factor: Matrix },
    Abs,
    Table(Vec<(f64, f64)>),
    Custom(PairFn),
}

/// Nonnegative discrepancy `ℓ(v, w)` between two outputs or two states.
#[derive(Clone)]
pub struct StageCost {
    name: String,
    kind: Kind,
    pub alpha1: Option<ClassKInf>,
    pub alpha2: Option<ClassKInf>,
}

impl fmt::Debug for StageCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageCost").field("name", &self.name).finish()
    }
}

/// Result of sampling the sandwich `α₁(‖v−w‖) ≤ ℓ(v,w) ≤ α₂(‖v−w‖)`
/// together with symmetry and `ℓ(v,v) = 0`.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct BoundCheck {
    pub samples: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub asymmetry: f64,
    pub diagonal: f64,
}

impl BoundCheck {
    pub fn passed(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0 && self.asymmetry <= 1e-12 && self.diagonal <= 1e-12
    }
}

impl StageCost {
    /// `ℓ(v, w) = (v−w)ᵀM(v−w)` for symmetric positive semidefinite `M`.
    pub fn quadratic(weight: Matrix) -> Result<Self> {
        if weight.nrows() != weight.ncols() || weight.is_empty() {
            return Err(Error::param("stage cost weight", "must be a non-empty square matrix"));
        }
        let scale = linalg::max_abs(&weight).max(1.0);
        if linalg::max_abs(&(&weight - weight.transpose())) > 1e-12 * scale {
            return Err(Error::param("stage cost weight", "must be symmetric"));
        }
        let (lmin, _) = linalg::sym_eig_extremes(&weight);
        if lmin < -1e-12 * scale {
            return Err(Error::param("stage cost weight", "must be positive semidefinite"));
        }
        let factor = linalg::psd_sqrt_factor(&weight);
        Ok(Self {
            name: "quad".into(),
            kind: Kind::Quadratic { weight, factor },
            alpha1: None,
            alpha2: None,
        })
    }

    /// `ℓ(v, w) = Σ|v_i − w_i|`.
    pub fn abs() -> Self {
        Self {
            name: "abs".into(),
            kind: Kind::Abs,
            alpha1: Some(ClassKInf::identity()),
            alpha2: None,
        }
    }

    /// `ℓ(v, w) = g(‖v − w‖)` with `g` piecewise linear through the knots.
    pub fn table(knots: Vec<(f64, f64)>) -> Result<Self> {
        validate_knots(&knots, "stage cost table")?;
        Ok(Self {
            name: "table".into(),
            kind: Kind::Table(knots.clone()),
            alpha1: Some(ClassKInf::Table(knots.clone())),
            alpha2: Some(ClassKInf::Table(knots)),
        })
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            kind: Kind::Custom(Arc::new(f)),
            alpha1: None,
            alpha2: None,
        }
    }

    pub fn with_bounds(mut self, alpha1: ClassKInf, alpha2: ClassKInf) -> Self {
        self.alpha1 = Some(alpha1);
        self.alpha2 = Some(alpha2);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Weight matrix of a quadratic cost.
    pub fn weight(&self) -> Option<&Matrix> {
        match &self.kind {
            Kind::Quadratic { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn eval(&self, v: &Vector, w: &Vector) -> f64 {
        match &self.kind {
            Kind::Quadratic { weight, .. } => linalg::quad_form(weight, &(v - w)),
            Kind::Abs => (v - w).lp_norm(1),
            Kind::Table(k) => piecewise_linear(k, (v - w).norm()),
            Kind::Custom(f) => f(v, w),
        }
    }

    /// Smooth residual `r` with `‖r‖² = ℓ(v, w)`, when one exists.
    pub fn residual(&self, v: &Vector, w: &Vector) -> Option<Vector> {
        match &self.kind {
            Kind::Quadratic { factor, .. } => Some(factor * (v - w)),
            _ => None,
        }
    }

    pub fn has_residual_form(&self) -> bool {
        matches!(self.kind, Kind::Quadratic { .. })
    }

    /// Spot-check symmetry, zero diagonal and the class-K∞ sandwich on
    /// the given pairs. Missing bounds are not checked.
    pub fn check_bounds(&self, pairs: &[(Vector, Vector)]) -> BoundCheck {
        let mut out = BoundCheck {
            samples: pairs.len(),
            ..Default::default()
        };
        for (v, w) in pairs {
            let l = self.eval(v, w);
            let rho = (v - w).norm();
            out.asymmetry = out.asymmetry.max((l - self.eval(w, v)).abs() / (1.0 + l.abs()));
            out.diagonal = out.diagonal.max(self.eval(v, v).abs()).max(self.eval(w, w).abs());
            let slack = 1e-12 * (1.0 + l.abs());
            if let Some(a1) = &self.alpha1 {
                if a1.eval(rho) > l + slack {
                    out.lower_violations += 1;
                }
            }
            if let Some(a2) = &self.alpha2 {
                if l > a2.eval(rho) + slack {
                    out.upper_violations += 1;
                }
            }
        }
        out
    }
}
