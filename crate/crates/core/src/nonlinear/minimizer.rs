//! Small unconstrained minimizers for the per-step selector problems.
//!
//! Every strategy keeps the best point it has ever evaluated, so the
//! returned point is never worse than any probe beyond a relative
//! roundoff tie of 1e−14.

use std::cell::{Cell, RefCell};

use rand::Rng;
use rayon::prelude::*;

use crate::linalg::{self, Matrix, Vector};
use crate::random::seeded_rng;

/// Cost function paired with an optional residual map `r` such that
/// `cost(ξ) = ‖r(ξ)‖²`.
pub struct Problem<'a> {
    pub cost: &'a (dyn Fn(&Vector) -> f64 + Sync),
    pub residual: Option<&'a (dyn Fn(&Vector) -> Vector + Sync)>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Dense grid over the box; the best grid point is returned.
    Grid { points_per_dim: usize },
    /// Local descents from the warm start and the best grid points.
    /// Gauss-Newton on the residual stack when one exists, simplex
    /// descent otherwise.
    MultiStart { starts: usize, grid_points: usize },
    /// Derivative-free simplex descent from the warm start only.
    Simplex,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Minimizer {
    pub strategy: Strategy,
    pub tol: f64,
    pub max_iter: usize,
    /// Half-width of the search box around the warm start.
    pub half_width: f64,
}

impl Default for Minimizer {
    fn default() -> Self {
        Self {
            strategy: Strategy::MultiStart {
                starts: 5,
                grid_points: 17,
            },
            tol: 1e-8,
            max_iter: 200,
            half_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinResult {
    pub point: Vector,
    pub value: f64,
    pub converged: bool,
    /// Budget ran out before the tolerance was met.
    pub degraded: bool,
    /// Another local minimum with nearly the same value lies far away.
    pub near_tie: bool,
    pub evaluations: usize,
}

/// Relative cost difference treated as a tie. Below it the cost cannot
/// rank two points, while the Gauss-Newton step can still improve them.
const ROUNDOFF: f64 = 1e-14;

/// Largest grid the dense strategy will enumerate.
const GRID_BUDGET: usize = 1_000_000;
/// Grid seeding for multi-start runs is used up to this dimension.
const GRID_SEED_MAX_DIM: usize = 3;

struct Tracker<'a> {
    f: &'a (dyn Fn(&Vector) -> f64 + Sync),
    best: RefCell<(Vector, f64)>,
    count: Cell<usize>,
}

impl<'a> Tracker<'a> {
    fn new(f: &'a (dyn Fn(&Vector) -> f64 + Sync), dim: usize) -> Self {
        Self {
            f,
            best: RefCell::new((Vector::zeros(dim), f64::INFINITY)),
            count: Cell::new(0),
        }
    }

    fn eval(&self, x: &Vector) -> f64 {
        let raw = (self.f)(x);
        let v = if raw.is_nan() { f64::INFINITY } else { raw };
        self.count.set(self.count.get() + 1);
        let mut best = self.best.borrow_mut();
        if v < best.1 {
            *best = (x.clone(), v);
        }
        v
    }

    fn best(&self) -> (Vector, f64) {
        self.best.borrow().clone()
    }
}

struct Local {
    point: Vector,
    value: f64,
    converged: bool,
    evaluations: usize,
}

fn grid_points(center: &Vector, half_width: f64, per_dim: usize) -> Vec<Vector> {
    let d = center.len();
    let per_dim = per_dim.max(1);
    let total = per_dim.checked_pow(d as u32).unwrap_or(usize::MAX);
    let per_dim = if total > GRID_BUDGET {
        (GRID_BUDGET as f64).powf(1.0 / d as f64).floor().max(1.0) as usize
    } else {
        per_dim
    };
    let step = if per_dim > 1 { 2.0 * half_width / (per_dim - 1) as f64 } else { 0.0 };
    let offset = if per_dim > 1 { half_width } else { 0.0 };
    let mut idx = vec![0usize; d];
    let mut out = Vec::new();
    loop {
        out.push(Vector::from_fn(d, |i, _| center[i] - offset + step * idx[i] as f64));
        let mut pos = d;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < per_dim {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn jacobian(res: &(dyn Fn(&Vector) -> Vector + Sync), x: &Vector, r0: &Vector) -> Matrix {
    let mut jac = Matrix::zeros(r0.len(), x.len());
    for j in 0..x.len() {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (res(&xp) - res(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn gauss_newton(
    res: &(dyn Fn(&Vector) -> Vector + Sync),
    cost: &Tracker<'_>,
    x0: &Vector,
    tol: f64,
    max_iter: usize,
) -> (Vector, bool) {
    let mut x = x0.clone();
    let mut r = res(&x);
    let mut f = cost.eval(&x);
    for _ in 0..max_iter {
        if f == 0.0 || !f.is_finite() {
            return (x, f == 0.0);
        }
        let jac = jacobian(res, &x, &r);
        let step = linalg::lstsq(&jac, &(-&r));
        // A step this short is taken (if it does not hurt) and ends the search.
        if step.norm() <= tol * (1.0 + x.norm()) {
            let xn = &x + &step;
            if cost.eval(&xn) <= f + ROUNDOFF * (1.0 + f.abs()) {
                x = xn;
            }
            return (x, true);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &step * t;
            let fnew = cost.eval(&xn);
            if fnew < f {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fnew)) => {
                x = xn;
                f = fnew;
                r = res(&x);
            }
            // No descent along the Gauss-Newton direction: roundoff floor
            // if the gradient is nearly orthogonal to the residual.
            None => {
                let grad = jac.transpose() * &r;
                return (x, grad.norm() <= tol.sqrt() * jac.norm() * r.norm());
            }
        }
    }
    (x, false)
}

fn nelder_mead(cost: &Tracker<'_>, x0: &Vector, step: f64, tol: f64, max_iter: usize) -> (Vector, bool) {
    let d = x0.len();
    let df = d as f64;
    // Dimension-adapted coefficients; they reduce to the classic ones at d = 2.
    let da = df.max(2.0);
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / da, 0.75 - 1.0 / (2.0 * da), 1.0 - 1.0 / da);
    let mut simplex: Vec<(Vector, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.clone(), cost.eval(x0)));
    for i in 0..d {
        let mut p = x0.clone();
        p[i] += step * (1.0 + x0[i].abs());
        let v = cost.eval(&p);
        simplex.push((p, v));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(p, _)| (p - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-15 * (1.0 + best.abs()) && diameter <= tol * (1.0 + simplex[0].0.amax()) {
            return (simplex[0].0.clone(), true);
        }
        let centroid = simplex[..d].iter().fold(Vector::zeros(d), |acc, (p, _)| acc + p) / df;
        let xr = &centroid + (&centroid - &simplex[d].0) * alpha;
        let fr = cost.eval(&xr);
        if fr < simplex[0].1 {
            let xe = &centroid + (&xr - &centroid) * gamma;
            let fe = cost.eval(&xe);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = &centroid + (&xr - &centroid) * rho;
                let fc = cost.eval(&xc);
                (xc, fc)
            } else {
                let xc = &centroid + (&simplex[d].0 - &centroid) * rho;
                let fc = cost.eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(simplex[d].1) {
                simplex[d] = (xc, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let p = &anchor + (&item.0 - &anchor) * sigma;
                    let v = cost.eval(&p);
                    *item = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0.clone(), false)
}

impl Minimizer {
    pub fn grid(points_per_dim: usize, half_width: f64) -> Self {
        Self {
            strategy: Strategy::Grid { points_per_dim },
            half_width,
            ..Self::default()
        }
    }

    pub fn simplex() -> Self {
        Self {
            strategy: Strategy::Simplex,
            ..Self::default()
        }
    }

    /// A single local descent from `start`, without seeding.
    pub fn descend(&self, problem: &Problem<'_>, start: &Vector) -> MinResult {
        let l = self.local(problem, start);
        MinResult {
            point: l.point,
            value: l.value,
            converged: l.converged,
            degraded: !l.converged,
            near_tie: false,
            evaluations: l.evaluations,
        }
    }

    fn local(&self, problem: &Problem<'_>, start: &Vector) -> Local {
        let tracker = Tracker::new(problem.cost, start.len());
        let (last, converged) = match problem.residual {
            Some(res) => gauss_newton(res, &tracker, start, self.tol, self.max_iter),
            None => nelder_mead(&tracker, start, 0.1 * self.half_width.max(1e-3), self.tol, 20 * self.max_iter * start.len().max(1)),
        };
        let (mut point, mut value) = tracker.best();
        let last_value = (problem.cost)(&last);
        if last_value <= value + ROUNDOFF * (1.0 + value.abs()) {
            point = last;
            value = last_value;
        }
        Local {
            point,
            value,
            converged,
            evaluations: tracker.count.get(),
        }
    }

    fn seeds(&self, problem: &Problem<'_>, center: &Vector, starts: usize, per_dim: usize) -> (Vec<Vector>, usize) {
        let d = center.len();
        let mut seeds = vec![center.clone()];
        let extra = starts.saturating_sub(1);
        if extra == 0 {
            return (seeds, 0);
        }
        if d <= GRID_SEED_MAX_DIM {
            let grid = grid_points(center, self.half_width, per_dim);
            let mut scored: Vec<(f64, usize)> = grid
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let v = (problem.cost)(p);
                    (if v.is_nan() { f64::INFINITY } else { v }, i)
                })
                .collect();
            let evals = scored.len();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, i) in scored {
                if seeds.len() > extra {
                    break;
                }
                if (&grid[i] - center).amax() > 0.0 {
                    seeds.push(grid[i].clone());
                }
            }
            (seeds, evals)
        } else {
            let mut rng = seeded_rng(0);
            for _ in 0..extra {
                seeds.push(Vector::from_fn(d, |i, _| center[i] + self.half_width * rng.gen_range(-1.0..=1.0)));
            }
            (seeds, 0)
        }
    }

    /// Minimize `problem.cost` starting from (and searching around) `center`.
    pub fn minimize(&self, problem: &Problem<'_>, center: &Vector) -> MinResult {
        match self.strategy {
            Strategy::Grid { points_per_dim } => {
                let grid = grid_points(center, self.half_width, points_per_dim);
                let evaluations = grid.len();
                let (point, value) = grid
                    .into_par_iter()
                    .map(|p| {
                        let v = (problem.cost)(&p);
                        (p, if v.is_nan() { f64::INFINITY } else { v })
                    })
                    .reduce_with(|a, b| if b.1 < a.1 { b } else { a })
                    .expect("grid is never empty");
                MinResult {
                    point,
                    value,
                    converged: true,
                    degraded: false,
                    near_tie: false,
                    evaluations,
                }
            }
            Strategy::Simplex => {
                let tracker = Tracker::new(problem.cost, center.len());
                let (_, converged) = nelder_mead(
                    &tracker,
                    center,
                    0.1 * self.half_width.max(1e-3),
                    self.tol,
                    20 * self.max_iter * center.len().max(1),
                );
                let (point, value) = tracker.best();
                MinResult {
                    point,
                    value,
                    converged,
                    degraded: !converged,
                    near_tie: false,
                    evaluations: tracker.count.get(),
                }
            }
            Strategy::MultiStart { starts, grid_points } => {
                let (seeds, seed_evals) = self.seeds(problem, center, starts.max(1), grid_points);
                let locals: Vec<Local> = seeds.par_iter().map(|s| self.local(problem, s)).collect();
                let mut best = 0;
                for (i, l) in locals.iter().enumerate() {
                    if l.value < locals[best].value {
                        best = i;
                    }
                }
                let b = &locals[best];
                let value_tol = self.tol * (1.0 + b.value.abs());
                let far = 1e-4 * (1.0 + b.point.norm());
                let near_tie = locals.iter().enumerate().any(|(i, l)| {
                    i != best && l.converged && (l.value - b.value).abs() <= value_tol && (&l.point - &b.point).norm() > far
                });
                MinResult {
                    point: b.point.clone(),
                    value: b.value,
                    converged: b.converged,
                    degraded: !b.converged,
                    near_tie,
                    evaluations: seed_evals + locals.iter().map(|l| l.evaluations).sum::<usize>(),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn grid_enumerates_box() {
        let g = grid_points(&v(&[0.0, 1.0]), 1.0, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], v(&[-1.0, 0.0]));
        assert_eq!(g[8], v(&[1.0, 2.0]));
        assert_eq!(grid_points(&v(&[0.5]), 1.0, 1), vec![v(&[0.5])]);
    }

    #[test]
    fn gauss_newton_solves_linear_least_squares_exactly() {
        let m = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, -1.0]);
        let b = v(&[1.0, 2.0, 3.0]);
        let res = |x: &Vector| &m * x - &b;
        let cost = |x: &Vector| res(x).norm_squared();
        let p = Problem {
            cost: &cost,
            residual: Some(&res),
        };
        let out = Minimizer::default().minimize(&p, &v(&[5.0, -5.0]));
        let exact = linalg::lstsq(&m, &b);
        assert!((&out.point - &exact).amax() < 1e-9);
        assert!(out.converged && !out.degraded && !out.near_tie);
    }

    #[test]
    fn cube_root_by_each_strategy() {
        let res = |x: &Vector| v(&[x[0].powi(3) - 8.0]);
        let cost = |x: &Vector| res(x).norm_squared();
        let with = Problem {
            cost: &cost,
            residual: Some(&res),
        };
        let without = Problem {
            cost: &cost,
            residual: None,
        };
        let gn = Minimizer::default().minimize(&with, &v(&[0.5]));
        assert!((gn.point[0] - 2.0).abs() < 1e-9);
        let nm = Minimizer::default().minimize(&without, &v(&[0.5]));
        assert!((nm.point[0] - 2.0).abs() < 1e-6, "{:?}", nm);
        let grid = Minimizer::grid(17, 2.0).minimize(&without, &v(&[0.0]));
        assert_eq!(grid.point[0], 2.0);
        let simplex = Minimizer::simplex().minimize(&without, &v(&[1.0]));
        assert!((simplex.point[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_wells_are_flagged() {
        let res = |x: &Vector| v(&[x[0] * x[0] - 1.0]);
        let cost = |x: &Vector| res(x).norm_squared();
        let p = Problem {
            cost: &cost,
            residual: Some(&res),
        };
        let out = Minimizer::default().minimize(&p, &v(&[0.0]));
        assert!((out.point[0].abs() - 1.0).abs() < 1e-9);
        assert!(out.near_tie);
    }

    #[test]
    fn result_beats_every_probe() {
        let cost = |x: &Vector| (x[0] - 0.3).abs() + (x[1] + 0.7).powi(2) + (3.0 * x[0]).sin() * 0.1;
        let p = Problem {
            cost: &cost,
            residual: None,
        };
        let center = v(&[0.0, 0.0]);
        let out = Minimizer::default().minimize(&p, &center);
        for g in grid_points(&center, 2.0, 17) {
            assert!(out.value <= cost(&g));
        }
    }

    #[test]
    fn high_dimension_uses_random_seeds() {
        let res = |x: &Vector| x - Vector::from_element(5, 1.0);
        let cost = |x: &Vector| res(x).norm_squared();
        let p = Problem {
            cost: &cost,
            residual: Some(&res),
        };
        let out = Minimizer::default().minimize(&p, &Vector::zeros(5));
        assert!((&out.point - Vector::from_element(5, 1.0)).amax() < 1e-9);
    }
}
