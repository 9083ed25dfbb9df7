//! Small dense linear-algebra helpers shared by the synthesis modules.

use nalgebra::{Cholesky, DMatrix, DVector, FullPivLU, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivot ratio below which an LU factorization is treated as singular.
const LU_PIVOT_RATIO: f64 = 1e-14;

/// `[A^0, A^1, ..., A^k]` by repeated multiplication.
pub fn powers(a: &Matrix, k: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(Matrix::identity(a.nrows(), a.ncols()));
    for i in 0..k {
        let next = &out[i] * a;
        out.push(next);
    }
    out
}

pub fn mat_pow(a: &Matrix, k: usize) -> Matrix {
    let mut p = Matrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        p = &p * a;
    }
    p
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn vec_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Singular values, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let svd = SVD::new(m.clone(), false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, c| acc.max(c.norm()))
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn sym_eig_extremes(m: &Matrix) -> (f64, f64) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Factor `S` with `SᵀS = M` for a symmetric positive semidefinite `M`.
/// Negative eigenvalues produced by roundoff are clamped to zero.
pub fn psd_sqrt_factor(m: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()),
    );
    Matrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Check that `r` is symmetric with a strictly positive smallest eigenvalue.
pub fn check_spd(r: &Matrix, name: &str) -> Result<()> {
    if r.nrows() != r.ncols() || r.is_empty() {
        return Err(Error::param(name, "must be a non-empty square matrix"));
    }
    if !all_finite(r) {
        return Err(Error::param(name, "contains non-finite entries"));
    }
    let scale = max_abs(r).max(1.0);
    if max_abs(&(r - r.transpose())) > 1e-12 * scale {
        return Err(Error::param(name, "must be symmetric"));
    }
    let (lmin, _) = sym_eig_extremes(r);
    if lmin <= 0.0 {
        return Err(Error::param(
            name,
            format!("must be positive definite (smallest eigenvalue {lmin:e})"),
        ));
    }
    Ok(())
}

/// Solver for systems with a matrix expected to be symmetric positive
/// definite. Cholesky is attempted first; a full-pivot LU is kept as the
/// fallback for matrices that are nonsingular but numerically indefinite.
#[derive(Debug, Clone)]
pub enum SpdSolver {
    Cholesky(Cholesky<f64, nalgebra::Dyn>),
    Lu(FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl SpdSolver {
    pub fn new(m: &Matrix, what: &str) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim(what, "matrix must be square"));
        }
        if let Some(ch) = Cholesky::new(symmetrize(m)) {
            let l = ch.l_dirty();
            let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)].abs()).collect();
            let dmax = diag.iter().copied().fold(0.0, f64::max);
            let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
            if dmax > 0.0 && dmin / dmax > 1e-8 {
                return Ok(SpdSolver::Cholesky(ch));
            }
        }
        let lu = FullPivLU::new(m.clone());
        let u = lu.u();
        let piv: Vec<f64> = (0..u.nrows().min(u.ncols()))
            .map(|i| u[(i, i)].abs())
            .collect();
        let pmax = piv.iter().copied().fold(0.0, f64::max);
        let pmin = piv.iter().copied().fold(f64::INFINITY, f64::min);
        if pmax == 0.0 || pmin / pmax <= LU_PIVOT_RATIO {
            return Err(Error::Singular(what.to_string()));
        }
        Ok(SpdSolver::Lu(lu))
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        match self {
            SpdSolver::Cholesky(ch) => ch.solve(b),
            SpdSolver::Lu(lu) => lu.solve(b).expect("factorization checked nonsingular"),
        }
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        match self {
            SpdSolver::Cholesky(ch) => ch.solve(b),
            SpdSolver::Lu(lu) => lu.solve(b).expect("factorization checked nonsingular"),
        }
    }

    pub fn inverse(&self, n: usize) -> Matrix {
        self.solve(&Matrix::identity(n, n))
    }
}

/// Solve a square general system with a pivot-ratio singularity check.
pub fn solve_square(m: &Matrix, b: &Matrix, what: &str) -> Result<Matrix> {
    if m.nrows() != m.ncols() || m.nrows() != b.nrows() {
        return Err(Error::dim(what, "square system with matching right-hand side expected"));
    }
    let lu = FullPivLU::new(m.clone());
    let u = lu.u();
    let piv: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let pmax = piv.iter().copied().fold(0.0, f64::max);
    let pmin = piv.iter().copied().fold(f64::INFINITY, f64::min);
    if pmax == 0.0 || pmin / pmax <= LU_PIVOT_RATIO {
        return Err(Error::Singular(what.to_string()));
    }
    lu.solve(b).ok_or_else(|| Error::Singular(what.to_string()))
}

/// Minimum-norm least-squares solution `argmin ‖M x − b‖` via SVD.
pub fn lstsq(m: &Matrix, b: &Vector) -> Vector {
    if m.is_empty() {
        return Vector::zeros(m.ncols());
    }
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-13).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).unwrap_or_else(|_| Vector::zeros(m.ncols()))
}

/// `(Σ TᵢᵀRTᵢ)⁻¹T_lastᵀR` for the `p`-row blocks `Tᵢ` of `stack`, computed
/// as a least-squares solve against the weighted stack so the normal
/// matrix is never formed. `None` when `R` is not positive definite or
/// the stack is rank deficient.
pub fn weighted_stack_solve(stack: &Matrix, r: &Matrix) -> Option<Matrix> {
    let p = r.nrows();
    if p == 0 || !stack.nrows().is_multiple_of(p) || stack.nrows() < stack.ncols() {
        return None;
    }
    let blocks = stack.nrows() / p;
    let u = Cholesky::new(symmetrize(r))?.l().transpose();
    let mut m = Matrix::zeros(stack.nrows(), stack.ncols());
    for i in 0..blocks {
        m.rows_mut(i * p, p).copy_from(&(&u * stack.rows(i * p, p)));
    }
    let mut e = Matrix::zeros(stack.nrows(), p);
    e.rows_mut((blocks - 1) * p, p).copy_from(&u);
    let qr = m.qr();
    let rhs = qr.q().transpose() * e;
    qr.r().solve_upper_triangular(&rhs)
}

/// Quadratic form `vᵀ M v`.
pub fn quad_form(m: &Matrix, v: &Vector) -> f64 {
    v.dot(&(m * v))
}

/// `[e_1 ... e_n]` basis vector with a one in position `i`.
pub fn unit(n: usize, i: usize) -> Vector {
    let mut e = Vector::zeros(n);
    e[i] = 1.0;
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_match_repeated_product() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let p = powers(&a, 3);
        assert_eq!(p[3], Matrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]));
        assert_eq!(mat_pow(&a, 3), p[3]);
        assert_eq!(p[0], Matrix::identity(2, 2));
    }

    #[test]
    fn spectral_radius_of_rotation_is_scale() {
        let (c, s) = (0.3_f64.cos(), 0.3_f64.sin());
        let a = Matrix::from_row_slice(2, 2, &[c, -s, s, c]) * 0.7;
        assert!((spectral_radius(&a) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sqrt_factor_reconstructs() {
        let m = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt_factor(&m);
        assert!(max_abs(&(s.transpose() * &s - &m)) < 1e-12);
    }

    #[test]
    fn spd_solver_rejects_singular() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(SpdSolver::new(&m, "m"), Err(Error::Singular(_))));
    }

    #[test]
    fn spd_solver_falls_back_for_indefinite() {
        let m = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = SpdSolver::new(&m, "m").unwrap();
        assert!(matches!(s, SpdSolver::Lu(_)));
        let x = s.solve_vec(&Vector::from_vec(vec![2.0, 3.0]));
        assert!((x[0] - 3.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn check_spd_flags_problems() {
        assert!(check_spd(&Matrix::identity(2, 2), "R").is_ok());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(check_spd(&asym, "R").is_err());
        let indef = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(check_spd(&indef, "R").is_err());
    }
}
