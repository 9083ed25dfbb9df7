//! Seeded generation of random test systems.
//!
//! Entries are drawn uniformly from `[−1, 1]` and candidates are rejected
//! until the relevant stack at the minimal horizon `N = n` has
//! `σ_min / σ_max` above a margin. A pure rank test would accept pairs
//! that are observable in exact arithmetic but whose gains are dominated
//! by roundoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::system::{controllability_stack, observability_stack};

/// Default `σ_min / σ_max` threshold for accepted stacks.
pub const DEFAULT_MARGIN: f64 = 1e-2;

const MAX_ATTEMPTS: usize = 100_000;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

pub fn uniform_vector(rng: &mut impl Rng, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| scale * rng.gen_range(-1.0..=1.0))
}

/// `MMᵀ + I/2` with `M` uniform.
pub fn random_spd(rng: &mut impl Rng, dim: usize) -> Matrix {
    let m = uniform_matrix(rng, dim, dim);
    &m * m.transpose() + Matrix::identity(dim, dim) * 0.5
}

fn stack_ratio(stack: &Matrix, n: usize) -> f64 {
    let sv = linalg::singular_values(stack);
    if sv.len() < n || sv[0] == 0.0 {
        0.0
    } else {
        sv[n - 1] / sv[0]
    }
}

fn check_sizes(n: usize, k: usize, what: &str) -> Result<()> {
    if n == 0 || k == 0 {
        return Err(Error::param(what, "dimensions must be positive"));
    }
    Ok(())
}

/// Random `(A, C)` with `C` of size `p × n` and a well-conditioned
/// observability stack at `N = n`.
pub fn random_observable(rng: &mut impl Rng, n: usize, p: usize, margin: f64) -> Result<(Matrix, Matrix)> {
    check_sizes(n, p, "observable pair")?;
    for _ in 0..MAX_ATTEMPTS {
        let a = uniform_matrix(rng, n, n);
        let c = uniform_matrix(rng, p, n);
        if stack_ratio(&observability_stack(&a, &c, n)?, n) > margin {
            return Ok((a, c));
        }
    }
    Err(Error::Solver(format!("no observable pair found within {MAX_ATTEMPTS} draws")))
}

/// Random `(A, B)` with `B` of size `n × m` and a well-conditioned
/// controllability stack at `N = n`.
pub fn random_controllable(rng: &mut impl Rng, n: usize, m: usize, margin: f64) -> Result<(Matrix, Matrix)> {
    check_sizes(n, m, "controllable pair")?;
    for _ in 0..MAX_ATTEMPTS {
        let a = uniform_matrix(rng, n, n);
        let b = uniform_matrix(rng, n, m);
        if stack_ratio(&controllability_stack(&a, &b, n)?, n) > margin {
            return Ok((a, b));
        }
    }
    Err(Error::Solver(format!("no controllable pair found within {MAX_ATTEMPTS} draws")))
}
