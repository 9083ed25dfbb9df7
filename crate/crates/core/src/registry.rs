//! Named example systems selectable from configuration files.

use std::sync::Arc;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nonlinear::StageCost;
use crate::system::{ControlledSystem, Declarations, FnControlled, FnSystem, InputSet};

pub const PLANTS: &[&str] = &["cubic_output", "rotation_saturated"];
pub const CONTROLLED: &[&str] = &["integer_walk", "input_affine_pendulum"];

fn number(params: &Map<String, Value>, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::param(key, "must be a finite number")),
    }
}

fn reject_unknown(params: &Map<String, Value>, known: &[&str]) -> Result<()> {
    for key in params.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::param(key.clone(), format!("unknown parameter; expected one of {known:?}")));
        }
    }
    Ok(())
}

/// Autonomous plant `x⁺ = f(x)`, `y = h(x)` by name.
///
/// * `cubic_output`: `f(x) = a·x`, `h(x) = x³` (param `a`, default 0.9).
/// * `rotation_saturated`: `f(x) = r·Rot(θ)x`, `h(x) = tanh(x₁)`
///   (params `theta` default 0.3, `radius` default 0.95).
pub fn builtin_plant(name: &str, params: &Map<String, Value>) -> Result<FnSystem> {
    match name {
        "cubic_output" => {
            reject_unknown(params, &["a"])?;
            let a = number(params, "a", 0.9)?;
            if a == 0.0 {
                return Err(Error::param("a", "must be nonzero"));
            }
            Ok(FnSystem::new(name, 1, 1, move |x| x * a, |x| x.map(|s| s * s * s)).with_declarations(Declarations {
                unique_stack_solution: true,
                optimal_observer_conditions: true,
            }))
        }
        "rotation_saturated" => {
            reject_unknown(params, &["theta", "radius"])?;
            let theta = number(params, "theta", 0.3)?;
            let radius = number(params, "radius", 0.95)?;
            let (c, s) = (theta.cos(), theta.sin());
            Ok(FnSystem::new(
                name,
                2,
                1,
                move |x| Vector::from_vec(vec![radius * (c * x[0] - s * x[1]), radius * (s * x[0] + c * x[1])]),
                |x| Vector::from_element(1, x[0].tanh()),
            )
            .with_declarations(Declarations {
                unique_stack_solution: theta.sin().abs() > 1e-12,
                optimal_observer_conditions: false,
            }))
        }
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}

/// Tracker plant by name, with its default stage cost and declared
/// equilibrium (if any).
///
/// * `integer_walk`: `f(x) = x`, `F(z, u) = z + u`, `U = {−1, 0, 1}`,
///   `ℓ(ξ, ζ) = |ξ − ζ|`.
/// * `input_affine_pendulum`: `f(x) = (x₁ + dt·x₂, x₂ − dt·sin x₁)`,
///   `F(z, u) = f(z) + u` with `u ∈ ℝ²` (param `dt`, default 0.1),
///   quadratic `ℓ` with identity weight.
pub fn builtin_controlled(
    name: &str,
    params: &Map<String, Value>,
) -> Result<(Arc<dyn ControlledSystem>, StageCost, Option<Vector>)> {
    match name {
        "integer_walk" => {
            reject_unknown(params, &[])?;
            let inputs = vec![Vector::from_element(1, -1.0), Vector::from_element(1, 0.0), Vector::from_element(1, 1.0)];
            let sys = FnControlled::new(name, 1, InputSet::Finite(inputs), |z, u| z + u, |x| x.clone());
            Ok((Arc::new(sys), StageCost::abs(), Some(Vector::zeros(1))))
        }
        "input_affine_pendulum" => {
            reject_unknown(params, &["dt"])?;
            let dt = number(params, "dt", 0.1)?;
            let f = move |x: &Vector| Vector::from_vec(vec![x[0] + dt * x[1], x[1] - dt * x[0].sin()]);
            let sys = FnControlled::new(name, 2, InputSet::unbounded(2), move |z, u| f(z) + u, f);
            let cost = StageCost::quadratic(crate::linalg::Matrix::identity(2, 2))?;
            Ok((Arc::new(sys), cost, Some(Vector::zeros(2))))
        }
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}
