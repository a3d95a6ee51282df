use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::linear::{LinearSystem, Step};
use super::{total_cost, FactorGraph, NavTangent, SolverReport, Values};
use crate::error::{Error, Result};

/// Levenberg-Marquardt settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_decrease: f64,
    /// Stop when `‖δ‖∞` falls below this.
    pub step_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_decrease: 1e-8,
            step_tolerance: 1e-10,
            initial_lambda: 1e-5,
        }
    }
}

const MAX_LAMBDA: f64 = 1e12;

pub(crate) fn apply_step(values: &Values, step: &Step) -> Values {
    let mut out = values.clone();
    for (s, d) in out.nav.iter_mut().zip(&step.nav) {
        *s = s.retract(&NavTangent::from_column_slice(d.as_slice()));
    }
    for (l, d) in out.landmarks.iter_mut().zip(&step.landmarks) {
        l.position += d;
    }
    out
}

pub(crate) fn linearize_all(system: &mut LinearSystem, graph: &FactorGraph, values: &Values) {
    for (id, f) in graph.factors().iter().enumerate() {
        system.set_factor(id, f.linearize(values));
    }
}

/// Minimizes the total cost from `initial` with Levenberg-Marquardt.
///
/// Fails with [`Error::Underconstrained`] when the undamped normal matrix at
/// `initial` is not positive definite.
pub fn solve_batch(graph: &FactorGraph, initial: &Values, options: &BatchOptions) -> Result<(Values, SolverReport)> {
    let start = Instant::now();
    graph.check_values(initial)?;
    let mut system = LinearSystem::new();
    system.resize(graph.num_nav(), graph.num_landmarks());
    linearize_all(&mut system, graph, initial);
    system
        .factorize()
        .map_err(|blocks| Error::Underconstrained { blocks })?;

    let mut values = initial.clone();
    let initial_cost = total_cost(graph, &values)?;
    let mut cost = initial_cost;
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iterations {
        iterations += 1;
        system.set_damping(lambda);
        system
            .factorize()
            .map_err(|blocks| Error::Underconstrained { blocks })?;
        let step = system.solve();
        if step.amax() < options.step_tolerance {
            converged = true;
            break;
        }
        let candidate = apply_step(&values, &step);
        let new_cost = total_cost(graph, &candidate)?;
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost;
            values = candidate;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-15);
            linearize_all(&mut system, graph, &values);
            if decrease < options.relative_decrease {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                // No descent left at any damping: a stationary point.
                converged = true;
                break;
            }
        }
    }
    log::debug!("batch: {iterations} iterations, cost {initial_cost:.6e} -> {cost:.6e}");
    Ok((
        values,
        SolverReport {
            iterations,
            initial_cost,
            final_cost: cost,
            converged,
            solve_time: start.elapsed().as_secs_f64(),
            relinearized: 0,
        },
    ))
}

/// `‖Jᵀe‖∞` of the whitened problem at `values`.
pub fn gradient_amax(graph: &FactorGraph, values: &Values) -> f64 {
    let mut system = LinearSystem::new();
    system.resize(graph.num_nav(), graph.num_landmarks());
    linearize_all(&mut system, graph, values);
    system.gradient_amax()
}
