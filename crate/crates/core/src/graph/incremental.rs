use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::batch::apply_step;
use super::linear::{LinearSystem, Step};
use super::{total_cost, Factor, FactorGraph, Landmark, NavState, SolverReport, Values, VarKey};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalOptions {
    /// A variable is relinearized when any 3-dof sub-block of its pending
    /// step has an ∞-norm above this (rad for rotation, m for position).
    pub relinearize_threshold: f64,
    /// Upper bound on solve/relinearize passes per update.
    pub max_passes: usize,
}

impl Default for IncrementalOptions {
    fn default() -> Self {
        Self {
            relinearize_threshold: 0.01,
            max_passes: 6,
        }
    }
}

/// Keeps a factored linearization of a growing graph and updates it in place.
///
/// The estimate is the linearization point retracted by the current step.
/// Only variables whose step exceeds the threshold are moved to a new
/// linearization point, and elimination restarts at the earliest column that
/// any change touches.
pub struct IncrementalSolver {
    graph: FactorGraph,
    options: IncrementalOptions,
    lin_point: Values,
    step: Step,
    system: LinearSystem,
    /// Factor ids adjacent to each variable.
    nav_adj: Vec<Vec<usize>>,
    lm_adj: Vec<Vec<usize>>,
}

impl IncrementalSolver {
    pub fn new(options: IncrementalOptions) -> Self {
        Self {
            graph: FactorGraph::new(),
            options,
            lin_point: Values::default(),
            step: Step {
                nav: Vec::new(),
                landmarks: Vec::new(),
            },
            system: LinearSystem::new(),
            nav_adj: Vec::new(),
            lm_adj: Vec::new(),
        }
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn num_nav(&self) -> usize {
        self.graph.num_nav()
    }

    /// Registers a landmark; it takes part in the next [`update`](Self::update).
    pub fn add_landmark(&mut self, landmark: Landmark) -> VarKey {
        self.lin_point.landmarks.push(landmark);
        self.step.landmarks.push(Default::default());
        self.lm_adj.push(Vec::new());
        self.graph.add_landmark(landmark)
    }

    pub fn estimate(&self) -> Values {
        apply_step(&self.lin_point, &self.step)
    }

    /// Appends nodes (keys continue from [`num_nav`](Self::num_nav)) and
    /// factors, then re-solves.
    pub fn update(&mut self, new_nodes: Vec<NavState>, new_factors: Vec<Factor>) -> Result<SolverReport> {
        let start = Instant::now();
        if new_nodes.is_empty() && new_factors.is_empty() {
            let cost = total_cost(&self.graph, &self.estimate())?;
            return Ok(SolverReport {
                iterations: 0,
                initial_cost: cost,
                final_cost: cost,
                converged: true,
                solve_time: start.elapsed().as_secs_f64(),
                relinearized: 0,
            });
        }

        let mut before = self.estimate();
        for node in new_nodes {
            self.graph.add_nav_node(node.timestamp_ns, node)?;
            let node = *self.graph.initial_values().nav.last().expect("just added");
            self.lin_point.nav.push(node);
            before.nav.push(node);
            self.step.nav.push(nalgebra::DVector::zeros(super::NAV_DIM));
            self.nav_adj.push(Vec::new());
        }
        self.system.resize(self.graph.num_nav(), self.graph.num_landmarks());
        for f in new_factors {
            let id = self.graph.add_factor(f)?;
            let f = &self.graph.factors()[id];
            for key in f.keys() {
                match *key {
                    VarKey::Nav(i) => self.nav_adj[i].push(id),
                    VarKey::Landmark(i) => self.lm_adj[i].push(id),
                }
            }
            self.system.set_factor(id, f.linearize(&self.lin_point));
        }
        let initial_cost = total_cost(&self.graph, &before)?;

        let mut passes = 0;
        let mut relinearized = 0;
        let mut converged = false;
        while passes < self.options.max_passes {
            passes += 1;
            self.system
                .factorize()
                .map_err(|blocks| Error::Underconstrained { blocks })?;
            self.step = self.system.solve();
            let moved = self.relinearize();
            relinearized += moved;
            if moved == 0 {
                converged = true;
                break;
            }
        }
        if !converged {
            // Leave a step consistent with the latest linearization.
            self.system
                .factorize()
                .map_err(|blocks| Error::Underconstrained { blocks })?;
            self.step = self.system.solve();
        }
        let final_cost = total_cost(&self.graph, &self.estimate())?;
        Ok(SolverReport {
            iterations: passes,
            initial_cost,
            final_cost,
            converged,
            solve_time: start.elapsed().as_secs_f64(),
            relinearized,
        })
    }

    /// Moves linearization points of variables with large steps and refreshes
    /// the adjacent factors. Returns the number of variables moved.
    fn relinearize(&mut self) -> usize {
        let thr = self.options.relinearize_threshold;
        let mut touched = Vec::new();
        let mut moved = 0;
        for i in 0..self.lin_point.nav.len() {
            let d = &self.step.nav[i];
            let large = (0..5).any(|b| d.rows(3 * b, 3).amax() > thr);
            if large {
                let t = super::NavTangent::from_column_slice(d.as_slice());
                self.lin_point.nav[i] = self.lin_point.nav[i].retract(&t);
                self.step.nav[i].fill(0.0);
                touched.extend_from_slice(&self.nav_adj[i]);
                moved += 1;
            }
        }
        for k in 0..self.lin_point.landmarks.len() {
            if self.step.landmarks[k].amax() > thr {
                self.lin_point.landmarks[k].position += self.step.landmarks[k];
                self.step.landmarks[k].fill(0.0);
                touched.extend_from_slice(&self.lm_adj[k]);
                moved += 1;
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for id in touched {
            let lf = self.graph.factors()[id].linearize(&self.lin_point);
            self.system.set_factor(id, lf);
        }
        moved
    }
}
