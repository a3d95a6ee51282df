//! Factor graph over navigation states and base-station landmarks, solved as a
//! sparse nonlinear least-squares problem in batch or incremental mode.
//!
//! Variables are ordered by node timestamp with all landmarks last. Each
//! navigation state has a 15-dim tangent `(δθ, δp, δv, δb^g, δb^a)` with the
//! retraction `R ← R·exp(δθ)`, `p ← p + δp` and plain addition elsewhere.

mod batch;
mod factor;
mod incremental;
mod linear;

use std::fmt;
use std::path::Path;

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

pub use batch::{gradient_amax, solve_batch, BatchOptions};
pub use factor::{Factor, FactorRecord, Measurement, HUBER_K, MAX_CONDITION};
pub use incremental::{IncrementalOptions, IncrementalSolver};

use crate::error::{Error, Result};
use crate::imu::ImuBias;
use crate::manifold::Pose3;

pub const NAV_DIM: usize = 15;
pub const LANDMARK_DIM: usize = 3;

pub type NavKey = usize;
pub type LandmarkKey = usize;
pub type FactorKey = usize;
pub type NavTangent = SVector<f64, NAV_DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKey {
    Nav(NavKey),
    Landmark(LandmarkKey),
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::Nav(i) => write!(f, "nav[{i}]"),
            VarKey::Landmark(i) => write!(f, "landmark[{i}]"),
        }
    }
}

/// Pose, velocity and IMU biases at one graph node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub pose: Pose3,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
    pub timestamp_ns: i64,
}

impl NavState {
    pub fn new(pose: Pose3, velocity: Vector3<f64>, timestamp_ns: i64) -> Self {
        Self {
            pose,
            velocity,
            bias: ImuBias::default(),
            timestamp_ns,
        }
    }

    pub fn retract(&self, delta: &NavTangent) -> NavState {
        let mut out = *self;
        out.pose.rotation = self.pose.rotation.retract(&delta.fixed_rows::<3>(0).into_owned());
        out.pose.translation += delta.fixed_rows::<3>(3);
        out.velocity += delta.fixed_rows::<3>(6);
        out.bias.gyro += delta.fixed_rows::<3>(9);
        out.bias.accel += delta.fixed_rows::<3>(12);
        out
    }

    /// Tangent `d` with `self.retract(d) == other`.
    pub fn local(&self, other: &NavState) -> NavTangent {
        let mut d = NavTangent::zeros();
        d.fixed_rows_mut::<3>(0)
            .copy_from(&self.pose.rotation.local(&other.pose.rotation));
        d.fixed_rows_mut::<3>(3)
            .copy_from(&(other.pose.translation - self.pose.translation));
        d.fixed_rows_mut::<3>(6).copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(9).copy_from(&(other.bias.gyro - self.bias.gyro));
        d.fixed_rows_mut::<3>(12)
            .copy_from(&(other.bias.accel - self.bias.accel));
        d
    }
}

/// Name of the tangent sub-block holding dof `d` of a navigation state.
pub(crate) fn nav_block_name(d: usize) -> &'static str {
    ["rotation", "position", "velocity", "gyro_bias", "accel_bias"][d / 3]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub station_id: u32,
    pub position: Vector3<f64>,
}

/// Values for every variable of a graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub nav: Vec<NavState>,
    pub landmarks: Vec<Landmark>,
}

impl Values {
    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.nav.iter().map(|s| s.pose.translation)
    }
}

/// Convergence summary of one solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Seconds.
    pub solve_time: f64,
    /// Variables whose linearization point was moved.
    pub relinearized: usize,
}

/// Variables, factors and the initial guess for each variable.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    initial: Values,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a navigation node; timestamps must be strictly increasing.
    pub fn add_nav_node(&mut self, timestamp_ns: i64, initial_guess: NavState) -> Result<VarKey> {
        if let Some(last) = self.initial.nav.last() {
            if timestamp_ns <= last.timestamp_ns {
                return Err(Error::Ordering(format!(
                    "node at t = {timestamp_ns} ns is not after the previous node at t = {} ns",
                    last.timestamp_ns
                )));
            }
        }
        let mut state = initial_guess;
        state.timestamp_ns = timestamp_ns;
        self.initial.nav.push(state);
        Ok(VarKey::Nav(self.initial.nav.len() - 1))
    }

    pub fn add_landmark(&mut self, landmark: Landmark) -> VarKey {
        self.initial.landmarks.push(landmark);
        VarKey::Landmark(self.initial.landmarks.len() - 1)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<FactorKey> {
        for key in factor.keys() {
            let exists = match key {
                VarKey::Nav(i) => *i < self.initial.nav.len(),
                VarKey::Landmark(i) => *i < self.initial.landmarks.len(),
            };
            if !exists {
                return Err(Error::Structural(format!(
                    "{} factor references missing variable {key}",
                    factor.measurement().kind_name()
                )));
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn num_nav(&self) -> usize {
        self.initial.nav.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.initial.landmarks.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn initial_values(&self) -> &Values {
        &self.initial
    }

    pub fn landmark_key(&self, station_id: u32) -> Option<VarKey> {
        self.initial
            .landmarks
            .iter()
            .position(|l| l.station_id == station_id)
            .map(VarKey::Landmark)
    }

    fn check_values(&self, values: &Values) -> Result<()> {
        if values.nav.len() != self.num_nav() || values.landmarks.len() != self.num_landmarks() {
            return Err(Error::Structural(format!(
                "values cover {} nodes / {} landmarks, graph has {} / {}",
                values.nav.len(),
                values.landmarks.len(),
                self.num_nav(),
                self.num_landmarks()
            )));
        }
        Ok(())
    }

    /// Writes the graph as JSON: `{"variables": {...}, "factors": [...]}`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&GraphDocument::from(self))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::parse(path, 0, m),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GraphDocument::from(self)).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut graph = FactorGraph::new();
        for lm in doc.variables.landmarks {
            graph.add_landmark(lm);
        }
        for s in doc.variables.nav {
            graph.add_nav_node(s.timestamp_ns, s)?;
        }
        for f in doc.factors {
            graph.add_factor(f)?;
        }
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    variables: Values,
    factors: Vec<Factor>,
}

impl From<&FactorGraph> for GraphDocument {
    fn from(g: &FactorGraph) -> Self {
        GraphDocument {
            variables: g.initial.clone(),
            factors: g.factors.clone(),
        }
    }
}

/// Sum of squared Mahalanobis norms of every factor residual at `values`.
pub fn total_cost(graph: &FactorGraph, values: &Values) -> Result<f64> {
    graph.check_values(values)?;
    Ok(graph.factors.iter().map(|f| f.cost(values)).sum())
}
