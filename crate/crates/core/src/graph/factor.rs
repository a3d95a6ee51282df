use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{LandmarkKey, NavKey, Values, VarKey, NAV_DIM};
use crate::error::{Error, Result};
use crate::imu::{bias_residual, imu_residuals, residual_jacobians, ImuBias, ImuNoiseParams, PreintegratedImu};
use crate::manifold::{right_jacobian_inv, Pose3};
use crate::toa::{range_gradient, range_residual};

/// Largest accepted covariance condition number.
pub const MAX_CONDITION: f64 = 1e12;

/// Huber threshold on whitened residuals, i.e. 1.345σ.
pub const HUBER_K: f64 = 1.345;

/// Measurement payload of a factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measurement {
    /// Residual `(log(R₀ᵀR), p − p₀)`.
    PriorPose {
        pose: Pose3,
    },
    PriorVelocity {
        velocity: Vector3<f64>,
    },
    PriorBias {
        bias: ImuBias,
    },
    ImuPreintegrated {
        preintegrated: PreintegratedImu,
        gravity: Vector3<f64>,
    },
    BiasWalk,
    /// Residual `d − ‖p − L‖`.
    ToaRange {
        distance: f64,
    },
    LandmarkPrior {
        position: Vector3<f64>,
    },
}

impl Measurement {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Measurement::PriorPose { .. } => "prior_pose",
            Measurement::PriorVelocity { .. } => "prior_velocity",
            Measurement::PriorBias { .. } => "prior_bias",
            Measurement::ImuPreintegrated { .. } => "imu_preintegrated",
            Measurement::BiasWalk => "bias_walk",
            Measurement::ToaRange { .. } => "toa_range",
            Measurement::LandmarkPrior { .. } => "landmark_prior",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Measurement::PriorPose { .. } => 6,
            Measurement::PriorVelocity { .. } => 3,
            Measurement::PriorBias { .. } => 6,
            Measurement::ImuPreintegrated { .. } => 9,
            Measurement::BiasWalk => 6,
            Measurement::ToaRange { .. } => 1,
            Measurement::LandmarkPrior { .. } => 3,
        }
    }

    fn expected_keys(&self) -> &'static [KeyKind] {
        use KeyKind::*;
        match self {
            Measurement::PriorPose { .. } | Measurement::PriorVelocity { .. } | Measurement::PriorBias { .. } => &[Nav],
            Measurement::ImuPreintegrated { .. } | Measurement::BiasWalk => &[Nav, Nav],
            Measurement::ToaRange { .. } => &[Nav, Landmark],
            Measurement::LandmarkPrior { .. } => &[Landmark],
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum KeyKind {
    Nav,
    Landmark,
}

/// Serialized form of a [`Factor`]; the whitening matrix is rebuilt on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorRecord {
    pub keys: Vec<VarKey>,
    pub measurement: Measurement,
    /// Row-major covariance.
    pub covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub huber: bool,
}

/// A residual-generating constraint with Gaussian noise model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "FactorRecord", try_from = "FactorRecord")]
pub struct Factor {
    keys: Vec<VarKey>,
    measurement: Measurement,
    covariance: DMatrix<f64>,
    /// Inverse of the lower Cholesky factor of the covariance.
    whitener: DMatrix<f64>,
    huber: bool,
}

impl From<Factor> for FactorRecord {
    fn from(f: Factor) -> Self {
        FactorRecord {
            covariance: f.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
            keys: f.keys,
            measurement: f.measurement,
            huber: f.huber,
        }
    }
}

impl TryFrom<FactorRecord> for Factor {
    type Error = Error;
    fn try_from(r: FactorRecord) -> Result<Self> {
        let n = r.covariance.len();
        if r.covariance.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument("covariance must be square".into()));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| r.covariance[i][j]);
        let mut f = Factor::new(r.keys, r.measurement, cov)?;
        f.huber = r.huber;
        Ok(f)
    }
}

impl Factor {
    /// Validates key kinds against the measurement and the covariance shape,
    /// symmetry and conditioning.
    pub fn new(keys: Vec<VarKey>, measurement: Measurement, covariance: DMatrix<f64>) -> Result<Self> {
        let expected = measurement.expected_keys();
        let kinds_ok = keys.len() == expected.len()
            && keys.iter().zip(expected).all(|(k, e)| {
                matches!(
                    (k, e),
                    (VarKey::Nav(_), KeyKind::Nav) | (VarKey::Landmark(_), KeyKind::Landmark)
                )
            });
        if !kinds_ok {
            return Err(Error::Structural(format!(
                "{} factor cannot connect {:?}",
                measurement.kind_name(),
                keys
            )));
        }
        if keys.len() == 2 && keys[0] == keys[1] {
            return Err(Error::Structural(format!(
                "{} factor connects {:?} to itself",
                measurement.kind_name(),
                keys[0]
            )));
        }
        let dim = measurement.dim();
        if covariance.shape() != (dim, dim) {
            return Err(Error::InvalidArgument(format!(
                "{} factor expects a {dim}x{dim} covariance, got {:?}",
                measurement.kind_name(),
                covariance.shape()
            )));
        }
        let whitener = whitener_for(&covariance)?;
        Ok(Self {
            keys,
            measurement,
            covariance,
            whitener,
            huber: false,
        })
    }

    pub fn prior_pose(key: NavKey, pose: Pose3, sigma_rotation: f64, sigma_translation: f64) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            sigma_rotation.powi(2),
            sigma_rotation.powi(2),
            sigma_rotation.powi(2),
            sigma_translation.powi(2),
            sigma_translation.powi(2),
            sigma_translation.powi(2),
        ]));
        Self::new(vec![VarKey::Nav(key)], Measurement::PriorPose { pose }, cov)
    }

    pub fn prior_velocity(key: NavKey, velocity: Vector3<f64>, sigma: f64) -> Result<Self> {
        Self::new(
            vec![VarKey::Nav(key)],
            Measurement::PriorVelocity { velocity },
            DMatrix::identity(3, 3) * sigma * sigma,
        )
    }

    pub fn prior_bias(key: NavKey, bias: ImuBias, sigma_gyro: f64, sigma_accel: f64) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_fn(6, |i, _| {
            if i < 3 {
                sigma_gyro.powi(2)
            } else {
                sigma_accel.powi(2)
            }
        }));
        Self::new(vec![VarKey::Nav(key)], Measurement::PriorBias { bias }, cov)
    }

    /// IMU factor whose covariance is the propagated preintegration covariance.
    pub fn imu(from: NavKey, to: NavKey, preintegrated: PreintegratedImu, gravity: Vector3<f64>) -> Result<Self> {
        if !(preintegrated.delta_t > 0.0) {
            return Err(Error::InvalidArgument("IMU factor needs delta_t > 0".into()));
        }
        let cov = DMatrix::from_fn(9, 9, |i, j| preintegrated.covariance[(i, j)]);
        Self::new(
            vec![VarKey::Nav(from), VarKey::Nav(to)],
            Measurement::ImuPreintegrated { preintegrated, gravity },
            cov,
        )
    }

    /// Random-walk factor with covariance `density² · dt` per axis.
    pub fn bias_walk(from: NavKey, to: NavKey, noise: &ImuNoiseParams, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("bias walk needs dt > 0".into()));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_fn(6, |i, _| {
            if i < 3 {
                noise.gyro_bias_random_walk.powi(2) * dt
            } else {
                noise.accel_bias_random_walk.powi(2) * dt
            }
        }));
        Self::new(vec![VarKey::Nav(from), VarKey::Nav(to)], Measurement::BiasWalk, cov)
    }

    pub fn range(node: NavKey, landmark: LandmarkKey, distance: f64, variance: f64) -> Result<Self> {
        Self::new(
            vec![VarKey::Nav(node), VarKey::Landmark(landmark)],
            Measurement::ToaRange { distance },
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn landmark_prior(key: LandmarkKey, position: Vector3<f64>, sigma: f64) -> Result<Self> {
        Self::new(
            vec![VarKey::Landmark(key)],
            Measurement::LandmarkPrior { position },
            DMatrix::identity(3, 3) * sigma * sigma,
        )
    }

    /// Enables the Huber kernel (range factors only).
    pub fn with_huber(mut self, enabled: bool) -> Self {
        self.huber = enabled && matches!(self.measurement, Measurement::ToaRange { .. });
        self
    }

    pub fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn is_robust(&self) -> bool {
        self.huber
    }

    /// Unwhitened residual.
    pub fn residual(&self, values: &Values) -> DVector<f64> {
        self.evaluate(values, false).0
    }

    /// Unwhitened Jacobians of [`residual`](Self::residual), one per key, with
    /// respect to the tangent of that variable.
    pub fn jacobians(&self, values: &Values) -> Vec<DMatrix<f64>> {
        self.evaluate(values, true).1
    }

    /// Cost contribution: squared Mahalanobis norm, or the Huber equivalent.
    pub fn cost(&self, values: &Values) -> f64 {
        let e = &self.whitener * self.residual(values);
        robust_cost(e.norm_squared(), self.huber)
    }

    /// Whitened (and robustly reweighted) residual and Jacobians.
    pub(crate) fn linearize(&self, values: &Values) -> LinearizedFactor {
        let (r, jac) = self.evaluate(values, true);
        let mut e = &self.whitener * r;
        let mut jac: Vec<DMatrix<f64>> = jac.into_iter().map(|j| &self.whitener * j).collect();
        if self.huber {
            let sq = e.norm_squared();
            let w = huber_weight(sq.sqrt()).sqrt();
            if w < 1.0 {
                e *= w;
                jac.iter_mut().for_each(|j| *j *= w);
            }
        }
        LinearizedFactor {
            keys: self.keys.clone(),
            residual: e,
            jacobians: jac,
        }
    }

    fn evaluate(&self, values: &Values, with_jacobians: bool) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let nav = |k: &VarKey| match k {
            VarKey::Nav(i) => &values.nav[*i],
            VarKey::Landmark(_) => unreachable!("validated at construction"),
        };
        let lm = |k: &VarKey| match k {
            VarKey::Landmark(i) => &values.landmarks[*i],
            VarKey::Nav(_) => unreachable!("validated at construction"),
        };
        let mut jac = Vec::new();
        let r = match &self.measurement {
            Measurement::PriorPose { pose } => {
                let s = nav(&self.keys[0]);
                let rot = pose.rotation.local(&s.pose.rotation);
                let tr = s.pose.translation - pose.translation;
                if with_jacobians {
                    let mut j = DMatrix::zeros(6, NAV_DIM);
                    j.view_mut((0, 0), (3, 3)).copy_from(&right_jacobian_inv(&rot));
                    j.view_mut((3, 3), (3, 3)).fill_with_identity();
                    jac.push(j);
                }
                DVector::from_iterator(6, rot.iter().chain(tr.iter()).copied())
            }
            Measurement::PriorVelocity { velocity } => {
                let s = nav(&self.keys[0]);
                if with_jacobians {
                    let mut j = DMatrix::zeros(3, NAV_DIM);
                    j.view_mut((0, 6), (3, 3)).fill_with_identity();
                    jac.push(j);
                }
                DVector::from_column_slice((s.velocity - velocity).as_slice())
            }
            Measurement::PriorBias { bias } => {
                let s = nav(&self.keys[0]);
                if with_jacobians {
                    let mut j = DMatrix::zeros(6, NAV_DIM);
                    j.view_mut((0, 9), (6, 6)).fill_with_identity();
                    jac.push(j);
                }
                DVector::from_column_slice(bias_residual(bias, &s.bias).as_slice())
            }
            Measurement::ImuPreintegrated { preintegrated, gravity } => {
                let (si, sj) = (nav(&self.keys[0]), nav(&self.keys[1]));
                if with_jacobians {
                    let j = residual_jacobians(preintegrated, si, sj, gravity);
                    jac.push(DMatrix::from_column_slice(9, NAV_DIM, j.wrt_i.as_slice()));
                    jac.push(DMatrix::from_column_slice(9, NAV_DIM, j.wrt_j.as_slice()));
                }
                DVector::from_column_slice(imu_residuals(preintegrated, si, sj, gravity).as_slice())
            }
            Measurement::BiasWalk => {
                let (si, sj) = (nav(&self.keys[0]), nav(&self.keys[1]));
                if with_jacobians {
                    let mut ji = DMatrix::zeros(6, NAV_DIM);
                    ji.view_mut((0, 9), (6, 6)).fill_with_identity();
                    let jj = ji.clone();
                    jac.push(-ji);
                    jac.push(jj);
                }
                DVector::from_column_slice(bias_residual(&si.bias, &sj.bias).as_slice())
            }
            Measurement::ToaRange { distance } => {
                let s = nav(&self.keys[0]);
                let l = lm(&self.keys[1]);
                let p = &s.pose.translation;
                if with_jacobians {
                    let mut jn = DMatrix::zeros(1, NAV_DIM);
                    let mut jl = DMatrix::zeros(1, 3);
                    match range_gradient(p, &l.position) {
                        Some(g) => {
                            jn.view_mut((0, 3), (1, 3)).copy_from(&g.transpose());
                            jl.copy_from(&(-g.transpose()));
                        }
                        None => log::warn!(
                            "degenerate range: node {:?} coincides with station {}",
                            self.keys[0],
                            l.station_id
                        ),
                    }
                    jac.push(jn);
                    jac.push(jl);
                }
                DVector::from_element(1, range_residual(p, &l.position, *distance))
            }
            Measurement::LandmarkPrior { position } => {
                let l = lm(&self.keys[0]);
                if with_jacobians {
                    jac.push(DMatrix::identity(3, 3));
                }
                DVector::from_column_slice((l.position - position).as_slice())
            }
        };
        (r, jac)
    }
}

fn whitener_for(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-9 * cov.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidArgument(format!(
            "covariance is not symmetric ({asym:.3e})"
        )));
    }
    let eig = cov.clone().symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    if !(min > 0.0) || max / min >= MAX_CONDITION {
        return Err(Error::InvalidArgument(format!(
            "covariance is not safely invertible (eigenvalues in [{min:.3e}, {max:.3e}])"
        )));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let l = chol.l();
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::InvalidArgument("covariance factor is singular".into()))
}

fn huber_weight(abs_e: f64) -> f64 {
    if abs_e <= HUBER_K {
        1.0
    } else {
        HUBER_K / abs_e
    }
}

/// `e²` below the Huber threshold and `2k|e| − k²` above it.
fn robust_cost(squared: f64, huber: bool) -> f64 {
    let abs_e = squared.sqrt();
    if huber && abs_e > HUBER_K {
        2.0 * HUBER_K * abs_e - HUBER_K * HUBER_K
    } else {
        squared
    }
}

/// Factor linearized at a fixed point, in whitened units.
#[derive(Clone, Debug)]
pub(crate) struct LinearizedFactor {
    pub keys: Vec<VarKey>,
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}
