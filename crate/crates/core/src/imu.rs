//! IMU preintegration between graph nodes and the residuals it induces.
//!
//! Error-state ordering for the preintegrated measurement is (δθ, δp, δv).
//! Navigation-state tangent ordering is (δθ, δp, δv, δb^g, δb^a), see
//! [`crate::graph::NavState`].

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NavState;
use crate::manifold::{right_jacobian, right_jacobian_inv, skew, Rotation3};

/// Largest accepted interval between consecutive IMU samples.
pub const MAX_SAMPLE_GAP: f64 = 0.1;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;
pub type Vector6 = SVector<f64, 6>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp_ns: i64,
    /// Body angular rate, rad/s.
    pub angular_velocity: Vector3<f64>,
    /// Specific force in the body frame, m/s².
    pub linear_acceleration: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_bias_random_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_random_walk: f64,
    /// World-frame gravity, m/s².
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_random_walk: 2.0e-5,
            accel_bias_random_walk: 3.0e-3,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<()> {
        let densities = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_random_walk,
            self.accel_bias_random_walk,
        ];
        if densities.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "IMU noise densities must be positive, got {densities:?}"
            )));
        }
        let g = self.gravity.norm();
        if !(9.0..=10.5).contains(&g) {
            return Err(Error::InvalidArgument(format!("|gravity| = {g} outside [9.0, 10.5]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }
}

/// Sensitivities of the preintegrated deltas to the bias linearization point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasJacobians {
    /// ∂(ΔR) / ∂b^g, right-perturbation.
    pub rotation_gyro: Matrix3<f64>,
    pub position_gyro: Matrix3<f64>,
    pub position_accel: Matrix3<f64>,
    pub velocity_gyro: Matrix3<f64>,
    pub velocity_accel: Matrix3<f64>,
}

/// Relative motion condensed from the IMU samples between two nodes.
///
/// Deltas are integrated at `bias`; [`corrected`](Self::corrected) moves them
/// to a nearby bias to first order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub delta_rotation: Rotation3,
    pub delta_position: Vector3<f64>,
    pub delta_velocity: Vector3<f64>,
    /// Seconds.
    pub delta_t: f64,
    /// Bias subtracted from every sample, fixed since the last reset.
    pub bias: ImuBias,
    /// Covariance over (δθ, δp, δv).
    pub covariance: Matrix9,
    pub bias_jacobians: BiasJacobians,
}

/// Preintegrated deltas evaluated at a specific bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedDeltas {
    pub rotation: Rotation3,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl PreintegratedImu {
    pub fn new(bias: ImuBias) -> Self {
        Self {
            delta_rotation: Rotation3::identity(),
            delta_position: Vector3::zeros(),
            delta_velocity: Vector3::zeros(),
            delta_t: 0.0,
            bias,
            covariance: Matrix9::zeros(),
            bias_jacobians: BiasJacobians::default(),
        }
    }

    /// Deltas at `bias`, first order in `bias − self.bias`.
    pub fn corrected(&self, bias: &ImuBias) -> CorrectedDeltas {
        let dbg = bias.gyro - self.bias.gyro;
        let dba = bias.accel - self.bias.accel;
        let j = &self.bias_jacobians;
        CorrectedDeltas {
            rotation: self.delta_rotation.compose(&Rotation3::exp(&(j.rotation_gyro * dbg))),
            position: self.delta_position + j.position_gyro * dbg + j.position_accel * dba,
            velocity: self.delta_velocity + j.velocity_gyro * dbg + j.velocity_accel * dba,
        }
    }

    /// Euler step with the sample held constant over `dt` seconds.
    pub fn integrate_sample(&mut self, sample: &ImuSample, dt: f64, noise: &ImuNoiseParams) -> Result<()> {
        if !(dt > 0.0 && dt <= MAX_SAMPLE_GAP) {
            return Err(Error::MeasurementGap { dt });
        }
        let omega = sample.angular_velocity - self.bias.gyro;
        let accel = sample.linear_acceleration - self.bias.accel;
        let step = Rotation3::exp(&(omega * dt));
        let dr = *self.delta_rotation.matrix();
        let dr_accel_skew = dr * skew(&accel);

        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-0.5 * dt * dt * dr_accel_skew));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Matrix3::identity() * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-dt * dr_accel_skew));

        let mut b_gyro = SMatrix::<f64, 9, 3>::zeros();
        b_gyro
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(right_jacobian(&(omega * dt)) * dt));
        let mut b_accel = SMatrix::<f64, 9, 3>::zeros();
        b_accel.fixed_view_mut::<3, 3>(3, 0).copy_from(&(0.5 * dt * dt * dr));
        b_accel.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dt * dr));

        let gyro_var = noise.gyro_noise_density.powi(2) / dt;
        let accel_var = noise.accel_noise_density.powi(2) / dt;
        let cov = a * self.covariance * a.transpose()
            + b_gyro * b_gyro.transpose() * gyro_var
            + b_accel * b_accel.transpose() * accel_var;
        self.covariance = 0.5 * (cov + cov.transpose());

        let j = &mut self.bias_jacobians;
        let dr_accel_skew_jrg = dr_accel_skew * j.rotation_gyro;
        j.position_accel += j.velocity_accel * dt - 0.5 * dt * dt * dr;
        j.position_gyro += j.velocity_gyro * dt - 0.5 * dt * dt * dr_accel_skew_jrg;
        j.velocity_accel -= dr * dt;
        j.velocity_gyro -= dr_accel_skew_jrg * dt;
        j.rotation_gyro = step.matrix().transpose() * j.rotation_gyro - right_jacobian(&(omega * dt)) * dt;

        let world_accel = dr * accel;
        self.delta_position += self.delta_velocity * dt + 0.5 * world_accel * dt * dt;
        self.delta_velocity += world_accel * dt;
        self.delta_rotation = self.delta_rotation.compose(&step);
        self.delta_t += dt;
        Ok(())
    }

    /// Predicts the state at the end of the interval from `state_i`, using the
    /// deltas corrected to `state_i.bias`.
    pub fn predict(&self, state_i: &NavState, gravity: &Vector3<f64>) -> NavState {
        let r_i = &state_i.pose.rotation;
        let dt = self.delta_t;
        let d = self.corrected(&state_i.bias);
        let mut out = *state_i;
        out.pose.rotation = r_i.compose(&d.rotation).normalized();
        out.pose.translation =
            state_i.pose.translation + state_i.velocity * dt + 0.5 * gravity * dt * dt + r_i.rotate(&d.position);
        out.velocity = state_i.velocity + gravity * dt + r_i.rotate(&d.velocity);
        out.timestamp_ns = state_i.timestamp_ns + (dt * 1e9).round() as i64;
        out
    }
}

/// Free-function form of [`PreintegratedImu::integrate_sample`].
pub fn integrate_sample(
    state: &PreintegratedImu,
    sample: &ImuSample,
    dt: f64,
    noise: &ImuNoiseParams,
) -> Result<PreintegratedImu> {
    let mut next = state.clone();
    next.integrate_sample(sample, dt, noise)?;
    Ok(next)
}

/// Preintegrates `samples` over `[start_ns, end_ns]`. Each sample is held until
/// the next one; the interval must begin at or after the first sample.
pub fn preintegrate_between(
    samples: &[ImuSample],
    start_ns: i64,
    end_ns: i64,
    bias: ImuBias,
    noise: &ImuNoiseParams,
) -> Result<PreintegratedImu> {
    if end_ns <= start_ns {
        return Err(Error::InvalidArgument(format!(
            "empty preintegration interval [{start_ns}, {end_ns}]"
        )));
    }
    let first = samples.partition_point(|s| s.timestamp_ns <= start_ns);
    if first == 0 {
        return Err(Error::InvalidArgument(format!(
            "no IMU sample at or before t = {start_ns} ns"
        )));
    }
    let mut preint = PreintegratedImu::new(bias);
    let mut t = start_ns;
    for (k, sample) in samples.iter().enumerate().skip(first - 1) {
        if t >= end_ns {
            break;
        }
        let next = samples.get(k + 1).map_or(i64::MAX, |s| s.timestamp_ns);
        let until = next.min(end_ns);
        if next == i64::MAX && end_ns - sample.timestamp_ns > (MAX_SAMPLE_GAP * 1e9) as i64 {
            return Err(Error::MeasurementGap {
                dt: (end_ns - sample.timestamp_ns) as f64 * 1e-9,
            });
        }
        if next != i64::MAX && next - sample.timestamp_ns > (MAX_SAMPLE_GAP * 1e9) as i64 {
            return Err(Error::MeasurementGap {
                dt: (next - sample.timestamp_ns) as f64 * 1e-9,
            });
        }
        if until > t {
            preint.integrate_sample(sample, (until - t) as f64 * 1e-9, noise)?;
            t = until;
        }
    }
    Ok(preint)
}

/// Stacked (r^R, r^p, r^v) between `state_i` and `state_j`, with the
/// preintegrated deltas corrected to the bias of `state_i`.
pub fn imu_residuals(
    preint: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    gravity: &Vector3<f64>,
) -> Vector9 {
    let r_i = &state_i.pose.rotation;
    let r_i_t = r_i.inverse();
    let dt = preint.delta_t;
    let d = preint.corrected(&state_i.bias);
    let rot_err = d
        .rotation
        .inverse()
        .compose(&r_i_t)
        .compose(&state_j.pose.rotation)
        .log();
    let dp_world =
        state_j.pose.translation - state_i.pose.translation - state_i.velocity * dt - 0.5 * gravity * dt * dt;
    let dv_world = state_j.velocity - state_i.velocity - gravity * dt;
    let pos_err = r_i_t.rotate(&dp_world) - d.position;
    let vel_err = r_i_t.rotate(&dv_world) - d.velocity;
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&rot_err);
    r.fixed_rows_mut::<3>(3).copy_from(&pos_err);
    r.fixed_rows_mut::<3>(6).copy_from(&vel_err);
    r
}

/// Stacked (b^g_j − b^g_i, b^a_j − b^a_i).
pub fn bias_residual(bias_i: &ImuBias, bias_j: &ImuBias) -> Vector6 {
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(bias_j.gyro - bias_i.gyro));
    r.fixed_rows_mut::<3>(3).copy_from(&(bias_j.accel - bias_i.accel));
    r
}

/// Jacobians of [`imu_residuals`] w.r.t. the 15-dim tangent of each state.
/// The residual does not depend on the bias of `state_j`.
#[derive(Clone, Debug)]
pub struct ImuJacobians {
    pub wrt_i: SMatrix<f64, 9, 15>,
    pub wrt_j: SMatrix<f64, 9, 15>,
}

pub fn residual_jacobians(
    preint: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    gravity: &Vector3<f64>,
) -> ImuJacobians {
    let r_i = state_i.pose.rotation.matrix();
    let r_j = state_j.pose.rotation.matrix();
    let r_i_t = r_i.transpose();
    let dt = preint.delta_t;
    let residual = imu_residuals(preint, state_i, state_j, gravity);
    let rot_err = residual.fixed_rows::<3>(0).into_owned();
    let jr_inv = right_jacobian_inv(&rot_err);

    let dp_world =
        state_j.pose.translation - state_i.pose.translation - state_i.velocity * dt - 0.5 * gravity * dt * dt;
    let dv_world = state_j.velocity - state_i.velocity - gravity * dt;

    let mut wrt_i = SMatrix::<f64, 9, 15>::zeros();
    let mut wrt_j = SMatrix::<f64, 9, 15>::zeros();

    wrt_i
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * r_j.transpose() * r_i));
    wrt_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);

    wrt_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(r_i_t * dp_world)));
    wrt_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r_i_t));
    wrt_i.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r_i_t * dt));
    wrt_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_i_t);

    wrt_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&(r_i_t * dv_world)));
    wrt_i.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_i_t));
    wrt_j.fixed_view_mut::<3, 3>(6, 6).copy_from(&r_i_t);

    let j = &preint.bias_jacobians;
    let phi = j.rotation_gyro * (state_i.bias.gyro - preint.bias.gyro);
    let exp_rt = Rotation3::exp(&rot_err).matrix().transpose();
    wrt_i
        .fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-jr_inv * exp_rt * right_jacobian(&phi) * j.rotation_gyro));
    wrt_i.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-j.position_gyro));
    wrt_i.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-j.position_accel));
    wrt_i.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-j.velocity_gyro));
    wrt_i.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-j.velocity_accel));

    ImuJacobians { wrt_i, wrt_j }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Pose3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

    fn sample(t: i64, w: Vector3<f64>, a: Vector3<f64>) -> ImuSample {
        ImuSample {
            timestamp_ns: t,
            angular_velocity: w,
            linear_acceleration: a,
        }
    }

    fn state(pose: Pose3, v: Vector3<f64>) -> NavState {
        NavState {
            pose,
            velocity: v,
            bias: ImuBias::default(),
            timestamp_ns: 0,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    /// World-frame Euler integration, independent of the preintegration path.
    fn integrate_world(
        start: &NavState,
        samples: &[(Vector3<f64>, Vector3<f64>)],
        dt: f64,
        bias: &ImuBias,
    ) -> NavState {
        let mut r = *start.pose.rotation.matrix();
        let mut p = start.pose.translation;
        let mut v = start.velocity;
        for (w, a) in samples {
            let acc_world = r * (a - bias.accel) + G;
            p += v * dt + 0.5 * acc_world * dt * dt;
            v += acc_world * dt;
            let wb = (w - bias.gyro) * dt;
            let theta = wb.norm();
            let k = skew(&wb);
            let step = if theta < 1e-12 {
                Matrix3::identity() + k
            } else {
                Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / (theta * theta))
            };
            r *= step;
        }
        state(Pose3::new(Rotation3::from_matrix_unchecked(r), p), v)
    }

    fn preintegrate(samples: &[(Vector3<f64>, Vector3<f64>)], dt: f64, bias: ImuBias) -> PreintegratedImu {
        let noise = ImuNoiseParams::default();
        let mut pre = PreintegratedImu::new(bias);
        for (k, (w, a)) in samples.iter().enumerate() {
            pre.integrate_sample(&sample(k as i64, *w, *a), dt, &noise).unwrap();
        }
        pre
    }

    #[test]
    fn stationary_second_of_samples_gives_zero_residual() {
        let samples = vec![(Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)); 200];
        let pre = preintegrate(&samples, 0.005, ImuBias::default());
        assert!((pre.delta_t - 1.0).abs() < 1e-12);
        let s = state(
            Pose3::new(Rotation3::identity(), Vector3::new(1.0, 2.0, 3.0)),
            Vector3::zeros(),
        );
        let r = imu_residuals(&pre, &s, &s, &G);
        assert!(r.amax() < 1e-6, "{r:?}");
    }

    #[test]
    fn single_sample_rotation() {
        let noise = ImuNoiseParams::default();
        let pre = integrate_sample(
            &PreintegratedImu::new(ImuBias::default()),
            &sample(0, Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()),
            0.005,
            &noise,
        )
        .unwrap();
        assert_eq!(pre.delta_rotation, Rotation3::exp(&Vector3::new(0.0, 0.0, 0.005)));
    }

    #[test]
    fn constant_yaw_rate_accumulates_one_radian() {
        let samples = vec![(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()); 200];
        let pre = preintegrate(&samples, 0.005, ImuBias::default());
        let expected = Rotation3::rot_z(1.0);
        assert!((pre.delta_rotation.matrix() - expected.matrix()).amax() < 1e-9);
    }

    #[test]
    fn gap_is_rejected() {
        let noise = ImuNoiseParams::default();
        let mut pre = PreintegratedImu::new(ImuBias::default());
        let s = sample(0, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(
            pre.integrate_sample(&s, 0.0, &noise),
            Err(Error::MeasurementGap { .. })
        ));
        assert!(matches!(
            pre.integrate_sample(&s, 0.11, &noise),
            Err(Error::MeasurementGap { .. })
        ));
        assert!(matches!(
            pre.integrate_sample(&s, -0.01, &noise),
            Err(Error::MeasurementGap { .. })
        ));
        assert!(pre.integrate_sample(&s, 0.1, &noise).is_ok());
    }

    #[test]
    fn identity_preintegration_at_rest() {
        let mut pre = PreintegratedImu::new(ImuBias::default());
        pre.delta_t = 0.1;
        let s = state(Pose3::identity(), Vector3::zeros());
        assert_eq!(imu_residuals(&pre, &s, &s, &Vector3::zeros()), Vector9::zeros());
    }

    #[test]
    fn position_perturbation_shows_in_position_residual() {
        let mut pre = PreintegratedImu::new(ImuBias::default());
        pre.delta_t = 0.1;
        let si = state(Pose3::identity(), Vector3::zeros());
        let sj = state(
            Pose3::new(Rotation3::identity(), Vector3::new(0.1, 0.0, 0.0)),
            Vector3::zeros(),
        );
        let r = imu_residuals(&pre, &si, &sj, &Vector3::zeros());
        assert!((r.fixed_rows::<3>(3) - Vector3::new(0.1, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn brute_force_integrated_states_have_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let bias = ImuBias::new(rand_vec(&mut rng, 0.01), rand_vec(&mut rng, 0.1));
            let samples: Vec<_> = (0..400)
                .map(|_| {
                    (
                        rand_vec(&mut rng, 1.0),
                        rand_vec(&mut rng, 3.0) + Vector3::new(0.0, 0.0, 9.81),
                    )
                })
                .collect();
            let mut start = state(
                Pose3::new(Rotation3::exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0)),
                rand_vec(&mut rng, 2.0),
            );
            start.bias = bias;
            let end = integrate_world(&start, &samples, 0.005, &bias);
            let pre = preintegrate(&samples, 0.005, bias);
            let r = imu_residuals(&pre, &start, &end, &G);
            assert!(r.amax() < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn preintegration_ignores_start_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..50)
            .map(|_| (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 5.0)))
            .collect();
        let a = preintegrate(&samples, 0.005, ImuBias::default());
        let b = preintegrate(&samples, 0.005, ImuBias::default());
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_trace_grows_and_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = ImuNoiseParams::default();
        let mut pre = PreintegratedImu::new(ImuBias::default());
        let mut last = 0.0;
        for k in 0..200 {
            let s = sample(k, rand_vec(&mut rng, 2.0), rand_vec(&mut rng, 10.0));
            pre.integrate_sample(&s, 0.005, &noise).unwrap();
            let trace = pre.covariance.trace();
            assert!(trace > last);
            last = trace;
            assert!((pre.covariance - pre.covariance.transpose()).amax() <= 1e-12);
            let eig = pre.covariance.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-12);
        }
    }

    #[test]
    fn preintegrate_between_handles_off_grid_bounds() {
        let noise = ImuNoiseParams::default();
        let samples: Vec<_> = (0..100)
            .map(|k| sample(k * 5_000_000, Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()))
            .collect();
        let pre = preintegrate_between(&samples, 2_500_000, 102_500_000, ImuBias::default(), &noise).unwrap();
        assert!((pre.delta_t - 0.1).abs() < 1e-12);
        assert!((pre.delta_rotation.log() - Vector3::new(0.0, 0.0, 0.1)).amax() < 1e-12);
        assert!(preintegrate_between(&samples, -1, 10, ImuBias::default(), &noise).is_err());
        let mut gappy = samples.clone();
        gappy.drain(40..70);
        assert!(matches!(
            preintegrate_between(&gappy, 0, 400_000_000, ImuBias::default(), &noise),
            Err(Error::MeasurementGap { .. })
        ));
    }

    #[test]
    fn bias_residual_examples() {
        let a = ImuBias::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(bias_residual(&a, &a), Vector6::zeros());
        let mut b = a;
        b.gyro.x += 1e-4;
        let r = bias_residual(&a, &b);
        assert!((r[0] - 1e-4).abs() < 1e-15);
        assert_eq!(r.rows(1, 5).amax(), 0.0);
    }

    /// Central finite differences over the retraction of both states.
    fn numeric_jacobians(
        pre: &PreintegratedImu,
        si: &NavState,
        sj: &NavState,
        h: f64,
    ) -> (SMatrix<f64, 9, 15>, SMatrix<f64, 9, 15>) {
        let mut ji = SMatrix::<f64, 9, 15>::zeros();
        let mut jj = SMatrix::<f64, 9, 15>::zeros();
        for k in 0..15 {
            let mut d = SVector::<f64, 15>::zeros();
            d[k] = h;
            let plus = imu_residuals(pre, &si.retract(&d), sj, &G);
            let minus = imu_residuals(pre, &si.retract(&-d), sj, &G);
            ji.set_column(k, &((plus - minus) / (2.0 * h)));
            let plus = imu_residuals(pre, si, &sj.retract(&d), &G);
            let minus = imu_residuals(pre, si, &sj.retract(&-d), &G);
            jj.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        (ji, jj)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let samples: Vec<_> = (0..20)
                .map(|_| (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 10.0)))
                .collect();
            let pre = preintegrate(
                &samples,
                0.005,
                ImuBias::new(rand_vec(&mut rng, 0.01), rand_vec(&mut rng, 0.1)),
            );
            let mut si = state(
                Pose3::new(Rotation3::exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0)),
                rand_vec(&mut rng, 2.0),
            );
            si.bias = ImuBias::new(rand_vec(&mut rng, 0.05), rand_vec(&mut rng, 0.5));
            let sj = state(
                Pose3::new(Rotation3::exp(&rand_vec(&mut rng, 2.0)), rand_vec(&mut rng, 5.0)),
                rand_vec(&mut rng, 2.0),
            );
            let an = residual_jacobians(&pre, &si, &sj, &G);
            let (ni, nj) = numeric_jacobians(&pre, &si, &sj, 1e-6);
            for (a, n) in [(&an.wrt_i, &ni), (&an.wrt_j, &nj)] {
                let err = (a - n).amax() / a.amax().max(1.0);
                assert!(err < 1e-5, "relative error {err}");
            }
        }
    }

    #[test]
    fn bias_correction_tracks_reintegration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<_> = (0..20)
            .map(|_| (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 10.0)))
            .collect();
        let base = preintegrate(&samples, 0.005, ImuBias::default());
        for scale in [1e-2, 1e-3] {
            let b = ImuBias::new(rand_vec(&mut rng, scale), rand_vec(&mut rng, 10.0 * scale));
            let exact = preintegrate(&samples, 0.005, b);
            let c = base.corrected(&b);
            let zeroth = (base.delta_position - exact.delta_position).amax();
            let first = (c.position - exact.delta_position).amax();
            // First-order correction leaves a second-order error.
            assert!(first < 1e-2 * zeroth, "{first} vs {zeroth}");
            assert!(
                c.rotation.local(&exact.delta_rotation).amax()
                    < 1e-2 * base.delta_rotation.local(&exact.delta_rotation).amax()
            );
            assert!(
                (c.velocity - exact.delta_velocity).amax() < 1e-2 * (base.delta_velocity - exact.delta_velocity).amax()
            );
        }
        assert_eq!(base.corrected(&ImuBias::default()).position, base.delta_position);
    }

    #[test]
    fn symbolic_jacobian_blocks() {
        let samples = vec![(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.0, 0.0, 9.81)); 20];
        let pre = preintegrate(&samples, 0.005, ImuBias::default());
        let ri = Rotation3::exp(&Vector3::new(0.3, -0.1, 0.7));
        let si = state(Pose3::new(ri, Vector3::new(1.0, 2.0, 3.0)), Vector3::zeros());
        let sj = pre.predict(&si, &G);
        assert!(imu_residuals(&pre, &si, &sj, &G).amax() < 1e-12);
        let jac = residual_jacobians(&pre, &si, &sj, &G);
        let rt = ri.matrix().transpose();
        assert!((jac.wrt_j.fixed_view::<3, 3>(3, 3) - rt).amax() < 1e-15);
        assert!((jac.wrt_i.fixed_view::<3, 3>(3, 6) + rt * pre.delta_t).amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn bias_residual_is_antisymmetric(
            a in proptest::array::uniform6(-1.0..1.0f64),
            b in proptest::array::uniform6(-1.0..1.0f64),
        ) {
            let ba = ImuBias::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]));
            let bb = ImuBias::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
            let r = bias_residual(&ba, &bb);
            prop_assert_eq!(r, -bias_residual(&bb, &ba));
            prop_assert_eq!(r[0], b[0] - a[0]);
            prop_assert_eq!(r[5], b[5] - a[5]);
        }
    }
}
