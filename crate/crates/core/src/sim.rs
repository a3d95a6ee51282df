//! Synthetic inputs: smooth ground-truth trajectories with matching IMU
//! streams, range measurements under parametric noise, and correlation
//! profiles built from sinc² pulses.
//!
//! Random streams use ChaCha8 (`rand_chacha`). Range noise for epoch `n` and
//! station `k` is drawn from the generator seeded with the model seed and set
//! to stream `(n << 32) | k`, so any subset of epochs can be regenerated
//! independently and in any order. IMU noise uses stream `u64::MAX` of the
//! trajectory seed.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuNoiseParams, ImuSample};
use crate::manifold::{Pose3, Rotation3};
use crate::toa::{CorrelationProfile, RangeMeasurement};

/// One ground-truth state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    pub timestamp_ns: i64,
    pub pose: Pose3,
    pub velocity: Vector3<f64>,
}

/// Time-ordered ground truth with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthTrajectory {
    samples: Vec<GroundTruthSample>,
}

impl GroundTruthTrajectory {
    pub fn new(samples: Vec<GroundTruthSample>) -> Result<Self> {
        if let Some(w) = samples.windows(2).find(|w| w[1].timestamp_ns <= w[0].timestamp_ns) {
            return Err(Error::Ordering(format!(
                "ground truth timestamp {} does not follow {}",
                w[1].timestamp_ns, w[0].timestamp_ns
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[GroundTruthSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.timestamp_ns).collect()
    }

    pub fn start_ns(&self) -> Option<i64> {
        self.samples.first().map(|s| s.timestamp_ns)
    }

    pub fn end_ns(&self) -> Option<i64> {
        self.samples.last().map(|s| s.timestamp_ns)
    }

    /// Pose at `t_ns` by linear translation and spherical rotation
    /// interpolation between the bracketing samples.
    pub fn pose_at(&self, t_ns: i64) -> Option<Pose3> {
        let k = self.samples.partition_point(|s| s.timestamp_ns < t_ns);
        let hi = self.samples.get(k)?;
        if hi.timestamp_ns == t_ns {
            return Some(hi.pose);
        }
        let lo = self.samples.get(k.checked_sub(1)?)?;
        let f = (t_ns - lo.timestamp_ns) as f64 / (hi.timestamp_ns - lo.timestamp_ns) as f64;
        Some(lo.pose.interpolate(&hi.pose, f))
    }

    /// Velocity at `t_ns`, linearly interpolated.
    pub fn velocity_at(&self, t_ns: i64) -> Option<Vector3<f64>> {
        let k = self.samples.partition_point(|s| s.timestamp_ns < t_ns);
        let hi = self.samples.get(k)?;
        if hi.timestamp_ns == t_ns {
            return Some(hi.velocity);
        }
        let lo = self.samples.get(k.checked_sub(1)?)?;
        let f = (t_ns - lo.timestamp_ns) as f64 / (hi.timestamp_ns - lo.timestamp_ns) as f64;
        Some(lo.velocity + (hi.velocity - lo.velocity) * f)
    }

    /// Applies `pose ← pose ∘ extrinsic` to every sample.
    pub fn transformed(&self, extrinsic: &Pose3) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| GroundTruthSample {
                pose: s.pose.compose(extrinsic),
                ..*s
            })
            .collect();
        Self { samples }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: u32,
    pub position: Vector3<f64>,
}

/// Base stations with unique ids; at least two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Station>", into = "Vec<Station>")]
pub struct StationLayout {
    stations: Vec<Station>,
}

impl TryFrom<Vec<Station>> for StationLayout {
    type Error = Error;
    fn try_from(stations: Vec<Station>) -> Result<Self> {
        Self::new(stations)
    }
}

impl From<StationLayout> for Vec<Station> {
    fn from(l: StationLayout) -> Self {
        l.stations
    }
}

impl Default for StationLayout {
    /// The five-station layout around the Vicon room.
    fn default() -> Self {
        let p = [
            [-10.0, -7.0, 2.0],
            [7.0, 13.0, 3.0],
            [25.0, -35.0, 4.0],
            [-6.0, 9.0, 5.0],
            [-4.0, -14.0, 6.0],
        ];
        Self {
            stations: p
                .iter()
                .enumerate()
                .map(|(i, p)| Station {
                    station_id: i as u32 + 1,
                    position: Vector3::from(*p),
                })
                .collect(),
        }
    }
}

impl StationLayout {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        if stations.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a layout needs at least 2 stations, got {}",
                stations.len()
            )));
        }
        for (i, s) in stations.iter().enumerate() {
            if stations[..i].iter().any(|o| o.station_id == s.station_id) {
                return Err(Error::InvalidArgument(format!("duplicate station id {}", s.station_id)));
            }
            if s.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "station {} has a non-finite position",
                    s.station_id
                )));
            }
        }
        Ok(Self { stations })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    /// The first `n` stations.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.stations.len() {
            return Err(Error::InvalidArgument(format!(
                "layout has {} stations, {n} requested",
                self.stations.len()
            )));
        }
        Self::new(self.stations[..n].to_vec())
    }
}

/// Per-station override of the range error statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationNoise {
    pub station_id: u32,
    pub mean: f64,
    pub std: f64,
}

/// Gaussian range error model with optional outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModel {
    pub name: String,
    /// Meters.
    pub range_noise_mean: f64,
    /// Meters.
    pub range_noise_std: f64,
    #[serde(default)]
    pub outlier_probability: f64,
    /// Meters.
    #[serde(default = "default_outlier_std")]
    pub outlier_std: f64,
    /// Hz.
    #[serde(default = "default_toa_rate")]
    pub toa_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub per_station: Vec<StationNoise>,
}

fn default_outlier_std() -> f64 {
    5.0
}

fn default_toa_rate() -> f64 {
    5.0
}

/// Range error mean and std per station (ids 1..=5) for each preset.
const TABLE: [(&str, [f64; 5], [f64; 5]); 3] = [
    (
        "industrial-5GHz",
        [0.128, -0.044, 0.005, -0.080, -0.022],
        [0.568, 0.810, 0.763, 0.872, 0.717],
    ),
    (
        "indoor-28GHz",
        [-0.024, -0.021, -0.059, 0.040, -0.059],
        [0.344, 0.368, 0.351, 0.394, 0.3690],
    ),
    (
        "mmmagic-78GHz",
        [0.0021, 0.0103, -0.007, 0.0032, -0.0104],
        [0.1845, 0.1709, 0.1728, 0.1592, 0.1763],
    ),
];

impl ScenarioModel {
    pub const PRESETS: [&'static str; 3] = ["industrial-5GHz", "indoor-28GHz", "mmmagic-78GHz"];

    /// Preset whose mean and std are the averages over the five stations.
    /// Accepts the short aliases `industrial`, `indoor` and `mmmagic`.
    pub fn preset(name: &str) -> Result<Self> {
        let (label, means, stds) = preset_row(name)?;
        Ok(Self {
            name: label.to_string(),
            range_noise_mean: means.iter().sum::<f64>() / 5.0,
            range_noise_std: stds.iter().sum::<f64>() / 5.0,
            outlier_probability: 0.0,
            outlier_std: default_outlier_std(),
            toa_rate: default_toa_rate(),
            seed: 0,
            per_station: Vec::new(),
        })
    }

    /// Preset with the individual per-station statistics for ids 1..=5.
    pub fn preset_per_station(name: &str) -> Result<Self> {
        let (_, means, stds) = preset_row(name)?;
        let mut model = Self::preset(name)?;
        model.per_station = (0..5)
            .map(|i| StationNoise {
                station_id: i as u32 + 1,
                mean: means[i],
                std: stds[i],
            })
            .collect();
        Ok(model)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scenario {}: {m}", self.name)));
        if !(self.range_noise_std > 0.0 && self.range_noise_std.is_finite()) {
            return bad(format!("range std {} must be > 0", self.range_noise_std));
        }
        if !self.range_noise_mean.is_finite() {
            return bad("range mean must be finite".into());
        }
        if !(self.toa_rate > 0.0 && self.toa_rate.is_finite()) {
            return bad(format!("TOA rate {} must be > 0", self.toa_rate));
        }
        if !(0.0..1.0).contains(&self.outlier_probability) {
            return bad(format!(
                "outlier probability {} outside [0, 1)",
                self.outlier_probability
            ));
        }
        if self.outlier_probability > 0.0 && !(self.outlier_std > 0.0) {
            return bad("outlier std must be > 0".into());
        }
        if self.per_station.iter().any(|s| !(s.std > 0.0 && s.mean.is_finite())) {
            return bad("per-station std must be > 0".into());
        }
        Ok(())
    }

    /// `(mean, std)` for a station.
    pub fn noise_for(&self, station_id: u32) -> (f64, f64) {
        self.per_station
            .iter()
            .find(|s| s.station_id == station_id)
            .map_or((self.range_noise_mean, self.range_noise_std), |s| (s.mean, s.std))
    }
}

fn preset_row(name: &str) -> Result<(&'static str, [f64; 5], [f64; 5])> {
    let key = name.to_ascii_lowercase();
    TABLE
        .iter()
        .find(|(label, _, _)| {
            let label = label.to_ascii_lowercase();
            label == key || label.split('-').next() == Some(key.as_str())
        })
        .map(|(l, m, s)| (*l, *m, *s))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown scenario preset {name:?} (known: {})",
                ScenarioModel::PRESETS.join(", ")
            ))
        })
}

/// Simulated ranges are clamped here; a delay cannot be negative.
const MIN_RANGE: f64 = 1e-3;

fn epoch_rng(seed: u64, epoch: u64, station_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | station_id as u64);
    rng
}

/// Ranges to every station at epochs `t₀ + n/rate` within the trajectory.
///
/// Each range is `‖p(tₙ) − L‖ + ε` with `ε ~ N(mean, std²)`, or
/// `N(mean, outlier_std²)` with probability `outlier_probability`. The
/// reported sigma is the station's nominal std. Results are clamped to at
/// least 1 mm.
pub fn simulate_ranges(
    traj: &GroundTruthTrajectory,
    layout: &StationLayout,
    model: &ScenarioModel,
) -> Result<Vec<RangeMeasurement>> {
    model.validate()?;
    let (Some(t0), Some(t1)) = (traj.start_ns(), traj.end_ns()) else {
        return Err(Error::InvalidArgument(
            "cannot simulate ranges on an empty trajectory".into(),
        ));
    };
    let period = 1e9 / model.toa_rate;
    if ((t1 - t0) as f64) < period {
        return Err(Error::InvalidArgument(format!(
            "trajectory spans {:.3} s, shorter than one TOA period",
            (t1 - t0) as f64 * 1e-9
        )));
    }
    let n_epochs = ((t1 - t0) as f64 / period).floor() as u64 + 1;
    let per_epoch: Result<Vec<Vec<RangeMeasurement>>> = (0..n_epochs)
        .into_par_iter()
        .map(|n| {
            let t = t0 + (n as f64 * period).round() as i64;
            let p = traj.pose_at(t).expect("epoch inside the trajectory").translation;
            layout
                .stations()
                .iter()
                .map(|s| {
                    let (mean, std) = model.noise_for(s.station_id);
                    let mut rng = epoch_rng(model.seed, n, s.station_id);
                    let outlier = model.outlier_probability > 0.0 && rng.random::<f64>() < model.outlier_probability;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let eps = mean + z * if outlier { model.outlier_std } else { std };
                    let d = ((p - s.position).norm() + eps).max(MIN_RANGE);
                    RangeMeasurement::new(t, s.station_id, d, std)
                })
                .collect()
        })
        .collect();
    Ok(per_epoch?.into_iter().flatten().collect())
}

/// One multipath component relative to the line-of-sight tap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    /// Seconds after the line-of-sight delay.
    pub extra_delay: f64,
    /// Amplitude relative to a unit line-of-sight tap, in (0, 2].
    pub amplitude: f64,
}

fn sinc2(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let s = (PI * x).sin() / (PI * x);
        s * s
    }
}

/// Correlation profile made of sinc² pulses whose main lobe spans two bins,
/// one at `true_delay` with `los_amplitude` and one per multipath tap, plus a
/// uniform noise floor in `[0, noise_floor)`. Bin 0 is at zero delay.
pub fn simulate_profile(
    true_delay: f64,
    los_amplitude: f64,
    multipath: &[Tap],
    sample_period: f64,
    n_bins: usize,
    noise_floor: f64,
    seed: u64,
) -> Result<CorrelationProfile> {
    if !(true_delay.is_finite() && true_delay >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "true delay {true_delay} s must be >= 0"
        )));
    }
    if !(sample_period.is_finite() && sample_period > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sample period {sample_period} s must be > 0"
        )));
    }
    if !(noise_floor.is_finite() && noise_floor >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise floor {noise_floor} must be >= 0"
        )));
    }
    let mut taps = vec![(true_delay, los_amplitude)];
    for t in multipath {
        if !(t.extra_delay.is_finite() && t.extra_delay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tap delay {} s must be >= 0",
                t.extra_delay
            )));
        }
        taps.push((true_delay + t.extra_delay, t.amplitude));
    }
    if let Some((_, a)) = taps.iter().find(|(_, a)| !(*a > 0.0 && *a <= 2.0)) {
        return Err(Error::InvalidArgument(format!("tap amplitude {a} outside (0, 2]")));
    }
    let last = taps.iter().map(|(d, _)| d / sample_period).fold(0.0, f64::max);
    if n_bins == 0 || last > (n_bins - 1) as f64 {
        return Err(Error::InvalidArgument(format!(
            "{n_bins} bins cannot hold a tap at bin {last:.2}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let magnitudes = (0..n_bins)
        .map(|i| {
            let t = i as f64 * sample_period;
            let pulses: f64 = taps.iter().map(|(d, a)| a * sinc2((t - d) / sample_period)).sum();
            let floor = if noise_floor > 0.0 {
                noise_floor * rng.random::<f64>()
            } else {
                0.0
            };
            pulses + floor
        })
        .collect();
    CorrelationProfile::new(sample_period, 0.0, magnitudes)
}

/// Forward-difference velocities; the last sample repeats the previous one.
pub fn derive_velocity(timestamps_ns: &[i64], positions: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    if timestamps_ns.len() != positions.len() {
        return Err(Error::InvalidArgument("timestamp and position counts differ".into()));
    }
    if positions.len() < 2 {
        return Err(Error::InvalidArgument("velocity needs at least 2 poses".into()));
    }
    let mut v = Vec::with_capacity(positions.len());
    for i in 0..positions.len() - 1 {
        let dt = (timestamps_ns[i + 1] - timestamps_ns[i]) as f64 * 1e-9;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timestamps {} and {} are not increasing",
                timestamps_ns[i],
                timestamps_ns[i + 1]
            )));
        }
        v.push((positions[i + 1] - positions[i]) / dt);
    }
    v.push(*v.last().expect("at least one difference"));
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Radius 2 m, period 10 s, 1 m above the floor, heading along the path.
    Circle,
    /// Room-sized figure with gentle attitude changes.
    Lissajous,
    /// Stationary at 1 m with level attitude.
    Hover,
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::Lissajous => "lissajous",
            TrajectoryKind::Hover => "hover",
        })
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Self::Circle),
            "lissajous" => Ok(Self::Lissajous),
            "hover" => Ok(Self::Hover),
            _ => Err(Error::InvalidArgument(format!("unknown trajectory kind {s:?}"))),
        }
    }
}

/// `offset + rate·t + amp·sin(freq·t + phase)`.
#[derive(Clone, Copy)]
struct Signal {
    offset: f64,
    rate: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Signal {
    const fn constant(offset: f64) -> Self {
        Self::new(offset, 0.0, 0.0, 0.0, 0.0)
    }

    const fn new(offset: f64, rate: f64, amp: f64, freq: f64, phase: f64) -> Self {
        Self {
            offset,
            rate,
            amp,
            freq,
            phase,
        }
    }

    fn eval(&self, t: f64) -> [f64; 3] {
        let arg = self.freq * t + self.phase;
        [
            self.offset + self.rate * t + self.amp * arg.sin(),
            self.rate + self.amp * self.freq * arg.cos(),
            -self.amp * self.freq * self.freq * arg.sin(),
        ]
    }
}

/// Position x, y, z and yaw, pitch, roll of `R = Rz(ψ)·Ry(θ)·Rx(φ)`.
fn signals(kind: TrajectoryKind) -> [Signal; 6] {
    let w = 2.0 * PI / 10.0;
    match kind {
        TrajectoryKind::Hover => [
            Signal::constant(0.0),
            Signal::constant(0.0),
            Signal::constant(1.0),
            Signal::constant(0.0),
            Signal::constant(0.0),
            Signal::constant(0.0),
        ],
        TrajectoryKind::Circle => [
            Signal::new(0.0, 0.0, 2.0, w, FRAC_PI_2),
            Signal::new(0.0, 0.0, 2.0, w, 0.0),
            Signal::constant(1.0),
            Signal::new(FRAC_PI_2, w, 0.0, 0.0, 0.0),
            Signal::constant(0.0),
            Signal::constant(0.0),
        ],
        TrajectoryKind::Lissajous => [
            Signal::new(0.0, 0.0, 1.6, 2.0 * PI / 24.0, 0.0),
            Signal::new(0.5, 0.0, 1.4, 2.0 * PI / 16.0, 0.4),
            Signal::new(1.1, 0.0, 0.35, 2.0 * PI / 12.0, 0.0),
            Signal::new(0.0, 0.0, 0.8, 2.0 * PI / 30.0, 0.0),
            Signal::new(0.0, 0.0, 0.06, 2.0 * PI / 7.0, 0.0),
            Signal::new(0.0, 0.0, 0.06, 2.0 * PI / 9.0, 1.0),
        ],
    }
}

/// Attitude, body angular rate and world position derivatives at `t`.
fn kinematics(sig: &[Signal; 6], t: f64) -> (Rotation3, Vector3<f64>, [Vector3<f64>; 3]) {
    let [x, y, z, yaw, pitch, roll] = sig.map(|s| s.eval(t));
    let (psi, theta, phi) = (yaw[0], pitch[0], roll[0]);
    let (dpsi, dtheta, dphi) = (yaw[1], pitch[1], roll[1]);
    let r = Rotation3::rot_z(psi)
        .compose(&Rotation3::from_axis_angle(&Vector3::y(), theta))
        .compose(&Rotation3::rot_x(phi));
    let omega = Vector3::new(
        dphi - dpsi * theta.sin(),
        dtheta * phi.cos() + dpsi * theta.cos() * phi.sin(),
        dpsi * theta.cos() * phi.cos() - dtheta * phi.sin(),
    );
    let p = [0, 1, 2].map(|d| Vector3::new(x[d], y[d], z[d]));
    (r, omega, p)
}

/// Closed-form trajectory sampled at `imu_rate` together with its IMU stream.
///
/// Angular rates are point samples of the analytic body rate; specific force
/// is `Rₖᵀ(p̈(tₖ) − g)`. Ground truth is the exact piecewise-constant
/// integration of the noiseless stream from the analytic initial state, so
/// preintegrating noiseless samples reproduces it to rounding error. With
/// `noise`, white noise at the given densities and random-walk biases
/// starting at zero are added to the emitted samples only.
pub fn synth_trajectory(
    kind: TrajectoryKind,
    duration: f64,
    imu_rate: f64,
    gravity: &Vector3<f64>,
    noise: Option<&ImuNoiseParams>,
    seed: u64,
) -> Result<(GroundTruthTrajectory, Vec<ImuSample>)> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration {duration} s must be > 0")));
    }
    if !(imu_rate.is_finite() && imu_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("IMU rate {imu_rate} Hz must be > 0")));
    }
    if let Some(n) = noise {
        n.validate()?;
    }
    let period_ns = (1e9 / imu_rate).round() as i64;
    let dt = period_ns as f64 * 1e-9;
    let n = (duration / dt).round() as usize;
    let sig = signals(kind);

    let (r0, _, p0) = kinematics(&sig, 0.0);
    // Half-step velocity offset cancels the drift of left-point accel sums.
    let (mut r, mut p, mut v) = (r0, p0[0], p0[1] - 0.5 * dt * p0[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut gaussian = || Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
    let (mut bg, mut ba) = (Vector3::zeros(), Vector3::zeros());

    let mut truth = Vec::with_capacity(n + 1);
    let mut imu = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let timestamp_ns = k as i64 * period_ns;
        truth.push(GroundTruthSample {
            timestamp_ns,
            pose: Pose3::new(r, p),
            velocity: v,
        });
        let (_, omega, deriv) = kinematics(&sig, t);
        let accel_world = deriv[2];
        let specific = r.inverse().rotate(&(accel_world - gravity));

        let mut sample = ImuSample {
            timestamp_ns,
            angular_velocity: omega,
            linear_acceleration: specific,
        };
        if let Some(np) = noise {
            let scale = 1.0 / dt.sqrt();
            sample.angular_velocity += bg + gaussian() * np.gyro_noise_density * scale;
            sample.linear_acceleration += ba + gaussian() * np.accel_noise_density * scale;
            bg += gaussian() * np.gyro_bias_random_walk * dt.sqrt();
            ba += gaussian() * np.accel_bias_random_walk * dt.sqrt();
        }
        imu.push(sample);

        let a = r.rotate(&specific) + gravity;
        p += v * dt + 0.5 * a * dt * dt;
        v += a * dt;
        r = r.compose(&Rotation3::exp(&(omega * dt)));
    }
    Ok((GroundTruthTrajectory::new(truth)?, imu))
}
