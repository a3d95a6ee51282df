//! EuRoC-style CSV streams, station layouts, run configuration and timestamp
//! association.
//!
//! IMU rows are `timestamp_ns, ωx, ωy, ωz, ax, ay, az`; ground-truth rows are
//! `timestamp_ns, px, py, pz, qw, qx, qy, qz` optionally followed by
//! `vx, vy, vz` and further ignored columns. One leading header line is
//! skipped. Quaternions are w-first.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchOptions, IncrementalOptions};
use crate::imu::{ImuNoiseParams, ImuSample};
use crate::manifold::{Pose3, Rotation3};
use crate::sim::{derive_velocity, GroundTruthSample, GroundTruthTrajectory, Station, StationLayout, TrajectoryKind};

/// Accepted deviation of a ground-truth quaternion norm from 1.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

/// Default association window, half the period of 100 Hz ground truth.
pub const DEFAULT_MAX_GAP_NS: i64 = 10_000_000;

pub const IMU_HEADER: &str = "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]";
pub const GROUNDTRUTH_HEADER: &str =
    "#timestamp [ns],p_x [m],p_y [m],p_z [m],q_w [],q_x [],q_y [],q_z [],v_x [m s^-1],v_y [m s^-1],v_z [m s^-1]";
pub const TRAJECTORY_HEADER: &str = "timestamp_ns,p_x,p_y,p_z,q_w,q_x,q_y,q_z";
pub const LAYOUT_HEADER: &str = "station_id,x_m,y_m,z_m";

/// Data rows of a CSV text as `(line number, fields)`, skipping blank lines and
/// a single leading header line.
fn rows<'a>(text: &'a str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut out = Vec::new();
    let mut seen_first = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let first = !seen_first;
        seen_first = true;
        if first && !line.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+' || c == '.') {
            continue;
        }
        out.push((i + 1, line.split(',').map(str::trim).collect()));
    }
    if out.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(fields: &[&str], k: usize, path: &Path, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = fields
        .get(k)
        .ok_or_else(|| Error::parse(path, line, format!("missing column {}", k + 1)))?;
    raw.parse::<T>()
        .map_err(|e| Error::parse(path, line, format!("column {}: {raw:?}: {e}", k + 1)))
}

fn vec3(fields: &[&str], k: usize, path: &Path, line: usize) -> Result<Vector3<f64>> {
    Ok(Vector3::new(
        field(fields, k, path, line)?,
        field(fields, k + 1, path, line)?,
        field(fields, k + 2, path, line)?,
    ))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_increasing(prev: Option<i64>, t: i64, path: &Path, line: usize) -> Result<()> {
    match prev {
        Some(p) if t <= p => Err(Error::Ordering(format!(
            "{}:{line}: timestamp {t} does not follow {p}",
            path.display()
        ))),
        _ => Ok(()),
    }
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    parse_imu_csv(&read_text(path)?, path)
}

pub fn parse_imu_csv(text: &str, path: &Path) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, f) in rows(text, path)? {
        if f.len() < 7 {
            return Err(Error::parse(path, line, format!("expected 7 columns, got {}", f.len())));
        }
        let sample = ImuSample {
            timestamp_ns: field(&f, 0, path, line)?,
            angular_velocity: vec3(&f, 1, path, line)?,
            linear_acceleration: vec3(&f, 4, path, line)?,
        };
        if sample
            .angular_velocity
            .iter()
            .chain(sample.linear_acceleration.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::parse(path, line, "non-finite value"));
        }
        check_increasing(out.last().map(|s| s.timestamp_ns), sample.timestamp_ns, path, line)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::with_capacity(samples.len() * 120);
    out.push_str(IMU_HEADER);
    out.push('\n');
    for s in samples {
        let (w, a) = (s.angular_velocity, s.linear_acceleration);
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.timestamp_ns, w.x, w.y, w.z, a.x, a.y, a.z
        );
    }
    write_text(path, &out)
}

pub fn read_groundtruth_csv(path: &Path) -> Result<GroundTruthTrajectory> {
    parse_groundtruth_csv(&read_text(path)?, path)
}

/// Velocities come from columns 9 to 11 when every row has them and are derived
/// by forward differences otherwise.
pub fn parse_groundtruth_csv(text: &str, path: &Path) -> Result<GroundTruthTrajectory> {
    let rows = rows(text, path)?;
    let mut samples: Vec<GroundTruthSample> = Vec::with_capacity(rows.len());
    let with_velocity = rows.iter().all(|(_, f)| f.len() >= 11);
    for (line, f) in &rows {
        let line = *line;
        if f.len() < 8 {
            return Err(Error::parse(
                path,
                line,
                format!("expected at least 8 columns, got {}", f.len()),
            ));
        }
        let t: i64 = field(f, 0, path, line)?;
        let p = vec3(f, 1, path, line)?;
        let q: [f64; 4] = [
            field(f, 4, path, line)?,
            field(f, 5, path, line)?,
            field(f, 6, path, line)?,
            field(f, 7, path, line)?,
        ];
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::parse(path, line, "non-finite value"));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::DataIntegrity(format!(
                "{}:{line}: quaternion norm {norm} outside [0.999, 1.001]",
                path.display()
            )));
        }
        check_increasing(samples.last().map(|s| s.timestamp_ns), t, path, line)?;
        let velocity = if with_velocity {
            vec3(f, 8, path, line)?
        } else {
            Vector3::zeros()
        };
        samples.push(GroundTruthSample {
            timestamp_ns: t,
            pose: Pose3::new(Rotation3::from_quaternion(q[0], q[1], q[2], q[3]), p),
            velocity,
        });
    }
    if !with_velocity && samples.len() >= 2 {
        let ts: Vec<i64> = samples.iter().map(|s| s.timestamp_ns).collect();
        let ps: Vec<Vector3<f64>> = samples.iter().map(|s| s.pose.translation).collect();
        for (s, v) in samples.iter_mut().zip(derive_velocity(&ts, &ps)?) {
            s.velocity = v;
        }
    }
    GroundTruthTrajectory::new(samples)
}

fn pose_fields(out: &mut String, t: i64, pose: &Pose3) {
    let p = pose.translation;
    let [qw, qx, qy, qz] = pose.rotation.to_quaternion();
    let _ = write!(out, "{t},{:?},{:?},{:?},{qw:?},{qx:?},{qy:?},{qz:?}", p.x, p.y, p.z);
}

/// Ground truth with velocity columns.
pub fn write_groundtruth_csv(path: &Path, traj: &GroundTruthTrajectory) -> Result<()> {
    let mut out = String::with_capacity(traj.len() * 200);
    out.push_str(GROUNDTRUTH_HEADER);
    out.push('\n');
    for s in traj.samples() {
        pose_fields(&mut out, s.timestamp_ns, &s.pose);
        let _ = writeln!(out, ",{:?},{:?},{:?}", s.velocity.x, s.velocity.y, s.velocity.z);
    }
    write_text(path, &out)
}

/// Estimated trajectory as `timestamp_ns,p_x,p_y,p_z,q_w,q_x,q_y,q_z`.
pub fn write_trajectory_csv(path: &Path, poses: &[(i64, Pose3)]) -> Result<()> {
    write_text(path, &trajectory_csv(poses))
}

pub fn trajectory_csv(poses: &[(i64, Pose3)]) -> String {
    let mut out = String::with_capacity(poses.len() * 160);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (t, pose) in poses {
        pose_fields(&mut out, *t, pose);
        out.push('\n');
    }
    out
}

pub fn read_layout(path: &Path) -> Result<StationLayout> {
    parse_layout(&read_text(path)?, path)
}

pub fn parse_layout(text: &str, path: &Path) -> Result<StationLayout> {
    let mut stations = Vec::new();
    for (line, f) in rows(text, path)? {
        if f.len() != 4 {
            return Err(Error::parse(path, line, format!("expected 4 columns, got {}", f.len())));
        }
        stations.push(Station {
            station_id: field(&f, 0, path, line)?,
            position: vec3(&f, 1, path, line)?,
        });
    }
    StationLayout::new(stations).map_err(|e| Error::DataIntegrity(format!("{}: {e}", path.display())))
}

pub fn write_layout(path: &Path, layout: &StationLayout) -> Result<()> {
    let mut out = String::new();
    out.push_str(LAYOUT_HEADER);
    out.push('\n');
    for s in layout.stations() {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?}",
            s.station_id, s.position.x, s.position.y, s.position.z
        );
    }
    write_text(path, &out)
}

/// Sorted, unique timestamps with nearest and bracketing lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampIndex {
    stamps: Vec<i64>,
}

impl TimestampIndex {
    pub fn new(stamps: Vec<i64>) -> Result<Self> {
        if let Some(w) = stamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Ordering(format!("timestamp {} does not follow {}", w[1], w[0])));
        }
        Ok(Self { stamps })
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<i64> {
        self.stamps.get(i).copied()
    }

    /// Indices of the samples at or before and at or after `t`.
    pub fn bracketing(&self, t: i64) -> (Option<usize>, Option<usize>) {
        let k = self.stamps.partition_point(|&s| s < t);
        let after = (k < self.stamps.len()).then_some(k);
        let before = if after.is_some_and(|a| self.stamps[a] == t) {
            after
        } else {
            k.checked_sub(1)
        };
        (before, after)
    }

    /// Nearest sample; ties go to the earlier one.
    pub fn nearest(&self, t: i64) -> Option<usize> {
        match self.bracketing(t) {
            (Some(b), Some(a)) => Some(if t.abs_diff(self.stamps[b]) <= t.abs_diff(self.stamps[a]) {
                b
            } else {
                a
            }),
            (b, a) => b.or(a),
        }
    }
}

/// Index of the sample nearest to `query` if it lies within `max_gap_ns`.
pub fn associate_nearest(index: &TimestampIndex, query: i64, max_gap_ns: i64) -> Result<usize> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("cannot associate against an empty index".into()));
    }
    let nearest = index.nearest(query).expect("non-empty index");
    if index.stamps[nearest].abs_diff(query) > max_gap_ns.unsigned_abs() {
        return Err(Error::NoMatch {
            query_ns: query,
            max_gap_ns,
        });
    }
    Ok(nearest)
}

/// Where the IMU stream and ground truth come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// EuRoC IMU file; used together with `groundtruth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imu: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth: Option<PathBuf>,
    /// Synthetic trajectory used when no files are given.
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: TrajectoryKind,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub imu_rate: f64,
    /// Add white noise and bias random walks at the `[imu]` densities.
    pub imu_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationsConfig {
    /// `station_id,x_m,y_m,z_m` file; the built-in five-station layout if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Number of stations used, taken from the start of the layout.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: String,
    /// Use the per-station statistics instead of the preset average.
    pub per_station: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_noise_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_noise_std: Option<f64>,
    pub outlier_probability: f64,
    pub outlier_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Incremental,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: SolverMode,
    /// Huber kernel on range factors.
    pub robust: bool,
    /// Batch refinement of the incremental estimate after the last node.
    pub final_refinement: bool,
    pub incremental: IncrementalOptions,
    pub batch: BatchOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Radians.
    pub rotation_sigma: f64,
    /// Meters.
    pub translation_sigma: f64,
    /// m/s.
    pub velocity_sigma: f64,
    /// rad/s.
    pub gyro_bias_sigma: f64,
    /// m/s².
    pub accel_bias_sigma: f64,
    /// Meters.
    pub landmark_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub max_gap_ns: i64,
    /// Node steps between the poses compared by the relative pose error.
    pub rpe_delta: usize,
}

/// Rigid transform from the body/IMU frame to the ground-truth frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicConfig {
    pub translation: [f64; 3],
    /// `[w, x, y, z]`.
    pub rotation: [f64; 4],
}

impl ExtrinsicConfig {
    pub fn pose(&self) -> Pose3 {
        let [w, x, y, z] = self.rotation;
        Pose3::new(Rotation3::from_quaternion(w, x, y, z), Vector3::from(self.translation))
    }
}

/// Everything needed for one localization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Hz.
    pub node_rate: f64,
    /// Hz.
    pub toa_rate: f64,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub stations: StationsConfig,
    pub scenario: ScenarioConfig,
    pub imu: ImuNoiseParams,
    pub solver: SolverConfig,
    pub priors: PriorConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<ExtrinsicConfig>,
}

/// The shipped configuration; parses to [`RunConfig::default`].
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            node_rate: 10.0,
            toa_rate: 5.0,
            output_dir: PathBuf::from("out"),
            input: InputConfig {
                imu: None,
                groundtruth: None,
                synth: SynthConfig {
                    kind: TrajectoryKind::Lissajous,
                    duration: 144.0,
                    imu_rate: 200.0,
                    imu_noise: true,
                },
            },
            stations: StationsConfig { file: None, count: 5 },
            scenario: ScenarioConfig {
                preset: "mmmagic-78GHz".into(),
                per_station: false,
                range_noise_mean: None,
                range_noise_std: None,
                outlier_probability: 0.0,
                outlier_std: 5.0,
            },
            imu: ImuNoiseParams::default(),
            solver: SolverConfig {
                mode: SolverMode::Incremental,
                robust: false,
                final_refinement: true,
                incremental: IncrementalOptions::default(),
                batch: BatchOptions::default(),
            },
            priors: PriorConfig {
                rotation_sigma: 1e-3,
                translation_sigma: 1e-3,
                velocity_sigma: 0.1,
                gyro_bias_sigma: 1e-2,
                accel_bias_sigma: 1e-1,
                landmark_sigma: 1e-3,
            },
            evaluation: EvaluationConfig {
                max_gap_ns: DEFAULT_MAX_GAP_NS,
                rpe_delta: 1,
            },
            extrinsic: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Makes relative input paths relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.input.imu,
            &mut self.input.groundtruth,
            &mut self.stations.file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.node_rate > 0.0 && self.toa_rate > 0.0) {
            return bad(format!(
                "rates must be > 0 (node {}, TOA {})",
                self.node_rate, self.toa_rate
            ));
        }
        if self.node_rate < self.toa_rate {
            return bad(format!(
                "node rate {} Hz is below the TOA rate {} Hz",
                self.node_rate, self.toa_rate
            ));
        }
        if self.input.imu.is_some() != self.input.groundtruth.is_some() {
            return bad("input.imu and input.groundtruth must be given together".into());
        }
        if !(self.input.synth.duration > 0.0 && self.input.synth.imu_rate > 0.0) {
            return bad("synthetic duration and IMU rate must be > 0".into());
        }
        if self.stations.count < 2 {
            return bad(format!("at least 2 stations are required, got {}", self.stations.count));
        }
        let p = &self.priors;
        let sigmas = [
            p.rotation_sigma,
            p.translation_sigma,
            p.velocity_sigma,
            p.gyro_bias_sigma,
            p.accel_bias_sigma,
            p.landmark_sigma,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("prior sigmas must be > 0".into());
        }
        if self.evaluation.max_gap_ns < 0 || self.evaluation.rpe_delta == 0 {
            return bad("evaluation.max_gap_ns must be >= 0 and rpe_delta >= 1".into());
        }
        if !(self.solver.incremental.relinearize_threshold > 0.0) || self.solver.incremental.max_passes == 0 {
            return bad("incremental solver needs a positive threshold and at least one pass".into());
        }
        self.imu.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scenario_model()?;
        Ok(())
    }

    /// Range error model for this run, seeded with the run seed.
    pub fn scenario_model(&self) -> Result<crate::sim::ScenarioModel> {
        let s = &self.scenario;
        let base = if s.per_station {
            crate::sim::ScenarioModel::preset_per_station(&s.preset)
        } else {
            crate::sim::ScenarioModel::preset(&s.preset)
        };
        let mut model = base.map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = s.range_noise_mean {
            model.range_noise_mean = m;
        }
        if let Some(sd) = s.range_noise_std {
            model.range_noise_std = sd;
        }
        model.outlier_probability = s.outlier_probability;
        model.outlier_std = s.outlier_std;
        model.toa_rate = self.toa_rate;
        model.seed = self.seed;
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(model)
    }
}
