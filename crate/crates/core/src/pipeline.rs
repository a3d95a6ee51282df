//! End-to-end runs: localization, scenario × station-count sweeps, data
//! simulation and TOA extraction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, ReportRow, TimingSummary};
use crate::graph::{solve_batch, Factor, FactorGraph, IncrementalSolver, Landmark, NavState, SolverReport, Values};
use crate::imu::{preintegrate_between, ImuBias, ImuSample};
use crate::io::{self, associate_nearest, RunConfig, SolverMode, TimestampIndex};
use crate::manifold::Pose3;
use crate::sim::{self, GroundTruthTrajectory, StationLayout, Tap};
use crate::toa::{self, CorrelationProfile, RangeMeasurement};

/// Time-aligned inputs of one run, all in the body (IMU) frame.
#[derive(Clone, Debug)]
pub struct RunInputs {
    pub truth: GroundTruthTrajectory,
    pub imu: Vec<ImuSample>,
    pub layout: StationLayout,
}

/// Reads the configured files or synthesizes a trajectory.
pub fn load_inputs(config: &RunConfig) -> Result<RunInputs> {
    let full_layout = match &config.stations.file {
        Some(path) => io::read_layout(path)?,
        None => StationLayout::default(),
    };
    let layout = full_layout
        .prefix(config.stations.count)
        .map_err(|e| Error::Config(e.to_string()))?;
    let (truth, imu) = match (&config.input.imu, &config.input.groundtruth) {
        (Some(imu), Some(gt)) => (io::read_groundtruth_csv(gt)?, io::read_imu_csv(imu)?),
        _ => {
            let s = &config.input.synth;
            let noise = s.imu_noise.then_some(&config.imu);
            sim::synth_trajectory(s.kind, s.duration, s.imu_rate, &config.imu.gravity, noise, config.seed)?
        }
    };
    let truth = match &config.extrinsic {
        Some(e) => truth.transformed(&e.pose()),
        None => truth,
    };
    Ok(RunInputs { truth, imu, layout })
}

/// Node timestamps every `1/node_rate` s over the span covered by both the
/// IMU stream and ground truth.
pub fn node_timestamps(inputs: &RunInputs, node_rate: f64) -> Result<Vec<i64>> {
    let (Some(imu_first), Some(imu_last)) = (inputs.imu.first(), inputs.imu.last()) else {
        return Err(Error::DataIntegrity("IMU stream is empty".into()));
    };
    let (Some(gt0), Some(gt1)) = (inputs.truth.start_ns(), inputs.truth.end_ns()) else {
        return Err(Error::DataIntegrity("ground truth is empty".into()));
    };
    let t0 = imu_first.timestamp_ns.max(gt0);
    let t1 = imu_last.timestamp_ns.min(gt1);
    let period = 1e9 / node_rate;
    if t1 <= t0 || ((t1 - t0) as f64) < period {
        return Err(Error::DataIntegrity(format!(
            "IMU and ground truth overlap for less than one node period ({t0}..{t1} ns)"
        )));
    }
    let n = ((t1 - t0) as f64 / period + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| t0 + (k as f64 * period).round() as i64).collect())
}

/// Outcome of one localization run.
#[derive(Clone, Debug)]
pub struct LocalizeResult {
    /// Final MAP estimate, one pose per node.
    pub trajectory: Vec<(i64, Pose3)>,
    pub values: Values,
    /// Online estimate before the final batch refinement, in incremental mode.
    pub incremental_values: Option<Values>,
    pub graph: FactorGraph,
    pub metrics: MetricsReport,
    /// Seconds per incremental update.
    pub update_times: Vec<f64>,
    pub final_report: SolverReport,
    pub ranges_used: usize,
}

/// Node index for every range, dropping ranges farther than half a node
/// period from any node.
fn bind_ranges(ranges: &[RangeMeasurement], nodes: &[i64], node_rate: f64) -> Result<Vec<Vec<RangeMeasurement>>> {
    let index = TimestampIndex::new(nodes.to_vec())?;
    let max_gap = (0.5e9 / node_rate).round() as i64;
    let mut bound = vec![Vec::new(); nodes.len()];
    let mut dropped = 0usize;
    for r in ranges {
        match associate_nearest(&index, r.timestamp_ns, max_gap) {
            Ok(k) => bound[k].push(*r),
            Err(Error::NoMatch { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped > 0 {
        debug!("{dropped} ranges fall outside the node span");
    }
    Ok(bound)
}

/// Localizes with the given inputs and precomputed ranges.
pub fn localize(config: &RunConfig, inputs: &RunInputs, ranges: &[RangeMeasurement]) -> Result<LocalizeResult> {
    let nodes = node_timestamps(inputs, config.node_rate).map_err(|e| e.in_phase("align"))?;
    let bound = bind_ranges(ranges, &nodes, config.node_rate).map_err(|e| e.in_phase("align"))?;
    let priors = &config.priors;
    let noise = &config.imu;
    let gravity = noise.gravity;
    let robust = config.solver.robust;

    let mut landmark_index = std::collections::HashMap::new();
    let landmarks: Vec<Landmark> = inputs
        .layout
        .stations()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            landmark_index.insert(s.station_id, k);
            Landmark {
                station_id: s.station_id,
                position: s.position,
            }
        })
        .collect();

    let t0 = nodes[0];
    let anchor_pose = inputs
        .truth
        .pose_at(t0)
        .ok_or_else(|| Error::DataIntegrity(format!("no ground truth at first node t = {t0}")))?;
    let anchor_velocity = inputs.truth.velocity_at(t0).expect("pose_at succeeded");
    // Velocity and biases start at zero; their priors pull them in.
    let first = NavState::new(anchor_pose, nalgebra::Vector3::zeros(), t0);

    let factors_for = |k: usize, prev: Option<&NavState>| -> Result<(Vec<Factor>, Option<NavState>)> {
        let mut out = Vec::new();
        let mut guess = None;
        if k == 0 {
            out.push(Factor::prior_pose(
                0,
                anchor_pose,
                priors.rotation_sigma,
                priors.translation_sigma,
            )?);
            out.push(Factor::prior_velocity(0, anchor_velocity, priors.velocity_sigma)?);
            out.push(Factor::prior_bias(
                0,
                ImuBias::default(),
                priors.gyro_bias_sigma,
                priors.accel_bias_sigma,
            )?);
            for (i, l) in landmarks.iter().enumerate() {
                out.push(Factor::landmark_prior(i, l.position, priors.landmark_sigma)?);
            }
        } else {
            let prev = prev.expect("previous node");
            let preint = preintegrate_between(&inputs.imu, nodes[k - 1], nodes[k], prev.bias, noise)?;
            let mut next = preint.predict(prev, &gravity);
            next.timestamp_ns = nodes[k];
            guess = Some(next);
            let dt = (nodes[k] - nodes[k - 1]) as f64 * 1e-9;
            out.push(Factor::imu(k - 1, k, preint, gravity)?);
            out.push(Factor::bias_walk(k - 1, k, noise, dt)?);
        }
        for r in &bound[k] {
            let Some(&lm) = landmark_index.get(&r.station_id) else {
                continue;
            };
            out.push(Factor::range(k, lm, r.distance, r.variance)?.with_huber(robust));
        }
        Ok((out, guess))
    };

    let ranges_used = bound.iter().map(Vec::len).sum();
    let mut update_times = Vec::with_capacity(nodes.len());
    let (graph, values, incremental_values, final_report) = match config.solver.mode {
        SolverMode::Incremental => {
            let mut solver = IncrementalSolver::new(config.solver.incremental);
            for l in &landmarks {
                solver.add_landmark(*l);
            }
            let mut last = first;
            for k in 0..nodes.len() {
                let (factors, guess) = factors_for(k, Some(&last)).map_err(|e| e.in_phase("build"))?;
                let node = guess.unwrap_or(first);
                let report = solver.update(vec![node], factors).map_err(|e| e.in_phase("solve"))?;
                update_times.push(report.solve_time);
                last = *solver.estimate().nav.last().expect("node added");
                if k % 200 == 0 {
                    debug!("node {k}/{}: cost {:.4e}", nodes.len(), report.final_cost);
                }
            }
            let online = solver.estimate();
            let graph = solver.graph().clone();
            let (values, report) = if config.solver.final_refinement {
                solve_batch(&graph, &online, &config.solver.batch).map_err(|e| e.in_phase("refine"))?
            } else {
                let cost = crate::graph::total_cost(&graph, &online)?;
                let report = SolverReport {
                    initial_cost: cost,
                    final_cost: cost,
                    converged: true,
                    ..Default::default()
                };
                (online.clone(), report)
            };
            (graph, values, Some(online), report)
        }
        SolverMode::Batch => {
            let mut graph = FactorGraph::new();
            for l in &landmarks {
                graph.add_landmark(*l);
            }
            let mut last = first;
            for k in 0..nodes.len() {
                let (factors, guess) = factors_for(k, Some(&last)).map_err(|e| e.in_phase("build"))?;
                last = guess.unwrap_or(first);
                graph.add_nav_node(nodes[k], last).map_err(|e| e.in_phase("build"))?;
                for f in factors {
                    graph.add_factor(f).map_err(|e| e.in_phase("build"))?;
                }
            }
            let initial = graph.initial_values().clone();
            let (values, report) =
                solve_batch(&graph, &initial, &config.solver.batch).map_err(|e| e.in_phase("solve"))?;
            update_times.push(report.solve_time);
            (graph, values, None, report)
        }
    };

    let trajectory: Vec<(i64, Pose3)> = values.nav.iter().map(|s| (s.timestamp_ns, s.pose)).collect();
    let mut metrics = eval::evaluate(
        &trajectory,
        &inputs.truth,
        config.evaluation.max_gap_ns,
        config.evaluation.rpe_delta,
    )
    .map_err(|e| e.in_phase("evaluate"))?;
    metrics.timing = Some(TimingSummary::from_samples(&update_times));
    Ok(LocalizeResult {
        trajectory,
        values,
        incremental_values,
        graph,
        metrics,
        update_times,
        final_report,
        ranges_used,
    })
}

/// Simulated ranges for a run.
pub fn simulate_run_ranges(config: &RunConfig, inputs: &RunInputs) -> Result<Vec<RangeMeasurement>> {
    let model = config.scenario_model()?;
    sim::simulate_ranges(&inputs.truth, &inputs.layout, &model)
}

/// Loads inputs, simulates ranges, localizes and writes `trajectory.csv`,
/// `metrics.json`, `timing.json` and `report.txt` to `config.output_dir`.
pub fn run_localize(config: &RunConfig) -> Result<LocalizeResult> {
    config.validate()?;
    let inputs = load_inputs(config).map_err(|e| e.in_phase("load"))?;
    let ranges = simulate_run_ranges(config, &inputs).map_err(|e| e.in_phase("simulate"))?;
    info!(
        "{} IMU samples, {} ground-truth poses, {} ranges from {} stations",
        inputs.imu.len(),
        inputs.truth.len(),
        ranges.len(),
        inputs.layout.len()
    );
    let result = localize(config, &inputs, &ranges)?;
    write_localize_outputs(config, &result).map_err(|e| e.in_phase("write"))?;
    Ok(result)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_localize_outputs(config: &RunConfig, result: &LocalizeResult) -> Result<()> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    io::write_trajectory_csv(&dir.join("trajectory.csv"), &result.trajectory)?;
    // Timing varies between runs; keep metrics.json reproducible.
    let metrics = MetricsReport {
        timing: None,
        ..result.metrics.clone()
    };
    write_file(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics).expect("metrics serialize"),
    )?;
    let timing = serde_json::json!({
        "updates": result.metrics.timing,
        "final_solve": result.final_report,
    });
    write_file(
        &dir.join("timing.json"),
        &serde_json::to_string_pretty(&timing).expect("timing serializes"),
    )?;
    let row = ReportRow {
        scenario: config.scenario.preset.clone(),
        station_count: config.stations.count,
        metrics,
    };
    write_file(&dir.join("report.txt"), &eval::render_report(&row).table)
}

/// Grid of scenario presets × station counts, each run for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub presets: Vec<String>,
    /// Each count uses the first stations of the layout.
    pub station_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() || self.station_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "a sweep needs at least one preset, station count and seed".into(),
            ));
        }
        if let Some(n) = self.station_counts.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("station count {n} is below 2")));
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }

    /// Config for one (preset, station count, seed) cell.
    pub fn cell_config(&self, preset: &str, station_count: usize, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.scenario.preset = preset.to_string();
        c.stations.count = station_count;
        c.seed = seed;
        c.output_dir = self
            .base
            .output_dir
            .join(format!("{preset}_bs{station_count}_seed{seed}"));
        c
    }

    fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for p in &self.presets {
            for &n in &self.station_counts {
                for &s in &self.seeds {
                    out.push(self.cell_config(p, n, s));
                }
            }
        }
        out
    }
}

/// Per-node 3D position error of one cell run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub scenario: String,
    pub station_count: usize,
    pub seed: u64,
    pub timestamp_ns: i64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub scenario: String,
    pub station_count: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// One row per (scenario, station count) with metrics averaged over seeds.
    pub rows: Vec<ReportRow>,
    pub failures: Vec<CellFailure>,
    #[serde(skip)]
    pub samples: Vec<ErrorSample>,
}

impl SweepResult {
    /// Median per-node position error over all seeds of a cell.
    pub fn median_error(&self, scenario: &str, station_count: usize) -> Option<f64> {
        let mut e: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.scenario == scenario && s.station_count == station_count)
            .map(|s| s.error)
            .collect();
        if e.is_empty() {
            return None;
        }
        e.sort_by(f64::total_cmp);
        let n = e.len();
        Some(if n % 2 == 1 {
            e[n / 2]
        } else {
            0.5 * (e[n / 2 - 1] + e[n / 2])
        })
    }
}

fn position_errors(result: &LocalizeResult, truth: &GroundTruthTrajectory, max_gap_ns: i64) -> Vec<(i64, f64)> {
    eval::associate(&result.trajectory, truth, max_gap_ns)
        .map(|pairs| {
            pairs
                .iter()
                .map(|p| (p.timestamp_ns, (p.estimate.translation - p.truth.translation).norm()))
                .collect()
        })
        .unwrap_or_default()
}

fn mean_metrics(runs: &[&MetricsReport]) -> MetricsReport {
    let n = runs.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| runs.iter().map(|m| f(m)).sum::<f64>() / n;
    let timing: Vec<f64> = runs.iter().filter_map(|m| m.timing.map(|t| t.mean)).collect();
    MetricsReport {
        ate: avg(|m| m.ate),
        rmse_x: avg(|m| m.rmse_x),
        rmse_y: avg(|m| m.rmse_y),
        rmse_z: avg(|m| m.rmse_z),
        rpe_translation: avg(|m| m.rpe_translation),
        rpe_rotation: avg(|m| m.rpe_rotation),
        n_poses_evaluated: runs.iter().map(|m| m.n_poses_evaluated).sum(),
        timing: (!timing.is_empty()).then(|| TimingSummary::from_samples(&timing)),
    }
}

/// Runs every cell in parallel without writing files. A failing cell is
/// recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let cells = spec.cells();
    let outcomes: Vec<(RunConfig, Result<(MetricsReport, Vec<(i64, f64)>)>)> = cells
        .into_par_iter()
        .map(|config| {
            let outcome = (|| {
                let inputs = load_inputs(&config).map_err(|e| e.in_phase("load"))?;
                let ranges = simulate_run_ranges(&config, &inputs).map_err(|e| e.in_phase("simulate"))?;
                let result = localize(&config, &inputs, &ranges)?;
                let errors = position_errors(&result, &inputs.truth, config.evaluation.max_gap_ns);
                Ok((result.metrics, errors))
            })();
            (config, outcome)
        })
        .collect();

    let mut result = SweepResult::default();
    for preset in &spec.presets {
        for &count in &spec.station_counts {
            let mut metrics = Vec::new();
            for (config, outcome) in &outcomes {
                if config.scenario.preset != *preset || config.stations.count != count {
                    continue;
                }
                match outcome {
                    Ok((m, errors)) => {
                        metrics.push(m);
                        result.samples.extend(errors.iter().map(|&(t, e)| ErrorSample {
                            scenario: preset.clone(),
                            station_count: count,
                            seed: config.seed,
                            timestamp_ns: t,
                            error: e,
                        }));
                    }
                    Err(e) => {
                        warn!("{preset} with {count} stations, seed {}: {e}", config.seed);
                        result.failures.push(CellFailure {
                            scenario: preset.clone(),
                            station_count: count,
                            seed: config.seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
            if !metrics.is_empty() {
                result.rows.push(ReportRow {
                    scenario: preset.clone(),
                    station_count: count,
                    metrics: mean_metrics(&metrics),
                });
            }
        }
    }
    Ok(result)
}

pub const ERROR_SAMPLES_HEADER: &str = "scenario,station_count,seed,timestamp_ns,error_m";

/// Writes `sweep.json`, `sweep.txt` and the `errors.csv` box-plot samples.
pub fn write_sweep_outputs(dir: &Path, result: &SweepResult) -> Result<()> {
    create_dir(dir)?;
    let mut rows = result.rows.clone();
    for r in &mut rows {
        r.metrics.timing = None;
    }
    let doc = serde_json::json!({ "rows": rows, "failures": result.failures });
    write_file(
        &dir.join("sweep.json"),
        &serde_json::to_string_pretty(&doc).expect("sweep serializes"),
    )?;
    write_file(&dir.join("sweep.txt"), &eval::render_table(&rows))?;
    let mut csv = String::with_capacity(result.samples.len() * 48);
    csv.push_str(ERROR_SAMPLES_HEADER);
    csv.push('\n');
    for s in &result.samples {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:?}",
            s.scenario, s.station_count, s.seed, s.timestamp_ns, s.error
        );
    }
    write_file(&dir.join("errors.csv"), &csv)
}

/// Options for emitting correlation profiles alongside simulated ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileOptions {
    /// Seconds per bin.
    pub sample_period: f64,
    pub noise_floor: f64,
    /// Non-line-of-sight echoes added to every profile.
    pub multipath: Vec<Tap>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            sample_period: 2.5e-9,
            noise_floor: 0.05,
            multipath: vec![Tap {
                extra_delay: 20e-9,
                amplitude: 1.3,
            }],
        }
    }
}

/// Files written by [`run_simulate`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulateOutput {
    pub ranges: usize,
    pub profiles: Vec<PathBuf>,
}

/// Writes `groundtruth.csv`, `imu.csv`, `layout.csv` and `ranges.csv`, plus
/// one correlation profile per station at the first TOA epoch when
/// `profiles` is set.
pub fn run_simulate(config: &RunConfig, profiles: Option<&ProfileOptions>) -> Result<SimulateOutput> {
    config.validate()?;
    let inputs = load_inputs(config).map_err(|e| e.in_phase("load"))?;
    let ranges = simulate_run_ranges(config, &inputs).map_err(|e| e.in_phase("simulate"))?;
    let dir = &config.output_dir;
    let write = || -> Result<Vec<PathBuf>> {
        create_dir(dir)?;
        io::write_groundtruth_csv(&dir.join("groundtruth.csv"), &inputs.truth)?;
        io::write_imu_csv(&dir.join("imu.csv"), &inputs.imu)?;
        io::write_layout(&dir.join("layout.csv"), &inputs.layout)?;
        toa::write_ranges(&dir.join("ranges.csv"), &ranges)?;
        let Some(opts) = profiles else {
            return Ok(Vec::new());
        };
        let pdir = dir.join("profiles");
        create_dir(&pdir)?;
        let first_epoch = ranges.first().map(|r| r.timestamp_ns);
        let mut paths = Vec::new();
        for r in ranges.iter().filter(|r| Some(r.timestamp_ns) == first_epoch) {
            let delay = r.distance / toa::SPEED_OF_LIGHT;
            let last = opts.multipath.iter().map(|t| t.extra_delay).fold(0.0, f64::max);
            let n_bins = ((delay + last) / opts.sample_period).ceil() as usize + 64;
            let seed = config.seed ^ (u64::from(r.station_id) << 40);
            let profile = sim::simulate_profile(
                delay,
                1.0,
                &opts.multipath,
                opts.sample_period,
                n_bins,
                opts.noise_floor,
                seed,
            )?;
            let path = pdir.join(format!("station_{}.csv", r.station_id));
            profile.write(&path)?;
            paths.push(path);
        }
        Ok(paths)
    };
    let paths = write().map_err(|e| e.in_phase("write"))?;
    Ok(SimulateOutput {
        ranges: ranges.len(),
        profiles: paths,
    })
}

/// Result of TOA extraction for one profile file.
#[derive(Clone, Debug, PartialEq)]
pub enum ToaOutcome {
    Peak { delay: f64, distance: f64 },
    NoPeak,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToaRow {
    pub file: PathBuf,
    pub outcome: ToaOutcome,
}

pub const TOA_HEADER: &str = "file,delay_s,distance_m,status";

/// First-peak delay and distance for every profile; failures become rows.
pub fn toa_extract(files: &[PathBuf], threshold: f64) -> Result<Vec<ToaRow>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(files
        .iter()
        .map(|file| {
            let outcome = match CorrelationProfile::read(file).and_then(|p| toa::pick_toa(&p, threshold)) {
                Ok(delay) => match toa::delay_to_distance(delay) {
                    Ok(distance) => ToaOutcome::Peak { delay, distance },
                    Err(e) => ToaOutcome::Failed(e.to_string()),
                },
                Err(Error::NoPeak { .. }) => ToaOutcome::NoPeak,
                Err(e) => ToaOutcome::Failed(e.to_string()),
            };
            ToaRow {
                file: file.clone(),
                outcome,
            }
        })
        .collect())
}

pub fn render_toa_rows(rows: &[ToaRow]) -> String {
    let mut out = String::from(TOA_HEADER);
    out.push('\n');
    for r in rows {
        let file = r.file.display().to_string().replace(',', "_");
        let _ = match &r.outcome {
            ToaOutcome::Peak { delay, distance } => {
                writeln!(out, "{file},{delay:e},{distance:.6},ok")
            }
            ToaOutcome::NoPeak => writeln!(out, "{file},,,no_peak"),
            ToaOutcome::Failed(msg) => {
                writeln!(out, "{file},,,error: {}", msg.replace([',', '\n'], ";"))
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TrajectoryKind;

    fn quick_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.input.synth.kind = TrajectoryKind::Circle;
        c.input.synth.duration = 6.0;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn node_grid_covers_the_overlap() {
        let c = quick_config(Path::new("unused"));
        let inputs = load_inputs(&c).unwrap();
        let nodes = node_timestamps(&inputs, 10.0).unwrap();
        assert_eq!(nodes.len(), 61);
        assert_eq!(nodes[1] - nodes[0], 100_000_000);
    }

    #[test]
    fn every_second_node_carries_ranges() {
        let c = quick_config(Path::new("unused"));
        let inputs = load_inputs(&c).unwrap();
        let ranges = simulate_run_ranges(&c, &inputs).unwrap();
        let nodes = node_timestamps(&inputs, c.node_rate).unwrap();
        let bound = bind_ranges(&ranges, &nodes, c.node_rate).unwrap();
        for (k, b) in bound.iter().enumerate() {
            assert_eq!(b.len(), if k % 2 == 0 { 5 } else { 0 }, "node {k}");
        }
    }

    #[test]
    fn localize_writes_reproducible_outputs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_localize(&quick_config(a.path())).unwrap();
        run_localize(&quick_config(b.path())).unwrap();
        assert!(ra.metrics.ate < 0.3, "{}", ra.metrics.ate);
        for f in ["trajectory.csv", "metrics.json"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let traj = std::fs::read_to_string(a.path().join("trajectory.csv")).unwrap();
        assert!(traj.starts_with(io::TRAJECTORY_HEADER));
        assert_eq!(traj.lines().count(), 62);
        assert!(a.path().join("timing.json").exists());
    }

    #[test]
    fn batch_mode_matches_incremental() {
        let mut c = quick_config(Path::new("unused"));
        let inputs = load_inputs(&c).unwrap();
        let ranges = simulate_run_ranges(&c, &inputs).unwrap();
        let incremental = localize(&c, &inputs, &ranges).unwrap();
        c.solver.mode = SolverMode::Batch;
        let batch = localize(&c, &inputs, &ranges).unwrap();
        assert!(batch.incremental_values.is_none());
        for (a, b) in batch.values.nav.iter().zip(&incremental.values.nav) {
            assert!((a.pose.translation - b.pose.translation).amax() < 1e-4);
        }
    }

    #[test]
    fn missing_input_files_report_the_phase() {
        let mut c = quick_config(Path::new("unused"));
        c.input.imu = Some("/nonexistent/imu.csv".into());
        c.input.groundtruth = Some("/nonexistent/gt.csv".into());
        match run_localize(&c) {
            Err(Error::Phase { phase, source }) => {
                assert_eq!(phase, "load");
                assert!(matches!(*source, Error::Io { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toa_rows() {
        let dir = tempfile::tempdir().unwrap();
        let los = sim::simulate_profile(40e-9, 1.0, &[], 1e-9, 128, 0.0, 0).unwrap();
        let flat = CorrelationProfile::new(1e-9, 0.0, vec![0.05; 64]).unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        los.write(&a).unwrap();
        flat.write(&b).unwrap();
        let missing = dir.path().join("missing.csv");
        let rows = toa_extract(&[a, b, missing], 0.4).unwrap();
        match rows[0].outcome {
            ToaOutcome::Peak { delay, distance } => {
                assert!((delay - 40e-9).abs() <= 0.5e-9);
                assert!((distance - 11.99).abs() < 0.15);
            }
            ref o => panic!("{o:?}"),
        }
        assert_eq!(rows[1].outcome, ToaOutcome::NoPeak);
        assert!(matches!(rows[2].outcome, ToaOutcome::Failed(_)));
        let text = render_toa_rows(&rows);
        assert!(text.lines().nth(2).unwrap().ends_with(",,,no_peak"));
        assert!(toa_extract(&[], 1.5).is_err());
    }

    #[test]
    fn simulate_writes_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = quick_config(dir.path());
        let out = run_simulate(&c, Some(&ProfileOptions::default())).unwrap();
        assert_eq!(out.profiles.len(), 5);
        let ranges = toa::read_ranges(&dir.path().join("ranges.csv")).unwrap();
        assert_eq!(ranges.len(), out.ranges);
        io::read_imu_csv(&dir.path().join("imu.csv")).unwrap();
        io::read_groundtruth_csv(&dir.path().join("groundtruth.csv")).unwrap();
        assert_eq!(
            io::read_layout(&dir.path().join("layout.csv")).unwrap(),
            StationLayout::default()
        );
        let rows = toa_extract(&out.profiles, toa::DEFAULT_PEAK_THRESHOLD).unwrap();
        for (row, r) in rows.iter().zip(&ranges) {
            let ToaOutcome::Peak { distance, .. } = row.outcome else {
                panic!("{row:?}");
            };
            // Line-of-sight bin, not the stronger echo 6 m later.
            assert!((distance - r.distance).abs() < 0.5, "{distance} vs {}", r.distance);
        }
    }

    #[test]
    fn sweep_cell_equals_single_run() {
        let dir = tempfile::tempdir().unwrap();
        let base = quick_config(dir.path());
        let spec = SweepSpec {
            base: base.clone(),
            presets: vec!["indoor-28GHz".into()],
            station_counts: vec![3],
            seeds: vec![7],
        };
        let sweep = run_sweep(&spec).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        let single = run_localize(&spec.cell_config("indoor-28GHz", 3, 7)).unwrap();
        let mut expected = single.metrics.clone();
        expected.timing = None;
        let mut got = sweep.rows[0].metrics.clone();
        got.timing = None;
        assert_eq!(got, expected);
        assert_eq!(sweep.samples.len(), single.trajectory.len());
        write_sweep_outputs(dir.path(), &sweep).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
        assert_eq!(csv.lines().count(), sweep.samples.len() + 1);
    }

    #[test]
    fn sweep_records_failing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = quick_config(dir.path());
        base.input.synth.duration = 0.05;
        let spec = SweepSpec {
            base,
            presets: vec!["mmmagic".into()],
            station_counts: vec![2],
            seeds: vec![0, 1],
        };
        let sweep = run_sweep(&spec).unwrap();
        assert!(sweep.rows.is_empty());
        assert_eq!(sweep.failures.len(), 2);
        let bad = SweepSpec {
            station_counts: vec![1],
            ..spec
        };
        assert!(matches!(run_sweep(&bad), Err(Error::Config(_))));
    }
}
