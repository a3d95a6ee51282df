use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, LevelFilter};

use rangefuse::eval::{self, ReportRow};
use rangefuse::io::{self, RunConfig, SolverMode};
use rangefuse::pipeline::{self, ProfileOptions, SweepSpec};
use rangefuse::sim::{ScenarioModel, TrajectoryKind};
use rangefuse::toa::DEFAULT_PEAK_THRESHOLD;
use rangefuse::Error;

/// Range/inertial localization with an incrementally solved factor graph.
#[derive(Parser, Debug)]
#[command(name = "rangefuse", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate ranges, localize, evaluate and write the trajectory and metrics.
    Localize(RunArgs),
    /// Run every scenario × station-count cell over several seeds.
    Sweep(SweepArgs),
    /// Write ground truth, IMU, station layout and ranges (and optionally correlation profiles) without solving.
    Simulate(SimulateArgs),
    /// Pick the first-peak delay of correlation profile files.
    ToaExtract(ToaArgs),
    /// Compute ATE and RPE of an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Incremental,
    Batch,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Lissajous,
    Circle,
    Hover,
}

/// Run configuration: a TOML file, then these overrides.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML run configuration; built-in defaults if omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Seed for range and IMU noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario preset: industrial-5GHz, indoor-28GHz or mmmagic-78GHz (or industrial, indoor, mmmagic).
    #[arg(long)]
    preset: Option<String>,
    /// Use per-station noise statistics instead of the preset average.
    #[arg(long)]
    per_station: bool,
    /// Override the range noise mean, meters.
    #[arg(long)]
    range_noise_mean: Option<f64>,
    /// Override the range noise standard deviation, meters.
    #[arg(long)]
    range_noise_std: Option<f64>,
    /// Probability that a range is drawn from the outlier distribution.
    #[arg(long)]
    outlier_probability: Option<f64>,
    /// Number of base stations, taken from the start of the layout.
    #[arg(long)]
    stations: Option<usize>,
    /// Station layout file (station_id,x_m,y_m,z_m).
    #[arg(long)]
    station_file: Option<PathBuf>,
    /// EuRoC IMU CSV; requires --groundtruth.
    #[arg(long, requires = "groundtruth")]
    imu: Option<PathBuf>,
    /// EuRoC ground-truth CSV; requires --imu.
    #[arg(long, requires = "imu")]
    groundtruth: Option<PathBuf>,
    /// Synthetic trajectory shape, used without input files.
    #[arg(long, value_enum)]
    trajectory: Option<Kind>,
    /// Synthetic trajectory duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Synthesize noiseless IMU samples.
    #[arg(long)]
    noiseless_imu: bool,
    /// Graph nodes per second.
    #[arg(long)]
    node_rate: Option<f64>,
    /// Range epochs per second.
    #[arg(long)]
    toa_rate: Option<f64>,
    /// Solver mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Huber kernel on range factors.
    #[arg(long)]
    robust: bool,
    /// Skip the batch refinement after the last incremental update.
    #[arg(long)]
    no_final_refinement: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.preset {
            c.scenario.preset = v.clone();
        }
        c.scenario.per_station |= self.per_station;
        if self.range_noise_mean.is_some() {
            c.scenario.range_noise_mean = self.range_noise_mean;
        }
        if self.range_noise_std.is_some() {
            c.scenario.range_noise_std = self.range_noise_std;
        }
        if let Some(v) = self.outlier_probability {
            c.scenario.outlier_probability = v;
        }
        if let Some(v) = self.stations {
            c.stations.count = v;
        }
        if let Some(v) = &self.station_file {
            c.stations.file = Some(v.clone());
        }
        if let (Some(imu), Some(gt)) = (&self.imu, &self.groundtruth) {
            c.input.imu = Some(imu.clone());
            c.input.groundtruth = Some(gt.clone());
        }
        if let Some(k) = self.trajectory {
            c.input.synth.kind = match k {
                Kind::Lissajous => TrajectoryKind::Lissajous,
                Kind::Circle => TrajectoryKind::Circle,
                Kind::Hover => TrajectoryKind::Hover,
            };
        }
        if let Some(v) = self.duration {
            c.input.synth.duration = v;
        }
        if self.noiseless_imu {
            c.input.synth.imu_noise = false;
        }
        if let Some(v) = self.node_rate {
            c.node_rate = v;
        }
        if let Some(v) = self.toa_rate {
            c.toa_rate = v;
        }
        if let Some(m) = self.mode {
            c.solver.mode = match m {
                Mode::Incremental => SolverMode::Incremental,
                Mode::Batch => SolverMode::Batch,
            };
        }
        c.solver.robust |= self.robust;
        if self.no_final_refinement {
            c.solver.final_refinement = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated scenario presets.
    #[arg(long, value_delimiter = ',', default_values_t = ScenarioModel::PRESETS.map(String::from))]
    presets: Vec<String>,
    /// Comma-separated station counts.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 5])]
    station_counts: Vec<usize>,
    /// Number of seeds per cell, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also write one correlation profile per station for the first TOA epoch.
    #[arg(long)]
    profiles: bool,
}

#[derive(Args, Debug)]
struct ToaArgs {
    /// Correlation profile files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Detection threshold as a fraction of full scale, in (0, 1).
    #[arg(long, default_value_t = DEFAULT_PEAK_THRESHOLD)]
    threshold: f64,
    /// Write the table here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Estimated trajectory (timestamp_ns,p_x,p_y,p_z,q_w,q_x,q_y,q_z).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground truth in the same format or EuRoC ground-truth format.
    #[arg(long)]
    groundtruth: PathBuf,
    /// Largest timestamp difference for associating poses, nanoseconds.
    #[arg(long, default_value_t = io::DEFAULT_MAX_GAP_NS)]
    max_gap_ns: i64,
    /// Node steps between poses compared by the relative pose error.
    #[arg(long, default_value_t = 1)]
    rpe_delta: usize,
    /// Scenario label for the table.
    #[arg(long, default_value = "-")]
    scenario: String,
    /// Station count for the table.
    #[arg(long, default_value_t = 0)]
    stations: usize,
    /// Write the metrics document here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Exit code for a sweep in which some cells failed.
const PARTIAL_SWEEP: u8 = 5;

fn write(path: &PathBuf, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Localize(args) => {
            let config = args.config()?;
            let result = pipeline::run_localize(&config)?;
            let row = ReportRow {
                scenario: config.scenario.preset.clone(),
                station_count: config.stations.count,
                metrics: result.metrics.clone(),
            };
            print!("{}", eval::render_table(std::slice::from_ref(&row)));
            if let Some(t) = result.metrics.timing {
                println!(
                    "updates: {}  sum {:.3} s  mean {:.4} s  median {:.4} s",
                    t.count, t.sum, t.mean, t.median
                );
            }
            info!("outputs in {}", config.output_dir.display());
            Ok(0)
        }
        Command::Sweep(args) => {
            let base = args.run.config()?;
            let spec = SweepSpec {
                presets: args.presets.clone(),
                station_counts: args.station_counts.clone(),
                seeds: (base.seed..base.seed + args.seeds.max(1)).collect(),
                base,
            };
            let result = pipeline::run_sweep(&spec)?;
            pipeline::write_sweep_outputs(&spec.base.output_dir, &result)?;
            print!("{}", eval::render_table(&result.rows));
            for f in &result.failures {
                error!(
                    "{} with {} stations, seed {}: {}",
                    f.scenario, f.station_count, f.seed, f.error
                );
            }
            Ok(if result.failures.is_empty() { 0 } else { PARTIAL_SWEEP })
        }
        Command::Simulate(args) => {
            let config = args.run.config()?;
            let opts = ProfileOptions::default();
            let out = pipeline::run_simulate(&config, args.profiles.then_some(&opts))?;
            println!(
                "{} ranges, {} profiles written to {}",
                out.ranges,
                out.profiles.len(),
                config.output_dir.display()
            );
            Ok(0)
        }
        Command::ToaExtract(args) => {
            let rows = pipeline::toa_extract(&args.files, args.threshold)?;
            let text = pipeline::render_toa_rows(&rows);
            match &args.output {
                Some(path) => write(path, &text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Eval(args) => {
            let est = io::read_groundtruth_csv(&args.estimate)?;
            let gt = io::read_groundtruth_csv(&args.groundtruth)?;
            let poses: Vec<_> = est.samples().iter().map(|s| (s.timestamp_ns, s.pose)).collect();
            let metrics = eval::evaluate(&poses, &gt, args.max_gap_ns, args.rpe_delta)?;
            let row = ReportRow {
                scenario: args.scenario,
                station_count: args.stations,
                metrics,
            };
            let rendered = eval::render_report(&row);
            if let Some(path) = &args.output {
                write(path, &rendered.json)?;
            }
            print!("{}", rendered.table);
            Ok(0)
        }
        Command::Config => {
            print!("{}", io::DEFAULT_CONFIG_TOML);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
