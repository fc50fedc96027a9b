//! Batch commands behind the `gtf` binary.
//!
//! Every command reads one JSON [`RunConfig`] and writes into an output
//! directory. Inputs a command needs default to the files an earlier command
//! wrote into the same directory, so `simulate`, `calibrate`, `solve` and
//! `analyze` chain without extra flags.

use std::path::{Path, PathBuf};

use gtf_core::analysis::{
    bin_by_dynamics, dynamics_signals, gnss_compare, inter_prism_by_regime, inter_prism_errors, perturbation_study, static_segments,
    static_triplets, DynamicsBins, ErrorSeries, PerturbationConfig, StaticThresholds,
};
use gtf_core::geometry::{calibrate_stations, CalibrationResult, MarkerObservation};
use gtf_core::io;
use gtf_core::pipeline::{gate, process, unify_frames, InterpolationConfig, PipelineOutput};
use gtf_core::radio::{delivery_rates, ChannelConfig, ClientSetup, RadioSim};
use gtf_core::seed::rng_for;
use gtf_core::station::{GnssConfig, GnssRegime, Segment, StartPose, StationModel, Trajectory, TrajectorySpec, simulate_gnss_pair};
use gtf_core::timesync::{CorrectionSchedule, SyncConfig};
use gtf_core::{Error, FrameId, Point3, PrismLayout, Timestamp};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub mod files {
    pub const TRAJECTORY: &str = "trajectory.json";
    pub const MEASUREMENTS: &str = "measurements.csv";
    pub const EVENTS: &str = "events.csv";
    pub const SYNC: &str = "sync.csv";
    pub const GROUND_TRUTH: &str = "ground_truth.csv";
    pub const MARKERS: &str = "markers.csv";
    pub const GNSS: &str = "gnss.csv";
    pub const CALIBRATION: &str = "calibration.json";
    pub const POSES: &str = "poses.csv";
    pub const FIG5_HIST: &str = "fig5_hist.csv";
    pub const FIG5_SUMMARY: &str = "fig5_summary.csv";
    pub const FIG6_V_W: &str = "fig6_grid_v_w.csv";
    pub const FIG6_A_W: &str = "fig6_grid_a_w.csv";
    pub const FIG7: &str = "fig7_curves.csv";
    pub const FIG8: &str = "fig8_summary.csv";
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Configuration(_) => CliError::Config(e.to_string()),
            Error::SyncTimeout { .. } => CliError::Numerical(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn with_path(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Synthetic control markers seen by every station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerConfig {
    pub count: usize,
    /// Per-axis noise on each station's marker coordinates.
    pub sigma_m: f64,
    /// Markers are spread uniformly over `[-extent, extent]` in x and y.
    pub extent_m: f64,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        MarkerConfig { count: 6, sigma_m: 0.002, extent_m: 40.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub static_thresholds: StaticThresholds,
    /// Largest time gap when pairing raw static samples across stations.
    pub static_pair_max_s: f64,
    pub hist_lo_m: f64,
    pub hist_hi_m: f64,
    pub hist_bins: usize,
    pub dynamics: DynamicsBins,
    pub perturbation: PerturbationConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            static_thresholds: StaticThresholds::default(),
            static_pair_max_s: 1.0,
            hist_lo_m: -0.02,
            hist_hi_m: 0.02,
            hist_bins: 40,
            dynamics: DynamicsBins::default(),
            perturbation: PerturbationConfig::default(),
        }
    }
}

/// Optional overrides for input files. Unset entries default to the output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub markers: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub sync: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub gnss: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Trajectory JSON; the built-in route when unset.
    pub trajectory: Option<PathBuf>,
    pub stations: [StationModel; 3],
    pub channel: ChannelConfig,
    pub sync: SyncConfig,
    pub interpolation: InterpolationConfig,
    pub layout: PrismLayout,
    pub gnss: GnssConfig,
    pub markers: MarkerConfig,
    pub analysis: AnalysisConfig,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            trajectory: None,
            stations: StationModel::default_set(),
            channel: ChannelConfig::default(),
            sync: SyncConfig::default(),
            interpolation: InterpolationConfig::default(),
            layout: PrismLayout::default(),
            gnss: GnssConfig::default(),
            markers: MarkerConfig::default(),
            analysis: AnalysisConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.trajectory);
        rebase(&mut cfg.inputs.markers);
        rebase(&mut cfg.inputs.measurements);
        rebase(&mut cfg.inputs.sync);
        rebase(&mut cfg.inputs.calibration);
        rebase(&mut cfg.inputs.gnss);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if let Some(t) = &self.trajectory {
            if !t.is_file() {
                return Err(CliError::Config(format!("trajectory file {} does not exist", t.display())));
            }
        }
        let explicit = [&self.inputs.markers, &self.inputs.measurements, &self.inputs.sync, &self.inputs.calibration, &self.inputs.gnss];
        for p in explicit.into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Config(format!("input file {} does not exist", p.display())));
            }
        }
        for (k, s) in self.stations.iter().enumerate() {
            if s.id != FrameId::STATIONS[k] {
                return Err(CliError::Config(format!("stations[{k}] must have id {:?}", FrameId::STATIONS[k])));
            }
            s.validate()?;
        }
        self.channel.validate()?;
        self.sync.validate()?;
        self.interpolation.validate()?;
        self.gnss.validate()?;
        if self.markers.count < 3 || !(self.markers.sigma_m >= 0.0) || !(self.markers.extent_m > 0.0) {
            return Err(CliError::Config("markers need count >= 3, sigma_m >= 0 and extent_m > 0".into()));
        }
        for b in [self.analysis.dynamics.linear, self.analysis.dynamics.angular, self.analysis.dynamics.accel] {
            b.validate()?;
        }
        let a = &self.analysis;
        if !(a.hist_hi_m > a.hist_lo_m) || a.hist_bins == 0 || !(a.static_pair_max_s > 0.0) || !(a.dynamics.accel_half_window_s > 0.0) {
            return Err(CliError::Config("analysis histogram, pairing gap or acceleration window out of range".into()));
        }
        Ok(())
    }

    pub fn trajectory_spec(&self) -> Result<TrajectorySpec> {
        match &self.trajectory {
            Some(p) => io::read_trajectory(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
            None => Ok(default_trajectory()),
        }
    }
}

/// A mixed route of about seven minutes from (5, -25): stops, straights,
/// arcs and turns on the spot, first in open sky and then under canopy.
pub fn default_trajectory() -> TrajectorySpec {
    let legs = |regime: GnssRegime, sign: f64| {
        let s = |duration_s: f64, linear_mps: f64, angular_rps: f64| Segment { duration_s, linear_mps, angular_rps, regime };
        vec![
            s(60.0, 0.0, 0.0),
            s(20.0, 0.5, 0.0),
            s(15.7, 0.3, 0.2 * sign),
            s(12.0, 0.8, 0.0),
            s(10.0, 0.2, 0.6 * sign),
            s(30.0, 0.0, 0.0),
            s(15.0, 1.0, 0.1 * sign),
            s(12.0, 0.0, 0.5 * sign),
            s(20.0, 0.6, -0.3 * sign),
            s(8.0, 0.4, 0.75 * sign),
            s(20.0, 0.0, 0.0),
        ]
    };
    let mut segments = legs(GnssRegime::Open, 1.0);
    segments.extend(legs(GnssRegime::Forest, -1.0));
    TrajectorySpec { start: StartPose { x: 5.0, y: -25.0, z: 0.0, yaw: 0.0 }, segments }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub parallel: usize,
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
    parallel: usize,
}

impl Context {
    fn new(opts: &Options) -> Result<Self> {
        let cfg = RunConfig::load(&opts.config)?;
        std::fs::create_dir_all(&opts.out).map_err(|e| CliError::Config(format!("{}: {e}", opts.out.display())))?;
        let seed = opts.seed.unwrap_or(cfg.seed);
        Ok(Context { cfg, out: opts.out.clone(), seed, parallel: opts.parallel.max(1) })
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, set: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = set.clone().unwrap_or_else(|| self.out.join(name));
        if !p.is_file() {
            return Err(CliError::Input(format!("missing input {}", p.display())));
        }
        Ok(p)
    }

    fn trajectory(&self) -> Result<Trajectory> {
        let spec = match &self.cfg.trajectory {
            Some(_) => self.cfg.trajectory_spec()?,
            None => {
                let simulated = self.out.join(files::TRAJECTORY);
                if simulated.is_file() {
                    io::read_trajectory(&simulated).map_err(with_path(&simulated))?
                } else {
                    default_trajectory()
                }
            }
        };
        Ok(Trajectory::new(spec)?)
    }

    fn measurements(&self) -> Result<Vec<gtf_core::RawMeasurement>> {
        let p = self.input(&self.cfg.inputs.measurements, files::MEASUREMENTS)?;
        io::read_measurements(&p).map_err(with_path(&p))
    }

    fn schedules(&self) -> Result<[CorrectionSchedule; 3]> {
        let p = self.input(&self.cfg.inputs.sync, files::SYNC)?;
        io::read_sync(&p).map_err(with_path(&p))
    }

    fn calibration(&self) -> Result<CalibrationResult> {
        let p = self.input(&self.cfg.inputs.calibration, files::CALIBRATION)?;
        io::read_calibration(&p).map_err(with_path(&p))
    }

    fn pipeline(&self) -> Result<PipelineOutput> {
        let log = self.measurements()?;
        let schedules = self.schedules()?;
        let calib = self.calibration()?;
        Ok(process(&log, Some(&calib), &schedules, &self.cfg.layout, &self.cfg.interpolation, self.parallel)?)
    }
}

/// Noisy observations of `cfg.count` ground markers from each station.
pub fn synthesize_markers(stations: &[StationModel; 3], cfg: &MarkerConfig, seed: u64) -> Vec<MarkerObservation> {
    let mut rng = rng_for(seed, "markers", 0);
    let noise = Normal::new(0.0, cfg.sigma_m.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = Vec::new();
    for k in 0..cfg.count {
        let world = Point3::new(
            rng.random_range(-cfg.extent_m..cfg.extent_m),
            rng.random_range(-cfg.extent_m..cfg.extent_m),
            rng.random_range(-1.0..2.0),
        );
        for s in stations {
            let mut local = s.frame().inverse().apply(&world);
            if cfg.sigma_m > 0.0 {
                for c in local.coords.iter_mut() {
                    *c += noise.sample(&mut rng);
                }
            }
            out.push(MarkerObservation { marker_id: format!("M{:02}", k + 1), station: s.id, position: local });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub duration_s: f64,
    pub received: usize,
    pub rounds: usize,
    pub failed_resyncs: usize,
    /// Per-station delivery rate over the polling period, Hz.
    pub station_rates_hz: Vec<(u8, f64)>,
}

impl SimulateSummary {
    /// Full poll cycles per second.
    pub fn cycle_rate_hz(&self) -> f64 {
        let n = self.station_rates_hz.len().max(1) as f64;
        self.station_rates_hz.iter().map(|r| r.1).sum::<f64>() / n
    }
}

pub fn simulate(opts: &Options) -> Result<SimulateSummary> {
    let ctx = Context::new(opts)?;
    let cfg = &ctx.cfg;
    let traj = Trajectory::new(cfg.trajectory_spec()?)?;
    let end = traj.end();

    let mut clients = Vec::with_capacity(3);
    for s in &cfg.stations {
        let run = s.simulate(&traj, &cfg.layout, Timestamp::ZERO, end, ctx.seed)?;
        let id = s.id.station_number().expect("station frame");
        clients.push(ClientSetup { id, clock: s.clock, samples: run.samples });
    }
    let run = RadioSim::new(cfg.channel, clients, ctx.seed)?.run(end, &cfg.sync)?;

    io::write_trajectory(&ctx.output(files::TRAJECTORY), &traj)?;
    io::write_measurements(&ctx.output(files::MEASUREMENTS), &run.measurements())?;
    io::write_events(&ctx.output(files::EVENTS), &run.events)?;
    io::write_sync(&ctx.output(files::SYNC), &run.sync_log)?;
    io::write_ground_truth(&ctx.output(files::GROUND_TRUTH), &traj, cfg.interpolation.step_us())?;
    io::write_markers(&ctx.output(files::MARKERS), &synthesize_markers(&cfg.stations, &cfg.markers, ctx.seed))?;
    io::write_gnss(&ctx.output(files::GNSS), &simulate_gnss_pair(&traj, &cfg.gnss, ctx.seed)?)?;

    Ok(SimulateSummary {
        duration_s: traj.duration_s(),
        received: run.received.len(),
        rounds: run.rounds,
        failed_resyncs: run.failed_resyncs,
        station_rates_hz: delivery_rates(&run.events, &[1, 2, 3], cfg.channel.measurement_msg_len, run.polling_start, run.end),
    })
}

pub fn calibrate(opts: &Options) -> Result<CalibrationResult> {
    let ctx = Context::new(opts)?;
    let p = ctx.input(&ctx.cfg.inputs.markers, files::MARKERS)?;
    let markers = io::read_markers(&p).map_err(with_path(&p))?;
    let calib = calibrate_stations(&markers)?;
    io::write_calibration(&ctx.output(files::CALIBRATION), &calib)?;
    Ok(calib)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveSummary {
    pub grid_points: usize,
    pub valid: usize,
}

pub fn solve(opts: &Options) -> Result<SolveSummary> {
    let ctx = Context::new(opts)?;
    let out = ctx.pipeline()?;
    io::write_poses(&ctx.output(files::POSES), &out.poses)?;
    Ok(SolveSummary { grid_points: out.poses.len(), valid: out.poses.iter().filter(|p| p.valid).count() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Static,
    Dynamic,
    Perturb,
    Gnss,
    All,
}

fn grid_errors(out: &PipelineOutput, layout: &PrismLayout) -> ErrorSeries {
    let triplets: Vec<_> = out.grid.iter().filter(|g| g.valid).map(|g| (g.t, g.triplet)).collect();
    inter_prism_errors(&triplets, layout)
}

fn analyze_static(ctx: &Context) -> Result<Vec<PathBuf>> {
    let traj = ctx.trajectory()?;
    let log = ctx.measurements()?;
    let tracks = unify_frames(&gate(&log), Some(&ctx.calibration()?), &ctx.schedules()?)?;
    let a = &ctx.cfg.analysis;
    let intervals = static_segments(&traj, &a.static_thresholds);
    let series = inter_prism_errors(&static_triplets(&tracks, &intervals, a.static_pair_max_s), &ctx.cfg.layout);
    io::write_fig5(&ctx.out, &series, a.hist_lo_m, a.hist_hi_m, a.hist_bins)?;
    Ok(vec![ctx.output(files::FIG5_HIST), ctx.output(files::FIG5_SUMMARY)])
}

fn analyze_dynamic(ctx: &Context) -> Result<Vec<PathBuf>> {
    let traj = ctx.trajectory()?;
    let series = grid_errors(&ctx.pipeline()?, &ctx.cfg.layout);
    let bins = &ctx.cfg.analysis.dynamics;
    let (v, a, w) = dynamics_signals(&traj, &series.t, bins.accel_half_window_s)?;
    let grids = bin_by_dynamics(&series.mean_abs(), &v, &a, &w, bins)?;
    io::write_grid(&ctx.output(files::FIG6_V_W), &grids.v_w)?;
    io::write_grid(&ctx.output(files::FIG6_A_W), &grids.a_w)?;
    Ok(vec![ctx.output(files::FIG6_V_W), ctx.output(files::FIG6_A_W)])
}

fn analyze_perturb(ctx: &Context) -> Result<Vec<PathBuf>> {
    let curve = perturbation_study(&ctx.cfg.layout, ctx.seed, &ctx.cfg.analysis.perturbation, ctx.parallel)?;
    io::write_fig7(&ctx.output(files::FIG7), &curve)?;
    Ok(vec![ctx.output(files::FIG7)])
}

fn analyze_gnss(ctx: &Context) -> Result<Vec<PathBuf>> {
    let traj = ctx.trajectory()?;
    let p = ctx.input(&ctx.cfg.inputs.gnss, files::GNSS)?;
    let [a, b] = io::read_gnss(&p).map_err(with_path(&p))?;
    let gnss = gnss_compare(&a, &b, ctx.cfg.gnss.reference_separation());
    let ts = inter_prism_by_regime(&grid_errors(&ctx.pipeline()?, &ctx.cfg.layout), &traj)?;
    let mut rows = Vec::new();
    for (regime, stats) in ts {
        rows.push(io::SourceSummaryRow::new("total_station", regime, stats));
    }
    for regime in [GnssRegime::Open, GnssRegime::Forest] {
        rows.push(io::SourceSummaryRow::new("gnss", regime, gnss.stats(regime)));
    }
    io::write_fig8(&ctx.output(files::FIG8), &rows)?;
    Ok(vec![ctx.output(files::FIG8)])
}

/// Writes the report CSVs for `mode` and returns their paths.
pub fn analyze(opts: &Options, mode: Mode) -> Result<Vec<PathBuf>> {
    let ctx = Context::new(opts)?;
    match mode {
        Mode::Static => analyze_static(&ctx),
        Mode::Dynamic => analyze_dynamic(&ctx),
        Mode::Perturb => analyze_perturb(&ctx),
        Mode::Gnss => analyze_gnss(&ctx),
        Mode::All => {
            let mut out = analyze_static(&ctx)?;
            out.extend(analyze_dynamic(&ctx)?);
            out.extend(analyze_gnss(&ctx)?);
            out.extend(analyze_perturb(&ctx)?);
            Ok(out)
        }
    }
}
