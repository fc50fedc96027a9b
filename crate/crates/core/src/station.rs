//! Robot trajectories, total-station measurement models and a simulated
//! GNSS receiver pair.
//!
//! Times here are master-clock timestamps; trajectory time zero is master
//! time zero.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::cartesian_to_polar;
use crate::seed::rng_for;
use crate::types::{FrameId, MeasurementStatus, Point3, PrismLayout, RawMeasurement, RigidTransform, Timestamp};

pub const MAX_LINEAR_SPEED: f64 = 2.0;
pub const MAX_ANGULAR_SPEED: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnssRegime {
    #[default]
    Open,
    Forest,
}

impl GnssRegime {
    pub fn name(self) -> &'static str {
        match self {
            GnssRegime::Open => "open",
            GnssRegime::Forest => "forest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(default)]
    pub yaw: f64,
}

/// Constant linear and angular velocity for `duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration_s: f64,
    #[serde(default)]
    pub linear_mps: f64,
    #[serde(default)]
    pub angular_rps: f64,
    #[serde(default)]
    pub regime: GnssRegime,
}

impl Segment {
    pub fn is_stop(&self) -> bool {
        self.linear_mps == 0.0 && self.angular_rps == 0.0
    }
}

/// Planar unicycle motion from a start pose through velocity segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub start: StartPose,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy)]
struct Knot {
    t: f64,
    x: f64,
    y: f64,
    yaw: f64,
}

/// A validated trajectory with precomputed segment boundaries.
#[derive(Debug, Clone)]
pub struct Trajectory {
    spec: TrajectorySpec,
    knots: Vec<Knot>,
}

fn advance(k: &Knot, seg: &Segment, dt: f64) -> Knot {
    let (v, w) = (seg.linear_mps, seg.angular_rps);
    let yaw1 = k.yaw + w * dt;
    let (dx, dy) = if w.abs() < 1e-12 {
        (v * dt * k.yaw.cos(), v * dt * k.yaw.sin())
    } else {
        ((v / w) * (yaw1.sin() - k.yaw.sin()), -(v / w) * (yaw1.cos() - k.yaw.cos()))
    };
    Knot { t: k.t + dt, x: k.x + dx, y: k.y + dy, yaw: yaw1 }
}

impl Trajectory {
    pub fn new(spec: TrajectorySpec) -> Result<Self> {
        Self::with_limits(spec, MAX_LINEAR_SPEED, MAX_ANGULAR_SPEED)
    }

    pub fn with_limits(spec: TrajectorySpec, max_linear: f64, max_angular: f64) -> Result<Self> {
        let s = &spec.start;
        if ![s.x, s.y, s.z, s.yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::Configuration("trajectory start must be finite".into()));
        }
        if spec.segments.is_empty() {
            return Err(Error::Configuration("trajectory has no segments".into()));
        }
        let mut knots = vec![Knot { t: 0.0, x: s.x, y: s.y, yaw: s.yaw }];
        for (i, seg) in spec.segments.iter().enumerate() {
            if !(seg.duration_s > 0.0 && seg.duration_s.is_finite()) {
                return Err(Error::Configuration(format!("segment {i} has non-positive duration")));
            }
            if !(seg.linear_mps.abs() <= max_linear) {
                return Err(Error::Configuration(format!("segment {i} exceeds the linear speed limit {max_linear} m/s")));
            }
            if !(seg.angular_rps.abs() <= max_angular) {
                return Err(Error::Configuration(format!("segment {i} exceeds the angular speed limit {max_angular} rad/s")));
            }
            let last = *knots.last().expect("non-empty");
            knots.push(advance(&last, seg, seg.duration_s));
        }
        Ok(Trajectory { spec, knots })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn duration_s(&self) -> f64 {
        self.knots.last().expect("non-empty").t
    }

    pub fn end(&self) -> Timestamp {
        Timestamp::from_secs_f64(self.duration_s())
    }

    fn locate(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0 && t <= self.duration_s()) {
            return Err(Error::OutOfRange(format!("t = {t} s outside trajectory span [0, {}] s", self.duration_s())));
        }
        let idx = self.knots.partition_point(|k| k.t <= t);
        Ok(idx.saturating_sub(1).min(self.spec.segments.len() - 1))
    }

    pub fn pose_at_secs(&self, t: f64) -> Result<RigidTransform> {
        let i = self.locate(t)?;
        let k = advance(&self.knots[i], &self.spec.segments[i], t - self.knots[i].t);
        Ok(RigidTransform::from_yaw(k.yaw, Vector3::new(k.x, k.y, self.spec.start.z)))
    }

    /// Exact robot pose (robot frame to common frame) at master time `t`.
    pub fn pose_at(&self, t: Timestamp) -> Result<RigidTransform> {
        self.pose_at_secs(t.as_secs_f64())
    }

    fn pose_clamped(&self, t: f64) -> RigidTransform {
        self.pose_at_secs(t.clamp(0.0, self.duration_s())).expect("clamped into span")
    }

    fn segment_at(&self, t: f64) -> Result<&Segment> {
        Ok(&self.spec.segments[self.locate(t)?])
    }

    /// Commanded `(linear, angular)` velocity at `t` seconds.
    pub fn velocity_at(&self, t: f64) -> Result<(f64, f64)> {
        let s = self.segment_at(t)?;
        Ok((s.linear_mps, s.angular_rps))
    }

    /// Central difference of the commanded linear speed over `[t - h, t + h]`
    /// (clamped to the span).
    pub fn acceleration_at(&self, t: f64, half_window_s: f64) -> Result<f64> {
        self.locate(t)?;
        let a = (t - half_window_s).max(0.0);
        let b = (t + half_window_s).min(self.duration_s());
        if b <= a {
            return Ok(0.0);
        }
        Ok((self.velocity_at(b)?.0 - self.velocity_at(a)?.0) / (b - a))
    }

    pub fn regime_at(&self, t: f64) -> Result<GnssRegime> {
        Ok(self.segment_at(t)?.regime)
    }

    /// `(position, yaw)` at every segment boundary, start included.
    pub fn waypoints(&self) -> Vec<(Point3, f64)> {
        self.knots
            .iter()
            .map(|k| (Point3::new(k.x, k.y, self.spec.start.z), k.yaw))
            .collect()
    }

    /// `[start, end)` seconds of each segment.
    pub fn segment_spans(&self) -> Vec<(f64, f64, Segment)> {
        self.knots
            .windows(2)
            .zip(&self.spec.segments)
            .map(|(w, s)| (w[0].t, w[1].t, *s))
            .collect()
    }
}

/// Client clock: `client = offset + (1 + drift) * master`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientClock {
    pub offset_us: f64,
    pub drift_ppm: f64,
}

impl ClientClock {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset_us >= 0.0 && self.offset_us.is_finite()) {
            return Err(Error::Configuration("client clock offset must be finite and non-negative".into()));
        }
        if !(self.drift_ppm.abs() < 1e5) {
            return Err(Error::Configuration("client clock drift must be below 1e5 ppm".into()));
        }
        Ok(())
    }

    pub fn client_time(&self, master: Timestamp) -> Timestamp {
        let m = master.micros() as f64;
        Timestamp::from_micros((m + self.offset_us + self.drift_ppm * 1e-6 * m).round() as i64)
    }

    /// True skew `client - master` at master time `master`.
    pub fn skew_at(&self, master: Timestamp) -> f64 {
        self.offset_us + self.drift_ppm * 1e-6 * master.micros() as f64
    }
}

/// Interval in master seconds during which a station has lost its prism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub start_s: f64,
    pub end_s: f64,
}

/// One total station and the prism it tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationModel {
    pub id: FrameId,
    /// Station origin in the common frame.
    pub position: Point3,
    /// Heading of the (levelled) station frame in the common frame.
    pub yaw: f64,
    /// Index into the prism layout, 0 to 2.
    pub prism: usize,
    pub rate_hz: f64,
    pub sigma_range_m: f64,
    pub sigma_angle_rad: f64,
    pub max_range_m: f64,
    pub min_range_m: f64,
    pub loss_probability: f64,
    pub reacquire_s: f64,
    /// Pointing tracker time constant; zero disables the lag.
    pub lag_tau_s: f64,
    /// Uniform jitter on each sample instant, microseconds either side.
    pub schedule_jitter_us: i64,
    pub outages: Vec<Outage>,
    pub clock: ClientClock,
}

impl Default for StationModel {
    fn default() -> Self {
        StationModel {
            id: FrameId::Station1,
            position: Point3::origin(),
            yaw: 0.0,
            prism: 0,
            rate_hz: 2.5,
            sigma_range_m: 0.002,
            sigma_angle_rad: 4.85e-6,
            max_range_m: 800.0,
            min_range_m: 1.0,
            loss_probability: 0.0,
            reacquire_s: 1.5,
            lag_tau_s: 0.08,
            schedule_jitter_us: 5_000,
            outages: Vec::new(),
            clock: ClientClock::default(),
        }
    }
}

impl StationModel {
    /// The three default stations: all within 150 m of the work area, each
    /// tracking its own prism, with small independent clock errors.
    pub fn default_set() -> [StationModel; 3] {
        let make = |i: usize, position: Point3, yaw: f64, offset_us: f64, drift_ppm: f64| StationModel {
            id: FrameId::station(i).expect("index below 3"),
            position,
            yaw,
            prism: i,
            clock: ClientClock { offset_us, drift_ppm },
            ..StationModel::default()
        };
        [
            make(0, Point3::origin(), 0.0, 1_500_000.0, 2.0),
            make(1, Point3::new(60.0, -40.0, 0.3), 2.1, 4_200_000.0, -3.0),
            make(2, Point3::new(-50.0, -45.0, -0.2), -1.0, 800_000.0, 1.5),
        ]
    }

    /// Station frame to common frame.
    pub fn frame(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, self.position.coords)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(format!("station {:?}: {m}", self.id)));
        if self.id.station_index().is_none() {
            return bad("id must be a station frame");
        }
        if self.prism > 2 {
            return bad("prism index must be 0, 1 or 2");
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad("rate must be positive");
        }
        if !(self.sigma_range_m >= 0.0 && self.sigma_angle_rad >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.max_range_m > self.min_range_m && self.min_range_m >= 0.0) {
            return bad("range limits must satisfy 0 <= min < max");
        }
        if !(0.0..=1.0).contains(&self.loss_probability) || !(self.reacquire_s >= 0.0) {
            return bad("loss probability must be in [0, 1] and reacquisition non-negative");
        }
        if !(self.lag_tau_s >= 0.0) {
            return bad("lag time constant must be non-negative");
        }
        let period_us = 1e6 / self.rate_hz;
        if self.schedule_jitter_us < 0 || self.schedule_jitter_us as f64 >= period_us / 2.0 {
            return bad("schedule jitter must be below half the sample period");
        }
        if self.outages.iter().any(|o| !(o.end_s > o.start_s)) {
            return bad("outages must end after they start");
        }
        if self.position.coords.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return bad("pose must be finite");
        }
        self.clock.validate()
    }

    fn true_polar(&self, traj: &Trajectory, layout: &PrismLayout, t: f64) -> (f64, f64, f64) {
        let world = traj.pose_clamped(t).apply(&layout.points()[self.prism]);
        cartesian_to_polar(&self.frame().inverse().apply(&world))
    }

    /// Noise-free `(ha, va, range)` the instrument reports at `t` seconds,
    /// including the pointing lag of its angle trackers.
    pub fn pointing(&self, traj: &Trajectory, layout: &PrismLayout, t: f64) -> Result<(f64, f64, f64)> {
        traj.locate(t)?;
        let (ha, va, range) = self.true_polar(traj, layout, t);
        if self.lag_tau_s == 0.0 {
            return Ok((ha, va, range));
        }
        // Critically damped second-order tracker: follows constant angular
        // rates without error and lags only when the rate changes.
        // Output = theta(t) + integral (theta(t-u) - theta(t)) g(u) du with
        // g(u) = (2w - w^2 u) exp(-w u), w = 1/tau.
        let w = 1.0 / self.lag_tau_s;
        let window = LAG_WINDOW_TAUS * self.lag_tau_s;
        let h = window / LAG_STEPS as f64;
        let (mut dha, mut dva) = (0.0, 0.0);
        for k in 0..=LAG_STEPS {
            let u = k as f64 * h;
            let weight = if k == 0 || k == LAG_STEPS { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            let g = (2.0 * w - w * w * u) * (-w * u).exp();
            let (ha_u, va_u, _) = self.true_polar(traj, layout, t - u);
            dha += weight * g * wrap_pi(ha_u - ha);
            dva += weight * g * (va_u - va);
        }
        let lag_ha = ha + dha * h / 3.0;
        let lag_va = (va + dva * h / 3.0).clamp(0.0, std::f64::consts::PI);
        Ok((lag_ha.rem_euclid(std::f64::consts::TAU), lag_va, range))
    }

    /// One measurement at master time `t`, noise drawn from `rng`.
    pub fn observe(&self, traj: &Trajectory, layout: &PrismLayout, t: Timestamp, rng: &mut impl Rng) -> Result<RawMeasurement> {
        let (ha, va, range) = self.pointing(traj, layout, t.as_secs_f64())?;
        let angle = Normal::new(0.0, self.sigma_angle_rad).map_err(|e| Error::Configuration(e.to_string()))?;
        let dist = Normal::new(0.0, self.sigma_range_m).map_err(|e| Error::Configuration(e.to_string()))?;
        let n_ha = angle.sample(rng);
        let n_va = angle.sample(rng);
        let n_r = dist.sample(rng);
        let t_client = self.clock.client_time(t);
        let status = if range > self.max_range_m {
            MeasurementStatus::PrismNotDetected
        } else if range < self.min_range_m {
            MeasurementStatus::PrismTooClose
        } else {
            MeasurementStatus::Ok
        };
        if !status.is_ok() {
            return Ok(self.not_ok(t_client, status));
        }
        Ok(RawMeasurement {
            station: self.id,
            ha: (ha + n_ha).rem_euclid(std::f64::consts::TAU),
            va: (va + n_va).clamp(0.0, std::f64::consts::PI),
            range: (range + n_r).max(f64::MIN_POSITIVE),
            t_client,
            status,
        })
    }

    fn not_ok(&self, t_client: Timestamp, status: MeasurementStatus) -> RawMeasurement {
        RawMeasurement { station: self.id, ha: 0.0, va: 0.0, range: 0.0, t_client, status }
    }

    /// Sample instants in `[start, end]`: a random phase, then the nominal
    /// period with uniform jitter on each instant.
    pub fn schedule(&self, start: Timestamp, end: Timestamp, rng: &mut impl Rng) -> Vec<Timestamp> {
        let period = 1e6 / self.rate_hz;
        let phase = rng.random_range(0.0..period);
        let mut out = Vec::new();
        for k in 0.. {
            let jitter = if self.schedule_jitter_us > 0 {
                rng.random_range(-self.schedule_jitter_us..=self.schedule_jitter_us)
            } else {
                0
            };
            let nominal = start.micros() as f64 + phase + k as f64 * period;
            let t = (nominal.round() as i64 + jitter).max(start.micros());
            if t > end.micros() {
                break;
            }
            out.push(Timestamp::from_micros(t));
        }
        out
    }

    /// Measurements over `[start, end]` master time, with tracking loss and
    /// forced outages applied.
    pub fn simulate(&self, traj: &Trajectory, layout: &PrismLayout, start: Timestamp, end: Timestamp, seed: u64) -> Result<StationRun> {
        self.validate()?;
        let index = self.id.station_index().expect("validated") as u64;
        let mut sched_rng = rng_for(seed, "station.schedule", index);
        let mut noise_rng = rng_for(seed, "station.noise", index);
        let mut loss_rng = rng_for(seed, "station.loss", index);
        let reacquire_us = (self.reacquire_s * 1e6).round() as i64;
        let mut lost_until: Option<i64> = None;
        let mut run = StationRun::default();
        for t in self.schedule(start, end, &mut sched_rng) {
            let mut m = self.observe(traj, layout, t, &mut noise_rng)?;
            let ts = t.as_secs_f64();
            let forced = self.outages.iter().any(|o| ts >= o.start_s && ts < o.end_s);
            if lost_until.is_some_and(|until| t.micros() >= until) {
                lost_until = None;
            }
            let draw: f64 = loss_rng.random();
            if lost_until.is_none() && m.status.is_ok() && !forced && draw < self.loss_probability {
                lost_until = Some(t.micros() + reacquire_us);
            }
            if m.status.is_ok() && (forced || lost_until.is_some()) {
                m = self.not_ok(m.t_client, MeasurementStatus::PrismNotDetected);
                run.injected_losses += 1;
            }
            run.samples.push(StationSample { master_time: t, measurement: m });
        }
        Ok(run)
    }
}

const LAG_WINDOW_TAUS: f64 = 12.0;
const LAG_STEPS: usize = 48;

fn wrap_pi(a: f64) -> f64 {
    let t = (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU);
    t - std::f64::consts::PI
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationSample {
    /// When the instrument took the measurement, on the master clock.
    pub master_time: Timestamp,
    pub measurement: RawMeasurement,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationRun {
    pub samples: Vec<StationSample>,
    /// Samples turned into `PrismNotDetected` by tracking loss or outages.
    pub injected_losses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnssConfig {
    pub rate_hz: f64,
    /// Antenna phase centres in the robot frame.
    pub antennas: [Point3; 2],
    /// Per-axis position noise of each receiver.
    pub sigma_open_m: f64,
    pub sigma_forest_m: f64,
}

pub const GNSS_REFERENCE_SEPARATION: f64 = 0.810;

impl Default for GnssConfig {
    fn default() -> Self {
        let half = GNSS_REFERENCE_SEPARATION / 2.0;
        GnssConfig {
            rate_hz: 5.0,
            antennas: [Point3::new(-0.25, half, 0.45), Point3::new(-0.25, -half, 0.45)],
            sigma_open_m: 0.00904,
            sigma_forest_m: 0.417,
        }
    }
}

impl GnssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::Configuration("gnss.rate_hz must be positive".into()));
        }
        if crate::types::distance(&self.antennas[0], &self.antennas[1]) < 1e-6 {
            return Err(Error::Configuration("gnss antennas must be distinct".into()));
        }
        if !(self.sigma_open_m >= 0.0 && self.sigma_forest_m >= 0.0) {
            return Err(Error::Configuration("gnss noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn reference_separation(&self) -> f64 {
        crate::types::distance(&self.antennas[0], &self.antennas[1])
    }

    pub fn sigma(&self, regime: GnssRegime) -> f64 {
        match regime {
            GnssRegime::Open => self.sigma_open_m,
            GnssRegime::Forest => self.sigma_forest_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssEpoch {
    pub t: Timestamp,
    pub position: Point3,
    pub regime: GnssRegime,
}

/// Noisy antenna positions for both receivers at a fixed epoch rate.
pub fn simulate_gnss_pair(traj: &Trajectory, cfg: &GnssConfig, seed: u64) -> Result<[Vec<GnssEpoch>; 2]> {
    cfg.validate()?;
    let step = (1e6 / cfg.rate_hz).round() as i64;
    let end = traj.end().micros();
    let mut out: [Vec<GnssEpoch>; 2] = Default::default();
    let mut rngs = [rng_for(seed, "gnss", 0), rng_for(seed, "gnss", 1)];
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut t = 0;
    while t <= end {
        let ts = Timestamp::from_micros(t);
        let pose = traj.pose_at(ts)?;
        let regime = traj.regime_at(ts.as_secs_f64())?;
        let sigma = cfg.sigma(regime);
        for r in 0..2 {
            let rng = &mut rngs[r];
            let noise = Vector3::new(unit.sample(rng), unit.sample(rng), unit.sample(rng)) * sigma;
            out[r].push(GnssEpoch { t: ts, position: pose.apply(&cfg.antennas[r]) + noise, regime });
        }
        t += step;
    }
    Ok(out)
}
