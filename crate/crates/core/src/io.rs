//! File formats. Tables are CSV with a header row, documents are JSON.
//! Times are integer microseconds, lengths meters, angles radians.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{BinnedGrid, ErrorSeries, Histogram, PerturbationCurve, Stats, PAIRS};
use crate::error::{Error, Result};
use crate::geometry::{CalibrationResult, MarkerObservation};
use crate::radio::{EventKind, RadioEvent, SyncRecord};
use crate::station::{GnssEpoch, GnssRegime, Segment, StartPose, Trajectory, TrajectorySpec};
use crate::timesync::{CorrectionSchedule, SkewEstimate};
use crate::types::{FrameId, MeasurementStatus, Point3, PoseSample, RawMeasurement, RigidTransform, Timestamp};

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn station_number(f: FrameId) -> Result<u8> {
    f.station_number().ok_or_else(|| Error::Format("robot frame where a station was expected".into()))
}

fn station_frame(n: u8) -> Result<FrameId> {
    FrameId::from_station_number(n).ok_or_else(|| Error::Format(format!("unknown station {n}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub station: u8,
    pub t_client_us: i64,
    pub ha_rad: f64,
    pub va_rad: f64,
    pub range_m: f64,
    pub status: String,
}

impl MeasurementRow {
    pub fn from_measurement(m: &RawMeasurement) -> Result<Self> {
        Ok(MeasurementRow {
            station: station_number(m.station)?,
            t_client_us: m.t_client.micros(),
            ha_rad: m.ha,
            va_rad: m.va,
            range_m: m.range,
            status: m.status.name().to_string(),
        })
    }

    pub fn to_measurement(&self) -> Result<RawMeasurement> {
        Ok(RawMeasurement {
            station: station_frame(self.station)?,
            ha: self.ha_rad,
            va: self.va_rad,
            range: self.range_m,
            t_client: Timestamp::try_from_micros(self.t_client_us)?,
            status: MeasurementStatus::from_name(&self.status),
        })
    }
}

pub fn write_measurements(path: &Path, log: &[RawMeasurement]) -> Result<()> {
    let rows = log.iter().map(MeasurementRow::from_measurement).collect::<Result<Vec<_>>>()?;
    write_csv(path, rows)
}

pub fn read_measurements(path: &Path) -> Result<Vec<RawMeasurement>> {
    read_csv::<MeasurementRow>(path)?.iter().map(MeasurementRow::to_measurement).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub sim_time_us: i64,
    pub event_kind: String,
    pub src: u8,
    pub dst: u8,
    pub bytes: usize,
    pub dropped: bool,
}

pub fn write_events(path: &Path, events: &[RadioEvent]) -> Result<()> {
    write_csv(
        path,
        events.iter().map(|e| EventRow {
            sim_time_us: e.time.micros(),
            event_kind: e.kind.name().to_string(),
            src: e.src,
            dst: e.dst,
            bytes: e.bytes,
            dropped: e.dropped,
        }),
    )
}

pub fn read_events(path: &Path) -> Result<Vec<RadioEvent>> {
    read_csv::<EventRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(RadioEvent {
                time: Timestamp::try_from_micros(r.sim_time_us)?,
                kind: EventKind::from_name(&r.event_kind)
                    .ok_or_else(|| Error::Format(format!("unknown event kind {:?}", r.event_kind)))?,
                src: r.src,
                dst: r.dst,
                bytes: r.bytes,
                dropped: r.dropped,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub marker_id: String,
    pub station: u8,
    pub x: String,
    pub y: String,
    pub z: String,
}

pub fn write_markers(path: &Path, markers: &[MarkerObservation]) -> Result<()> {
    let rows = markers
        .iter()
        .map(|m| {
            Ok(MarkerRow {
                marker_id: m.marker_id.clone(),
                station: station_number(m.station)?,
                x: format!("{:.6}", m.position.x),
                y: format!("{:.6}", m.position.y),
                z: format!("{:.6}", m.position.z),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, rows)
}

pub fn read_markers(path: &Path) -> Result<Vec<MarkerObservation>> {
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad coordinate {s:?}")));
    read_csv::<MarkerRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(MarkerObservation {
                station: station_frame(r.station)?,
                position: Point3::new(parse(&r.x)?, parse(&r.y)?, parse(&r.z)?),
                marker_id: r.marker_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub t_us: i64,
    pub valid: u8,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub residual_rms_m: f64,
}

impl PoseRow {
    fn from_sample(s: &PoseSample) -> Self {
        match (s.valid, s.pose) {
            (true, Some(p)) => {
                let t = p.translation();
                let [qw, qx, qy, qz] = p.quaternion_wxyz();
                PoseRow { t_us: s.t.micros(), valid: 1, x: t.x, y: t.y, z: t.z, qw, qx, qy, qz, residual_rms_m: s.residual_rms }
            }
            _ => {
                let n = f64::NAN;
                PoseRow { t_us: s.t.micros(), valid: 0, x: n, y: n, z: n, qw: n, qx: n, qy: n, qz: n, residual_rms_m: n }
            }
        }
    }

    fn to_sample(&self) -> Result<PoseSample> {
        let t = Timestamp::try_from_micros(self.t_us)?;
        if self.valid == 0 {
            return Ok(PoseSample::invalid(t));
        }
        let pose = RigidTransform::from_quaternion_wxyz([self.qw, self.qx, self.qy, self.qz], [self.x, self.y, self.z])?;
        Ok(PoseSample { t, pose: Some(pose), residual_rms: self.residual_rms_m, valid: true })
    }
}

/// Invalid samples are written with `valid = 0` and NaN fields.
pub fn write_poses(path: &Path, poses: &[PoseSample]) -> Result<()> {
    write_csv(path, poses.iter().map(PoseRow::from_sample))
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSample>> {
    read_csv::<PoseRow>(path)?.iter().map(PoseRow::to_sample).collect()
}

/// Exact robot poses at every `step_us` from zero to the trajectory end, in
/// the pose format.
pub fn write_ground_truth(path: &Path, traj: &Trajectory, step_us: i64) -> Result<()> {
    if step_us <= 0 {
        return Err(Error::Configuration("ground truth step must be positive".into()));
    }
    let end = traj.end().micros();
    let mut poses = Vec::new();
    let mut t = 0;
    while t <= end {
        let ts = Timestamp::from_micros(t);
        poses.push(PoseSample { t: ts, pose: Some(traj.pose_at(ts)?), residual_rms: 0.0, valid: true });
        t += step_us;
    }
    write_poses(path, &poses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub station: u8,
    pub effective_client_us: i64,
    pub master_time_us: i64,
    pub j: u32,
    pub w: f64,
    pub delta_us: f64,
    /// Mean skew of the session that produced this entry.
    pub d_bar_us: f64,
}

pub fn write_sync(path: &Path, log: &[SyncRecord]) -> Result<()> {
    write_csv(
        path,
        log.iter().map(|r| SyncRow {
            station: r.client,
            effective_client_us: r.effective_client.micros(),
            master_time_us: r.master_time.micros(),
            j: r.estimate.j(),
            w: r.estimate.w(),
            delta_us: r.estimate.delta(),
            d_bar_us: r.estimate.history().last().copied().unwrap_or(f64::NAN),
        }),
    )
}

/// Rebuilds the three stations' correction schedules from sync rows.
pub fn schedules_from_sync(rows: &[SyncRow]) -> Result<[CorrectionSchedule; 3]> {
    let mut out: [CorrectionSchedule; 3] = Default::default();
    let mut history: [Vec<f64>; 3] = Default::default();
    let mut sorted: Vec<&SyncRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.station, r.effective_client_us, r.j));
    for r in sorted {
        let k = station_frame(r.station)?.station_index().expect("station frame");
        history[k].push(r.d_bar_us);
        let est = SkewEstimate::restored(r.delta_us, r.j, r.w, history[k].clone())?;
        out[k].push(Timestamp::try_from_micros(r.effective_client_us)?, est)?;
    }
    Ok(out)
}

pub fn read_sync(path: &Path) -> Result<[CorrectionSchedule; 3]> {
    schedules_from_sync(&read_csv::<SyncRow>(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnssRow {
    pub receiver: u8,
    pub t_us: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub regime: GnssRegime,
}

/// Both receivers in one file, receiver 1 first.
pub fn write_gnss(path: &Path, pair: &[Vec<GnssEpoch>; 2]) -> Result<()> {
    write_csv(
        path,
        pair.iter().enumerate().flat_map(|(k, log)| {
            log.iter().map(move |e| GnssRow {
                receiver: k as u8 + 1,
                t_us: e.t.micros(),
                x: e.position.x,
                y: e.position.y,
                z: e.position.z,
                regime: e.regime,
            })
        }),
    )
}

pub fn read_gnss(path: &Path) -> Result<[Vec<GnssEpoch>; 2]> {
    let mut out: [Vec<GnssEpoch>; 2] = Default::default();
    for r in read_csv::<GnssRow>(path)? {
        let slot = match r.receiver {
            1 => &mut out[0],
            2 => &mut out[1],
            n => return Err(Error::Format(format!("unknown GNSS receiver {n}"))),
        };
        slot.push(GnssEpoch { t: Timestamp::try_from_micros(r.t_us)?, position: Point3::new(r.x, r.y, r.z), regime: r.regime });
    }
    Ok(out)
}

pub fn write_calibration(path: &Path, calib: &CalibrationResult) -> Result<()> {
    write_json(path, calib)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationResult> {
    read_json(path)
}

/// Trajectory file. `waypoints` (`[x, y, z, yaw]` at every segment start and
/// at the end) are written for reference and ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDocument {
    #[serde(default)]
    pub start: StartPose,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<[f64; 4]>,
}

impl TrajectoryDocument {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let spec = traj.spec();
        TrajectoryDocument {
            start: spec.start,
            segments: spec.segments.clone(),
            waypoints: traj.waypoints().iter().map(|(p, yaw)| [p.x, p.y, p.z, *yaw]).collect(),
        }
    }

    pub fn spec(&self) -> TrajectorySpec {
        TrajectorySpec { start: self.start, segments: self.segments.clone() }
    }
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_json(path, &TrajectoryDocument::from_trajectory(traj))
}

pub fn read_trajectory(path: &Path) -> Result<TrajectorySpec> {
    Ok(read_json::<TrajectoryDocument>(path)?.spec())
}

const PAIR_NAMES: [&str; 3] = ["12", "13", "23"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub pair: String,
    pub bin_lo_m: f64,
    pub bin_hi_m: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummaryRow {
    pub pair: String,
    pub mean_m: f64,
    pub std_m: f64,
    pub count: usize,
    pub underflow: usize,
    pub overflow: usize,
}

/// `fig5_hist.csv` and `fig5_summary.csv`: per pair signed error histogram
/// and mean/std.
pub fn write_fig5(dir: &Path, series: &ErrorSeries, lo: f64, hi: f64, bins: usize) -> Result<()> {
    let stats = series.pair_stats();
    let mut hist_rows = Vec::new();
    let mut summary = Vec::new();
    for k in 0..PAIRS.len() {
        let h = Histogram::new(series.e.iter().map(|e| e[k]), lo, hi, bins)?;
        for (i, c) in h.counts.iter().enumerate() {
            let (a, b) = h.bin_edges(i);
            hist_rows.push(HistRow { pair: PAIR_NAMES[k].into(), bin_lo_m: a, bin_hi_m: b, count: *c });
        }
        summary.push(ErrorSummaryRow {
            pair: PAIR_NAMES[k].into(),
            mean_m: stats[k].mean,
            std_m: stats[k].std,
            count: stats[k].count,
            underflow: h.underflow,
            overflow: h.overflow,
        });
    }
    write_csv(&dir.join("fig5_hist.csv"), hist_rows)?;
    write_csv(&dir.join("fig5_summary.csv"), summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x_lo: f64,
    pub x_hi: f64,
    pub w_lo_rps: f64,
    pub w_hi_rps: f64,
    pub count: usize,
    /// Empty for cells without samples.
    pub mean_abs_error_m: Option<f64>,
}

/// One row per cell, `x` being linear speed or acceleration.
pub fn write_grid(path: &Path, grid: &BinnedGrid) -> Result<()> {
    let edge = |lo: f64, hi: f64, n: usize, i: usize| (lo + i as f64 * (hi - lo) / n as f64, lo + (i + 1) as f64 * (hi - lo) / n as f64);
    let mut rows = Vec::new();
    for i in 0..grid.x.bins {
        for j in 0..grid.y.bins {
            let (x_lo, x_hi) = edge(grid.x.lo, grid.x.hi, grid.x.bins, i);
            let (w_lo_rps, w_hi_rps) = edge(grid.y.lo, grid.y.hi, grid.y.bins, j);
            rows.push(GridRow { x_lo, x_hi, w_lo_rps, w_hi_rps, count: grid.count(i, j), mean_abs_error_m: grid.mean(i, j) });
        }
    }
    write_csv(path, rows)
}

/// Columns of `fig7_curves.csv`. Angles are Z-Y-X Euler angles of the
/// rotation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub sigma_m: f64,
    pub trials: usize,
    pub pos_mean_x_m: f64,
    pub pos_mean_y_m: f64,
    pub pos_mean_z_m: f64,
    pub pos_std_x_m: f64,
    pub pos_std_y_m: f64,
    pub pos_std_z_m: f64,
    pub pos_norm_mean_m: f64,
    pub zyx_yaw_mean_rad: f64,
    pub zyx_pitch_mean_rad: f64,
    pub zyx_roll_mean_rad: f64,
    pub zyx_yaw_std_rad: f64,
    pub zyx_pitch_std_rad: f64,
    pub zyx_roll_std_rad: f64,
    pub zyx_yaw_abs_mean_rad: f64,
    pub zyx_pitch_abs_mean_rad: f64,
    pub zyx_roll_abs_mean_rad: f64,
    pub orientation_abs_mean_rad: f64,
}

pub fn write_fig7(path: &Path, curve: &PerturbationCurve) -> Result<()> {
    write_csv(
        path,
        curve.points.iter().map(|p| CurveRow {
            sigma_m: p.sigma,
            trials: p.trials,
            pos_mean_x_m: p.position_mean[0],
            pos_mean_y_m: p.position_mean[1],
            pos_mean_z_m: p.position_mean[2],
            pos_std_x_m: p.position_std[0],
            pos_std_y_m: p.position_std[1],
            pos_std_z_m: p.position_std[2],
            pos_norm_mean_m: p.position_norm_mean,
            zyx_yaw_mean_rad: p.euler_mean[0],
            zyx_pitch_mean_rad: p.euler_mean[1],
            zyx_roll_mean_rad: p.euler_mean[2],
            zyx_yaw_std_rad: p.euler_std[0],
            zyx_pitch_std_rad: p.euler_std[1],
            zyx_roll_std_rad: p.euler_std[2],
            zyx_yaw_abs_mean_rad: p.euler_abs_mean[0],
            zyx_pitch_abs_mean_rad: p.euler_abs_mean[1],
            zyx_roll_abs_mean_rad: p.euler_abs_mean[2],
            orientation_abs_mean_rad: p.orientation_abs_mean(),
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummaryRow {
    /// `total_station` or `gnss`.
    pub source: String,
    pub regime: GnssRegime,
    pub mean_m: f64,
    pub std_m: f64,
    pub count: usize,
}

impl SourceSummaryRow {
    pub fn new(source: &str, regime: GnssRegime, s: Stats) -> Self {
        SourceSummaryRow { source: source.into(), regime, mean_m: s.mean, std_m: s.std, count: s.count }
    }
}

pub fn write_fig8(path: &Path, rows: &[SourceSummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_fig8(path: &Path) -> Result<Vec<SourceSummaryRow>> {
    read_csv(path)
}
