//! Batch processing from raw station logs to robot poses: validity gating,
//! frame unification, interpolation onto a uniform grid, pose solving.
//!
//! Station `k` tracks prism `k` of the layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align, rms_residual, spherical_to_cartesian, CalibrationResult};
use crate::timesync::CorrectionSchedule;
use crate::types::{FrameId, Point3, PoseSample, PrismLayout, RawMeasurement, Timestamp};

/// One prism's positions on the master clock in the common frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrismTrack {
    prism: usize,
    samples: Vec<(Timestamp, Point3)>,
}

impl PrismTrack {
    pub fn new(prism: usize, samples: Vec<(Timestamp, Point3)>) -> Result<Self> {
        if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Ordering(format!("prism {} track timestamps are not strictly increasing", prism + 1)));
        }
        Ok(PrismTrack { prism, samples })
    }

    pub fn prism(&self) -> usize {
        self.prism
    }

    pub fn samples(&self) -> &[(Timestamp, Point3)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Bracketing samples `(a, b)` with `a.t <= t <= b.t`.
    fn bracket(&self, t: Timestamp) -> Option<(&(Timestamp, Point3), &(Timestamp, Point3))> {
        let i = self.samples.partition_point(|s| s.0 < t);
        let b = self.samples.get(i)?;
        if b.0 == t {
            return Some((b, b));
        }
        let a = self.samples.get(i.checked_sub(1)?)?;
        Some((a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolationConfig {
    pub step_s: f64,
    pub outage_threshold_s: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig { step_s: 0.050, outage_threshold_s: 1.0 }
    }
}

impl InterpolationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_s > 0.0) || self.step_us() < 1 {
            return Err(Error::Configuration(format!("interpolation step {} s must be at least 1 us", self.step_s)));
        }
        if !(self.outage_threshold_s > self.step_s) {
            return Err(Error::Configuration("outage threshold must exceed the interpolation step".into()));
        }
        Ok(())
    }

    pub fn step_us(&self) -> i64 {
        (self.step_s * 1e6).round() as i64
    }

    pub fn threshold_us(&self) -> i64 {
        (self.outage_threshold_s * 1e6).round() as i64
    }
}

/// Keeps measurements whose status is `Ok`, in order.
pub fn gate(measurements: &[RawMeasurement]) -> Vec<RawMeasurement> {
    measurements.iter().filter(|m| m.status.is_ok()).copied().collect()
}

/// Converts gated measurements into three common-frame tracks on the master
/// clock. Samples whose corrected time does not advance past the previous
/// sample of the same track are dropped.
pub fn unify_frames(
    gated: &[RawMeasurement],
    calib: Option<&CalibrationResult>,
    corrections: &[CorrectionSchedule],
) -> Result<[PrismTrack; 3]> {
    let calib = calib.ok_or_else(|| Error::Configuration("station calibration is missing".into()))?;
    if corrections.len() != 3 {
        return Err(Error::Configuration(format!("need clock corrections for 3 stations, got {}", corrections.len())));
    }
    let frames = [
        calib.station_to_common(FrameId::Station1)?,
        calib.station_to_common(FrameId::Station2)?,
        calib.station_to_common(FrameId::Station3)?,
    ];
    let mut samples: [Vec<(Timestamp, Point3)>; 3] = Default::default();
    for m in gated {
        let k = m
            .station
            .station_index()
            .ok_or_else(|| Error::Format("measurement from a non-station frame".into()))?;
        let local = spherical_to_cartesian(m)?;
        let t = corrections[k].apply(m.t_client)?;
        if samples[k].last().is_some_and(|(prev, _)| *prev >= t) {
            continue;
        }
        samples[k].push((t, frames[k].apply(&local)));
    }
    let [a, b, c] = samples;
    Ok([PrismTrack::new(0, a)?, PrismTrack::new(1, b)?, PrismTrack::new(2, c)?])
}

/// Interpolated prism triplet at one grid time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub t: Timestamp,
    /// NaN when the point is invalid.
    pub triplet: [Point3; 3],
    pub valid: bool,
}

fn nan_triplet() -> [Point3; 3] {
    [Point3::new(f64::NAN, f64::NAN, f64::NAN); 3]
}

fn grid_times(first: i64, last: i64, step: i64) -> impl Iterator<Item = Timestamp> {
    let t0 = first.div_euclid(step) * step + if first.rem_euclid(step) == 0 { 0 } else { step };
    (0..)
        .map(move |k| t0 + k * step)
        .take_while(move |t| *t <= last)
        .map(Timestamp::from_micros)
}

/// Resamples the tracks on a uniform grid.
///
/// The grid starts at the latest first sample across tracks, rounded up to a
/// multiple of the step, and ends at the earliest last sample. A grid point
/// is invalid when, on any track, the samples around it are further apart
/// than the outage threshold.
pub fn interpolate(tracks: &[PrismTrack; 3], cfg: &InterpolationConfig) -> Result<Vec<GridPoint>> {
    cfg.validate()?;
    if let Some(t) = tracks.iter().find(|t| t.is_empty()) {
        return Err(Error::InsufficientData(format!("prism {} track is empty", t.prism + 1)));
    }
    let first = tracks.iter().map(|t| t.samples[0].0.micros()).max().expect("three tracks");
    let last = tracks.iter().map(|t| t.samples[t.len() - 1].0.micros()).min().expect("three tracks");
    let threshold = cfg.threshold_us();
    let mut out = Vec::new();
    for t in grid_times(first, last, cfg.step_us()) {
        let mut triplet = nan_triplet();
        let mut valid = true;
        for (k, track) in tracks.iter().enumerate() {
            let Some((a, b)) = track.bracket(t) else {
                valid = false;
                break;
            };
            if b.0 - a.0 > threshold {
                valid = false;
                break;
            }
            triplet[k] = if a.0 == b.0 {
                a.1
            } else {
                let s = (t - a.0) as f64 / (b.0 - a.0) as f64;
                Point3::from(a.1.coords + (b.1.coords - a.1.coords) * s)
            };
        }
        out.push(GridPoint { t, triplet: if valid { triplet } else { nan_triplet() }, valid });
    }
    Ok(out)
}

/// Robot pose from one interpolated triplet: the rigid transform that best
/// maps the layout onto the measured prisms.
pub fn solve_pose(t: Timestamp, triplet: &[Point3; 3], layout: &PrismLayout) -> PoseSample {
    if triplet.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return PoseSample::invalid(t);
    }
    match align(triplet, layout.points()) {
        Ok(pose) => PoseSample { t, pose: Some(pose), residual_rms: rms_residual(triplet, layout.points(), &pose), valid: true },
        Err(_) => PoseSample::invalid(t),
    }
}

/// Solves every grid point, fanning out over `parallel` threads. The output
/// order is the grid order regardless of `parallel`.
pub fn solve_grid(grid: &[GridPoint], layout: &PrismLayout, parallel: usize) -> Vec<PoseSample> {
    let solve = |g: &GridPoint| if g.valid { solve_pose(g.t, &g.triplet, layout) } else { PoseSample::invalid(g.t) };
    let threads = parallel.max(1).min(grid.len().max(1));
    if threads == 1 {
        return grid.iter().map(solve).collect();
    }
    let chunk = grid.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = grid.chunks(chunk).map(|c| s.spawn(move || c.iter().map(solve).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("solver thread panicked")).collect()
    })
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub tracks: [PrismTrack; 3],
    pub grid: Vec<GridPoint>,
    pub poses: Vec<PoseSample>,
}

/// Full chain with intermediate products. Tracks with fewer than two
/// samples cannot be interpolated, so the grid then spans the remaining
/// tracks and every point is invalid.
pub fn process(
    log: &[RawMeasurement],
    calib: Option<&CalibrationResult>,
    corrections: &[CorrectionSchedule],
    layout: &PrismLayout,
    cfg: &InterpolationConfig,
    parallel: usize,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if log.is_empty() {
        return Ok(PipelineOutput::default());
    }
    let tracks = unify_frames(&gate(log), calib, corrections)?;
    let grid = if tracks.iter().all(|t| t.len() >= 2) {
        interpolate(&tracks, cfg)?
    } else {
        let present: Vec<&PrismTrack> = tracks.iter().filter(|t| !t.is_empty()).collect();
        match (
            present.iter().map(|t| t.samples[0].0.micros()).max(),
            present.iter().map(|t| t.samples[t.len() - 1].0.micros()).min(),
        ) {
            (Some(first), Some(last)) => grid_times(first, last, cfg.step_us())
                .map(|t| GridPoint { t, triplet: nan_triplet(), valid: false })
                .collect(),
            _ => Vec::new(),
        }
    };
    let poses = solve_grid(&grid, layout, parallel);
    Ok(PipelineOutput { tracks, grid, poses })
}

/// gate, unify, interpolate, solve.
pub fn run(
    log: &[RawMeasurement],
    calib: Option<&CalibrationResult>,
    corrections: &[CorrectionSchedule],
    layout: &PrismLayout,
    cfg: &InterpolationConfig,
) -> Result<Vec<PoseSample>> {
    Ok(process(log, calib, corrections, layout, cfg, 1)?.poses)
}
