//! Shared fixtures for the benchmarks.

use gtf_core::geometry::CalibrationResult;
use gtf_core::radio::{ChannelConfig, ClientSetup, RadioRun, RadioSim};
use gtf_core::station::{GnssRegime, Segment, StartPose, StationModel, Trajectory, TrajectorySpec};
use gtf_core::timesync::{CorrectionSchedule, SyncConfig};
use gtf_core::{PrismLayout, RawMeasurement, Timestamp};

/// A route of `minutes` alternating straights, arcs and stops.
pub fn route(minutes: usize) -> Trajectory {
    let s = |duration_s, linear_mps, angular_rps| Segment { duration_s, linear_mps, angular_rps, regime: GnssRegime::Open };
    let mut segments = Vec::new();
    for k in 0..minutes {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        segments.extend([s(20.0, 0.5, 0.0), s(20.0, 0.3, 0.3 * sign), s(20.0, 0.0, 0.0)]);
    }
    Trajectory::new(TrajectorySpec { start: StartPose { x: 5.0, y: -25.0, z: 0.0, yaw: 0.0 }, segments }).expect("valid route")
}

pub fn station_clients(traj: &Trajectory, seed: u64) -> Vec<ClientSetup> {
    let layout = PrismLayout::default();
    StationModel::default_set()
        .iter()
        .map(|s| ClientSetup {
            id: s.id.station_number().expect("station"),
            clock: s.clock,
            samples: s.simulate(traj, &layout, Timestamp::ZERO, traj.end(), seed).expect("simulate").samples,
        })
        .collect()
}

pub fn radio_run(traj: &Trajectory, seed: u64) -> RadioRun {
    RadioSim::new(ChannelConfig::default(), station_clients(traj, seed), seed)
        .expect("radio")
        .run(traj.end(), &SyncConfig::default())
        .expect("run")
}

/// Everything `pipeline::process` needs for a simulated run.
pub struct PipelineInput {
    pub log: Vec<RawMeasurement>,
    pub schedules: Vec<CorrectionSchedule>,
    pub calibration: CalibrationResult,
}

pub fn pipeline_input(minutes: usize, seed: u64) -> PipelineInput {
    let run = radio_run(&route(minutes), seed);
    let st = StationModel::default_set();
    let to_s1 = st[0].frame().inverse();
    PipelineInput {
        log: run.measurements(),
        schedules: run.schedules.iter().map(|s| s.1.clone()).collect(),
        calibration: CalibrationResult::from_transforms(to_s1.compose(&st[1].frame()), to_s1.compose(&st[2].frame())),
    }
}
