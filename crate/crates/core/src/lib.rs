//! Ground-truth referencing with three robotic total stations.
//!
//! The crate covers the whole chain, from a deterministic simulation of the
//! stations, their clients and the single-channel radio link, through clock
//! synchronization and frame calibration, to interpolation of the three prism
//! tracks and 6-DOF pose solving. The [`analysis`] module holds the precision
//! studies built on top of it.
//!
//! Module map:
//!
//! - [`types`]: timestamps, frames, raw measurements, rigid transforms, prism layout
//! - [`geometry`]: polar/Cartesian conversion, point-set alignment, calibration
//! - [`timesync`]: skew estimation and the low-pass correction filter
//! - [`wire`]: byte layout of every radio frame
//! - [`radio`]: discrete-event simulation of the half-duplex channel and the master poll loop
//! - [`station`]: trajectories, station measurement models, GNSS receiver pair
//! - [`pipeline`]: gating, frame unification, interpolation, pose solving
//! - [`analysis`]: inter-prism errors, dynamics grids, perturbation study, GNSS comparison
//! - [`io`]: CSV and JSON file formats

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod radio;
pub mod seed;
pub mod station;
pub mod timesync;
pub mod types;
pub mod wire;

pub use error::{Error, Result};
pub use types::{
    distance, FrameId, MeasurementStatus, Point3, PoseSample, PrismLayout, RawMeasurement,
    RigidTransform, Timestamp,
};
