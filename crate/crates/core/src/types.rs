//! Shared domain types.
//!
//! Every value here is immutable once built, so the types can be shared or
//! sent between threads freely.

use std::fmt;
use std::ops::Sub;

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// Integer microseconds on a named clock (master or client).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    /// Panics on negative input; use [`Timestamp::try_from_micros`] for
    /// values that come from outside the crate.
    pub const fn from_micros(micros: i64) -> Self {
        assert!(micros >= 0, "timestamps are non-negative");
        Timestamp(micros)
    }

    pub fn try_from_micros(micros: i64) -> Result<Self> {
        if micros < 0 {
            return Err(Error::OutOfRange(format!("negative timestamp {micros} us")));
        }
        Ok(Timestamp(micros))
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Self::from_micros((secs * 1e6).round() as i64)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    /// Shift by a signed number of microseconds.
    pub fn offset(self, delta_us: i64) -> Result<Self> {
        Self::try_from_micros(self.0 + delta_us)
    }

    pub fn saturating_add_us(self, delta_us: i64) -> Self {
        Timestamp((self.0 + delta_us).max(0))
    }
}

impl Sub for Timestamp {
    type Output = i64;

    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameId {
    Station1,
    Station2,
    Station3,
    Robot,
}

impl FrameId {
    /// All measurements end up in the frame of station 1.
    pub const COMMON: FrameId = FrameId::Station1;

    pub const STATIONS: [FrameId; 3] = [FrameId::Station1, FrameId::Station2, FrameId::Station3];

    /// Zero-based station index, `None` for the robot frame.
    pub fn station_index(self) -> Option<usize> {
        match self {
            FrameId::Station1 => Some(0),
            FrameId::Station2 => Some(1),
            FrameId::Station3 => Some(2),
            FrameId::Robot => None,
        }
    }

    pub fn station(index: usize) -> Option<FrameId> {
        Self::STATIONS.get(index).copied()
    }

    /// Station number as written in logs (1-based).
    pub fn station_number(self) -> Option<u8> {
        self.station_index().map(|i| i as u8 + 1)
    }

    pub fn from_station_number(n: u8) -> Option<FrameId> {
        n.checked_sub(1).and_then(|i| Self::station(i as usize))
    }
}

/// Status reported by a total station with each observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementStatus {
    Ok,
    PrismNotDetected,
    PrismTooClose,
    NotLevelled,
    /// Any code the instrument reports that is not one of the above.
    Invalid,
}

impl MeasurementStatus {
    pub fn code(self) -> u8 {
        match self {
            MeasurementStatus::Ok => 0,
            MeasurementStatus::PrismNotDetected => 1,
            MeasurementStatus::PrismTooClose => 2,
            MeasurementStatus::NotLevelled => 3,
            MeasurementStatus::Invalid => 255,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            0 => MeasurementStatus::Ok,
            1 => MeasurementStatus::PrismNotDetected,
            2 => MeasurementStatus::PrismTooClose,
            3 => MeasurementStatus::NotLevelled,
            _ => MeasurementStatus::Invalid,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementStatus::Ok => "ok",
            MeasurementStatus::PrismNotDetected => "prism_not_detected",
            MeasurementStatus::PrismTooClose => "prism_too_close",
            MeasurementStatus::NotLevelled => "not_levelled",
            MeasurementStatus::Invalid => "invalid",
        }
    }

    pub fn from_name(name: &str) -> Self {
        match name {
            "ok" => MeasurementStatus::Ok,
            "prism_not_detected" => MeasurementStatus::PrismNotDetected,
            "prism_too_close" => MeasurementStatus::PrismTooClose,
            "not_levelled" => MeasurementStatus::NotLevelled,
            _ => MeasurementStatus::Invalid,
        }
    }

    pub fn is_ok(self) -> bool {
        self == MeasurementStatus::Ok
    }
}

/// One observation of a prism by a total station, in that station's frame.
///
/// `va` is measured from the zenith unless a caller converts with
/// [`crate::geometry::AngleConvention::Elevation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurement {
    pub station: FrameId,
    pub ha: f64,
    pub va: f64,
    pub range: f64,
    pub t_client: Timestamp,
    pub status: MeasurementStatus,
}

impl RawMeasurement {
    pub fn validate(&self) -> Result<()> {
        if self.station.station_index().is_none() {
            return Err(Error::Format("measurement must come from a station".into()));
        }
        if self.status.is_ok() {
            if !(self.range > 0.0 && self.range.is_finite()) {
                return Err(Error::Format(format!("non-positive range {}", self.range)));
            }
            if !(0.0..=std::f64::consts::PI).contains(&self.va) {
                return Err(Error::Format(format!("vertical angle {} outside [0, pi]", self.va)));
            }
            if !(0.0..std::f64::consts::TAU).contains(&self.ha) {
                return Err(Error::Format(format!("horizontal angle {} outside [0, 2pi)", self.ha)));
            }
        }
        Ok(())
    }
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    (a - b).norm()
}

/// Proper rigid motion, `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    iso: Isometry3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { iso: Isometry3::identity() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { iso: Isometry3::from_parts(Translation3::from(translation), rotation) }
    }

    pub fn from_isometry(iso: Isometry3<f64>) -> Self {
        RigidTransform { iso }
    }

    /// Quaternion in `(w, x, y, z)` order; renormalized.
    pub fn from_quaternion_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let raw = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(raw.norm() > 1e-12) || q.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format("quaternion has zero norm".into()));
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(raw), Vector3::from(translation)))
    }

    /// Build from Z-Y-X (yaw, pitch, roll) Euler angles.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_euler_angles(roll, pitch, yaw), translation)
    }

    /// Rotation about +z followed by a translation; the shape of a levelled
    /// instrument frame.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_euler_zyx(yaw, 0.0, 0.0, translation)
    }

    /// Rotation matrix, orthonormalized through the quaternion.
    pub fn from_rotation_matrix(m: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.iso.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.iso.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.iso.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.iso.transform_point(p)
    }

    /// `self.compose(other)` maps `x -> self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut iso = self.iso * other.iso;
        iso.rotation = UnitQuaternion::new_normalize(iso.rotation.into_inner());
        RigidTransform { iso }
    }

    pub fn inverse(&self) -> RigidTransform {
        RigidTransform { iso: self.iso.inverse() }
    }

    /// Z-Y-X Euler angles `[yaw, pitch, roll]`.
    pub fn euler_zyx(&self) -> [f64; 3] {
        let (roll, pitch, yaw) = self.iso.rotation.euler_angles();
        [yaw, pitch, roll]
    }

    /// Geodesic angle between the two rotations, in `[0, pi]`.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        // atan2 form keeps full precision near zero, where acos(w) does not
        let d = self.iso.rotation.inverse() * other.iso.rotation;
        let q = d.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation() - other.translation()).norm()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    translation: [f64; 3],
    rotation_wxyz: [f64; 4],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let t = self.translation();
        RigidTransformRepr { translation: [t.x, t.y, t.z], rotation_wxyz: self.quaternion_wxyz() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(d)?;
        RigidTransform::from_quaternion_wxyz(repr.rotation_wxyz, repr.translation)
            .map_err(serde::de::Error::custom)
    }
}

/// Reference inter-prism distances of the platform, meters.
pub const REFERENCE_D12: f64 = 0.987;
pub const REFERENCE_D13: f64 = 0.681;
pub const REFERENCE_D23: f64 = 0.815;

/// Height of the default prism plane above the robot body origin.
pub const DEFAULT_PRISM_HEIGHT: f64 = 0.15;

const MIN_TRIANGLE_AREA: f64 = 1e-4;

/// The three prism positions in the robot frame, with their pairwise
/// reference distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrismLayout {
    points: [Point3; 3],
    d12: f64,
    d13: f64,
    d23: f64,
}

impl PrismLayout {
    pub fn new(points: [Point3; 3]) -> Result<Self> {
        if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::Format("non-finite prism coordinate".into()));
        }
        let area = 0.5 * (points[1] - points[0]).cross(&(points[2] - points[0])).norm();
        if area <= MIN_TRIANGLE_AREA {
            return Err(Error::DegenerateGeometry(format!(
                "prism triangle area {area:.3e} m^2 is too small"
            )));
        }
        Ok(PrismLayout {
            points,
            d12: distance(&points[0], &points[1]),
            d13: distance(&points[0], &points[2]),
            d23: distance(&points[1], &points[2]),
        })
    }

    /// Triangle with the given side lengths, centroid on the z axis at
    /// `height`, prisms 1 and 2 on a line parallel to y and prism 3 forward
    /// (+x).
    pub fn from_distances(d12: f64, d13: f64, d23: f64, height: f64) -> Result<Self> {
        let along = (d12 * d12 + d13 * d13 - d23 * d23) / (2.0 * d12);
        let across_sq = d13 * d13 - along * along;
        if !(across_sq > 0.0) {
            return Err(Error::DegenerateGeometry("distances violate the triangle inequality".into()));
        }
        let across = across_sq.sqrt();
        // local 2-D triangle: p1 = (0,0), p2 = (0,d12), p3 = (across, along)
        let local = [(0.0, 0.0), (0.0, d12), (across, along)];
        let cx = local.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let cy = local.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let pts = local.map(|(x, y)| Point3::new(x - cx, y - cy, height));
        Self::new(pts)
    }

    pub fn points(&self) -> &[Point3; 3] {
        &self.points
    }

    /// `[d12, d13, d23]`.
    pub fn reference_distances(&self) -> [f64; 3] {
        [self.d12, self.d13, self.d23]
    }

    pub fn centroid(&self) -> Point3 {
        Point3::from((self.points[0].coords + self.points[1].coords + self.points[2].coords) / 3.0)
    }
}

impl Default for PrismLayout {
    fn default() -> Self {
        Self::from_distances(REFERENCE_D12, REFERENCE_D13, REFERENCE_D23, DEFAULT_PRISM_HEIGHT)
            .expect("reference distances form a triangle")
    }
}

#[derive(Serialize, Deserialize)]
struct PrismLayoutRepr {
    points: [[f64; 3]; 3],
}

impl Serialize for PrismLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PrismLayoutRepr { points: self.points.map(|p| [p.x, p.y, p.z]) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PrismLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PrismLayoutRepr::deserialize(d)?;
        PrismLayout::new(repr.points.map(Point3::from)).map_err(serde::de::Error::custom)
    }
}

/// Robot pose on the master clock. Invalid samples carry no pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: Timestamp,
    pub pose: Option<RigidTransform>,
    pub residual_rms: f64,
    pub valid: bool,
}

impl PoseSample {
    pub fn invalid(t: Timestamp) -> Self {
        PoseSample { t, pose: None, residual_rms: f64::NAN, valid: false }
    }
}
