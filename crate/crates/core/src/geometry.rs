//! Polar/Cartesian conversion, least-squares rigid alignment of point sets,
//! and the two calibration procedures built on it.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{distance, FrameId, Point3, PrismLayout, RawMeasurement, RigidTransform};

/// How the vertical angle of a measurement is referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleConvention {
    /// Measured down from the zenith (surveying convention).
    #[default]
    Zenith,
    /// Measured up from the horizon.
    Elevation,
}

pub fn polar_to_cartesian(ha: f64, va: f64, range: f64, convention: AngleConvention) -> Point3 {
    let zenith = match convention {
        AngleConvention::Zenith => va,
        AngleConvention::Elevation => std::f64::consts::FRAC_PI_2 - va,
    };
    let (sz, cz) = zenith.sin_cos();
    let (sh, ch) = ha.sin_cos();
    Point3::new(range * sz * ch, range * sz * sh, range * cz)
}

/// Inverse of [`polar_to_cartesian`] with the zenith convention:
/// `(ha in [0, 2pi), va in [0, pi], range)`.
pub fn cartesian_to_polar(p: &Point3) -> (f64, f64, f64) {
    let range = p.coords.norm();
    let ha = p.y.atan2(p.x).rem_euclid(std::f64::consts::TAU);
    let va = if range > 0.0 { (p.x.hypot(p.y)).atan2(p.z) } else { 0.0 };
    (ha, va, range)
}

/// Station-frame Cartesian position of a measurement, zenith convention.
pub fn spherical_to_cartesian(m: &RawMeasurement) -> Result<Point3> {
    spherical_to_cartesian_with(m, AngleConvention::Zenith)
}

pub fn spherical_to_cartesian_with(m: &RawMeasurement, convention: AngleConvention) -> Result<Point3> {
    if !m.status.is_ok() {
        return Err(Error::RejectedMeasurement(m.status));
    }
    if !(m.range > 0.0) {
        return Err(Error::Format(format!("non-positive range {}", m.range)));
    }
    Ok(polar_to_cartesian(m.ha, m.va, m.range, convention))
}

/// Paired point lists: `reference[k]` corresponds to `moving[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCorrespondences {
    reference: Vec<Point3>,
    moving: Vec<Point3>,
}

impl PointCorrespondences {
    pub fn new(reference: Vec<Point3>, moving: Vec<Point3>) -> Result<Self> {
        if reference.len() != moving.len() {
            return Err(Error::Correspondence(format!(
                "{} reference points vs {} moving points",
                reference.len(),
                moving.len()
            )));
        }
        Ok(PointCorrespondences { reference, moving })
    }

    pub fn reference(&self) -> &[Point3] {
        &self.reference
    }

    pub fn moving(&self) -> &[Point3] {
        &self.moving
    }
}

/// Least-squares rigid transform taking `c.moving` onto `c.reference`.
pub fn align_point_sets(c: &PointCorrespondences) -> Result<RigidTransform> {
    align(&c.reference, &c.moving)
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64
}

/// Second-largest singular value of the centered point cloud, relative to
/// the largest. Zero for coincident or collinear points.
fn planar_spread(points: &[Point3], center: &Vector3<f64>) -> (f64, f64) {
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p.coords - center;
        acc + d * d.transpose()
    });
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    (eig[0], eig[1])
}

const COLLINEAR_TOLERANCE: f64 = 1e-9;

fn check_spread(points: &[Point3], center: &Vector3<f64>, which: &str) -> Result<()> {
    let (s1, s2) = planar_spread(points, center);
    if s1 <= f64::MIN_POSITIVE || s2 <= COLLINEAR_TOLERANCE * s1 {
        return Err(Error::DegenerateGeometry(format!("{which} points are collinear or coincident")));
    }
    Ok(())
}

/// Minimizes `sum_k |reference_k - T moving_k|^2` over proper rigid `T`.
///
/// Closed form through the SVD of the cross-covariance of the centered
/// sets; the sign of the last singular direction is flipped when needed so
/// the rotation never contains a reflection.
pub fn align(reference: &[Point3], moving: &[Point3]) -> Result<RigidTransform> {
    if reference.len() != moving.len() {
        return Err(Error::Correspondence(format!(
            "{} reference points vs {} moving points",
            reference.len(),
            moving.len()
        )));
    }
    if reference.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: reference.len() });
    }
    if reference.iter().chain(moving).any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(Error::Format("non-finite point in alignment input".into()));
    }
    let q_bar = centroid(reference);
    let p_bar = centroid(moving);
    check_spread(reference, &q_bar, "reference")?;
    check_spread(moving, &p_bar, "moving")?;

    let h = moving.iter().zip(reference).fold(Matrix3::zeros(), |acc, (p, q)| {
        acc + (p.coords - p_bar) * (q.coords - q_bar).transpose()
    });
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = q_bar - rotation * p_bar;
    Ok(RigidTransform::from_rotation_matrix(&rotation, translation))
}

/// Root-mean-square of `|reference_k - T moving_k|`.
pub fn rms_residual(reference: &[Point3], moving: &[Point3], t: &RigidTransform) -> f64 {
    let sum: f64 = reference
        .iter()
        .zip(moving)
        .map(|(q, p)| (q - t.apply(p)).norm_squared())
        .sum();
    (sum / reference.len().max(1) as f64).sqrt()
}

/// One station's observation of a calibration marker, in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    pub marker_id: String,
    pub station: FrameId,
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarkerResidual {
    pub marker_id: String,
    pub station: FrameId,
    pub residual_m: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationResult {
    /// Station 2 frame into station 1 (common) frame.
    pub t12: RigidTransform,
    /// Station 3 frame into station 1 (common) frame.
    pub t13: RigidTransform,
    pub residuals: Vec<MarkerResidual>,
    pub rms: f64,
}

impl CalibrationResult {
    /// Exact calibration, used when the frames are known.
    pub fn from_transforms(t12: RigidTransform, t13: RigidTransform) -> Self {
        CalibrationResult { t12, t13, residuals: Vec::new(), rms: 0.0 }
    }

    /// Transform from the given station frame into the common frame.
    pub fn station_to_common(&self, station: FrameId) -> Result<RigidTransform> {
        match station {
            FrameId::Station1 => Ok(RigidTransform::identity()),
            FrameId::Station2 => Ok(self.t12),
            FrameId::Station3 => Ok(self.t13),
            FrameId::Robot => Err(Error::Configuration("robot frame has no station calibration".into())),
        }
    }
}

/// Finds the station 2 and station 3 frames relative to station 1 from
/// markers seen by all three stations.
pub fn calibrate_stations(markers: &[MarkerObservation]) -> Result<CalibrationResult> {
    let mut by_id: BTreeMap<&str, [Option<Point3>; 3]> = BTreeMap::new();
    for m in markers {
        let idx = m.station.station_index().ok_or_else(|| {
            Error::Correspondence(format!("marker {} attributed to the robot frame", m.marker_id))
        })?;
        let slot = &mut by_id.entry(m.marker_id.as_str()).or_default()[idx];
        if slot.is_some() {
            return Err(Error::Correspondence(format!(
                "marker {} observed twice by station {}",
                m.marker_id,
                idx + 1
            )));
        }
        *slot = Some(m.position);
    }

    let mut ids = Vec::new();
    let mut per_station: [Vec<Point3>; 3] = Default::default();
    for (id, obs) in &by_id {
        match obs {
            [Some(a), Some(b), Some(c)] => {
                ids.push(id.to_string());
                per_station[0].push(*a);
                per_station[1].push(*b);
                per_station[2].push(*c);
            }
            _ => {
                let missing: Vec<String> = obs
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.is_none())
                    .map(|(i, _)| (i + 1).to_string())
                    .collect();
                return Err(Error::Correspondence(format!(
                    "marker {id} not observed by station(s) {}",
                    missing.join(", ")
                )));
            }
        }
    }
    if ids.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: ids.len() });
    }

    let t12 = align(&per_station[0], &per_station[1])?;
    let t13 = align(&per_station[0], &per_station[2])?;

    let mut residuals = Vec::with_capacity(2 * ids.len());
    for (station, t, pts) in [(FrameId::Station2, &t12, &per_station[1]), (FrameId::Station3, &t13, &per_station[2])] {
        for ((id, q), p) in ids.iter().zip(&per_station[0]).zip(pts) {
            residuals.push(MarkerResidual {
                marker_id: id.clone(),
                station,
                residual_m: distance(q, &t.apply(p)),
            });
        }
    }
    let rms = (residuals.iter().map(|r| r.residual_m * r.residual_m).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(CalibrationResult { t12, t13, residuals, rms })
}

/// Re-expresses three prism positions measured by one station in the robot
/// frame. `robot_frame` maps robot coordinates into that station's frame.
pub fn calibrate_prism_layout(measured: &[Point3; 3], robot_frame: &RigidTransform) -> Result<PrismLayout> {
    for i in 0..3 {
        for j in i + 1..3 {
            if distance(&measured[i], &measured[j]) < 1e-9 {
                return Err(Error::DegenerateGeometry(format!("prisms {} and {} coincide", i + 1, j + 1)));
            }
        }
    }
    let to_robot = robot_frame.inverse();
    PrismLayout::new(measured.map(|p| to_robot.apply(&p)))
}
