//! Precision studies: inter-prism distance errors on static and moving
//! segments, error grids over robot dynamics, the prism-noise perturbation
//! study, and the GNSS receiver-pair comparison.

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{solve_pose, PrismTrack};
use crate::seed::rng_for;
use crate::station::{GnssEpoch, GnssRegime, Trajectory};
use crate::types::{distance, Point3, PrismLayout, Timestamp};

/// Static when both `|v|` and `|w|` are below these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticThresholds {
    pub linear_mps: f64,
    pub angular_rps: f64,
}

impl Default for StaticThresholds {
    fn default() -> Self {
        StaticThresholds { linear_mps: 0.01, angular_rps: 0.01 }
    }
}

impl StaticThresholds {
    fn is_static(&self, v: f64, w: f64) -> bool {
        v.abs() < self.linear_mps && w.abs() < self.angular_rps
    }
}

/// Maximal `[start, end]` second intervals where the trajectory is at rest.
pub fn static_segments(traj: &Trajectory, thresholds: &StaticThresholds) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b, seg) in traj.segment_spans() {
        if !thresholds.is_static(seg.linear_mps, seg.angular_rps) {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.1 == a => last.1 = b,
            _ => out.push((a, b)),
        }
    }
    out
}

/// Same as [`static_segments`] for sampled speed signals: each interval runs
/// from the first to the last sample of a run of static samples.
pub fn static_segments_sampled(t: &[f64], v: &[f64], w: &[f64], thresholds: &StaticThresholds) -> Result<Vec<(f64, f64)>> {
    if t.len() != v.len() || t.len() != w.len() {
        return Err(Error::Alignment(format!("{} times, {} linear and {} angular speeds", t.len(), v.len(), w.len())));
    }
    let mut out = Vec::new();
    let mut run: Option<(f64, f64)> = None;
    for i in 0..t.len() {
        if thresholds.is_static(v[i], w[i]) {
            run = Some(match run {
                Some((a, _)) => (a, t[i]),
                None => (t[i], t[i]),
            });
        } else if let Some(r) = run.take() {
            out.push(r);
        }
    }
    out.extend(run);
    Ok(out)
}

/// Per-timestamp `|p_a - p_b| - d_ab` for pairs (1,2), (1,3), (2,3).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSeries {
    pub t: Vec<Timestamp>,
    pub e: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    /// Mean and sample standard deviation; NaN for too few values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        let mean = if n > 0 { v.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { f64::NAN };
        Stats { mean, std, count: n }
    }

    pub fn standard_error(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn pair_stats(&self) -> [Stats; 3] {
        [0, 1, 2].map(|k| Stats::of(self.e.iter().map(|e| e[k])))
    }

    /// Mean of `|e|` over the three pairs, per timestamp.
    pub fn mean_abs(&self) -> Vec<f64> {
        self.e.iter().map(|e| e.iter().map(|x| x.abs()).sum::<f64>() / 3.0).collect()
    }

    /// `|e|` pooled over all pairs and timestamps.
    pub fn abs_stats(&self) -> Stats {
        Stats::of(self.e.iter().flat_map(|e| e.iter().map(|x| x.abs())))
    }

    pub fn filter(&self, keep: impl Fn(Timestamp) -> bool) -> ErrorSeries {
        let (t, e) = self.t.iter().zip(&self.e).filter(|(t, _)| keep(**t)).map(|(t, e)| (*t, *e)).unzip();
        ErrorSeries { t, e }
    }
}

/// Errors at every timestamp whose triplet is fully finite.
pub fn inter_prism_errors(triplets: &[(Timestamp, [Point3; 3])], layout: &PrismLayout) -> ErrorSeries {
    let d = layout.reference_distances();
    let mut out = ErrorSeries::default();
    for (t, p) in triplets {
        if p.iter().any(|q| !q.coords.iter().all(|c| c.is_finite())) {
            continue;
        }
        out.t.push(*t);
        out.e.push([0, 1, 2].map(|k| distance(&p[PAIRS[k].0], &p[PAIRS[k].1]) - d[k]));
    }
    out
}

/// Triplets built from raw samples inside static intervals: each prism 1
/// sample is paired with the nearest prism 2 and prism 3 samples from the
/// same interval, at most `max_offset_s` away.
pub fn static_triplets(tracks: &[PrismTrack; 3], intervals: &[(f64, f64)], max_offset_s: f64) -> Vec<(Timestamp, [Point3; 3])> {
    let max_us = (max_offset_s * 1e6).round() as i64;
    let mut out = Vec::new();
    for &(a, b) in intervals {
        let inside = |track: &PrismTrack| -> Vec<(Timestamp, Point3)> {
            track
                .samples()
                .iter()
                .filter(|(t, _)| (a..=b).contains(&t.as_secs_f64()))
                .copied()
                .collect()
        };
        let [s0, s1, s2] = [inside(&tracks[0]), inside(&tracks[1]), inside(&tracks[2])];
        let nearest = |set: &[(Timestamp, Point3)], t: Timestamp| -> Option<Point3> {
            set.iter().min_by_key(|(u, _)| (*u - t).abs()).filter(|(u, _)| (*u - t).abs() <= max_us).map(|(_, p)| *p)
        };
        for (t, p0) in &s0 {
            if let (Some(p1), Some(p2)) = (nearest(&s1, *t), nearest(&s2, *t)) {
                out.push((*t, [*p0, p1, p2]));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::Configuration("histogram needs hi > lo and at least one bin".into()));
        }
        let mut h = Histogram { lo, hi, counts: vec![0; bins], underflow: 0, overflow: 0 };
        for v in values {
            if v < lo {
                h.underflow += 1;
            } else if v >= hi {
                h.overflow += 1;
            } else {
                let i = (((v - lo) / (hi - lo)) * bins as f64) as usize;
                h.counts[i.min(bins - 1)] += 1;
            }
        }
        Ok(h)
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || self.bins == 0 {
            return Err(Error::Configuration(format!("bin spec [{}, {}] x {} is empty", self.lo, self.hi, self.bins)));
        }
        Ok(())
    }

    /// Bin of `x`; values outside the range go to the edge bins.
    pub fn index(&self, x: f64) -> usize {
        let f = ((x - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        (f.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.bins as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsBins {
    pub linear: BinSpec,
    pub angular: BinSpec,
    pub accel: BinSpec,
    /// Half-width of the central difference used for acceleration.
    pub accel_half_window_s: f64,
}

impl Default for DynamicsBins {
    fn default() -> Self {
        DynamicsBins {
            linear: BinSpec { lo: 0.0, hi: 1.0, bins: 8 },
            angular: BinSpec { lo: 0.0, hi: 0.8, bins: 8 },
            accel: BinSpec { lo: -1.0, hi: 1.0, bins: 8 },
            accel_half_window_s: 0.5,
        }
    }
}

/// Mean error per cell of a two-dimensional grid, rows along `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedGrid {
    pub x: BinSpec,
    pub y: BinSpec,
    pub sums: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BinnedGrid {
    fn new(x: BinSpec, y: BinSpec) -> Self {
        BinnedGrid { x, y, sums: vec![0.0; x.bins * y.bins], counts: vec![0; x.bins * y.bins] }
    }

    fn add(&mut self, xv: f64, yv: f64, value: f64) {
        let i = self.x.index(xv) * self.y.bins + self.y.index(yv);
        self.sums[i] += value;
        self.counts[i] += 1;
    }

    pub fn count(&self, ix: usize, iy: usize) -> usize {
        self.counts[ix * self.y.bins + iy]
    }

    /// `None` for empty cells.
    pub fn mean(&self, ix: usize, iy: usize) -> Option<f64> {
        let i = ix * self.y.bins + iy;
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsGrids {
    /// Linear speed against angular speed.
    pub v_w: BinnedGrid,
    /// Linear acceleration against angular speed.
    pub a_w: BinnedGrid,
}

/// Averages `errors` in cells of `(|v|, |w|)` and `(a, |w|)`. Non-finite
/// samples are skipped.
pub fn bin_by_dynamics(errors: &[f64], speeds: &[f64], accels: &[f64], angular: &[f64], bins: &DynamicsBins) -> Result<DynamicsGrids> {
    let n = errors.len();
    if speeds.len() != n || accels.len() != n || angular.len() != n {
        return Err(Error::Alignment(format!(
            "{n} errors vs {} speeds, {} accelerations, {} angular speeds",
            speeds.len(),
            accels.len(),
            angular.len()
        )));
    }
    for b in [bins.linear, bins.angular, bins.accel] {
        b.validate()?;
    }
    let mut v_w = BinnedGrid::new(bins.linear, bins.angular);
    let mut a_w = BinnedGrid::new(bins.accel, bins.angular);
    for i in 0..n {
        if ![errors[i], speeds[i], accels[i], angular[i]].iter().all(|x| x.is_finite()) {
            continue;
        }
        v_w.add(speeds[i].abs(), angular[i].abs(), errors[i]);
        a_w.add(accels[i], angular[i].abs(), errors[i]);
    }
    Ok(DynamicsGrids { v_w, a_w })
}

/// Commanded dynamics at each timestamp: `(v, a, w)`.
pub fn dynamics_signals(traj: &Trajectory, times: &[Timestamp], accel_half_window_s: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut v = Vec::with_capacity(times.len());
    let mut a = Vec::with_capacity(times.len());
    let mut w = Vec::with_capacity(times.len());
    for t in times {
        let s = t.as_secs_f64();
        let (lin, ang) = traj.velocity_at(s)?;
        v.push(lin);
        w.push(ang);
        a.push(traj.acceleration_at(s, accel_half_window_s)?);
    }
    Ok((v, a, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub sigma_step_m: f64,
    pub sigma_points: usize,
    pub trials: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig { sigma_step_m: 0.004, sigma_points: 101, trials: 1000 }
    }
}

/// Error statistics of the poses recovered from perturbed prisms at one
/// noise level. Errors are estimate minus truth; Euler errors are Z-Y-X
/// `[yaw, pitch, roll]` of the error rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPoint {
    pub sigma: f64,
    pub trials: usize,
    pub position_mean: [f64; 3],
    pub position_std: [f64; 3],
    /// Mean Euclidean norm of the position error.
    pub position_norm_mean: f64,
    pub euler_mean: [f64; 3],
    pub euler_std: [f64; 3],
    pub euler_abs_mean: [f64; 3],
}

impl PerturbationPoint {
    /// Mean absolute Euler error, averaged over the three axes.
    pub fn orientation_abs_mean(&self) -> f64 {
        self.euler_abs_mean.iter().sum::<f64>() / 3.0
    }

    pub fn position_standard_error(&self, axis: usize) -> f64 {
        self.position_std[axis] / (self.trials as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub points: Vec<PerturbationPoint>,
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (intercept, slope, r2)
}

impl PerturbationCurve {
    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    pub fn at(&self, sigma: f64) -> Option<&PerturbationPoint> {
        self.points.iter().find(|p| (p.sigma - sigma).abs() < 1e-12)
    }

    /// R^2 of a straight-line fit of each position-std curve.
    pub fn position_std_r2(&self) -> [f64; 3] {
        let x = self.sigmas();
        [0, 1, 2].map(|k| linear_fit(&x, &self.points.iter().map(|p| p.position_std[k]).collect::<Vec<_>>()).2)
    }

    /// R^2 of a straight-line fit of each Euler-std curve.
    pub fn euler_std_r2(&self) -> [f64; 3] {
        let x = self.sigmas();
        [0, 1, 2].map(|k| linear_fit(&x, &self.points.iter().map(|p| p.euler_std[k]).collect::<Vec<_>>()).2)
    }
}

fn perturbation_point(layout: &PrismLayout, sigma: f64, trials: usize, seed: u64, index: u64) -> PerturbationPoint {
    let zero = PerturbationPoint {
        sigma,
        trials,
        position_mean: [0.0; 3],
        position_std: [0.0; 3],
        position_norm_mean: 0.0,
        euler_mean: [0.0; 3],
        euler_std: [0.0; 3],
        euler_abs_mean: [0.0; 3],
    };
    if sigma == 0.0 {
        // nothing is perturbed, so every trial recovers the truth
        return zero;
    }
    let mut rng = rng_for(seed, "perturbation", index);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut pos: Vec<[f64; 3]> = Vec::with_capacity(trials);
    let mut eul: Vec<[f64; 3]> = Vec::with_capacity(trials);
    let mut solved = 0;
    while solved < trials {
        let q = layout
            .points()
            .map(|p| p + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)));
        // the true pose is the identity, so the estimate is the error
        let s = solve_pose(Timestamp::ZERO, &q, layout);
        let Some(est) = s.pose else { continue };
        let t = est.translation();
        pos.push([t.x, t.y, t.z]);
        eul.push(est.euler_zyx());
        solved += 1;
    }
    let col = |v: &[[f64; 3]], k: usize| Stats::of(v.iter().map(|r| r[k]));
    PerturbationPoint {
        position_mean: [0, 1, 2].map(|k| col(&pos, k).mean),
        position_std: [0, 1, 2].map(|k| col(&pos, k).std),
        position_norm_mean: pos.iter().map(|r| Vector3::from(*r).norm()).sum::<f64>() / trials as f64,
        euler_mean: [0, 1, 2].map(|k| col(&eul, k).mean),
        euler_std: [0, 1, 2].map(|k| col(&eul, k).std),
        euler_abs_mean: [0, 1, 2].map(|k| eul.iter().map(|r| r[k].abs()).sum::<f64>() / trials as f64),
        ..zero
    }
}

/// Pose error statistics for Gaussian noise of each standard deviation on
/// the grid applied to the measured prism positions. Each noise level has
/// its own random stream, so the result does not depend on `parallel`.
pub fn perturbation_study(layout: &PrismLayout, seed: u64, cfg: &PerturbationConfig, parallel: usize) -> Result<PerturbationCurve> {
    if cfg.sigma_points == 0 || cfg.trials < 2 || !(cfg.sigma_step_m >= 0.0) {
        return Err(Error::Configuration("perturbation study needs noise levels and at least two trials".into()));
    }
    let sigmas: Vec<f64> = (0..cfg.sigma_points).map(|k| k as f64 * cfg.sigma_step_m).collect();
    let threads = parallel.max(1).min(sigmas.len());
    let points = if threads == 1 {
        sigmas.iter().enumerate().map(|(k, s)| perturbation_point(layout, *s, cfg.trials, seed, k as u64)).collect()
    } else {
        let mut slots: Vec<Option<PerturbationPoint>> = vec![None; sigmas.len()];
        std::thread::scope(|scope| {
            for (tid, chunk) in slots.chunks_mut(sigmas.len().div_ceil(threads)).enumerate() {
                let base = tid * sigmas.len().div_ceil(threads);
                let sigmas = &sigmas;
                scope.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        let k = base + j;
                        *slot = Some(perturbation_point(layout, sigmas[k], cfg.trials, seed, k as u64));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    Ok(PerturbationCurve { points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnssComparison {
    /// `(epoch, regime, |d - reference|)` for every paired epoch.
    pub errors: Vec<(Timestamp, GnssRegime, f64)>,
    /// Epochs present in only one of the two logs.
    pub dropped: usize,
}

impl GnssComparison {
    pub fn stats(&self, regime: GnssRegime) -> Stats {
        Stats::of(self.errors.iter().filter(|e| e.1 == regime).map(|e| e.2))
    }

    pub fn histogram(&self, regime: GnssRegime, lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
        Histogram::new(self.errors.iter().filter(|e| e.1 == regime).map(|e| e.2), lo, hi, bins)
    }
}

/// Pairs the two receivers' epochs by timestamp and measures how far their
/// separation strays from `reference`.
pub fn gnss_compare(a: &[GnssEpoch], b: &[GnssEpoch], reference: f64) -> GnssComparison {
    let mut a: Vec<&GnssEpoch> = a.iter().collect();
    let mut b: Vec<&GnssEpoch> = b.iter().collect();
    a.sort_by_key(|e| e.t);
    b.sort_by_key(|e| e.t);
    let (mut i, mut j) = (0, 0);
    let mut out = GnssComparison { errors: Vec::new(), dropped: 0 };
    while i < a.len() && j < b.len() {
        match a[i].t.cmp(&b[j].t) {
            std::cmp::Ordering::Less => {
                out.dropped += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.dropped += 1;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.errors.push((a[i].t, a[i].regime, (distance(&a[i].position, &b[j].position) - reference).abs()));
                i += 1;
                j += 1;
            }
        }
    }
    out.dropped += (a.len() - i) + (b.len() - j);
    out
}

/// Pooled `|e|` statistics of the inter-prism errors per GNSS regime.
pub fn inter_prism_by_regime(series: &ErrorSeries, traj: &Trajectory) -> Result<[(GnssRegime, Stats); 2]> {
    let mut regimes = Vec::with_capacity(series.len());
    for t in &series.t {
        regimes.push(traj.regime_at(t.as_secs_f64())?);
    }
    let stats = |r: GnssRegime| {
        Stats::of(series.e.iter().zip(&regimes).filter(|(_, g)| **g == r).flat_map(|(e, _)| e.iter().map(|x| x.abs())))
    };
    Ok([(GnssRegime::Open, stats(GnssRegime::Open)), (GnssRegime::Forest, stats(GnssRegime::Forest))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::station::{Segment, StartPose, TrajectorySpec};
    use crate::types::RigidTransform;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn seg(d: f64, v: f64, w: f64) -> Segment {
        Segment { duration_s: d, linear_mps: v, angular_rps: w, regime: GnssRegime::Open }
    }

    fn traj(segments: Vec<Segment>) -> Trajectory {
        Trajectory::new(TrajectorySpec { start: StartPose::default(), segments }).unwrap()
    }

    #[test]
    fn static_segment_examples() {
        let th = StaticThresholds::default();
        assert_eq!(static_segments(&traj(vec![seg(5.0, 0.0, 0.0), seg(5.0, 0.0, 0.0)]), &th), vec![(0.0, 10.0)]);
        assert!(static_segments(&traj(vec![seg(10.0, 0.5, 0.0)]), &th).is_empty());
        let start_stop = traj(vec![seg(4.0, 0.0, 0.0), seg(3.0, 1.0, 0.0), seg(2.0, 0.0, 0.0), seg(3.0, 0.0, 0.5), seg(1.0, 0.005, 0.0)]);
        assert_eq!(static_segments(&start_stop, &th), vec![(0.0, 4.0), (7.0, 9.0), (12.0, 13.0)]);
    }

    #[test]
    fn sampled_static_segments() {
        let th = StaticThresholds::default();
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let v = [0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0];
        let w = [0.0; 10];
        assert_eq!(static_segments_sampled(&t, &v, &w, &th).unwrap(), vec![(0.0, 1.0), (4.0, 6.0), (8.0, 9.0)]);
        assert!(static_segments_sampled(&t, &v[..3], &w, &th).is_err());
    }

    #[test]
    fn inter_prism_examples() {
        let layout = PrismLayout::default();
        let pose = RigidTransform::from_yaw(0.4, Vector3::new(3.0, 4.0, 0.0));
        let exact = layout.points().map(|p| pose.apply(&p));
        let s = inter_prism_errors(&[(Timestamp::ZERO, exact)], &layout);
        assert!(s.e[0].iter().all(|e| e.abs() < 1e-12));

        let mut bent = *layout.points();
        bent[1].y += 0.002;
        let s = inter_prism_errors(&[(Timestamp::ZERO, bent)], &layout);
        let d12 = distance(&bent[0], &bent[1]) - 0.987;
        let d23 = distance(&bent[1], &bent[2]) - 0.815;
        assert_abs_diff_eq!(s.e[0][0], d12, epsilon = 1e-15);
        assert_abs_diff_eq!(s.e[0][1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.e[0][2], d23, epsilon = 1e-15);

        let nan = [Point3::new(f64::NAN, 0.0, 0.0); 3];
        assert!(inter_prism_errors(&[(Timestamp::ZERO, nan)], &layout).is_empty());
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new([-1.0, 0.0, 0.1, 0.49, 0.5, 0.99, 1.0, 2.0], 0.0, 1.0, 2).unwrap();
        assert_eq!(h.counts, vec![3, 2]);
        assert_eq!((h.underflow, h.overflow), (1, 2));
        assert_eq!(h.bin_edges(1), (0.5, 1.0));
    }

    #[test]
    fn uniform_field_fills_every_cell_with_its_value() {
        let mut speeds = Vec::new();
        let mut ang = Vec::new();
        let mut acc = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                speeds.push(0.0625 + i as f64 * 0.125);
                ang.push(0.05 + j as f64 * 0.1);
                acc.push(-0.875 + i as f64 * 0.25);
            }
        }
        let errs = vec![0.004; speeds.len()];
        let g = bin_by_dynamics(&errs, &speeds, &acc, &ang, &DynamicsBins::default()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_abs_diff_eq!(g.v_w.mean(i, j).unwrap(), 0.004, epsilon = 1e-15);
                assert_abs_diff_eq!(g.a_w.mean(i, j).unwrap(), 0.004, epsilon = 1e-15);
            }
        }
        // errors proportional to angular speed give monotone rows
        let errs: Vec<f64> = ang.iter().map(|w| 0.01 * w).collect();
        let g = bin_by_dynamics(&errs, &speeds, &acc, &ang, &DynamicsBins::default()).unwrap();
        for i in 0..8 {
            let row: Vec<f64> = (0..8).map(|j| g.v_w.mean(i, j).unwrap()).collect();
            assert!(row.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(matches!(bin_by_dynamics(&errs[..3], &speeds, &acc, &ang, &DynamicsBins::default()), Err(Error::Alignment(_))));
    }

    #[test]
    fn edge_bins_clamp() {
        let b = BinSpec { lo: 0.0, hi: 1.0, bins: 4 };
        assert_eq!(b.index(-3.0), 0);
        assert_eq!(b.index(1.0), 3);
        assert_eq!(b.index(7.0), 3);
        assert_eq!(b.index(0.26), 1);
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let x: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert_abs_diff_eq!(a, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn perturbation_small_grid() {
        let cfg = PerturbationConfig { sigma_step_m: 0.01, sigma_points: 3, trials: 400 };
        let layout = PrismLayout::default();
        let c = perturbation_study(&layout, 5, &cfg, 1).unwrap();
        let z = &c.points[0];
        assert_eq!(z.position_std, [0.0; 3]);
        assert_eq!(z.position_norm_mean, 0.0);
        assert_eq!(z.euler_abs_mean, [0.0; 3]);
        let p = c.at(0.01).unwrap();
        assert!((p.position_norm_mean - 0.010).abs() < 0.004, "{}", p.position_norm_mean);
        assert!(c.points[2].position_std[0] > c.points[1].position_std[0]);
        // thread count does not change the numbers
        assert_eq!(c, perturbation_study(&layout, 5, &cfg, 3).unwrap());
        assert_ne!(c, perturbation_study(&layout, 6, &cfg, 1).unwrap());
    }

    #[test]
    fn gnss_pairing() {
        let e = |t: i64, x: f64, r: GnssRegime| GnssEpoch { t: Timestamp::from_micros(t), position: Point3::new(x, 0.0, 0.0), regime: r };
        let a = vec![e(0, 0.0, GnssRegime::Open), e(200, 0.0, GnssRegime::Open), e(400, 0.0, GnssRegime::Forest)];
        let b = vec![e(0, 0.81, GnssRegime::Open), e(400, 1.81, GnssRegime::Forest), e(600, 0.0, GnssRegime::Forest)];
        let c = gnss_compare(&a, &b, 0.81);
        assert_eq!(c.dropped, 2);
        assert_eq!(c.errors.len(), 2);
        assert_abs_diff_eq!(c.errors[0].2, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.stats(GnssRegime::Forest).mean, 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn prop_errors_are_rigid_invariant(yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, x in -100.0f64..100.0, n0 in -0.01f64..0.01, n1 in -0.01f64..0.01) {
            let layout = PrismLayout::default();
            let mut pts = *layout.points();
            pts[0].x += n0;
            pts[2].y += n1;
            let g = RigidTransform::from_euler_zyx(yaw, pitch, 0.2, Vector3::new(x, 2.0 * x, -1.0));
            let a = inter_prism_errors(&[(Timestamp::ZERO, pts)], &layout);
            let b = inter_prism_errors(&[(Timestamp::ZERO, pts.map(|p| g.apply(&p)))], &layout);
            for k in 0..3 {
                prop_assert!((a.e[0][k] - b.e[0][k]).abs() < 1e-9);
            }
        }
    }
}
