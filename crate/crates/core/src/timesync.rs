//! Clock skew estimation between the master and its clients.
//!
//! A sync cycle is a ping/ack pair timed on the master (`t_b`, `t_e`) and
//! the client's receive stamp `t_i`, fetched with a time request. The skew
//! of a cycle is `t_i - (t_b + t_e) / 2`. The initial sync sets the
//! correction to the mean skew directly; each resync blends its mean into
//! the current correction with weight `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Timestamp;
use crate::wire::{ControlKind, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncCycle {
    t_b: Timestamp,
    t_e: Timestamp,
    t_i: Timestamp,
}

impl SyncCycle {
    pub fn new(t_b: Timestamp, t_e: Timestamp, t_i: Timestamp) -> Result<Self> {
        if t_b >= t_e {
            return Err(Error::Ordering(format!("sync cycle must end after it begins ({t_b} >= {t_e})")));
        }
        Ok(SyncCycle { t_b, t_e, t_i })
    }

    pub fn t_b(&self) -> Timestamp {
        self.t_b
    }

    pub fn t_e(&self) -> Timestamp {
        self.t_e
    }

    pub fn t_i(&self) -> Timestamp {
        self.t_i
    }

    /// `t_i - midpoint(t_b, t_e)` in microseconds.
    pub fn skew(&self) -> i64 {
        self.t_i - midpoint(self.t_b, self.t_e).expect("ordered at construction")
    }
}

/// Mean of two master stamps, rounded to the microsecond with ties going
/// toward `t_b`.
pub fn midpoint(t_b: Timestamp, t_e: Timestamp) -> Result<Timestamp> {
    if t_b > t_e {
        return Err(Error::Ordering(format!("midpoint of {t_b} and earlier {t_e}")));
    }
    let span = t_e - t_b;
    Ok(Timestamp::from_micros(t_b.micros() + span / 2))
}

pub fn mean_skew(cycles: &[SyncCycle]) -> Result<f64> {
    if cycles.is_empty() {
        return Err(Error::InsufficientData("no sync cycles".into()));
    }
    let sum: i128 = cycles.iter().map(|c| i128::from(c.skew())).sum();
    Ok(sum as f64 / cycles.len() as f64)
}

/// Correction state for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewEstimate {
    delta: f64,
    j: u32,
    w: f64,
    history: Vec<f64>,
    initialized: bool,
}

pub const DEFAULT_FILTER_WEIGHT: f64 = 0.1;

impl SkewEstimate {
    /// An estimate that has not seen its initial sync yet.
    pub fn uninitialized(w: f64) -> Result<Self> {
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::Configuration(format!("filter weight {w} outside (0, 1)")));
        }
        Ok(SkewEstimate { delta: 0.0, j: 0, w, history: Vec::new(), initialized: false })
    }

    /// State right after the initial sync: the correction is the mean skew.
    pub fn initial(d_bar: f64, w: f64) -> Result<Self> {
        let mut e = Self::uninitialized(w)?;
        e.delta = d_bar;
        e.history.push(d_bar);
        e.initialized = true;
        Ok(e)
    }

    /// Fixed correction with no sync history, for perfect or known clocks.
    pub fn fixed(delta: f64) -> Self {
        SkewEstimate { delta, j: 0, w: DEFAULT_FILTER_WEIGHT, history: vec![delta], initialized: true }
    }

    /// Rebuilds a stored estimate, e.g. from a sync log.
    pub fn restored(delta: f64, j: u32, w: f64, history: Vec<f64>) -> Result<Self> {
        let mut e = Self::uninitialized(w)?;
        if !delta.is_finite() {
            return Err(Error::Format(format!("correction {delta} is not finite")));
        }
        e.delta = delta;
        e.j = j;
        e.history = history;
        e.initialized = true;
        Ok(e)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of resyncs folded in since the initial sync.
    pub fn j(&self) -> u32 {
        self.j
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    /// Mean skew of each sync session, initial sync first.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// `delta <- w * d_bar + (1 - w) * delta`.
pub fn update_correction(d_bar: f64, prev: &SkewEstimate) -> Result<SkewEstimate> {
    if !prev.initialized {
        return Err(Error::Uninitialized);
    }
    let mut next = prev.clone();
    next.delta = prev.w * d_bar + (1.0 - prev.w) * prev.delta;
    next.j += 1;
    next.history.push(d_bar);
    Ok(next)
}

/// Maps a client timestamp onto the master clock.
pub fn apply_correction(t_client: Timestamp, estimate: &SkewEstimate) -> Result<Timestamp> {
    if !estimate.initialized {
        return Err(Error::Uninitialized);
    }
    let corrected = (t_client.micros() as f64 - estimate.delta).round() as i64;
    Timestamp::try_from_micros(corrected)
        .map_err(|_| Error::OutOfRange(format!("{t_client} precedes the master epoch after correction")))
}

/// The corrections that were in force for one client over a run.
///
/// Each entry holds from its effective client time until the next entry.
/// Timestamps earlier than the first entry use the first entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSchedule {
    entries: Vec<(Timestamp, SkewEstimate)>,
}

impl CorrectionSchedule {
    pub fn constant(estimate: SkewEstimate) -> Self {
        CorrectionSchedule { entries: vec![(Timestamp::ZERO, estimate)] }
    }

    pub fn new() -> Self {
        CorrectionSchedule { entries: Vec::new() }
    }

    pub fn push(&mut self, effective_from: Timestamp, estimate: SkewEstimate) -> Result<()> {
        if let Some((last, _)) = self.entries.last() {
            if effective_from < *last {
                return Err(Error::Ordering(format!(
                    "correction effective at {effective_from} precedes the previous one at {last}"
                )));
            }
        }
        self.entries.push((effective_from, estimate));
        Ok(())
    }

    pub fn entries(&self) -> &[(Timestamp, SkewEstimate)] {
        &self.entries
    }

    pub fn estimate_at(&self, t_client: Timestamp) -> Result<&SkewEstimate> {
        let idx = self.entries.partition_point(|(t, _)| *t <= t_client);
        self.entries
            .get(idx.saturating_sub(1))
            .map(|(_, e)| e)
            .ok_or(Error::Uninitialized)
    }

    pub fn apply(&self, t_client: Timestamp) -> Result<Timestamp> {
        apply_correction(t_client, self.estimate_at(t_client)?)
    }
}

impl Default for CorrectionSchedule {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub w: f64,
    pub initial_cycles: usize,
    pub resync_cycles: usize,
    pub resync_period_s: f64,
    /// Attempts per client before the initial sync gives up.
    pub initial_attempts: u32,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig { w: DEFAULT_FILTER_WEIGHT, initial_cycles: 50, resync_cycles: 5, resync_period_s: 60.0, initial_attempts: 3 }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::Configuration(format!("sync.w = {} outside (0, 1)", self.w)));
        }
        if self.initial_cycles == 0 || self.resync_cycles == 0 {
            return Err(Error::Configuration("sync cycle counts must be positive".into()));
        }
        if !(self.resync_period_s > 0.0) {
            return Err(Error::Configuration("sync.resync_period_s must be positive".into()));
        }
        if self.initial_attempts == 0 {
            return Err(Error::Configuration("sync.initial_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// One request/reply round trip as seen by the master.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exchange {
    pub reply: Frame,
    /// Master time the request started transmitting.
    pub sent_at: Timestamp,
    /// Master time the reply was fully received.
    pub received_at: Timestamp,
}

/// Request/reply access to one client, as the master sees it.
pub trait SyncTransport {
    /// `None` when the request or the reply never arrived in time.
    fn exchange(&mut self, client: u8, request: Frame) -> Option<Exchange>;
}

/// Each sync message is sent up to this many times before the session fails.
pub const MESSAGE_ATTEMPTS: usize = 3;

fn exchange_with_retry<T: SyncTransport>(t: &mut T, client: u8, request: Frame) -> Result<Exchange> {
    (0..MESSAGE_ATTEMPTS)
        .find_map(|_| t.exchange(client, request))
        .ok_or(Error::SyncTimeout { client })
}

fn expect_control<T: SyncTransport>(t: &mut T, client: u8, kind: ControlKind, want: ControlKind) -> Result<Exchange> {
    let ex = exchange_with_retry(t, client, Frame::control(kind, client))?;
    match ex.reply {
        Frame::Control { kind: k, client: c } if k == want && c == client => Ok(ex),
        other => Err(Error::Format(format!("client {client} answered {kind:?} with {other:?}"))),
    }
}

/// Runs `n_cycles` ping/ack + time-request cycles inside a sync session.
pub fn collect_cycles<T: SyncTransport>(transport: &mut T, client: u8, n_cycles: usize) -> Result<Vec<SyncCycle>> {
    if n_cycles == 0 {
        return Err(Error::Configuration("a sync session needs at least one cycle".into()));
    }
    expect_control(transport, client, ControlKind::SyncBegin, ControlKind::Ack)?;
    let mut cycles = Vec::with_capacity(n_cycles);
    for _ in 0..n_cycles {
        let ping = expect_control(transport, client, ControlKind::Ping, ControlKind::Ack)?;
        let ex = exchange_with_retry(transport, client, Frame::control(ControlKind::TimeRequest, client))?;
        let t_i = match ex.reply {
            Frame::TimeReply { client: c, t_i } if c == client => t_i,
            other => return Err(Error::Format(format!("client {client} answered a time request with {other:?}"))),
        };
        cycles.push(SyncCycle::new(ping.sent_at, ping.received_at, t_i)?);
    }
    expect_control(transport, client, ControlKind::SyncEnd, ControlKind::Ack)?;
    Ok(cycles)
}

pub fn run_initial_sync<T: SyncTransport>(transport: &mut T, client: u8, n_cycles: usize, w: f64) -> Result<SkewEstimate> {
    let cycles = collect_cycles(transport, client, n_cycles)?;
    SkewEstimate::initial(mean_skew(&cycles)?, w)
}

pub fn run_resync<T: SyncTransport>(
    transport: &mut T,
    client: u8,
    estimate: &SkewEstimate,
    n_cycles: usize,
) -> Result<SkewEstimate> {
    if !estimate.is_initialized() {
        return Err(Error::Uninitialized);
    }
    let cycles = collect_cycles(transport, client, n_cycles)?;
    update_correction(mean_skew(&cycles)?, estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts(us: i64) -> Timestamp {
        Timestamp::from_micros(us)
    }

    #[test]
    fn midpoint_examples() {
        assert_eq!(midpoint(ts(100), ts(110)).unwrap(), ts(105));
        assert_eq!(midpoint(ts(100), ts(100)).unwrap(), ts(100));
        assert_eq!(midpoint(ts(0), ts(3)).unwrap(), ts(1));
        assert!(matches!(midpoint(ts(5), ts(4)), Err(Error::Ordering(_))));
    }

    #[test]
    fn cycle_ordering() {
        assert!(SyncCycle::new(ts(10), ts(10), ts(0)).is_err());
        assert!(SyncCycle::new(ts(10), ts(11), ts(0)).is_ok());
    }

    #[test]
    fn mean_skew_examples() {
        assert!(matches!(mean_skew(&[]), Err(Error::InsufficientData(_))));
        let c = SyncCycle::new(ts(100), ts(110), ts(105)).unwrap();
        assert_eq!(mean_skew(&[c]).unwrap(), 0.0);
        let a = SyncCycle::new(ts(100), ts(110), ts(115)).unwrap();
        let b = SyncCycle::new(ts(200), ts(210), ts(195)).unwrap();
        assert_eq!(mean_skew(&[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn mean_skew_with_channel_asymmetry() {
        // 50 cycles, offset 5000 us, uniform +-200 us one-way asymmetry
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut cycles = Vec::new();
            let mut t = 1_000_000i64;
            for _ in 0..50 {
                let rtt: i64 = rng.random_range(200_000..240_000);
                let asym: i64 = rng.random_range(-200..=200);
                let t_i = t + rtt / 2 + asym + 5000;
                cycles.push(SyncCycle::new(ts(t), ts(t + rtt), ts(t_i)).unwrap());
                t += 400_000;
            }
            let d = mean_skew(&cycles).unwrap();
            assert!((d - 5000.0).abs() <= 60.0, "{d}");
        }
    }

    #[test]
    fn mean_skew_is_unbiased_for_symmetric_delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cycles = Vec::with_capacity(1_000_000);
        for k in 0..1_000_000i64 {
            let t_b = 10_000 + k * 1000;
            let up: i64 = rng.random_range(0..=400);
            let down: i64 = rng.random_range(0..=400);
            cycles.push(SyncCycle::new(ts(t_b), ts(t_b + 100 + up + 100 + down), ts(t_b + 100 + up + 777)).unwrap());
        }
        let bias = mean_skew(&cycles).unwrap() - 777.0;
        assert!(bias.abs() <= 1.0, "bias {bias}");
    }

    #[test]
    fn filter_examples() {
        assert!(matches!(update_correction(1.0, &SkewEstimate::uninitialized(0.1).unwrap()), Err(Error::Uninitialized)));
        let e = SkewEstimate::initial(0.0, 0.1).unwrap();
        let n = update_correction(10.0, &e).unwrap();
        assert!((n.delta() - 1.0).abs() < 1e-15);
        assert_eq!(n.j(), 1);
        assert_eq!(n.history(), &[0.0, 10.0]);

        let e = SkewEstimate::initial(42.5, 0.1).unwrap();
        assert_eq!(update_correction(42.5, &e).unwrap().delta(), 42.5);
    }

    #[test]
    fn filter_converges_geometrically() {
        let d0 = -300.0;
        let target = 1200.0;
        let mut e = SkewEstimate::initial(d0, 0.1).unwrap();
        for n in 1..=50 {
            e = update_correction(target, &e).unwrap();
            let expected = target - (target - d0) * 0.9f64.powi(n);
            assert!((e.delta() - expected).abs() < 1e-9);
        }
        assert!((e.delta() - target).abs() <= 0.006 * (target - d0).abs());
    }

    #[test]
    fn correction_examples() {
        assert_eq!(apply_correction(ts(777), &SkewEstimate::fixed(0.0)).unwrap(), ts(777));
        assert_eq!(apply_correction(ts(10_000), &SkewEstimate::fixed(5000.0)).unwrap(), ts(5000));
        assert!(matches!(apply_correction(ts(0), &SkewEstimate::uninitialized(0.1).unwrap()), Err(Error::Uninitialized)));
        assert!(apply_correction(ts(10), &SkewEstimate::fixed(20.0)).is_err());
    }

    #[test]
    fn schedule_picks_the_entry_in_force() {
        let mut s = CorrectionSchedule::new();
        assert!(s.apply(ts(5)).is_err());
        s.push(ts(1000), SkewEstimate::fixed(100.0)).unwrap();
        s.push(ts(5000), SkewEstimate::fixed(200.0)).unwrap();
        assert!(s.push(ts(4000), SkewEstimate::fixed(0.0)).is_err());
        assert_eq!(s.apply(ts(500)).unwrap(), ts(400));
        assert_eq!(s.apply(ts(4999)).unwrap(), ts(4899));
        assert_eq!(s.apply(ts(5000)).unwrap(), ts(4800));
    }

    /// Client with clock `offset + (1 + drift) * master` on a channel whose
    /// one-way delay is `base + U[0, jitter]`.
    struct MockLink {
        now: i64,
        offset_us: f64,
        drift_ppm: f64,
        base_us: i64,
        jitter_us: i64,
        rng: ChaCha8Rng,
        last_rx: i64,
        fail_after: Option<usize>,
        calls: usize,
    }

    impl MockLink {
        fn new(offset_us: f64, drift_ppm: f64, jitter_us: i64, seed: u64) -> Self {
            MockLink {
                now: 1_000_000,
                offset_us,
                drift_ppm,
                base_us: 75_000,
                jitter_us,
                rng: ChaCha8Rng::seed_from_u64(seed),
                last_rx: 0,
                fail_after: None,
                calls: 0,
            }
        }

        fn client_time(&self, master: i64) -> i64 {
            (master as f64 + self.offset_us + self.drift_ppm * 1e-6 * master as f64).round() as i64
        }

        fn delay(&mut self) -> i64 {
            self.base_us + if self.jitter_us > 0 { self.rng.random_range(0..=self.jitter_us) } else { 0 }
        }
    }

    impl SyncTransport for MockLink {
        fn exchange(&mut self, client: u8, request: Frame) -> Option<Exchange> {
            self.calls += 1;
            if self.fail_after.is_some_and(|n| self.calls > n) {
                return None;
            }
            let sent = self.now;
            let arrive = sent + self.delay();
            let reply = match request {
                Frame::Control { kind: ControlKind::TimeRequest, .. } => {
                    Frame::TimeReply { client, t_i: Timestamp::from_micros(self.client_time(self.last_rx)) }
                }
                Frame::Control { kind: ControlKind::Ping, .. } => {
                    self.last_rx = arrive;
                    Frame::control(ControlKind::Ack, client)
                }
                _ => Frame::control(ControlKind::Ack, client),
            };
            let back = arrive + self.delay();
            self.now = back;
            Some(Exchange { reply, sent_at: ts(sent), received_at: ts(back) })
        }
    }

    #[test]
    fn initial_sync_zero_skew() {
        let mut link = MockLink::new(0.0, 0.0, 0, 1);
        let e = run_initial_sync(&mut link, 1, 50, 0.1).unwrap();
        assert_eq!(e.delta(), 0.0);
        assert_eq!(e.j(), 0);
    }

    #[test]
    fn initial_sync_one_second_offset() {
        let mut link = MockLink::new(1_000_000.0, 0.0, 0, 1);
        let e = run_initial_sync(&mut link, 2, 50, 0.1).unwrap();
        assert!((e.delta() - 1_000_000.0).abs() <= 1.0);
    }

    #[test]
    fn initial_sync_under_drift() {
        let mut link = MockLink::new(250_000.0, 50.0, 0, 1);
        let start = link.now;
        let e = run_initial_sync(&mut link, 1, 50, 0.1).unwrap();
        let end = link.now;
        let mid = (start + end) as f64 / 2.0;
        let true_skew = 250_000.0 + 50e-6 * mid;
        let bound = 50e-6 * (end - start) as f64;
        assert!((e.delta() - true_skew).abs() <= bound, "{} vs {true_skew} (bound {bound})", e.delta());
    }

    #[test]
    fn resync_filters_and_timeout_leaves_state() {
        let mut link = MockLink::new(1_000_000.0, 0.0, 0, 2);
        let e0 = run_initial_sync(&mut link, 1, 50, 0.1).unwrap();
        link.offset_us = 1_000_100.0;
        let e1 = run_resync(&mut link, 1, &e0, 5).unwrap();
        assert_eq!(e1.j(), 1);
        assert!((e1.delta() - (e0.delta() + 10.0)).abs() <= 1.0);

        link.fail_after = Some(link.calls + 3);
        let calls_before = link.calls;
        let err = run_resync(&mut link, 1, &e1, 5).unwrap_err();
        assert!(matches!(err, Error::SyncTimeout { client: 1 }));
        assert_eq!(link.calls - calls_before, 3 + MESSAGE_ATTEMPTS);
        assert_eq!(e1.j(), 1);

        assert!(matches!(
            run_resync(&mut link, 1, &SkewEstimate::uninitialized(0.1).unwrap(), 5),
            Err(Error::Uninitialized)
        ));
    }

    #[test]
    fn corrected_stamp_recovers_master_time() {
        let mut link = MockLink::new(3_000_000.0, 0.0, 10_000, 9);
        let e = run_initial_sync(&mut link, 3, 50, 0.1).unwrap();
        // an event at master time T, stamped by the client, corrected back
        for t in [5_000_000i64, 60_000_000, 600_000_000] {
            let back = apply_correction(ts(link.client_time(t)), &e).unwrap();
            assert!((back.micros() - t).abs() <= 10_000 / 2);
        }
        // the producing cycles land on their own midpoints within the jitter
        let cycles = collect_cycles(&mut link, 3, 10).unwrap();
        for c in cycles {
            let back = apply_correction(c.t_i(), &e).unwrap();
            assert!((back - midpoint(c.t_b(), c.t_e()).unwrap()).abs() <= 10_000);
        }
    }

    proptest! {
        #[test]
        fn prop_filter_monotone_and_bounded(d0 in -1e6f64..1e6, target in -1e6f64..1e6, w in 0.01f64..0.99, n in 1usize..60) {
            let mut e = SkewEstimate::initial(d0, w).unwrap();
            let (lo, hi) = (d0.min(target), d0.max(target));
            let mut prev_gap = (target - d0).abs();
            for _ in 0..n {
                e = update_correction(target, &e).unwrap();
                let gap = (target - e.delta()).abs();
                prop_assert!(gap <= prev_gap + 1e-9);
                prop_assert!(e.delta() >= lo - 1e-9 && e.delta() <= hi + 1e-9);
                prev_gap = gap;
            }
        }

        #[test]
        fn prop_midpoint_between(a in 0i64..1i64 << 50, span in 0i64..1i64 << 30) {
            let m = midpoint(ts(a), ts(a + span)).unwrap();
            prop_assert!(m >= ts(a) && m <= ts(a + span));
            prop_assert!(2 * (m.micros() - a) == span || 2 * (m.micros() - a) == span - 1);
        }
    }
}
