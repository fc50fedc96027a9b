//! Discrete-event simulation of the half-duplex radio channel and the
//! master's polling loop.
//!
//! The master is a sequential process: each request/reply exchange pushes
//! the request delivery and a timeout into the event queue and dispatches
//! events until the reply arrives or the timeout fires. Events left over
//! from a finished exchange are stale and skipped.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::station::{ClientClock, StationSample};
use crate::timesync::{run_initial_sync, run_resync, CorrectionSchedule, Exchange, SkewEstimate, SyncConfig, SyncTransport};
use crate::types::{FrameId, RawMeasurement, Timestamp};
use crate::wire::{ControlKind, Frame, MEASUREMENT_LEN};

/// Node id of the master in event logs. Clients use their station number.
pub const MASTER: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Payload throughput in bytes per second.
    pub byte_rate: f64,
    pub measurement_msg_len: usize,
    /// Fixed per-frame cost: preamble, header, radio turnaround, host latency.
    pub frame_overhead_us: i64,
    /// Latency jitter, uniform within this many microseconds either side.
    pub jitter_us: i64,
    pub drop_probability: f64,
    /// How long the master waits for a reply before moving on.
    pub reply_timeout_us: i64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            byte_rate: 366.0,
            measurement_msg_len: MEASUREMENT_LEN,
            frame_overhead_us: 70_000,
            jitter_us: 5_000,
            drop_probability: 0.0,
            reply_timeout_us: 500_000,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.byte_rate > 0.0 && self.byte_rate.is_finite()) {
            return bad(format!("byte_rate {} must be positive", self.byte_rate));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return bad(format!("drop_probability {} outside [0, 1]", self.drop_probability));
        }
        if self.frame_overhead_us < 0 || self.jitter_us < 0 {
            return bad("frame overhead and jitter must be non-negative".into());
        }
        let longest = self.airtime_us(self.measurement_msg_len.max(crate::wire::TIME_REPLY_LEN));
        let round_trip = self.airtime_us(crate::wire::CONTROL_LEN) + longest + 2 * self.jitter_us;
        if self.reply_timeout_us <= round_trip {
            return bad(format!(
                "reply_timeout_us {} does not cover the longest round trip ({round_trip} us)",
                self.reply_timeout_us
            ));
        }
        Ok(())
    }

    /// Channel occupancy of a frame of `len` bytes, without jitter.
    pub fn airtime_us(&self, len: usize) -> i64 {
        self.frame_overhead_us + (len as f64 * 1e6 / self.byte_rate).round() as i64
    }

    fn frame_len(&self, frame: &Frame) -> usize {
        match frame {
            Frame::Measurement(_) => self.measurement_msg_len,
            other => other.encoded_len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    At(Timestamp),
    /// Lost in transit; the channel stayed busy until the given time.
    Dropped(Timestamp),
}

impl Delivery {
    pub fn time(self) -> Timestamp {
        match self {
            Delivery::At(t) | Delivery::Dropped(t) => t,
        }
    }
}

/// The shared half-duplex medium.
#[derive(Debug, Clone)]
pub struct Channel {
    config: ChannelConfig,
    busy_until: Timestamp,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(config: ChannelConfig, rng: ChaCha8Rng) -> Self {
        Channel { config, busy_until: Timestamp::ZERO, rng }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn busy_until(&self) -> Timestamp {
        self.busy_until
    }

    /// Starts sending `len` bytes at `now`. The message occupies the channel
    /// until its delivery time.
    pub fn transmit(&mut self, len: usize, now: Timestamp) -> Result<Delivery> {
        if now < self.busy_until {
            return Err(Error::ChannelBusy { until: self.busy_until });
        }
        let jitter = self.rng.random_range(-self.config.jitter_us..=self.config.jitter_us);
        let dropped = self.rng.random::<f64>() < self.config.drop_probability;
        let delivery = now.saturating_add_us(self.config.airtime_us(len) + jitter).max(now);
        self.busy_until = delivery;
        Ok(if dropped { Delivery::Dropped(delivery) } else { Delivery::At(delivery) })
    }
}

struct Queued<E> {
    time: Timestamp,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Time-ordered events, first-in first-out among equal times.
pub struct EventQueue<E> {
    heap: BinaryHeap<Queued<E>>,
    seq: u64,
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0 }
    }

    pub fn push(&mut self, time: Timestamp, event: E) {
        self.heap.push(Queued { time, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Timestamp, E)> {
        self.heap.pop().map(|q| (q.time, q.event))
    }

    pub fn peek_time(&self) -> Option<Timestamp> {
        self.heap.peek().map(|q| q.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Tx,
    Rx,
    Lost,
    Timeout,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Tx => "tx",
            EventKind::Rx => "rx",
            EventKind::Lost => "lost",
            EventKind::Timeout => "timeout",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tx" => Some(EventKind::Tx),
            "rx" => Some(EventKind::Rx),
            "lost" => Some(EventKind::Lost),
            "timeout" => Some(EventKind::Timeout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadioEvent {
    pub time: Timestamp,
    pub kind: EventKind,
    pub src: u8,
    pub dst: u8,
    pub bytes: usize,
    pub dropped: bool,
}

/// Everything the simulated client needs: its clock and the measurements
/// its station produces.
#[derive(Debug, Clone)]
pub struct ClientSetup {
    pub id: u8,
    pub clock: ClientClock,
    pub samples: Vec<StationSample>,
}

struct Client {
    id: u8,
    clock: ClientClock,
    samples: Vec<StationSample>,
    next_unsent: usize,
    last_ping_rx: Option<Timestamp>,
    responsive: bool,
}

impl Client {
    fn handle(&mut self, request: &Frame, master_now: Timestamp) -> Option<Frame> {
        if !self.responsive {
            return None;
        }
        let kind = request.kind()?;
        let ack = Frame::control(ControlKind::Ack, self.id);
        match kind {
            ControlKind::SyncBegin | ControlKind::SyncEnd => Some(ack),
            ControlKind::Ping => {
                self.last_ping_rx = Some(self.clock.client_time(master_now));
                Some(ack)
            }
            ControlKind::TimeRequest => self.last_ping_rx.map(|t_i| Frame::TimeReply { client: self.id, t_i }),
            ControlKind::MeasurementRequest => {
                let ready = self.samples.partition_point(|s| s.master_time <= master_now);
                if ready > self.next_unsent {
                    self.next_unsent = ready;
                    Some(Frame::Measurement(self.samples[ready - 1].measurement))
                } else {
                    Some(Frame::control(ControlKind::NoData, self.id))
                }
            }
            ControlKind::Ack | ControlKind::NoData => None,
        }
    }
}

enum SimEvent {
    Deliver { frame: Frame, src: u8, dst: u8, bytes: usize, token: u64 },
    Lost { src: u8, dst: u8, bytes: usize, token: u64 },
    Timeout { client: u8, token: u64 },
}

/// A measurement as it reached the master.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceivedMeasurement {
    pub measurement: RawMeasurement,
    pub received_at: Timestamp,
}

/// One published correction for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncRecord {
    pub client: u8,
    /// Master time the sync session finished.
    pub master_time: Timestamp,
    /// Client time from which the estimate applies.
    pub effective_client: Timestamp,
    pub estimate: SkewEstimate,
}

#[derive(Debug, Clone)]
pub struct RadioRun {
    pub received: Vec<ReceivedMeasurement>,
    pub events: Vec<RadioEvent>,
    pub sync_log: Vec<SyncRecord>,
    pub schedules: Vec<(u8, CorrectionSchedule)>,
    pub polling_start: Timestamp,
    pub end: Timestamp,
    pub rounds: usize,
    pub failed_resyncs: usize,
}

impl RadioRun {
    pub fn measurements(&self) -> Vec<RawMeasurement> {
        self.received.iter().map(|r| r.measurement).collect()
    }
}

pub struct RadioSim {
    channel: Channel,
    now: Timestamp,
    queue: EventQueue<SimEvent>,
    clients: Vec<Client>,
    events: Vec<RadioEvent>,
    token: u64,
}

impl RadioSim {
    pub fn new(config: ChannelConfig, clients: Vec<ClientSetup>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ids: Vec<u8> = clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != clients.len() || ids.contains(&MASTER) {
            return Err(Error::Configuration("client ids must be distinct and non-zero".into()));
        }
        let clients = clients
            .into_iter()
            .map(|c| {
                c.clock.validate()?;
                if c.samples.windows(2).any(|w| w[0].master_time > w[1].master_time) {
                    return Err(Error::Ordering(format!("client {} samples are not time ordered", c.id)));
                }
                Ok(Client {
                    id: c.id,
                    clock: c.clock,
                    samples: c.samples,
                    next_unsent: 0,
                    last_ping_rx: None,
                    responsive: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RadioSim {
            channel: Channel::new(config, rng_for(seed, "radio", 0)),
            now: Timestamp::ZERO,
            queue: EventQueue::new(),
            clients,
            events: Vec::new(),
            token: 0,
        })
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn events(&self) -> &[RadioEvent] {
        &self.events
    }

    /// An unresponsive client never answers, so every request to it times out.
    pub fn set_responsive(&mut self, client: u8, responsive: bool) -> Result<()> {
        self.client_mut(client)
            .map(|c| c.responsive = responsive)
            .ok_or_else(|| Error::Configuration(format!("no client {client}")))
    }

    fn client_mut(&mut self, id: u8) -> Option<&mut Client> {
        self.clients.iter_mut().find(|c| c.id == id)
    }

    fn send(&mut self, frame: Frame, src: u8, dst: u8, token: u64) {
        let bytes = self.channel.config.frame_len(&frame);
        let start = self.now.max(self.channel.busy_until());
        let delivery = self.channel.transmit(bytes, start).expect("transmission starts once the channel is free");
        let dropped = matches!(delivery, Delivery::Dropped(_));
        self.events.push(RadioEvent { time: start, kind: EventKind::Tx, src, dst, bytes, dropped });
        match delivery {
            Delivery::At(t) => self.queue.push(t, SimEvent::Deliver { frame, src, dst, bytes, token }),
            Delivery::Dropped(t) => self.queue.push(t, SimEvent::Lost { src, dst, bytes, token }),
        }
    }

    fn request(&mut self, client: u8, request: Frame) -> Option<Exchange> {
        self.token += 1;
        let token = self.token;
        let sent_at = self.now.max(self.channel.busy_until());
        self.send(request, MASTER, client, token);
        let timeout = sent_at.saturating_add_us(self.channel.config.reply_timeout_us);
        self.queue.push(timeout, SimEvent::Timeout { client, token });
        while let Some((time, event)) = self.queue.pop() {
            match event {
                SimEvent::Deliver { token: tk, .. } | SimEvent::Lost { token: tk, .. } | SimEvent::Timeout { token: tk, .. }
                    if tk != token =>
                {
                    continue;
                }
                SimEvent::Lost { src, dst, bytes, .. } => {
                    self.now = time;
                    self.events.push(RadioEvent { time, kind: EventKind::Lost, src, dst, bytes, dropped: true });
                }
                SimEvent::Timeout { client, .. } => {
                    self.now = time;
                    self.events.push(RadioEvent { time, kind: EventKind::Timeout, src: MASTER, dst: client, bytes: 0, dropped: false });
                    return None;
                }
                SimEvent::Deliver { frame, src, dst, bytes, .. } => {
                    self.now = time;
                    self.events.push(RadioEvent { time, kind: EventKind::Rx, src, dst, bytes, dropped: false });
                    if dst == MASTER {
                        // drop the pending timeout so the queue stays small
                        self.queue = std::mem::take(&mut self.queue).retain_token_not(token);
                        return Some(Exchange { reply: frame, sent_at, received_at: time });
                    }
                    let reply = self.client_mut(dst).and_then(|c| c.handle(&frame, time));
                    if let Some(reply) = reply {
                        self.send(reply, dst, MASTER, token);
                    }
                }
            }
        }
        None
    }

    /// One measurement request to each client in turn.
    pub fn poll_round(&mut self) -> Vec<ReceivedMeasurement> {
        let ids: Vec<u8> = self.clients.iter().map(|c| c.id).collect();
        let mut out = Vec::new();
        for id in ids {
            if let Some(ex) = self.request(id, Frame::control(ControlKind::MeasurementRequest, id)) {
                if let Frame::Measurement(m) = ex.reply {
                    out.push(ReceivedMeasurement { measurement: m, received_at: ex.received_at });
                }
            }
        }
        out
    }

    fn record(&self, client: u8, estimate: SkewEstimate) -> SyncRecord {
        let effective = (self.now.micros() as f64 + estimate.delta()).round().max(0.0) as i64;
        SyncRecord { client, master_time: self.now, effective_client: Timestamp::from_micros(effective), estimate }
    }

    /// Initial sync of every client, then poll rounds until `end`, with one
    /// client resynchronized per period in round-robin order.
    pub fn run(mut self, end: Timestamp, sync: &SyncConfig) -> Result<RadioRun> {
        sync.validate()?;
        let ids: Vec<u8> = self.clients.iter().map(|c| c.id).collect();
        let mut estimates = Vec::with_capacity(ids.len());
        let mut sync_log = Vec::new();
        for &id in &ids {
            let mut result = Err(Error::SyncTimeout { client: id });
            for _ in 0..sync.initial_attempts {
                result = run_initial_sync(&mut self, id, sync.initial_cycles, sync.w);
                if result.is_ok() {
                    break;
                }
            }
            let estimate = result?;
            sync_log.push(SyncRecord { effective_client: Timestamp::ZERO, ..self.record(id, estimate.clone()) });
            estimates.push(estimate);
        }

        let polling_start = self.now;
        let period_us = (sync.resync_period_s * 1e6).round() as i64;
        let mut next_resync = polling_start.saturating_add_us(period_us);
        let mut rr = 0;
        let mut rounds = 0;
        let mut failed_resyncs = 0;
        let mut received = Vec::new();
        while self.now < end {
            received.extend(self.poll_round());
            rounds += 1;
            if self.now >= next_resync && self.now < end {
                let id = ids[rr];
                match run_resync(&mut self, id, &estimates[rr], sync.resync_cycles) {
                    Ok(e) => {
                        sync_log.push(self.record(id, e.clone()));
                        estimates[rr] = e;
                    }
                    Err(Error::SyncTimeout { .. }) | Err(Error::Format(_)) => failed_resyncs += 1,
                    Err(e) => return Err(e),
                }
                rr = (rr + 1) % ids.len();
                next_resync = next_resync.saturating_add_us(period_us);
            }
        }

        let mut schedules = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut s = CorrectionSchedule::new();
            for r in sync_log.iter().filter(|r| r.client == id) {
                s.push(r.effective_client, r.estimate.clone())?;
            }
            schedules.push((id, s));
        }
        Ok(RadioRun {
            received,
            events: self.events,
            sync_log,
            schedules,
            polling_start,
            end: self.now,
            rounds,
            failed_resyncs,
        })
    }
}

impl EventQueue<SimEvent> {
    fn retain_token_not(self, token: u64) -> Self {
        let mut out = EventQueue { heap: BinaryHeap::with_capacity(self.heap.len()), seq: self.seq };
        for q in self.heap.into_vec() {
            let tk = match &q.event {
                SimEvent::Deliver { token, .. } | SimEvent::Lost { token, .. } | SimEvent::Timeout { token, .. } => *token,
            };
            if tk != token {
                out.heap.push(q);
            }
        }
        out
    }
}

impl SyncTransport for RadioSim {
    fn exchange(&mut self, client: u8, request: Frame) -> Option<Exchange> {
        self.request(client, request)
    }
}

/// Checks that no two transmissions overlap: every `tx` must be closed by
/// its `rx` or `lost` before the next `tx` starts.
pub fn check_half_duplex(events: &[RadioEvent]) -> Result<()> {
    let mut open: Option<&RadioEvent> = None;
    let mut last_close = Timestamp::ZERO;
    for e in events {
        match e.kind {
            EventKind::Tx => {
                if let Some(o) = open {
                    return Err(Error::Ordering(format!("transmission at {} overlaps the one started at {}", e.time, o.time)));
                }
                if e.time < last_close {
                    return Err(Error::Ordering(format!("transmission at {} starts before the channel freed at {last_close}", e.time)));
                }
                open = Some(e);
            }
            EventKind::Rx | EventKind::Lost => {
                match open {
                    Some(o) if o.src == e.src && o.dst == e.dst && e.time >= o.time => {}
                    _ => return Err(Error::Ordering(format!("reception at {} matches no open transmission", e.time))),
                }
                open = None;
                last_close = e.time;
            }
            EventKind::Timeout => {}
        }
    }
    Ok(())
}

/// Measurements received by the master from each client per second of
/// polling, over `[start, end]`.
pub fn delivery_rates(events: &[RadioEvent], clients: &[u8], measurement_len: usize, start: Timestamp, end: Timestamp) -> Vec<(u8, f64)> {
    let span = (end - start) as f64 / 1e6;
    clients
        .iter()
        .map(|&id| {
            let n = events
                .iter()
                .filter(|e| {
                    e.kind == EventKind::Rx && e.dst == MASTER && e.src == id && e.bytes == measurement_len && e.time >= start && e.time <= end
                })
                .count();
            (id, if span > 0.0 { n as f64 / span } else { 0.0 })
        })
        .collect()
}

/// Client id carried on the radio for a station frame.
pub fn client_id(station: FrameId) -> Option<u8> {
    station.station_number()
}
