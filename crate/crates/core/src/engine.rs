//! The discrete-time simulator.
//!
//! Step `s` runs three sub-phases:
//!
//! 1. injection: packets injected at `s` join the queue of their first link
//!    (under deadline scheduling they are held until the next M-interval
//!    boundary instead);
//! 2. transmission: every link with a nonempty queue sends the packet its
//!    discipline ranks first;
//! 3. arrival: sent packets join the next queue on their path, or are
//!    delivered, before step `s + 1`.
//!
//! A packet injected at `s` can therefore be sent at `s`, and a packet with a
//! `d`-link path crossing an empty network is delivered at the end of step
//! `s + d - 1`, with delay `d`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::deadline::{
    assign_deadlines_derandomized, assign_deadlines_random, beta_condition_holds,
    verify_deadline_condition, SchedulerParams,
};
use crate::error::{Error, Result};
use crate::model::{InjectionTrace, LinkId, Network, NodeId, Packet, Path, TraceEvent};
use crate::ring::{IntervalSummary, OnlineRingRouter, ParallelRing, RandomRingRouter, RingParams};
use crate::routing::{
    inband_control_plan, inband_tau, ControlPacket, PhaseDiagnostics, SourceRouter, Variant,
};
use crate::sched::{PriorityKey, PriorityRule, QueuedPacket};

/// A packet inside the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivePacket {
    pub id: usize,
    pub inject_time: u64,
    pub source: NodeId,
    pub dest: NodeId,
    pub path: Path,
    /// Index into `path` of the link the packet waits for.
    pub hop: usize,
    pub deadlines: Option<Vec<u64>>,
    pub control: bool,
}

impl LivePacket {
    pub fn current_link(&self) -> Option<LinkId> {
        self.path.links.get(self.hop).copied()
    }

    /// Links not yet crossed, the current one included.
    pub fn remaining_hops(&self) -> usize {
        self.path.len() - self.hop
    }
}

/// Read-only view handed to adversaries before each step.
pub struct SimView<'a> {
    time: u64,
    net: &'a Network,
    packets: &'a [Option<Box<LivePacket>>],
    next_id: usize,
    queued: u64,
}

impl<'a> SimView<'a> {
    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    /// Id the first packet injected this step will get; ids are consecutive
    /// in the order events are returned.
    pub fn next_id(&self) -> usize {
        self.next_id
    }

    pub fn packet(&self, id: usize) -> Option<&'a LivePacket> {
        self.packets.get(id).and_then(|p| p.as_deref())
    }

    pub fn live_packets(&self) -> impl Iterator<Item = &'a LivePacket> + 'a {
        self.packets.iter().filter_map(|p| p.as_deref())
    }

    /// Data packets waiting in link queues or in deadline storage.
    pub fn queued_total(&self) -> u64 {
        self.queued
    }
}

/// Source of injections.
pub trait Adversary {
    /// Events injected at step `t`, all with `event.t == t`.
    fn inject(&mut self, t: u64, view: &SimView<'_>) -> Result<Vec<TraceEvent>>;

    /// Set once the adversary will inject nothing more, ending the
    /// injection part of a run before its horizon.
    fn finished(&self) -> bool {
        false
    }
}

/// Replays a fixed trace.
#[derive(Debug, Clone)]
pub struct TraceAdversary {
    events: Vec<TraceEvent>,
    next: usize,
}

impl TraceAdversary {
    pub fn new(trace: InjectionTrace) -> Self {
        Self {
            events: trace.into_events(),
            next: 0,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.next == self.events.len()
    }
}

impl Adversary for TraceAdversary {
    fn inject(&mut self, t: u64, _view: &SimView<'_>) -> Result<Vec<TraceEvent>> {
        let start = self.next;
        while self.next < self.events.len() && self.events[self.next].t <= t {
            self.next += 1;
        }
        Ok(self.events[start..self.next].to_vec())
    }
}

/// Injects nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Silent;

impl Adversary for Silent {
    fn inject(&mut self, _t: u64, _view: &SimView<'_>) -> Result<Vec<TraceEvent>> {
        Ok(Vec::new())
    }
}

/// Router-specific results attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouterReport {
    Adversary,
    Source {
        phases: Vec<PhaseDiagnostics>,
        /// The phase still running at the end of the simulation.
        partial: PhaseDiagnostics,
    },
    Ring {
        /// Maximum link load of every interval touched by the run.
        interval_max_loads: Vec<u64>,
        load_bound: u64,
        /// Online mode only.
        intervals: Vec<IntervalSummary>,
    },
}

/// Chooses a path for every injected packet.
pub trait Router {
    /// Called at the start of every step, before injections.
    fn tick(&mut self, _t: u64) -> Result<()> {
        Ok(())
    }

    fn route(&mut self, t: u64, event: &TraceEvent) -> Result<Path>;

    /// Control packets to inject at step `t`.
    fn control_packets(&mut self, _t: u64) -> Vec<ControlPacket> {
        Vec::new()
    }

    /// Final diagnostics; `end` is one past the last simulated step.
    fn report(&mut self, end: u64) -> Result<RouterReport>;
}

/// Uses the path carried by each trace event.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdversaryPaths;

impl Router for AdversaryPaths {
    fn route(&mut self, t: u64, event: &TraceEvent) -> Result<Path> {
        event.path.clone().ok_or_else(|| {
            Error::Config(format!(
                "event at step {t} ({} -> {}) has no path and no router is configured",
                event.src, event.dst
            ))
        })
    }

    fn report(&mut self, _end: u64) -> Result<RouterReport> {
        Ok(RouterReport::Adversary)
    }
}

/// Congestion-based source routing.
#[derive(Debug, Clone)]
pub struct SourceRouting {
    router: SourceRouter,
    phases: Vec<PhaseDiagnostics>,
    concrete_inband: bool,
}

impl SourceRouting {
    pub fn new(router: SourceRouter) -> Self {
        Self {
            router,
            phases: Vec::new(),
            concrete_inband: false,
        }
    }

    /// Sends the in-band control traffic through the network. Requires
    /// `w >= 2 tau` and `w (1 - r) / 2 >= n² + mn`.
    pub fn with_concrete_inband(mut self) -> Result<Self> {
        let p = self.router.params();
        if p.variant != Variant::InBand {
            return Err(Error::Config(
                "concrete in-band mode needs the inband variant".into(),
            ));
        }
        let net = self.router.network();
        let tau = inband_tau(net);
        let (n, m) = (net.n() as f64, net.m() as f64);
        if p.window < 2 * tau {
            return Err(Error::Config(format!(
                "concrete in-band mode needs w >= 2 tau = {}, got w = {}",
                2 * tau,
                p.window
            )));
        }
        if p.window as f64 * (1.0 - p.rate) / 2.0 < n * n + m * n {
            return Err(Error::Config(format!(
                "concrete in-band mode needs w (1 - r) / 2 >= n² + mn = {}",
                n * n + m * n
            )));
        }
        self.concrete_inband = true;
        Ok(self)
    }

    pub fn router(&self) -> &SourceRouter {
        &self.router
    }

    pub fn phases(&self) -> &[PhaseDiagnostics] {
        &self.phases
    }
}

impl Router for SourceRouting {
    fn tick(&mut self, t: u64) -> Result<()> {
        let done = self.router.advance_to(t)?;
        self.phases.extend(done);
        Ok(())
    }

    fn route(&mut self, _t: u64, event: &TraceEvent) -> Result<Path> {
        self.router.route_packet(event.src, event.dst)
    }

    fn control_packets(&mut self, t: u64) -> Vec<ControlPacket> {
        let w = self.router.params().window;
        if !self.concrete_inband || t == 0 || !t.is_multiple_of(w) {
            return Vec::new();
        }
        inband_control_plan(self.router.network(), self.router.last_window_pairs())
    }

    fn report(&mut self, end: u64) -> Result<RouterReport> {
        if end > 0 {
            // Close every window that ended before `end`.
            self.tick(end)?;
        }
        Ok(RouterReport::Source {
            phases: self.phases.clone(),
            partial: self.router.partial_diagnostics(),
        })
    }
}

/// Per-interval link loads of a ring routing.
#[derive(Debug, Clone)]
struct RingLoads {
    window: u64,
    interval: u64,
    loads: Vec<u64>,
    maxima: Vec<u64>,
}

impl RingLoads {
    fn new(window: u64, links: usize) -> Self {
        Self {
            window,
            interval: 0,
            loads: vec![0; links],
            maxima: Vec::new(),
        }
    }

    fn add(&mut self, t: u64, path: &Path) {
        while t / self.window > self.interval {
            self.roll();
        }
        for &e in &path.links {
            self.loads[e] += 1;
        }
    }

    fn roll(&mut self) {
        self.maxima
            .push(self.loads.iter().copied().max().unwrap_or(0));
        self.loads.iter_mut().for_each(|l| *l = 0);
        self.interval += 1;
    }

    fn finish(&mut self, end: u64) -> Vec<u64> {
        let last = end.saturating_sub(1) / self.window;
        while self.interval < last {
            self.roll();
        }
        let mut out = self.maxima.clone();
        out.push(self.loads.iter().copied().max().unwrap_or(0));
        out
    }
}

/// Online derandomized ring routing; checks the estimator at every decision.
#[derive(Debug, Clone)]
pub struct RingOnline {
    router: OnlineRingRouter,
    loads: RingLoads,
}

impl RingOnline {
    pub fn new(router: OnlineRingRouter) -> Self {
        let loads = RingLoads::new(router.params().window, router.ring().network().m());
        Self { router, loads }
    }

    pub fn router(&self) -> &OnlineRingRouter {
        &self.router
    }
}

impl Router for RingOnline {
    fn route(&mut self, t: u64, event: &TraceEvent) -> Result<Path> {
        let dec = self.router.route(t, event.src, event.dst)?;
        if dec.log_h_before_swap != dec.log_h_after_swap {
            return Err(Error::Invariant {
                step: t,
                what: format!(
                    "ghost swap changed ln h from {} to {}",
                    dec.log_h_before_swap, dec.log_h_after_swap
                ),
            });
        }
        if dec.log_h_after > dec.log_h_after_swap + 1e-12 * dec.log_h_after_swap.abs().max(1.0) {
            return Err(Error::Invariant {
                step: t,
                what: format!(
                    "ring choice raised ln h from {} to {}",
                    dec.log_h_after_swap, dec.log_h_after
                ),
            });
        }
        let path = self.router.ring().path(dec.ring, event.src, event.dst);
        self.loads.add(t, &path);
        Ok(path)
    }

    fn report(&mut self, end: u64) -> Result<RouterReport> {
        self.router.advance_to(end.saturating_sub(1));
        Ok(RouterReport::Ring {
            interval_max_loads: self.loads.finish(end),
            load_bound: self.router.params().load_bound(),
            intervals: self.router.summaries().to_vec(),
        })
    }
}

/// Uniform random ring choice.
#[derive(Debug, Clone)]
pub struct RingRandom {
    ring: ParallelRing,
    params: RingParams,
    rng: RandomRingRouter,
    loads: RingLoads,
}

impl RingRandom {
    pub fn new(ring: ParallelRing, params: RingParams, seed: u64) -> Self {
        let rng = RandomRingRouter::new(ring.c(), seed);
        let loads = RingLoads::new(params.window, ring.network().m());
        Self {
            ring,
            params,
            rng,
            loads,
        }
    }
}

impl Router for RingRandom {
    fn route(&mut self, t: u64, event: &TraceEvent) -> Result<Path> {
        if event.src == event.dst {
            return Ok(Path::default());
        }
        let path = self
            .ring
            .path(self.rng.route_random(), event.src, event.dst);
        self.loads.add(t, &path);
        Ok(path)
    }

    fn report(&mut self, end: u64) -> Result<RouterReport> {
        Ok(RouterReport::Ring {
            interval_max_loads: self.loads.finish(end),
            load_bound: self.params.load_bound(),
            intervals: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeadlineMode {
    Random,
    Derand,
}

/// Queueing discipline of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Discipline {
    Greedy(PriorityRule),
    /// Store-and-forward by M-intervals with per-link deadlines served
    /// earliest first.
    Deadline {
        params: SchedulerParams,
        mode: DeadlineMode,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Total queued data exceeded the configured cap at this step.
    CapReached {
        step: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub packet: usize,
    pub inject: u64,
    pub deliver: u64,
    pub delay: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlStats {
    pub injected: u64,
    pub delivered: u64,
    /// Most control packets sent after a single window.
    pub max_per_window: u64,
    /// Longest control-packet delay.
    pub max_latency: u64,
    /// `n³ + mn²` in concrete in-band mode.
    pub latency_bound: Option<u64>,
}

/// Certificate of one M-interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalCertificate {
    pub gamma: u64,
    pub packets: usize,
    /// No link has more than `T` deadlines in any `T` steps.
    pub holds: bool,
    pub beta_condition: bool,
    /// Largest realized `ln h` over first-link groups (derandomized mode).
    pub max_log_h: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeadlineStats {
    pub intervals: Vec<IntervalCertificate>,
    /// Link crossings after the corresponding deadline.
    pub misses: u64,
    /// Misses in intervals whose certificate holds.
    pub certified_misses: u64,
    pub max_delay: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub status: RunStatus,
    pub steps: u64,
    pub injected: u64,
    pub delivered: u64,
    /// Data packets still queued or held at the end.
    pub queued: u64,
    pub max_total_queue: u64,
    /// Total queued data packets after each step.
    pub queue_series: Vec<u64>,
    pub max_queue_per_link: Vec<u64>,
    pub deliveries: Vec<Delivery>,
    pub control: ControlStats,
    pub deadline: Option<DeadlineStats>,
    pub router: RouterReport,
}

impl SimReport {
    pub fn max_delay(&self) -> u64 {
        self.deliveries.iter().map(|d| d.delay).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Enqueue,
    Serve,
    Deliver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: u64,
    pub kind: LogKind,
    pub link: Option<LinkId>,
    pub packet: usize,
}

/// Whether every link served its packets in arrival order (ties by id).
pub fn fifo_order_holds(log: &[LogEvent]) -> bool {
    let mut arrivals: BTreeMap<LinkId, Vec<(u64, usize)>> = BTreeMap::new();
    let mut served: BTreeMap<LinkId, Vec<usize>> = BTreeMap::new();
    for ev in log {
        let Some(link) = ev.link else { continue };
        match ev.kind {
            LogKind::Enqueue => arrivals.entry(link).or_default().push((ev.t, ev.packet)),
            LogKind::Serve => served.entry(link).or_default().push(ev.packet),
            LogKind::Deliver => {}
        }
    }
    served.iter().all(|(link, order)| {
        let mut expect = arrivals.remove(link).unwrap_or_default();
        expect.sort_unstable();
        expect
            .iter()
            .map(|&(_, id)| id)
            .take(order.len())
            .eq(order.iter().copied())
    })
}

/// Options of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Injection steps `0..horizon`.
    pub horizon: u64,
    /// Extra silent steps allowed to empty the network afterwards.
    pub drain: u64,
    /// Stop once more data packets than this are queued.
    pub queue_cap: Option<u64>,
    pub record_deliveries: bool,
}

/// The simulator state.
pub struct Simulator<R> {
    net: Network,
    router: R,
    discipline: Discipline,
    t: u64,
    packets: Vec<Option<Box<LivePacket>>>,
    queues: Vec<BinaryHeap<Reverse<PriorityKey>>>,
    control_queued: Vec<u64>,
    held: Vec<usize>,
    injected: u64,
    delivered: u64,
    queued: u64,
    control: ControlStats,
    deadline: Option<DeadlineStats>,
    queue_series: Vec<u64>,
    max_queue_per_link: Vec<u64>,
    deliveries: Vec<Delivery>,
    record_deliveries: bool,
    log: Option<Vec<LogEvent>>,
}

impl<R: Router> Simulator<R> {
    pub fn new(net: Network, router: R, discipline: Discipline) -> Self {
        let m = net.m();
        let deadline =
            matches!(discipline, Discipline::Deadline { .. }).then(DeadlineStats::default);
        Self {
            net,
            router,
            discipline,
            t: 0,
            packets: Vec::new(),
            queues: vec![BinaryHeap::new(); m],
            control_queued: vec![0; m],
            held: Vec::new(),
            injected: 0,
            delivered: 0,
            queued: 0,
            control: ControlStats::default(),
            deadline,
            queue_series: Vec::new(),
            max_queue_per_link: vec![0; m],
            deliveries: Vec::new(),
            record_deliveries: true,
            log: None,
        }
    }

    /// Records every enqueue, service and delivery.
    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn with_control_bound(mut self, tau: u64) -> Self {
        self.control.latency_bound = Some(tau);
        self
    }

    pub fn event_log(&self) -> Option<&[LogEvent]> {
        self.log.as_deref()
    }

    pub fn router(&self) -> &R {
        &self.router
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn queued(&self) -> u64 {
        self.queued
    }

    pub fn view(&self) -> SimView<'_> {
        SimView {
            time: self.t,
            net: &self.net,
            packets: &self.packets,
            next_id: self.packets.len(),
            queued: self.queued,
        }
    }

    fn log(&mut self, kind: LogKind, link: Option<LinkId>, packet: usize) {
        if let Some(log) = &mut self.log {
            log.push(LogEvent {
                t: self.t,
                kind,
                link,
                packet,
            });
        }
    }

    /// Runs one step.
    pub fn step(&mut self, adversary: &mut dyn Adversary) -> Result<()> {
        let t = self.t;
        self.router.tick(t)?;
        if let Discipline::Deadline { params, .. } = &self.discipline {
            if t > 0 && t.is_multiple_of(params.interval) {
                self.release_interval(t / params.interval)?;
            }
        }
        let events = adversary.inject(t, &self.view())?;
        for event in events {
            if event.t != t {
                return Err(Error::Config(format!(
                    "adversary returned an event for step {} at step {t}",
                    event.t
                )));
            }
            self.inject(event)?;
        }
        let control = self.router.control_packets(t);
        self.control.max_per_window = self.control.max_per_window.max(control.len() as u64);
        for cp in control {
            self.inject_control(cp);
        }
        self.transmit()?;
        self.check_conservation()?;
        self.queue_series.push(self.queued);
        self.t += 1;
        Ok(())
    }

    fn inject(&mut self, event: TraceEvent) -> Result<()> {
        let path = self.router.route(event.t, &event)?;
        self.net.validate_path(&path, event.src, event.dst)?;
        let id = self.packets.len();
        self.injected += 1;
        let packet = LivePacket {
            id,
            inject_time: event.t,
            source: event.src,
            dest: event.dst,
            path,
            hop: 0,
            deadlines: None,
            control: false,
        };
        if packet.path.is_empty() {
            self.packets.push(None);
            self.finish(id, event.t, false);
            return Ok(());
        }
        self.packets.push(Some(Box::new(packet)));
        self.queued += 1;
        if matches!(self.discipline, Discipline::Deadline { .. }) {
            self.held.push(id);
        } else {
            self.enqueue(id, event.t);
        }
        Ok(())
    }

    fn inject_control(&mut self, cp: ControlPacket) {
        let id = self.packets.len();
        let path = cp.path().clone();
        self.control.injected += 1;
        if path.is_empty() {
            self.packets.push(None);
            self.control.delivered += 1;
            return;
        }
        let (source, dest) = (
            self.net.link(path.links[0]).tail,
            self.net.link(*path.links.last().expect("nonempty")).head,
        );
        self.packets.push(Some(Box::new(LivePacket {
            id,
            inject_time: self.t,
            source,
            dest,
            path,
            hop: 0,
            deadlines: None,
            control: true,
        })));
        self.enqueue(id, self.t);
    }

    fn enqueue(&mut self, id: usize, arrival: u64) {
        let p = self.packets[id].as_deref().expect("live packet");
        let link = p.current_link().expect("packet has links left");
        let rule = match self.discipline {
            Discipline::Greedy(rule) => rule,
            Discipline::Deadline { .. } => PriorityRule::Edf,
        };
        let key = rule.key(&QueuedPacket {
            id,
            inject_time: p.inject_time,
            arrival,
            remaining_hops: p.remaining_hops(),
            deadline: p.deadlines.as_ref().map(|d| d[p.hop]),
            control: p.control,
        });
        if p.control {
            self.control_queued[link] += 1;
        }
        let queue = &mut self.queues[link];
        queue.push(Reverse(key));
        let len = queue.len() as u64 - self.control_queued[link];
        self.max_queue_per_link[link] = self.max_queue_per_link[link].max(len);
        if let Some(log) = &mut self.log {
            log.push(LogEvent {
                t: arrival,
                kind: LogKind::Enqueue,
                link: Some(link),
                packet: id,
            });
        }
    }

    /// Assigns deadlines to the packets injected in `[(γ-1)M, γM)` and
    /// releases them into their first queues.
    fn release_interval(&mut self, gamma: u64) -> Result<()> {
        let Discipline::Deadline { params, mode, seed } = &self.discipline else {
            return Ok(());
        };
        let ids = std::mem::take(&mut self.held);
        let packets: Vec<Packet> = ids
            .iter()
            .map(|&id| {
                let p = self.packets[id].as_deref().expect("held packet");
                Packet {
                    id,
                    inject_time: p.inject_time,
                    source: p.source,
                    dest: p.dest,
                    path: Some(p.path.clone()),
                    deadlines: None,
                }
            })
            .collect();
        let assignment = match mode {
            DeadlineMode::Random => {
                assign_deadlines_random(&packets, params, gamma, seed.wrapping_add(gamma))?
            }
            DeadlineMode::Derand => assign_deadlines_derandomized(&packets, params, gamma)?,
        };
        let cert = verify_deadline_condition(&assignment);
        let stats = self.deadline.as_mut().expect("deadline stats");
        stats.intervals.push(IntervalCertificate {
            gamma,
            packets: packets.len(),
            holds: cert.holds,
            beta_condition: beta_condition_holds(&packets, params),
            max_log_h: assignment.max_final_log_h(),
        });
        for (id, pd) in ids.iter().zip(assignment.packets) {
            self.packets[*id]
                .as_deref_mut()
                .expect("held packet")
                .deadlines = Some(pd.deadlines);
        }
        for id in ids {
            self.enqueue(id, self.t);
        }
        Ok(())
    }

    fn transmit(&mut self) -> Result<()> {
        let t = self.t;
        let mut sent = Vec::new();
        for link in 0..self.queues.len() {
            let had_control = self.control_queued[link] > 0;
            let Some(Reverse(key)) = self.queues[link].pop() else {
                continue;
            };
            let p = self.packets[key.id]
                .as_deref()
                .expect("queued packet is live");
            if p.current_link() != Some(link) {
                return Err(Error::Invariant {
                    step: t,
                    what: format!(
                        "packet {} served by link {link} while waiting elsewhere",
                        key.id
                    ),
                });
            }
            if had_control && !p.control {
                return Err(Error::Invariant {
                    step: t,
                    what: format!("link {link} sent data while control packets waited"),
                });
            }
            if p.control {
                self.control_queued[link] -= 1;
            }
            sent.push((link, key.id));
        }
        let interval = self.interval_len();
        for (link, id) in sent {
            self.log(LogKind::Serve, Some(link), id);
            let p = self.packets[id]
                .as_deref_mut()
                .expect("sent packet is live");
            if let Some(deadlines) = &p.deadlines {
                if t > deadlines[p.hop] {
                    let stats = self.deadline.as_mut().expect("deadline stats");
                    stats.misses += 1;
                    let gamma = p.inject_time / interval + 1;
                    if stats.intervals.iter().any(|c| c.gamma == gamma && c.holds) {
                        stats.certified_misses += 1;
                    }
                }
            }
            p.hop += 1;
            if p.hop == p.path.len() {
                let control = p.control;
                let inject = p.inject_time;
                self.packets[id] = None;
                self.finish(id, inject, control);
            } else {
                self.enqueue(id, t + 1);
            }
        }
        Ok(())
    }

    fn interval_len(&self) -> u64 {
        match &self.discipline {
            Discipline::Deadline { params, .. } => params.interval,
            Discipline::Greedy(_) => u64::MAX,
        }
    }

    fn finish(&mut self, id: usize, inject: u64, control: bool) {
        let t = self.t;
        self.log(LogKind::Deliver, None, id);
        if control {
            self.control.delivered += 1;
            self.control.max_latency = self.control.max_latency.max(t - inject + 1);
            return;
        }
        let delay = t - inject + 1;
        self.delivered += 1;
        if let Some(stats) = &mut self.deadline {
            stats.max_delay = stats.max_delay.max(delay);
        }
        if self.record_deliveries {
            self.deliveries.push(Delivery {
                packet: id,
                inject,
                deliver: t,
                delay,
            });
        }
    }

    fn check_conservation(&mut self) -> Result<()> {
        let in_queues: u64 = self
            .queues
            .iter()
            .zip(&self.control_queued)
            .map(|(q, &c)| q.len() as u64 - c)
            .sum();
        let live = in_queues + self.held.len() as u64;
        self.queued = live;
        if self.delivered + live != self.injected {
            return Err(Error::Invariant {
                step: self.t,
                what: format!(
                    "conservation: injected {} != delivered {} + queued {}",
                    self.injected, self.delivered, live
                ),
            });
        }
        if self.control.delivered + self.control_queued.iter().sum::<u64>() != self.control.injected
        {
            return Err(Error::Invariant {
                step: self.t,
                what: "control packets were lost".into(),
            });
        }
        if let Some(bound) = self.control.latency_bound {
            if self.control.max_latency > bound {
                return Err(Error::Invariant {
                    step: self.t,
                    what: format!(
                        "control packet took {} steps, above n³ + mn² = {bound}",
                        self.control.max_latency
                    ),
                });
            }
        }
        Ok(())
    }

    /// Runs `options.horizon` injection steps (fewer if the adversary
    /// finishes early) and up to `options.drain`
    /// silent ones, stopping early when the queue cap is exceeded.
    pub fn run(
        mut self,
        adversary: &mut dyn Adversary,
        options: &RunOptions,
    ) -> Result<(SimReport, Self)> {
        self.record_deliveries = options.record_deliveries;
        let mut status = RunStatus::Completed;
        let over_cap = |q: u64| options.queue_cap.is_some_and(|cap| q > cap);
        while self.t < options.horizon && !adversary.finished() {
            self.step(adversary)?;
            if over_cap(self.queued) {
                status = RunStatus::CapReached { step: self.t - 1 };
                break;
            }
        }
        if status == RunStatus::Completed {
            let stop = self.t.saturating_add(options.drain);
            // Also flush held packets of the last M-interval.
            while self.t < stop && (self.queued > 0 || self.control_pending()) {
                self.step(&mut Silent)?;
            }
        }
        let report = self.report(status)?;
        Ok((report, self))
    }

    fn control_pending(&self) -> bool {
        self.control_queued.iter().any(|&c| c > 0)
    }

    pub fn report(&mut self, status: RunStatus) -> Result<SimReport> {
        let router = self.router.report(self.t)?;
        Ok(SimReport {
            status,
            steps: self.t,
            injected: self.injected,
            delivered: self.delivered,
            queued: self.queued,
            max_total_queue: self.queue_series.iter().copied().max().unwrap_or(0),
            queue_series: self.queue_series.clone(),
            max_queue_per_link: self.max_queue_per_link.clone(),
            deliveries: self.deliveries.clone(),
            control: self.control.clone(),
            deadline: self.deadline.clone(),
            router,
        })
    }
}
