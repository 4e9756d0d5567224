//! Injection generators.
//!
//! [`gen_random_admissible`] produces weakly admissible traces for property
//! tests. The instability adversaries drive network G, where FIFO (and NTG)
//! build ever larger queues whatever routes are chosen.
//!
//! Network G has two mirrored halves `j ∈ {0, 1}`, each with nodes `v_j`,
//! `w_j`, `u_j`, `u'_j` and links
//!
//! ```text
//! e_j : v_j -> w_j      f_j : w_j -> u_j      f'_j : w_j -> u'_j
//! g_j : u_j -> v_{1-j}  g'_j : u'_j -> v_{1-j}
//! ```
//!
//! so a packet from `v_j` to `u_{1-j}` crosses `e_j`, one of `f_j`/`f'_j`,
//! the matching `g`, then `e_{1-j}` and `f_{1-j}`. The only routing freedom
//! is the fork after `w_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admissibility::{check_strong, AdmissibilityReport};
use crate::engine::{Adversary, SimView};
use crate::error::{Error, Result};
use crate::model::{InjectionTrace, LinkId, Network, NodeId, Path, TraceEvent};

/// Random trace whose paths load every link with at most `floor(w r)` paths
/// per window `[kw, (k+1)w)`. Paths are node-simple random walks of
/// `1..=d_max` links; each window is filled until 32 consecutive draws no
/// longer fit.
pub fn gen_random_admissible(
    net: &Network,
    w: u64,
    r: f64,
    horizon: u64,
    d_max: usize,
    seed: u64,
) -> Result<InjectionTrace> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidParams(format!(
            "rate r = {r} must lie in (0, 1)"
        )));
    }
    if w == 0 || d_max == 0 {
        return Err(Error::InvalidParams("need w >= 1 and d_max >= 1".into()));
    }
    let cap = (w as f64 * r).floor() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<NodeId> = (0..net.n())
        .filter(|&v| !net.out_links(v).is_empty())
        .collect();
    let mut events = Vec::new();
    if cap == 0 || sources.is_empty() {
        return InjectionTrace::new(events);
    }
    let mut start = 0;
    while start < horizon {
        let len = w.min(horizon - start);
        let mut load = vec![0u64; net.m()];
        let mut batch = Vec::new();
        let mut misses = 0;
        while misses < 32 {
            let src = sources[rng.gen_range(0..sources.len())];
            let want = rng.gen_range(1..=d_max);
            let links = random_walk(net, src, want, &mut rng);
            if links.iter().any(|&e| load[e] >= cap) {
                misses += 1;
                continue;
            }
            misses = 0;
            for &e in &links {
                load[e] += 1;
            }
            let dst = net.link(*links.last().expect("walk has a link")).head;
            let t = start + rng.gen_range(0..len);
            batch.push(TraceEvent::with_path(t, src, dst, Path::new(links)));
        }
        batch.sort_by_key(|e| e.t);
        events.extend(batch);
        start += w;
    }
    InjectionTrace::new(events)
}

/// Node-simple random walk of up to `want` links (at least one).
fn random_walk(net: &Network, src: NodeId, want: usize, rng: &mut ChaCha8Rng) -> Vec<LinkId> {
    let mut visited = vec![false; net.n()];
    visited[src] = true;
    let mut at = src;
    let mut links = Vec::with_capacity(want);
    while links.len() < want {
        let options: Vec<LinkId> = net
            .out_links(at)
            .iter()
            .copied()
            .filter(|&e| !visited[net.link(e).head])
            .collect();
        if options.is_empty() {
            break;
        }
        let e = options[rng.gen_range(0..options.len())];
        links.push(e);
        at = net.link(e).head;
        visited[at] = true;
    }
    if links.is_empty() {
        // Only self-loops leave `src`.
        links.push(net.out_links(src)[0]);
    }
    links
}

/// The two-half network used by the instability constructions.
#[derive(Debug, Clone)]
pub struct NetworkG {
    net: Network,
}

impl Default for NetworkG {
    fn default() -> Self {
        Self::new()
    }
}

impl NetworkG {
    pub fn new() -> Self {
        let mut spec = Vec::new();
        for j in 0..2 {
            let (v, w, u, u2) = (4 * j, 4 * j + 1, 4 * j + 2, 4 * j + 3);
            let next_v = 4 * (1 - j);
            spec.push((v, w, format!("e{j}")));
            spec.push((w, u, format!("f{j}")));
            spec.push((w, u2, format!("f'{j}")));
            spec.push((u, next_v, format!("g{j}")));
            spec.push((u2, next_v, format!("g'{j}")));
        }
        Self {
            net: Network::new(8, spec).expect("static topology"),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn v(&self, j: usize) -> NodeId {
        4 * j
    }
    pub fn w(&self, j: usize) -> NodeId {
        4 * j + 1
    }
    pub fn u(&self, j: usize) -> NodeId {
        4 * j + 2
    }
    pub fn u_prime(&self, j: usize) -> NodeId {
        4 * j + 3
    }
    pub fn e(&self, j: usize) -> LinkId {
        5 * j
    }
    pub fn f(&self, j: usize) -> LinkId {
        5 * j + 1
    }
    pub fn f_prime(&self, j: usize) -> LinkId {
        5 * j + 2
    }
    pub fn g(&self, j: usize) -> LinkId {
        5 * j + 3
    }
    pub fn g_prime(&self, j: usize) -> LinkId {
        5 * j + 4
    }

    /// `v_j -> u_{1-j}` through `f_j` (`upper`) or `f'_j`.
    fn crossing(&self, j: usize, upper: bool) -> Path {
        let (f, g) = if upper {
            (self.f(j), self.g(j))
        } else {
            (self.f_prime(j), self.g_prime(j))
        };
        Path::new(vec![self.e(j), f, g, self.e(1 - j), self.f(1 - j)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstabilityKind {
    /// Three subphases; the carried set waits in the queue of `e_j`.
    Fifo,
    /// No third subphase; the carried set crosses `e_j` early in the phase.
    Ntg,
}

impl InstabilityKind {
    /// Guaranteed per-phase growth factor at rate `r`.
    pub fn growth(self, r: f64) -> f64 {
        match self {
            InstabilityKind::Fifo => r.powi(3) + r.powi(3) / (r + 1.0),
            InstabilityKind::Ntg => 2.0 * r * r,
        }
    }

    fn check_rate(self, r: f64) -> Result<()> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidParams(format!(
                "rate r = {r} must lie in (0, 1)"
            )));
        }
        if self == InstabilityKind::Ntg && r <= std::f64::consts::FRAC_1_SQRT_2 {
            return Err(Error::InvalidParams(format!(
                "the NTG construction needs r > 1/sqrt(2), got {r}"
            )));
        }
        Ok(())
    }
}

/// What happened in one phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    /// Half whose `v` receives the phase's main injections.
    pub half: usize,
    pub start: u64,
    pub s: u64,
    /// `|X|`, `|X'|` (FIFO only) and `|Y|`.
    pub x: u64,
    pub x_prime: Option<u64>,
    pub y: u64,
    /// Steps the third subphase ran past `|X'| + |Y|` until `X'` and `Y`
    /// had merged into the queue of `e_b`.
    pub merge_wait: u64,
    pub end: u64,
    /// Size of the set carried into the next phase.
    pub s_next: u64,
    /// Data packets in the network at the end of the phase.
    pub queued_at_end: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sub {
    One,
    Two,
    Three,
}

/// Whether a rate-`r` stream injects at step `k`. All streams share this
/// clock, so any set of streams that never overlap in time on a link injects
/// at most `floor(r (t + T)) - floor(r t) <= rT + 1` paths in `[t, t + T)`.
pub fn rate_tick(r: f64, k: u64) -> bool {
    (r * (k + 1) as f64).floor() > (r * k as f64).floor()
}

/// Quantities the phase schedule needs from the run.
enum Measure<'a> {
    /// `|X'|`: packets of `X` that have not crossed `f`/`f'` yet.
    XPrime(&'a [usize]),
    /// Size of the next carried set.
    Carried { half: usize },
}

/// The phase schedule of the instability constructions.
#[derive(Debug, Clone)]
pub struct InstabilityAdversary {
    g: NetworkG,
    kind: InstabilityKind,
    r: f64,
    s0: u64,
    phases: usize,
    adaptive: bool,
    started: bool,
    finished: bool,
    phase: usize,
    half: usize,
    s: u64,
    start: u64,
    sub: Sub,
    sub_end: u64,
    x_ids: Vec<usize>,
    y_ids: Vec<usize>,
    merge_wait: u64,
    wait_for_merge: bool,
    x_prime: Option<u64>,
    y: u64,
    records: Vec<PhaseRecord>,
}

impl InstabilityAdversary {
    /// Adaptive adversary: subphase lengths and the carried-set sizes are
    /// read from the simulation it is coupled to.
    pub fn new(kind: InstabilityKind, r: f64, s0: u64, phases: usize) -> Result<Self> {
        kind.check_rate(r)?;
        if s0 == 0 {
            return Err(Error::InvalidParams("s0 must be positive".into()));
        }
        Ok(Self {
            g: NetworkG::new(),
            kind,
            r,
            s0,
            phases,
            adaptive: true,
            started: false,
            finished: phases == 0,
            phase: 0,
            half: 0,
            s: s0,
            start: 0,
            sub: Sub::One,
            sub_end: s0,
            x_ids: Vec::new(),
            y_ids: Vec::new(),
            merge_wait: 0,
            wait_for_merge: false,
            x_prime: None,
            y: 0,
            records: Vec::new(),
        })
    }

    /// Uses the analytic lower bounds instead of observed sizes.
    pub fn non_adaptive(mut self) -> Self {
        self.adaptive = false;
        self
    }

    /// Holds subphase 3 open until every X and Y packet has reached the
    /// queue of the next crossing link, and counts only packets waiting
    /// there as the carried set.
    pub fn with_merge_wait(mut self, on: bool) -> Self {
        self.wait_for_merge = on;
        self
    }

    pub fn network(&self) -> &NetworkG {
        &self.g
    }

    pub fn records(&self) -> &[PhaseRecord] {
        &self.records
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Window and rate under which the certificate paths are strongly
    /// admissible: rate-`r` streams with burst one plus the initial burst of
    /// `s0` fit under `r + (s0 + 1)/w` for `w = 100 (s0 + 1)`.
    pub fn admissibility_params(&self) -> (u64, f64) {
        let w = 100 * (self.s0 + 1);
        (w, self.r + (self.s0 + 1) as f64 / w as f64)
    }

    fn measure(&self, m: Measure<'_>, view: Option<&SimView<'_>>) -> u64 {
        let r = self.r;
        match (m, view) {
            (Measure::XPrime(ids), Some(view)) => ids
                .iter()
                .filter(|&&id| view.packet(id).is_some_and(|p| p.hop <= 1))
                .count() as u64,
            (Measure::XPrime(_), None) => (r * r * self.s as f64 / (r + 1.0)).floor() as u64,
            (Measure::Carried { half }, Some(view)) => {
                let (e, u) = (self.g.e(half), self.g.u(half));
                view.live_packets()
                    .filter(|p| p.dest == u)
                    .filter(|p| match self.kind {
                        InstabilityKind::Fifo if self.wait_for_merge => p.current_link() == Some(e),
                        _ => p.path.links[p.hop..].contains(&e),
                    })
                    .count() as u64
            }
            (Measure::Carried { .. }, None) => (self.kind.growth(r) * self.s as f64).floor() as u64,
        }
    }

    /// Advances the schedule to step `t` and returns its injections.
    fn events_at(&mut self, t: u64, next_id: usize, view: Option<&SimView<'_>>) -> Vec<TraceEvent> {
        let mut out = Vec::new();
        if self.finished {
            return out;
        }
        let g = self.g.clone();
        if !self.started {
            self.started = true;
            let path = Path::new(vec![g.e(0), g.f(0)]);
            for _ in 0..self.s0 {
                out.push(TraceEvent::with_path(t, g.v(0), g.u(0), path.clone()));
            }
            self.begin_phase(t, self.s0, 0);
        }
        while t >= self.sub_end && !self.finished {
            self.close_subphase(view);
        }
        if self.finished || !rate_tick(self.r, t) {
            return out;
        }
        let (a, b) = (self.half, 1 - self.half);
        match self.sub {
            Sub::One => {
                self.x_ids.push(next_id + out.len());
                out.push(TraceEvent::with_path(
                    t,
                    g.v(a),
                    g.u(b),
                    g.crossing(a, false),
                ));
                out.push(TraceEvent::with_path(
                    t,
                    g.w(a),
                    g.u(a),
                    Path::new(vec![g.f(a)]),
                ));
            }
            Sub::Two => {
                self.y += 1;
                self.y_ids.push(next_id + out.len());
                out.push(TraceEvent::with_path(
                    t,
                    g.v(a),
                    g.u(b),
                    g.crossing(a, true),
                ));
                out.push(TraceEvent::with_path(
                    t,
                    g.w(a),
                    g.u_prime(a),
                    Path::new(vec![g.f_prime(a)]),
                ));
            }
            Sub::Three => {
                out.push(TraceEvent::with_path(
                    t,
                    g.v(b),
                    g.u(b),
                    Path::new(vec![g.e(b), g.f(b)]),
                ));
            }
        }
        out
    }

    fn begin_phase(&mut self, t: u64, s: u64, half: usize) {
        self.half = half;
        self.s = s;
        self.start = t;
        self.sub = Sub::One;
        self.sub_end = t + s;
        self.x_ids.clear();
        self.y_ids.clear();
        self.merge_wait = 0;
        self.x_prime = None;
        self.y = 0;
    }

    fn close_subphase(&mut self, view: Option<&SimView<'_>>) {
        let end = self.sub_end;
        match self.sub {
            Sub::One => {
                self.sub = Sub::Two;
                self.sub_end = end + (self.r * self.s as f64).floor() as u64;
            }
            Sub::Two if self.kind == InstabilityKind::Fifo => {
                let x_prime = self.measure(Measure::XPrime(&self.x_ids), view);
                self.x_prime = Some(x_prime);
                let y = if view.is_some() {
                    self.y
                } else {
                    (self.r * self.r * self.s as f64).floor() as u64
                };
                self.sub = Sub::Three;
                self.sub_end = end + x_prime + y;
            }
            Sub::Three if self.wait_for_merge && view.is_some_and(|v| self.merging(v)) => {
                // Wait until X' and Y have all joined the queue of e_b.
                self.merge_wait += 1;
                self.sub_end = end + 1;
            }
            Sub::Two | Sub::Three => self.end_phase(end, view),
        }
    }

    /// Whether some packet of `X` or `Y` has not reached `e_b` yet.
    fn merging(&self, view: &SimView<'_>) -> bool {
        self.x_ids
            .iter()
            .chain(&self.y_ids)
            .any(|&id| view.packet(id).is_some_and(|p| p.hop < 3))
    }

    fn end_phase(&mut self, end: u64, view: Option<&SimView<'_>>) {
        let next_half = 1 - self.half;
        let s_next = self.measure(Measure::Carried { half: next_half }, view);
        self.records.push(PhaseRecord {
            phase: self.phase,
            half: self.half,
            start: self.start,
            s: self.s,
            x: self.x_ids.len() as u64,
            x_prime: self.x_prime,
            y: self.y,
            merge_wait: self.merge_wait,
            end,
            s_next,
            queued_at_end: view.map_or(0, |v| v.queued_total()),
        });
        self.phase += 1;
        if self.phase == self.phases || s_next == 0 {
            self.finished = true;
        } else {
            self.begin_phase(end, s_next, next_half);
        }
    }
}

impl Adversary for InstabilityAdversary {
    fn inject(&mut self, t: u64, view: &SimView<'_>) -> Result<Vec<TraceEvent>> {
        let view = self.adaptive.then_some(view);
        Ok(self.events_at(t, view.map_or(0, |v| v.next_id()), view))
    }

    fn finished(&self) -> bool {
        self.finished
    }
}

fn gen_instability(
    kind: InstabilityKind,
    r: f64,
    s0: u64,
    phases: usize,
) -> Result<(InjectionTrace, Vec<PhaseRecord>)> {
    let mut adv = InstabilityAdversary::new(kind, r, s0, phases)?.non_adaptive();
    let mut events = Vec::new();
    let mut t = 0;
    while !adv.finished() {
        let next = events.len();
        events.extend(adv.events_at(t, next, None));
        t += 1;
    }
    let trace = InjectionTrace::new(events)?;
    let (w, rate) = adv.admissibility_params();
    let report = check_strong(&trace, w, rate)?;
    if !report.admissible {
        return Err(Error::InvalidParams(format!(
            "generated trace is not ({w}, {rate})-admissible: {report:?}"
        )));
    }
    Ok((trace, adv.records().to_vec()))
}

/// Non-adaptive FIFO construction on network G, with the analytic lower
/// bounds standing in for the observed set sizes. Events carry certificate
/// paths; routers under test may ignore them.
pub fn gen_fifo_instability(
    r: f64,
    s0: u64,
    phases: usize,
) -> Result<(InjectionTrace, Vec<PhaseRecord>)> {
    gen_instability(InstabilityKind::Fifo, r, s0, phases)
}

/// Non-adaptive NTG construction (no third subphase).
pub fn gen_ntg_instability(
    r: f64,
    s0: u64,
    phases: usize,
) -> Result<(InjectionTrace, Vec<PhaseRecord>)> {
    gen_instability(InstabilityKind::Ntg, r, s0, phases)
}

/// Strong admissibility of an instability trace under
/// [`InstabilityAdversary::admissibility_params`].
pub fn check_instability_trace(
    trace: &InjectionTrace,
    r: f64,
    s0: u64,
) -> Result<AdmissibilityReport> {
    let w = 100 * (s0 + 1);
    check_strong(trace, w, r + (s0 + 1) as f64 / w as f64)
}
