//! Source routing on a directed ring with `c` parallel links per hop.
//!
//! The links labelled `j` form the `j`-th single ring, and the `c` single
//! rings are link disjoint. Routing a packet means choosing one of them.
//! Time is cut into intervals of `W` steps; within one interval the routers
//! keep every link below `(1 - ε²) W` paths, where `ε = 1 - r`.
//!
//! The derandomized routers greedily minimise the pessimistic estimator
//!
//! ```text
//! h = Σ_e (1 + ε)^{k_e} (1 + ε/c)^{u_e} / (1 + ε)^{(1 + ε) r W}
//! ```
//!
//! where `k_e` counts decided packets on link `e` and `u_e` counts undecided
//! packets (or ghosts) crossing the hop of `e`. Each undecided packet lands
//! on a given link of its hops with probability `1/c`, and `1 + ε/c` is the
//! expectation of `(1 + ε)^X` for that event, so `h` is the conditional
//! expectation of an upper bound on the overload indicator and never grows
//! under the greedy choice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinkId, Network, NodeId, Path};
use crate::routing::log_sum_exp;

/// Relative slack used when asserting that `h` does not increase.
const H_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ParallelRing {
    n: usize,
    c: usize,
    net: Network,
}

impl ParallelRing {
    /// Nodes `0..n`, hop `i` goes from `i` to `i + 1 mod n`. Link `j * n + i`
    /// is ring `j`'s copy of hop `i` and carries label `j`.
    pub fn new(n: usize, c: usize) -> Result<Self> {
        if n < 2 || c < 1 {
            return Err(Error::InvalidParams(format!(
                "a parallel ring needs n >= 2 and c >= 1, got n = {n}, c = {c}"
            )));
        }
        let spec = (0..c).flat_map(|j| (0..n).map(move |i| (i, (i + 1) % n, j.to_string())));
        let net = Network::new(n, spec)?;
        Ok(Self { n, c, net })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn link(&self, ring: usize, hop: usize) -> LinkId {
        ring * self.n + hop
    }

    pub fn hop_of(&self, link: LinkId) -> usize {
        link % self.n
    }

    /// Hops `src, src + 1, ..., dst - 1` (mod `n`).
    pub fn hops(&self, src: NodeId, dst: NodeId) -> impl Iterator<Item = usize> + '_ {
        let len = (dst + self.n - src) % self.n;
        (0..len).map(move |k| (src + k) % self.n)
    }

    pub fn path(&self, ring: usize, src: NodeId, dst: NodeId) -> Path {
        Path::new(self.hops(src, dst).map(|h| self.link(ring, h)).collect())
    }

    fn check_pair(&self, src: NodeId, dst: NodeId) -> Result<()> {
        if src >= self.n || dst >= self.n || src == dst {
            return Err(Error::InvalidParams(format!(
                "ring packet {src} -> {dst} needs distinct nodes below {}",
                self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    pub rate: f64,
    /// `ε = 1 - r`.
    pub ring_epsilon: f64,
    pub beta: f64,
    /// Interval length `W = ceil(3 / (r ε²) · ln(n c / β))`.
    pub window: u64,
    /// `R = 1 - ε²`.
    pub target_rate: f64,
}

impl RingParams {
    pub fn compute(r: f64, n: usize, c: usize, beta: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidParams(format!(
                "rate r = {r} must lie in (0, 1)"
            )));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParams(format!(
                "beta = {beta} must lie in (0, 1)"
            )));
        }
        let eps = 1.0 - r;
        let window = (3.0 / (r * eps * eps) * ((n * c) as f64 / beta).ln()).ceil() as u64;
        Ok(Self {
            rate: r,
            ring_epsilon: eps,
            beta,
            window,
            target_rate: 1.0 - eps * eps,
        })
    }

    /// Largest admissible per-link load in one interval, `floor(R W)`.
    pub fn load_bound(&self) -> u64 {
        (self.target_rate * self.window as f64).floor() as u64
    }

    /// Chernoff threshold `(1 + ε) r W`.
    pub fn overload_threshold(&self) -> f64 {
        (1.0 + self.ring_epsilon) * self.rate * self.window as f64
    }

    /// Ghosts per hop at the start of an interval, `floor(c r W)`.
    pub fn ghosts_per_hop(&self, c: usize) -> u64 {
        (c as f64 * self.rate * self.window as f64).floor() as u64
    }

    pub fn interval_of(&self, t: u64) -> u64 {
        t / self.window
    }
}

/// Uniform, independent ring choice.
#[derive(Debug, Clone)]
pub struct RandomRingRouter {
    c: usize,
    rng: ChaCha8Rng,
}

impl RandomRingRouter {
    pub fn new(c: usize, seed: u64) -> Self {
        Self {
            c,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn route_random(&mut self) -> usize {
        self.rng.gen_range(0..self.c)
    }
}

/// Decided link loads and undecided hop counts of one interval.
#[derive(Debug, Clone)]
pub struct RingEstimator {
    n: usize,
    c: usize,
    log_decided: f64,
    log_undecided: f64,
    log_threshold: f64,
    decided: Vec<u64>,
    ghosts: Vec<u64>,
    undecided: Vec<u64>,
}

impl RingEstimator {
    fn new(ring: &ParallelRing, params: &RingParams, ghosts: u64) -> Self {
        let eps = params.ring_epsilon;
        Self {
            n: ring.n,
            c: ring.c,
            log_decided: eps.ln_1p(),
            log_undecided: (eps / ring.c as f64).ln_1p(),
            log_threshold: params.overload_threshold() * eps.ln_1p(),
            decided: vec![0; ring.n * ring.c],
            ghosts: vec![ghosts; ring.n],
            undecided: vec![0; ring.n],
        }
    }

    /// `ln h` of the current state.
    pub fn log_h(&self) -> f64 {
        log_sum_exp((0..self.n * self.c).map(|e| self.log_term(e, None)))
    }

    fn log_term(&self, e: LinkId, moved: Option<(usize, &[bool])>) -> f64 {
        let hop = e % self.n;
        let mut k = self.decided[e];
        let mut u = self.ghosts[hop] + self.undecided[hop];
        if let Some((ring, on_path)) = moved {
            if on_path[hop] {
                u -= 1;
                if e / self.n == ring {
                    k += 1;
                }
            }
        }
        k as f64 * self.log_decided + u as f64 * self.log_undecided - self.log_threshold
    }

    pub fn decided(&self) -> &[u64] {
        &self.decided
    }

    pub fn ghosts(&self) -> &[u64] {
        &self.ghosts
    }

    fn add_undecided(&mut self, hops: &[bool]) {
        for (u, &on) in self.undecided.iter_mut().zip(hops) {
            *u += u64::from(on);
        }
    }

    /// Replaces one ghost per crossed hop by the (undecided) real packet.
    fn swap_ghosts(&mut self, hops: &[bool]) -> Result<()> {
        if let Some(hop) = (0..self.n).find(|&h| hops[h] && self.ghosts[h] == 0) {
            return Err(Error::GhostUnderflow { hop });
        }
        for h in (0..self.n).filter(|&h| hops[h]) {
            self.ghosts[h] -= 1;
            self.undecided[h] += 1;
        }
        Ok(())
    }

    /// Fixes an undecided packet on the ring minimising `h` (lowest index on
    /// ties) and returns `(ring, ln h after)`.
    fn decide(&mut self, hops: &[bool]) -> (usize, f64) {
        let (ring, log_h) = (0..self.c)
            .map(|j| {
                let lh =
                    log_sum_exp((0..self.n * self.c).map(|e| self.log_term(e, Some((j, hops)))));
                (j, lh)
            })
            .fold((0, f64::INFINITY), |best, cand| {
                if cand.1 < best.1 {
                    cand
                } else {
                    best
                }
            });
        for h in (0..self.n).filter(|&h| hops[h]) {
            self.undecided[h] -= 1;
            self.decided[ring * self.n + h] += 1;
        }
        (ring, log_h)
    }

    fn discard_ghosts(&mut self) {
        self.ghosts.iter_mut().for_each(|g| *g = 0);
    }

    fn max_load(&self) -> u64 {
        self.decided.iter().copied().max().unwrap_or(0)
    }
}

fn hop_mask(ring: &ParallelRing, src: NodeId, dst: NodeId) -> Vec<bool> {
    let mut mask = vec![false; ring.n];
    for h in ring.hops(src, dst) {
        mask[h] = true;
    }
    mask
}

/// Result of routing one batch of packets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingRouting {
    pub rings: Vec<usize>,
    /// `ln h` before any decision and after each one.
    pub log_h: Vec<f64>,
    pub max_load: u64,
}

impl RingRouting {
    /// Decisions at which `h` grew beyond floating-point noise.
    pub fn h_increases(&self) -> Vec<usize> {
        increases(&self.log_h)
    }
}

fn increases(log_h: &[f64]) -> Vec<usize> {
    log_h
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + H_SLACK * w[0].abs().max(1.0))
        .map(|(i, _)| i)
        .collect()
}

/// Offline derandomization of one interval's packets, decided in order.
pub fn route_offline_derand(
    ring: &ParallelRing,
    params: &RingParams,
    packets: &[(NodeId, NodeId)],
) -> Result<RingRouting> {
    let mut est = RingEstimator::new(ring, params, 0);
    let masks = packets
        .iter()
        .map(|&(s, d)| {
            ring.check_pair(s, d)?;
            Ok(hop_mask(ring, s, d))
        })
        .collect::<Result<Vec<_>>>()?;
    for mask in &masks {
        est.add_undecided(mask);
    }
    let mut log_h = vec![est.log_h()];
    let mut rings = Vec::with_capacity(packets.len());
    for mask in &masks {
        let (j, lh) = est.decide(mask);
        rings.push(j);
        log_h.push(lh);
    }
    Ok(RingRouting {
        rings,
        log_h,
        max_load: est.max_load(),
    })
}

/// Per-interval summary of the online router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub interval: u64,
    pub packets: u64,
    pub max_load: u64,
    pub log_h_start: f64,
    /// `ln h` after the leftover ghosts are discarded.
    pub log_h_end: f64,
}

/// One online decision with the estimator around the ghost swap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineDecision {
    pub ring: usize,
    pub log_h_before_swap: f64,
    pub log_h_after_swap: f64,
    pub log_h_after: f64,
}

/// Online derandomization with a pool of `floor(c r W)` ghosts per hop.
#[derive(Debug, Clone)]
pub struct OnlineRingRouter {
    ring: ParallelRing,
    params: RingParams,
    interval: u64,
    packets: u64,
    est: RingEstimator,
    log_h_start: f64,
    summaries: Vec<IntervalSummary>,
}

impl OnlineRingRouter {
    pub fn new(ring: ParallelRing, params: RingParams) -> Self {
        let est = RingEstimator::new(&ring, &params, params.ghosts_per_hop(ring.c));
        let log_h_start = est.log_h();
        Self {
            ring,
            params,
            interval: 0,
            packets: 0,
            est,
            log_h_start,
            summaries: Vec::new(),
        }
    }

    pub fn ring(&self) -> &ParallelRing {
        &self.ring
    }

    pub fn params(&self) -> &RingParams {
        &self.params
    }

    pub fn estimator(&self) -> &RingEstimator {
        &self.est
    }

    /// Summaries of every closed interval.
    pub fn summaries(&self) -> &[IntervalSummary] {
        &self.summaries
    }

    /// Closes intervals until `t` falls into the current one.
    pub fn advance_to(&mut self, t: u64) {
        while self.params.interval_of(t) > self.interval {
            self.close_interval();
        }
    }

    /// Closes the current interval, discarding its leftover ghosts.
    pub fn close_interval(&mut self) {
        self.est.discard_ghosts();
        self.summaries.push(IntervalSummary {
            interval: self.interval,
            packets: self.packets,
            max_load: self.est.max_load(),
            log_h_start: self.log_h_start,
            log_h_end: self.est.log_h(),
        });
        self.interval += 1;
        self.packets = 0;
        self.est = RingEstimator::new(
            &self.ring,
            &self.params,
            self.params.ghosts_per_hop(self.ring.c),
        );
        self.log_h_start = self.est.log_h();
    }

    /// Chooses a ring for a packet injected at `t`.
    pub fn route(&mut self, t: u64, src: NodeId, dst: NodeId) -> Result<OnlineDecision> {
        self.ring.check_pair(src, dst)?;
        self.advance_to(t);
        let mask = hop_mask(&self.ring, src, dst);
        let log_h_before_swap = self.est.log_h();
        self.est.swap_ghosts(&mask)?;
        let log_h_after_swap = self.est.log_h();
        let (ring, log_h_after) = self.est.decide(&mask);
        self.packets += 1;
        Ok(OnlineDecision {
            ring,
            log_h_before_swap,
            log_h_after_swap,
            log_h_after,
        })
    }
}

/// Per-interval maximum link load of a routed packet stream.
pub fn interval_max_loads(
    ring: &ParallelRing,
    params: &RingParams,
    packets: &[(u64, NodeId, NodeId)],
    rings: &[usize],
) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let mut loads = vec![0u64; ring.n * ring.c];
    let mut current = 0;
    for (&(t, s, d), &j) in packets.iter().zip(rings) {
        let interval = params.interval_of(t);
        while current < interval {
            out.push(loads.iter().copied().max().unwrap_or(0));
            loads.iter_mut().for_each(|l| *l = 0);
            current += 1;
        }
        for e in ring.path(j, s, d).links {
            loads[e] += 1;
        }
    }
    out.push(loads.iter().copied().max().unwrap_or(0));
    out
}

/// Random ring traffic with at most `floor(c r W)` packets crossing each hop
/// per interval, which keeps the online router's ghost pool sufficient.
/// `fill` in `(0, 1]` scales the per-hop budget that the generator aims for.
pub fn gen_ring_traffic(
    ring: &ParallelRing,
    params: &RingParams,
    intervals: u64,
    fill: f64,
    seed: u64,
) -> Vec<(u64, NodeId, NodeId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = params.ghosts_per_hop(ring.c);
    let target = (cap as f64 * fill.clamp(0.0, 1.0)).floor() as u64;
    let mut out = Vec::new();
    for interval in 0..intervals {
        let mut used = vec![0u64; ring.n];
        let mut batch = Vec::new();
        let mut misses = 0;
        while misses < 64 && used.iter().any(|&u| u < target) {
            let src = rng.gen_range(0..ring.n);
            let len = rng.gen_range(1..ring.n);
            let dst = (src + len) % ring.n;
            if ring.hops(src, dst).any(|h| used[h] >= target) {
                misses += 1;
                continue;
            }
            misses = 0;
            for h in ring.hops(src, dst) {
                used[h] += 1;
            }
            let t = interval * params.window + rng.gen_range(0..params.window);
            batch.push((t, src, dst));
        }
        batch.sort_by_key(|&(t, _, _)| t);
        out.extend(batch);
    }
    out
}
