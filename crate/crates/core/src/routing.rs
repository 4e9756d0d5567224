//! Online congestion-based source routing.
//!
//! Every link carries a congestion value `c(e)`, initialised to `delta` at the
//! start of each phase. Packets are routed on shortest paths with respect to
//! `c`, and `c` grows multiplicatively with the number of paths routed
//! through the link. A phase lasts `t` windows of `w` steps, after which the
//! congestion is reset. Three update schedules are supported:
//!
//! * [`Variant::PerPacket`]: `c(e) <- c(e) (1 + mu/w)` on every link of each
//!   routed path, immediately.
//! * [`Variant::Batched`]: congestion is frozen during a window; at its end
//!   `c(e) <- c(e) (1 + N(e) mu/w)` where `N(e)` counts the window's paths.
//! * [`Variant::InBand`]: as `Batched`, but the counts reach the links one
//!   window late: `c_{i+1} = c_i + c_{i-1} N_i mu/w`.
//!
//! Congestion values are kept as natural logarithms. For the batched variants
//! `delta` is far below the smallest positive `f64` once `m` grows beyond a
//! handful of links.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinkId, Network, NodeId, Path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    PerPacket,
    Batched,
    InBand,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PerPacket => "perpacket",
            Variant::Batched => "batched",
            Variant::InBand => "inband",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perpacket" => Ok(Variant::PerPacket),
            "batched" => Ok(Variant::Batched),
            "inband" => Ok(Variant::InBand),
            other => Err(Error::InvalidParams(format!(
                "unknown routing variant `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingParams {
    /// Adversary rate `r`.
    pub rate: f64,
    /// Target rate `R`, with `r < R < 1`.
    pub target_rate: f64,
    /// Window length `w`.
    pub window: u64,
    /// Link count `m`.
    pub links: usize,
    pub variant: Variant,
    pub mu: f64,
    /// `ln(delta)`; `delta` itself may underflow.
    pub log_delta: f64,
    /// Windows per phase, `t`.
    pub windows_per_phase: u64,
}

impl RoutingParams {
    /// Closed-form parameters:
    ///
    /// ```text
    /// mu    = k (1 - (r/R)^(1/3)),  k = 1, 1/m, 1/(2m) per variant
    /// delta = ((1 - r mu) / m)^(1 / (r mu))
    /// t     = floor((1 - r mu)/(r mu) * ln((1 - r mu)/(m delta))) + 1
    /// ```
    pub fn compute(r: f64, target: f64, w: u64, m: usize, variant: Variant) -> Result<Self> {
        if !(r > 0.0 && r < target && target < 1.0) {
            return Err(Error::InvalidParams(format!(
                "rates must satisfy 0 < r < R < 1, got r = {r}, R = {target}"
            )));
        }
        if m == 0 || w == 0 {
            return Err(Error::InvalidParams("need m >= 1 and w >= 1".into()));
        }
        let base = 1.0 - (r / target).cbrt();
        let mu = match variant {
            Variant::PerPacket => base,
            Variant::Batched => base / m as f64,
            Variant::InBand => base / (2.0 * m as f64),
        };
        let rmu = r * mu;
        let log_ratio = ((1.0 - rmu) / m as f64).ln();
        let log_delta = log_ratio / rmu;
        let t = ((1.0 - rmu) / rmu * (log_ratio - log_delta)).floor() + 1.0;
        let params = Self {
            rate: r,
            target_rate: target,
            window: w,
            links: m,
            variant,
            mu,
            log_delta,
            windows_per_phase: t as u64,
        };
        debug_assert!(mu > 0.0 && mu < 1.0 && log_delta < 0.0 && t >= 1.0);
        Ok(params)
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }

    pub fn rmu(&self) -> f64 {
        self.rate * self.mu
    }

    /// Steps per phase, `t * w`.
    pub fn phase_len(&self) -> u64 {
        self.windows_per_phase * self.window
    }

    /// Per-link, per-phase path bound `t w R`.
    pub fn load_bound(&self) -> f64 {
        self.windows_per_phase as f64 * self.window as f64 * self.target_rate
    }
}

/// `ln(sum(exp(x)))`, exact for a single term.
pub(crate) fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-link congestion plus window and phase counters.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionState {
    log_c: Vec<f64>,
    /// `c_{i-1}` (in-band only).
    log_prev_c: Vec<f64>,
    /// `N(e)` for the current window.
    pending: Vec<u64>,
    /// Counts of the previous window, not yet applied (in-band only).
    lagged: Vec<u64>,
    window_index: u64,
    phase_index: u64,
    /// Last in-phase window whose paths are reflected in `c`.
    applied_through: u64,
}

impl CongestionState {
    fn fresh(params: &RoutingParams) -> Self {
        let m = params.links;
        Self {
            log_c: vec![params.log_delta; m],
            log_prev_c: vec![params.log_delta; m],
            pending: vec![0; m],
            lagged: vec![0; m],
            window_index: 1,
            phase_index: 0,
            applied_through: 0,
        }
    }

    pub fn congestion(&self, link: LinkId) -> f64 {
        self.log_c[link].exp()
    }

    pub fn log_congestion(&self, link: LinkId) -> f64 {
        self.log_c[link]
    }

    pub fn log_congestions(&self) -> &[f64] {
        &self.log_c
    }

    /// `ln D`, where `D = sum_e c(e)`.
    pub fn log_total(&self) -> f64 {
        log_sum_exp(self.log_c.iter().copied())
    }

    /// In-phase window index, `1..=t`.
    pub fn window_index(&self) -> u64 {
        self.window_index
    }

    pub fn phase_index(&self) -> u64 {
        self.phase_index
    }

    pub fn pending_counts(&self) -> &[u64] {
        &self.pending
    }

    /// Highest in-phase window whose injections have reached `c` (0 = none).
    pub fn applied_through(&self) -> u64 {
        self.applied_through
    }

    /// Shortest-path weights `c(e) / max c`, immune to the scale of `delta`.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.log_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.log_c.iter().map(|&l| (l - max).exp()).collect()
    }
}

/// What one completed (or, for [`SourceRouter::partial_diagnostics`], running)
/// phase looked like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagnostics {
    pub phase: u64,
    /// `ln D_0 = ln(m delta)`.
    pub log_d0: f64,
    /// `ln D_i` after each window `i = 1..`.
    pub log_d_per_window: Vec<f64>,
    /// Largest per-link load so far in the phase, after each window.
    pub max_load_per_window: Vec<u64>,
    /// Paths routed through each link during the phase.
    pub loads: Vec<u64>,
    /// `alpha_i / D_i` per window, when alpha tracking is enabled.
    pub alpha_over_d: Vec<f64>,
}

impl PhaseDiagnostics {
    pub fn max_load(&self) -> u64 {
        self.loads.iter().copied().max().unwrap_or(0)
    }

    pub fn d(&self, window: usize) -> f64 {
        self.log_d_per_window[window].exp()
    }

    /// `ln D_t`.
    pub fn final_log_d(&self) -> f64 {
        self.log_d_per_window.last().copied().unwrap_or(self.log_d0)
    }

    /// Windows `i` (1-based) breaking `D_i <= D_{i-1} / (1 - r mu)` beyond a
    /// relative slack.
    pub fn growth_violations(&self, rmu: f64, rel_slack: f64) -> Vec<usize> {
        let limit = -(1.0 - rmu).ln() + rel_slack.ln_1p();
        let mut prev = self.log_d0;
        let mut out = Vec::new();
        for (i, &d) in self.log_d_per_window.iter().enumerate() {
            if d - prev > limit {
                out.push(i + 1);
            }
            prev = d;
        }
        out
    }

    pub fn is_non_decreasing(&self) -> bool {
        let mut prev = self.log_d0;
        self.log_d_per_window.iter().all(|&d| {
            let ok = d >= prev;
            prev = d;
            ok
        })
    }
}

/// End-of-window update of `c` for the batched variants (no-op per packet).
fn apply_window_update(params: &RoutingParams, s: &mut CongestionState) {
    let scale = params.mu / params.window as f64;
    let wi = s.window_index;
    match params.variant {
        Variant::PerPacket => {}
        Variant::Batched => {
            for (lc, n) in s.log_c.iter_mut().zip(&mut s.pending) {
                if *n > 0 {
                    *lc += (*n as f64 * scale).ln_1p();
                }
                *n = 0;
            }
            s.applied_through = wi;
        }
        Variant::InBand => {
            for e in 0..s.log_c.len() {
                let old = s.log_c[e];
                if s.lagged[e] > 0 {
                    let inc = (s.log_prev_c[e] - old).exp() * s.lagged[e] as f64 * scale;
                    s.log_c[e] = old + inc.ln_1p();
                }
                s.log_prev_c[e] = old;
                s.lagged[e] = std::mem::take(&mut s.pending[e]);
            }
            s.applied_through = wi.saturating_sub(1);
        }
    }
}

/// Per-pair state of the window being routed (batched variants).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRoute {
    pub path: Path,
    pub count: u64,
}

/// The online router. Packets must be offered in non-decreasing time order.
#[derive(Debug, Clone)]
pub struct SourceRouter {
    params: RoutingParams,
    net: Network,
    state: CongestionState,
    /// Absolute window number of the current window.
    window_abs: u64,
    /// Paths fixed for the current window, keyed by `(src, dst)`.
    pairs: BTreeMap<(NodeId, NodeId), PairRoute>,
    last_pairs: BTreeMap<(NodeId, NodeId), PairRoute>,
    frozen_weights: Option<Vec<f64>>,
    loads: Vec<u64>,
    log_d: Vec<f64>,
    max_loads: Vec<u64>,
    track_alpha: bool,
    alpha_over_d: Vec<f64>,
    window_packets: Vec<(NodeId, NodeId)>,
}

impl SourceRouter {
    pub fn new(params: RoutingParams, net: &Network) -> Result<Self> {
        let m = params.links;
        if m != net.m() {
            return Err(Error::InvalidParams(format!(
                "parameters were computed for m = {m}, network has {} links",
                net.m()
            )));
        }
        Ok(Self {
            net: net.clone(),
            state: CongestionState::fresh(&params),
            params,
            window_abs: 0,
            pairs: BTreeMap::new(),
            last_pairs: BTreeMap::new(),
            frozen_weights: None,
            loads: vec![0; m],
            log_d: Vec::new(),
            max_loads: Vec::new(),
            track_alpha: false,
            alpha_over_d: Vec::new(),
            window_packets: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Also record `alpha_i / D_i` at every window end. Costs one shortest
    /// path per routed packet.
    pub fn with_alpha_tracking(mut self) -> Self {
        self.track_alpha = true;
        self
    }

    pub fn params(&self) -> &RoutingParams {
        &self.params
    }

    pub fn state(&self) -> &CongestionState {
        &self.state
    }

    pub fn loads(&self) -> &[u64] {
        &self.loads
    }

    /// Pair routes of the most recently closed window.
    pub fn last_window_pairs(&self) -> &BTreeMap<(NodeId, NodeId), PairRoute> {
        &self.last_pairs
    }

    /// Closes windows (and phases) until `time` falls in the current window.
    /// Returns the diagnostics of every phase completed on the way.
    pub fn advance_to(&mut self, time: u64) -> Result<Vec<PhaseDiagnostics>> {
        let target = time / self.params.window;
        let mut done = Vec::new();
        while self.window_abs < target {
            if self.state.window_index == self.params.windows_per_phase {
                done.push(self.end_phase_check()?);
            } else {
                self.close_window();
            }
        }
        Ok(done)
    }

    /// Routes a packet injected at `time`, first closing any elapsed windows.
    pub fn route(
        &mut self,
        time: u64,
        src: NodeId,
        dst: NodeId,
    ) -> Result<(Path, Vec<PhaseDiagnostics>)> {
        let done = self.advance_to(time)?;
        Ok((self.route_packet(src, dst)?, done))
    }

    /// Routes a packet in the current window.
    pub fn route_packet(&mut self, src: NodeId, dst: NodeId) -> Result<Path> {
        let net = &self.net;
        if src == dst {
            return Ok(Path::default());
        }
        let path = match self.params.variant {
            Variant::PerPacket => {
                let path = net
                    .shortest_path(&self.state.weights(), src, dst)
                    .ok_or(Error::Unreachable { src, dst })?;
                let step = (self.params.mu / self.params.window as f64).ln_1p();
                for &e in &path.links {
                    self.state.log_c[e] += step;
                }
                path
            }
            Variant::Batched | Variant::InBand => {
                if let Some(pair) = self.pairs.get_mut(&(src, dst)) {
                    pair.count += 1;
                    pair.path.clone()
                } else {
                    let weights = self
                        .frozen_weights
                        .get_or_insert_with(|| self.state.weights());
                    let path = net
                        .shortest_path(weights, src, dst)
                        .ok_or(Error::Unreachable { src, dst })?;
                    self.pairs.insert(
                        (src, dst),
                        PairRoute {
                            path: path.clone(),
                            count: 1,
                        },
                    );
                    path
                }
            }
        };
        for &e in &path.links {
            self.loads[e] += 1;
            if self.params.variant != Variant::PerPacket {
                self.state.pending[e] += 1;
            }
        }
        if self.params.variant == Variant::PerPacket {
            self.state.applied_through = self.state.window_index;
        }
        if self.track_alpha {
            self.window_packets.push((src, dst));
        }
        Ok(path)
    }

    /// End-of-window congestion update for the batched variants.
    pub fn end_window(&mut self) -> Result<()> {
        if self.params.variant == Variant::PerPacket {
            return Err(Error::WrongVariant {
                op: "end_window",
                variant: Variant::PerPacket.name(),
            });
        }
        self.close_window();
        Ok(())
    }

    fn close_window(&mut self) {
        if self.track_alpha {
            self.record_alpha();
        }
        apply_window_update(&self.params, &mut self.state);
        self.log_d.push(self.state.log_total());
        self.max_loads
            .push(self.loads.iter().copied().max().unwrap_or(0));
        self.last_pairs = std::mem::take(&mut self.pairs);
        self.frozen_weights = None;
        self.state.window_index += 1;
        self.window_abs += 1;
    }

    /// `alpha_i / D_i` under the congestion at the end of the window. The
    /// ratio is scale free, so normalised weights suffice.
    fn record_alpha(&mut self) {
        let mut end_state = self.state.clone();
        apply_window_update(&self.params, &mut end_state);
        let weights = end_state.weights();
        let total: f64 = weights.iter().sum();
        let alpha: f64 = self
            .window_packets
            .drain(..)
            .filter_map(|(s, d)| {
                let path = self.net.shortest_path(&weights, s, d)?;
                Some(self.net.path_weight(&weights, &path))
            })
            .sum();
        self.alpha_over_d.push(alpha / total);
    }

    /// Closes the last window of the phase, reports it and resets `c` to
    /// `delta`.
    pub fn end_phase_check(&mut self) -> Result<PhaseDiagnostics> {
        if self.state.window_index != self.params.windows_per_phase {
            return Err(Error::InvalidParams(format!(
                "phase ends after window {}, current window is {}",
                self.params.windows_per_phase, self.state.window_index
            )));
        }
        self.close_window();
        let diag = self.take_diagnostics();
        let phase = self.state.phase_index + 1;
        self.state = CongestionState::fresh(&self.params);
        self.state.phase_index = phase;
        Ok(diag)
    }

    fn take_diagnostics(&mut self) -> PhaseDiagnostics {
        PhaseDiagnostics {
            phase: self.state.phase_index,
            log_d0: self.params.log_delta + (self.params.links as f64).ln(),
            log_d_per_window: std::mem::take(&mut self.log_d),
            max_load_per_window: std::mem::take(&mut self.max_loads),
            loads: std::mem::replace(&mut self.loads, vec![0; self.params.links]),
            alpha_over_d: std::mem::take(&mut self.alpha_over_d),
        }
    }

    /// Snapshot of the running phase (closed windows only).
    pub fn partial_diagnostics(&self) -> PhaseDiagnostics {
        PhaseDiagnostics {
            phase: self.state.phase_index,
            log_d0: self.params.log_delta + (self.params.links as f64).ln(),
            log_d_per_window: self.log_d.clone(),
            max_load_per_window: self.max_loads.clone(),
            loads: self.loads.clone(),
            alpha_over_d: self.alpha_over_d.clone(),
        }
    }
}

/// Control packet of the in-band signalling variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControlPacket {
    /// Carries a window's `(src, dst)` packet count along the pair's path.
    Forward {
        src: NodeId,
        dst: NodeId,
        count: u64,
        path: Path,
    },
    /// Carries the congestion of `link` from its head to node `to`.
    Broadcast {
        link: LinkId,
        to: NodeId,
        path: Path,
    },
}

impl ControlPacket {
    pub fn path(&self) -> &Path {
        match self {
            ControlPacket::Forward { path, .. } | ControlPacket::Broadcast { path, .. } => path,
        }
    }
}

/// Signalling latency bound `n³ + mn²`.
pub fn inband_tau(net: &Network) -> u64 {
    let (n, m) = (net.n() as u64, net.m() as u64);
    n.pow(3) + m * n * n
}

/// Control traffic sent after a window: one forward packet per active pair
/// along its window path, and one broadcast per link to every other node
/// reachable from its head on a fewest-hop path. At most `n² + mn` packets.
pub fn inband_control_plan(
    net: &Network,
    pairs: &BTreeMap<(NodeId, NodeId), PairRoute>,
) -> Vec<ControlPacket> {
    let mut out: Vec<ControlPacket> = pairs
        .iter()
        .filter(|(_, route)| !route.path.is_empty())
        .map(|(&(src, dst), route)| ControlPacket::Forward {
            src,
            dst,
            count: route.count,
            path: route.path.clone(),
        })
        .collect();
    for link in net.links() {
        for to in 0..net.n() {
            if to == link.head {
                continue;
            }
            if let Some(path) = net.min_hop_path(link.head, to) {
                out.push(ControlPacket::Broadcast {
                    link: link.id,
                    to,
                    path,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parallel2() -> Network {
        Network::from_links([(0, 1, "a"), (0, 1, "b")]).unwrap()
    }

    // Reference values evaluated directly from the closed forms in plain
    // double precision (r = 0.5, R = 0.75, m = 4).
    #[test]
    fn params_match_closed_forms() {
        let pp = RoutingParams::compute(0.5, 0.75, 10, 4, Variant::PerPacket).unwrap();
        assert!((pp.mu - 0.1264195352637011).abs() < 1e-15);
        assert!((pp.log_delta - -22.964651015960026).abs() < 1e-9);
        assert!((pp.delta() - 1.0631114237810376e-10).abs() < 1e-20);
        assert_eq!(pp.windows_per_phase, 319);

        let b = RoutingParams::compute(0.5, 0.75, 10, 4, Variant::Batched).unwrap();
        assert!((b.mu - pp.mu / 4.0).abs() < 1e-15);
        assert!((b.log_delta - -88.73457665274879).abs() < 1e-9);
        assert_eq!(b.windows_per_phase, 5440);

        let ib = RoutingParams::compute(0.5, 0.75, 10, 4, Variant::InBand).unwrap();
        assert!((ib.mu - pp.mu / 8.0).abs() < 1e-15);
        assert!((ib.log_delta - -176.45715393147185).abs() < 1e-9);
        assert_eq!(ib.windows_per_phase, 21982);
    }

    #[test]
    fn params_satisfy_invariants() {
        for &m in &[1usize, 2, 7, 20, 200] {
            for v in [Variant::PerPacket, Variant::Batched, Variant::InBand] {
                let p = RoutingParams::compute(0.3, 0.9, 5, m, v).unwrap();
                assert!(p.mu > 0.0 && p.mu < 1.0);
                assert!(p.log_delta < 0.0);
                assert!(p.windows_per_phase >= 1);
                let rmu = p.rmu();
                let expect = ((1.0 - rmu) / m as f64).ln() / rmu;
                assert!((p.log_delta - expect).abs() <= 1e-12 * expect.abs());
            }
        }
    }

    #[test]
    fn bad_rates_are_rejected() {
        for (r, big_r) in [(0.5, 0.5), (0.5, 0.4), (0.5, 1.0), (0.0, 0.5)] {
            assert!(RoutingParams::compute(r, big_r, 10, 3, Variant::PerPacket).is_err());
        }
    }

    #[test]
    fn per_packet_alternates_on_parallel_links() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 10, 2, Variant::PerPacket).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![0]);
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![1]);
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![0]);
    }

    #[test]
    fn batched_holds_congestion_within_a_window() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 10, 2, Variant::Batched).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![0]);
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![0]);
        assert_eq!(router.state().pending_counts(), &[2, 0]);
        router.end_window().unwrap();
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![1]);
    }

    #[test]
    fn self_addressed_packets_change_nothing() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 10, 2, Variant::PerPacket).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        let before = router.state().clone();
        assert!(router.route_packet(1, 1).unwrap().is_empty());
        assert_eq!(router.state(), &before);
        assert_eq!(router.loads(), &[0, 0]);
    }

    #[test]
    fn unreachable_destination_is_an_error() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 10, 2, Variant::Batched).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        assert!(matches!(
            router.route_packet(1, 0),
            Err(Error::Unreachable { src: 1, dst: 0 })
        ));
    }

    #[test]
    fn end_window_updates() {
        let net = parallel2();
        let w = 10;
        let p = RoutingParams::compute(0.5, 0.75, w, 2, Variant::Batched).unwrap();
        let mut router = SourceRouter::new(p.clone(), &net).unwrap();
        router.end_window().unwrap();
        assert_eq!(router.state().log_congestion(0), p.log_delta);
        for _ in 0..w {
            router.route_packet(0, 1).unwrap();
        }
        router.end_window().unwrap();
        let grown = router.state().log_congestion(0) - p.log_delta;
        assert!((grown - p.mu.ln_1p()).abs() < 1e-15);
        assert_eq!(router.state().log_congestion(1), p.log_delta);

        let pp = RoutingParams::compute(0.5, 0.75, w, 2, Variant::PerPacket).unwrap();
        let mut router = SourceRouter::new(pp, &net).unwrap();
        assert!(matches!(
            router.end_window(),
            Err(Error::WrongVariant { .. })
        ));
    }

    #[test]
    fn in_band_updates_lag_one_window() {
        let net = parallel2();
        let w = 10;
        let p = RoutingParams::compute(0.5, 0.75, w, 2, Variant::InBand).unwrap();
        let mut router = SourceRouter::new(p.clone(), &net).unwrap();
        for _ in 0..4 {
            router.route_packet(0, 1).unwrap();
        }
        // End of window 1: nothing from an earlier window to apply.
        router.end_window().unwrap();
        assert_eq!(router.state().log_congestion(0), p.log_delta);
        assert_eq!(router.state().applied_through(), 0);
        // Window 2 still routes on untouched congestion.
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![0]);
        router.end_window().unwrap();
        // c_2 = c_1 + c_0 * N_1 * mu / w with c_0 = c_1 = delta, N_1 = 4.
        let expect = p.log_delta + (4.0 * p.mu / w as f64).ln_1p();
        assert!((router.state().log_congestion(0) - expect).abs() < 1e-12);
        assert_eq!(router.state().applied_through(), 1);
        assert_eq!(router.route_packet(0, 1).unwrap().links, vec![1]);
    }

    #[test]
    fn idle_phase_reports_initial_total() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 3, 2, Variant::PerPacket).unwrap();
        let mut router = SourceRouter::new(p.clone(), &net).unwrap();
        let done = router.advance_to(p.phase_len()).unwrap();
        assert_eq!(done.len(), 1);
        let diag = &done[0];
        assert_eq!(diag.log_d_per_window.len() as u64, p.windows_per_phase);
        let md = 2.0 * p.delta();
        assert!((diag.final_log_d().exp() - md).abs() <= 1e-12 * md);
        assert_eq!(diag.loads, vec![0, 0]);
        assert_eq!(router.state().phase_index(), 1);
        assert_eq!(router.state().window_index(), 1);
    }

    #[test]
    fn end_phase_check_requires_last_window() {
        let net = parallel2();
        let p = RoutingParams::compute(0.5, 0.75, 3, 2, Variant::Batched).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        assert!(router.end_phase_check().is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [-3.0f64, -1.0, 0.5];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp([-7.25]), -7.25);
    }
    #[test]
    fn control_plan_counts() {
        let net = Network::from_links([(0, 1, "a"), (1, 2, "b"), (2, 0, "c")]).unwrap();
        let empty = inband_control_plan(&net, &BTreeMap::new());
        assert!(empty
            .iter()
            .all(|c| matches!(c, ControlPacket::Broadcast { .. })));
        assert_eq!(empty.len(), 3 * 2);

        let p = RoutingParams::compute(0.5, 0.75, 4, 3, Variant::InBand).unwrap();
        let mut router = SourceRouter::new(p, &net).unwrap();
        router.route_packet(0, 2).unwrap();
        router.route_packet(0, 2).unwrap();
        router.end_window().unwrap();
        let plan = inband_control_plan(&net, router.last_window_pairs());
        let forward: Vec<_> = plan
            .iter()
            .filter(|c| matches!(c, ControlPacket::Forward { .. }))
            .collect();
        assert_eq!(forward.len(), 1);
        assert_eq!(
            forward[0],
            &ControlPacket::Forward {
                src: 0,
                dst: 2,
                count: 2,
                path: Path::new(vec![0, 1])
            }
        );
        assert!(plan.len() <= 3 * 3 + 3 * 3);
        assert_eq!(inband_tau(&net), 27 + 27);
    }
}
