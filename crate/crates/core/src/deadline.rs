//! Deadline-based store-and-forward scheduling.
//!
//! Time is cut into M-intervals. Packets injected during
//! `[(γ-1)M, γM)` are held until `γM` and then get one deadline per link of
//! their path: an initial deadline `τ_0` in `[γM + T, (γ+1)M - d_max T)` and
//! `τ_{k+1} = τ_k + T`. Links serve the smallest deadline first. If no link
//! has more than `T` deadlines in any `T` consecutive steps, every deadline
//! is met and every packet arrives within `2M` steps of injection.
//!
//! The initial deadlines are either drawn uniformly at random or chosen
//! greedily, packet by packet, to minimise a pessimistic estimator `h` of
//! the probability that some per-link window is overloaded. The estimator
//! only involves packets sharing the same first link, so every first link
//! can run its own assignment.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinkId, Packet, Path};
use crate::routing::log_sum_exp;
use crate::sched::{select, PriorityRule, QueuedPacket};

const MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    /// `ε = 1 - r`.
    pub epsilon: f64,
    /// Link count `m`.
    pub links: usize,
    /// Adversary window `w`.
    pub window: u64,
    pub d_max: usize,
    /// Deadline spacing `T`.
    pub spacing: u64,
    /// M-interval length `M`.
    pub interval: u64,
}

impl SchedulerParams {
    /// Smallest `(T, M)` with
    ///
    /// ```text
    /// T = ceil(36 m / ε³ · ln(2 M m²))
    /// M ≥ max((1 - ε/2) / (ε/6) · (d_max + 1) · T, w)
    /// ```
    ///
    /// found by iterating from `M = max(w, 1)`. Both maps are monotone, so the
    /// iterates increase to the least fixed point.
    pub fn compute(epsilon: f64, m: usize, w: u64, d_max: usize) -> Result<Self> {
        check_epsilon(epsilon)?;
        if m == 0 || d_max == 0 {
            return Err(Error::InvalidParams("need m >= 1 and d_max >= 1".into()));
        }
        let mut params = Self {
            epsilon,
            links: m,
            window: w,
            d_max,
            spacing: 0,
            interval: w.max(1),
        };
        for _ in 0..MAX_ITERATIONS {
            params.spacing = params.spacing_for(params.interval);
            let next = params.interval_for(params.spacing);
            if next == params.interval {
                debug_assert!(params.draw_len() > params.interval / 2);
                return Ok(params);
            }
            params.interval = next;
        }
        Err(Error::NonConvergence(MAX_ITERATIONS))
    }

    /// Caller-chosen `T` and `M`. Only the draw interval must be nonempty;
    /// the no-overload certificate is checked per assignment instead.
    pub fn with_spacing(
        epsilon: f64,
        m: usize,
        w: u64,
        d_max: usize,
        spacing: u64,
        interval: u64,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        if m == 0 || d_max == 0 || spacing == 0 {
            return Err(Error::InvalidParams("need m, d_max, T >= 1".into()));
        }
        if interval <= (d_max as u64 + 1) * spacing {
            return Err(Error::InvalidParams(format!(
                "M = {interval} leaves no initial deadlines: need M > (d_max + 1) T = {}",
                (d_max as u64 + 1) * spacing
            )));
        }
        Ok(Self {
            epsilon,
            links: m,
            window: w,
            d_max,
            spacing,
            interval,
        })
    }

    /// `ceil(36 m / ε³ · ln(2 M m²))`.
    pub fn spacing_for(&self, interval: u64) -> u64 {
        let m = self.links as f64;
        (36.0 * m / self.epsilon.powi(3) * (2.0 * interval as f64 * m * m).ln()).ceil() as u64
    }

    /// `max(ceil((1 - ε/2) / (ε/6) · (d_max + 1) · T), w)`.
    pub fn interval_for(&self, spacing: u64) -> u64 {
        let e = self.epsilon;
        let need = ((1.0 - e / 2.0) / (e / 6.0) * (self.d_max + 1) as f64 * spacing as f64).ceil();
        (need as u64).max(self.window)
    }

    /// Number of candidate initial deadlines, `M - (d_max + 1) T`.
    pub fn draw_len(&self) -> u64 {
        self.interval - (self.d_max as u64 + 1) * self.spacing
    }

    /// Candidate initial deadlines for packets injected in `[(γ-1)M, γM)`.
    pub fn draw_range(&self, gamma: u64) -> Range<u64> {
        let start = gamma * self.interval + self.spacing;
        start..start + self.draw_len()
    }

    /// Injection times scheduled at `γM`.
    pub fn injection_range(&self, gamma: u64) -> Range<u64> {
        assert!(gamma >= 1, "the first M-interval is scheduled at gamma = 1");
        (gamma - 1) * self.interval..gamma * self.interval
    }

    fn factor_base(&self) -> f64 {
        1.0 + self.epsilon / 2.0
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "epsilon = {epsilon} must lie in (0, 1)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketDeadlines {
    pub packet: usize,
    pub path: Path,
    /// `τ_0, τ_0 + T, ...`, one per link of `path`.
    pub deadlines: Vec<u64>,
}

impl PacketDeadlines {
    fn new(packet: usize, path: Path, tau0: u64, spacing: u64) -> Self {
        let deadlines = (0..path.len() as u64).map(|k| tau0 + k * spacing).collect();
        Self {
            packet,
            path,
            deadlines,
        }
    }

    pub fn initial(&self) -> Option<u64> {
        self.deadlines.first().copied()
    }
}

/// Deadlines for the packets of one M-interval, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlineAssignment {
    pub gamma: u64,
    pub spacing: u64,
    pub packets: Vec<PacketDeadlines>,
    /// Per first link: `ln h` before any decision and after each one
    /// (derandomized assignments only).
    pub log_h: BTreeMap<LinkId, Vec<f64>>,
}

impl DeadlineAssignment {
    /// Largest realized `ln h` over first-link groups; below 0 means every
    /// group certificate holds.
    pub fn max_final_log_h(&self) -> Option<f64> {
        self.log_h
            .values()
            .filter_map(|h| h.last().copied())
            .reduce(f64::max)
    }
}

/// Validates the packets of one interval and returns their paths.
fn interval_paths<'a>(
    packets: &'a [Packet],
    params: &SchedulerParams,
    gamma: u64,
) -> Result<Vec<&'a Path>> {
    let range = params.injection_range(gamma);
    packets
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let path = p.path.as_ref().ok_or(Error::MissingPath { index })?;
            if path.len() > params.d_max {
                return Err(Error::PathTooLong {
                    packet: p.id,
                    len: path.len(),
                    d_max: params.d_max,
                });
            }
            if path.is_empty() {
                return Err(Error::InvalidPath(format!(
                    "packet {} has an empty path",
                    p.id
                )));
            }
            if !range.contains(&p.inject_time) {
                return Err(Error::OutsideInterval {
                    packet: p.id,
                    time: p.inject_time,
                    start: range.start,
                    end: range.end,
                });
            }
            Ok(path)
        })
        .collect()
}

/// Independent uniform initial deadlines, reproducible from `seed`.
pub fn assign_deadlines_random(
    packets: &[Packet],
    params: &SchedulerParams,
    gamma: u64,
    seed: u64,
) -> Result<DeadlineAssignment> {
    let paths = interval_paths(packets, params, gamma)?;
    let range = params.draw_range(gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let packets = packets
        .iter()
        .zip(paths)
        .map(|(p, path)| {
            let tau0 = rng.gen_range(range.clone());
            PacketDeadlines::new(p.id, path.clone(), tau0, params.spacing)
        })
        .collect();
    Ok(DeadlineAssignment {
        gamma,
        spacing: params.spacing,
        packets,
        log_h: BTreeMap::new(),
    })
}

/// `β` for one `(first link, link)` pair holding `count` packets.
pub fn beta(params: &SchedulerParams, count: usize) -> f64 {
    let m = params.interval as f64;
    let usable = (params.interval - (params.d_max as u64 + 1) * params.spacing) as f64;
    m / usable * (count as f64 / m).max(params.epsilon / (3.0 * params.links as f64))
}

/// `|S_{e0,e}|` for every first link `e0` and link `e` on some path.
pub fn group_link_counts(paths: &[&Path]) -> BTreeMap<(LinkId, LinkId), usize> {
    let mut counts = BTreeMap::new();
    for path in paths {
        let Some(first) = path.first() else { continue };
        for &e in &path.links {
            *counts.entry((first, e)).or_insert(0) += 1;
        }
    }
    counts
}

/// `max_e Σ_{e0} β_{e0,e}`; the derandomization is guaranteed to succeed at
/// full scale when this is at most `1 - ε/2`.
pub fn max_beta_sum(packets: &[Packet], params: &SchedulerParams) -> f64 {
    let paths: Vec<&Path> = packets.iter().filter_map(|p| p.path.as_ref()).collect();
    let mut sums: BTreeMap<LinkId, f64> = BTreeMap::new();
    for ((_, e), count) in group_link_counts(&paths) {
        *sums.entry(e).or_default() += beta(params, count);
    }
    sums.values().copied().fold(0.0, f64::max)
}

/// `max_e Σ_{e0} β_{e0,e} <= 1 - ε/2`, with `1e-9` slack.
pub fn beta_condition_holds(packets: &[Packet], params: &SchedulerParams) -> bool {
    max_beta_sum(packets, params) <= 1.0 - params.epsilon / 2.0 + 1e-9
}

/// Greedy conditional-expectation assignment, independently per first link.
///
/// Within a group packets are fixed in `(inject_time, id)` order. For packet
/// `p_i` the initial deadline minimising
///
/// ```text
/// h = Σ_{e, t} Π_p f_p(e, t) / (1 + ε/2)^((1 + ε/2) β_e T)
/// ```
///
/// is chosen (smallest on ties), where `t` ranges over `[γM, (γ+1)M - T)`,
/// `f_p = (1 + ε/2)^X` for decided packets and `exp(ε/2 · E[X])` for the
/// rest, `X` being the indicator that `p` has a deadline for `e` in
/// `[t, t + T)`. `h` never increases, and a final `h < 1` certifies that no
/// window holds more than `(1 + ε/2) β_e T` deadlines from the group.
pub fn assign_deadlines_derandomized(
    packets: &[Packet],
    params: &SchedulerParams,
    gamma: u64,
) -> Result<DeadlineAssignment> {
    let paths = interval_paths(packets, params, gamma)?;
    let mut groups: BTreeMap<LinkId, Vec<usize>> = BTreeMap::new();
    for (i, path) in paths.iter().enumerate() {
        groups.entry(path.links[0]).or_default().push(i);
    }
    let mut tau0 = vec![0u64; packets.len()];
    let mut log_h = BTreeMap::new();
    for (first, mut members) in groups {
        members.sort_by_key(|&i| (packets[i].inject_time, packets[i].id));
        let group_paths: Vec<&Path> = members.iter().map(|&i| paths[i]).collect();
        let mut estimator = GroupEstimator::new(params, gamma, &group_paths);
        let mut history = vec![estimator.log_h()];
        for (slot, &i) in members.iter().enumerate() {
            tau0[i] = estimator.decide(slot);
            history.push(estimator.log_h());
        }
        log_h.insert(first, history);
    }
    let packets = packets
        .iter()
        .zip(paths)
        .zip(tau0)
        .map(|((p, path), t0)| PacketDeadlines::new(p.id, path.clone(), t0, params.spacing))
        .collect();
    Ok(DeadlineAssignment {
        gamma,
        spacing: params.spacing,
        packets,
        log_h,
    })
}

/// `E[X^{p,e}_{[t,t+T)}]` for a packet whose link `e` sits at position `k`,
/// as the number of initial deadlines in `draw` putting deadline `k` inside
/// the window, divided by the number of choices.
pub fn expected_hit(draw: &Range<u64>, k: u64, spacing: u64, t: u64) -> f64 {
    let offset = k * spacing;
    // τ_0 ∈ [t - kT, t + T - 1 - kT] ∩ draw.
    let lo = (t as i64 - offset as i64).max(draw.start as i64);
    let hi = (t as i64 + spacing as i64 - 1 - offset as i64).min(draw.end as i64 - 1);
    let hits = (hi - lo + 1).max(0);
    hits as f64 / (draw.end - draw.start) as f64
}

/// Pessimistic estimator state of one first-link group.
struct GroupEstimator<'a> {
    params: &'a SchedulerParams,
    paths: Vec<&'a Path>,
    draw: Range<u64>,
    /// First window start, `γM`.
    origin: u64,
    windows: usize,
    /// Links on some path of the group, with their row in `log_a`.
    rows: BTreeMap<LinkId, usize>,
    /// `ln` of each `(e, t)` term of `h`.
    log_a: Vec<Vec<f64>>,
}

impl<'a> GroupEstimator<'a> {
    fn new(params: &'a SchedulerParams, gamma: u64, paths: &[&'a Path]) -> Self {
        let draw = params.draw_range(gamma);
        let origin = gamma * params.interval;
        let windows = (params.interval - params.spacing) as usize;
        let mut counts: BTreeMap<LinkId, usize> = BTreeMap::new();
        for path in paths {
            for &e in &path.links {
                *counts.entry(e).or_default() += 1;
            }
        }
        let rows: BTreeMap<LinkId, usize> = counts
            .keys()
            .enumerate()
            .map(|(row, &e)| (e, row))
            .collect();
        let base = params.factor_base();
        let half = params.epsilon / 2.0;
        let mut log_a: Vec<Vec<f64>> = counts
            .values()
            .map(|&count| {
                let threshold = base * beta(params, count) * params.spacing as f64;
                vec![-threshold * base.ln(); windows]
            })
            .collect();
        for path in paths {
            for (k, e) in path.links.iter().enumerate() {
                let row = &mut log_a[rows[e]];
                for (j, cell) in row.iter_mut().enumerate() {
                    let t = origin + j as u64;
                    *cell += half * expected_hit(&draw, k as u64, params.spacing, t);
                }
            }
        }
        Self {
            params,
            paths: paths.to_vec(),
            draw,
            origin,
            windows,
            rows,
            log_a,
        }
    }

    fn log_h(&self) -> f64 {
        log_sum_exp(self.log_a.iter().flatten().copied())
    }

    /// Window indices `j` (start `origin + j`) containing `deadline`.
    fn windows_hit(&self, deadline: u64) -> Range<usize> {
        let last = (deadline - self.origin) as usize;
        let first = (last + 1).saturating_sub(self.params.spacing as usize);
        first..(last + 1).min(self.windows)
    }

    /// Fixes the initial deadline of the `slot`-th packet and returns it.
    fn decide(&mut self, slot: usize) -> u64 {
        let path = self.paths[slot];
        let spacing = self.params.spacing;
        let half = self.params.epsilon / 2.0;
        let log_base = self.params.factor_base().ln();

        // Strip the packet's undecided factor: ln B = ln A - ε/2 E[X].
        let mut log_b: Vec<Vec<f64>> = Vec::with_capacity(path.len());
        for (k, e) in path.links.iter().enumerate() {
            let row = &self.log_a[self.rows[e]];
            log_b.push(
                row.iter()
                    .enumerate()
                    .map(|(j, &la)| {
                        let t = self.origin + j as u64;
                        la - half * expected_hit(&self.draw, k as u64, spacing, t)
                    })
                    .collect(),
            );
        }
        // Only the windows hit by the packet's own deadlines depend on the
        // choice; minimise Σ_e Σ_{hit windows} B_e.
        let shift = log_b
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let prefix: Vec<Vec<f64>> = log_b
            .iter()
            .map(|row| {
                let mut acc = vec![0.0; row.len() + 1];
                for (j, &lb) in row.iter().enumerate() {
                    acc[j + 1] = acc[j] + (lb - shift).exp();
                }
                acc
            })
            .collect();
        let mut best: Option<(f64, u64)> = None;
        for tau0 in self.draw.clone() {
            let mut cost = 0.0;
            for (k, acc) in prefix.iter().enumerate() {
                let hit = self.windows_hit(tau0 + k as u64 * spacing);
                cost += acc[hit.end] - acc[hit.start];
            }
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, tau0));
            }
        }
        let (_, tau0) = best.expect("draw interval is nonempty");

        for (k, (e, mut row)) in path.links.iter().zip(log_b).enumerate() {
            for j in self.windows_hit(tau0 + k as u64 * spacing) {
                row[j] += log_base;
            }
            self.log_a[self.rows[e]] = row;
        }
        tau0
    }
}

/// Outcome of the per-link deadline density check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlineCertificate {
    /// No link has more than `T` deadlines in any `[t, t + T)`.
    pub holds: bool,
    /// Densest `(link, window start, count)`.
    pub worst: Option<(LinkId, u64, u64)>,
}

/// Checks `Σ_p X^{p,e}_{[t,t+T)} <= T` for every link and window.
pub fn verify_deadline_condition(assignment: &DeadlineAssignment) -> DeadlineCertificate {
    let spacing = assignment.spacing;
    let mut per_link: BTreeMap<LinkId, Vec<u64>> = BTreeMap::new();
    for p in &assignment.packets {
        for (&e, &d) in p.path.links.iter().zip(&p.deadlines) {
            per_link.entry(e).or_default().push(d);
        }
    }
    let mut worst: Option<(LinkId, u64, u64)> = None;
    for (e, mut ds) in per_link {
        ds.sort_unstable();
        let mut lo = 0;
        for hi in 0..ds.len() {
            while ds[hi] - ds[lo] >= spacing {
                lo += 1;
            }
            let count = (hi - lo + 1) as u64;
            if worst.is_none_or(|(_, _, c)| count > c) {
                worst = Some((e, ds[lo], count));
            }
        }
    }
    DeadlineCertificate {
        holds: worst.is_none_or(|(_, _, c)| c <= spacing),
        worst,
    }
}

/// Checks the per-group bound `count <= (1 + ε/2) β_{e0,e} T` for every first
/// link `e0`, link `e` and window start in `[γM, (γ+1)M - T)`. Returns the
/// violations as `(e0, e, t, count)`.
pub fn group_condition_violations(
    assignment: &DeadlineAssignment,
    params: &SchedulerParams,
) -> Vec<(LinkId, LinkId, u64, u64)> {
    let paths: Vec<&Path> = assignment.packets.iter().map(|p| &p.path).collect();
    let counts = group_link_counts(&paths);
    let mut deadlines: BTreeMap<(LinkId, LinkId), Vec<u64>> = BTreeMap::new();
    for p in &assignment.packets {
        let first = p.path.links[0];
        for (&e, &d) in p.path.links.iter().zip(&p.deadlines) {
            deadlines.entry((first, e)).or_default().push(d);
        }
    }
    let origin = assignment.gamma * params.interval;
    let end = origin + params.interval - params.spacing;
    let mut out = Vec::new();
    for ((first, e), mut ds) in deadlines {
        ds.sort_unstable();
        let bound =
            params.factor_base() * beta(params, counts[&(first, e)]) * params.spacing as f64;
        for t in origin..end {
            let lo = ds.partition_point(|&d| d < t);
            let hi = ds.partition_point(|&d| d < t + params.spacing);
            let count = (hi - lo) as u64;
            if count as f64 > bound {
                out.push((first, e, t, count));
            }
        }
    }
    out
}

/// One earliest-deadline-first step: every nonempty queue gives up its
/// smallest-deadline packet (ties by injection time, then id).
pub fn edf_step(queues: &mut [Vec<QueuedPacket>]) -> Vec<Option<QueuedPacket>> {
    queues
        .iter_mut()
        .map(|q| select(PriorityRule::Edf, q).ok().map(|i| q.swap_remove(i)))
        .collect()
}
