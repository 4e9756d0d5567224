//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srsched::admissibility::{check_strong, check_weak, weak_to_strong_params};
use srsched::adversary::{
    gen_random_admissible, InstabilityAdversary, InstabilityKind, PhaseRecord,
};
use srsched::deadline::SchedulerParams;
use srsched::engine::{
    Adversary, AdversaryPaths, DeadlineMode, Discipline, LogKind, RingOnline, RingRandom, Router,
    RouterReport, RunOptions, RunStatus, SimReport, Simulator, SourceRouting, TraceAdversary,
};
use srsched::model::{InjectionTrace, Network, TraceEvent};
use srsched::ring::{
    gen_ring_traffic, interval_max_loads, route_offline_derand, OnlineRingRouter, ParallelRing,
    RingParams,
};
use srsched::routing::{RoutingParams, SourceRouter, Variant};
use srsched::sched::PriorityRule;

/// Engine-level observations shared by every criterion.
#[derive(Default)]
struct Invariants {
    runs: u64,
    failures: Vec<String>,
    logged_serves: u64,
    determinism_checks: u64,
}

impl Invariants {
    /// Runs a simulation, recording engine errors and, when an event log is
    /// kept, any link serving two packets in one step.
    fn run<R: Router>(
        &mut self,
        label: &str,
        sim: Simulator<R>,
        adversary: &mut dyn Adversary,
        options: &RunOptions,
    ) -> Option<SimReport> {
        self.runs += 1;
        match sim.run(adversary, options) {
            Ok((report, sim)) => {
                if let Some(log) = sim.event_log() {
                    let mut serves: Vec<(u64, usize)> = log
                        .iter()
                        .filter(|e| e.kind == LogKind::Serve)
                        .map(|e| (e.t, e.link.expect("serve has a link")))
                        .collect();
                    let total = serves.len();
                    serves.sort_unstable();
                    serves.dedup();
                    if serves.len() != total {
                        self.failures
                            .push(format!("{label}: a link served twice in one step"));
                    }
                    self.logged_serves += total as u64;
                }
                if report.delivered + report.queued != report.injected {
                    self.failures
                        .push(format!("{label}: report does not conserve packets"));
                }
                Some(report)
            }
            Err(e) => {
                self.failures.push(format!("{label}: {e}"));
                None
            }
        }
    }

    fn same(&mut self, label: &str, a: &SimReport, b: &SimReport) {
        self.determinism_checks += 1;
        if serde_json::to_string(a).unwrap() != serde_json::to_string(b).unwrap() {
            self.failures
                .push(format!("{label}: rerun produced a different report"));
        }
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn random_network(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Network {
    let links: Vec<_> = (0..m)
        .map(|i| {
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
            (a, b, format!("l{i}"))
        })
        .collect();
    Network::new(n, links).unwrap()
}

// ---------------------------------------------------------------- 1 and 2

struct RoutingOutcome {
    runs: usize,
    phases: usize,
    load_violations: Vec<String>,
    d_violations: Vec<String>,
    growth_violations: Vec<String>,
    windows: usize,
}

fn source_routing_runs(inv: &mut Invariants) -> RoutingOutcome {
    let (w, r, target) = (50u64, 0.5, 0.75);
    let mut out = RoutingOutcome {
        runs: 0,
        phases: 0,
        load_violations: Vec::new(),
        d_violations: Vec::new(),
        growth_violations: Vec::new(),
        windows: 0,
    };
    for variant in [Variant::PerPacket, Variant::Batched, Variant::InBand] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (n, m) = match variant {
                Variant::PerPacket => {
                    let n = rng.gen_range(3..=10);
                    (n, rng.gen_range(n..=20))
                }
                Variant::Batched => (rng.gen_range(2..=4), rng.gen_range(2..=3)),
                Variant::InBand => (rng.gen_range(2..=3), 2),
            };
            let net = random_network(&mut rng, n, m);
            let params = RoutingParams::compute(r, target, w, net.m(), variant).unwrap();
            let phases_wanted = if variant == Variant::PerPacket { 2 } else { 1 };
            let horizon = phases_wanted * params.phase_len();
            let trace = gen_random_admissible(&net, w, r, horizon, net.m(), seed).unwrap();
            let label = format!("{} seed {seed}", variant.name());
            if !check_weak(&trace, w, r).unwrap().admissible {
                out.load_violations
                    .push(format!("{label}: generator broke weak admissibility"));
            }
            let options = RunOptions {
                horizon,
                drain: 0,
                queue_cap: None,
                record_deliveries: false,
            };
            let build = || {
                Simulator::new(
                    net.clone(),
                    SourceRouting::new(SourceRouter::new(params.clone(), &net).unwrap()),
                    Discipline::Greedy(PriorityRule::Fifo),
                )
            };
            let log = seed % 5 == 0;
            let sim = if log {
                build().with_event_log()
            } else {
                build()
            };
            let Some(report) = inv.run(
                &label,
                sim,
                &mut TraceAdversary::new(trace.clone()),
                &options,
            ) else {
                continue;
            };
            if seed == 0 {
                if let Some(again) =
                    inv.run(&label, build(), &mut TraceAdversary::new(trace), &options)
                {
                    inv.same(&label, &report, &again);
                }
            }
            out.runs += 1;
            let RouterReport::Source { phases, partial } = &report.router else {
                out.load_violations
                    .push(format!("{label}: no source report"));
                continue;
            };
            if phases.len() < phases_wanted as usize {
                out.load_violations
                    .push(format!("{label}: only {} phases completed", phases.len()));
            }
            let bound = params.load_bound();
            for p in phases {
                out.phases += 1;
                if p.max_load() as f64 > bound {
                    out.load_violations.push(format!(
                        "{label} phase {}: load {} > {bound}",
                        p.phase,
                        p.max_load()
                    ));
                }
                if p.final_log_d() > 1e-9f64.ln_1p() {
                    out.d_violations.push(format!(
                        "{label} phase {}: ln D_t = {}",
                        p.phase,
                        p.final_log_d()
                    ));
                }
            }
            for p in phases.iter().chain(std::iter::once(partial)) {
                out.windows += p.log_d_per_window.len();
                let bad = p.growth_violations(params.rmu(), 1e-9);
                if !bad.is_empty() {
                    out.growth_violations
                        .push(format!("{label} phase {}: windows {bad:?}", p.phase));
                }
            }
        }
    }
    out
}

fn criterion_1(o: &RoutingOutcome) -> Verdict {
    let pass = o.runs == 60 && o.load_violations.is_empty() && o.d_violations.is_empty();
    let mut detail = format!(
        "{} runs (20 networks x 3 variants), {} completed phases, {} load violations, {} D_t violations",
        o.runs,
        o.phases,
        o.load_violations.len(),
        o.d_violations.len()
    );
    if let Some(first) = o.load_violations.iter().chain(&o.d_violations).next() {
        detail.push_str(&format!("; first: {first}"));
    }
    Verdict::new(pass, detail)
}

fn criterion_2(o: &RoutingOutcome) -> Verdict {
    let pass = o.runs == 60 && o.windows > 0 && o.growth_violations.is_empty();
    let mut detail = format!(
        "{} windows checked, {} violations",
        o.windows,
        o.growth_violations.len()
    );
    if let Some(first) = o.growth_violations.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    Verdict::new(pass, detail)
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let (w, r) = (10u64, 0.5);
    let (w2, r2) = weak_to_strong_params(w, r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut tested, mut failures) = (0, Vec::new());
    let mut seed = 0;
    while tested < 1000 {
        seed += 1;
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(1..=8);
        let net = random_network(&mut rng, n, m);
        let horizon = rng.gen_range(20..=300);
        let mut trace = gen_random_admissible(&net, w, r, horizon, 3, seed).unwrap();
        if rng.gen_bool(0.5) {
            trace = thin(&trace, &mut rng);
        }
        if trace.is_empty() || !check_weak(&trace, w, r).unwrap().admissible {
            continue;
        }
        tested += 1;
        let strong = check_strong(&trace, w2, r2).unwrap();
        if !strong.admissible {
            failures.push(format!("seed {seed}: {strong:?}"));
        }
    }
    let pass = (w2, r2) == (40, 0.75) && failures.is_empty();
    Verdict::new(
        pass,
        format!("(w', r') = ({w2}, {r2}); {tested} weakly admissible traces, {} not strongly admissible", failures.len()),
    )
}

/// Drops a random half of the events, varying the load pattern.
fn thin(trace: &InjectionTrace, rng: &mut ChaCha8Rng) -> InjectionTrace {
    let kept: Vec<TraceEvent> = trace
        .events()
        .iter()
        .filter(|_| rng.gen_bool(0.5))
        .cloned()
        .collect();
    InjectionTrace::new(kept).unwrap()
}

// ---------------------------------------------------------------- 4

fn deadline_run(
    inv: &mut Invariants,
    label: &str,
    net: &Network,
    trace: &InjectionTrace,
    params: &SchedulerParams,
    mode: DeadlineMode,
    seed: u64,
) -> Option<SimReport> {
    let sim = Simulator::new(
        net.clone(),
        AdversaryPaths,
        Discipline::Deadline {
            params: params.clone(),
            mode,
            seed,
        },
    )
    .with_event_log();
    let options = RunOptions {
        horizon: trace.horizon(),
        drain: 3 * params.interval,
        queue_cap: None,
        record_deliveries: true,
    };
    inv.run(
        label,
        sim,
        &mut TraceAdversary::new(trace.clone()),
        &options,
    )
}

fn criterion_4(inv: &mut Invariants) -> Verdict {
    let mut certified_instances = 0;
    let mut problems = Vec::new();
    let mut certified_packets = 0u64;
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let n = rng.gen_range(3..=5);
        let m = rng.gen_range(3..=6);
        let net = random_network(&mut rng, n, m);
        let d_max = 3;
        let spacing = rng.gen_range(3..=6u64);
        let interval = (d_max as u64 + 1) * spacing + spacing * rng.gen_range(2..=4u64);
        let params =
            SchedulerParams::with_spacing(0.5, m, interval, d_max, spacing, interval).unwrap();
        let trace = gen_random_admissible(&net, interval, 0.1, 3 * interval, d_max, seed).unwrap();
        if trace.is_empty() {
            continue;
        }
        for mode in [DeadlineMode::Random, DeadlineMode::Derand] {
            let label = format!("toy seed {seed} {mode:?}");
            let Some(report) = deadline_run(inv, &label, &net, &trace, &params, mode, seed) else {
                continue;
            };
            if seed == 0 {
                if let Some(again) = deadline_run(inv, &label, &net, &trace, &params, mode, seed) {
                    inv.same(&label, &report, &again);
                }
            }
            let stats = report.deadline.as_ref().expect("deadline stats");
            let certified: BTreeSet<u64> = stats
                .intervals
                .iter()
                .filter(|c| c.holds && c.packets > 0)
                .map(|c| c.gamma)
                .collect();
            if certified.is_empty() {
                continue;
            }
            certified_instances += 1;
            if stats.certified_misses > 0 {
                problems.push(format!(
                    "{label}: {} certified misses",
                    stats.certified_misses
                ));
            }
            if report.delivered != report.injected {
                problems.push(format!("{label}: undelivered packets"));
            }
            for d in &report.deliveries {
                if certified.contains(&(d.inject / params.interval + 1)) {
                    certified_packets += 1;
                    if d.delay > 2 * params.interval {
                        problems.push(format!("{label}: packet {} delayed {}", d.packet, d.delay));
                    }
                }
            }
        }
    }

    // Derandomized certificate at computed scale.
    let (mut beta_intervals, mut h_failures) = (0, Vec::new());
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4500 + seed);
        let m = rng.gen_range(2..=4);
        let net = random_network(&mut rng, 3, m);
        let params = SchedulerParams::compute(0.9, m, 50, 2).unwrap();
        let trace = gen_random_admissible(&net, 50, 0.03, 2 * params.interval, 2, seed).unwrap();
        let label = format!("derand scale seed {seed}");
        let Some(report) = deadline_run(
            inv,
            &label,
            &net,
            &trace,
            &params,
            DeadlineMode::Derand,
            seed,
        ) else {
            continue;
        };
        for c in &report.deadline.as_ref().expect("deadline stats").intervals {
            if c.beta_condition && c.packets > 0 {
                beta_intervals += 1;
                let h_ok = c.max_log_h.is_some_and(|h| h < 0.0);
                if !(c.holds && h_ok) {
                    h_failures.push(format!(
                        "{label} interval {}: holds {} ln h {:?}",
                        c.gamma, c.holds, c.max_log_h
                    ));
                }
            }
        }
    }
    let pass = certified_instances >= 50
        && problems.is_empty()
        && beta_intervals > 0
        && h_failures.is_empty();
    let mut detail = format!(
        "{certified_instances} certified toy instances, {certified_packets} certified packets, {} misses or late deliveries; \
         derand h < 1 on {}/{beta_intervals} intervals meeting the beta condition",
        problems.len(),
        beta_intervals - h_failures.len()
    );
    if let Some(first) = problems.iter().chain(&h_failures).next() {
        detail.push_str(&format!("; first: {first}"));
    }
    Verdict::new(pass, detail)
}

// ---------------------------------------------------------------- 5 and 6

fn instability(inv: &mut Invariants, kind: InstabilityKind, r: f64, growth: f64) -> Verdict {
    let s0 = 1000;
    let run_once = |inv: &mut Invariants| -> Option<(SimReport, Vec<PhaseRecord>)> {
        let mut adv = InstabilityAdversary::new(kind, r, s0, 5)
            .unwrap()
            .with_merge_wait(kind == InstabilityKind::Fifo);
        let net = adv.network().network().clone();
        let params = RoutingParams::compute(r, 0.99, 100_000, net.m(), Variant::Batched).unwrap();
        let rule = match kind {
            InstabilityKind::Fifo => PriorityRule::Fifo,
            InstabilityKind::Ntg => PriorityRule::Ntg,
        };
        let sim = Simulator::new(
            net.clone(),
            SourceRouting::new(SourceRouter::new(params, &net).unwrap()),
            Discipline::Greedy(rule),
        )
        .with_event_log();
        let options = RunOptions {
            horizon: u64::MAX,
            drain: 0,
            queue_cap: None,
            record_deliveries: false,
        };
        let report = inv.run(&format!("{kind:?} instability"), sim, &mut adv, &options)?;
        Some((report, adv.records().to_vec()))
    };
    let Some((report, records)) = run_once(inv) else {
        return Verdict::new(false, "simulation failed");
    };
    if let Some((again, _)) = run_once(inv) {
        inv.same(&format!("{kind:?} instability"), &report, &again);
    }
    let mut ok = records.len() == 5 && report.status == RunStatus::Completed;
    let mut sizes = vec![s0];
    let mut queues = vec![s0];
    for rec in &records {
        let need = (growth * rec.s as f64).floor() as i64 - 3;
        ok &= rec.s_next as i64 >= need;
        sizes.push(rec.s_next);
        queues.push(rec.queued_at_end);
    }
    ok &= queues.windows(2).all(|w| w[1] > w[0]);
    Verdict::new(
        ok,
        format!("carried sets {sizes:?} (need s' >= floor({growth} s) - 3), queue at phase ends {queues:?}"),
    )
}

// ---------------------------------------------------------------- 7 and 8

fn ring_setup() -> (ParallelRing, RingParams) {
    (
        ParallelRing::new(8, 3).unwrap(),
        RingParams::compute(0.75, 8, 3, 0.9).unwrap(),
    )
}

fn ring_trace(packets: &[(u64, usize, usize)]) -> InjectionTrace {
    InjectionTrace::new(
        packets
            .iter()
            .map(|&(t, s, d)| TraceEvent::new(t, s, d))
            .collect(),
    )
    .unwrap()
}

fn criterion_7(inv: &mut Invariants) -> Verdict {
    let (ring, params) = ring_setup();
    let bound = params.load_bound();
    let packets = gen_ring_traffic(&ring, &params, 20, 1.0, 7);
    let mut problems = Vec::new();

    let mut offline = Vec::with_capacity(packets.len());
    let mut decisions = 0;
    for k in 0..20 {
        let pairs: Vec<_> = packets
            .iter()
            .filter(|p| params.interval_of(p.0) == k)
            .map(|&(_, s, d)| (s, d))
            .collect();
        let routing = route_offline_derand(&ring, &params, &pairs).unwrap();
        decisions += routing.rings.len();
        if !routing.h_increases().is_empty() {
            problems.push(format!("offline interval {k}: h increased"));
        }
        offline.extend(routing.rings);
    }
    let offline_max = interval_max_loads(&ring, &params, &packets, &offline)
        .into_iter()
        .max()
        .unwrap_or(0);

    let mut router = OnlineRingRouter::new(ring.clone(), params.clone());
    let mut online = Vec::with_capacity(packets.len());
    let mut worst_swap: f64 = 0.0;
    for &(t, s, d) in &packets {
        let dec = router.route(t, s, d).unwrap();
        worst_swap = worst_swap.max((dec.log_h_after_swap - dec.log_h_before_swap).abs());
        if dec.log_h_after > dec.log_h_after_swap + 1e-12 * dec.log_h_after_swap.abs().max(1.0) {
            problems.push(format!(
                "online t {t}: ln h rose from {} to {}",
                dec.log_h_after_swap, dec.log_h_after
            ));
        }
        online.push(dec.ring);
    }
    let online_max = interval_max_loads(&ring, &params, &packets, &online)
        .into_iter()
        .max()
        .unwrap_or(0);
    if worst_swap > 1e-12 {
        problems.push(format!("ghost swap moved ln h by {worst_swap:e}"));
    }
    if offline_max > bound || online_max > bound {
        problems.push(format!("loads {offline_max} / {online_max} exceed {bound}"));
    }

    let build = || {
        Simulator::new(
            ring.network().clone(),
            RingOnline::new(OnlineRingRouter::new(ring.clone(), params.clone())),
            Discipline::Greedy(PriorityRule::Fifo),
        )
    };
    let options = RunOptions {
        horizon: 20 * params.window,
        drain: 10 * params.window,
        queue_cap: None,
        record_deliveries: false,
    };
    let trace = ring_trace(&packets);
    if let Some(report) = inv.run(
        "ring online",
        build().with_event_log(),
        &mut TraceAdversary::new(trace.clone()),
        &options,
    ) {
        if let Some(again) = inv.run(
            "ring online",
            build(),
            &mut TraceAdversary::new(trace),
            &options,
        ) {
            inv.same("ring online", &report, &again);
        }
        if let RouterReport::Ring {
            interval_max_loads, ..
        } = &report.router
        {
            if interval_max_loads.iter().any(|&l| l > bound) {
                problems.push("engine ring run exceeded the bound".into());
            }
        }
    } else {
        problems.push("engine ring run failed".into());
    }

    let pass = params.window == 211 && bound == 197 && problems.is_empty();
    let mut detail = format!(
        "W = {}, bound {bound}; {} packets, {decisions} offline decisions; max load offline {offline_max}, online {online_max}; \
         worst swap change {worst_swap:e}",
        params.window,
        packets.len()
    );
    if let Some(first) = problems.first() {
        detail.push_str(&format!("; first problem: {first}"));
    }
    Verdict::new(pass, detail)
}

fn criterion_8(inv: &mut Invariants) -> Verdict {
    let (ring, params) = ring_setup();
    let intervals = 200;
    let packets = gen_ring_traffic(&ring, &params, intervals, 1.0, 8);
    let build = || {
        Simulator::new(
            ring.network().clone(),
            RingRandom::new(ring.clone(), params.clone(), 8),
            Discipline::Greedy(PriorityRule::Fifo),
        )
    };
    let options = RunOptions {
        horizon: intervals * params.window,
        drain: 10 * params.window,
        queue_cap: None,
        record_deliveries: false,
    };
    let trace = ring_trace(&packets);
    let Some(report) = inv.run(
        "ring random",
        build(),
        &mut TraceAdversary::new(trace.clone()),
        &options,
    ) else {
        return Verdict::new(false, "simulation failed");
    };
    if let Some(again) = inv.run(
        "ring random",
        build(),
        &mut TraceAdversary::new(trace),
        &options,
    ) {
        inv.same("ring random", &report, &again);
    }
    let RouterReport::Ring {
        interval_max_loads, ..
    } = &report.router
    else {
        return Verdict::new(false, "no ring report");
    };
    let threshold = params.overload_threshold();
    let over = interval_max_loads
        .iter()
        .take(intervals as usize)
        .filter(|&&l| l as f64 > threshold)
        .count();
    let fraction = over as f64 / intervals as f64;
    let max = interval_max_loads.iter().max().copied().unwrap_or(0);
    Verdict::new(
        fraction <= params.beta,
        format!("{over}/{intervals} intervals above (1+eps) r W = {threshold:.2} (fraction {fraction:.3} <= beta {}); max load {max}", params.beta),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9(inv: &Invariants) -> Verdict {
    let pass = inv.failures.is_empty()
        && inv.runs > 0
        && inv.determinism_checks > 0
        && inv.logged_serves > 0;
    let mut detail = format!(
        "{} engine runs, {} logged transmissions checked for unit capacity, {} determinism reruns, {} violations",
        inv.runs,
        inv.logged_serves,
        inv.determinism_checks,
        inv.failures.len()
    );
    if let Some(first) = inv.failures.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    Verdict::new(pass, detail)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut inv = Invariants::default();
    let mut verdicts = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Vec<Verdict>| {
        let t = Instant::now();
        let vs = f();
        let secs = t.elapsed().as_secs_f64() / vs.len() as f64;
        verdicts.extend(vs.into_iter().map(|v| (name, v, secs)));
    };
    timed("source routing load and D_t bounds", &mut || {
        let routing = source_routing_runs(&mut inv);
        vec![criterion_1(&routing), criterion_2(&routing)]
    });
    timed("weak (10, 0.5) implies strong (40, 0.75)", &mut || {
        vec![criterion_3()]
    });
    timed("deadline certificate mode", &mut || {
        vec![criterion_4(&mut inv)]
    });
    timed("FIFO instability on G, r = 0.95", &mut || {
        vec![instability(&mut inv, InstabilityKind::Fifo, 0.95, 1.297)]
    });
    timed("NTG instability on G, r = 0.8", &mut || {
        vec![instability(&mut inv, InstabilityKind::Ntg, 0.8, 1.28)]
    });
    timed("ring derandomization, offline and online", &mut || {
        vec![criterion_7(&mut inv)]
    });
    timed("randomized ring baseline", &mut || {
        vec![criterion_8(&mut inv)]
    });
    verdicts.push(("engine invariants", criterion_9(&inv), 0.0));
    verdicts[1].0 = "D_i <= D_(i-1) / (1 - r mu) per window";
    let mut all = true;
    for (i, (name, v, secs)) in verdicts.iter().enumerate() {
        all &= v.pass;
        let verdict = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {}: {verdict} - {name}: {} [{secs:.1}s]",
            i + 1,
            v.detail
        );
    }
    println!(
        "acceptance finished in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
