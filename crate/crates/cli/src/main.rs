use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use srsched::admissibility::{check_strong, check_weak};
use srsched::adversary::{
    gen_fifo_instability, gen_ntg_instability, gen_random_admissible, PhaseRecord,
};
use srsched::deadline::SchedulerParams;
use srsched::engine::{
    AdversaryPaths, DeadlineMode, Discipline, RunOptions, RunStatus, SimReport, Simulator,
    TraceAdversary,
};
use srsched::experiment::{run, Outcome, SchedulerConfig, SimConfig};
use srsched::model::{InjectionTrace, Network, TraceEvent};
use srsched::ring::{
    interval_max_loads, route_offline_derand, OnlineRingRouter, ParallelRing, RandomRingRouter,
    RingParams,
};
use srsched::routing::{PhaseDiagnostics, RoutingParams, SourceRouter, Variant};
use srsched::sched::PriorityRule;
use srsched::Error;

#[derive(Parser)]
#[command(
    name = "srsched",
    version,
    about = "Adversarial-queueing routing and scheduling simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a trace for (w, r)-admissibility and print the report as JSON.
    Admissibility {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        w: u64,
        #[arg(long)]
        r: f64,
        /// Check weak (partition-window) admissibility instead of strong.
        #[arg(long)]
        weak: bool,
    },
    /// Route a trace with the online source router.
    Route {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        r: f64,
        /// Target rate R.
        #[arg(long = "R")]
        target: f64,
        #[arg(long)]
        w: u64,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Path-annotated trace (JSON Lines); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Phase diagnostics CSV.
        #[arg(long, default_value = "diagnostics.csv")]
        diagnostics: PathBuf,
    },
    /// Deadline-schedule a trace and report per-packet delays.
    Schedule {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Deadline spacing T; needs --M.
        #[arg(long = "T", requires = "interval")]
        spacing: Option<u64>,
        /// M-interval length; needs --T.
        #[arg(long = "M", requires = "spacing")]
        interval: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adversary window w, a lower bound for M.
        #[arg(long, default_value_t = 1)]
        w: u64,
        /// Delay CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "certificate.json")]
        certificate: PathBuf,
    },
    /// Generate an adversarial injection trace.
    Adversary {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 1000)]
        s0: u64,
        #[arg(long, default_value_t = 5)]
        phases: usize,
        #[arg(long)]
        out: PathBuf,
        /// Network for the random kind.
        #[arg(long, required_if_eq("kind", "random"))]
        net: Option<PathBuf>,
        /// Window for the random kind.
        #[arg(long, default_value_t = 50)]
        w: u64,
        #[arg(long, default_value_t = 1000)]
        horizon: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Route traffic on a ring with parallel links.
    Ring {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, value_enum)]
        mode: RingModeArg,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ring assignments CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "interval_loads.csv")]
        loads: PathBuf,
    },
    /// Run a simulation described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the greedy queueing rule (edf selects the deadline scheduler).
        #[arg(long, value_enum)]
        sched: Option<SchedArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Perpacket,
    Batched,
    Inband,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Perpacket => Variant::PerPacket,
            VariantArg::Batched => Variant::Batched,
            VariantArg::Inband => Variant::InBand,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Derand,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Random,
    FifoG,
    NtgG,
}

#[derive(Clone, Copy, ValueEnum)]
enum RingModeArg {
    Random,
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedArg {
    Fifo,
    Lifo,
    Ntg,
    Ftg,
    Lis,
    Sis,
    Edf,
}

impl From<SchedArg> for PriorityRule {
    fn from(s: SchedArg) -> Self {
        match s {
            SchedArg::Fifo => PriorityRule::Fifo,
            SchedArg::Lifo => PriorityRule::Lifo,
            SchedArg::Ntg => PriorityRule::Ntg,
            SchedArg::Ftg => PriorityRule::Ftg,
            SchedArg::Lis => PriorityRule::Lis,
            SchedArg::Sis => PriorityRule::Sis,
            SchedArg::Edf => PriorityRule::Edf,
        }
    }
}

const EXIT_INVARIANT: u8 = 2;
const EXIT_CAP: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let invariant = err
                .downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Invariant { .. }));
            ExitCode::from(if invariant { EXIT_INVARIANT } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Admissibility { trace, w, r, weak } => {
            let trace = read_trace(&trace)?;
            let report = if weak {
                check_weak(&trace, w, r)?
            } else {
                check_strong(&trace, w, r)?
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Route {
            net,
            trace,
            r,
            target,
            w,
            variant,
            out,
            diagnostics,
        } => {
            let net = read_network(&net)?;
            let trace = read_trace(&trace)?;
            let params = RoutingParams::compute(r, target, w, net.m(), variant.into())?;
            let (routed, phases) = route_trace(&net, &trace, params)?;
            write_trace(&routed, out.as_deref())?;
            write_diagnostics(&phases, &diagnostics)?;
        }
        Command::Schedule {
            net,
            trace,
            epsilon,
            mode,
            spacing,
            interval,
            seed,
            w,
            out,
            certificate,
        } => {
            let net = read_network(&net)?;
            let trace = with_min_hop_paths(&net, read_trace(&trace)?)?;
            let d_max = trace
                .paths()?
                .iter()
                .map(|p| p.len())
                .max()
                .unwrap_or(1)
                .max(1);
            let params = match (spacing, interval) {
                (Some(t), Some(m)) => {
                    SchedulerParams::with_spacing(epsilon, net.m(), w, d_max, t, m)?
                }
                _ => SchedulerParams::compute(epsilon, net.m(), w, d_max)?,
            };
            let mode = match mode {
                ModeArg::Random => DeadlineMode::Random,
                ModeArg::Derand => DeadlineMode::Derand,
            };
            let horizon = trace.horizon();
            let sim = Simulator::new(
                net,
                AdversaryPaths,
                Discipline::Deadline {
                    params: params.clone(),
                    mode,
                    seed,
                },
            );
            let options = RunOptions {
                horizon,
                drain: 2 * params.interval + horizon,
                queue_cap: None,
                record_deliveries: true,
            };
            let (report, _) = sim.run(&mut TraceAdversary::new(trace), &options)?;
            write_deliveries(&report, out.as_deref())?;
            #[derive(Serialize)]
            struct Certificate<'a> {
                params: &'a SchedulerParams,
                delivered: u64,
                injected: u64,
                deadline: &'a Option<srsched::engine::DeadlineStats>,
            }
            let cert = Certificate {
                params: &params,
                delivered: report.delivered,
                injected: report.injected,
                deadline: &report.deadline,
            };
            std::fs::write(&certificate, serde_json::to_string_pretty(&cert)?)
                .with_context(|| format!("writing {}", certificate.display()))?;
        }
        Command::Adversary {
            kind,
            r,
            s0,
            phases,
            out,
            net,
            w,
            horizon,
            seed,
        } => {
            let (trace, records): (InjectionTrace, Vec<PhaseRecord>) = match kind {
                KindArg::Random => {
                    let net = read_network(net.as_deref().context("--net is required")?)?;
                    (
                        gen_random_admissible(&net, w, r, horizon, net.m(), seed)?,
                        Vec::new(),
                    )
                }
                KindArg::FifoG => gen_fifo_instability(r, s0, phases)?,
                KindArg::NtgG => gen_ntg_instability(r, s0, phases)?,
            };
            write_trace(&trace, Some(&out))?;
            for rec in &records {
                eprintln!("{}", serde_json::to_string(rec)?);
            }
        }
        Command::Ring {
            n,
            c,
            r,
            beta,
            mode,
            trace,
            seed,
            out,
            loads,
        } => {
            let ring = ParallelRing::new(n, c)?;
            let params = RingParams::compute(r, n, c, beta)?;
            let packets: Vec<_> = read_trace(&trace)?
                .events()
                .iter()
                .map(|e| (e.t, e.src, e.dst))
                .collect();
            let rings = route_ring(&ring, &params, &packets, mode, seed)?;
            let mut w = csv_writer(out.as_deref())?;
            w.write_record(["t", "src", "dst", "ring"])?;
            for (&(t, s, d), ring) in packets.iter().zip(&rings) {
                w.serialize((t, s, d, ring))?;
            }
            w.flush()?;
            let maxima = interval_max_loads(&ring, &params, &packets, &rings);
            let mut w = csv::Writer::from_path(&loads)
                .with_context(|| format!("writing {}", loads.display()))?;
            w.write_record(["interval", "max_load", "load_bound"])?;
            for (i, m) in maxima.iter().enumerate() {
                w.serialize((i, m, params.load_bound()))?;
            }
            w.flush()?;
        }
        Command::Simulate { config, sched } => {
            let mut config = SimConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = sched {
                override_scheduler(&mut config, s.into())?;
            }
            let outcome = run(&config)?;
            write_outputs(&config, &outcome)?;
            let report = &outcome.report;
            #[derive(Serialize)]
            struct Summary {
                status: RunStatus,
                steps: u64,
                injected: u64,
                delivered: u64,
                queued: u64,
                max_total_queue: u64,
                max_delay: Option<u64>,
            }
            let summary = Summary {
                status: report.status,
                steps: report.steps,
                injected: report.injected,
                delivered: report.delivered,
                queued: report.queued,
                max_total_queue: report.max_total_queue,
                max_delay: config.record_deliveries.then(|| report.max_delay()),
            };
            println!("{}", serde_json::to_string(&summary)?);
            if let RunStatus::CapReached { .. } = report.status {
                return Ok(ExitCode::from(EXIT_CAP));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn override_scheduler(config: &mut SimConfig, rule: PriorityRule) -> anyhow::Result<()> {
    match (&config.scheduler, rule) {
        (SchedulerConfig::Deadline { .. }, PriorityRule::Edf) => {}
        (_, PriorityRule::Edf) => {
            bail!("--sched edf needs a deadline scheduler section in the config")
        }
        _ => config.scheduler = SchedulerConfig::Greedy { rule },
    }
    Ok(())
}

fn route_trace(
    net: &Network,
    trace: &InjectionTrace,
    params: RoutingParams,
) -> anyhow::Result<(InjectionTrace, Vec<PhaseDiagnostics>)> {
    let mut router = SourceRouter::new(params, net)?;
    let mut phases = Vec::new();
    let mut events = Vec::with_capacity(trace.len());
    for e in trace.events() {
        phases.extend(router.advance_to(e.t)?);
        let path = router.route_packet(e.src, e.dst)?;
        events.push(TraceEvent::with_path(e.t, e.src, e.dst, path));
    }
    phases.extend(router.advance_to(trace.horizon())?);
    let partial = router.partial_diagnostics();
    if !partial.log_d_per_window.is_empty() {
        phases.push(partial);
    }
    Ok((InjectionTrace::new(events)?, phases))
}

fn route_ring(
    ring: &ParallelRing,
    params: &RingParams,
    packets: &[(u64, usize, usize)],
    mode: RingModeArg,
    seed: u64,
) -> anyhow::Result<Vec<usize>> {
    Ok(match mode {
        RingModeArg::Random => {
            let mut router = RandomRingRouter::new(ring.c(), seed);
            packets.iter().map(|_| router.route_random()).collect()
        }
        RingModeArg::Online => {
            let mut router = OnlineRingRouter::new(ring.clone(), params.clone());
            packets
                .iter()
                .map(|&(t, s, d)| router.route(t, s, d).map(|dec| dec.ring))
                .collect::<Result<_, _>>()?
        }
        RingModeArg::Offline => {
            let mut rings = Vec::with_capacity(packets.len());
            let mut start = 0;
            while start < packets.len() {
                let interval = params.interval_of(packets[start].0);
                let end = start
                    + packets[start..]
                        .iter()
                        .take_while(|p| params.interval_of(p.0) == interval)
                        .count();
                let pairs: Vec<_> = packets[start..end]
                    .iter()
                    .map(|&(_, s, d)| (s, d))
                    .collect();
                rings.extend(route_offline_derand(ring, params, &pairs)?.rings);
                start = end;
            }
            rings
        }
    })
}

fn with_min_hop_paths(net: &Network, trace: InjectionTrace) -> anyhow::Result<InjectionTrace> {
    let events = trace
        .into_events()
        .into_iter()
        .map(|mut e| {
            if e.path.is_none() {
                e.path = Some(net.min_hop_path(e.src, e.dst).ok_or(Error::Unreachable {
                    src: e.src,
                    dst: e.dst,
                })?);
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(InjectionTrace::new(events)?)
}

fn read_network(path: &FsPath) -> anyhow::Result<Network> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Network::from_json(&text)?)
}

fn read_trace(path: &FsPath) -> anyhow::Result<InjectionTrace> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InjectionTrace::read_jsonl(BufReader::new(file))?)
}

fn output(path: Option<&FsPath>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("writing {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn csv_writer(path: Option<&FsPath>) -> anyhow::Result<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(output(path)?))
}

fn write_trace(trace: &InjectionTrace, path: Option<&FsPath>) -> anyhow::Result<()> {
    let mut out = output(path)?;
    trace.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_diagnostics(phases: &[PhaseDiagnostics], path: &FsPath) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["phase", "window", "d", "max_load"])?;
    for p in phases {
        w.serialize((p.phase, 0, p.log_d0.exp(), 0))?;
        for (i, (ld, load)) in p
            .log_d_per_window
            .iter()
            .zip(&p.max_load_per_window)
            .enumerate()
        {
            w.serialize((p.phase, i + 1, ld.exp(), load))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_deliveries(report: &SimReport, path: Option<&FsPath>) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["packet", "inject", "deliver", "delay"])?;
    for d in &report.deliveries {
        w.serialize((d.packet, d.inject, d.deliver, d.delay))?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(config: &SimConfig, outcome: &Outcome) -> anyhow::Result<()> {
    let o = &config.outputs;
    if let Some(p) = &o.report {
        std::fs::write(p, serde_json::to_string_pretty(outcome)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &o.queue_series {
        let mut w = csv_writer(Some(p))?;
        w.write_record(["t", "queued"])?;
        for (t, q) in outcome.report.queue_series.iter().enumerate() {
            w.serialize((t, q))?;
        }
        w.flush()?;
    }
    if let Some(p) = &o.deliveries {
        write_deliveries(&outcome.report, Some(p))?;
    }
    if let (Some(p), Some(events)) = (&o.events, &outcome.events) {
        let mut out = output(Some(p))?;
        for e in events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}
