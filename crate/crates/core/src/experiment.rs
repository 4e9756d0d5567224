//! JSON-configured simulation runs.
//!
//! A [`SimConfig`] names a network, an injection source, one router and one
//! scheduler. [`run`] builds the pieces, drives the [`Simulator`] and returns
//! everything a caller may want to write out.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{
    gen_random_admissible, InstabilityAdversary, InstabilityKind, NetworkG, PhaseRecord,
};
use crate::deadline::SchedulerParams;
use crate::engine::{
    AdversaryPaths, DeadlineMode, Discipline, LogEvent, RingOnline, RingRandom, Router, RunOptions,
    SimReport, Simulator, SourceRouting, TraceAdversary,
};
use crate::model::{InjectionTrace, Network, TraceEvent};
use crate::ring::{gen_ring_traffic, OnlineRingRouter, ParallelRing, RingParams};
use crate::routing::{inband_tau, RoutingParams, SourceRouter, Variant};
use crate::sched::PriorityRule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    File {
        path: PathBuf,
    },
    /// The two-crossing network of the instability constructions.
    G,
    /// `c` parallel rings on `n` nodes.
    Ring {
        n: usize,
        c: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    File {
        path: PathBuf,
    },
    /// Random weakly `(w, r)`-admissible traffic over `horizon` steps.
    Random {
        w: u64,
        r: f64,
        horizon: u64,
        d_max: Option<usize>,
    },
    /// Adaptive FIFO construction on network G.
    FifoG {
        r: f64,
        s0: u64,
        phases: usize,
        #[serde(default = "yes")]
        merge_wait: bool,
    },
    /// Adaptive NTG construction on network G.
    NtgG {
        r: f64,
        s0: u64,
        phases: usize,
    },
    /// Random ring traffic over `intervals` W-intervals.
    Ring {
        r: f64,
        beta: f64,
        intervals: u64,
        #[serde(default = "one")]
        fill: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterConfig {
    /// Paths carried by the trace.
    None,
    Source {
        r: f64,
        target_rate: f64,
        w: u64,
        variant: Variant,
        #[serde(default)]
        concrete_inband: bool,
    },
    RingOnline {
        r: f64,
        beta: f64,
    },
    RingRandom {
        r: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerConfig {
    Greedy {
        rule: PriorityRule,
    },
    /// Deadline scheduler; `spacing` and `interval` (T and M) default to the
    /// computed values.
    Deadline {
        epsilon: f64,
        mode: DeadlineMode,
        w: u64,
        d_max: Option<usize>,
        spacing: Option<u64>,
        interval: Option<u64>,
    },
}

/// Files a run writes; all optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Full report as JSON.
    pub report: Option<PathBuf>,
    /// Per-step total queue size as CSV.
    pub queue_series: Option<PathBuf>,
    /// Per-packet delays as CSV.
    pub deliveries: Option<PathBuf>,
    /// Event log as JSON Lines.
    pub events: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub network: NetworkSource,
    pub trace: TraceSource,
    pub router: RouterConfig,
    pub scheduler: SchedulerConfig,
    /// Injection steps; defaults to the trace length.
    pub horizon: Option<u64>,
    #[serde(default)]
    pub drain: u64,
    #[serde(default)]
    pub seed: u64,
    pub queue_cap: Option<u64>,
    #[serde(default = "yes")]
    pub record_deliveries: bool,
    #[serde(default)]
    pub outputs: Outputs,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, dir: &FsPath) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let NetworkSource::File { path } = &mut self.network {
            fix(path);
        }
        if let TraceSource::File { path } = &mut self.trace {
            fix(path);
        }
        let o = &mut self.outputs;
        for p in [
            &mut o.report,
            &mut o.queue_series,
            &mut o.deliveries,
            &mut o.events,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub report: SimReport,
    /// Present when `outputs.events` is set.
    pub events: Option<Vec<LogEvent>>,
    /// Phases of an instability adversary.
    pub phases: Option<Vec<PhaseRecord>>,
}

enum Net {
    Plain(Network),
    G(NetworkG),
    Ring(ParallelRing),
}

impl Net {
    fn network(&self) -> &Network {
        match self {
            Net::Plain(net) => net,
            Net::G(g) => g.network(),
            Net::Ring(ring) => ring.network(),
        }
    }

    fn ring(&self, what: &str) -> Result<&ParallelRing> {
        match self {
            Net::Ring(ring) => Ok(ring),
            _ => Err(Error::Config(format!("{what} needs a ring network"))),
        }
    }
}

fn load_network(source: &NetworkSource) -> Result<Net> {
    Ok(match source {
        NetworkSource::File { path } => {
            Net::Plain(Network::from_json(&std::fs::read_to_string(path)?)?)
        }
        NetworkSource::G => Net::G(NetworkG::new()),
        NetworkSource::Ring { n, c } => Net::Ring(ParallelRing::new(*n, *c)?),
    })
}

enum Injections {
    Trace(InjectionTrace),
    Instability(Box<InstabilityAdversary>),
}

fn load_injections(source: &TraceSource, net: &Net, seed: u64) -> Result<Injections> {
    let instability = |kind, r, s0, phases, merge_wait| -> Result<Injections> {
        if !matches!(net, Net::G(_)) {
            return Err(Error::Config(
                "instability adversaries run on network g".into(),
            ));
        }
        let adv = InstabilityAdversary::new(kind, r, s0, phases)?.with_merge_wait(merge_wait);
        Ok(Injections::Instability(Box::new(adv)))
    };
    match source {
        TraceSource::File { path } => {
            let reader = BufReader::new(File::open(path)?);
            Ok(Injections::Trace(InjectionTrace::read_jsonl(reader)?))
        }
        TraceSource::Random {
            w,
            r,
            horizon,
            d_max,
        } => {
            let d_max = d_max.unwrap_or(net.network().m());
            Ok(Injections::Trace(gen_random_admissible(
                net.network(),
                *w,
                *r,
                *horizon,
                d_max,
                seed,
            )?))
        }
        TraceSource::FifoG {
            r,
            s0,
            phases,
            merge_wait,
        } => instability(InstabilityKind::Fifo, *r, *s0, *phases, *merge_wait),
        TraceSource::NtgG { r, s0, phases } => {
            instability(InstabilityKind::Ntg, *r, *s0, *phases, false)
        }
        TraceSource::Ring {
            r,
            beta,
            intervals,
            fill,
        } => {
            let ring = net.ring("ring traffic")?;
            let params = RingParams::compute(*r, ring.n(), ring.c(), *beta)?;
            let events = gen_ring_traffic(ring, &params, *intervals, *fill, seed)
                .into_iter()
                .map(|(t, s, d)| TraceEvent::new(t, s, d))
                .collect();
            Ok(Injections::Trace(InjectionTrace::new(events)?))
        }
    }
}

fn discipline(config: &SchedulerConfig, net: &Network, seed: u64) -> Result<Discipline> {
    Ok(match config {
        SchedulerConfig::Greedy { rule } => {
            if *rule == PriorityRule::Edf {
                return Err(Error::Config("edf needs the deadline scheduler".into()));
            }
            Discipline::Greedy(*rule)
        }
        SchedulerConfig::Deadline {
            epsilon,
            mode,
            w,
            d_max,
            spacing,
            interval,
        } => {
            let d_max = d_max.unwrap_or(net.m());
            let params = match (spacing, interval) {
                (Some(t), Some(m)) => {
                    SchedulerParams::with_spacing(*epsilon, net.m(), *w, d_max, *t, *m)?
                }
                (None, None) => SchedulerParams::compute(*epsilon, net.m(), *w, d_max)?,
                _ => {
                    return Err(Error::Config(
                        "set both spacing and interval, or neither".into(),
                    ))
                }
            };
            Discipline::Deadline {
                params,
                mode: *mode,
                seed,
            }
        }
    })
}

/// Builds and runs the simulation described by `config`.
pub fn run(config: &SimConfig) -> Result<Outcome> {
    let net = load_network(&config.network)?;
    let injections = load_injections(&config.trace, &net, config.seed)?;
    let discipline = discipline(&config.scheduler, net.network(), config.seed)?;
    let horizon = match (&injections, config.horizon) {
        (_, Some(h)) => h,
        (Injections::Trace(trace), None) => trace.horizon(),
        (Injections::Instability(_), None) => u64::MAX,
    };
    let options = RunOptions {
        horizon,
        drain: config.drain,
        queue_cap: config.queue_cap,
        record_deliveries: config.record_deliveries,
    };
    let want_log = config.outputs.events.is_some();
    let mut job = Job {
        net: net.network().clone(),
        discipline,
        options,
        want_log,
        injections,
        control_bound: None,
    };
    match &config.router {
        RouterConfig::None => job.run(AdversaryPaths),
        RouterConfig::Source {
            r,
            target_rate,
            w,
            variant,
            concrete_inband,
        } => {
            let params = RoutingParams::compute(*r, *target_rate, *w, job.net.m(), *variant)?;
            let router = SourceRouting::new(SourceRouter::new(params, &job.net)?);
            if *concrete_inband {
                job.control_bound = Some(inband_tau(&job.net));
                job.run(router.with_concrete_inband()?)
            } else {
                job.run(router)
            }
        }
        RouterConfig::RingOnline { r, beta } => {
            let ring = net.ring("the online ring router")?.clone();
            let params = RingParams::compute(*r, ring.n(), ring.c(), *beta)?;
            job.run(RingOnline::new(OnlineRingRouter::new(ring, params)))
        }
        RouterConfig::RingRandom { r, beta } => {
            let ring = net.ring("the random ring router")?.clone();
            let params = RingParams::compute(*r, ring.n(), ring.c(), *beta)?;
            job.run(RingRandom::new(ring, params, config.seed))
        }
    }
}

struct Job {
    net: Network,
    discipline: Discipline,
    options: RunOptions,
    want_log: bool,
    injections: Injections,
    control_bound: Option<u64>,
}

impl Job {
    fn run<R: Router>(self, router: R) -> Result<Outcome> {
        let mut sim = Simulator::new(self.net, router, self.discipline);
        if self.want_log {
            sim = sim.with_event_log();
        }
        if let Some(tau) = self.control_bound {
            sim = sim.with_control_bound(tau);
        }
        let (report, sim, phases) = match self.injections {
            Injections::Trace(trace) => {
                let (report, sim) = sim.run(&mut TraceAdversary::new(trace), &self.options)?;
                (report, sim, None)
            }
            Injections::Instability(mut adv) => {
                let (report, sim) = sim.run(adv.as_mut(), &self.options)?;
                (report, sim, Some(adv.records().to_vec()))
            }
        };
        Ok(Outcome {
            report,
            events: sim.event_log().map(<[LogEvent]>::to_vec),
            phases,
        })
    }
}
