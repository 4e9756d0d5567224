use thiserror::Error;

use crate::model::{LinkId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "node ids must be contiguous from 0: node {missing} is never referenced (max id {max})"
    )]
    NonContiguousNodes { missing: NodeId, max: NodeId },
    #[error("link {link} references node {node}, but the network has only {n} nodes")]
    NodeOutOfRange {
        link: LinkId,
        node: NodeId,
        n: usize,
    },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("destination {dst} is unreachable from {src}")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("trace event {index} has no path")]
    MissingPath { index: usize },
    #[error("trace is not sorted by injection time at event {index}")]
    UnsortedTrace { index: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("operation `{op}` is not available for the {variant} variant")]
    WrongVariant {
        op: &'static str,
        variant: &'static str,
    },
    #[error("packet {packet} has a path of {len} links, longer than d_max = {d_max}")]
    PathTooLong {
        packet: usize,
        len: usize,
        d_max: usize,
    },
    #[error("packet {packet} was injected at {time}, outside M-interval [{start}, {end})")]
    OutsideInterval {
        packet: usize,
        time: u64,
        start: u64,
        end: u64,
    },
    #[error("parameter iteration did not converge after {0} rounds")]
    NonConvergence(usize),
    #[error("no ghost packet left on hop {hop}: the injection stream exceeds c*r*W on that hop")]
    GhostUnderflow { hop: usize },
    #[error("cannot select from an empty queue")]
    EmptyQueue,
    #[error("step {step}: invariant violated: {what}")]
    Invariant { step: u64, what: String },
    #[error("configuration rejected: {0}")]
    Config(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
