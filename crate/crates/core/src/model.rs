//! Network topology, packets, paths and injection traces.
//!
//! A [`Network`] is a directed multigraph whose links are numbered densely
//! `0..m` in construction order. Every link serves one unit-size packet per
//! step; there are no capacities or failures.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub tail: NodeId,
    pub head: NodeId,
    pub label: String,
}

/// Directed multigraph with dense node and link ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    n: usize,
    links: Vec<Link>,
    out: Vec<Vec<LinkId>>,
}

/// On-disk form: `{"nodes": n, "links": [[tail, head, "label"], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: usize,
    pub links: Vec<(NodeId, NodeId, String)>,
}

impl Network {
    /// Builds a network on nodes `0..n`. Link ids follow the order of `spec`.
    pub fn new<I, S>(n: usize, spec: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId, S)>,
        S: Into<String>,
    {
        let mut links = Vec::new();
        let mut out = vec![Vec::new(); n];
        for (id, (tail, head, label)) in spec.into_iter().enumerate() {
            for node in [tail, head] {
                if node >= n {
                    return Err(Error::NodeOutOfRange { link: id, node, n });
                }
            }
            out[tail].push(id);
            links.push(Link {
                id,
                tail,
                head,
                label: label.into(),
            });
        }
        Ok(Self { n, links, out })
    }

    /// Builds a network whose node count is inferred from the links. Every
    /// id between 0 and the largest referenced id must appear.
    pub fn from_links<I, S>(spec: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId, S)>,
        S: Into<String>,
    {
        let spec: Vec<(NodeId, NodeId, String)> =
            spec.into_iter().map(|(t, h, l)| (t, h, l.into())).collect();
        let Some(max) = spec.iter().map(|&(t, h, _)| t.max(h)).max() else {
            return Self::new(0, spec);
        };
        let mut seen = vec![false; max + 1];
        for &(t, h, _) in &spec {
            seen[t] = true;
            seen[h] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::NonContiguousNodes { missing, max });
        }
        Self::new(max + 1, spec)
    }

    pub fn from_file_format(file: NetworkFile) -> Result<Self> {
        Self::new(file.nodes, file.links)
    }

    pub fn to_file_format(&self) -> NetworkFile {
        NetworkFile {
            nodes: self.n,
            links: self
                .links
                .iter()
                .map(|l| (l.tail, l.head, l.label.clone()))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file_format(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file_format()).expect("network serializes")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn out_links(&self, node: NodeId) -> &[LinkId] {
        &self.out[node]
    }

    /// Checks that `path` is a link-simple walk from `src` to `dst`.
    pub fn validate_path(&self, path: &Path, src: NodeId, dst: NodeId) -> Result<()> {
        let mut at = src;
        let mut used = vec![false; self.m()];
        for (k, &id) in path.links.iter().enumerate() {
            let link = self
                .links
                .get(id)
                .ok_or_else(|| Error::InvalidPath(format!("unknown link {id}")))?;
            if link.tail != at {
                return Err(Error::InvalidPath(format!(
                    "link {id} at position {k} starts at {} but the walk is at {at}",
                    link.tail
                )));
            }
            if std::mem::replace(&mut used[id], true) {
                return Err(Error::InvalidPath(format!("link {id} repeated")));
            }
            at = link.head;
        }
        if at != dst {
            return Err(Error::InvalidPath(format!(
                "path ends at {at}, expected {dst}"
            )));
        }
        Ok(())
    }

    /// Minimum-weight path from `src` to `dst`.
    ///
    /// Ties are broken by fewer links, then by the lexicographically smallest
    /// link-id sequence, so the result is a pure function of the inputs.
    /// Weights must be finite and non-negative, one per link.
    pub fn shortest_path(&self, weights: &[f64], src: NodeId, dst: NodeId) -> Option<Path> {
        debug_assert_eq!(weights.len(), self.m());
        debug_assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        if src == dst {
            return Some(Path::default());
        }
        let mut best: Vec<Option<Label>> = vec![None; self.n];
        let mut done = vec![false; self.n];
        let mut heap = BinaryHeap::new();
        let start = Label {
            weight: 0.0,
            links: Vec::new(),
            node: src,
        };
        best[src] = Some(start.clone());
        heap.push(std::cmp::Reverse(start));
        while let Some(std::cmp::Reverse(label)) = heap.pop() {
            if done[label.node] {
                continue;
            }
            done[label.node] = true;
            if label.node == dst {
                return Some(Path { links: label.links });
            }
            for &id in &self.out[label.node] {
                let head = self.links[id].head;
                if done[head] {
                    continue;
                }
                let mut links = label.links.clone();
                links.push(id);
                let next = Label {
                    weight: label.weight + weights[id],
                    links,
                    node: head,
                };
                if best[head].as_ref().is_none_or(|b| next < *b) {
                    best[head] = Some(next.clone());
                    heap.push(std::cmp::Reverse(next));
                }
            }
        }
        None
    }

    /// Path with the fewest links (unit weights, same tie-break).
    pub fn min_hop_path(&self, src: NodeId, dst: NodeId) -> Option<Path> {
        self.shortest_path(&vec![1.0; self.m()], src, dst)
    }

    pub fn path_weight(&self, weights: &[f64], path: &Path) -> f64 {
        path.links.iter().map(|&l| weights[l]).sum()
    }
}

#[derive(Debug, Clone)]
struct Label {
    weight: f64,
    links: Vec<LinkId>,
    node: NodeId,
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.links.len().cmp(&other.links.len()))
            .then_with(|| self.links.cmp(&other.links))
            .then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label {}

/// Ordered list of link ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path {
    pub links: Vec<LinkId>,
}

impl Path {
    pub fn new(links: Vec<LinkId>) -> Self {
        Self { links }
    }

    /// Number of links.
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, link: LinkId) -> bool {
        self.links.contains(&link)
    }

    pub fn first(&self) -> Option<LinkId> {
        self.links.first().copied()
    }
}

impl From<Vec<LinkId>> for Path {
    fn from(links: Vec<LinkId>) -> Self {
        Self { links }
    }
}

pub fn path_length(path: &Path) -> usize {
    path.len()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: usize,
    pub inject_time: u64,
    pub source: NodeId,
    pub dest: NodeId,
    pub path: Option<Path>,
    /// One step index per path link, spaced exactly `T` apart.
    pub deadlines: Option<Vec<u64>>,
}

/// One injection. JSON Lines form: `{"t": 3, "src": 0, "dst": 2, "path": [0, 4]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u64,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Path>,
}

impl TraceEvent {
    pub fn new(t: u64, src: NodeId, dst: NodeId) -> Self {
        Self {
            t,
            src,
            dst,
            path: None,
        }
    }

    pub fn with_path(t: u64, src: NodeId, dst: NodeId, path: Path) -> Self {
        Self {
            t,
            src,
            dst,
            path: Some(path),
        }
    }
}

/// Injection events sorted by time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InjectionTrace {
    events: Vec<TraceEvent>,
}

impl InjectionTrace {
    pub fn new(events: Vec<TraceEvent>) -> Result<Self> {
        if let Some(index) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::UnsortedTrace { index: index + 1 });
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends an event; it must not precede the last one.
    pub fn push(&mut self, event: TraceEvent) -> Result<()> {
        if self.events.last().is_some_and(|last| event.t < last.t) {
            return Err(Error::UnsortedTrace {
                index: self.events.len(),
            });
        }
        self.events.push(event);
        Ok(())
    }

    /// One past the last injection time, or 0 for an empty trace.
    pub fn horizon(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t + 1)
    }

    /// Paths of all events, failing on the first event without one.
    pub fn paths(&self) -> Result<Vec<&Path>> {
        self.events
            .iter()
            .enumerate()
            .map(|(index, e)| e.path.as_ref().ok_or(Error::MissingPath { index }))
            .collect()
    }

    pub fn to_packets(&self) -> Vec<Packet> {
        self.events
            .iter()
            .enumerate()
            .map(|(id, e)| Packet {
                id,
                inject_time: e.t,
                source: e.src,
                dest: e.dst,
                path: e.path.clone(),
                deadlines: None,
            })
            .collect()
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line).map_err(|source| Error::Parse {
                line: i + 1,
                source,
            })?;
            events.push(event);
        }
        Self::new(events)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut writer, event)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}
