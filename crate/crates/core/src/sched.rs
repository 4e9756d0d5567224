//! Queueing disciplines as priority rules over a link's queue.
//!
//! Every rule is greedy: a nonempty queue serves exactly one packet per step.
//! Keys are totally ordered with the packet id as the final tie-break, and
//! control packets always precede data packets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityRule {
    /// Earliest arrival at this link.
    Fifo,
    /// Latest arrival at this link.
    Lifo,
    /// Fewest hops remaining (the current link counts).
    Ntg,
    /// Most hops remaining.
    Ftg,
    /// Earliest injection.
    Lis,
    /// Latest injection.
    Sis,
    /// Smallest deadline for this link, then earliest injection.
    Edf,
}

impl PriorityRule {
    pub const GREEDY: [PriorityRule; 6] = [
        PriorityRule::Fifo,
        PriorityRule::Lifo,
        PriorityRule::Ntg,
        PriorityRule::Ftg,
        PriorityRule::Lis,
        PriorityRule::Sis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorityRule::Fifo => "fifo",
            PriorityRule::Lifo => "lifo",
            PriorityRule::Ntg => "ntg",
            PriorityRule::Ftg => "ftg",
            PriorityRule::Lis => "lis",
            PriorityRule::Sis => "sis",
            PriorityRule::Edf => "edf",
        }
    }

    /// Sort key; the smallest key is served first.
    pub fn key(self, p: &QueuedPacket) -> PriorityKey {
        let (primary, secondary) = match self {
            PriorityRule::Fifo => (p.arrival as i64, 0),
            PriorityRule::Lifo => (-(p.arrival as i64), 0),
            PriorityRule::Ntg => (p.remaining_hops as i64, 0),
            PriorityRule::Ftg => (-(p.remaining_hops as i64), 0),
            PriorityRule::Lis => (p.inject_time as i64, 0),
            PriorityRule::Sis => (-(p.inject_time as i64), 0),
            PriorityRule::Edf => (
                p.deadline.map_or(i64::MAX, |d| d as i64),
                p.inject_time as i64,
            ),
        };
        PriorityKey {
            class: u8::from(!p.control),
            primary,
            secondary,
            id: p.id,
        }
    }
}

impl std::str::FromStr for PriorityRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(PriorityRule::Fifo),
            "lifo" => Ok(PriorityRule::Lifo),
            "ntg" => Ok(PriorityRule::Ntg),
            "ftg" => Ok(PriorityRule::Ftg),
            "lis" => Ok(PriorityRule::Lis),
            "sis" => Ok(PriorityRule::Sis),
            "edf" => Ok(PriorityRule::Edf),
            other => Err(Error::InvalidParams(format!("unknown scheduler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PriorityKey {
    pub class: u8,
    pub primary: i64,
    pub secondary: i64,
    pub id: usize,
}

/// What a link knows about a packet waiting in its queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedPacket {
    pub id: usize,
    pub inject_time: u64,
    /// Step at which the packet joined this queue.
    pub arrival: u64,
    pub remaining_hops: usize,
    /// Deadline for this link (deadline scheduling only).
    pub deadline: Option<u64>,
    pub control: bool,
}

impl QueuedPacket {
    pub fn data(id: usize, inject_time: u64, arrival: u64, remaining_hops: usize) -> Self {
        Self {
            id,
            inject_time,
            arrival,
            remaining_hops,
            deadline: None,
            control: false,
        }
    }
}

/// Index of the packet `rule` serves next.
pub fn select(rule: PriorityRule, queue: &[QueuedPacket]) -> Result<usize> {
    queue
        .iter()
        .enumerate()
        .min_by_key(|(_, p)| rule.key(p))
        .map(|(i, _)| i)
        .ok_or(Error::EmptyQueue)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pick(rule: PriorityRule, queue: &[QueuedPacket]) -> usize {
        queue[select(rule, queue).unwrap()].id
    }

    #[test]
    fn fifo_and_lifo_use_local_arrival() {
        let q = [
            QueuedPacket::data(1, 0, 7, 2),
            QueuedPacket::data(2, 5, 3, 2),
        ];
        assert_eq!(pick(PriorityRule::Fifo, &q), 2);
        assert_eq!(pick(PriorityRule::Lifo, &q), 1);
    }

    #[test]
    fn ntg_and_ftg_use_remaining_hops() {
        let q = [
            QueuedPacket::data(1, 0, 0, 4),
            QueuedPacket::data(2, 0, 0, 1),
        ];
        assert_eq!(pick(PriorityRule::Ntg, &q), 2);
        assert_eq!(pick(PriorityRule::Ftg, &q), 1);
    }

    #[test]
    fn lis_and_sis_use_injection_time() {
        let q = [
            QueuedPacket::data(1, 9, 9, 1),
            QueuedPacket::data(2, 4, 10, 1),
        ];
        assert_eq!(pick(PriorityRule::Lis, &q), 2);
        assert_eq!(pick(PriorityRule::Sis, &q), 1);
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let q = [
            QueuedPacket::data(5, 1, 1, 1),
            QueuedPacket::data(3, 1, 1, 1),
        ];
        for rule in PriorityRule::GREEDY {
            assert_eq!(pick(rule, &q), 3, "{rule:?}");
        }
    }

    #[test]
    fn control_packets_go_first() {
        let mut ctl = QueuedPacket::data(9, 9, 9, 9);
        ctl.control = true;
        let q = [QueuedPacket::data(1, 0, 0, 1), ctl];
        for rule in PriorityRule::GREEDY {
            assert_eq!(pick(rule, &q), 9);
        }
    }

    #[test]
    fn empty_queue_is_an_error() {
        assert!(matches!(
            select(PriorityRule::Fifo, &[]),
            Err(Error::EmptyQueue)
        ));
    }

    #[test]
    fn names_parse_back() {
        for rule in PriorityRule::GREEDY.into_iter().chain([PriorityRule::Edf]) {
            assert_eq!(rule.name().parse::<PriorityRule>().unwrap(), rule);
        }
    }
}
