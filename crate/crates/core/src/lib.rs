//! Discrete-time adversarial-queueing simulation.
//!
//! An adversary injects unit-size packets; every link forwards one packet per
//! step. The crate provides:
//!
//! * [`model`]: networks, paths, packets and injection traces;
//! * [`admissibility`]: strong and weak `(w, r)` admissibility checks;
//! * [`routing`]: online congestion-based source routing in three variants;
//! * [`deadline`]: per-link deadlines with earliest-deadline-first service and
//!   their distributed derandomized assignment;
//! * [`sched`]: the greedy queueing disciplines (FIFO, LIFO, NTG, FTG, LIS, SIS);
//! * [`adversary`]: random admissible injections and the instability
//!   constructions on network G;
//! * [`ring`]: source routing on a ring with parallel links;
//! * [`engine`]: the step simulator tying all of the above together;
//! * [`experiment`]: JSON-configured runs of the simulator.

pub mod admissibility;
pub mod adversary;
pub mod deadline;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod ring;
pub mod routing;
pub mod sched;

pub use error::{Error, Result};
