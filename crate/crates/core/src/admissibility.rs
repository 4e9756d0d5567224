//! Strong and weak `(w, r)`-admissibility of path-annotated traces.
//!
//! Strong: every interval of length `T >= w` loads every link with at most
//! `T * r` paths. Weak: the same bound `w * r` per window of the fixed
//! partition `[0, w), [w, 2w), ...`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InjectionTrace, LinkId};

/// Outcome of an admissibility check together with its tightest window.
///
/// The worst window is the one maximizing `load - bound`, so
/// `admissible == (worst_load as f64 <= bound)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// `None` when no path crosses any link.
    pub worst_link: Option<LinkId>,
    /// `(start step, length)`.
    pub worst_window: (u64, u64),
    pub worst_load: u64,
    pub bound: f64,
}

impl AdmissibilityReport {
    fn empty(w: u64, r: f64) -> Self {
        Self {
            admissible: true,
            worst_link: None,
            worst_window: (0, w),
            worst_load: 0,
            bound: w as f64 * r,
        }
    }

    fn excess(&self) -> f64 {
        self.worst_load as f64 - self.bound
    }

    fn offer(&mut self, link: LinkId, start: u64, len: u64, load: u64, r: f64) {
        let bound = len as f64 * r;
        if self.worst_link.is_none() || load as f64 - bound > self.excess() {
            self.worst_link = Some(link);
            self.worst_window = (start, len);
            self.worst_load = load;
            self.bound = bound;
            self.admissible = load as f64 <= bound;
        }
    }
}

fn check_inputs(w: u64, r: f64) -> Result<()> {
    if w == 0 {
        return Err(Error::InvalidParams(
            "window size w must be at least 1".into(),
        ));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidParams(format!(
            "rate r = {r} must be positive"
        )));
    }
    Ok(())
}

/// Injection times of the paths crossing each link, in time order.
fn link_times(trace: &InjectionTrace) -> Result<BTreeMap<LinkId, Vec<u64>>> {
    let mut times: BTreeMap<LinkId, Vec<u64>> = BTreeMap::new();
    for (event, path) in trace.events().iter().zip(trace.paths()?) {
        for &link in &path.links {
            times.entry(link).or_default().push(event.t);
        }
    }
    Ok(times)
}

/// Strong `(w, r)`-admissibility over all intervals `[t, t + T)`, `T >= w`.
///
/// Only intervals that start at an injection on the link and end at a later
/// injection (or span exactly `w` steps) need examining: any other interval
/// can be shrunk to one of those without losing load or gaining bound.
pub fn check_strong(trace: &InjectionTrace, w: u64, r: f64) -> Result<AdmissibilityReport> {
    check_inputs(w, r)?;
    let mut report = AdmissibilityReport::empty(w, r);
    for (link, times) in link_times(trace)? {
        let mut a = 0;
        while a < times.len() {
            let start = times[a];
            // Interval of exactly w steps from this start.
            let in_w = times[a..].partition_point(|&t| t < start + w);
            report.offer(link, start, w, in_w as u64, r);
            // Longer intervals ending at the last copy of each later time.
            let mut b = a + in_w;
            while b < times.len() {
                let end = times[b];
                let last = b + times[b..].partition_point(|&t| t == end);
                report.offer(link, start, end - start + 1, (last - a) as u64, r);
                b = last;
            }
            a += times[a..].partition_point(|&t| t == start);
        }
    }
    Ok(report)
}

/// Weak `(w, r)`-admissibility on the partition aligned at step 0.
pub fn check_weak(trace: &InjectionTrace, w: u64, r: f64) -> Result<AdmissibilityReport> {
    check_inputs(w, r)?;
    let mut loads: BTreeMap<(u64, LinkId), u64> = BTreeMap::new();
    for (event, path) in trace.events().iter().zip(trace.paths()?) {
        for &link in &path.links {
            *loads.entry((event.t / w, link)).or_default() += 1;
        }
    }
    let mut report = AdmissibilityReport::empty(w, r);
    for ((window, link), load) in loads {
        report.offer(link, window * w, w, load, r);
    }
    Ok(report)
}

/// Parameters `(w', r')` under which weak `(w, r)`-admissibility implies
/// strong admissibility: `w' = ceil(4wr / (1 - r))`, `r' = (1 + r) / 2`.
pub fn weak_to_strong_params(w: u64, r: f64) -> Result<(u64, f64)> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidParams(format!(
            "rate r = {r} must lie in (0, 1)"
        )));
    }
    let w_strong = (4.0 * w as f64 * r / (1.0 - r)).ceil() as u64;
    Ok((w_strong, (1.0 + r) / 2.0))
}
