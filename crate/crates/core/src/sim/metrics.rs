use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::AgentId;

use super::{run, Algorithm, Scenario, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub id: AgentId,
    pub path_id: String,
    pub coordinated: bool,
    pub spawn_time: f64,
    /// Front reached the first block.
    pub entered_at: Option<f64>,
    /// Rear left the last block.
    pub completed_at: Option<f64>,
    /// `completed_at - spawn_time`.
    pub crossing_time: Option<f64>,
    pub stops: u32,
    /// Sum of absolute speed changes, m/s.
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub t: f64,
    pub a: AgentId,
    pub b: AgentId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub t: f64,
    pub invariant: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub end_time: f64,
    pub vehicles: Vec<VehicleMetrics>,
    /// Time from the start of the run until the last vehicle completes;
    /// absent when some vehicle never does.
    pub total_completion_time: Option<f64>,
    pub collisions: Vec<CollisionRecord>,
    pub invariant_violation: Option<ViolationRecord>,
    pub lease_events: BTreeMap<String, usize>,
    /// Largest age of a peer state seen at any decision.
    pub max_staleness: Option<f64>,
    /// Worst case for a fixed-latency link: latency plus decision period.
    pub staleness_bound: Option<f64>,
    /// First violation found by replaying the whole commit log.
    pub lease_audit_error: Option<String>,
    pub store_commits: usize,
    /// Steady-state channel load of the coordinated fleet, bytes/s.
    pub bandwidth: f64,
}

impl RunMetrics {
    pub fn clean(&self) -> bool {
        self.collisions.is_empty() && self.invariant_violation.is_none() && self.lease_audit_error.is_none()
    }

    /// Completion time used for comparisons; an unfinished run counts as
    /// lasting until its end.
    pub fn completion_or_end(&self) -> f64 {
        self.total_completion_time.unwrap_or(self.end_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub lease_time: f64,
    pub lock_time: f64,
    pub lease_collisions: usize,
    pub lock_collisions: usize,
    pub lease_clean: bool,
    pub lock_clean: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub rows: Vec<ComparisonRow>,
    pub mean_lease_time: f64,
    pub mean_lock_time: f64,
    /// Mean lease time over mean lock time.
    pub ratio: f64,
    pub lease_collision_free_runs: usize,
}

/// Runs both arms on every seed, seeds spread across threads. Results are
/// independent of the thread count.
pub fn compare_algorithms(base: &Scenario, seeds: &[u64]) -> Result<ComparisonReport, SimError> {
    let arm = |seed: u64, algorithm: Algorithm| {
        let scn = Scenario { seed, algorithm, record_trace: false, ..base.clone() };
        run(&scn).map(|o| o.metrics)
    };
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    let results: Vec<Result<ComparisonRow, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let lease = arm(seed, Algorithm::Lease)?;
                            let lock = arm(seed, Algorithm::Lock)?;
                            Ok(ComparisonRow {
                                seed,
                                lease_time: lease.completion_or_end(),
                                lock_time: lock.completion_or_end(),
                                lease_collisions: lease.collisions.len(),
                                lock_collisions: lock.collisions.len(),
                                lease_clean: lease.clean(),
                                lock_clean: lock.clean(),
                            })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = rows.len().max(1) as f64;
    let mean_lease_time = rows.iter().map(|r| r.lease_time).sum::<f64>() / n;
    let mean_lock_time = rows.iter().map(|r| r.lock_time).sum::<f64>() / n;
    Ok(ComparisonReport {
        scenario: base.name.clone(),
        lease_collision_free_runs: rows.iter().filter(|r| r.lease_collisions == 0).count(),
        ratio: mean_lease_time / mean_lock_time,
        mean_lease_time,
        mean_lock_time,
        rows,
    })
}

/// Parses `"3"`, `"1..20"` (inclusive) or `"1,4,9"`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("bad seed `{s}`: {e}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if b < a {
            return Err(format!("empty seed range {text}"));
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(num).collect()
}
