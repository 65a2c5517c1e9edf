//! Lease records and the pure interval arithmetic behind scheduling.

use serde::{Deserialize, Serialize};

use crate::dynamics::{VehicleParams, VehicleState};
use crate::geometry::{IntersectionModel, Path};
use crate::store::AgentId;

use super::LeaseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseKind {
    V2v,
    NonV2vProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseStatus {
    Active,
    Cancelled,
}

/// Occupancy grant for one block over `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: String,
    pub holder_id: AgentId,
    /// Agent that wrote the record; differs from the holder for proxies.
    pub registrar: AgentId,
    pub block_id: String,
    pub path_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub kind: LeaseKind,
    pub status: LeaseStatus,
}

impl Lease {
    pub fn is_active(&self) -> bool {
        self.status == LeaseStatus::Active
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Half-open interval overlap.
    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        self.t_start < end && start < self.t_end
    }

    pub fn shifted(&self, delta: f64) -> Lease {
        Lease { t_start: self.t_start + delta, t_end: self.t_end + delta, ..self.clone() }
    }
}

/// Scheduler tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaseParams {
    /// Inflation of the predicted occupancy duration.
    pub margin: f64,
    pub extension_threshold: f64,
    pub extension_quantum: f64,
    /// Lateness tolerated before a lease is declared unreachable.
    pub grace: f64,
    pub max_retries: usize,
    /// How far ahead of a non-V2V participant's predicted entry its proxy starts.
    pub proxy_lead: f64,
    /// Bring-forward only when it gains at least this much.
    pub min_bring_forward_gain: f64,
}

impl Default for LeaseParams {
    fn default() -> Self {
        Self {
            margin: 1.2,
            extension_threshold: 0.3,
            extension_quantum: 1.0,
            grace: 0.2,
            max_retries: 3,
            proxy_lead: 0.2,
            min_bring_forward_gain: 0.05,
        }
    }
}

/// Time to cover `distance` starting at `v0`, changing speed at rate
/// `accel` toward `v_cruise` and then holding it.
pub fn travel_time(distance: f64, v0: f64, v_cruise: f64, accel: f64) -> f64 {
    if distance <= 0.0 {
        return 0.0;
    }
    let v0 = v0.max(0.0);
    if (v0 - v_cruise).abs() < 1e-12 || accel <= 0.0 {
        return if v0 > 0.0 { distance / v0 } else { f64::INFINITY };
    }
    let a = if v_cruise > v0 { accel } else { -accel };
    let t_ramp = (v_cruise - v0) / a;
    let d_ramp = (v_cruise * v_cruise - v0 * v0) / (2.0 * a);
    if d_ramp >= distance {
        // reaches the distance before finishing the ramp: v0 t + a t^2 / 2 = d
        let disc = v0 * v0 + 2.0 * a * distance;
        if disc < 0.0 {
            return f64::INFINITY;
        }
        return (disc.sqrt() - v0) / a;
    }
    t_ramp + (distance - d_ramp) / v_cruise
}

/// Extra time lost to the motor lag when speeding up from `v0` to
/// `v_cruise` under the PI loop. The closed loop relaxes with time constant
/// `tau * k_ff / (k_ff + k_p)`; it is slew-limited at `a_max` until the
/// error drops below `a_max * tau_cl`, and trails the ideal ramp by
/// `tau_cl` times that error.
pub fn lag_delay(v0: f64, v_cruise: f64, params: &VehicleParams) -> f64 {
    if v_cruise <= 0.0 || params.k_ff + params.k_p <= 0.0 {
        return 0.0;
    }
    let tau_cl = params.motor_lag_tau * params.k_ff / (params.k_ff + params.k_p);
    let tail = (v_cruise - v0).max(0.0).min(params.a_max * tau_cl);
    tau_cl * tail / v_cruise
}

/// Predicted occupancy window of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWindow {
    pub block_id: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub t_enter: f64,
    pub t_exit: f64,
    /// One window per crossed block, ordered along the path.
    pub blocks: Vec<BlockWindow>,
}

impl Occupancy {
    /// Same shape, moved so the first window starts at `t0`.
    pub fn moved_to(&self, t0: f64) -> Occupancy {
        let d = t0 - self.t_enter;
        Occupancy {
            t_enter: t0,
            t_exit: self.t_exit + d,
            blocks: self.blocks.iter().map(|w| BlockWindow { block_id: w.block_id.clone(), start: w.start + d, end: w.end + d }).collect(),
        }
    }

    pub fn window(&self, block_id: &str) -> Option<&BlockWindow> {
        self.blocks.iter().find(|w| w.block_id == block_id)
    }
}

/// Builds the per-block windows for a participant whose front reaches the
/// first block at `t_enter` and then follows `v0 -> v_cruise` kinematics.
pub fn occupancy_from(path: &Path, length: f64, t_enter_raw: f64, speed_at_entry: f64, v_cruise: f64, accel: f64, margin: f64) -> Occupancy {
    let e0 = path.first_enter();
    let rel = |d: f64| travel_time(d - e0, speed_at_entry, v_cruise, accel);
    let mut blocks = Vec::with_capacity(path.spans().len());
    for span in path.spans() {
        let start = t_enter_raw + rel(span.enter_s);
        let dur = rel(span.exit_s + length) - rel(span.enter_s);
        blocks.push(BlockWindow { block_id: span.block_id.clone(), start, end: start + margin * dur });
    }
    let t_exit = blocks.iter().map(|w| w.end).fold(t_enter_raw, f64::max);
    Occupancy { t_enter: t_enter_raw, t_exit, blocks }
}

/// Entry/exit estimate for a vehicle still before its first block: full
/// acceleration to the advised speed, then hold; duration inflated by the
/// margin.
pub fn estimate_occupancy(
    vehicle: &VehicleState,
    params: &VehicleParams,
    path: &Path,
    v_advised: f64,
    margin: f64,
    now: f64,
) -> Result<Occupancy, LeaseError> {
    let e0 = path.first_enter();
    if vehicle.s >= e0 {
        return Err(LeaseError::PhaseMisuse("occupancy estimate requested at or inside the block"));
    }
    let v0 = vehicle.speed;
    let dist = e0 - vehicle.s;
    let t = travel_time(dist, v0, v_advised, params.a_max) + lag_delay(v0, v_advised, params);
    if !t.is_finite() {
        return Err(LeaseError::Unreachable);
    }
    // speed reached at the entry line under the same profile
    let v_entry = if v0 < v_advised {
        (v0 * v0 + 2.0 * params.a_max * dist).sqrt().min(v_advised)
    } else {
        (v0 * v0 - 2.0 * params.a_max * dist).max(v_advised * v_advised).sqrt()
    };
    Ok(occupancy_from(path, params.length, now + t, v_entry, v_advised, params.a_max, margin))
}

fn conflicts_with(model: &IntersectionModel, a: &str, b: &str) -> bool {
    // unknown paths are treated as conflicting
    model.paths_conflict(a, b).unwrap_or(true)
}

/// Active leases on `block_id` whose path conflicts with `path_id` and whose
/// window intersects `[t_start, t_end)`.
pub fn find_conflicts<'a>(
    t_start: f64,
    t_end: f64,
    path_id: &str,
    block_id: &str,
    leases: &'a [Lease],
    model: &IntersectionModel,
) -> Vec<&'a Lease> {
    leases
        .iter()
        .filter(|l| l.is_active() && l.block_id == block_id && l.overlaps(t_start, t_end) && conflicts_with(model, path_id, &l.path_id))
        .collect()
}

/// Smallest start `>= not_before` giving a conflict-free window of
/// `duration` on one block.
pub fn earliest_slot(
    duration: f64,
    not_before: f64,
    existing: &[Lease],
    path_id: &str,
    block_id: &str,
    model: &IntersectionModel,
) -> (f64, f64) {
    let relevant: Vec<&Lease> =
        existing.iter().filter(|l| l.is_active() && l.block_id == block_id && conflicts_with(model, path_id, &l.path_id)).collect();
    // the optimum is either not_before or the end of some blocking lease
    let mut candidates: Vec<f64> = std::iter::once(not_before).chain(relevant.iter().map(|l| l.t_end).filter(|&e| e > not_before)).collect();
    candidates.sort_by(f64::total_cmp);
    for c in candidates {
        if relevant.iter().all(|l| !l.overlaps(c, c + duration)) {
            return (c, c + duration);
        }
    }
    unreachable!("the latest lease end is always a free start")
}

/// Earliest shift of a multi-block occupancy so that every block window is
/// free. Returns the new entry time.
pub fn earliest_joint_slot(occ: &Occupancy, not_before: f64, existing: &[Lease], path_id: &str, model: &IntersectionModel) -> f64 {
    let mut t0 = not_before.max(occ.t_enter.min(not_before));
    loop {
        let cand = occ.moved_to(t0);
        let mut next = t0;
        for w in &cand.blocks {
            let (s, _) = earliest_slot(w.end - w.start, w.start, existing, path_id, &w.block_id, model);
            next = next.max(t0 + (s - w.start));
        }
        if next <= t0 {
            return t0;
        }
        t0 = next;
    }
}

/// Re-slots `movers` after `fixed`, one holder at a time in order of their
/// original start, keeping every holder's windows rigidly together.
pub fn reschedule(fixed: &[Lease], movers: &[Lease], model: &IntersectionModel) -> Vec<Lease> {
    let mut placed: Vec<Lease> = fixed.to_vec();
    let mut holders: Vec<(f64, AgentId)> = Vec::new();
    for l in movers {
        match holders.iter_mut().find(|(_, h)| *h == l.holder_id) {
            Some(entry) => entry.0 = entry.0.min(l.t_start),
            None => holders.push((l.t_start, l.holder_id)),
        }
    }
    holders.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(movers.len());
    for (start, holder) in holders {
        let group: Vec<&Lease> = movers.iter().filter(|l| l.holder_id == holder).collect();
        let path_id = group[0].path_id.clone();
        let occ = Occupancy {
            t_enter: start,
            t_exit: group.iter().map(|l| l.t_end).fold(start, f64::max),
            blocks: group.iter().map(|l| BlockWindow { block_id: l.block_id.clone(), start: l.t_start, end: l.t_end }).collect(),
        };
        let t0 = earliest_joint_slot(&occ, start, &placed, &path_id, model);
        for l in group {
            let moved = l.shifted(t0 - start);
            placed.push(moved.clone());
            out.push(moved);
        }
    }
    out
}

/// Safety check over one set of active leases: conflicting paths on the
/// same block never overlap in time. Returns the offending pair.
pub fn find_overlap<'a>(leases: &'a [Lease], model: &IntersectionModel) -> Option<(&'a Lease, &'a Lease)> {
    let active: Vec<&Lease> = leases.iter().filter(|l| l.is_active()).collect();
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if a.holder_id != b.holder_id
                && a.block_id == b.block_id
                && a.overlaps(b.t_start, b.t_end)
                && conflicts_with(model, &a.path_id, &b.path_id)
            {
                return Some((a, b));
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// A lease is unreachable once it has expired, or when even the fastest
/// arrival misses its start by more than `grace`. `earliest_enter = None`
/// means the way is blocked.
pub fn check_feasibility(lease: &Lease, earliest_enter: Option<f64>, now: f64, grace: f64) -> Feasibility {
    if now >= lease.t_end {
        return Feasibility::Infeasible;
    }
    match earliest_enter {
        Some(t) if t <= lease.t_start + grace => Feasibility::Feasible,
        _ => Feasibility::Infeasible,
    }
}
