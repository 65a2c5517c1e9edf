use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{brake_step, controller_step, localize, plant_step, MotorState, Phase, VehicleParams, VehicleState};
use crate::geometry::{IntersectionModel, Path, Rect, Vec2};
use crate::network::{aggregate_bandwidth, LatencySpec};
use crate::perception::{perceive, sense, ClassLabel, FusedObject, Pose, Tracker, WorldObject};
use crate::planner::{enforce, plan_speed, stop_line_s, DirectiveReason, Gate, PlanDirective, PlanInput};
use crate::scheduler::{
    apply_for_lease, audit_lease_log, cancel_and_reapply, cancel_lease, cancel_proxy, check_feasibility, estimate_occupancy, extend_if_expiring,
    find_overlap, lock_acquire, lock_release, lock_request, read_lock, occupancy_from, proxy_lease_for_non_v2v, refresh_proxy, release_after_exit,
    travel_time, try_bring_forward, BlockWindow, Feasibility, Lease, LeaseCtx, LeaseError, LeaseEvent, LeaseKind, LeaseStatus, LeaseTable,
    Occupancy,
};
use crate::store::{decode, encode, keys, AgentId, ChangeKind, OpRecord, Replica, Store, WatchEvent, WatchId};

use super::collision::{detect_collisions, OrientedBox};
use super::metrics::{CollisionRecord, RunMetrics, VehicleMetrics, ViolationRecord};
use super::scenario::{Algorithm, ObstacleSpec, Scenario, VehicleSpec};
use super::trace::{TickVehicle, TraceRecord};
use super::SimError;

const TRACK_MAX_AGE: f64 = 0.5;
/// A track must be this old before it is trusted for a proxy.
const PROXY_MIN_TRACK_AGE: f64 = 0.3;
const PROXY_MIN_SPEED: f64 = 0.1;
const PROXY_MAX_LATERAL: f64 = 0.15;
const PROXY_MAX_HEADING: f64 = 30.0;
const LOOKAHEAD: f64 = 3.0;
/// A lock is only taken within this distance of the stop line.
const LOCK_AT_LINE: f64 = 0.01;
const EPS: f64 = 1e-9;

/// Published under `vehicles/<id>/state` at every decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub t: f64,
    pub path_id: String,
    pub s: f64,
    pub speed: f64,
    pub phase: Phase,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    /// JSON lines, one record each.
    pub trace: Vec<String>,
    pub lease_events: Vec<LeaseEvent>,
    pub store_log: Vec<OpRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LockStage {
    Idle,
    Requested,
    Held,
    Released,
}

struct Agent {
    id: AgentId,
    params: VehicleParams,
    path: Path,
    initial_s: f64,
    state: VehicleState,
    coordinated: bool,
    spawn_time: f64,
    /// Decision phase offset in ticks.
    slot: u64,
    directive: PlanDirective,
    /// Believed own leases with the store version each was last seen at.
    own: Vec<(Lease, u64)>,
    lease_counter: u32,
    lock: LockStage,
    replica: Replica,
    watches: Vec<WatchId>,
    tracker: Tracker,
    entered_at: Option<f64>,
    completed_at: Option<f64>,
    stops: u32,
    moving: bool,
    energy: f64,
    gone: bool,
}

impl Agent {
    fn first_block(&self) -> &str {
        &self.path.spans()[0].block_id
    }

    fn own_leases(&self) -> Vec<Lease> {
        self.own.iter().map(|(l, _)| l.clone()).collect()
    }

    fn gate_lease(&self) -> Option<&Lease> {
        let first = self.first_block();
        self.own.iter().map(|(l, _)| l).find(|l| l.block_id == first)
    }

    fn next_lease_id(&mut self) -> String {
        self.lease_counter += 1;
        format!("v{}-{}", self.id, self.lease_counter)
    }

    fn body(&self) -> OrientedBox {
        let mid = self.state.s - self.params.length / 2.0;
        OrientedBox { center: self.path.point_at(mid), heading: self.path.heading_at(mid), length: self.params.length, width: self.params.width }
    }

    /// Keeps the physics-tick gate in step with the latest lease belief.
    fn sync_gate(&mut self) {
        if self.directive.reason != DirectiveReason::MeetLease && self.state.phase == Phase::Planning {
            return;
        }
        let window = self.gate_lease().map(|l| (l.t_start, l.t_end));
        if let Some(g) = self.directive.gate.as_mut() {
            match window {
                Some((open, close)) => {
                    g.open_at = open;
                    g.close_at = close;
                }
                None => {
                    g.open_at = f64::INFINITY;
                    g.close_at = f64::INFINITY;
                }
            }
        }
    }
}

/// Everything visible in the world at one instant.
#[derive(Debug, Clone)]
struct Body {
    id: AgentId,
    shape: OrientedBox,
    obstacle: Option<Rect>,
}

fn lease_key(l: &Lease) -> String {
    keys::lease(&l.block_id, &l.lease_id)
}

fn is_lease_key(key: &str) -> bool {
    key.starts_with("intersection/") && key.contains("/leases/")
}

/// First arc length in `[from, from + LOOKAHEAD]` where `path` touches `rect`.
fn first_entry(path: &Path, rect: &Rect, from: f64) -> Option<f64> {
    let mut acc = 0.0;
    for w in path.points().windows(2) {
        let len = (w[1] - w[0]).norm();
        if acc > from + LOOKAHEAD {
            break;
        }
        if acc + len >= from {
            if let Some((t0, t1)) = rect.clip_segment(w[0], w[1]) {
                let (s0, s1) = (acc + t0 * len, acc + t1 * len);
                if s1 >= from {
                    return Some(s0.max(from)).filter(|s| *s <= from + LOOKAHEAD);
                }
            }
        }
        acc += len;
    }
    None
}

fn inflate(r: &Rect, by: f64) -> Rect {
    Rect::new(Vec2::new(r.min.x - by, r.min.y - by), Vec2::new(r.max.x + by, r.max.y + by))
}

fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).to_degrees().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Ground-truth distances from the front bumper to blockers ahead: static
/// obstacles on the path and same-direction vehicles in the lane.
fn obstacles_ahead(a: &Agent, bodies: &[Body]) -> Vec<f64> {
    let s = a.state.s;
    let mut out = Vec::new();
    for b in bodies.iter().filter(|b| b.id != a.id) {
        if let Some(rect) = &b.obstacle {
            if let Some(e) = first_entry(&a.path, &inflate(rect, a.params.width / 2.0), s) {
                out.push(e - s);
            }
            continue;
        }
        let (sp, lat) = a.path.project(b.shape.center);
        if lat > a.params.width || sp <= s - a.params.length / 2.0 {
            continue;
        }
        if angle_diff_deg(a.path.heading_at(sp), b.shape.heading) > PROXY_MAX_HEADING {
            continue;
        }
        let gap = sp - b.shape.length / 2.0 - s;
        if gap <= LOOKAHEAD {
            out.push(gap.max(0.0));
        }
    }
    out
}

/// An active obstacle sits on the path before the vehicle clears the
/// intersection.
fn path_blocked(a: &Agent, bodies: &[Body]) -> bool {
    let horizon = a.path.last_exit() + a.params.length;
    bodies.iter().filter_map(|b| b.obstacle.as_ref()).any(|r| {
        first_entry(&a.path, &inflate(r, a.params.width / 2.0), a.state.s).is_some_and(|e| e < horizon)
            || (a.path.last_exit() - a.state.s > LOOKAHEAD && {
                let (sp, lat) = a.path.project(r.center());
                sp > a.state.s && sp < horizon && lat < a.params.width
            })
    })
}

/// Most plausible path for an observed non-V2V car, with its front-bumper
/// arc length.
fn infer_path(model: &IntersectionModel, pos: Vec2, vel: Vec2, length: f64) -> Option<(&Path, f64)> {
    let heading = vel.angle();
    let mut best: Option<(&Path, f64, f64)> = None;
    for p in model.paths() {
        let (sp, lat) = p.project(pos);
        if lat > PROXY_MAX_LATERAL || angle_diff_deg(p.heading_at(sp), heading) > PROXY_MAX_HEADING {
            continue;
        }
        let straight = p.id().ends_with("straight");
        let better = match best {
            None => true,
            Some((bp, _, blat)) => lat + 0.02 < blat || (lat < blat + 0.02 && straight && !bp.id().ends_with("straight")),
        };
        if better {
            best = Some((p, sp, lat));
        }
    }
    best.map(|(p, sp, _)| (p, sp + length / 2.0))
}

/// Proxy windows for a car at constant `speed`, opened `lead` early.
/// Blocks it has already cleared are left out.
fn proxy_occupancy(path: &Path, s_front: f64, length: f64, speed: f64, margin: f64, lead: f64, now: f64) -> Option<Occupancy> {
    if s_front < path.first_enter() {
        let t_enter = now + (path.first_enter() - s_front) / speed;
        let mut occ = occupancy_from(path, length, t_enter, speed, speed, 1.0, margin);
        for w in &mut occ.blocks {
            w.start -= lead;
        }
        occ.t_enter -= lead;
        return Some(occ);
    }
    let mut blocks = Vec::new();
    for span in path.spans() {
        let clear = (span.exit_s + length - s_front) / speed;
        if clear <= 0.0 {
            continue;
        }
        let reach = ((span.enter_s - s_front) / speed).max(0.0);
        blocks.push(BlockWindow { block_id: span.block_id.clone(), start: now + reach - lead, end: now + reach + margin * (clear - reach) });
    }
    let t_enter = blocks.iter().map(|w| w.start).fold(f64::INFINITY, f64::min);
    let t_exit = blocks.iter().map(|w| w.end).fold(f64::NEG_INFINITY, f64::max);
    (!blocks.is_empty()).then_some(Occupancy { t_enter, t_exit, blocks })
}

/// Non-fatal lease outcomes are retried on a later decision.
fn soft<T>(r: Result<T, LeaseError>) -> Result<Option<T>, SimError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LeaseError::Store(e)) => Err(SimError::Store(e)),
        Err(LeaseError::Protocol(m)) => Err(SimError::Protocol(m)),
        Err(_) => Ok(None),
    }
}

struct Sim<'a> {
    scn: &'a Scenario,
    model: IntersectionModel,
    store: Store,
    agents: Vec<Agent>,
    pending: Vec<(usize, VehicleSpec)>,
    obstacles: Vec<ObstacleSpec>,
    rng: ChaCha8Rng,
    events: Vec<LeaseEvent>,
    trace: Vec<String>,
    log_cursor: usize,
    event_cursor: usize,
    touching: BTreeSet<(AgentId, AgentId)>,
    collisions: Vec<CollisionRecord>,
    violation: Option<ViolationRecord>,
    max_staleness: Option<f64>,
    live_leases: BTreeMap<String, Lease>,
}

/// Per-seed perturbation of spawn times, start positions, speeds and
/// obstacle timing.
fn jittered(scn: &Scenario, model: &IntersectionModel) -> Result<(Vec<VehicleSpec>, Vec<ObstacleSpec>), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed.wrapping_add(2));
    let j = scn.jitter;
    let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    let mut vehicles = Vec::with_capacity(scn.vehicles.len());
    for v in &scn.vehicles {
        let p = scn.params_of(v);
        let len = model.path(&v.path_id)?.length();
        let mut v = v.clone();
        v.spawn_time = (v.spawn_time + u(j.spawn_time)).clamp(0.0, scn.duration);
        v.initial_s = (v.initial_s + u(j.initial_s)).clamp(0.0, len - 1e-6);
        v.initial_speed = (v.initial_speed + u(j.speed)).clamp(0.0, p.v_max);
        vehicles.push(v);
    }
    let mut obstacles = Vec::with_capacity(scn.obstacles.len());
    for o in &scn.obstacles {
        let mut o = o.clone();
        let d = u(j.obstacle_time);
        o.appear_time = (o.appear_time + d).max(0.0);
        o.clear_time = o.clear_time.map(|c| (c + d).max(o.appear_time));
        obstacles.push(o);
    }
    Ok((vehicles, obstacles))
}

/// Runs a scenario to completion or its duration, whichever is first.
pub fn run(scn: &Scenario) -> Result<RunOutput, SimError> {
    scn.validate()?;
    let model = IntersectionModel::build(&scn.geometry)?;
    let (vehicles, obstacles) = jittered(scn, &model)?;
    let mut pending: Vec<(usize, VehicleSpec)> = vehicles.into_iter().enumerate().collect();
    pending.sort_by(|a, b| a.1.spawn_time.total_cmp(&b.1.spawn_time).then(a.0.cmp(&b.0)));
    let mut sim = Sim {
        scn,
        model,
        store: Store::new(scn.net, scn.seed),
        agents: Vec::new(),
        pending,
        obstacles,
        rng: ChaCha8Rng::seed_from_u64(scn.seed.wrapping_add(1)),
        events: Vec::new(),
        trace: Vec::new(),
        log_cursor: 0,
        event_cursor: 0,
        touching: BTreeSet::new(),
        collisions: Vec::new(),
        violation: None,
        max_staleness: None,
        live_leases: BTreeMap::new(),
    };
    sim.run_loop()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn emit(&mut self, rec: TraceRecord) {
        if self.scn.record_trace {
            self.trace.push(rec.to_line());
        }
    }

    fn violate(&mut self, t: f64, invariant: &str, detail: String) {
        if self.violation.is_none() {
            self.emit(TraceRecord::InvariantViolation { t, invariant: invariant.into(), detail: detail.clone() });
            self.violation = Some(ViolationRecord { t, invariant: invariant.into(), detail });
        }
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        let dt = self.scn.dt;
        let n_ticks = (self.scn.duration / dt).round() as u64;
        let every = self.scn.decision_every();
        for tick in 0..=n_ticks {
            let t = tick as f64 * dt;
            if tick > 0 {
                self.physics(t - dt, t)?;
            }
            self.spawn(t)?;
            if self.violation.is_none() {
                self.check_collisions(t);
                self.deliver(t);
                let bodies = self.bodies(t);
                for i in 0..self.agents.len() {
                    let a = &self.agents[i];
                    if a.coordinated && !a.gone && (tick + a.slot).is_multiple_of(every) {
                        self.decide(i, t, &bodies)?;
                    }
                }
            }
            self.flush(t);
            if self.violation.is_some() {
                break;
            }
            if self.pending.is_empty() && self.agents.iter().all(|a| a.gone) {
                break;
            }
        }
        Ok(())
    }

    fn spawn(&mut self, t: f64) -> Result<(), SimError> {
        while self.pending.first().is_some_and(|(_, v)| v.spawn_time <= t + EPS) {
            let (index, spec) = self.pending.remove(0);
            let params = self.scn.params_of(&spec);
            let path = self.model.path(&spec.path_id)?.clone();
            let coordinated = spec.is_v2v && !self.scn.no_v2v.contains(&spec.id);
            let phase = Phase::from_position(spec.initial_s, params.length, path.first_enter(), path.last_exit());
            let mut agent = Agent {
                id: spec.id,
                params,
                initial_s: spec.initial_s,
                state: VehicleState {
                    id: spec.id,
                    path_id: spec.path_id.clone(),
                    s: spec.initial_s,
                    speed: spec.initial_speed,
                    phase,
                    is_v2v: spec.is_v2v,
                    motor: MotorState::at_speed(spec.initial_speed),
                },
                coordinated,
                spawn_time: t,
                slot: index as u64,
                directive: PlanDirective {
                    v_target: spec.initial_speed,
                    reason: DirectiveReason::NoLeaseCruise,
                    stop_at: Some(stop_line_s(&path, self.model.stop_line_offset())),
                    gate: Some(Gate { s: path.first_enter(), open_at: f64::INFINITY, close_at: f64::INFINITY }),
                },
                path,
                own: Vec::new(),
                lease_counter: 0,
                lock: LockStage::Idle,
                replica: Replica::default(),
                watches: Vec::new(),
                tracker: Tracker::default(),
                entered_at: None,
                completed_at: None,
                stops: 0,
                moving: spec.initial_speed > 0.05,
                energy: 0.0,
                gone: false,
            };
            if phase != Phase::Planning {
                agent.directive = PlanDirective { v_target: spec.initial_speed, reason: DirectiveReason::CrossAdvised, stop_at: None, gate: None };
            }
            if coordinated {
                agent.replica = Replica::from_entries(self.store.entries(), t);
                agent.watches = vec![self.store.watch("vehicles/", spec.id), self.store.watch("intersection/", spec.id)];
            }
            self.agents.push(agent);
        }
        Ok(())
    }

    fn physics(&mut self, t_prev: f64, t: f64) -> Result<(), SimError> {
        let dt = t - t_prev;
        let scn = self.scn;
        let mut followups = Vec::new();
        let mut problems = Vec::new();
        for (i, a) in self.agents.iter_mut().enumerate().filter(|(_, a)| !a.gone) {
            let (prev_s, prev_v, prev_phase) = (a.state.s, a.state.speed, a.state.phase);
            a.state.motor = if a.coordinated {
                let (v_cmd, brake) = enforce(&a.directive, a.state.s, a.state.speed, t_prev, &a.params, &scn.planner, dt);
                if brake {
                    brake_step(&a.params, &a.state.motor, dt)
                } else {
                    let (m, duty) = controller_step(&a.params, &a.state.motor, v_cmd, dt)?;
                    plant_step(&a.params, &m, duty, dt)?
                }
            } else {
                let m = a.state.motor;
                MotorState { odometer_s: m.odometer_s + m.v_current * dt, ..m }
            };
            a.state.s = localize(&a.state.motor, a.initial_s);
            a.state.speed = a.state.motor.v_current;
            a.state.phase = Phase::from_position(a.state.s, a.params.length, a.path.first_enter(), a.path.last_exit());
            a.energy += (a.state.speed - prev_v).abs();
            if a.moving && a.state.speed < 0.01 {
                a.stops += 1;
                a.moving = false;
            } else if a.state.speed > 0.05 {
                a.moving = true;
            }
            let ds = a.state.s - prev_s;
            if ds < -EPS || ds > a.params.v_max.max(prev_v) * dt + 1e-9 {
                problems.push(("no-teleport", format!("vehicle {} moved {ds} m in one step", a.id)));
            }
            if a.state.phase < prev_phase {
                problems.push(("phase-monotonic", format!("vehicle {} went from {prev_phase:?} to {:?}", a.id, a.state.phase)));
            }
            if prev_phase == Phase::Planning && a.state.phase != Phase::Planning {
                a.entered_at = Some(t);
                if a.coordinated {
                    followups.push((i, true));
                }
            }
            if a.state.phase == Phase::PostCrossing && a.completed_at.is_none() {
                a.completed_at = Some(t);
            }
            if a.state.s >= a.path.length() {
                a.gone = true;
                followups.push((i, false));
            }
        }
        for (inv, detail) in problems {
            self.violate(t, inv, detail);
        }
        for (i, entering) in followups {
            if entering {
                self.check_entry(i, t);
            } else if self.agents[i].coordinated {
                self.retire(i, t)?;
            }
        }
        Ok(())
    }

    /// Entering the intersection requires an authoritative grant.
    fn check_entry(&mut self, i: usize, t: f64) {
        let a = &self.agents[i];
        let block = a.first_block().to_string();
        let ok = match self.scn.algorithm {
            Algorithm::Lease => LeaseTable::read(&self.store, &self.model)
                .held_by(a.id)
                .iter()
                .any(|l| l.block_id == block && l.t_start <= t + 1e-6 && t <= l.t_end + 1e-6),
            Algorithm::Lock => read_lock(&self.store, &self.lock_block()).0.holder == Some(a.id),
        };
        if !ok {
            let detail = format!("vehicle {} entered {block} at {t:.3} without a valid grant", a.id);
            self.violate(t, "entry-grant", detail);
        }
    }

    /// The lock baseline serializes the whole intersection on one key.
    fn lock_block(&self) -> String {
        self.model.blocks()[0].id.clone()
    }

    /// Cleans up after a vehicle that left the map.
    fn retire(&mut self, i: usize, t: f64) -> Result<(), SimError> {
        let lock_block = self.lock_block();
        let a = &mut self.agents[i];
        let own = a.own_leases();
        if !own.is_empty() {
            let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &self.scn.lease, now: t, events: &mut self.events };
            soft(release_after_exit(&mut ctx, a.id, &own))?;
            a.own.clear();
        }
        if a.lock == LockStage::Held {
            lock_release(&mut self.store, &lock_block, a.id, t).map_err(|e| SimError::Protocol(e.to_string()))?;
            a.lock = LockStage::Released;
        }
        let id = a.id;
        for key in [keys::vehicle_state(id), keys::vehicle_surrounding(id)] {
            self.store.delete(&key, id, t)?;
        }
        Ok(())
    }

    fn bodies(&self, t: f64) -> Vec<Body> {
        let mut out: Vec<Body> =
            self.agents.iter().filter(|a| !a.gone).map(|a| Body { id: a.id, shape: a.body(), obstacle: None }).collect();
        for o in self.obstacles.iter().filter(|o| o.active(t)) {
            out.push(Body {
                id: o.id,
                shape: OrientedBox { center: o.center, heading: 0.0, length: o.size.x, width: o.size.y },
                obstacle: Some(o.rect()),
            });
        }
        out
    }

    fn check_collisions(&mut self, t: f64) {
        let bodies = self.bodies(t);
        let boxes: Vec<(AgentId, OrientedBox)> = bodies.iter().map(|b| (b.id, b.shape)).collect();
        let obstacle_ids: BTreeSet<AgentId> = bodies.iter().filter(|b| b.obstacle.is_some()).map(|b| b.id).collect();
        let now: BTreeSet<(AgentId, AgentId)> =
            detect_collisions(&boxes).into_iter().filter(|(a, b)| !(obstacle_ids.contains(a) && obstacle_ids.contains(b))).collect();
        for &(a, b) in now.difference(&self.touching.clone()) {
            self.collisions.push(CollisionRecord { t, a, b });
            self.emit(TraceRecord::Collision { t, a, b });
        }
        self.touching = now;
    }

    fn deliver(&mut self, t: f64) {
        for a in self.agents.iter_mut().filter(|a| a.coordinated && !a.gone) {
            let mut changed = false;
            for w in a.watches.clone() {
                for ev in self.store.poll_watch(w, t) {
                    a.replica.apply(&ev);
                    changed |= absorb_own(a, &ev);
                }
            }
            if changed {
                a.sync_gate();
            }
        }
    }

    fn decide(&mut self, i: usize, t: f64, bodies: &[Body]) -> Result<(), SimError> {
        let scn = self.scn;
        let tracked = self.perceive(i, t, bodies);
        self.publish(i, t, &tracked)?;
        let staleness = self.staleness(i, t);
        if let Some(st) = staleness {
            self.max_staleness = Some(self.max_staleness.map_or(st, |m: f64| m.max(st)));
        }
        match scn.algorithm {
            Algorithm::Lease => {
                self.proxy_duties(i, t, &tracked)?;
                self.lease_lifecycle(i, t, bodies)?;
            }
            Algorithm::Lock => self.lock_lifecycle(i, t)?,
        }
        let a = &self.agents[i];
        let obstacles = obstacles_ahead(a, bodies);
        let held_lock = (scn.algorithm == Algorithm::Lock && a.lock == LockStage::Held).then(|| Lease {
            lease_id: "lock".into(),
            holder_id: a.id,
            registrar: a.id,
            block_id: a.first_block().to_string(),
            path_id: a.path.id().to_string(),
            t_start: f64::NEG_INFINITY,
            t_end: f64::INFINITY,
            kind: LeaseKind::V2v,
            status: LeaseStatus::Active,
        });
        let lease = held_lock.as_ref().or(a.gate_lease());
        let preempted = a.state.phase == Phase::Crossing && self.preempted(a, t);
        let input = PlanInput {
            vehicle: &a.state,
            lease,
            path: &a.path,
            stop_line_offset: self.model.stop_line_offset(),
            obstacles: &obstacles,
            preempted,
            now: t,
        };
        let mut d = plan_speed(&input, &a.params, &scn.planner);
        if held_lock.is_some() {
            d.gate = None;
        }
        // the baseline has nothing to pace against and approaches the line at the advised speed
        if scn.algorithm == Algorithm::Lock && d.reason == DirectiveReason::NoLeaseCruise {
            d.v_target = scn.planner.v_advised.min(a.params.v_max);
        }
        let (id, reason, v_target) = (a.id, d.reason, d.v_target);
        self.agents[i].directive = d;
        self.emit(TraceRecord::Directive { t, id, reason, v_target, staleness });
        Ok(())
    }

    fn preempted(&self, a: &Agent, t: f64) -> bool {
        let table = LeaseTable::read(&a.replica, &self.model);
        let s = a.state.s;
        a.path.spans().iter().filter(|sp| s >= sp.enter_s && s - a.params.length < sp.exit_s).any(|sp| {
            let mine = a.own.iter().any(|(l, _)| l.block_id == sp.block_id && l.t_start <= t && t < l.t_end);
            !mine
                && table.leases.iter().any(|l| {
                    l.kind == LeaseKind::NonV2vProxy
                        && l.block_id == sp.block_id
                        && l.t_start <= t
                        && t < l.t_end
                        && self.model.paths_conflict(&l.path_id, a.path.id()).unwrap_or(true)
                })
        })
    }

    fn perceive(&mut self, i: usize, t: f64, bodies: &[Body]) -> Vec<FusedObject> {
        let a = &self.agents[i];
        let me = a.body();
        let ego = Pose { position: me.center, heading: me.heading };
        let world: Vec<WorldObject> = bodies
            .iter()
            .filter(|b| b.id != a.id)
            .map(|b| match b.obstacle {
                Some(_) => WorldObject {
                    id: b.id,
                    class_label: ClassLabel::Person,
                    position: b.shape.center,
                    radius: 0.5 * b.shape.length.min(b.shape.width),
                },
                None => WorldObject { id: b.id, class_label: ClassLabel::Car, position: b.shape.center, radius: ClassLabel::Car.radius() },
            })
            .collect();
        let frame = sense(&world, &ego, a.id, &self.scn.occluders, &self.scn.sensor, t, &mut self.rng);
        let fused = perceive(&frame, &ego, &self.scn.sensor);
        self.agents[i].tracker.update(&fused, t, &self.scn.kalman, TRACK_MAX_AGE)
    }

    fn publish(&mut self, i: usize, t: f64, tracked: &[FusedObject]) -> Result<(), SimError> {
        let a = &self.agents[i];
        let body = a.body();
        let msg = StateMsg {
            t,
            path_id: a.path.id().to_string(),
            s: a.state.s,
            speed: a.state.speed,
            phase: a.state.phase,
            x: body.center.x,
            y: body.center.y,
            heading: body.heading,
        };
        let id = a.id;
        self.store.put(&keys::vehicle_state(id), &encode(&msg), id, t)?;
        self.store.put(&keys::vehicle_surrounding(id), &encode(&tracked), id, t)?;
        Ok(())
    }

    /// Age of the oldest peer state in the agent's view.
    fn staleness(&self, i: usize, t: f64) -> Option<f64> {
        let a = &self.agents[i];
        let mine = keys::vehicle_state(a.id);
        a.replica
            .range_read("vehicles/")
            .iter()
            .filter(|e| e.key.ends_with("/state") && e.key != mine)
            .map(|e| t - e.mod_time)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
    }

    fn proxy_duties(&mut self, i: usize, t: f64, tracked: &[FusedObject]) -> Result<(), SimError> {
        let scn = self.scn;
        let lp = scn.lease;
        let me = self.agents[i].id;
        let table = LeaseTable::read(&self.agents[i].replica, &self.model);
        let seen: BTreeSet<AgentId> = tracked.iter().map(|o| o.object_key).collect();
        for o in tracked.iter().filter(|o| o.class_label == ClassLabel::Car) {
            let key = o.object_key;
            let a = &self.agents[i];
            if a.replica.get(&keys::vehicle_state(key)).is_some() {
                continue;
            }
            if a.tracker.age(key, t).is_none_or(|age| age < PROXY_MIN_TRACK_AGE) {
                continue;
            }
            let speed = o.world_vel.norm();
            if speed < PROXY_MIN_SPEED {
                continue;
            }
            let length = scn.vehicle_defaults.length;
            let Some((path, s_front)) = infer_path(&self.model, o.world_pos, o.world_vel, length) else {
                continue;
            };
            let existing = table.proxy_for(key);
            let occ = proxy_occupancy(path, s_front, length, speed, lp.margin, lp.proxy_lead, t);
            let path_id = path.id().to_string();
            let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &lp, now: t, events: &mut self.events };
            match occ {
                None => {
                    if existing.iter().any(|l| l.registrar == me) {
                        soft(cancel_proxy(&mut ctx, me, key))?;
                    }
                }
                Some(mut occ) if existing.is_empty() => {
                    occ.t_enter = occ.blocks.iter().map(|w| w.start).fold(f64::INFINITY, f64::min);
                    soft(proxy_lease_for_non_v2v(&mut ctx, me, key, &path_id, &occ, &self.agents[i].replica))?;
                }
                Some(mut occ) if existing.iter().all(|l| l.registrar == me) => {
                    // a window never opens later than first registered
                    for w in &mut occ.blocks {
                        if let Some(l) = existing.iter().find(|l| l.block_id == w.block_id) {
                            w.start = w.start.min(l.t_start);
                        }
                    }
                    occ.t_enter = occ.blocks.iter().map(|w| w.start).fold(f64::INFINITY, f64::min);
                    soft(refresh_proxy(&mut ctx, me, key, &path_id, &occ, &self.agents[i].replica))?;
                }
                Some(_) => {}
            }
        }
        // drop our proxies for cars no longer tracked once their window ends
        let stale: BTreeSet<AgentId> =
            table.leases.iter().filter(|l| l.kind == LeaseKind::NonV2vProxy && l.registrar == me && !seen.contains(&l.holder_id) && t > l.t_end).map(|l| l.holder_id).collect();
        for observed in stale {
            let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &lp, now: t, events: &mut self.events };
            soft(cancel_proxy(&mut ctx, me, observed))?;
        }
        Ok(())
    }

    fn lease_lifecycle(&mut self, i: usize, t: f64, bodies: &[Body]) -> Result<(), SimError> {
        let scn = self.scn;
        let lp = scn.lease;
        let v_adv = scn.planner.v_advised.min(self.agents[i].params.v_max);
        let a = &self.agents[i];
        let (id, phase) = (a.id, a.state.phase);
        let own = a.own_leases();
        let path_id = a.path.id().to_string();
        let mut updated: Option<Vec<Lease>> = None;
        match phase {
            Phase::Planning => {
                let blocked = path_blocked(a, bodies);
                let est = if blocked { None } else { estimate_occupancy(&a.state, &a.params, &a.path, v_adv, lp.margin, t).ok() };
                let replica_table = LeaseTable::read(&a.replica, &self.model);
                let first = a.gate_lease().cloned();
                let new_id = self.agents[i].next_lease_id();
                let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &lp, now: t, events: &mut self.events };
                match (first, est) {
                    (None, Some(occ)) => {
                        updated = soft(apply_for_lease(&mut ctx, id, &new_id, &path_id, &occ, Some(&self.agents[i].replica)))?;
                    }
                    (None, None) => {}
                    (Some(lease), est) => match check_feasibility(&lease, est.as_ref().map(|o| o.t_enter), t, lp.grace) {
                        Feasibility::Infeasible => match est {
                            Some(occ) => {
                                updated = soft(cancel_and_reapply(&mut ctx, id, &own, &new_id, &path_id, &occ))?;
                                if updated.is_none() {
                                    updated = Some(Vec::new());
                                }
                            }
                            None => {
                                soft(cancel_lease(&mut ctx, id, &own))?;
                                updated = Some(Vec::new());
                            }
                        },
                        Feasibility::Feasible => {
                            if let Some(occ) = est {
                                updated = soft(try_bring_forward(&mut ctx, id, &own, &occ, &replica_table))?.flatten();
                            }
                        }
                    },
                }
            }
            Phase::Crossing => {
                let s = a.state.s;
                let (length, speed, a_max) = (a.params.length, a.state.speed, a.params.a_max);
                let spans = a.path.spans().to_vec();
                let mut next = own.clone();
                for lease in &own {
                    let Some(span) = spans.iter().find(|sp| sp.block_id == lease.block_id) else { continue };
                    let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &lp, now: t, events: &mut self.events };
                    if s - length >= span.exit_s {
                        soft(release_after_exit(&mut ctx, id, std::slice::from_ref(lease)))?;
                        next.retain(|l| l.block_id != lease.block_id);
                        continue;
                    }
                    let predicted = t + travel_time(span.exit_s + length - s, speed, v_adv, a_max);
                    // a vehicle sure to clear before the window closes does not ask
                    if predicted + scn.planner.decision_period < lease.t_end {
                        continue;
                    }
                    if let Some(Some(ext)) = soft(extend_if_expiring(&mut ctx, id, lease, Some(predicted), Some(&self.agents[i].replica)))? {
                        for l in &mut next {
                            if l.block_id == ext.block_id {
                                *l = ext.clone();
                            }
                        }
                    }
                }
                if next != own {
                    updated = Some(next);
                }
            }
            Phase::PostCrossing => {
                if !own.is_empty() {
                    let mut ctx = LeaseCtx { store: &mut self.store, model: &self.model, params: &lp, now: t, events: &mut self.events };
                    soft(release_after_exit(&mut ctx, id, &own))?;
                    updated = Some(Vec::new());
                }
            }
        }
        if let Some(leases) = updated {
            let a = &mut self.agents[i];
            a.own = leases.into_iter().map(|l| {
                let v = self.store.version(&lease_key(&l));
                (l, v)
            }).collect();
            a.sync_gate();
        }
        Ok(())
    }

    fn lock_lifecycle(&mut self, i: usize, t: f64) -> Result<(), SimError> {
        let block = self.lock_block();
        let a = &self.agents[i];
        let id = a.id;
        let proto = |e: LeaseError| SimError::Protocol(e.to_string());
        match (a.state.phase, a.lock) {
            (Phase::Planning, LockStage::Idle) => {
                let line = stop_line_s(&a.path, self.model.stop_line_offset());
                if line - a.state.s <= LOCK_AT_LINE {
                    let granted = lock_acquire(&mut self.store, &a.replica, &block, id, t).map_err(proto)?;
                    self.agents[i].lock = if granted {
                        LockStage::Held
                    } else {
                        lock_request(&mut self.store, &block, id, t).map_err(proto)?;
                        LockStage::Requested
                    };
                }
            }
            (Phase::Planning, LockStage::Requested) => {
                if lock_acquire(&mut self.store, &a.replica, &block, id, t).map_err(proto)? {
                    self.agents[i].lock = LockStage::Held;
                }
            }
            (Phase::PostCrossing, LockStage::Held) => {
                lock_release(&mut self.store, &block, id, t).map_err(proto)?;
                self.agents[i].lock = LockStage::Released;
            }
            _ => {}
        }
        Ok(())
    }

    /// Emits store and lease records for this tick and checks every new
    /// commit against the non-overlap invariant.
    fn flush(&mut self, t: f64) {
        let new_ops: Vec<OpRecord> = self.store.log()[self.log_cursor..].to_vec();
        self.log_cursor = self.store.log().len();
        let mut idx = 0;
        while idx < new_ops.len() {
            let txn = new_ops[idx].txn;
            let mut touched = false;
            while idx < new_ops.len() && new_ops[idx].txn == txn {
                let op = &new_ops[idx];
                if is_lease_key(&op.key) {
                    touched = true;
                    match (op.kind, op.value.as_deref().and_then(decode::<Lease>)) {
                        (ChangeKind::Put, Some(l)) => {
                            self.live_leases.insert(op.key.clone(), l);
                        }
                        _ => {
                            self.live_leases.remove(&op.key);
                        }
                    }
                }
                idx += 1;
            }
            if touched {
                let live: Vec<Lease> = self.live_leases.values().cloned().collect();
                if let Some((x, y)) = find_overlap(&live, &self.model) {
                    let detail = format!("{} [{}, {}) and {} [{}, {}) on {}", x.lease_id, x.t_start, x.t_end, y.lease_id, y.t_start, y.t_end, x.block_id);
                    self.violate(t, "lease-overlap", detail);
                }
            }
        }
        if self.scn.record_trace {
            for op in new_ops {
                self.emit(TraceRecord::StoreOp { op });
            }
            let evs: Vec<LeaseEvent> = self.events[self.event_cursor..].to_vec();
            for event in evs {
                self.emit(TraceRecord::LeaseEvent { event });
            }
            let vehicles: Vec<TickVehicle> = self
                .agents
                .iter()
                .filter(|a| !a.gone)
                .map(|a| {
                    let p = a.path.point_at(a.state.s);
                    TickVehicle { id: a.id, path_id: a.path.id().to_string(), s: a.state.s, speed: a.state.speed, phase: a.state.phase, x: p.x, y: p.y }
                })
                .collect();
            if !vehicles.is_empty() {
                self.emit(TraceRecord::TickState { t, vehicles });
            }
        }
        self.event_cursor = self.events.len();
    }

    fn finish(self) -> RunOutput {
        let scn = self.scn;
        let vehicles: Vec<VehicleMetrics> = self
            .agents
            .iter()
            .map(|a| VehicleMetrics {
                id: a.id,
                path_id: a.path.id().to_string(),
                coordinated: a.coordinated,
                spawn_time: a.spawn_time,
                entered_at: a.entered_at,
                completed_at: a.completed_at,
                crossing_time: a.completed_at.map(|c| c - a.spawn_time),
                stops: a.stops,
                energy: a.energy,
            })
            .collect();
        let all_done = self.pending.is_empty() && !vehicles.is_empty() && vehicles.iter().all(|v| v.completed_at.is_some());
        let total = if scn.vehicles.is_empty() {
            Some(0.0)
        } else if all_done {
            vehicles.iter().filter_map(|v| v.completed_at).reduce(f64::max)
        } else {
            None
        };
        let mut lease_events = BTreeMap::new();
        for e in &self.events {
            let name = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            *lease_events.entry(name).or_insert(0) += 1;
        }
        let staleness_bound = match scn.net.sync_latency {
            LatencySpec::Zero => Some(scn.planner.decision_period),
            LatencySpec::Fixed { seconds } if scn.net.loss_prob == 0.0 => Some(seconds + scn.planner.decision_period),
            _ => None,
        };
        let n_coord = self.agents.iter().filter(|a| a.coordinated).count();
        let end_time = self.store.log().last().map_or(0.0, |r| r.t).max(self.agents.iter().filter_map(|a| a.completed_at).fold(0.0, f64::max));
        let metrics = RunMetrics {
            scenario: scn.name.clone(),
            algorithm: scn.algorithm,
            seed: scn.seed,
            end_time: if all_done { end_time } else { scn.duration },
            vehicles,
            total_completion_time: total,
            collisions: self.collisions,
            invariant_violation: self.violation,
            lease_events,
            max_staleness: self.max_staleness,
            staleness_bound,
            lease_audit_error: audit_lease_log(self.store.log(), &self.model).err(),
            store_commits: self.store.log().len(),
            bandwidth: aggregate_bandwidth(n_coord, &scn.net),
        };
        RunOutput { metrics, trace: self.trace, lease_events: self.events, store_log: self.store.log().to_vec() }
    }
}

/// Applies a delivered change to the agent's own-lease belief when it is
/// newer than what the agent already knows. Returns whether anything moved.
fn absorb_own(a: &mut Agent, ev: &WatchEvent) -> bool {
    if !is_lease_key(&ev.key) {
        return false;
    }
    let Some(pos) = a.own.iter().position(|(l, _)| lease_key(l) == ev.key) else {
        return false;
    };
    if ev.version <= a.own[pos].1 {
        return false;
    }
    match (ev.kind, ev.value.as_deref().and_then(decode::<Lease>)) {
        (ChangeKind::Put, Some(l)) if l.holder_id == a.id => {
            a.own[pos] = (l, ev.version);
        }
        _ => {
            a.own.remove(pos);
        }
    }
    true
}
