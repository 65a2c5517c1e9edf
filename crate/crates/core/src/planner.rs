//! Lease enforcement: turns phase, lease, and obstacles into a speed
//! directive per decision tick, plus the per-physics-tick limits that keep a
//! vehicle out of the block until it is allowed in.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Phase, VehicleParams, VehicleState};
use crate::geometry::Path;
use crate::scheduler::{lag_delay, travel_time, Lease};

/// A lease-less vehicle stopped short of the line resumes at the advised
/// speed instead of holding zero.
pub const RESUME_BELOW: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    pub v_advised: f64,
    /// Added to the stopping distance to get the emergency distance.
    pub emergency_buffer: f64,
    /// Pacing aims this long after the lease start.
    pub pace_slack: f64,
    /// Gap kept to a stopped obstacle or vehicle ahead.
    pub follow_gap: f64,
    /// Deceleration used for the soft stop envelope, m/s^2.
    pub stop_decel: f64,
    pub decision_period: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { v_advised: 0.9, emergency_buffer: 0.1, pace_slack: 0.02, follow_gap: 0.15, stop_decel: 0.8, decision_period: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveReason {
    NoLeaseCruise,
    MeetLease,
    StopAtLine,
    CrossAdvised,
    PostCrossAdvised,
    EmergencyStop,
    PreemptedHold,
}

/// Entry gate: the front may not pass `s` before `open_at`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub s: f64,
    pub open_at: f64,
    /// The gate shuts again at this time.
    pub close_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDirective {
    pub v_target: f64,
    pub reason: DirectiveReason,
    /// Soft stop point: speed is capped so the vehicle can halt there.
    pub stop_at: Option<f64>,
    pub gate: Option<Gate>,
}

impl PlanDirective {
    fn new(v_target: f64, reason: DirectiveReason) -> Self {
        Self { v_target, reason, stop_at: None, gate: None }
    }
}

/// Braking distance from `v` at constant deceleration `a_min`.
pub fn stopping_distance(v: f64, a_min: f64) -> f64 {
    let v = v.max(0.0);
    v * v / (2.0 * a_min.abs())
}

/// Cruise speed `v_c` such that holding `v_c` and then ramping at `accel`
/// to `v_adv` covers `distance` in exactly `time`. Infeasible requests
/// saturate to `[0, v_max]`.
pub fn pace(distance: f64, time: f64, v_adv: f64, accel: f64, v_max: f64) -> f64 {
    if distance <= 0.0 {
        return v_adv.min(v_max);
    }
    if time <= 0.0 {
        return v_max;
    }
    let cruise = v_adv * time;
    let v_c = if cruise >= distance {
        // slower first: d = v_c T + (v_adv - v_c)^2 / (2a)
        let disc = time * time - 2.0 * (cruise - distance) / accel;
        if disc < 0.0 {
            0.0
        } else {
            v_adv - accel * (time - disc.sqrt())
        }
    } else {
        // faster first: d = v_c T - (v_c - v_adv)^2 / (2a)
        let disc = time * time - 2.0 * (distance - cruise) / accel;
        if disc < 0.0 {
            v_max
        } else {
            v_adv + accel * (time - disc.sqrt())
        }
    };
    v_c.clamp(0.0, v_max)
}

/// Where the vehicle must stop without a lease.
pub fn stop_line_s(path: &Path, stop_line_offset: f64) -> f64 {
    path.first_enter() - stop_line_offset
}

/// Per-vehicle inputs of one decision.
pub struct PlanInput<'a> {
    pub vehicle: &'a VehicleState,
    /// Own lease on the first block of the path, if any.
    pub lease: Option<&'a Lease>,
    pub path: &'a Path,
    pub stop_line_offset: f64,
    /// Distances from the front bumper to obstacles ahead on the path.
    pub obstacles: &'a [f64],
    /// A priority window currently claims the block the vehicle is in.
    pub preempted: bool,
    pub now: f64,
}

/// Rule precedence: emergency stop, then phase rules.
pub fn plan_speed(input: &PlanInput, vp: &VehicleParams, pp: &PlannerParams) -> PlanDirective {
    let v = input.vehicle;
    let v_adv = pp.v_advised.min(vp.v_max);
    let emergency = stopping_distance(v.speed, vp.a_min) + pp.emergency_buffer;
    let nearest = input.obstacles.iter().copied().filter(|d| *d >= 0.0).fold(f64::INFINITY, f64::min);
    if nearest <= emergency {
        return PlanDirective::new(0.0, DirectiveReason::EmergencyStop);
    }
    let follow_stop = nearest.is_finite().then_some(v.s + nearest - pp.follow_gap);
    let mut d = match v.phase {
        Phase::Crossing if input.preempted => PlanDirective::new(0.0, DirectiveReason::PreemptedHold),
        Phase::Crossing => PlanDirective::new(v_adv, DirectiveReason::CrossAdvised),
        Phase::PostCrossing => PlanDirective::new(v_adv, DirectiveReason::PostCrossAdvised),
        Phase::Planning => match input.lease {
            Some(lease) => {
                let enter = input.path.first_enter();
                let dist = enter - v.s;
                let t_left = lease.t_start + pp.pace_slack - input.now;
                let lag = lag_delay(v.speed, v_adv, vp);
                let earliest = travel_time(dist, v.speed, v_adv, vp.a_max) + lag;
                // no slack to spare: go now and let the gate hold the line
                let v_target = if t_left <= earliest + 0.5 * pp.decision_period {
                    v_adv
                } else {
                    pace(dist, t_left - lag, v_adv, vp.a_max, vp.v_max)
                };
                let mut d = PlanDirective::new(v_target, DirectiveReason::MeetLease);
                d.gate = Some(Gate { s: enter, open_at: lease.t_start, close_at: lease.t_end });
                d
            }
            None => {
                let line = stop_line_s(input.path, input.stop_line_offset);
                let trigger = stopping_distance(v.speed, vp.a_min) + v.speed * pp.decision_period + pp.emergency_buffer;
                let mut d = if line - v.s <= trigger {
                    // ramp down so the halt lands on the line
                    let ramp = (2.0 * pp.stop_decel * (line - v.s).max(0.0)).sqrt();
                    PlanDirective::new(ramp.min(vp.v_max), DirectiveReason::StopAtLine)
                } else {
                    let cruise = if v.speed < RESUME_BELOW { v_adv } else { v.speed };
                    PlanDirective::new(cruise.min(vp.v_max), DirectiveReason::NoLeaseCruise)
                };
                d.stop_at = Some(line);
                d.gate = Some(Gate { s: input.path.first_enter(), open_at: f64::INFINITY, close_at: f64::INFINITY });
                d
            }
        },
    };
    if let Some(f) = follow_stop {
        d.stop_at = Some(d.stop_at.map_or(f, |s| s.min(f)));
    }
    d
}

/// Physics-tick enforcement of a directive. Returns the commanded speed and
/// whether to brake at full authority instead.
pub fn enforce(d: &PlanDirective, s: f64, v: f64, now: f64, vp: &VehicleParams, pp: &PlannerParams, dt: f64) -> (f64, bool) {
    if d.reason == DirectiveReason::EmergencyStop {
        return (0.0, true);
    }
    let mut v_cmd = d.v_target;
    let brake_reach = s + stopping_distance(v, vp.a_min) + 2.0 * v * dt;
    let mut brake = false;
    if let Some(stop) = d.stop_at {
        let room = (stop - s).max(0.0);
        v_cmd = v_cmd.min((2.0 * pp.stop_decel * room).sqrt());
        if brake_reach >= stop && v > 0.0 {
            brake = true;
        }
    }
    if let Some(g) = d.gate {
        // reach after one more tick of full acceleration, so a stopped
        // vehicle cannot creep across in sub-millimetre steps
        let v1 = v + vp.a_max * dt;
        let creep_reach = s + stopping_distance(v1, vp.a_min) + 2.0 * v1 * dt;
        // brake only if continuing would reach the gate before it opens
        if s < g.s && creep_reach >= g.s {
            let heading = v.max(vp.a_max * dt);
            let arrive = if heading > 1e-9 { now + (g.s - s) / heading } else { f64::INFINITY };
            if (now < g.open_at && arrive < g.open_at) || now >= g.close_at {
                brake = true;
            }
        }
    }
    (v_cmd.max(0.0), brake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MotorState;
    use crate::geometry::IntersectionModel;
    use crate::scheduler::{LeaseKind, LeaseStatus};

    /// Arrival time of the cruise-then-ramp profile on a 1 ms grid.
    fn simulate_arrival(distance: f64, v_c: f64, v_adv: f64, accel: f64, time: f64) -> (f64, f64) {
        let dt = 1e-3;
        let ramp = (v_adv - v_c).abs() / accel;
        let (mut s, mut t) = (0.0, 0.0);
        let speed = |t: f64| {
            let t_ramp_start = time - ramp;
            if t < t_ramp_start {
                v_c
            } else {
                let k = ((t - t_ramp_start) * accel).min((v_adv - v_c).abs());
                if v_adv > v_c { v_c + k } else { v_c - k }
            }
        };
        while s < distance {
            s += 0.5 * (speed(t) + speed(t + dt)) * dt;
            t += dt;
        }
        (t, speed(t))
    }

    #[test]
    fn stopping_distance_formula_and_oracle() {
        assert_eq!(stopping_distance(1.0, -2.0), 0.25);
        assert_eq!(stopping_distance(0.0, -2.0), 0.0);
        let (mut s, mut v) = (0.0_f64, 1.0_f64);
        let dt = 0.01;
        while v > 0.0 {
            let v1 = (v - 2.0 * dt).max(0.0);
            s += 0.5 * (v + v1) * dt;
            v = v1;
        }
        assert!((s - 0.25).abs() <= 1.0 * dt);
    }

    #[test]
    fn exact_pace() {
        assert!((pace(1.0, 1.0, 1.0, 1.0, 1.5) - 1.0).abs() < 1e-12);
        for (d, t) in [(1.0, 1.5), (0.6, 0.6), (2.0, 4.0), (0.8, 1.2)] {
            let v_c = pace(d, t, 0.9, 1.0, 1.5);
            let (arrive, v_end) = simulate_arrival(d, v_c, 0.9, 1.0, t);
            assert!((arrive - t).abs() < 5e-3, "d={d} t={t} v_c={v_c} arrive={arrive}");
            assert!((v_end - 0.9).abs() < 5e-3);
        }
        // impossible deadlines saturate
        assert_eq!(pace(5.0, 1.0, 0.9, 1.0, 1.5), 1.5);
        assert_eq!(pace(0.1, 10.0, 0.9, 1.0, 1.5), 0.0);
    }

    fn vehicle(path: &Path, s: f64, speed: f64) -> VehicleState {
        VehicleState {
            id: 1,
            path_id: path.id().to_string(),
            s,
            speed,
            phase: Phase::from_position(s, 0.425, path.first_enter(), path.last_exit()),
            is_v2v: true,
            motor: MotorState::at_speed(speed),
        }
    }

    fn lease(t_start: f64) -> Lease {
        Lease {
            lease_id: "v1-0".into(),
            holder_id: 1,
            registrar: 1,
            block_id: "main".into(),
            path_id: "south_straight".into(),
            t_start,
            t_end: t_start + 2.0,
            kind: LeaseKind::V2v,
            status: LeaseStatus::Active,
        }
    }

    #[test]
    fn directive_rules() {
        let m = IntersectionModel::four_way();
        let path = m.path("south_straight").unwrap();
        let vp = VehicleParams::default();
        let pp = PlannerParams { v_advised: 1.0, pace_slack: 0.0, ..PlannerParams::default() };
        let v = vehicle(path, path.first_enter() - 1.0, 1.0);
        let l = lease(1.0);
        let input = PlanInput { vehicle: &v, lease: Some(&l), path, stop_line_offset: 0.1, obstacles: &[], preempted: false, now: 0.0 };
        let d = plan_speed(&input, &vp, &pp);
        assert_eq!(d.reason, DirectiveReason::MeetLease);
        assert!((d.v_target - 1.0).abs() < 1e-12);

        // 0.2 m from the line with no lease; stopping distance at 1 m/s is 0.25 m
        let v = vehicle(path, path.first_enter() - 0.1 - 0.2, 1.0);
        let input = PlanInput { lease: None, vehicle: &v, ..input };
        assert_eq!(plan_speed(&input, &vp, &pp).reason, DirectiveReason::StopAtLine);

        let input = PlanInput { obstacles: &[0.15], lease: Some(&l), ..input };
        assert_eq!(plan_speed(&input, &vp, &pp).reason, DirectiveReason::EmergencyStop);

        let far = vehicle(path, 0.0, 0.5);
        let input = PlanInput { vehicle: &far, obstacles: &[], lease: None, ..input };
        let d = plan_speed(&input, &vp, &pp);
        assert_eq!((d.reason, d.v_target), (DirectiveReason::NoLeaseCruise, 0.5));

        let inside = vehicle(path, path.first_enter() + 0.3, 0.9);
        let input = PlanInput { vehicle: &inside, ..input };
        assert_eq!(plan_speed(&input, &vp, &pp).reason, DirectiveReason::CrossAdvised);
        let input = PlanInput { preempted: true, ..input };
        assert_eq!(plan_speed(&input, &vp, &pp).reason, DirectiveReason::PreemptedHold);
        let out = vehicle(path, path.last_exit() + 0.5, 0.9);
        let input = PlanInput { vehicle: &out, preempted: false, ..input };
        assert_eq!(plan_speed(&input, &vp, &pp).reason, DirectiveReason::PostCrossAdvised);
    }

    #[test]
    fn gate_brakes_only_when_early() {
        let vp = VehicleParams::default();
        let pp = PlannerParams::default();
        let d = PlanDirective { v_target: 0.9, reason: DirectiveReason::MeetLease, stop_at: None, gate: Some(Gate { s: 1.0, open_at: 1.0, close_at: f64::INFINITY }) };
        // 0.19 m out at 0.9 m/s arrives at 0.21 s: far too early
        assert!(enforce(&d, 0.81, 0.9, 0.0, &vp, &pp, 0.01).1);
        // same spot but arrival after the gate opens
        assert!(!enforce(&d, 0.81, 0.9, 0.9, &vp, &pp, 0.01).1);
        // far away: no braking yet
        assert!(!enforce(&d, 0.0, 0.9, 0.0, &vp, &pp, 0.01).1);
        // window already over
        let shut = PlanDirective { gate: Some(Gate { s: 1.0, open_at: 0.0, close_at: 0.5 }), ..d };
        assert!(enforce(&shut, 0.81, 0.9, 0.9, &vp, &pp, 0.01).1);
    }

    /// Closed loop at 10 ms: PI, plant and per-tick enforcement of a fixed
    /// directive. Returns the final position and speed.
    fn drive(d: &PlanDirective, s0: f64, v0: f64, t0: f64, seconds: f64) -> (f64, f64, f64) {
        use crate::dynamics::{brake_step, controller_step, plant_step};
        let (vp, pp, dt) = (VehicleParams::default(), PlannerParams::default(), 0.01);
        let mut m = MotorState::at_speed(v0);
        let mut max_s = s0;
        let steps = (seconds / dt).round() as usize;
        for k in 0..steps {
            let now = t0 + k as f64 * dt;
            let s = s0 + m.odometer_s;
            let (v_cmd, brake) = enforce(d, s, m.v_current, now, &vp, &pp, dt);
            m = if brake {
                brake_step(&vp, &m, dt)
            } else {
                let (c, duty) = controller_step(&vp, &m, v_cmd, dt).unwrap();
                plant_step(&vp, &c, duty, dt).unwrap()
            };
            max_s = max_s.max(s0 + m.odometer_s);
        }
        (s0 + m.odometer_s, m.v_current, max_s)
    }

    #[test]
    fn stopped_vehicle_cannot_creep_through_closed_gate() {
        let d = PlanDirective { v_target: 0.9, reason: DirectiveReason::MeetLease, stop_at: None, gate: Some(Gate { s: 1.8, open_at: 1.0, close_at: 3.0 }) };
        let (_, _, max_s) = drive(&d, 1.8 - 2e-4, 0.0, 0.0, 0.99);
        assert!(max_s < 1.8, "crept to {max_s}");
        // once open it goes
        let (s, _, _) = drive(&d, 1.8 - 2e-4, 0.0, 1.0, 0.5);
        assert!(s > 1.9);
    }

    #[test]
    fn stop_ramp_lands_on_the_line() {
        let m = IntersectionModel::four_way();
        let path = m.path("south_straight").unwrap();
        let (vp, pp) = (VehicleParams::default(), PlannerParams::default());
        let line = stop_line_s(path, 0.1);
        let mut s = line - 1.0;
        let mut v = 0.9;
        // re-plan every decision period like the engine does
        for k in 0..60 {
            let state = vehicle(path, s, v);
            let input = PlanInput { vehicle: &state, lease: None, path, stop_line_offset: 0.1, obstacles: &[], preempted: false, now: k as f64 * 0.1 };
            let d = plan_speed(&input, &vp, &pp);
            let (s1, v1, _) = drive(&d, s, v, 0.0, pp.decision_period);
            s = s1;
            v = v1;
        }
        assert!((line - s).abs() < 0.01, "halted at {s}, line {line}");
        assert!(v < 1e-3);
    }

    #[test]
    fn stopped_without_lease_resumes() {
        let m = IntersectionModel::four_way();
        let path = m.path("south_straight").unwrap();
        let (vp, pp) = (VehicleParams::default(), PlannerParams::default());
        let v = vehicle(path, 0.2, 0.0);
        let input = PlanInput { vehicle: &v, lease: None, path, stop_line_offset: 0.1, obstacles: &[], preempted: false, now: 0.0 };
        let d = plan_speed(&input, &vp, &pp);
        assert_eq!((d.reason, d.v_target), (DirectiveReason::NoLeaseCruise, pp.v_advised));
    }
}
