//! Longitudinal vehicle model: feed-forward + PI speed controller driving a
//! first-order-lag motor, and odometry-based localization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid vehicle parameters: {0}")]
    BadParams(&'static str),
}

/// Physical and controller constants of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Duty cycle per m/s of target speed.
    pub k_ff: f64,
    pub k_p: f64,
    pub k_i: f64,
    pub v_max: f64,
    pub a_max: f64,
    /// Braking limit, negative.
    pub a_min: f64,
    pub motor_lag_tau: f64,
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            k_ff: 0.1,
            k_p: 0.15,
            k_i: 0.05,
            v_max: 1.5,
            a_max: 1.0,
            a_min: -2.0,
            motor_lag_tau: 0.3,
            length: 0.425,
            width: 0.192,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let all = [self.k_ff, self.k_p, self.k_i, self.v_max, self.a_max, self.a_min, self.motor_lag_tau, self.length, self.width];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("vehicle params"));
        }
        if self.k_ff <= 0.0 {
            return Err(DynamicsError::BadParams("k_ff must be positive"));
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max) {
            return Err(DynamicsError::BadParams("need a_min < 0 < a_max"));
        }
        if self.v_max <= 0.0 || self.motor_lag_tau <= 0.0 {
            return Err(DynamicsError::BadParams("v_max and motor_lag_tau must be positive"));
        }
        if self.length < 0.0 || self.width < 0.0 {
            return Err(DynamicsError::BadParams("negative footprint"));
        }
        Ok(())
    }

    /// Bound on `k_i * integral` so a long stop cannot wind the integrator up.
    pub const INTEGRAL_AUTHORITY: f64 = 0.5;
    /// The integrator only accumulates once the speed error is below this
    /// (m/s); large transients are left to the proportional term.
    pub const INTEGRATION_BAND: f64 = 0.1;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorState {
    pub v_current: f64,
    pub integral_error: f64,
    pub odometer_s: f64,
    pub duty_cycle: f64,
}

impl MotorState {
    pub fn at_speed(v: f64) -> Self {
        Self { v_current: v, ..Self::default() }
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64, DynamicsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DynamicsError::NonFinite(what))
    }
}

/// One PI update. Returns the new controller state and the commanded duty
/// cycle, `k_ff * v_target + k_p * e + k_i * sum(e dt)`, clamped to `[0, 1]`.
/// The error sum only grows inside [`VehicleParams::INTEGRATION_BAND`].
pub fn controller_step(
    params: &VehicleParams,
    motor: &MotorState,
    v_target: f64,
    dt: f64,
) -> Result<(MotorState, f64), DynamicsError> {
    finite(v_target, "v_target")?;
    finite(dt, "dt")?;
    finite(motor.v_current, "v_current")?;
    finite(motor.integral_error, "integral")?;
    if dt <= 0.0 {
        return Err(DynamicsError::BadStep(dt));
    }
    let v_target = v_target.max(0.0);
    let error = v_target - motor.v_current;
    let mut integral = motor.integral_error;
    if error.abs() < VehicleParams::INTEGRATION_BAND {
        integral += error * dt;
    }
    if params.k_i > 0.0 {
        let lim = VehicleParams::INTEGRAL_AUTHORITY / params.k_i;
        integral = integral.clamp(-lim, lim);
    }
    let duty = (params.k_ff * v_target + params.k_p * error + params.k_i * integral).clamp(0.0, 1.0);
    Ok((MotorState { integral_error: integral, duty_cycle: duty, ..*motor }, duty))
}

/// Simulated motor: speed relaxes toward `duty / k_ff` with time constant
/// `motor_lag_tau`, slew-limited to `[a_min, a_max]` and capped at `v_max`.
pub fn plant_step(params: &VehicleParams, motor: &MotorState, duty_cycle: f64, dt: f64) -> Result<MotorState, DynamicsError> {
    finite(duty_cycle, "duty_cycle")?;
    finite(dt, "dt")?;
    finite(motor.v_current, "v_current")?;
    if dt <= 0.0 {
        return Err(DynamicsError::BadStep(dt));
    }
    let duty = duty_cycle.clamp(0.0, 1.0);
    let v_cmd = duty / params.k_ff;
    let v = motor.v_current;
    // exact first-order response over dt, then slew-limited
    let target_dv = (v_cmd - v) * (1.0 - (-dt / params.motor_lag_tau).exp());
    let dv = target_dv.clamp(params.a_min * dt, params.a_max * dt);
    let v_new = (v + dv).clamp(0.0, params.v_max);
    Ok(MotorState {
        v_current: v_new,
        odometer_s: motor.odometer_s + 0.5 * (v + v_new) * dt,
        duty_cycle: duty,
        ..*motor
    })
}

/// Full-authority braking at `a_min`, bypassing the motor lag.
pub fn brake_step(params: &VehicleParams, motor: &MotorState, dt: f64) -> MotorState {
    let v = motor.v_current;
    let v_new = (v + params.a_min * dt).max(0.0);
    let travelled = if v_new > 0.0 { 0.5 * (v + v_new) * dt } else { v * v / (2.0 * -params.a_min) };
    MotorState {
        v_current: v_new,
        odometer_s: motor.odometer_s + travelled,
        duty_cycle: 0.0,
        integral_error: 0.0,
    }
}

/// Position from the hard-coded start plus integrated odometry.
pub fn localize(motor: &MotorState, initial_s: f64) -> f64 {
    initial_s + motor.odometer_s
}

/// Simulates a step response from `v0` to `v_target` and reports the time
/// after which speed stays inside the `band` fraction of the target.
pub fn settling_time(params: &VehicleParams, v0: f64, v_target: f64, band: f64, dt: f64, horizon: f64) -> Option<f64> {
    let mut motor = MotorState::at_speed(v0);
    let tol = band * v_target.abs();
    let steps = (horizon / dt).round() as usize;
    let mut last_outside = if (v0 - v_target).abs() > tol { Some(0.0) } else { None };
    for k in 1..=steps {
        let (m, duty) = controller_step(params, &motor, v_target, dt).ok()?;
        motor = plant_step(params, &m, duty, dt).ok()?;
        if (motor.v_current - v_target).abs() > tol {
            last_outside = Some(k as f64 * dt);
        }
    }
    match last_outside {
        Some(t) if t >= horizon - dt / 2.0 => None,
        Some(t) => Some(t + dt),
        None => Some(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Planning,
    Crossing,
    PostCrossing,
}

impl Phase {
    /// Phase from the front-bumper position `s`: crossing while any part of
    /// the body overlaps `[enter_s, exit_s)`.
    pub fn from_position(s: f64, length: f64, enter_s: f64, exit_s: f64) -> Phase {
        if s < enter_s {
            Phase::Planning
        } else if s - length < exit_s {
            Phase::Crossing
        } else {
            Phase::PostCrossing
        }
    }
}

/// One traffic participant. `s` is the front-bumper arc length on `path_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub path_id: String,
    pub s: f64,
    pub speed: f64,
    pub phase: Phase,
    pub is_v2v: bool,
    pub motor: MotorState,
}
