use std::collections::HashSet;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleParams;
use crate::geometry::{GeometryConfig, IntersectionModel, Rect, Vec2};
use crate::network::NetParams;
use crate::perception::{KalmanNoise, SensorParams};
use crate::planner::PlannerParams;
use crate::scheduler::LeaseParams;
use crate::store::AgentId;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Lease,
    Lock,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lease" => Ok(Algorithm::Lease),
            "lock" => Ok(Algorithm::Lock),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: AgentId,
    pub path_id: String,
    #[serde(default)]
    pub spawn_time: f64,
    #[serde(default)]
    pub initial_s: f64,
    #[serde(default)]
    pub initial_speed: f64,
    #[serde(default = "yes")]
    pub is_v2v: bool,
    /// Replaces the fleet defaults for this vehicle; omitted fields keep
    /// their built-in defaults.
    #[serde(default)]
    pub params: Option<VehicleParams>,
}

fn yes() -> bool {
    true
}

/// Static blocker that exists during `[appear_time, clear_time)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub id: AgentId,
    pub center: Vec2,
    pub size: Vec2,
    #[serde(default)]
    pub appear_time: f64,
    #[serde(default)]
    pub clear_time: Option<f64>,
}

impl ObstacleSpec {
    pub fn rect(&self) -> Rect {
        Rect::centered(self.center, self.size.x, self.size.y)
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.appear_time && self.clear_time.is_none_or(|c| t < c)
    }
}

/// Per-seed uniform perturbation half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    pub spawn_time: f64,
    pub initial_s: f64,
    pub speed: f64,
    pub obstacle_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub geometry: GeometryConfig,
    pub vehicles: Vec<VehicleSpec>,
    pub obstacles: Vec<ObstacleSpec>,
    pub occluders: Vec<Rect>,
    pub algorithm: Algorithm,
    pub net: NetParams,
    pub seed: u64,
    pub duration: f64,
    /// Physics step, seconds.
    pub dt: f64,
    pub jitter: Jitter,
    pub vehicle_defaults: VehicleParams,
    pub lease: LeaseParams,
    pub planner: PlannerParams,
    pub sensor: SensorParams,
    pub kalman: KalmanNoise,
    /// Vehicles whose coordination is switched off.
    pub no_v2v: Vec<AgentId>,
    pub debug_invariants: bool,
    pub record_trace: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            geometry: GeometryConfig::default(),
            vehicles: Vec::new(),
            obstacles: Vec::new(),
            occluders: Vec::new(),
            algorithm: Algorithm::Lease,
            net: NetParams::default(),
            seed: 0,
            duration: 30.0,
            dt: 0.01,
            jitter: Jitter::default(),
            vehicle_defaults: VehicleParams::default(),
            lease: LeaseParams::default(),
            planner: PlannerParams::default(),
            sensor: SensorParams::default(),
            kalman: KalmanNoise::default(),
            no_v2v: Vec::new(),
            debug_invariants: false,
            record_trace: true,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &FsPath) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn params_of(&self, v: &VehicleSpec) -> VehicleParams {
        v.params.unwrap_or(self.vehicle_defaults)
    }

    /// Decision interval in physics ticks.
    pub fn decision_every(&self) -> u64 {
        (self.planner.decision_period / self.dt).round().max(1.0) as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return bad("dt must be positive and duration non-negative".into());
        }
        let ratio = self.planner.decision_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio < 1.0 {
            return bad("decision period must be a whole number of physics steps".into());
        }
        let model = IntersectionModel::build(&self.geometry).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let mut ids = HashSet::new();
        for v in &self.vehicles {
            if !ids.insert(v.id) {
                return bad(format!("duplicate vehicle id {}", v.id));
            }
            let p = self.params_of(v);
            p.validate().map_err(|e| SimError::InvalidScenario(format!("vehicle {}: {e}", v.id)))?;
            let path = model.path(&v.path_id).map_err(|e| SimError::InvalidScenario(format!("vehicle {}: {e}", v.id)))?;
            if v.spawn_time < 0.0 || v.spawn_time > self.duration {
                return bad(format!("vehicle {} spawns outside the run", v.id));
            }
            if !(0.0..=p.v_max).contains(&v.initial_speed) {
                return bad(format!("vehicle {} initial speed outside [0, v_max]", v.id));
            }
            if v.initial_s < 0.0 || v.initial_s >= path.length() {
                return bad(format!("vehicle {} starts off its path", v.id));
            }
        }
        for o in &self.obstacles {
            if !ids.insert(o.id) {
                return bad(format!("obstacle id {} collides with another id", o.id));
            }
        }
        Ok(())
    }
}
