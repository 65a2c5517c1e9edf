//! Deterministic fixed-step driver: scenario loading, the tick loop, trace
//! records, and run metrics.

mod collision;
mod engine;
mod metrics;
mod scenario;
mod trace;

pub use collision::{detect_collisions, OrientedBox};
pub use engine::{run, RunOutput, StateMsg};
pub use metrics::{compare_algorithms, parse_seeds, CollisionRecord, ComparisonReport, ComparisonRow, RunMetrics, VehicleMetrics, ViolationRecord};
pub use scenario::{Algorithm, Jitter, ObstacleSpec, Scenario, VehicleSpec};
pub use trace::{parse_trace, TickVehicle, TraceRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("lock protocol: {0}")]
    Protocol(String),
}
