use serde::{Deserialize, Serialize};

use crate::dynamics::Phase;
use crate::planner::DirectiveReason;
use crate::scheduler::LeaseEvent;
use crate::store::{AgentId, OpRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickVehicle {
    pub id: AgentId,
    pub path_id: String,
    pub s: f64,
    pub speed: f64,
    pub phase: Phase,
    pub x: f64,
    pub y: f64,
}

/// One line of the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceRecord {
    TickState {
        t: f64,
        vehicles: Vec<TickVehicle>,
    },
    StoreOp {
        op: OpRecord,
    },
    LeaseEvent {
        event: LeaseEvent,
    },
    Directive {
        t: f64,
        id: AgentId,
        reason: DirectiveReason,
        v_target: f64,
        /// Oldest peer state in the agent's view, seconds; absent with no peers.
        staleness: Option<f64>,
    },
    Collision {
        t: f64,
        a: AgentId,
        b: AgentId,
    },
    InvariantViolation {
        t: f64,
        invariant: String,
        detail: String,
    },
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
