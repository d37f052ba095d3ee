//! Deterministic fixed-step planning simulation.

mod kernel;
pub mod map;
mod vehicle;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::Scalar;

pub use kernel::{KernelError, KernelOptions, Pacing, SimHandle, SimUnavailable};
pub use map::{MapError, RouteMap, Turn};
pub use vehicle::{
    lane_change_lateral_accel, AvStatus, BehaviorParams, LaneChange, LeadVehicle, NextIntersection, OperationMode,
    SimConfig, Simulation, TrajectorySample, VehicleState, DT, LANE_CHANGE_DURATION, LANE_WIDTH, STOP_MARGIN,
};

/// Answer returned by a capability, e.g. the current speed limit.
pub type Payload = BTreeMap<String, Scalar>;

/// Operations the simulator exposes to the interface node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    SetDestination,
    Start,
    Stop,
    SetParam,
    TurnChoice,
    ChangeLane,
    OverrideLight,
    EmergencyStop,
    QuerySpeedLimit,
    QueryEta,
    QueryStatus,
}

impl Capability {
    pub const ALL: [Capability; 11] = [
        Capability::SetDestination,
        Capability::Start,
        Capability::Stop,
        Capability::SetParam,
        Capability::TurnChoice,
        Capability::ChangeLane,
        Capability::OverrideLight,
        Capability::EmergencyStop,
        Capability::QuerySpeedLimit,
        Capability::QueryEta,
        Capability::QueryStatus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Capability::SetDestination => "set_destination",
            Capability::Start => "start",
            Capability::Stop => "stop",
            Capability::SetParam => "set_param",
            Capability::TurnChoice => "turn_choice",
            Capability::ChangeLane => "change_lane",
            Capability::OverrideLight => "override_light",
            Capability::EmergencyStop => "emergency_stop",
            Capability::QuerySpeedLimit => "query_speed_limit",
            Capability::QueryEta => "query_eta",
            Capability::QueryStatus => "query_status",
        }
    }

    pub fn parse(name: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Capabilities that re-plan the route, as opposed to plain writes.
    pub fn replans(self) -> bool {
        matches!(self, Capability::SetDestination | Capability::TurnChoice)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum CapabilityError {
    #[error("unknown capability {0:?}")]
    UnknownCapability(String),
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("route exhausted on segment {edge} before reaching a goal")]
    RouteExhausted { edge: String },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}
