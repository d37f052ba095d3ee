//! Longitudinal ego-vehicle model on a routed waypoint map.
//!
//! Each tick picks a target speed from the tightest of several limits, then
//! integrates with semi-implicit Euler:
//!
//! * the current segment limit and the `max_vel` preference,
//! * braking envelopes towards every upcoming lower limit, red stop line,
//!   route end and lead vehicle.
//!
//! A braking envelope towards a target speed `vc` at distance `d`, with
//! comfortable deceleration `b`, admits `v` when `v² ≤ vc² + 2·b·d'`, where
//! `d'` is the distance left *after* the step. Solving that for the stepped
//! speed gives `v ≤ -b·dt + sqrt(b²dt² + vc² + 2·b·d)`. Braking therefore
//! starts when the braking distance `v²/(2b)` reaches the distance to the
//! constraint, and a red stop line is never crossed.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::map::{RouteMap, Turn};
use super::{Capability, CapabilityError, Payload, SimError};
use crate::dsl::{ParameterSet, Scalar};

/// Fixed integration step [s].
pub const DT: f64 = 0.02;
/// Standstill distance kept in front of a red stop line [m].
pub const STOP_MARGIN: f64 = 1.0;
/// Below this speed a vehicle held by a zero-speed constraint is snapped to rest [m/s].
const STOP_SNAP: f64 = 0.05;
/// Distance to the route end at which the goal counts as reached [m].
const ARRIVAL_TOLERANCE: f64 = 0.01;
/// Duration of the lane-change blend [s].
pub const LANE_CHANGE_DURATION: f64 = 3.0;
pub const LANE_WIDTH: f64 = 3.5;

/// Peak lateral acceleration of a half-cosine lane change of one lane width
/// over [`LANE_CHANGE_DURATION`].
pub fn lane_change_lateral_accel() -> f64 {
    LANE_WIDTH * std::f64::consts::PI.powi(2) / (2.0 * LANE_CHANGE_DURATION.powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperationMode {
    Stopped,
    Driving,
    EmergencyStopped,
}

impl OperationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OperationMode::Stopped => "STOPPED",
            OperationMode::Driving => "DRIVING",
            OperationMode::EmergencyStopped => "EMERGENCY_STOPPED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChange {
    pub target_lane: u32,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Index of the current edge in the map.
    pub edge: usize,
    /// Arc length along the current edge [m].
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub mode: OperationMode,
    /// Planned edge sequence; `route[route_pos] == edge` whenever non-empty.
    pub route: Vec<usize>,
    pub route_pos: usize,
    /// Lane index, 0 is the rightmost lane.
    pub lane: u32,
    pub lane_change: Option<LaneChange>,
    /// Index into the map's goals.
    pub destination: Option<usize>,
    /// Light index that the passenger declared green, cleared once passed.
    pub light_override: Option<usize>,
    pub tick: u64,
    pub t: f64,
}

/// Runtime-adjustable driving preferences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorParams {
    pub max_vel_kmh: f64,
    pub min_gap: f64,
    pub max_long_accel: f64,
    pub max_lat_accel: f64,
    pub comfort_decel: f64,
    pub emergency_decel: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            max_vel_kmh: 60.0,
            min_gap: 20.0,
            max_long_accel: 1.5,
            max_lat_accel: 2.5,
            comfort_decel: 2.0,
            emergency_decel: 6.0,
        }
    }
}

impl BehaviorParams {
    pub fn max_vel_mps(&self) -> f64 {
        self.max_vel_kmh / 3.6
    }

    pub fn check(&self) -> Result<(), String> {
        let fields = [
            ("max_vel", self.max_vel_kmh),
            ("min_gap", self.min_gap),
            ("max_long_accel", self.max_long_accel),
            ("max_lat_accel", self.max_lat_accel),
            ("comfort_decel", self.comfort_decel),
            ("emergency_decel", self.emergency_decel),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(format!("{name} must be positive, got {value}"));
            }
        }
        if self.emergency_decel < self.comfort_decel {
            return Err("emergency_decel must not be below comfort_decel".into());
        }
        Ok(())
    }

    /// Sets a named parameter, in the units the command language uses.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), String> {
        let slot = match name {
            "max_vel" => &mut self.max_vel_kmh,
            "min_gap" => &mut self.min_gap,
            "max_long_accel" => &mut self.max_long_accel,
            "max_lat_accel" => &mut self.max_lat_accel,
            "comfort_decel" => &mut self.comfort_decel,
            "emergency_decel" => &mut self.emergency_decel,
            _ => return Err(format!("unknown behavior parameter {name:?}")),
        };
        *slot = value;
        Ok(())
    }
}

/// Scripted constant-speed vehicle ahead of the ego on its path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadVehicle {
    /// Distance from ego to lead along the ego path [m]; negative once overtaken.
    pub gap: f64,
    pub speed: f64,
    pub lane: u32,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    /// Starting edge id; the first edge of the map when absent.
    pub start_edge: Option<String>,
    /// Initial destination goal; the first goal of the map when absent.
    pub destination: Option<String>,
    pub params: BehaviorParams,
    pub lead: Option<LeadVehicle>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: DT,
            start_edge: None,
            destination: None,
            params: BehaviorParams::default(),
            lead: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextIntersection {
    pub node: String,
    pub decision: Option<Turn>,
}

/// Immutable status snapshot shared with the translator, UI and logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvStatus {
    pub t: f64,
    pub tick: u64,
    pub mode: OperationMode,
    pub edge: String,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub lane: u32,
    pub route: Vec<String>,
    pub destination: Option<String>,
    pub params: BehaviorParams,
    pub speed_limit_kmh: f64,
    pub eta_s: Option<f64>,
    pub next_intersection: Option<NextIntersection>,
    pub light_override: bool,
    pub red_light_ahead_m: Option<f64>,
    pub lead_gap: Option<f64>,
}

impl AvStatus {
    /// Plain-text rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        };
        line("mode", self.mode.as_str().into());
        line("speed_kmh", format!("{:.1}", self.v * 3.6));
        line("segment", self.edge.clone());
        line("speed_limit_kmh", format!("{:.0}", self.speed_limit_kmh));
        line("max_vel_kmh", format!("{:.1}", self.params.max_vel_kmh));
        line("min_gap_m", format!("{:.1}", self.params.min_gap));
        line("destination", self.destination.clone().unwrap_or_else(|| "none".into()));
        if let Some(eta) = self.eta_s {
            line("eta_s", format!("{eta:.0}"));
        }
        if let Some(next) = &self.next_intersection {
            let decision = next.decision.map(Turn::as_str).unwrap_or("end of route");
            line("next_intersection", format!("{} ({decision})", next.node));
        }
        if let Some(d) = self.red_light_ahead_m {
            line("red_light_ahead_m", format!("{d:.0}"));
        }
        line("light_override", self.light_override.to_string());
        out
    }
}

/// One tick of the recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub tick: u64,
    pub t: f64,
    pub edge: usize,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub lane: u32,
    pub mode: OperationMode,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    map: Arc<RouteMap>,
    state: VehicleState,
    params: BehaviorParams,
    lead: Option<LeadVehicle>,
    dt: f64,
}

/// Result of evaluating all speed constraints at the current position.
struct SpeedPlan {
    cap: f64,
    /// A zero-speed constraint (stop line or route end) is the binding one.
    zero_target: bool,
    /// Hard limit on travel this tick: distance to the next active stop line
    /// or to the route end.
    max_travel: f64,
}

impl Simulation {
    pub fn new(map: Arc<RouteMap>, config: SimConfig) -> Result<Simulation, SimError> {
        if !(config.dt > 0.0 && config.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", config.dt)));
        }
        config.params.check().map_err(SimError::InvalidConfig)?;
        if map.edges.is_empty() {
            return Err(SimError::InvalidConfig("map has no edges".into()));
        }
        let edge = match &config.start_edge {
            Some(id) => map
                .edge_by_id(id)
                .ok_or_else(|| SimError::InvalidConfig(format!("unknown start edge {id:?}")))?,
            None => 0,
        };
        let mut sim = Simulation {
            state: VehicleState {
                edge,
                s: 0.0,
                v: 0.0,
                a: 0.0,
                mode: OperationMode::Stopped,
                route: vec![edge],
                route_pos: 0,
                lane: 0,
                lane_change: None,
                destination: None,
                light_override: None,
                tick: 0,
                t: 0.0,
            },
            params: config.params,
            lead: config.lead,
            dt: config.dt,
            map,
        };
        let goal = match &config.destination {
            Some(name) => Some(name.clone()),
            None => sim.map.goals.first().map(|g| g.name.clone()),
        };
        if let Some(goal) = goal {
            sim.set_destination(&goal).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }
        Ok(sim)
    }

    pub fn map(&self) -> &Arc<RouteMap> {
        &self.map
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn params(&self) -> &BehaviorParams {
        &self.params
    }

    pub fn lead(&self) -> Option<&LeadVehicle> {
        self.lead.as_ref()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample(&self) -> TrajectorySample {
        let st = &self.state;
        TrajectorySample {
            tick: st.tick,
            t: st.t,
            edge: st.edge,
            s: st.s,
            v: st.v,
            a: st.a,
            lane: st.lane,
            mode: st.mode,
        }
    }

    /// Content hash over vehicle state, behavior parameters and the lead agent.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let st = &self.state;
        h.write_usize(st.edge);
        for x in [st.s, st.v, st.a, st.t] {
            h.write_u64(x.to_bits());
        }
        h.write_u8(st.mode as u8);
        h.write_usize(st.route.len());
        for &e in &st.route {
            h.write_usize(e);
        }
        h.write_usize(st.route_pos);
        h.write_u32(st.lane);
        match st.lane_change {
            Some(lc) => {
                h.write_u8(1);
                h.write_u32(lc.target_lane);
                h.write_u64(lc.elapsed.to_bits());
            }
            None => h.write_u8(0),
        }
        h.write_u64(st.destination.map_or(u64::MAX, |d| d as u64));
        h.write_u64(st.light_override.map_or(u64::MAX, |d| d as u64));
        h.write_u64(st.tick);
        let p = &self.params;
        for x in [p.max_vel_kmh, p.min_gap, p.max_long_accel, p.max_lat_accel, p.comfort_decel, p.emergency_decel] {
            h.write_u64(x.to_bits());
        }
        if let Some(lead) = &self.lead {
            h.write_u64(lead.gap.to_bits());
            h.write_u64(lead.speed.to_bits());
            h.write_u32(lead.lane);
        }
        h.finish()
    }

    // ---- route geometry -------------------------------------------------

    /// Edges after the current one, each with the distance from the ego to
    /// its start.
    fn upcoming_edges(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let st = &self.state;
        let mut d = self.map.edges[st.edge].length - st.s;
        st.route.iter().skip(st.route_pos + 1).map(move |&e| {
            let here = d;
            d += self.map.edges[e].length;
            (e, here)
        })
    }

    fn has_route(&self) -> bool {
        self.state.destination.is_some()
    }

    /// Remaining distance to the end of the route.
    pub fn remaining_route_length(&self) -> f64 {
        let st = &self.state;
        let mut d = self.map.edges[st.edge].length - st.s;
        for &e in st.route.iter().skip(st.route_pos + 1) {
            d += self.map.edges[e].length;
        }
        d
    }

    /// Red stop lines ahead on the route that are not overridden, nearest
    /// first, as (light index, distance to the line).
    fn red_lights_ahead(&self) -> Vec<(usize, f64)> {
        let st = &self.state;
        let mut out = Vec::new();
        let mut base = -st.s;
        for &e in st.route.iter().skip(st.route_pos) {
            for (idx, light) in self.map.lights_on(e) {
                let d = base + light.offset;
                if d >= 0.0 {
                    out.push((idx, d));
                }
            }
            base += self.map.edges[e].length;
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        out
    }

    fn active_stop_lines(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let overridden = self.state.light_override;
        self.red_lights_ahead().into_iter().filter(move |(idx, _)| Some(*idx) != overridden)
    }

    /// ETA from per-edge remaining length over min(limit, max_vel).
    pub fn eta(&self) -> Option<f64> {
        if !self.has_route() {
            return None;
        }
        let st = &self.state;
        let vmax = self.params.max_vel_mps();
        let current = &self.map.edges[st.edge];
        let mut eta = (current.length - st.s) / current.limit_mps().min(vmax);
        for &e in st.route.iter().skip(st.route_pos + 1) {
            let edge = &self.map.edges[e];
            eta += edge.length / edge.limit_mps().min(vmax);
        }
        Some(eta)
    }

    /// First intersection at or after the end of the current edge, as
    /// (route position of the incoming edge, node).
    fn next_intersection(&self) -> Option<(usize, usize)> {
        let st = &self.state;
        (st.route_pos..st.route.len()).find_map(|k| {
            let node = self.map.edges[st.route[k]].to;
            self.map.intersections.contains(&node).then_some((k, node))
        })
    }

    // ---- dynamics -------------------------------------------------------

    fn envelope(&self, target: f64, distance: f64) -> f64 {
        let b = self.params.comfort_decel;
        let bdt = b * self.dt;
        let inner = bdt * bdt + target * target + 2.0 * b * distance;
        if inner <= 0.0 {
            0.0
        } else {
            (inner.sqrt() - bdt).max(0.0)
        }
    }

    fn speed_plan(&self) -> SpeedPlan {
        let st = &self.state;
        let p = &self.params;
        let vmax = p.max_vel_mps();
        let edge = &self.map.edges[st.edge];

        let mut cap = edge.limit_mps().min(vmax);
        let mut zero_target = false;
        let mut max_travel = f64::INFINITY;
        let mut tighten = |limit: f64, zero: bool, cap: &mut f64| {
            if limit < *cap {
                *cap = limit;
                zero_target = zero;
            }
        };

        for (e, d) in self.upcoming_edges() {
            let target = self.map.edges[e].limit_mps().min(vmax);
            tighten(self.envelope(target, d), false, &mut cap);
        }

        if self.has_route() {
            let d_end = self.remaining_route_length();
            tighten(self.envelope(0.0, d_end), true, &mut cap);
            max_travel = max_travel.min(d_end);
        }

        if let Some((_, d_line)) = self.active_stop_lines().next() {
            let d_stop = (d_line - STOP_MARGIN).max(0.0);
            tighten(self.envelope(0.0, d_stop), true, &mut cap);
            max_travel = max_travel.min(d_line);
        }

        if let Some(lead) = &self.lead {
            if lead.lane == st.lane && lead.gap > 0.0 {
                let d = lead.gap + lead.speed * self.dt - p.min_gap;
                tighten(self.envelope(lead.speed, d), lead.speed == 0.0, &mut cap);
            }
        }

        SpeedPlan { cap, zero_target, max_travel }
    }

    /// Advances the simulation by one fixed step.
    pub fn tick(&mut self) -> Result<(), SimError> {
        let dt = self.dt;
        let plan = self.speed_plan();
        let p = self.params;
        let v = self.state.v;

        let (target, max_brake) = match self.state.mode {
            OperationMode::Driving => (plan.cap, p.emergency_decel),
            OperationMode::Stopped => (0.0, p.comfort_decel),
            OperationMode::EmergencyStopped => (0.0, p.emergency_decel),
        };
        let accel = ((target - v) / dt).clamp(-max_brake, p.max_long_accel);
        let mut v_new = (v + accel * dt).max(0.0);
        if accel > 0.0 {
            v_new = v_new.min(target);
        }
        if self.state.mode == OperationMode::Driving && plan.zero_target && v_new < STOP_SNAP && target < STOP_SNAP {
            v_new = 0.0;
        }
        let mut travel = v_new * dt;
        if travel > plan.max_travel {
            travel = plan.max_travel.max(0.0);
            v_new = 0.0;
        }

        let st = &mut self.state;
        st.a = (v_new - v) / dt;
        st.v = v_new;
        st.s += travel;

        if let Some(lead) = &mut self.lead {
            lead.gap += lead.speed * dt - travel;
        }

        while st.s > self.map.edges[st.edge].length {
            let len = self.map.edges[st.edge].length;
            if st.route_pos + 1 < st.route.len() {
                st.s -= len;
                st.route_pos += 1;
                st.edge = st.route[st.route_pos];
                st.lane = st.lane.min(self.map.edges[st.edge].lanes - 1);
                st.lane_change = None;
            } else if st.destination.is_some() {
                st.s = len;
            } else {
                st.tick += 1;
                st.t = st.tick as f64 * dt;
                return Err(SimError::RouteExhausted {
                    edge: self.map.edges[st.edge].id.clone(),
                });
            }
        }

        if let Some(lc) = &mut st.lane_change {
            lc.elapsed += dt;
            if lc.elapsed >= LANE_CHANGE_DURATION - 1e-9 {
                st.lane = lc.target_lane;
                st.lane_change = None;
            }
        }

        if let Some(light) = st.light_override {
            let l = &self.map.lights[light];
            let passed = match st.route.iter().skip(st.route_pos).position(|&e| e == l.edge) {
                Some(0) => st.s > l.offset,
                Some(_) => false,
                None => true,
            };
            if passed {
                st.light_override = None;
            }
        }

        if st.mode == OperationMode::Driving
            && st.destination.is_some()
            && st.route_pos + 1 == st.route.len()
            && self.map.edges[st.edge].length - st.s <= ARRIVAL_TOLERANCE
            && st.v == 0.0
        {
            st.mode = OperationMode::Stopped;
            st.destination = None;
            st.route = vec![st.edge];
            st.route_pos = 0;
        }

        st.tick += 1;
        st.t = st.tick as f64 * dt;
        Ok(())
    }

    // ---- capabilities ---------------------------------------------------

    pub fn apply_named(&mut self, capability: &str, args: &ParameterSet) -> Result<Payload, CapabilityError> {
        let cap = Capability::parse(capability).ok_or_else(|| CapabilityError::UnknownCapability(capability.into()))?;
        self.apply(cap, args)
    }

    pub fn apply(&mut self, capability: Capability, args: &ParameterSet) -> Result<Payload, CapabilityError> {
        match capability {
            Capability::SetDestination => {
                let dest = text_arg(args, "dest")?;
                self.set_destination(dest)
            }
            Capability::Start => self.start(),
            Capability::Stop => {
                self.state.mode = OperationMode::Stopped;
                Ok(Payload::new())
            }
            Capability::SetParam => self.set_params(args),
            Capability::TurnChoice => {
                let raw = text_arg(args, "direction")?;
                let turn = Turn::parse(raw)
                    .ok_or_else(|| CapabilityError::InvalidArgument(format!("unknown direction {raw:?}")))?;
                self.turn_choice(turn)
            }
            Capability::ChangeLane => {
                let raw = text_arg(args, "direction")?;
                self.change_lane(raw)
            }
            Capability::OverrideLight => {
                let state = text_arg(args, "state")?;
                if state != "green" {
                    return Err(CapabilityError::InvalidArgument(format!("lights can only be declared green, not {state:?}")));
                }
                self.override_light()
            }
            Capability::EmergencyStop => {
                self.state.mode = OperationMode::EmergencyStopped;
                Ok(Payload::new())
            }
            Capability::QuerySpeedLimit => {
                let mut out = Payload::new();
                out.insert("speed_limit_kmh".into(), Scalar::Number(self.map.edges[self.state.edge].limit_kmh));
                Ok(out)
            }
            Capability::QueryEta => {
                let eta = self
                    .eta()
                    .ok_or_else(|| CapabilityError::PreconditionFailed("no destination is set".into()))?;
                let mut out = Payload::new();
                out.insert("eta_s".into(), Scalar::Number(eta));
                out.insert("eta_min".into(), Scalar::Number((eta / 60.0 * 10.0).round() / 10.0));
                out.insert("remaining_m".into(), Scalar::Number(self.remaining_route_length()));
                out.insert("destination".into(), Scalar::Text(self.destination_name().unwrap_or_default()));
                Ok(out)
            }
            Capability::QueryStatus => {
                let st = &self.state;
                let mut out = Payload::new();
                out.insert("mode".into(), Scalar::Text(st.mode.as_str().into()));
                out.insert("speed_kmh".into(), Scalar::Number(st.v * 3.6));
                out.insert("segment".into(), Scalar::Text(self.map.edges[st.edge].id.clone()));
                out.insert("lane".into(), Scalar::Number(st.lane as f64));
                out.insert("speed_limit_kmh".into(), Scalar::Number(self.map.edges[st.edge].limit_kmh));
                out.insert("max_vel_kmh".into(), Scalar::Number(self.params.max_vel_kmh));
                out.insert(
                    "destination".into(),
                    Scalar::Text(self.destination_name().unwrap_or_else(|| "none".into())),
                );
                if let Some(eta) = self.eta() {
                    out.insert("eta_s".into(), Scalar::Number(eta));
                }
                Ok(out)
            }
        }
    }

    fn destination_name(&self) -> Option<String> {
        self.state.destination.map(|g| self.map.goals[g].name.clone())
    }

    fn set_destination(&mut self, name: &str) -> Result<Payload, CapabilityError> {
        let (goal_idx, goal) = self
            .map
            .goals
            .iter()
            .enumerate()
            .find(|(_, g)| g.name == name)
            .ok_or_else(|| CapabilityError::PreconditionFailed(format!("unknown destination {name:?}")))?;
        let st = &self.state;
        let from = self.map.edges[st.edge].to;
        let path = self.map.shortest_path(from, goal.node).ok_or_else(|| {
            CapabilityError::PreconditionFailed(format!("no route from segment {} to {name}", self.map.edges[st.edge].id))
        })?;
        let mut route = vec![st.edge];
        route.extend(path);
        let st = &mut self.state;
        st.route = route;
        st.route_pos = 0;
        st.destination = Some(goal_idx);
        let mut out = Payload::new();
        out.insert("destination".into(), Scalar::Text(name.into()));
        out.insert("route".into(), Scalar::Text(self.route_ids().join(",")));
        Ok(out)
    }

    fn start(&mut self) -> Result<Payload, CapabilityError> {
        if !self.has_route() {
            return Err(CapabilityError::PreconditionFailed("no destination is set".into()));
        }
        if self.state.mode == OperationMode::EmergencyStopped && self.state.v > 0.0 {
            return Err(CapabilityError::PreconditionFailed("emergency stop still in progress".into()));
        }
        self.state.mode = OperationMode::Driving;
        let mut out = Payload::new();
        out.insert("destination".into(), Scalar::Text(self.destination_name().unwrap_or_default()));
        Ok(out)
    }

    fn set_params(&mut self, args: &ParameterSet) -> Result<Payload, CapabilityError> {
        if args.is_empty() {
            return Err(CapabilityError::InvalidArgument("no parameter given".into()));
        }
        let mut next = self.params;
        let mut out = Payload::new();
        for p in args {
            let value = p
                .value
                .as_number()
                .ok_or_else(|| CapabilityError::InvalidArgument(format!("{} needs a numeric value", p.name)))?;
            next.set(&p.name, value).map_err(CapabilityError::InvalidArgument)?;
            out.insert(p.name.clone(), Scalar::Number(value));
        }
        next.check().map_err(CapabilityError::PreconditionFailed)?;
        self.params = next;
        Ok(out)
    }

    fn turn_choice(&mut self, turn: Turn) -> Result<Payload, CapabilityError> {
        let goal = self
            .state
            .destination
            .ok_or_else(|| CapabilityError::PreconditionFailed("no active route".into()))?;
        let (k, node) = self
            .next_intersection()
            .ok_or_else(|| CapabilityError::PreconditionFailed("no intersection ahead on the route".into()))?;
        let st = &self.state;
        let incoming = st.route[k];
        let node_id = self.map.nodes[node].id.clone();
        let candidates: Vec<usize> = self
            .map
            .outgoing(node)
            .filter(|&e| self.map.turn_between(incoming, e) == turn)
            .collect();
        if candidates.is_empty() {
            return Err(CapabilityError::PreconditionFailed(format!(
                "no {} turn at the next intersection ({node_id})",
                turn.as_str()
            )));
        }
        let mut payload = Payload::new();
        payload.insert("intersection".into(), Scalar::Text(node_id.clone()));
        payload.insert("direction".into(), Scalar::Text(turn.as_str().into()));

        if let Some(&planned) = st.route.get(k + 1) {
            if candidates.contains(&planned) {
                payload.insert("route".into(), Scalar::Text(self.route_ids().join(",")));
                return Ok(payload);
            }
        }
        let goal_node = self.map.goals[goal].node;
        let (branch, tail) = candidates
            .iter()
            .find_map(|&e| self.map.shortest_path(self.map.edges[e].to, goal_node).map(|p| (e, p)))
            .ok_or_else(|| {
                CapabilityError::PreconditionFailed(format!(
                    "turning {} at {node_id} cannot reach the destination",
                    turn.as_str()
                ))
            })?;
        let st = &mut self.state;
        st.route.truncate(k + 1);
        st.route.push(branch);
        st.route.extend(tail);
        payload.insert("route".into(), Scalar::Text(self.route_ids().join(",")));
        Ok(payload)
    }

    fn change_lane(&mut self, direction: &str) -> Result<Payload, CapabilityError> {
        let st = &self.state;
        let edge = &self.map.edges[st.edge];
        if st.lane_change.is_some() {
            return Err(CapabilityError::PreconditionFailed("a lane change is already in progress".into()));
        }
        let target = match direction {
            "left" if st.lane + 1 < edge.lanes => st.lane + 1,
            "right" if st.lane > 0 => st.lane - 1,
            "left" | "right" => {
                return Err(CapabilityError::PreconditionFailed(format!(
                    "segment {} has no parallel lane to the {direction}",
                    edge.id
                )))
            }
            other => return Err(CapabilityError::InvalidArgument(format!("unknown direction {other:?}"))),
        };
        let lateral = lane_change_lateral_accel();
        if lateral > self.params.max_lat_accel {
            return Err(CapabilityError::PreconditionFailed(format!(
                "lane change needs {lateral:.2} m/s² lateral acceleration, limit is {:.2}",
                self.params.max_lat_accel
            )));
        }
        let needed = st.v * LANE_CHANGE_DURATION;
        if edge.length - st.s < needed {
            return Err(CapabilityError::PreconditionFailed(format!(
                "not enough room left on segment {} to change lanes",
                edge.id
            )));
        }
        self.state.lane_change = Some(LaneChange { target_lane: target, elapsed: 0.0 });
        let mut out = Payload::new();
        out.insert("lane".into(), Scalar::Number(target as f64));
        Ok(out)
    }

    fn override_light(&mut self) -> Result<Payload, CapabilityError> {
        let (idx, d) = self
            .red_lights_ahead()
            .into_iter()
            .next()
            .ok_or_else(|| CapabilityError::PreconditionFailed("no red traffic light ahead on the route".into()))?;
        self.state.light_override = Some(idx);
        let mut out = Payload::new();
        out.insert("distance_m".into(), Scalar::Number(d));
        Ok(out)
    }

    pub fn route_ids(&self) -> Vec<String> {
        self.state.route.iter().map(|&e| self.map.edges[e].id.clone()).collect()
    }

    pub fn snapshot(&self) -> AvStatus {
        let st = &self.state;
        let next_intersection = self.next_intersection().map(|(k, node)| NextIntersection {
            node: self.map.nodes[node].id.clone(),
            decision: st.route.get(k + 1).map(|&e| self.map.turn_between(st.route[k], e)),
        });
        AvStatus {
            t: st.t,
            tick: st.tick,
            mode: st.mode,
            edge: self.map.edges[st.edge].id.clone(),
            s: st.s,
            v: st.v,
            a: st.a,
            lane: st.lane,
            route: self.route_ids(),
            destination: self.destination_name(),
            params: self.params,
            speed_limit_kmh: self.map.edges[st.edge].limit_kmh,
            eta_s: self.eta(),
            next_intersection,
            light_override: st.light_override.is_some(),
            red_light_ahead_m: self.active_stop_lines().next().map(|(_, d)| d),
            lead_gap: self.lead.map(|l| l.gap),
        }
    }
}

fn text_arg<'a>(args: &'a ParameterSet, name: &str) -> Result<&'a str, CapabilityError> {
    match args.get(name) {
        Some(Scalar::Text(s)) => Ok(s),
        Some(Scalar::Number(_)) => Err(CapabilityError::InvalidArgument(format!("{name} must be text"))),
        None => Err(CapabilityError::InvalidArgument(format!("missing argument {name}"))),
    }
}
