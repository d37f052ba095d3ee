use std::sync::Arc;

use avcopilot_core::assets;
use avcopilot_core::dsl::ParameterSet;
use avcopilot_core::sim::{
    lane_change_lateral_accel, BehaviorParams, Capability, CapabilityError, LeadVehicle, OperationMode, RouteMap,
    SimConfig, Simulation, DT, LANE_CHANGE_DURATION,
};

fn shipped_map() -> Arc<RouteMap> {
    Arc::new(RouteMap::parse(assets::DEFAULT_MAP).unwrap())
}

fn sim() -> Simulation {
    Simulation::new(shipped_map(), SimConfig::default()).unwrap()
}

fn none() -> ParameterSet {
    ParameterSet::new()
}

fn edge_id(sim: &Simulation) -> String {
    sim.map().edges[sim.state().edge].id.clone()
}

fn run_for(sim: &mut Simulation, seconds: f64) {
    let ticks = (seconds / sim.dt()).round() as u64;
    for _ in 0..ticks {
        sim.tick().unwrap();
    }
}

#[test]
fn ramp_from_rest_is_linear() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    let a = s.params().max_long_accel;
    // 50 km/h is reached after 9.26 s; stay well below.
    for n in 1..=400u32 {
        s.tick().unwrap();
        let t = f64::from(n) * DT;
        assert!((s.state().v - a * t).abs() < 1e-9, "t={t} v={}", s.state().v);
    }
}

#[test]
fn speed_never_exceeds_limit_or_ceiling() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
    s.apply(Capability::SetParam, &ParameterSet::new().with("max_vel", 45.0)).unwrap();
    for _ in 0..10000 {
        s.tick().unwrap();
        let limit = s.map().edges[s.state().edge].limit_kmh.min(45.0) / 3.6;
        assert!(s.state().v <= limit + 1e-9, "{} v={} limit={limit}", edge_id(&s), s.state().v);
    }
    assert_eq!(s.state().mode, OperationMode::Stopped, "arrived");
}

#[test]
fn stops_before_red_light() {
    let mut s = sim();
    let line = s.map().lights[0].offset;
    s.apply(Capability::Start, &none()).unwrap();
    for _ in 0..3000 {
        s.tick().unwrap();
        if edge_id(&s) == "a1" {
            assert!(line - s.state().s >= 0.0);
        } else {
            panic!("crossed a red line");
        }
    }
    assert_eq!(s.state().v, 0.0);
    let clearance = line - s.state().s;
    assert!((0.0..=2.0).contains(&clearance), "clearance {clearance}");
}

#[test]
fn override_lets_vehicle_cross() {
    let mut s = sim();
    let line = s.map().lights[0].offset;
    s.apply(Capability::Start, &none()).unwrap();
    run_for(&mut s, 15.0);
    s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
    assert!(s.snapshot().light_override);
    let mut crossing = f64::INFINITY;
    for _ in 0..2000 {
        s.tick().unwrap();
        let on_a1 = edge_id(&s) == "a1";
        if (on_a1 && s.state().s > line - 10.0) || (!on_a1 && s.state().s < 10.0 && edge_id(&s) == "a2") {
            crossing = crossing.min(s.state().v);
        }
    }
    assert!(crossing > 1.0, "min speed near stop line {crossing}");
    // The override is consumed once the line is behind.
    assert!(!s.snapshot().light_override);
}

#[test]
fn override_without_light_fails() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
    run_for(&mut s, 50.0);
    assert_ne!(edge_id(&s), "a1");
    let err = s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap_err();
    assert!(matches!(err, CapabilityError::PreconditionFailed(_)));
}

#[test]
fn straight_reroute_and_missing_right_turn() {
    let mut s = sim();
    assert_eq!(s.route_ids(), ["a1", "a2", "l1", "l2"]);
    let right = s.apply(Capability::TurnChoice, &ParameterSet::new().with("direction", "right")).unwrap_err();
    assert!(matches!(right, CapabilityError::PreconditionFailed(ref m) if m.contains("right")));
    assert_eq!(s.route_ids(), ["a1", "a2", "l1", "l2"]);

    s.apply(Capability::TurnChoice, &ParameterSet::new().with("direction", "straight")).unwrap();
    assert_eq!(s.route_ids(), ["a1", "a2", "s1", "s2"]);

    s.apply(Capability::Start, &none()).unwrap();
    s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
    let mut visited = vec![edge_id(&s)];
    for _ in 0..10000 {
        s.tick().unwrap();
        if visited.last() != Some(&edge_id(&s)) {
            visited.push(edge_id(&s));
        }
    }
    assert_eq!(visited, ["a1", "a2", "s1", "s2"]);
    assert_eq!(s.state().mode, OperationMode::Stopped);
}

#[test]
fn eta_matches_hand_computation() {
    let s = sim();
    // (length, limit) straight from the map file for a1, a2, l1, l2.
    let legs = [(400.0, 50.0), (300.0, 50.0), (250.0, 30.0), (280.0, 30.0)];
    let expected: f64 = legs.iter().map(|(len, lim): &(f64, f64)| len / (lim.min(60.0) / 3.6)).sum();
    assert!((s.eta().unwrap() - expected).abs() < 1e-9);

    let mut s = s;
    let payload = s.apply(Capability::QueryEta, &none()).unwrap();
    assert_eq!(payload["eta_s"].as_number(), Some(s.eta().unwrap()));

    s.apply(Capability::SetParam, &ParameterSet::new().with("max_vel", 20.0)).unwrap();
    let slow: f64 = legs.iter().map(|(len, lim): &(f64, f64)| len / (lim.min(20.0) / 3.6)).sum();
    assert!((s.eta().unwrap() - slow).abs() < 1e-9);
}

#[test]
fn snapshots_are_detached() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    let before = s.snapshot();
    let copy = before.clone();
    run_for(&mut s, 2.0);
    assert_eq!(before, copy);
    assert_ne!(s.snapshot().t, before.t);
}

#[test]
fn keeps_gap_to_lead() {
    let config = SimConfig {
        lead: Some(LeadVehicle { gap: 60.0, speed: 8.0, lane: 0 }),
        destination: Some("station".into()),
        ..SimConfig::default()
    };
    let mut s = Simulation::new(shipped_map(), config).unwrap();
    s.apply(Capability::Start, &none()).unwrap();
    s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
    let min_gap = s.params().min_gap;
    let mut closest = f64::INFINITY;
    for _ in 0..(100.0 / DT) as usize {
        s.tick().unwrap();
        closest = closest.min(s.lead().unwrap().gap);
    }
    assert!(closest >= min_gap - 0.5, "closest {closest}");
    // It actually had to follow.
    assert!(closest < min_gap + 5.0, "closest {closest}");
}

#[test]
fn emergency_stop_time_bound() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    run_for(&mut s, 12.0);
    let v0 = s.state().v;
    assert!(v0 > 10.0);
    s.apply(Capability::EmergencyStop, &none()).unwrap();
    let ed = s.params().emergency_decel;
    let mut elapsed = 0.0;
    while s.state().v > 0.0 {
        s.tick().unwrap();
        elapsed += DT;
        assert!(elapsed <= v0 / ed + 2.0 * DT + 1e-9, "still moving after {elapsed}");
    }
    assert_eq!(s.state().mode, OperationMode::EmergencyStopped);
    run_for(&mut s, 5.0);
    assert_eq!(s.state().v, 0.0);
}

#[test]
fn lane_change() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    run_for(&mut s, 5.0);
    let err = s.apply(Capability::ChangeLane, &ParameterSet::new().with("direction", "right")).unwrap_err();
    assert!(matches!(err, CapabilityError::PreconditionFailed(_)));
    s.apply(Capability::ChangeLane, &ParameterSet::new().with("direction", "left")).unwrap();
    run_for(&mut s, LANE_CHANGE_DURATION + DT);
    assert_eq!(s.state().lane, 1);

    // Implied lateral acceleration of the blend against the configured limit.
    let lat = lane_change_lateral_accel();
    assert!((lat - 3.5 * std::f64::consts::PI.powi(2) / (2.0 * 9.0)).abs() < 1e-12);
    s.apply(Capability::SetParam, &ParameterSet::new().with("max_lat_accel", 1.5)).unwrap();
    let err = s.apply(Capability::ChangeLane, &ParameterSet::new().with("direction", "right")).unwrap_err();
    assert!(matches!(err, CapabilityError::PreconditionFailed(ref m) if m.contains("lateral")));
}

#[test]
fn stop_and_restart() {
    let mut s = sim();
    s.apply(Capability::Start, &none()).unwrap();
    run_for(&mut s, 10.0);
    s.apply(Capability::Stop, &none()).unwrap();
    let v0 = s.state().v;
    run_for(&mut s, v0 / BehaviorParams::default().comfort_decel + 0.1);
    assert_eq!(s.state().v, 0.0);
    s.apply(Capability::Start, &none()).unwrap();
    run_for(&mut s, 1.0);
    assert!(s.state().v > 0.0);
}

#[test]
fn destination_change_replans() {
    let mut s = sim();
    let payload = s.apply(Capability::SetDestination, &ParameterSet::new().with("dest", "station")).unwrap();
    assert_eq!(payload["route"].as_text(), Some("a1,a2,s1,s3"));
    assert_eq!(s.snapshot().destination.as_deref(), Some("station"));
}

#[test]
fn identical_inputs_identical_trajectory() {
    let run = || {
        let mut s = sim();
        let mut out = Vec::new();
        s.apply(Capability::Start, &none()).unwrap();
        for n in 0..5000 {
            if n == 1000 {
                s.apply(Capability::OverrideLight, &ParameterSet::new().with("state", "green")).unwrap();
            }
            s.tick().unwrap();
            let st = s.state();
            out.push((st.v.to_bits(), st.s.to_bits(), st.a.to_bits(), st.edge));
        }
        (out, s.state_hash())
    };
    assert_eq!(run(), run());
}
