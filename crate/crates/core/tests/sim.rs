use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use scenario_loop::dsl::ast::ObjectKind;
use scenario_loop::dsl::{compile, parse, Code, ScenarioProgram, SymbolTable};
use scenario_loop::eval::{within_distance_to_any_objs, Action, BehaviorCall, Host, Lookup, Pose, Value};
use scenario_loop::geometry::{normalize_angle, Vec2};
use scenario_loop::road::{load_network, RoadNetwork};
use scenario_loop::sample::{sample_scene, Containment, Scene, SceneObject};
use scenario_loop::sim::{crossing_line, run_scene, EventKind, SimConfig, Termination, Trace};

fn listing(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/listings").join(format!("{name}.scenic"));
    fs::read_to_string(path).unwrap()
}

fn straight() -> RoadNetwork {
    load_network("town_straight").unwrap()
}

fn object(name: &str, kind: ObjectKind, x: f64, y: f64, heading: f64, behavior: Option<BehaviorCall>) -> SceneObject {
    SceneObject {
        name: name.into(),
        kind,
        position: Vec2::new(x, y),
        heading,
        speed: 0.0,
        blueprint: None,
        behavior,
        containment: Containment::Default,
    }
}

fn call(name: &str, args: &[(&str, Value)]) -> Option<BehaviorCall> {
    Some(BehaviorCall { name: name.into(), args: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() })
}

fn scene(objects: Vec<SceneObject>) -> Scene {
    Scene {
        seed: 0,
        iterations: 1,
        map: "town_straight".into(),
        params: BTreeMap::new(),
        bindings: BTreeMap::new(),
        objects,
        trajectories: BTreeMap::new(),
    }
}

fn assert_continuity(trace: &Trace, config: &SimConfig) {
    for w in trace.snapshots.windows(2) {
        for (a, b) in w[0].agents.iter().zip(&w[1].agents) {
            let moved = a.position.distance(b.position);
            let bound = (a.speed + config.a_max * config.dt) * config.dt;
            assert!(moved <= bound + 1e-9, "moved {moved} > {bound} at step {}", w[1].step);
        }
    }
}

const GO: &str = "behaviour Go():\n    while True:\n        take SetThrottleAction(1.0)\n";

#[test]
fn constant_throttle_matches_closed_form() {
    let net = straight();
    let program = parse(GO).unwrap();
    let config = SimConfig::default();
    let s = scene(vec![object("ego", ObjectKind::Car, 0.0, 1.75, 0.0, call("Go", &[]))]);
    let trace = run_scene(&program, &s, &net, &config).unwrap();
    let v_cmd = config.car_speed_cap;
    for (k, snap) in trace.snapshots.iter().enumerate() {
        let expected = (k as f64 * config.a_max * config.dt).clamp(0.0, v_cmd);
        assert!((snap.agents[0].speed - expected).abs() < 1e-9, "step {k}: {} vs {expected}", snap.agents[0].speed);
    }
    assert_continuity(&trace, &config);
}

#[test]
fn stationary_scene_hits_time_limit_at_thirty_seconds() {
    let net = straight();
    let s = scene(vec![object("ego", ObjectKind::Car, 10.0, 1.75, 0.0, None)]);
    let trace = run_scene(&ScenarioProgram::default(), &s, &net, &SimConfig::default()).unwrap();
    assert_eq!(trace.termination, Termination::TimeLimit);
    assert_eq!(trace.duration, 30.0);
    assert_eq!(trace.snapshots.len(), 301);
    assert_eq!(trace.snapshots.last().unwrap().time, 30.0);
    assert!(trace.snapshots.iter().all(|s| s.agents[0].position == Vec2::new(10.0, 1.75)));
}

const GUARDED: &str = "\
behaviour Guarded(safety, crash):
    try:
        do FollowLaneBehavior(target_speed=8)
    interrupt when withinDistanceToAnyObjs(self, safety):
        take SetBrakeAction(1.0)
    interrupt when withinDistanceToAnyObjs(self, crash):
        terminate
";

#[test]
fn later_interrupt_wins_when_both_hold() {
    let net = straight();
    let program = parse(GUARDED).unwrap();
    let s = scene(vec![
        object(
            "ego",
            ObjectKind::Car,
            10.0,
            1.75,
            0.0,
            call("Guarded", &[("safety", Value::Num(15.0)), ("crash", Value::Num(5.0))]),
        ),
        object("adv", ObjectKind::Car, 14.5, 1.75, 0.0, None),
    ]);
    let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
    assert_eq!(trace.termination, Termination::TerminateStatement { agent: "ego".into() });
    assert_eq!(trace.duration, 0.0);
    assert_eq!(trace.events.len(), 1);
    assert_eq!(
        trace.events[0].kind,
        EventKind::InterruptEnter { agent: "ego".into(), clause: 1, conditions: vec![true, true] }
    );
}

#[test]
fn safety_handler_brakes_and_suspends_trajectory() {
    let net = straight();
    let program = parse(GUARDED).unwrap();
    let s = scene(vec![
        object(
            "ego",
            ObjectKind::Car,
            0.0,
            1.75,
            0.0,
            call("Guarded", &[("safety", Value::Num(15.0)), ("crash", Value::Num(5.0))]),
        ),
        object("adv", ObjectKind::Car, 40.0, 1.75, 0.0, None),
    ]);
    let config = SimConfig::default();
    let trace = run_scene(&program, &s, &net, &config).unwrap();
    let first_brake = trace
        .events
        .iter()
        .find(|e| matches!(e.kind, EventKind::Action { action: Action::Brake(_), .. }))
        .expect("brake taken");
    match &first_brake.kind {
        EventKind::Action { layer, conditions, .. } => {
            assert_eq!(*layer, Some(0));
            assert_eq!(conditions, &vec![true, false]);
        }
        _ => unreachable!(),
    }
    let ego = trace.series("ego");
    let k = first_brake.step as usize;
    assert!(ego[k].speed < ego[k - 1].speed);
    assert_eq!(ego[k].brake, 1.0);
    // The ego stops short of the crash distance and holds.
    let gap = trace.snapshots.last().unwrap().agents[0].position.distance(Vec2::new(40.0, 1.75));
    assert!(gap > 5.0 && gap < 15.0, "gap {gap}");
    assert_eq!(trace.termination, Termination::TimeLimit);
    assert_continuity(&trace, &config);
}

const STALL: &str = "\
behaviour Hold():
    try:
        do FollowLaneBehavior(target_speed=8)
    interrupt when withinDistanceToAnyObjs(self, 10):
        while withinDistanceToAnyObjs(self, 13):
            take SetBrakeAction(1.0)
        while not withinDistanceToAnyObjs(self, 13):
            take SetThrottleAction(0.5)
";

#[test]
fn held_brake_keeps_ego_stopped_after_the_other_agent_leaves() {
    let net = straight();
    let program = parse(STALL).unwrap();
    let s = scene(vec![
        object("ego", ObjectKind::Car, 0.0, 1.75, 0.0, call("Hold", &[])),
        object("lead", ObjectKind::Car, 8.0, 1.75, 0.0, call("FollowLaneBehavior", &[("target_speed", Value::Num(10.0))])),
    ]);
    let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
    assert_eq!(trace.termination, Termination::TimeLimit);
    let last = trace.snapshots.last().unwrap();
    assert_eq!(last.agents[0].speed, 0.0);
    assert_eq!(last.agents[0].throttle, 0.5);
    assert_eq!(last.agents[0].brake, 1.0);
    assert!(last.agents[0].position.distance(last.agents[1].position) > 100.0);
    assert!(!trace.events.iter().any(|e| matches!(e.kind, EventKind::InterruptExit { .. })));
}

#[test]
fn left_turn_third_version_stops_and_never_restarts() {
    let net = load_network("town_cross4").unwrap();
    let program = compile(&listing("left_turn_ped_v3"), &SymbolTable::standard()).unwrap();
    let mut stalled = 0;
    for seed in 0..10 {
        let s = sample_scene(&program, &net, seed).unwrap();
        let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
        let ego = trace.series("ego");
        let Some(stop) = ego.iter().skip(1).position(|a| a.speed == 0.0) else { continue };
        if matches!(trace.termination, Termination::TerminateStatement { .. }) {
            continue;
        }
        assert!(ego[stop + 1..].iter().all(|a| a.speed == 0.0), "seed {seed} restarted");
        assert_eq!(trace.termination, Termination::TimeLimit);
        stalled += 1;
    }
    assert!(stalled >= 5, "{stalled} stalled");
}

#[test]
fn right_turn_listing_completes_and_terminates_by_distance() {
    let net = load_network("town_cross4").unwrap();
    let program = compile(&listing("right_turn_v1"), &SymbolTable::standard()).unwrap();
    let s = sample_scene(&program, &net, 0).unwrap();
    let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
    assert_eq!(trace.termination, Termination::TerminateWhen { index: 0 });
    let Value::Point(spawn) = &s.bindings["egoSpawnPt"] else { panic!() };
    let ego = trace.series("ego");
    let n = ego.len();
    assert!(ego[n - 1].position.distance(spawn.position) > 70.0);
    assert!(ego[n - 2].position.distance(spawn.position) <= 70.0);
}

/// Heading change of the path itself, from its first to its last segment.
fn path_turn(net: &RoadNetwork, lanes: &[String]) -> f64 {
    let first = &net.lane(&lanes[0]).unwrap().centerline;
    let last = &net.lane(lanes.last().unwrap()).unwrap().centerline;
    normalize_angle(last.end_heading() - first.start_heading())
}

#[test]
fn following_a_right_turn_changes_heading_by_minus_ninety() {
    let net = load_network("town_cross4").unwrap();
    let program = compile(&listing("right_turn_v1"), &SymbolTable::standard()).unwrap();
    let mut checked = 0;
    for seed in 0..12 {
        let s = sample_scene(&program, &net, seed).unwrap();
        let geometric = path_turn(&net, &s.trajectories["egoTrajectory"]);
        assert!((geometric.to_degrees() + 90.0).abs() < 1e-6);
        let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
        if trace.termination != (Termination::TerminateWhen { index: 0 }) {
            continue;
        }
        let ego = trace.series("ego");
        let change = normalize_angle(ego.last().unwrap().heading - ego[0].heading).to_degrees();
        assert!((change + 90.0).abs() <= 10.0, "seed {seed}: {change}");
        checked += 1;
    }
    assert!(checked >= 8);
}

#[test]
fn brake_handler_never_lets_ego_speed_up() {
    let net = load_network("town_cross4").unwrap();
    let program = compile(&listing("right_turn_v1"), &SymbolTable::standard()).unwrap();
    for seed in 0..12 {
        let s = sample_scene(&program, &net, seed).unwrap();
        let trace = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
        let ego = trace.series("ego");
        let mut active_from = None;
        for e in &trace.events {
            match &e.kind {
                EventKind::InterruptEnter { agent, clause: 0, .. } if agent == "ego" => active_from = Some(e.step),
                EventKind::InterruptExit { agent, clause: 0 } if agent == "ego" => {
                    let start = active_from.take().expect("exit follows enter");
                    for k in start..e.step {
                        assert!(ego[k as usize].speed <= ego[k as usize - 1].speed + 1e-12, "seed {seed} step {k}");
                    }
                }
                _ => {}
            }
        }
        assert_continuity(&trace, &SimConfig::default());
    }
}

fn crossing_scene(ego_x: f64, ego_behavior: Option<BehaviorCall>) -> Scene {
    scene(vec![
        object("ego", ObjectKind::Car, ego_x, 1.75, 0.0, ego_behavior),
        object(
            "ped",
            ObjectKind::Pedestrian,
            100.0,
            -6.0,
            0.0,
            call(
                "CrossingBehavior",
                &[
                    ("reference", Value::Object("ego".into())),
                    ("min_speed", Value::Num(1.0)),
                    ("threshold", Value::Num(20.0)),
                ],
            ),
        ),
    ])
}

#[test]
fn crossing_pedestrian_waits_for_a_distant_reference() {
    let net = straight();
    let s = crossing_scene(250.0, None);
    let trace = run_scene(&ScenarioProgram::default(), &s, &net, &SimConfig::default()).unwrap();
    assert!(trace.series("ped").iter().all(|p| p.position == Vec2::new(100.0, -6.0)));
}

#[test]
fn crossing_pedestrian_starts_within_one_step_of_threshold() {
    let net = straight();
    let s = crossing_scene(0.0, call("FollowLaneBehavior", &[("target_speed", Value::Num(10.0))]));
    let trace = run_scene(&ScenarioProgram::default(), &s, &net, &SimConfig::default()).unwrap();
    let ego = trace.series("ego");
    let ped = trace.series("ped");
    let k = (0..ego.len()).find(|k| ego[*k].position.distance(ped[*k].position) < 20.0).expect("ego approaches");
    assert!((ego[k].speed - 10.0).abs() < 1e-9);
    assert!(ped[..=k].iter().all(|p| p.position == Vec2::new(100.0, -6.0)));
    assert!(ped[k + 1].position != Vec2::new(100.0, -6.0));
    assert!(ped[k + 1].position.y > -6.0 && ped[k + 1].position.x == 100.0);
}

#[test]
fn crossing_line_spans_the_road_plus_four_metres() {
    let net = straight();
    let line = crossing_line(&net, Vec2::new(0.0, 1.75), Vec2::new(100.0, -6.0), 0.0);
    // Northward across E1, E2, ES, W1 and W2.
    assert_eq!(line.first(), Vec2::new(100.0, -6.0));
    assert!(line.last().distance(Vec2::new(100.0, -6.0 + 3.5 * 4.0 + 2.5 + 4.0)) < 1e-9);
}

#[test]
fn unassigned_flag_is_a_runtime_diagnostic() {
    let net = straight();
    let program = parse(
        "behaviour B():\n    try:\n        do FollowLaneBehavior()\n    interrupt when flag:\n        flag = False\n",
    )
    .unwrap();
    let s = scene(vec![object("ego", ObjectKind::Car, 0.0, 1.75, 0.0, call("B", &[]))]);
    let err = run_scene(&program, &s, &net, &SimConfig::default()).unwrap_err();
    assert_eq!(err.code, Code::UnboundLocal);
    assert_eq!(err.message, "local variable 'flag' referenced before assignment");
    assert_eq!(err.span.unwrap().line, 4);
}

#[test]
fn disconnected_trajectory_is_rejected() {
    let net = straight();
    let lanes = Value::List(vec![Value::Lane("E1".into()), Value::Lane("W1".into())]);
    let s = scene(vec![object(
        "ego",
        ObjectKind::Car,
        0.0,
        1.75,
        0.0,
        call("FollowTrajectoryBehavior", &[("target_speed", Value::Num(5.0)), ("trajectory", lanes)]),
    )]);
    let err = run_scene(&ScenarioProgram::default(), &s, &net, &SimConfig::default()).unwrap_err();
    assert_eq!(err.code, Code::DisconnectedTrajectory);
}

#[test]
fn loop_that_never_yields_is_reported() {
    let net = straight();
    let program = parse("behaviour Spin():\n    while True:\n        x = 1\n").unwrap();
    let s = scene(vec![object("ego", ObjectKind::Car, 0.0, 1.75, 0.0, call("Spin", &[]))]);
    let err = run_scene(&program, &s, &net, &SimConfig::default()).unwrap_err();
    assert_eq!(err.code, Code::RuntimeError);
}

#[test]
fn traces_are_deterministic_and_round_trip() {
    let net = load_network("town_cross4").unwrap();
    let program = compile(&listing("left_turn_ped_v1"), &SymbolTable::standard()).unwrap();
    let s = sample_scene(&program, &net, 4).unwrap();
    let a = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
    let b = run_scene(&program, &s, &net, &SimConfig::default()).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(Trace::from_jsonl(&a.to_jsonl()).unwrap(), a);
    let last = a.snapshots.last().unwrap();
    assert_eq!(last.time, a.duration);
    assert!(a.snapshots.windows(2).all(|w| w[1].step == w[0].step + 1));
}

struct Points {
    network: RoadNetwork,
    points: Vec<Vec2>,
}

impl Host for Points {
    fn network(&self) -> &RoadNetwork {
        &self.network
    }
    fn lookup(&self, _: &str) -> Lookup {
        Lookup::Undefined
    }
    fn param(&self, _: &str) -> Option<Value> {
        None
    }
    fn object(&self, name: &str) -> Option<Pose> {
        let i: usize = name.parse().ok()?;
        self.points.get(i).map(|p| Pose { position: *p, heading: 0.0, speed: 0.0 })
    }
    fn object_names(&self) -> Vec<String> {
        (0..self.points.len()).map(|i| i.to_string()).collect()
    }
    fn behavior_params(&self, _: &str) -> Option<Vec<String>> {
        None
    }
    fn draw(&mut self) -> f64 {
        0.5
    }
}

#[test]
fn within_distance_examples() {
    let single = Points { network: straight(), points: vec![Vec2::new(0.0, 0.0)] };
    assert!(!within_distance_to_any_objs(&single, "0", 1e9));
    let pair = Points { network: straight(), points: vec![Vec2::new(0.0, 0.0), Vec2::new(12.0, 0.0)] };
    assert!(within_distance_to_any_objs(&pair, "0", 15.0));
    assert!(!within_distance_to_any_objs(&pair, "0", 10.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn within_distance_agrees_with_pairwise_oracle(
        pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..8),
        d in 0.0f64..60.0,
    ) {
        let points: Vec<Vec2> = pts.iter().map(|(x, y)| Vec2::new(*x, *y)).collect();
        let host = Points { network: straight(), points: points.clone() };
        for i in 0..points.len() {
            let mut min = f64::INFINITY;
            for (j, q) in points.iter().enumerate() {
                if j != i {
                    let dx = points[i].x - q.x;
                    let dy = points[i].y - q.y;
                    min = min.min((dx * dx + dy * dy).sqrt());
                }
            }
            prop_assert_eq!(within_distance_to_any_objs(&host, &i.to_string(), d), min < d);
        }
    }

    #[test]
    fn higher_priority_conditions_silence_lower_layers(
        d1 in 5.0f64..40.0,
        d2 in 3.0f64..40.0,
        gap in 20.0f64..120.0,
    ) {
        let net = straight();
        let program = parse(
            "behaviour B(d1, d2):\n    try:\n        while True:\n            take SetThrottleAction(1.0)\n    interrupt when withinDistanceToAnyObjs(self, d1):\n        take SetBrakeAction(0.5)\n    interrupt when withinDistanceToAnyObjs(self, d2):\n        take SetBrakeAction(1.0)\n        take SetThrottleAction(0.0)\n",
        ).unwrap();
        let s = scene(vec![
            object("ego", ObjectKind::Car, 0.0, 1.75, 0.0, call("B", &[("d1", Value::Num(d1)), ("d2", Value::Num(d2))])),
            object("adv", ObjectKind::Car, gap, 1.75, 0.0, None),
        ]);
        let config = SimConfig::default();
        let trace = run_scene(&program, &s, &net, &config).unwrap();
        for e in &trace.events {
            if let EventKind::Action { layer, .. } = &e.kind {
                let before = &trace.snapshots[e.step as usize - 1];
                let dist = before.agents[0].position.distance(before.agents[1].position);
                let holds = [dist < d1, dist < d2];
                let level = layer.map_or(0, |l| l + 1);
                for (j, h) in holds.iter().enumerate() {
                    prop_assert!(!(j + 1 > level && *h), "step {} layer {:?} holds {:?}", e.step, layer, holds);
                }
            }
        }
        assert_continuity(&trace, &config);
        prop_assert_eq!(trace.to_jsonl(), run_scene(&program, &s, &net, &config).unwrap().to_jsonl());
    }
}
