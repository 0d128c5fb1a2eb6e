use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use scenario_loop::dsl::{compile, parse, SymbolTable};
use scenario_loop::eval::Value;
use scenario_loop::road::{load_network, RoadNetwork};
use scenario_loop::sample::{requirements_hold, sample_scene, SampleError, MAX_ITERATIONS};

fn listing(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/listings").join(format!("{name}.scenic"));
    fs::read_to_string(path).unwrap()
}

fn cross4() -> RoadNetwork {
    load_network("town_cross4").unwrap()
}

#[test]
fn right_turn_scene_respects_distance_requirements() {
    let net = cross4();
    let program = compile(&listing("right_turn_v1"), &SymbolTable::standard()).unwrap();
    for seed in 0..20 {
        let scene = sample_scene(&program, &net, seed).unwrap();
        let ego = scene.object("ego").unwrap();
        let adv = scene.object("adversary").unwrap();
        let inter = net.intersections().next().unwrap();
        let de = inter.region().distance(ego.position);
        let da = inter.region().distance(adv.position);
        assert!((20.0..=25.0).contains(&de), "seed {seed}: ego {de}");
        assert!((10.0..=15.0).contains(&da), "seed {seed}: adversary {da}");
        assert!(scene.trajectories.contains_key("egoTrajectory"));
        assert_eq!(scene.trajectories["egoTrajectory"].len(), 3);
        let Value::Num(speed) = scene.params["EGO_SPEED"] else { panic!() };
        assert!((7.0..=10.0).contains(&speed));
    }
}

#[test]
fn distance_to_intersection_is_measured_to_its_boundary() {
    let net = cross4();
    // Lane L4 comes south along x = -1.75 from y = 60; the box edge is at y = 10.
    let src = "lane = network.lanes[4]\nego = Car at lane.centerline[0]\nd = distance to network.intersections[0]\n";
    let program = compile(src, &SymbolTable::standard()).unwrap();
    let scene = sample_scene(&program, &net, 0).unwrap();
    let ego = scene.object("ego").unwrap();
    let Value::Num(d) = scene.bindings["d"] else { panic!() };
    assert!((d - (ego.position.y - 10.0)).abs() < 1e-9 && (d - 50.0).abs() < 1e-9, "{d} at {:?}", ego.position);
}

#[test]
fn straight_conflicts_of_right_turn_are_lateral_only() {
    let net = cross4();
    let src = "m = Uniform(*filter(lambda m: m.type is ManeuverType.RIGHT_TURN, network.lanes[0].maneuvers))\nadv = filter(lambda m: m.type is ManeuverType.STRAIGHT, m.conflictingManeuvers)\nego = Car at network.lanes[0].centerline[0]\n";
    let program = compile(src, &SymbolTable::standard()).unwrap();
    let scene = sample_scene(&program, &net, 0).unwrap();
    let Value::List(items) = &scene.bindings["adv"] else { panic!() };
    let starts: Vec<String> = items
        .iter()
        .map(|v| match v {
            Value::Maneuver(id) => net.maneuver(id).unwrap().start_lane.clone(),
            _ => panic!(),
        })
        .collect();
    assert_eq!(starts, vec!["L6".to_string()]);
}

#[test]
fn unsatisfiable_program_exhausts_at_cap() {
    let net = cross4();
    let src = "lane = Uniform(*network.lanes)\nego = Car at OrientedPoint in lane.centerline\nrequire 1 > 2\n";
    let program = compile(src, &SymbolTable::standard()).unwrap();
    let Err(SampleError::RejectionExhausted(stats)) = sample_scene(&program, &net, 11) else { panic!() };
    assert_eq!(stats.iterations, MAX_ITERATIONS);
    assert_eq!(stats.iterations, 2000);
}

/// Independent oracle: the fraction of a lane's arc length whose points satisfy
/// `x < cut`, measured by walking the polyline in fine steps.
fn accepted_fraction(net: &RoadNetwork, lane: &str, cut: f64) -> f64 {
    let line = &net.lane(lane).unwrap().centerline;
    let n = 100_000;
    let inside = (0..n)
        .filter(|k| line.point_at((*k as f64 + 0.5) / n as f64 * line.length()).position.x < cut)
        .count();
    inside as f64 / n as f64
}

#[test]
fn acceptance_rate_matches_direct_oracle() {
    let net = load_network("town_straight").unwrap();
    let src = "lane = network.lanes[0]\nspot = OrientedPoint in lane.centerline\nego = Car at spot\nrequire spot.x < 150\n";
    let program = compile(src, &SymbolTable::standard()).unwrap();
    let lane_id = net.road_lanes().next().unwrap().id.clone();
    let expected = accepted_fraction(&net, &lane_id, 150.0);
    let seeds = 10_000;
    let first_try = (0..seeds)
        .filter(|s| sample_scene(&program, &net, *s).unwrap().iterations == 1)
        .count();
    let rate = first_try as f64 / seeds as f64;
    assert!((expected - 0.5).abs() < 1e-3);
    assert!((rate - expected).abs() <= 0.03, "rate {rate} vs {expected}");
}

const BENT_MAP: &str = r#"
format_version = 1
name = "bent"

[[lanes]]
id = "A"
width = 3.5
centerline = [[0.0, 0.0], [30.0, 0.0], [30.0, 50.0], [50.0, 50.0]]
"#;

#[test]
fn oriented_points_are_uniform_by_arc_length() {
    let net = RoadNetwork::from_text(BENT_MAP).unwrap();
    let line = net.lane("A").unwrap().centerline.clone();
    assert!((line.length() - 100.0).abs() < 1e-9);
    let program = compile(
        "spot = OrientedPoint in network.lanes[0].centerline\nego = Car at spot\n",
        &SymbolTable::standard(),
    )
    .unwrap();
    let n = 10_000;
    let mut s: Vec<f64> = (0..n)
        .map(|seed| {
            let scene = sample_scene(&program, &net, seed).unwrap();
            line.project(scene.object("ego").unwrap().position) / line.length()
        })
        .collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let lo = (*x - i as f64 / n as f64).abs();
            let hi = ((i + 1) as f64 / n as f64 - *x).abs();
            lo.max(hi)
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sampling_is_deterministic_and_sound(seed in any::<u64>()) {
        let net = cross4();
        let program = compile(&listing("right_turn_v1"), &SymbolTable::standard()).unwrap();
        let a = sample_scene(&program, &net, seed).unwrap();
        let b = sample_scene(&program, &net, seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert!(requirements_hold(&program, &net, &a).unwrap());
        for name in ["EGO_SPEED", "ADV_SPEED"] {
            let Value::Num(v) = a.params[name] else { panic!() };
            prop_assert!((7.0..=10.0).contains(&v));
        }
        let Value::Num(v) = a.params["SAFETY_DIST"] else { panic!() };
        prop_assert!((10.0..=20.0).contains(&v));
        let Value::Num(v) = a.params["EGO_BRAKE"] else { panic!() };
        prop_assert!((0.5..=1.0).contains(&v));
    }

    #[test]
    fn verifai_range_draws_stay_in_bounds(lo in -100.0f64..100.0, width in 0.0f64..50.0, seed in any::<u64>()) {
        let net = load_network("town_straight").unwrap();
        let hi = lo + width;
        let src = format!("param V = VerifaiRange({lo}, {hi})\nego = Car at network.lanes[0].centerline[0]\n");
        let program = parse(&src).unwrap();
        let scene = sample_scene(&program, &net, seed).unwrap();
        let Value::Num(v) = scene.params["V"] else { panic!() };
        prop_assert!(v >= lo && v <= hi);
    }

    #[test]
    fn structure_is_seed_independent(seed in any::<u64>()) {
        let net = cross4();
        let program = compile(&listing("left_turn_ped_v1"), &SymbolTable::standard()).unwrap();
        let a = sample_scene(&program, &net, seed).unwrap();
        let b = sample_scene(&program, &net, seed.wrapping_add(1)).unwrap();
        prop_assert_eq!(a.bindings.keys().collect::<Vec<_>>(), b.bindings.keys().collect::<Vec<_>>());
        prop_assert!(requirements_hold(&program, &net, &a).unwrap());
    }
}
