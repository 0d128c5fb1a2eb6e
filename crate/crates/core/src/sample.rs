//! Rejection sampling of concrete scenes from a validated program.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::ast::{ObjectDecl, ObjectKind, Placement, ScenarioProgram, Side, StmtKind};
use crate::dsl::diagnostic::{Code, Diagnostic};
use crate::dsl::text::assets;
use crate::eval::{abort, BehaviorCall, EvalError, Evaluator, Host, Lookup, Pose, Value};
use crate::geometry::{OrientedPoint, Vec2};
use crate::road::RoadNetwork;

pub const MAX_ITERATIONS: u32 = 2000;

/// Deterministic draws keyed by (seed, stream): every rejection iteration
/// reads its own stream, so the k-th draw of iteration i never depends on
/// how many draws earlier iterations made.
pub struct DrawSource {
    rng: ChaCha8Rng,
}

impl DrawSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "region", rename_all = "snake_case")]
pub enum Containment {
    /// Drivable region for cars, unrestricted for pedestrians.
    Default,
    /// `with regionContainedIn None`.
    Unrestricted,
    Region(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub kind: ObjectKind,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub blueprint: Option<String>,
    pub behavior: Option<BehaviorCall>,
    pub containment: Containment,
}

impl SceneObject {
    pub fn pose(&self) -> Pose {
        Pose { position: self.position, heading: self.heading, speed: self.speed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Iterations used, including the accepted one.
    pub iterations: u32,
    pub map: String,
    pub params: BTreeMap<String, Value>,
    pub bindings: BTreeMap<String, Value>,
    pub objects: Vec<SceneObject>,
    /// Bindings that hold a list of lanes.
    pub trajectories: BTreeMap<String, Vec<String>>,
}

impl Scene {
    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Rejection counts gathered while sampling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub iterations: u32,
    /// One count per `require`, in source order, with its line.
    pub requirements: Vec<(u32, u32)>,
    pub containment: u32,
    pub empty_choice: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleError {
    RejectionExhausted(RejectionStats),
    Evaluation(Diagnostic),
}

impl SampleError {
    pub fn to_diagnostic(&self) -> Diagnostic {
        match self {
            SampleError::Evaluation(d) => d.clone(),
            SampleError::RejectionExhausted(stats) => {
                let mut parts: Vec<String> = stats
                    .requirements
                    .iter()
                    .filter(|(_, count)| *count > 0)
                    .map(|(line, count)| format!("require on line {line} failed {count} times"))
                    .collect();
                if stats.containment > 0 {
                    parts.push(format!("objects outside their region {} times", stats.containment));
                }
                if stats.empty_choice > 0 {
                    parts.push(format!("Uniform over an empty collection {} times", stats.empty_choice));
                }
                Diagnostic::error(
                    Code::RejectionExhausted,
                    format!(
                        "failed to generate a scene satisfying the requirements within {} iterations ({})",
                        stats.iterations,
                        parts.join("; ")
                    ),
                    None,
                )
            }
        }
    }
}

struct SampleHost<'a> {
    network: &'a RoadNetwork,
    program: &'a ScenarioProgram,
    params: BTreeMap<String, Value>,
    bindings: BTreeMap<String, Value>,
    objects: Vec<SceneObject>,
    draws: DrawSource,
}

impl Host for SampleHost<'_> {
    fn network(&self) -> &RoadNetwork {
        self.network
    }

    fn lookup(&self, name: &str) -> Lookup {
        match self.bindings.get(name) {
            Some(v) => Lookup::Found(v.clone()),
            None => Lookup::Undefined,
        }
    }

    fn param(&self, name: &str) -> Option<Value> {
        self.params.get(name).cloned()
    }

    fn object(&self, name: &str) -> Option<Pose> {
        self.objects.iter().find(|o| o.name == name).map(SceneObject::pose)
    }

    fn object_names(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.name.clone()).collect()
    }

    fn behavior_params(&self, name: &str) -> Option<Vec<String>> {
        self.program.behavior(name).map(|b| b.params.clone())
    }

    fn draw(&mut self) -> f64 {
        self.draws.next_f64()
    }
}

enum Outcome {
    Accepted,
    Requirement(usize),
    Containment,
    EmptyChoice,
}

/// Draws a scene, retrying up to [`MAX_ITERATIONS`] times.
pub fn sample_scene(program: &ScenarioProgram, network: &RoadNetwork, seed: u64) -> Result<Scene, SampleError> {
    let require_lines: Vec<u32> = program
        .statements
        .iter()
        .filter(|s| matches!(s.node, StmtKind::Require(_)))
        .map(|s| s.span.line)
        .collect();
    let mut stats = RejectionStats {
        iterations: 0,
        requirements: require_lines.iter().map(|l| (*l, 0)).collect(),
        containment: 0,
        empty_choice: 0,
    };
    for iteration in 0..MAX_ITERATIONS {
        let mut host = SampleHost {
            network,
            program,
            params: BTreeMap::new(),
            bindings: BTreeMap::new(),
            objects: Vec::new(),
            draws: DrawSource::new(seed, iteration as u64),
        };
        let outcome = run_iteration(program, &mut host).map_err(SampleError::Evaluation)?;
        stats.iterations = iteration + 1;
        match outcome {
            Outcome::Accepted => {
                let trajectories = host
                    .bindings
                    .iter()
                    .filter_map(|(k, v)| v.as_lane_list().map(|l| (k.clone(), l)))
                    .collect();
                return Ok(Scene {
                    seed,
                    iterations: iteration + 1,
                    map: network.name.clone(),
                    params: host.params,
                    bindings: host
                        .bindings
                        .into_iter()
                        .filter(|(k, v)| !matches!(v, Value::Object(o) if o == k))
                        .collect(),
                    objects: host.objects,
                    trajectories,
                });
            }
            Outcome::Requirement(i) => stats.requirements[i].1 += 1,
            Outcome::Containment => stats.containment += 1,
            Outcome::EmptyChoice => stats.empty_choice += 1,
        }
    }
    Err(SampleError::RejectionExhausted(stats))
}

fn run_iteration(program: &ScenarioProgram, host: &mut SampleHost) -> Result<Outcome, Diagnostic> {
    match run_iteration_inner(program, host) {
        Ok(o) => Ok(o),
        Err(EvalError::EmptyChoice) => Ok(Outcome::EmptyChoice),
        Err(EvalError::Abort(d)) => Err(d),
    }
}

fn run_iteration_inner(program: &ScenarioProgram, host: &mut SampleHost) -> Result<Outcome, EvalError> {
    let mut requirements = Vec::new();
    for stmt in &program.statements {
        match &stmt.node {
            StmtKind::Param { name, value } => {
                let v = Evaluator::new(host).eval(value)?;
                host.params.insert(name.clone(), v);
            }
            StmtKind::Assign { name, value } => {
                let v = Evaluator::new(host).eval(value)?;
                host.bindings.insert(name.clone(), v);
            }
            StmtKind::Object(decl) => {
                let pose = place(decl, host)?;
                host.objects.push(SceneObject {
                    name: decl.name.clone(),
                    kind: decl.kind,
                    position: pose.position,
                    heading: pose.heading,
                    speed: 0.0,
                    blueprint: None,
                    behavior: None,
                    containment: Containment::Default,
                });
                host.bindings.insert(decl.name.clone(), Value::Object(decl.name.clone()));
            }
            StmtKind::Require(e) => requirements.push(e),
            _ => {}
        }
    }

    for decl in program.objects() {
        apply_properties(decl, host)?;
    }

    let drivable = host.network.drivable_region();
    for obj in &host.objects {
        let inside = match &obj.containment {
            Containment::Unrestricted => true,
            Containment::Default => obj.kind == ObjectKind::Pedestrian || drivable.contains(obj.position),
            Containment::Region(region) => region_contains(host.network, region, obj.position),
        };
        if !inside {
            return Ok(Outcome::Containment);
        }
    }

    for (i, req) in requirements.iter().enumerate() {
        if !Evaluator::new(host).eval(req)?.truthy() {
            return Ok(Outcome::Requirement(i));
        }
    }
    Ok(Outcome::Accepted)
}

fn region_contains(network: &RoadNetwork, region: &Value, p: Vec2) -> bool {
    match region {
        Value::DrivableRegion => network.drivable_region().contains(p),
        Value::Lane(id) => network.lane(id).is_some_and(|l| l.region().contains(p)),
        Value::Intersection(id) => network.intersection(id).is_some_and(|i| i.region().contains(p)),
        _ => true,
    }
}

/// Resolves a placement to a pose. `right of` offsets at heading − 90°,
/// `left of` at heading + 90°; the heading is kept.
fn place(decl: &ObjectDecl, host: &mut SampleHost) -> Result<OrientedPoint, EvalError> {
    match &decl.placement {
        Placement::At(e) => {
            let mut ev = Evaluator::new(host);
            match ev.eval(e)? {
                Value::Point(p) => Ok(p),
                Value::Object(name) => {
                    let pose = ev.host.object(&name).expect("bound objects are placed");
                    Ok(OrientedPoint::new(pose.position, pose.heading))
                }
                v => Err(abort(
                    Code::EvaluationError,
                    format!("object position must be an OrientedPoint, not {}", v.type_name()),
                    e.span,
                )),
            }
        }
        Placement::Offset { side, anchor, distance } => {
            let mut ev = Evaluator::new(host);
            let base = match ev.eval(anchor)? {
                Value::Point(p) => p,
                Value::Object(name) => {
                    let pose = ev.host.object(&name).expect("bound objects are placed");
                    OrientedPoint::new(pose.position, pose.heading)
                }
                v => {
                    return Err(abort(
                        Code::EvaluationError,
                        format!("offset anchor must be an OrientedPoint, not {}", v.type_name()),
                        anchor.span,
                    ))
                }
            };
            let d = match ev.eval(distance)? {
                Value::Num(d) => d,
                v => {
                    return Err(abort(
                        Code::EvaluationError,
                        format!("offset distance must be a number, not {}", v.type_name()),
                        distance.span,
                    ))
                }
            };
            if d < 0.0 {
                return Err(abort(
                    Code::EvaluationError,
                    format!("offset distance must be non-negative, got {d}"),
                    distance.span,
                ));
            }
            Ok(base.offset_lateral(d, *side == Side::Left))
        }
    }
}

fn apply_properties(decl: &ObjectDecl, host: &mut SampleHost) -> Result<(), EvalError> {
    for prop in &decl.properties {
        let span = prop.value.span;
        let v = Evaluator::new(host).eval(&prop.value)?;
        let idx = host.objects.iter().position(|o| o.name == decl.name).expect("object placed");
        let obj = &mut host.objects[idx];
        match (prop.key.as_str(), v) {
            ("blueprint", Value::Str(s)) => {
                if !assets().is_known(&s) {
                    return Err(abort(Code::UnknownAsset, format!("unknown blueprint '{s}'"), span));
                }
                obj.blueprint = Some(s);
            }
            ("heading", Value::Num(h)) => obj.heading = h,
            ("regionContainedIn", Value::None) => obj.containment = Containment::Unrestricted,
            ("regionContainedIn", r @ (Value::DrivableRegion | Value::Lane(_) | Value::Intersection(_))) => {
                obj.containment = Containment::Region(r)
            }
            ("behaviour" | "behavior", Value::Behavior(call)) => obj.behavior = Some(call),
            (key, v) => {
                return Err(abort(
                    Code::EvaluationError,
                    format!("invalid value of type {} for property '{key}'", v.type_name()),
                    span,
                ))
            }
        }
    }
    Ok(())
}

/// Re-evaluates every requirement against a returned scene.
pub fn requirements_hold(program: &ScenarioProgram, network: &RoadNetwork, scene: &Scene) -> Result<bool, Diagnostic> {
    let mut bindings = scene.bindings.clone();
    for o in &scene.objects {
        bindings.insert(o.name.clone(), Value::Object(o.name.clone()));
    }
    let mut host = SampleHost {
        network,
        program,
        params: scene.params.clone(),
        bindings,
        objects: scene.objects.clone(),
        draws: DrawSource::new(scene.seed, u64::MAX),
    };
    for req in program.requirements() {
        match Evaluator::new(&mut host).eval(req) {
            Ok(v) if v.truthy() => {}
            Ok(_) | Err(EvalError::EmptyChoice) => return Ok(false),
            Err(EvalError::Abort(d)) => return Err(d),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::road::load_network;

    #[test]
    fn offsets_are_perpendicular_to_heading() {
        let net = load_network("town_straight").unwrap();
        let prog = |side: &str| {
            parse(&format!(
                "lane = Uniform(*network.lanes)\nspot = lane.centerline[0]\nego = Car at spot,\n    with regionContainedIn None\nped = Pedestrian {side} of spot by 5\n"
            ))
            .unwrap()
        };
        for (side, sign) in [("right", -1.0), ("left", 1.0)] {
            let scene = sample_scene(&prog(side), &net, 3).unwrap();
            let ego = scene.object("ego").unwrap();
            let ped = scene.object("ped").unwrap();
            let expected = ego.position + Vec2::from_heading(ego.heading + sign * std::f64::consts::FRAC_PI_2) * 5.0;
            assert!(ped.position.distance(expected) < 1e-9);
            assert_eq!(ped.heading, ego.heading);
        }
    }

    #[test]
    fn negative_offset_aborts() {
        let net = load_network("town_straight").unwrap();
        let p = parse("lane = Uniform(*network.lanes)\nego = Car at lane.centerline[0]\nped = Pedestrian right of ego by -1\n").unwrap();
        match sample_scene(&p, &net, 0) {
            Err(SampleError::Evaluation(d)) => assert_eq!(d.code, Code::EvaluationError),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsatisfiable_requirement_exhausts_exactly() {
        let net = load_network("town_straight").unwrap();
        let p = parse("lane = Uniform(*network.lanes)\nego = Car at OrientedPoint in lane.centerline\nrequire 1 > 2\n").unwrap();
        match sample_scene(&p, &net, 0) {
            Err(SampleError::RejectionExhausted(stats)) => {
                assert_eq!(stats.iterations, MAX_ITERATIONS);
                assert_eq!(stats.requirements, vec![(3, 2000)]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_uniform_is_rejection_not_error() {
        let net = load_network("town_straight").unwrap();
        let p = parse("i = Uniform(*network.intersections)\nego = Car at OrientedPoint in i.incomingLanes[0].centerline\n").unwrap();
        match sample_scene(&p, &net, 0) {
            Err(SampleError::RejectionExhausted(stats)) => assert_eq!(stats.empty_choice, 2000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_blueprint_aborts() {
        let net = load_network("town_straight").unwrap();
        let p = parse("lane = Uniform(*network.lanes)\nego = Car at OrientedPoint in lane.centerline,\n    with blueprint 'vehicle.nope'\n").unwrap();
        match sample_scene(&p, &net, 0) {
            Err(SampleError::Evaluation(d)) => assert_eq!(d.code, Code::UnknownAsset),
            other => panic!("{other:?}"),
        }
    }
}
