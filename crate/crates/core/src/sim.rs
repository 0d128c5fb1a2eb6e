//! Discrete-time kinematic execution of sampled scenes.
//!
//! Agents are point masses that track a path with pure pursuit. Throttle and
//! brake are actuator settings: a `take` changes one of them and the other
//! keeps its last value, the way a vehicle controller holds its inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsl::ast::{Expr, InterruptClause, ObjectKind, ScenarioProgram, Stmt, StmtKind};
use crate::dsl::diagnostic::{Code, Diagnostic, Span};
use crate::eval::{Action, BehaviorCall, EvalError, Evaluator, Host, Lookup, Pose, Value};
use crate::geometry::{Polyline, Vec2};
use crate::road::RoadNetwork;
use crate::sample::{DrawSource, Scene};

/// Statements one agent may execute in a single step before the step is
/// declared stuck.
pub const STATEMENT_BUDGET: u32 = 10_000;

/// Gap allowed between consecutive lanes of a trajectory.
pub const CONNECT_TOLERANCE: f64 = 0.5;

/// Distance from the path end at which a trajectory counts as followed.
pub const ARRIVAL_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub time_limit: f64,
    pub car_radius: f64,
    pub pedestrian_radius: f64,
    /// Speed ceiling for agents whose behavior never sets a target speed.
    pub car_speed_cap: f64,
    pub pedestrian_speed_cap: f64,
    pub lookahead: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            a_max: 3.0,
            b_max: 8.0,
            time_limit: 30.0,
            car_radius: 2.0,
            pedestrian_radius: 0.4,
            car_speed_cap: 20.0,
            pedestrian_speed_cap: 3.0,
            lookahead: 3.0,
        }
    }
}

impl SimConfig {
    pub fn max_steps(&self) -> u32 {
        (self.time_limit / self.dt).round() as u32
    }

    /// Time of step `k`, rounded to the nanosecond so that step counts map to
    /// exact decimal times.
    pub fn time_of(&self, step: u32) -> f64 {
        (step as f64 * self.dt * 1e9).round() / 1e9
    }

    fn radius(&self, kind: ObjectKind) -> f64 {
        match kind {
            ObjectKind::Car => self.car_radius,
            ObjectKind::Pedestrian => self.pedestrian_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    TerminateStatement { agent: String },
    TerminateWhen { index: usize },
    TimeLimit,
    Collision { a: String, b: String },
}

impl Termination {
    pub fn label(&self) -> String {
        match self {
            Termination::TerminateStatement { .. } => "TerminateStatement".into(),
            Termination::TerminateWhen { index } => format!("TerminateWhen({index})"),
            Termination::TimeLimit => "TimeLimit".into(),
            Termination::Collision { .. } => "Collision".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub name: String,
    pub kind: ObjectKind,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub throttle: f64,
    pub brake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u32,
    pub time: f64,
    /// Same order as the trace's agent list.
    pub agents: Vec<AgentSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    InterruptEnter { agent: String, clause: usize, conditions: Vec<bool> },
    InterruptExit { agent: String, clause: usize },
    Action {
        agent: String,
        action: Action,
        /// Handler that took the action, or `None` for the try body.
        layer: Option<usize>,
        conditions: Vec<bool>,
    },
    BehaviorDone { agent: String },
    Collision { a: String, b: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub map: String,
    pub seed: u64,
    pub dt: f64,
    pub agents: Vec<AgentInfo>,
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<Event>,
    pub termination: Termination,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header { map: String, seed: u64, dt: f64, agents: Vec<AgentInfo> },
    Snapshot(Snapshot),
    Event(Event),
    End { termination: Termination, duration: f64 },
}

#[derive(Debug, thiserror::Error)]
pub enum TraceParseError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace has no {0} record")]
    Missing(&'static str),
}

impl Trace {
    pub fn agent_index(&self, name: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.name == name)
    }

    /// Per-snapshot states of one agent.
    pub fn series(&self, name: &str) -> Vec<&AgentSnapshot> {
        let Some(i) = self.agent_index(name) else { return Vec::new() };
        self.snapshots.iter().map(|s| &s.agents[i]).collect()
    }

    /// One JSON object per line: header, then per step its events followed by
    /// its snapshot, then the end record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: Record| {
            out.push_str(&serde_json::to_string(&r).expect("trace records serialize"));
            out.push('\n');
        };
        push(Record::Header { map: self.map.clone(), seed: self.seed, dt: self.dt, agents: self.agents.clone() });
        let mut events = self.events.iter().peekable();
        for snap in &self.snapshots {
            while let Some(e) = events.next_if(|e| e.step <= snap.step) {
                push(Record::Event(e.clone()));
            }
            push(Record::Snapshot(snap.clone()));
        }
        for e in events {
            push(Record::Event(e.clone()));
        }
        push(Record::End { termination: self.termination.clone(), duration: self.duration });
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceParseError> {
        let mut header = None;
        let mut end = None;
        let mut snapshots = Vec::new();
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: Record =
                serde_json::from_str(line).map_err(|source| TraceParseError::Json { line: i + 1, source })?;
            match record {
                Record::Header { map, seed, dt, agents } => header = Some((map, seed, dt, agents)),
                Record::Snapshot(s) => snapshots.push(s),
                Record::Event(e) => events.push(e),
                Record::End { termination, duration } => end = Some((termination, duration)),
            }
        }
        let (map, seed, dt, agents) = header.ok_or(TraceParseError::Missing("header"))?;
        let (termination, duration) = end.ok_or(TraceParseError::Missing("end"))?;
        Ok(Trace { map, seed, dt, agents, snapshots, events, termination, duration })
    }
}

#[derive(Debug, Clone)]
struct PathState {
    line: Polyline,
    s: f64,
    /// Halt at the last point instead of continuing straight.
    stop_at_end: bool,
}

#[derive(Debug, Clone)]
struct AgentState {
    name: String,
    kind: ObjectKind,
    position: Vec2,
    heading: f64,
    speed: f64,
    throttle: f64,
    brake: f64,
    v_cmd: f64,
    path: Option<PathState>,
}

impl AgentState {
    fn pose(&self) -> Pose {
        Pose { position: self.position, heading: self.heading, speed: self.speed }
    }

    fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            position: self.position,
            heading: self.heading,
            speed: self.speed,
            throttle: self.throttle,
            brake: self.brake,
        }
    }
}

/// What one agent's behavior asks for during a step.
#[derive(Default)]
struct Command {
    throttle: Option<f64>,
    brake: Option<f64>,
    v_cmd: Option<f64>,
    path: Option<PathState>,
    events: Vec<EventKind>,
}

impl Command {
    fn apply(&mut self, action: Action) {
        match action {
            Action::Brake(b) => self.brake = Some(b.clamp(0.0, 1.0)),
            Action::Throttle(t) => self.throttle = Some(t.clamp(0.0, 1.0)),
        }
    }
}

enum Flow {
    Yield,
    Done,
    Terminate,
}

type Locals = BTreeMap<String, Option<Value>>;

/// The frozen world a step is evaluated against.
struct World<'a> {
    network: &'a RoadNetwork,
    program: &'a ScenarioProgram,
    params: &'a BTreeMap<String, Value>,
    bindings: &'a BTreeMap<String, Value>,
    agents: &'a [AgentState],
}

struct StepHost<'a, 'w> {
    world: &'a World<'w>,
    me: Option<&'a str>,
    locals: Option<&'a Locals>,
    draws: &'a mut DrawSource,
}

impl Host for StepHost<'_, '_> {
    fn network(&self) -> &RoadNetwork {
        self.world.network
    }

    fn lookup(&self, name: &str) -> Lookup {
        if let Some(locals) = self.locals {
            match locals.get(name) {
                Some(Some(v)) => return Lookup::Found(v.clone()),
                Some(None) => return Lookup::Unbound,
                None => {}
            }
        }
        if name == "self" {
            if let Some(me) = self.me {
                return Lookup::Found(Value::Object(me.to_string()));
            }
        }
        if self.world.agents.iter().any(|a| a.name == name) {
            return Lookup::Found(Value::Object(name.to_string()));
        }
        match self.world.bindings.get(name) {
            Some(v) => Lookup::Found(v.clone()),
            None => Lookup::Undefined,
        }
    }

    fn param(&self, name: &str) -> Option<Value> {
        self.world.params.get(name).cloned()
    }

    fn object(&self, name: &str) -> Option<Pose> {
        self.world.agents.iter().find(|a| a.name == name).map(AgentState::pose)
    }

    fn object_names(&self) -> Vec<String> {
        self.world.agents.iter().map(|a| a.name.clone()).collect()
    }

    fn behavior_params(&self, name: &str) -> Option<Vec<String>> {
        self.world.program.behavior(name).map(|b| b.params.clone())
    }

    fn draw(&mut self) -> f64 {
        self.draws.next_f64()
    }
}

struct Ctx<'a, 'w> {
    world: &'a World<'w>,
    me: &'a str,
    draws: &'a mut DrawSource,
    budget: u32,
    behavior: String,
}

impl Ctx<'_, '_> {
    fn eval(&mut self, locals: Option<&Locals>, e: &Expr) -> Result<Value, Diagnostic> {
        let mut host = StepHost { world: self.world, me: Some(self.me), locals, draws: self.draws };
        Evaluator::new(&mut host).eval(e).map_err(|err| match err {
            EvalError::Abort(d) => d,
            EvalError::EmptyChoice => {
                Diagnostic::error(Code::EvaluationError, "Uniform() over an empty collection", Some(e.span))
            }
        })
    }

    fn tick(&mut self) -> Result<(), Diagnostic> {
        if self.budget == 0 {
            return Err(Diagnostic::error(
                Code::RuntimeError,
                format!(
                    "behavior '{}' of '{}' ran {STATEMENT_BUDGET} statements in one step without taking an action",
                    self.behavior, self.me
                ),
                None,
            ));
        }
        self.budget -= 1;
        Ok(())
    }

    fn agent(&self) -> &AgentState {
        self.world.agents.iter().find(|a| a.name == self.me).expect("stepping agent exists")
    }
}

struct LayerInfo {
    handler: Option<usize>,
    conditions: Vec<bool>,
}

struct Block<'p> {
    stmts: &'p [Stmt],
    pc: usize,
    child: Option<Box<Child<'p>>>,
}

impl<'p> Block<'p> {
    fn new(stmts: &'p [Stmt]) -> Self {
        Self { stmts, pc: 0, child: None }
    }
}

enum Child<'p> {
    While { condition: &'p Expr, body: Block<'p>, fresh: bool },
    Try(TryFrame<'p>),
    Do(Activation<'p>),
}

struct TryFrame<'p> {
    clauses: &'p [InterruptClause],
    body: Block<'p>,
    /// Running handlers, lowest priority first.
    handlers: Vec<(usize, Block<'p>)>,
}

struct Follow {
    line: Polyline,
    target: f64,
    started: bool,
}

enum CrossingPhase {
    Idle,
    Walking,
}

struct Crossing {
    reference: String,
    min_speed: f64,
    threshold: f64,
    phase: CrossingPhase,
}

enum Activation<'p> {
    User { locals: Locals, block: Block<'p> },
    Follow(Follow),
    Crossing(Crossing),
    Wait,
}

fn assigned_names(stmts: &[Stmt], out: &mut Vec<String>) {
    for s in stmts {
        match &s.node {
            StmtKind::Assign { name, .. } => out.push(name.clone()),
            StmtKind::While { body, .. } => assigned_names(body, out),
            StmtKind::Try { body, interrupts } => {
                assigned_names(body, out);
                for c in interrupts {
                    assigned_names(&c.handler, out);
                }
            }
            _ => {}
        }
    }
}

fn num_arg(call: &BehaviorCall, name: &str, default: Option<f64>) -> Result<f64, Diagnostic> {
    match call.arg(name) {
        Some(Value::Num(n)) => Ok(*n),
        Some(v) => Err(Diagnostic::error(
            Code::EvaluationError,
            format!("{}() argument '{name}' must be a number, not {}", call.name, v.type_name()),
            None,
        )),
        None => default.ok_or_else(|| {
            Diagnostic::error(
                Code::EvaluationError,
                format!("{}() missing required argument '{name}'", call.name),
                None,
            )
        }),
    }
}

/// Concatenated centerlines of a lane list, checked for gaps.
pub fn trajectory_path(network: &RoadNetwork, lanes: &[String]) -> Result<Polyline, Diagnostic> {
    let mut lines = Vec::new();
    for id in lanes {
        let lane = network.lane(id).ok_or_else(|| {
            Diagnostic::error(Code::EvaluationError, format!("unknown lane '{id}' in trajectory"), None)
        })?;
        lines.push(&lane.centerline);
    }
    if lines.is_empty() {
        return Err(Diagnostic::error(Code::DisconnectedTrajectory, "trajectory has no lanes", None));
    }
    for (i, w) in lines.windows(2).enumerate() {
        let gap = w[0].last().distance(w[1].first());
        if gap > CONNECT_TOLERANCE {
            return Err(Diagnostic::error(
                Code::DisconnectedTrajectory,
                format!("trajectory lanes '{}' and '{}' are not connected (gap {gap:.2} m)", lanes[i], lanes[i + 1]),
                None,
            ));
        }
    }
    Ok(Polyline::concat(lines))
}

fn activate<'p>(call: &BehaviorCall, program: &'p ScenarioProgram, ctx: &Ctx) -> Result<Activation<'p>, Diagnostic> {
    if let Some(def) = program.behavior(&call.name) {
        let mut names = Vec::new();
        assigned_names(&def.body, &mut names);
        let mut locals: Locals = names.into_iter().map(|n| (n, None)).collect();
        for p in &def.params {
            let v = call.arg(p).cloned().ok_or_else(|| {
                Diagnostic::error(
                    Code::EvaluationError,
                    format!("{}() missing required argument '{p}'", call.name),
                    None,
                )
            })?;
            locals.insert(p.clone(), Some(v));
        }
        return Ok(Activation::User { locals, block: Block::new(&def.body) });
    }
    let network = ctx.world.network;
    match call.name.as_str() {
        "FollowTrajectoryBehavior" => {
            let lanes = call.arg("trajectory").and_then(Value::as_lane_list).ok_or_else(|| {
                Diagnostic::error(
                    Code::EvaluationError,
                    "FollowTrajectoryBehavior() needs a trajectory given as a list of lanes",
                    None,
                )
            })?;
            let line = trajectory_path(network, &lanes)?;
            Ok(Activation::Follow(Follow { line, target: num_arg(call, "target_speed", Some(10.0))?, started: false }))
        }
        "FollowLaneBehavior" => {
            let agent = ctx.agent();
            let start = network.nearest_road_lane(agent.position).ok_or_else(|| {
                Diagnostic::error(Code::EvaluationError, "FollowLaneBehavior() needs a road lane", None)
            })?;
            let mut lanes = vec![start.id.clone()];
            let mut length = start.centerline.length();
            let mut current = start;
            while length < 500.0 {
                let Some(next) = current.successors.first().and_then(|id| network.lane(id)) else { break };
                lanes.push(next.id.clone());
                length += next.centerline.length();
                current = next;
            }
            let line = trajectory_path(network, &lanes)?;
            Ok(Activation::Follow(Follow { line, target: num_arg(call, "target_speed", Some(10.0))?, started: false }))
        }
        "CrossingBehavior" => {
            let reference = match call.arg("reference") {
                Some(Value::Object(name)) => name.clone(),
                _ => {
                    return Err(Diagnostic::error(
                        Code::EvaluationError,
                        "CrossingBehavior() needs a reference object",
                        None,
                    ))
                }
            };
            Ok(Activation::Crossing(Crossing {
                reference,
                min_speed: num_arg(call, "min_speed", Some(1.0))?,
                threshold: num_arg(call, "threshold", Some(10.0))?,
                phase: CrossingPhase::Idle,
            }))
        }
        "WaitBehavior" => Ok(Activation::Wait),
        other => Err(Diagnostic::error(
            Code::UnknownBehavior,
            format!("behavior '{other}' is not defined"),
            None,
        )),
    }
}

fn step_activation<'p>(
    act: &mut Activation<'p>,
    program: &'p ScenarioProgram,
    ctx: &mut Ctx,
    cmd: &mut Command,
) -> Result<Flow, Diagnostic> {
    match act {
        Activation::User { locals, block } => step_block(block, locals, program, ctx, cmd, None),
        Activation::Follow(f) => {
            let agent = ctx.agent();
            if f.started {
                let s = agent.path.as_ref().map_or_else(|| f.line.project(agent.position), |p| p.s);
                if f.line.length() - s < ARRIVAL_RADIUS {
                    return Ok(Flow::Done);
                }
            } else {
                let s = f.line.project(agent.position);
                cmd.path = Some(PathState { line: f.line.clone(), s, stop_at_end: false });
                f.started = true;
            }
            cmd.throttle = Some(if agent.speed < f.target { 1.0 } else { 0.0 });
            cmd.brake = Some(0.0);
            cmd.v_cmd = Some(f.target);
            Ok(Flow::Yield)
        }
        Activation::Crossing(c) => {
            let agent = ctx.agent();
            match c.phase {
                CrossingPhase::Idle => {
                    let Some(reference) = ctx.world.agents.iter().find(|a| a.name == c.reference) else {
                        return Ok(Flow::Yield);
                    };
                    if reference.position.distance(agent.position) >= c.threshold {
                        return Ok(Flow::Yield);
                    }
                    let line = crossing_line(ctx.world.network, reference.position, agent.position, agent.heading);
                    cmd.path = Some(PathState { line, s: 0.0, stop_at_end: true });
                    cmd.throttle = Some(1.0);
                    cmd.brake = Some(0.0);
                    cmd.v_cmd = Some(c.min_speed);
                    c.phase = CrossingPhase::Walking;
                    Ok(Flow::Yield)
                }
                CrossingPhase::Walking => {
                    let done = agent.path.as_ref().is_none_or(|p| p.line.length() - p.s < 1e-6);
                    if done {
                        cmd.throttle = Some(0.0);
                        cmd.v_cmd = Some(0.0);
                        return Ok(Flow::Done);
                    }
                    cmd.throttle = Some(1.0);
                    cmd.brake = Some(0.0);
                    cmd.v_cmd = Some(c.min_speed);
                    Ok(Flow::Yield)
                }
            }
        }
        Activation::Wait => Ok(Flow::Yield),
    }
}

/// The line a crossing pedestrian walks: from its spawn, perpendicular to the
/// reference agent's lane and toward that lane's centerline, spanning the road
/// plus 2 m on each side.
pub fn crossing_line(network: &RoadNetwork, reference: Vec2, start: Vec2, heading: f64) -> Polyline {
    let Some(lane) = network.nearest_road_lane(reference) else {
        return Polyline::new(vec![start, start + Vec2::from_heading(heading) * 4.0]);
    };
    let foot = lane.centerline.point_at(lane.centerline.project(start));
    let tangent = Vec2::from_heading(foot.heading);
    let normal = Vec2::new(-tangent.y, tangent.x);
    let side = (foot.position - start).dot(normal);
    let dir = if side >= 0.0 { normal } else { normal * -1.0 };
    let length = network.road_width_at(lane, start) + 4.0;
    Polyline::new(vec![start, start + dir * length])
}

fn step_block<'p>(
    block: &mut Block<'p>,
    locals: &mut Locals,
    program: &'p ScenarioProgram,
    ctx: &mut Ctx,
    cmd: &mut Command,
    layer: Option<&LayerInfo>,
) -> Result<Flow, Diagnostic> {
    loop {
        ctx.tick()?;
        if let Some(child) = block.child.as_mut() {
            match step_child(child, locals, program, ctx, cmd, layer)? {
                Flow::Done => {
                    block.child = None;
                    block.pc += 1;
                    continue;
                }
                other => return Ok(other),
            }
        }
        let Some(stmt) = block.stmts.get(block.pc) else { return Ok(Flow::Done) };
        match &stmt.node {
            StmtKind::Assign { name, value } => {
                let v = ctx.eval(Some(locals), value)?;
                locals.insert(name.clone(), Some(v));
                block.pc += 1;
            }
            StmtKind::Take(e) => {
                let action = match ctx.eval(Some(locals), e)? {
                    Value::Action(a) => a,
                    v => {
                        return Err(Diagnostic::error(
                            Code::EvaluationError,
                            format!("take expects an action, not {}", v.type_name()),
                            Some(e.span),
                        ))
                    }
                };
                cmd.apply(action);
                cmd.events.push(EventKind::Action {
                    agent: ctx.me.to_string(),
                    action,
                    layer: layer.and_then(|l| l.handler),
                    conditions: layer.map(|l| l.conditions.clone()).unwrap_or_default(),
                });
                block.pc += 1;
                return Ok(Flow::Yield);
            }
            StmtKind::Do(e) => {
                let call = match ctx.eval(Some(locals), e)? {
                    Value::Behavior(c) => c,
                    v => {
                        return Err(Diagnostic::error(
                            Code::EvaluationError,
                            format!("do expects a behavior, not {}", v.type_name()),
                            Some(e.span),
                        ))
                    }
                };
                let act = activate(&call, program, ctx).map_err(|d| with_span(d, e.span))?;
                block.child = Some(Box::new(Child::Do(act)));
            }
            StmtKind::While { condition, body } => {
                block.child = Some(Box::new(Child::While { condition, body: Block::new(body), fresh: true }));
            }
            StmtKind::Try { body, interrupts } => {
                block.child = Some(Box::new(Child::Try(TryFrame {
                    clauses: interrupts,
                    body: Block::new(body),
                    handlers: Vec::new(),
                })));
            }
            StmtKind::Terminate => return Ok(Flow::Terminate),
            _ => block.pc += 1,
        }
    }
}

fn with_span(mut d: Diagnostic, span: Span) -> Diagnostic {
    if d.span.is_none() {
        d.span = Some(span);
    }
    d
}

fn step_child<'p>(
    child: &mut Child<'p>,
    locals: &mut Locals,
    program: &'p ScenarioProgram,
    ctx: &mut Ctx,
    cmd: &mut Command,
    layer: Option<&LayerInfo>,
) -> Result<Flow, Diagnostic> {
    match child {
        Child::Do(act) => step_activation(act, program, ctx, cmd),
        Child::While { condition, body, fresh } => loop {
            ctx.tick()?;
            if *fresh {
                if !ctx.eval(Some(locals), condition)?.truthy() {
                    return Ok(Flow::Done);
                }
                *fresh = false;
                *body = Block::new(body.stmts);
            }
            match step_block(body, locals, program, ctx, cmd, layer)? {
                Flow::Done => *fresh = true,
                other => return Ok(other),
            }
        },
        Child::Try(frame) => step_try(frame, locals, program, ctx, cmd),
    }
}

fn step_try<'p>(
    frame: &mut TryFrame<'p>,
    locals: &mut Locals,
    program: &'p ScenarioProgram,
    ctx: &mut Ctx,
    cmd: &mut Command,
) -> Result<Flow, Diagnostic> {
    let mut finished: Vec<usize> = Vec::new();
    loop {
        ctx.tick()?;
        let mut conditions = Vec::with_capacity(frame.clauses.len());
        for clause in frame.clauses {
            conditions.push(ctx.eval(Some(locals), &clause.condition)?.truthy());
        }
        let top = frame.handlers.last().map(|(j, _)| *j);
        if let Some(j) = (0..conditions.len()).rev().find(|j| conditions[*j]) {
            if top.is_none_or(|t| j > t) {
                if finished.contains(&j) {
                    // The handler ran to completion this step and its condition
                    // still holds: lower layers stay suppressed until next step.
                    return Ok(Flow::Yield);
                }
                frame.handlers.push((j, Block::new(&frame.clauses[j].handler)));
                cmd.events.push(EventKind::InterruptEnter {
                    agent: ctx.me.to_string(),
                    clause: j,
                    conditions: conditions.clone(),
                });
            }
        }
        let info = LayerInfo { handler: frame.handlers.last().map(|(j, _)| *j), conditions };
        match frame.handlers.last_mut() {
            Some((j, handler)) => {
                let j = *j;
                match step_block(handler, locals, program, ctx, cmd, Some(&info))? {
                    Flow::Done => {
                        frame.handlers.pop();
                        cmd.events.push(EventKind::InterruptExit { agent: ctx.me.to_string(), clause: j });
                        finished.push(j);
                    }
                    other => return Ok(other),
                }
            }
            None => return step_block(&mut frame.body, locals, program, ctx, cmd, Some(&info)),
        }
    }
}

/// Runs a sampled scene until a termination condition holds.
///
/// Runtime failures in behavior code (an unassigned local, a disconnected
/// trajectory, a loop that never yields) are returned as diagnostics.
pub fn run_scene(
    program: &ScenarioProgram,
    scene: &Scene,
    network: &RoadNetwork,
    config: &SimConfig,
) -> Result<Trace, Diagnostic> {
    let mut agents: Vec<AgentState> = scene
        .objects
        .iter()
        .map(|o| AgentState {
            name: o.name.clone(),
            kind: o.kind,
            position: o.position,
            heading: o.heading,
            speed: o.speed,
            throttle: 0.0,
            brake: 0.0,
            v_cmd: match o.kind {
                ObjectKind::Car => config.car_speed_cap,
                ObjectKind::Pedestrian => config.pedestrian_speed_cap,
            },
            path: None,
        })
        .collect();
    let info: Vec<AgentInfo> = scene
        .objects
        .iter()
        .map(|o| AgentInfo { name: o.name.clone(), kind: o.kind, radius: config.radius(o.kind) })
        .collect();
    let terminations: Vec<&Expr> = program.terminations().collect();
    let mut draws = DrawSource::new(scene.seed, u64::MAX - 1);
    let mut behaviors: Vec<Option<Activation>> = Vec::with_capacity(agents.len());
    {
        let world = World { network, program, params: &scene.params, bindings: &scene.bindings, agents: &agents };
        for o in &scene.objects {
            let act = match &o.behavior {
                Some(call) => {
                    let ctx = Ctx { world: &world, me: &o.name, draws: &mut draws, budget: 0, behavior: call.name.clone() };
                    Some(activate(call, program, &ctx)?)
                }
                None => None,
            };
            behaviors.push(act);
        }
    }

    let mut snapshots = vec![Snapshot { step: 0, time: 0.0, agents: agents.iter().map(AgentState::snapshot).collect() }];
    let mut events = Vec::new();
    let max_steps = config.max_steps();
    let mut step = 0u32;
    let termination = loop {
        step += 1;
        let world = World { network, program, params: &scene.params, bindings: &scene.bindings, agents: &agents };

        let mut stop = None;
        for (index, cond) in terminations.iter().enumerate() {
            let mut host = StepHost { world: &world, me: None, locals: None, draws: &mut draws };
            let holds = match Evaluator::new(&mut host).eval(cond) {
                Ok(v) => v.truthy(),
                Err(EvalError::EmptyChoice) => false,
                Err(EvalError::Abort(d)) => return Err(d),
            };
            if holds {
                stop = Some(Termination::TerminateWhen { index });
                break;
            }
        }
        if let Some(t) = stop {
            step -= 1;
            break t;
        }

        let mut commands: Vec<Command> = Vec::with_capacity(agents.len());
        for (i, slot) in behaviors.iter_mut().enumerate() {
            let mut cmd = Command::default();
            if let Some(act) = slot.as_mut() {
                let name = scene.objects[i].behavior.as_ref().map(|c| c.name.clone()).unwrap_or_default();
                let mut ctx = Ctx { world: &world, me: &agents[i].name, draws: &mut draws, budget: STATEMENT_BUDGET, behavior: name };
                match step_activation(act, program, &mut ctx, &mut cmd)? {
                    Flow::Yield => {}
                    Flow::Done => {
                        *slot = None;
                        cmd.events.push(EventKind::BehaviorDone { agent: agents[i].name.clone() });
                    }
                    Flow::Terminate => {
                        events.extend(cmd.events.into_iter().map(|kind| Event { step, kind }));
                        stop = Some(Termination::TerminateStatement { agent: agents[i].name.clone() });
                        break;
                    }
                }
            }
            commands.push(cmd);
        }
        if let Some(t) = stop {
            step -= 1;
            break t;
        }

        for (agent, cmd) in agents.iter_mut().zip(commands) {
            events.extend(cmd.events.iter().cloned().map(|kind| Event { step, kind }));
            advance(agent, cmd, config);
        }
        snapshots.push(Snapshot {
            step,
            time: config.time_of(step),
            agents: agents.iter().map(AgentState::snapshot).collect(),
        });

        if let Some((a, b)) = first_collision(&agents, config) {
            events.push(Event { step, kind: EventKind::Collision { a: a.clone(), b: b.clone() } });
            break Termination::Collision { a, b };
        }
        if step >= max_steps {
            break Termination::TimeLimit;
        }
    };

    Ok(Trace {
        map: scene.map.clone(),
        seed: scene.seed,
        dt: config.dt,
        agents: info,
        snapshots,
        events,
        termination,
        duration: config.time_of(step),
    })
}

fn first_collision(agents: &[AgentState], config: &SimConfig) -> Option<(String, String)> {
    for (i, a) in agents.iter().enumerate() {
        for b in &agents[i + 1..] {
            if a.position.distance(b.position) < config.radius(a.kind) + config.radius(b.kind) {
                return Some((a.name.clone(), b.name.clone()));
            }
        }
    }
    None
}

/// Applies one step of kinematics:
/// `speed' = clamp(speed + (throttle·a_max − brake·b_max)·dt, 0, v_cmd)`.
fn advance(agent: &mut AgentState, cmd: Command, config: &SimConfig) {
    if let Some(t) = cmd.throttle {
        agent.throttle = t;
    }
    if let Some(b) = cmd.brake {
        agent.brake = b;
    }
    if let Some(v) = cmd.v_cmd {
        agent.v_cmd = v.max(0.0);
    }
    if let Some(p) = cmd.path {
        agent.path = Some(p);
    }
    let accel = agent.throttle * config.a_max - agent.brake * config.b_max;
    agent.speed = (agent.speed + accel * config.dt).clamp(0.0, agent.v_cmd);
    let travel = agent.speed * config.dt;
    if travel <= 0.0 {
        return;
    }
    match agent.path.as_mut() {
        Some(path) if path.line.length() - path.s > 1e-9 => {
            let len = path.line.length();
            let remaining_to_end = agent.position.distance(path.line.last());
            if path.stop_at_end && travel >= remaining_to_end {
                agent.position = path.line.last();
                path.s = len;
                return;
            }
            let lookahead = config.lookahead.max(agent.speed);
            let target = path.line.point_at((path.s + lookahead).min(len)).position;
            let to_target = target - agent.position;
            let dir = if to_target.length() > 1e-9 {
                to_target * (1.0 / to_target.length())
            } else {
                Vec2::from_heading(agent.heading)
            };
            agent.position = agent.position + dir * travel;
            agent.heading = dir.heading();
            let hi = (path.s + travel + lookahead).min(len);
            path.s = path.line.project_within(agent.position, path.s, hi).max(path.s);
        }
        _ => {
            agent.position = agent.position + Vec2::from_heading(agent.heading) * travel;
        }
    }
}
