//! Runtime values and the expression evaluator shared by the sampler and the
//! simulator.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dsl::ast::{Arg, BinOp, CmpOp, Expr, ExprKind, UnaryOp};
use crate::dsl::diagnostic::{Code, Diagnostic, Span};
use crate::dsl::validate::{CalleeKind, SymbolTable};
use crate::geometry::{OrientedPoint, Vec2};
use crate::road::{ManeuverType, RoadNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Num(f64),
    Bool(bool),
    Str(String),
    None,
    List(Vec<Value>),
    Point(OrientedPoint),
    /// Centerline of the lane with this id.
    Centerline(String),
    Lane(String),
    Intersection(String),
    Maneuver(String),
    ManeuverType(ManeuverType),
    ManeuverTypes,
    DrivableRegion,
    Object(String),
    Network,
    GlobalParameters,
    Behavior(BehaviorCall),
    Action(Action),
}

/// A behavior with its arguments bound by parameter name, in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCall {
    pub name: String,
    pub args: Vec<(String, Value)>,
}

impl BehaviorCall {
    pub fn arg(&self, name: &str) -> Option<&Value> {
        self.args.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "amount", rename_all = "snake_case")]
pub enum Action {
    Brake(f64),
    Throttle(f64),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Num(_) => "number",
            Value::Bool(_) => "bool",
            Value::Str(_) => "str",
            Value::None => "NoneType",
            Value::List(_) => "list",
            Value::Point(_) => "OrientedPoint",
            Value::Centerline(_) => "PolylineRegion",
            Value::Lane(_) => "Lane",
            Value::Intersection(_) => "Intersection",
            Value::Maneuver(_) => "Maneuver",
            Value::ManeuverType(_) | Value::ManeuverTypes => "ManeuverType",
            Value::DrivableRegion => "Region",
            Value::Object(_) => "Object",
            Value::Network => "Network",
            Value::GlobalParameters => "globalParameters",
            Value::Behavior(_) => "Behavior",
            Value::Action(_) => "Action",
        }
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::Bool(b) => *b,
            Value::Num(n) => *n != 0.0,
            Value::None => false,
            Value::Str(s) => !s.is_empty(),
            Value::List(v) => !v.is_empty(),
            _ => true,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(n) => Some(*n),
            _ => None,
        }
    }

    /// Lane ids of a list of lanes, as bound to a trajectory variable.
    pub fn as_lane_list(&self) -> Option<Vec<String>> {
        match self {
            Value::List(items) if !items.is_empty() => items
                .iter()
                .map(|v| match v {
                    Value::Lane(id) => Some(id.clone()),
                    _ => None,
                })
                .collect(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

pub enum Lookup {
    Found(Value),
    /// A declared behavior local that has not been assigned yet.
    Unbound,
    Undefined,
}

/// What the evaluator needs from its surroundings.
pub trait Host {
    fn network(&self) -> &RoadNetwork;
    fn lookup(&self, name: &str) -> Lookup;
    fn param(&self, name: &str) -> Option<Value>;
    fn object(&self, name: &str) -> Option<Pose>;
    fn object_names(&self) -> Vec<String>;
    /// Parameter names of a user-defined behavior.
    fn behavior_params(&self, name: &str) -> Option<Vec<String>>;
    /// Uniform draw in [0, 1).
    fn draw(&mut self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// A value-level dead end: the sample is rejected, not the program.
    EmptyChoice,
    Abort(Diagnostic),
}

pub type EvalResult<T> = Result<T, EvalError>;

pub fn abort(code: Code, message: impl Into<String>, span: Span) -> EvalError {
    EvalError::Abort(Diagnostic::error(code, message, Some(span)))
}

fn symbols() -> &'static SymbolTable {
    static TABLE: OnceLock<SymbolTable> = OnceLock::new();
    TABLE.get_or_init(SymbolTable::standard)
}

pub struct Evaluator<'h> {
    pub host: &'h mut dyn Host,
    locals: Vec<(String, Value)>,
}

impl<'h> Evaluator<'h> {
    pub fn new(host: &'h mut dyn Host) -> Self {
        Self { host, locals: Vec::new() }
    }

    pub fn eval(&mut self, e: &Expr) -> EvalResult<Value> {
        match &e.node {
            ExprKind::Number(n) => Ok(Value::Num(*n)),
            ExprKind::Str(s) => Ok(Value::Str(s.clone())),
            ExprKind::Bool(b) => Ok(Value::Bool(*b)),
            ExprKind::NoneLit => Ok(Value::None),
            ExprKind::Name(n) => self.name(n, e.span),
            ExprKind::List(items) => Ok(Value::List(
                items.iter().map(|i| self.eval(i)).collect::<EvalResult<_>>()?,
            )),
            ExprKind::Paren(inner) => self.eval(inner),
            ExprKind::Attribute(base, attr) => {
                let b = self.eval(base)?;
                self.attribute(&b, attr, e.span)
            }
            ExprKind::Index(base, idx) => {
                let b = self.eval(base)?;
                let i = self.eval(idx)?;
                self.index(&b, &i, e.span)
            }
            ExprKind::Call(f, args) => self.call(f, args, e.span),
            ExprKind::Unary(UnaryOp::Neg, inner) => match self.eval(inner)? {
                Value::Num(n) => Ok(Value::Num(-n)),
                v => Err(abort(
                    Code::EvaluationError,
                    format!("bad operand type for unary -: {}", v.type_name()),
                    e.span,
                )),
            },
            ExprKind::Unary(UnaryOp::Not, inner) => Ok(Value::Bool(!self.eval(inner)?.truthy())),
            ExprKind::Binary(BinOp::And, l, r) => {
                let lv = self.eval(l)?;
                if !lv.truthy() {
                    return Ok(Value::Bool(false));
                }
                Ok(Value::Bool(self.eval(r)?.truthy()))
            }
            ExprKind::Binary(BinOp::Or, l, r) => {
                let lv = self.eval(l)?;
                if lv.truthy() {
                    return Ok(Value::Bool(true));
                }
                Ok(Value::Bool(self.eval(r)?.truthy()))
            }
            ExprKind::Binary(op, l, r) => {
                let lv = self.eval(l)?;
                let rv = self.eval(r)?;
                match (op, &lv, &rv) {
                    (BinOp::Add, Value::Str(a), Value::Str(b)) => Ok(Value::Str(format!("{a}{b}"))),
                    (_, Value::Num(a), Value::Num(b)) => {
                        let v = match op {
                            BinOp::Add => a + b,
                            BinOp::Sub => a - b,
                            BinOp::Mul => a * b,
                            BinOp::Div => {
                                if *b == 0.0 {
                                    return Err(abort(Code::EvaluationError, "division by zero", e.span));
                                }
                                a / b
                            }
                            BinOp::And | BinOp::Or => unreachable!(),
                        };
                        Ok(Value::Num(v))
                    }
                    _ => Err(abort(
                        Code::EvaluationError,
                        format!(
                            "unsupported operand types for {}: {} and {}",
                            op.symbol(),
                            lv.type_name(),
                            rv.type_name()
                        ),
                        e.span,
                    )),
                }
            }
            ExprKind::Compare(first, rest) => {
                let mut lhs = self.eval(first)?;
                for (op, rhs_e) in rest {
                    let rhs = self.eval(rhs_e)?;
                    if !self.compare(*op, &lhs, &rhs, e.span)? {
                        return Ok(Value::Bool(false));
                    }
                    lhs = rhs;
                }
                Ok(Value::Bool(true))
            }
            ExprKind::Lambda(..) => Err(abort(
                Code::EvaluationError,
                "lambda is only allowed as the first argument of filter()",
                e.span,
            )),
            ExprKind::DistanceTo(target) => {
                let Some(ego) = self.host.object("ego") else {
                    return Err(abort(Code::EvaluationError, "name 'ego' is not defined", e.span));
                };
                let t = self.eval(target)?;
                Ok(Value::Num(self.distance(ego.position, &t, target.span)?))
            }
            ExprKind::DistanceFromTo(a, b) => {
                let av = self.eval(a)?;
                let from = self.position_of(&av, a.span)?;
                let bv = self.eval(b)?;
                Ok(Value::Num(self.distance(from, &bv, b.span)?))
            }
            ExprKind::OrientedPointIn(target) => {
                let t = self.eval(target)?;
                let lane_id = match &t {
                    Value::Centerline(id) | Value::Lane(id) => id.clone(),
                    v => {
                        return Err(abort(
                            Code::EvaluationError,
                            format!("cannot sample an OrientedPoint in {}", v.type_name()),
                            target.span,
                        ))
                    }
                };
                let u = self.host.draw();
                let lane = self.lane(&lane_id, target.span)?;
                let len = lane.centerline.length();
                if len <= 0.0 {
                    return Err(abort(
                        Code::DegeneratePolyline,
                        format!("centerline of lane '{lane_id}' has zero length"),
                        target.span,
                    ));
                }
                Ok(Value::Point(lane.centerline.point_at(u * len)))
            }
        }
    }

    fn name(&mut self, n: &str, span: Span) -> EvalResult<Value> {
        if let Some((_, v)) = self.locals.iter().rev().find(|(k, _)| k == n) {
            return Ok(v.clone());
        }
        match self.host.lookup(n) {
            Lookup::Found(v) => return Ok(v),
            Lookup::Unbound => {
                return Err(abort(
                    Code::UnboundLocal,
                    format!("local variable '{n}' referenced before assignment"),
                    span,
                ))
            }
            Lookup::Undefined => {}
        }
        match n {
            "network" => Ok(Value::Network),
            "globalParameters" => Ok(Value::GlobalParameters),
            "ManeuverType" => Ok(Value::ManeuverTypes),
            _ => Err(abort(Code::UnknownIdentifier, format!("name '{n}' is not defined"), span)),
        }
    }

    fn lane(&self, id: &str, span: Span) -> EvalResult<&crate::road::Lane> {
        self.host
            .network()
            .lane(id)
            .ok_or_else(|| abort(Code::EvaluationError, format!("unknown lane '{id}'"), span))
    }

    fn no_attr(v: &Value, attr: &str, span: Span) -> EvalError {
        abort(
            Code::UnknownProperty,
            format!("'{}' object has no attribute '{attr}'", v.type_name()),
            span,
        )
    }

    fn attribute(&mut self, base: &Value, attr: &str, span: Span) -> EvalResult<Value> {
        let net = self.host.network();
        let lanes = |ids: &[String]| Value::List(ids.iter().map(|i| Value::Lane(i.clone())).collect());
        let v = match base {
            Value::Network => match attr {
                "intersections" => Value::List(net.intersections().map(|i| Value::Intersection(i.id.clone())).collect()),
                "lanes" => Value::List(net.road_lanes().map(|l| Value::Lane(l.id.clone())).collect()),
                "drivableRegion" => Value::DrivableRegion,
                _ => return Err(Self::no_attr(base, attr, span)),
            },
            Value::GlobalParameters => match self.host.param(attr) {
                Some(v) => v,
                None => {
                    return Err(abort(
                        Code::UnknownIdentifier,
                        format!("name 'globalParameters.{attr}' is not defined"),
                        span,
                    ))
                }
            },
            Value::ManeuverTypes => match ManeuverType::from_name(attr) {
                Some(t) => Value::ManeuverType(t),
                None => return Err(Self::no_attr(base, attr, span)),
            },
            Value::Intersection(id) => {
                let i = net
                    .intersection(id)
                    .ok_or_else(|| abort(Code::EvaluationError, format!("unknown intersection '{id}'"), span))?;
                match attr {
                    "is3Way" => Value::Bool(i.is_3way()),
                    "is4Way" => Value::Bool(i.is_4way()),
                    "incomingLanes" => lanes(&i.incoming_lanes),
                    "outgoingLanes" => lanes(&i.outgoing_lanes),
                    "maneuvers" => Value::List(i.maneuvers.iter().map(|m| Value::Maneuver(m.clone())).collect()),
                    "id" => Value::Str(i.id.clone()),
                    _ => return Err(Self::no_attr(base, attr, span)),
                }
            }
            Value::Lane(id) => {
                let l = self.lane(id, span)?;
                match attr {
                    "centerline" => Value::Centerline(id.clone()),
                    "maneuvers" => Value::List(
                        self.host
                            .network()
                            .maneuvers_of(id)
                            .into_iter()
                            .map(|m| Value::Maneuver(m.id.clone()))
                            .collect(),
                    ),
                    "width" => Value::Num(l.width),
                    "length" => Value::Num(l.centerline.length()),
                    "isShoulder" => Value::Bool(l.shoulder),
                    "successors" => lanes(&l.successors),
                    "predecessors" => lanes(&l.predecessors),
                    "id" => Value::Str(id.clone()),
                    _ => return Err(Self::no_attr(base, attr, span)),
                }
            }
            Value::Maneuver(id) => {
                let m = net
                    .maneuver(id)
                    .ok_or_else(|| abort(Code::EvaluationError, format!("unknown maneuver '{id}'"), span))?;
                match attr {
                    "type" => Value::ManeuverType(m.kind),
                    "startLane" => Value::Lane(m.start_lane.clone()),
                    "connectingLane" => Value::Lane(m.connecting_lane.clone()),
                    "endLane" => Value::Lane(m.end_lane.clone()),
                    "intersection" => Value::Intersection(m.intersection.clone()),
                    "conflictingManeuvers" => Value::List(
                        net.conflicting_maneuvers(id)
                            .into_iter()
                            .map(|c| Value::Maneuver(c.id.clone()))
                            .collect(),
                    ),
                    _ => return Err(Self::no_attr(base, attr, span)),
                }
            }
            Value::Centerline(id) => match attr {
                "length" => Value::Num(self.lane(id, span)?.centerline.length()),
                _ => return Err(Self::no_attr(base, attr, span)),
            },
            Value::Point(p) => match attr {
                "x" => Value::Num(p.position.x),
                "y" => Value::Num(p.position.y),
                "heading" => Value::Num(p.heading),
                "position" => Value::Point(*p),
                _ => return Err(Self::no_attr(base, attr, span)),
            },
            Value::Object(name) => {
                let pose = self.object_pose(name, span)?;
                match attr {
                    "x" => Value::Num(pose.position.x),
                    "y" => Value::Num(pose.position.y),
                    "heading" => Value::Num(pose.heading),
                    "speed" => Value::Num(pose.speed),
                    "position" => Value::Point(OrientedPoint::new(pose.position, pose.heading)),
                    _ => return Err(Self::no_attr(base, attr, span)),
                }
            }
            _ => return Err(Self::no_attr(base, attr, span)),
        };
        Ok(v)
    }

    fn object_pose(&self, name: &str, span: Span) -> EvalResult<Pose> {
        self.host
            .object(name)
            .ok_or_else(|| abort(Code::EvaluationError, format!("object '{name}' is not placed yet"), span))
    }

    fn index(&mut self, base: &Value, idx: &Value, span: Span) -> EvalResult<Value> {
        let Value::Num(i) = idx else {
            return Err(abort(
                Code::EvaluationError,
                format!("indices must be numbers, not {}", idx.type_name()),
                span,
            ));
        };
        if i.fract() != 0.0 {
            return Err(abort(Code::EvaluationError, format!("index {i} is not an integer"), span));
        }
        let resolve = |len: usize| -> EvalResult<usize> {
            let k = if *i < 0.0 { len as f64 + i } else { *i };
            if k < 0.0 || k >= len as f64 {
                Err(abort(Code::EvaluationError, format!("index {i} out of range"), span))
            } else {
                Ok(k as usize)
            }
        };
        match base {
            Value::List(items) => Ok(items[resolve(items.len())?].clone()),
            Value::Centerline(id) => {
                let line = &self.lane(id, span)?.centerline;
                let k = resolve(line.points().len())?;
                Ok(Value::Point(line.vertex(k)))
            }
            v => Err(abort(
                Code::EvaluationError,
                format!("'{}' object is not subscriptable", v.type_name()),
                span,
            )),
        }
    }

    fn compare(&mut self, op: CmpOp, l: &Value, r: &Value, span: Span) -> EvalResult<bool> {
        match op {
            CmpOp::Eq | CmpOp::Is => Ok(l == r),
            CmpOp::Ne | CmpOp::IsNot => Ok(l != r),
            CmpOp::In | CmpOp::NotIn => {
                let inside = self.contains(r, l, span)?;
                Ok(if op == CmpOp::In { inside } else { !inside })
            }
            _ => {
                let (Value::Num(a), Value::Num(b)) = (l, r) else {
                    return Err(abort(
                        Code::EvaluationError,
                        format!(
                            "'{}' not supported between {} and {}",
                            op.symbol(),
                            l.type_name(),
                            r.type_name()
                        ),
                        span,
                    ));
                };
                Ok(match op {
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                    _ => unreachable!(),
                })
            }
        }
    }

    fn contains(&mut self, container: &Value, item: &Value, span: Span) -> EvalResult<bool> {
        if let Value::List(items) = container {
            return Ok(items.contains(item));
        }
        let p = self.position_of(item, span)?;
        let net = self.host.network();
        let inside = match container {
            Value::DrivableRegion => net.drivable_region().contains(p),
            Value::Lane(id) => self.lane(id, span)?.region().contains(p),
            Value::Intersection(id) => net
                .intersection(id)
                .map(|i| i.region().contains(p))
                .unwrap_or(false),
            v => {
                return Err(abort(
                    Code::EvaluationError,
                    format!("'in' not supported for {}", v.type_name()),
                    span,
                ))
            }
        };
        Ok(inside)
    }

    pub fn position_of(&self, v: &Value, span: Span) -> EvalResult<Vec2> {
        match v {
            Value::Point(p) => Ok(p.position),
            Value::Object(name) => Ok(self.object_pose(name, span)?.position),
            v => Err(abort(
                Code::EvaluationError,
                format!("expected a point or object, got {}", v.type_name()),
                span,
            )),
        }
    }

    fn distance(&self, from: Vec2, to: &Value, span: Span) -> EvalResult<f64> {
        let net = self.host.network();
        Ok(match to {
            Value::Point(_) | Value::Object(_) => from.distance(self.position_of(to, span)?),
            Value::Lane(id) => self.lane(id, span)?.region().distance(from),
            Value::Centerline(id) => self.lane(id, span)?.centerline.distance_to_point(from),
            Value::Intersection(id) => net
                .intersection(id)
                .ok_or_else(|| abort(Code::EvaluationError, format!("unknown intersection '{id}'"), span))?
                .region()
                .distance(from),
            Value::DrivableRegion => net.drivable_region().distance(from),
            v => {
                return Err(abort(
                    Code::EvaluationError,
                    format!("cannot measure distance to {}", v.type_name()),
                    span,
                ))
            }
        })
    }

    fn call(&mut self, f: &Expr, args: &[Arg], span: Span) -> EvalResult<Value> {
        let ExprKind::Name(name) = &f.node else {
            return Err(abort(Code::EvaluationError, "only named functions can be called", f.span));
        };
        match name.as_str() {
            "Uniform" => {
                let mut options = Vec::new();
                for a in args {
                    match a {
                        Arg::Star(e) => match self.eval(e)? {
                            Value::List(items) => options.extend(items),
                            v => {
                                return Err(abort(
                                    Code::EvaluationError,
                                    format!("argument after * must be a list, not {}", v.type_name()),
                                    e.span,
                                ))
                            }
                        },
                        other => options.push(self.eval(other.expr())?),
                    }
                }
                if options.is_empty() {
                    return Err(EvalError::EmptyChoice);
                }
                let u = self.host.draw();
                let k = ((u * options.len() as f64) as usize).min(options.len() - 1);
                return Ok(options.swap_remove(k));
            }
            "filter" => {
                let (Some(Arg::Positional(func)), Some(Arg::Positional(coll))) = (args.first(), args.get(1)) else {
                    return Err(abort(Code::EvaluationError, "filter() expects a lambda and a collection", span));
                };
                let ExprKind::Lambda(param, body) = &func.node else {
                    return Err(abort(Code::EvaluationError, "filter() expects a lambda", func.span));
                };
                let Value::List(items) = self.eval(coll)? else {
                    return Err(abort(Code::EvaluationError, "filter() expects a list", coll.span));
                };
                let mut kept = Vec::new();
                for item in items {
                    self.locals.push((param.clone(), item.clone()));
                    let keep = self.eval(body);
                    self.locals.pop();
                    if keep?.truthy() {
                        kept.push(item);
                    }
                }
                return Ok(Value::List(kept));
            }
            _ => {}
        }

        if let Some(params) = self.host.behavior_params(name) {
            let params: Vec<&str> = params.iter().map(String::as_str).collect();
            let bound = self.bind_args(name, &params, args, span)?;
            return Ok(Value::Behavior(BehaviorCall { name: name.clone(), args: bound }));
        }
        let Some(sig) = symbols().callables.get(name.as_str()) else {
            return Err(abort(Code::UnknownIdentifier, format!("name '{name}' is not defined"), f.span));
        };
        let params: Vec<&str> = sig.params.iter().map(|(n, _, _)| *n).collect();
        let kind = sig.kind;
        let bound = self.bind_args(name, &params, args, span)?;
        let num = |k: &str| -> EvalResult<f64> {
            match bound.iter().find(|(n, _)| n == k).map(|(_, v)| v) {
                Some(Value::Num(n)) => Ok(*n),
                Some(v) => Err(abort(
                    Code::EvaluationError,
                    format!("{name}() argument '{k}' must be a number, not {}", v.type_name()),
                    span,
                )),
                None => Err(abort(Code::EvaluationError, format!("{name}() missing required argument '{k}'"), span)),
            }
        };
        match (kind, name.as_str()) {
            (CalleeKind::Behavior, _) => Ok(Value::Behavior(BehaviorCall { name: name.clone(), args: bound })),
            (_, "VerifaiRange") => {
                let (lo, hi) = (num("low")?, num("high")?);
                if lo > hi {
                    return Err(abort(
                        Code::EvaluationError,
                        format!("VerifaiRange low bound {lo} exceeds high bound {hi}"),
                        span,
                    ));
                }
                let u = self.host.draw();
                Ok(Value::Num(lo + u * (hi - lo)))
            }
            (_, "localPath") => match bound.first() {
                Some((_, Value::Str(s))) => Ok(Value::Str(s.clone())),
                _ => Err(abort(Code::EvaluationError, "localPath() expects a string", span)),
            },
            (_, "withinDistanceToAnyObjs") => {
                let Some((_, subject)) = bound.first() else {
                    return Err(abort(Code::EvaluationError, "withinDistanceToAnyObjs() missing object", span));
                };
                let Value::Object(me) = subject else {
                    return Err(abort(
                        Code::EvaluationError,
                        format!("withinDistanceToAnyObjs() expects an object, not {}", subject.type_name()),
                        span,
                    ));
                };
                let d = num("distance")?;
                Ok(Value::Bool(within_distance_to_any_objs(&*self.host, me, d)))
            }
            (_, "SetBrakeAction") => Ok(Value::Action(Action::Brake(num("brake")?))),
            (_, "SetThrottleAction") => Ok(Value::Action(Action::Throttle(num("throttle")?))),
            _ => Err(abort(Code::EvaluationError, format!("'{name}' cannot be called here"), span)),
        }
    }

    fn bind_args(&mut self, callee: &str, params: &[&str], args: &[Arg], span: Span) -> EvalResult<Vec<(String, Value)>> {
        let mut slots: Vec<Option<Value>> = vec![None; params.len()];
        let mut next = 0;
        for a in args {
            match a {
                Arg::Positional(e) => {
                    if next >= params.len() {
                        return Err(abort(
                            Code::EvaluationError,
                            format!("{callee}() takes {} arguments but more were given", params.len()),
                            e.span,
                        ));
                    }
                    slots[next] = Some(self.eval(e)?);
                    next += 1;
                }
                Arg::Keyword(k, e) => {
                    let Some(i) = params.iter().position(|p| p == k) else {
                        return Err(abort(
                            Code::EvaluationError,
                            format!("{callee}() got an unexpected keyword argument '{k}'"),
                            e.span,
                        ));
                    };
                    slots[i] = Some(self.eval(e)?);
                }
                Arg::Star(e) => {
                    return Err(abort(
                        Code::EvaluationError,
                        format!("argument unpacking is not supported for {callee}()"),
                        e.span,
                    ))
                }
            }
        }
        let _ = span;
        Ok(params
            .iter()
            .zip(slots)
            .filter_map(|(p, v)| v.map(|v| (p.to_string(), v)))
            .collect())
    }
}

/// True iff some other object's center is closer than `d` to `me`'s.
pub fn within_distance_to_any_objs(host: &dyn Host, me: &str, d: f64) -> bool {
    let Some(mine) = host.object(me) else { return false };
    host.object_names()
        .iter()
        .filter(|n| n.as_str() != me)
        .filter_map(|n| host.object(n))
        .any(|o| o.position.distance(mine.position) < d)
}
