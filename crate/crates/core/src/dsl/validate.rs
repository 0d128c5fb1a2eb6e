//! Name resolution and a light type check over a parsed program.

use std::collections::{BTreeMap, BTreeSet};

use super::ast::*;
use super::diagnostic::{Code, Diagnostic, Span};

#[derive(Debug, Clone, PartialEq)]
pub enum Ty {
    Any,
    Num,
    Bool,
    Str,
    NoneT,
    List(Box<Ty>),
    Point,
    Polyline,
    Lane,
    Intersection,
    Maneuver,
    ManeuverType,
    ManeuverTypeNs,
    Region,
    Object,
    Network,
    GlobalParams,
    Behavior,
    Action,
}

impl Ty {
    pub fn name(&self) -> String {
        match self {
            Ty::Any => "value".into(),
            Ty::Num => "number".into(),
            Ty::Bool => "bool".into(),
            Ty::Str => "str".into(),
            Ty::NoneT => "NoneType".into(),
            Ty::List(_) => "list".into(),
            Ty::Point => "OrientedPoint".into(),
            Ty::Polyline => "PolylineRegion".into(),
            Ty::Lane => "Lane".into(),
            Ty::Intersection => "Intersection".into(),
            Ty::Maneuver => "Maneuver".into(),
            Ty::ManeuverType | Ty::ManeuverTypeNs => "ManeuverType".into(),
            Ty::Region => "Region".into(),
            Ty::Object => "Object".into(),
            Ty::Network => "Network".into(),
            Ty::GlobalParams => "globalParameters".into(),
            Ty::Behavior => "Behavior".into(),
            Ty::Action => "Action".into(),
        }
    }

    fn accepts(&self, actual: &Ty) -> bool {
        match (self, actual) {
            (Ty::Any, _) | (_, Ty::Any) => true,
            (Ty::List(a), Ty::List(b)) => a.accepts(b),
            (a, b) => a == b,
        }
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Ty::Num | Ty::Any)
    }

    /// Types `distance to` and `in` can measure against.
    fn is_spatial(&self) -> bool {
        matches!(
            self,
            Ty::Any | Ty::Point | Ty::Object | Ty::Lane | Ty::Intersection | Ty::Region | Ty::Polyline
        )
    }
}

/// Attribute table for the built-in value types.
pub fn attribute_type(base: &Ty, attr: &str) -> Option<Ty> {
    use Ty::*;
    let t = match (base, attr) {
        (Any, _) => Any,
        (Network, "intersections") => List(Box::new(Intersection)),
        (Network, "lanes") => List(Box::new(Lane)),
        (Network, "drivableRegion") => Region,
        (Intersection, "is3Way" | "is4Way") => Bool,
        (Intersection, "incomingLanes" | "outgoingLanes") => List(Box::new(Lane)),
        (Intersection, "maneuvers") => List(Box::new(Maneuver)),
        (Intersection, "id") => Str,
        (Lane, "centerline") => Polyline,
        (Lane, "maneuvers") => List(Box::new(Maneuver)),
        (Lane, "width" | "length") => Num,
        (Lane, "isShoulder") => Bool,
        (Lane, "successors" | "predecessors") => List(Box::new(Lane)),
        (Lane, "id") => Str,
        (Maneuver, "type") => ManeuverType,
        (Maneuver, "startLane" | "connectingLane" | "endLane") => Lane,
        (Maneuver, "conflictingManeuvers") => List(Box::new(Maneuver)),
        (Maneuver, "intersection") => Intersection,
        (ManeuverTypeNs, "LEFT_TURN" | "RIGHT_TURN" | "STRAIGHT") => ManeuverType,
        (Polyline, "length") => Num,
        (Point, "x" | "y" | "heading") => Num,
        (Point, "position") => Point,
        (Object, "x" | "y" | "heading" | "speed") => Num,
        (Object, "position") => Point,
        _ => return None,
    };
    Some(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalleeKind {
    Function,
    Behavior,
    Action,
}

/// Signature of a builtin callable. `params` are (name, type, required).
#[derive(Debug, Clone)]
pub struct BuiltinSig {
    pub kind: CalleeKind,
    pub params: Vec<(&'static str, Ty, bool)>,
    pub returns: Ty,
}

/// Names visible to every program: builtin functions, behaviors, actions, and globals.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    pub callables: BTreeMap<&'static str, BuiltinSig>,
    pub globals: BTreeMap<&'static str, Ty>,
}

impl SymbolTable {
    pub fn standard() -> Self {
        use Ty::*;
        let sig = |kind, params: Vec<(&'static str, Ty, bool)>, returns| BuiltinSig { kind, params, returns };
        let mut callables = BTreeMap::new();
        // Uniform and filter are special-cased in the checker.
        callables.insert("Uniform", sig(CalleeKind::Function, vec![], Any));
        callables.insert("filter", sig(CalleeKind::Function, vec![], Any));
        callables.insert(
            "VerifaiRange",
            sig(CalleeKind::Function, vec![("low", Num, true), ("high", Num, true)], Num),
        );
        callables.insert("localPath", sig(CalleeKind::Function, vec![("path", Str, true)], Str));
        callables.insert(
            "withinDistanceToAnyObjs",
            sig(CalleeKind::Function, vec![("obj", Object, true), ("distance", Num, true)], Bool),
        );
        callables.insert(
            "FollowTrajectoryBehavior",
            sig(
                CalleeKind::Behavior,
                vec![("target_speed", Num, false), ("trajectory", List(Box::new(Lane)), true)],
                Behavior,
            ),
        );
        callables.insert(
            "FollowLaneBehavior",
            sig(CalleeKind::Behavior, vec![("target_speed", Num, false)], Behavior),
        );
        callables.insert(
            "CrossingBehavior",
            sig(
                CalleeKind::Behavior,
                vec![("reference", Object, true), ("min_speed", Num, false), ("threshold", Num, false)],
                Behavior,
            ),
        );
        callables.insert("WaitBehavior", sig(CalleeKind::Behavior, vec![], Behavior));
        callables.insert("SetBrakeAction", sig(CalleeKind::Action, vec![("brake", Num, true)], Action));
        callables.insert(
            "SetThrottleAction",
            sig(CalleeKind::Action, vec![("throttle", Num, true)], Action),
        );
        let mut globals = BTreeMap::new();
        globals.insert("network", Network);
        globals.insert("globalParameters", GlobalParams);
        globals.insert("ManeuverType", ManeuverTypeNs);
        SymbolTable { callables, globals }
    }
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::standard()
    }
}

pub const KNOWN_PROPERTIES: &[&str] = &["blueprint", "behaviour", "behavior", "heading", "regionContainedIn"];

#[derive(Clone)]
enum Binding {
    Value(Ty),
    UserBehavior(Vec<String>),
}

struct Checker<'a> {
    symbols: &'a SymbolTable,
    params: BTreeMap<String, Ty>,
    /// Params visible at the current point (top-level is sequential).
    visible_params: BTreeSet<String>,
    scopes: Vec<BTreeMap<String, Binding>>,
    in_behavior: bool,
    ego_visible: bool,
    diagnostics: Vec<Diagnostic>,
}

pub fn validate(program: &ScenarioProgram, symbols: &SymbolTable) -> Vec<Diagnostic> {
    let mut c = Checker {
        symbols,
        params: BTreeMap::new(),
        visible_params: BTreeSet::new(),
        scopes: vec![BTreeMap::new()],
        in_behavior: false,
        ego_visible: false,
        diagnostics: Vec::new(),
    };
    c.check_program(program);
    c.diagnostics
}

impl Checker<'_> {
    fn err(&mut self, code: Code, message: String, span: Span) {
        self.diagnostics.push(Diagnostic::error(code, message, Some(span)));
    }

    fn lookup(&self, name: &str) -> Option<Binding> {
        for scope in self.scopes.iter().rev() {
            if let Some(b) = scope.get(name) {
                return Some(b.clone());
            }
        }
        None
    }

    fn define(&mut self, name: &str, b: Binding) {
        self.scopes.last_mut().unwrap().insert(name.to_string(), b);
    }

    fn check_program(&mut self, program: &ScenarioProgram) {
        let mut seen_params = BTreeSet::new();
        let mut seen_behaviors = BTreeSet::new();
        let mut seen_objects = BTreeSet::new();
        for s in &program.statements {
            let dup = match &s.node {
                StmtKind::Param { name, .. } => (!seen_params.insert(name.clone())).then(|| ("param", name)),
                StmtKind::Behavior(b) => (!seen_behaviors.insert(b.name.clone())).then(|| ("behavior", &b.name)),
                StmtKind::Object(o) => (!seen_objects.insert(o.name.clone())).then(|| ("object", &o.name)),
                _ => None,
            };
            if let Some((what, name)) = dup {
                self.err(Code::DuplicateDefinition, format!("{what} '{name}' is defined more than once"), s.span);
            }
        }

        // First pass: the full global environment seen by behaviors, properties,
        // requirements and termination conditions.
        let mut global_env: BTreeMap<String, Binding> = BTreeMap::new();
        let mut behavior_defs = Vec::new();
        for s in &program.statements {
            match &s.node {
                StmtKind::Behavior(b) => {
                    global_env.insert(b.name.clone(), Binding::UserBehavior(b.params.clone()));
                    behavior_defs.push(b);
                }
                StmtKind::Object(o) => {
                    global_env.insert(o.name.clone(), Binding::Value(Ty::Object));
                }
                _ => {}
            }
        }
        for b in &behavior_defs {
            self.define(&b.name, Binding::UserBehavior(b.params.clone()));
        }

        // Sequential pass over top-level statements.
        let mut deferred = Vec::new();
        for s in &program.statements {
            match &s.node {
                StmtKind::Param { name, value } => {
                    let t = self.expr(value);
                    self.params.insert(name.clone(), t);
                    self.visible_params.insert(name.clone());
                }
                StmtKind::Model(_) => {}
                StmtKind::Assign { name, value } => {
                    let t = self.expr(value);
                    self.define(name, Binding::Value(t.clone()));
                    global_env.insert(name.clone(), Binding::Value(t));
                }
                StmtKind::Object(o) => {
                    self.placement(&o.placement);
                    self.define(&o.name, Binding::Value(Ty::Object));
                    if o.name == "ego" {
                        self.ego_visible = true;
                    }
                    deferred.push(s);
                }
                _ => deferred.push(s),
            }
        }

        // Everything else sees the complete global environment.
        // A missing ego is reported once, as NoEgoDefined, below.
        self.ego_visible = true;
        self.scopes = vec![global_env];
        for s in deferred {
            match &s.node {
                StmtKind::Object(o) => self.properties(o),
                StmtKind::Behavior(b) => self.behavior(b),
                StmtKind::Require(e) | StmtKind::TerminateWhen(e) => {
                    self.expr(e);
                }
                _ => {}
            }
        }

        let has_ego = program.objects().any(|o| o.name == "ego");
        if !has_ego {
            self.diagnostics.push(Diagnostic::error(
                Code::NoEgoDefined,
                "no object named 'ego' is defined",
                None,
            ));
        }
    }

    fn placement(&mut self, placement: &Placement) {
        match placement {
            Placement::At(e) => {
                let t = self.expr(e);
                if !matches!(t, Ty::Point | Ty::Any) {
                    self.err(
                        Code::TypeMismatch,
                        format!("object position must be an OrientedPoint, not {}", t.name()),
                        e.span,
                    );
                }
            }
            Placement::Offset { anchor, distance, .. } => {
                let t = self.expr(anchor);
                if !matches!(t, Ty::Point | Ty::Object | Ty::Any) {
                    self.err(
                        Code::TypeMismatch,
                        format!("offset anchor must be an OrientedPoint, not {}", t.name()),
                        anchor.span,
                    );
                }
                let d = self.expr(distance);
                if !d.is_numeric() {
                    self.err(Code::TypeMismatch, format!("offset distance must be a number, not {}", d.name()), distance.span);
                }
            }
        }
    }

    fn properties(&mut self, o: &ObjectDecl) {
        for p in &o.properties {
            let span = p.span.0;
            match p.key.as_str() {
                "blueprint" => {
                    let t = self.expr(&p.value);
                    if !Ty::Str.accepts(&t) {
                        self.err(Code::TypeMismatch, format!("blueprint must be a str, not {}", t.name()), p.value.span);
                    }
                }
                "heading" => {
                    let t = self.expr(&p.value);
                    if !t.is_numeric() {
                        self.err(Code::TypeMismatch, format!("heading must be a number, not {}", t.name()), p.value.span);
                    }
                }
                "regionContainedIn" => {
                    let t = self.expr(&p.value);
                    if !matches!(t, Ty::NoneT | Ty::Region | Ty::Lane | Ty::Intersection | Ty::Any) {
                        self.err(
                            Code::TypeMismatch,
                            format!("regionContainedIn must be a region or None, not {}", t.name()),
                            p.value.span,
                        );
                    }
                }
                "behaviour" | "behavior" => self.behavior_invocation(&p.value),
                other => self.err(Code::UnknownProperty, format!("unknown property '{other}'"), span),
            }
        }
    }

    /// The operand of `do` or `with behaviour`.
    fn behavior_invocation(&mut self, e: &Expr) {
        let (name, args) = match &e.node {
            ExprKind::Call(f, args) => match &f.node {
                ExprKind::Name(n) => (n.as_str(), args.as_slice()),
                _ => {
                    self.err(Code::TypeMismatch, "expected a behavior call".into(), e.span);
                    return;
                }
            },
            ExprKind::Name(n) => (n.as_str(), &[][..]),
            _ => {
                self.err(Code::TypeMismatch, "expected a behavior call".into(), e.span);
                return;
            }
        };
        if let Some(Binding::UserBehavior(params)) = self.lookup(name) {
            let sig: Vec<(&str, Ty, bool)> = params.iter().map(|p| (p.as_str(), Ty::Any, true)).collect();
            self.check_args(name, &sig, args, e.span);
            return;
        }
        match self.symbols.callables.get(name) {
            Some(sig) if sig.kind == CalleeKind::Behavior => {
                let sig = sig.params.clone();
                self.check_args(name, &sig, args, e.span);
            }
            _ => self.err(Code::UnknownBehavior, format!("behavior '{name}' is not defined"), e.span),
        }
    }

    fn behavior(&mut self, b: &BehaviorDef) {
        let mut scope = BTreeMap::new();
        scope.insert("self".to_string(), Binding::Value(Ty::Object));
        for p in &b.params {
            scope.insert(p.clone(), Binding::Value(Ty::Any));
        }
        collect_locals(&b.body, &mut scope);
        self.scopes.push(scope);
        let was = self.in_behavior;
        self.in_behavior = true;
        self.block(&b.body);
        self.in_behavior = was;
        self.scopes.pop();
    }

    fn block(&mut self, body: &[Stmt]) {
        for s in body {
            match &s.node {
                StmtKind::Do(e) => self.behavior_invocation(e),
                StmtKind::Take(e) => self.action(e),
                StmtKind::While { condition, body } => {
                    self.expr(condition);
                    self.block(body);
                }
                StmtKind::Assign { value, .. } => {
                    self.expr(value);
                }
                StmtKind::Terminate => {}
                StmtKind::Try { body, interrupts } => {
                    self.block(body);
                    for clause in interrupts {
                        self.expr(&clause.condition);
                        self.block(&clause.handler);
                    }
                }
                _ => self.err(Code::SyntaxError, "statement not allowed inside a behavior".into(), s.span),
            }
        }
    }

    fn action(&mut self, e: &Expr) {
        let Some(name) = e.node.call_name() else {
            self.err(Code::TypeMismatch, "take expects an action call".into(), e.span);
            return;
        };
        let ExprKind::Call(_, args) = &e.node else { unreachable!() };
        match self.symbols.callables.get(name) {
            Some(sig) if sig.kind == CalleeKind::Action => {
                let sig = sig.params.clone();
                self.check_args(name, &sig, args, e.span);
            }
            Some(_) => self.err(Code::TypeMismatch, format!("'{name}' is not an action"), e.span),
            None => self.err(Code::UnknownIdentifier, format!("name '{name}' is not defined"), e.span),
        }
    }

    fn check_args(&mut self, callee: &str, sig: &[(&str, Ty, bool)], args: &[Arg], span: Span) {
        let mut bound: Vec<bool> = vec![false; sig.len()];
        let mut positional = 0;
        for arg in args {
            match arg {
                Arg::Positional(e) => {
                    let t = self.expr(e);
                    if positional >= sig.len() {
                        self.err(
                            Code::TypeMismatch,
                            format!("{callee}() takes {} arguments but more were given", sig.len()),
                            e.span,
                        );
                        continue;
                    }
                    self.expect_arg(callee, sig[positional].0, &sig[positional].1, &t, e.span);
                    bound[positional] = true;
                    positional += 1;
                }
                Arg::Keyword(k, e) => {
                    let t = self.expr(e);
                    match sig.iter().position(|(n, _, _)| n == k) {
                        Some(i) => {
                            if bound[i] {
                                self.err(Code::TypeMismatch, format!("{callee}() got multiple values for argument '{k}'"), e.span);
                            }
                            bound[i] = true;
                            self.expect_arg(callee, k, &sig[i].1, &t, e.span);
                        }
                        None => self.err(
                            Code::TypeMismatch,
                            format!("{callee}() got an unexpected keyword argument '{k}'"),
                            e.span,
                        ),
                    }
                }
                Arg::Star(e) => {
                    self.expr(e);
                    self.err(Code::TypeMismatch, format!("argument unpacking is not supported for {callee}()"), e.span);
                }
            }
        }
        for (i, (name, _, required)) in sig.iter().enumerate() {
            if *required && !bound[i] {
                self.err(Code::TypeMismatch, format!("{callee}() missing required argument '{name}'"), span);
            }
        }
    }

    fn expect_arg(&mut self, callee: &str, param: &str, expected: &Ty, actual: &Ty, span: Span) {
        if !expected.accepts(actual) {
            self.err(
                Code::TypeMismatch,
                format!("{callee}() argument '{param}' must be {}, not {}", expected.name(), actual.name()),
                span,
            );
        }
    }

    fn expr(&mut self, e: &Expr) -> Ty {
        match &e.node {
            ExprKind::Number(_) => Ty::Num,
            ExprKind::Str(_) => Ty::Str,
            ExprKind::Bool(_) => Ty::Bool,
            ExprKind::NoneLit => Ty::NoneT,
            ExprKind::Name(n) => self.name(n, e.span),
            ExprKind::List(items) => {
                let mut elem: Option<Ty> = None;
                for item in items {
                    let t = self.expr(item);
                    elem = Some(match elem {
                        None => t,
                        Some(prev) if prev == t => prev,
                        Some(_) => Ty::Any,
                    });
                }
                Ty::List(Box::new(elem.unwrap_or(Ty::Any)))
            }
            ExprKind::Paren(inner) => self.expr(inner),
            ExprKind::Attribute(base, attr) => {
                if let ExprKind::Name(n) = &base.node {
                    if n == "globalParameters" && self.lookup(n).is_none() {
                        return self.global_param(attr, e.span);
                    }
                }
                let bt = self.expr(base);
                match attribute_type(&bt, attr) {
                    Some(t) => t,
                    None => {
                        self.err(
                            Code::UnknownProperty,
                            format!("'{}' object has no attribute '{attr}'", bt.name()),
                            e.span,
                        );
                        Ty::Any
                    }
                }
            }
            ExprKind::Index(base, idx) => {
                let bt = self.expr(base);
                let it = self.expr(idx);
                if !it.is_numeric() {
                    self.err(Code::TypeMismatch, format!("indices must be numbers, not {}", it.name()), idx.span);
                }
                match bt {
                    Ty::List(elem) => *elem,
                    Ty::Polyline => Ty::Point,
                    Ty::Any => Ty::Any,
                    other => {
                        self.err(Code::TypeMismatch, format!("'{}' object is not subscriptable", other.name()), e.span);
                        Ty::Any
                    }
                }
            }
            ExprKind::Call(f, args) => self.call(f, args, e.span),
            ExprKind::Unary(UnaryOp::Neg, inner) => {
                let t = self.expr(inner);
                if !t.is_numeric() {
                    self.err(Code::TypeMismatch, format!("bad operand type for unary -: {}", t.name()), e.span);
                }
                Ty::Num
            }
            ExprKind::Unary(UnaryOp::Not, inner) => {
                self.expr(inner);
                Ty::Bool
            }
            ExprKind::Binary(op, l, r) => {
                let lt = self.expr(l);
                let rt = self.expr(r);
                match op {
                    BinOp::And | BinOp::Or => Ty::Bool,
                    BinOp::Add if lt == Ty::Str && rt == Ty::Str => Ty::Str,
                    _ => {
                        if !lt.is_numeric() || !rt.is_numeric() {
                            self.err(
                                Code::TypeMismatch,
                                format!(
                                    "unsupported operand types for {}: {} and {}",
                                    op.symbol(),
                                    lt.name(),
                                    rt.name()
                                ),
                                e.span,
                            );
                        }
                        Ty::Num
                    }
                }
            }
            ExprKind::Compare(first, rest) => {
                let mut lt = self.expr(first);
                for (op, rhs) in rest {
                    let rt = self.expr(rhs);
                    match op {
                        CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge => {
                            if !lt.is_numeric() || !rt.is_numeric() {
                                self.err(
                                    Code::TypeMismatch,
                                    format!(
                                        "'{}' not supported between {} and {}",
                                        op.symbol(),
                                        lt.name(),
                                        rt.name()
                                    ),
                                    e.span,
                                );
                            }
                        }
                        CmpOp::In | CmpOp::NotIn => {
                            let ok = match &rt {
                                Ty::List(_) | Ty::Any => true,
                                Ty::Region | Ty::Lane | Ty::Intersection => {
                                    matches!(lt, Ty::Point | Ty::Object | Ty::Any)
                                }
                                _ => false,
                            };
                            if !ok {
                                self.err(
                                    Code::TypeMismatch,
                                    format!("'in' not supported between {} and {}", lt.name(), rt.name()),
                                    e.span,
                                );
                            }
                        }
                        _ => {}
                    }
                    lt = rt;
                }
                Ty::Bool
            }
            ExprKind::Lambda(..) => {
                self.err(Code::TypeMismatch, "lambda is only allowed as the first argument of filter()".into(), e.span);
                Ty::Any
            }
            ExprKind::DistanceTo(target) => {
                if !self.ego_visible && !self.in_behavior {
                    self.err(Code::UnknownIdentifier, "name 'ego' is not defined".into(), e.span);
                }
                let t = self.expr(target);
                self.spatial(&t, target.span);
                Ty::Num
            }
            ExprKind::DistanceFromTo(a, b) => {
                let at = self.expr(a);
                self.spatial(&at, a.span);
                let bt = self.expr(b);
                self.spatial(&bt, b.span);
                Ty::Num
            }
            ExprKind::OrientedPointIn(target) => {
                let t = self.expr(target);
                if !matches!(t, Ty::Polyline | Ty::Lane | Ty::Any) {
                    self.err(
                        Code::TypeMismatch,
                        format!("cannot sample an OrientedPoint in {}", t.name()),
                        target.span,
                    );
                }
                Ty::Point
            }
        }
    }

    fn spatial(&mut self, t: &Ty, span: Span) {
        if !t.is_spatial() {
            self.err(Code::TypeMismatch, format!("cannot measure distance to {}", t.name()), span);
        }
    }

    fn name(&mut self, n: &str, span: Span) -> Ty {
        match self.lookup(n) {
            Some(Binding::Value(t)) => return t,
            Some(Binding::UserBehavior(_)) => return Ty::Behavior,
            None => {}
        }
        if let Some(t) = self.symbols.globals.get(n) {
            return t.clone();
        }
        if self.symbols.callables.contains_key(n) {
            return Ty::Any;
        }
        self.err(Code::UnknownIdentifier, format!("name '{n}' is not defined"), span);
        Ty::Any
    }

    fn global_param(&mut self, attr: &str, span: Span) -> Ty {
        if self.visible_params.contains(attr) {
            self.params.get(attr).cloned().unwrap_or(Ty::Any)
        } else {
            self.err(
                Code::UnknownIdentifier,
                format!("name 'globalParameters.{attr}' is not defined"),
                span,
            );
            Ty::Any
        }
    }

    fn call(&mut self, f: &Expr, args: &[Arg], span: Span) -> Ty {
        let ExprKind::Name(name) = &f.node else {
            self.expr(f);
            self.err(Code::TypeMismatch, "only named functions can be called".into(), f.span);
            for a in args {
                self.expr(a.expr());
            }
            return Ty::Any;
        };
        match self.lookup(name) {
            Some(Binding::UserBehavior(_)) => {
                self.err(
                    Code::TypeMismatch,
                    format!("behavior '{name}' can only be used with 'do' or 'with behaviour'"),
                    span,
                );
                return Ty::Behavior;
            }
            Some(Binding::Value(_)) => {
                self.err(Code::TypeMismatch, format!("'{name}' is not callable"), span);
                return Ty::Any;
            }
            None => {}
        }
        match name.as_str() {
            "Uniform" => return self.uniform(args, span),
            "filter" => return self.filter(args, span),
            _ => {}
        }
        let Some(sig) = self.symbols.callables.get(name.as_str()).cloned() else {
            self.err(Code::UnknownIdentifier, format!("name '{name}' is not defined"), f.span);
            for a in args {
                self.expr(a.expr());
            }
            return Ty::Any;
        };
        match sig.kind {
            CalleeKind::Function => {}
            CalleeKind::Behavior => self.err(
                Code::TypeMismatch,
                format!("behavior '{name}' can only be used with 'do' or 'with behaviour'"),
                span,
            ),
            CalleeKind::Action => {
                self.err(Code::TypeMismatch, format!("action '{name}' can only be used with 'take'"), span)
            }
        }
        self.check_args(name, &sig.params, args, span);
        sig.returns
    }

    fn uniform(&mut self, args: &[Arg], span: Span) -> Ty {
        if args.is_empty() {
            self.err(Code::TypeMismatch, "Uniform() expects at least one argument".into(), span);
            return Ty::Any;
        }
        let mut elem: Option<Ty> = None;
        for a in args {
            let t = match a {
                Arg::Star(e) => match self.expr(e) {
                    Ty::List(t) => *t,
                    Ty::Any => Ty::Any,
                    other => {
                        self.err(Code::TypeMismatch, format!("argument after * must be a list, not {}", other.name()), e.span);
                        Ty::Any
                    }
                },
                Arg::Positional(e) => self.expr(e),
                Arg::Keyword(k, e) => {
                    self.expr(e);
                    self.err(Code::TypeMismatch, format!("Uniform() got an unexpected keyword argument '{k}'"), e.span);
                    Ty::Any
                }
            };
            elem = Some(match elem {
                None => t,
                Some(prev) if prev == t => prev,
                Some(_) => Ty::Any,
            });
        }
        elem.unwrap_or(Ty::Any)
    }

    fn filter(&mut self, args: &[Arg], span: Span) -> Ty {
        let (Some(Arg::Positional(func)), Some(Arg::Positional(coll)), 2) = (args.first(), args.get(1), args.len()) else {
            self.err(Code::TypeMismatch, "filter() expects a lambda and a collection".into(), span);
            for a in args {
                if !matches!(a.expr().node, ExprKind::Lambda(..)) {
                    self.expr(a.expr());
                }
            }
            return Ty::List(Box::new(Ty::Any));
        };
        let ct = self.expr(coll);
        let elem = match &ct {
            Ty::List(t) => (**t).clone(),
            Ty::Any => Ty::Any,
            other => {
                self.err(Code::TypeMismatch, format!("'{}' object is not iterable", other.name()), coll.span);
                Ty::Any
            }
        };
        match &func.node {
            ExprKind::Lambda(param, body) => {
                let mut scope = BTreeMap::new();
                scope.insert(param.clone(), Binding::Value(elem.clone()));
                self.scopes.push(scope);
                self.expr(body);
                self.scopes.pop();
            }
            _ => {
                self.err(Code::TypeMismatch, "filter() expects a lambda as its first argument".into(), func.span);
            }
        }
        Ty::List(Box::new(elem))
    }
}

fn collect_locals(body: &[Stmt], scope: &mut BTreeMap<String, Binding>) {
    for s in body {
        match &s.node {
            StmtKind::Assign { name, .. } => {
                scope.insert(name.clone(), Binding::Value(Ty::Any));
            }
            StmtKind::While { body, .. } => collect_locals(body, scope),
            StmtKind::Try { body, interrupts } => {
                collect_locals(body, scope);
                for c in interrupts {
                    collect_locals(&c.handler, scope);
                }
            }
            _ => {}
        }
    }
}
