use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use scenario_loop::dsl::ast::{ExprKind, StmtKind};
use scenario_loop::dsl::{self, parse, postprocess_generated, preprocess_training, unparse, validate, Code, SymbolTable};

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn listing(name: &str) -> String {
    fs::read_to_string(repo().join("fixtures/listings").join(format!("{name}.scenic"))).unwrap()
}

const LISTINGS: &[&str] = &[
    "right_turn_v1",
    "right_turn_v2",
    "left_turn_ped_v1",
    "left_turn_ped_v2",
    "left_turn_ped_v3",
];

#[test]
fn right_turn_listing_has_expected_shape() {
    let p = parse(&listing("right_turn_v1")).unwrap();
    assert_eq!(p.params().count(), 6);
    let behaviors: Vec<_> = p.behaviors().collect();
    assert_eq!(behaviors.len(), 1);
    assert_eq!(behaviors[0].name, "EgoBehavior");
    let StmtKind::Try { interrupts, .. } = &behaviors[0].body[0].node else { panic!("expected try") };
    assert_eq!(interrupts.len(), 2);
    assert_eq!(p.objects().count(), 2);
    assert!(p.objects().all(|o| o.kind == dsl::ast::ObjectKind::Car));
    assert_eq!(p.requirements().count(), 2);
    assert_eq!(p.terminations().count(), 1);
}

#[test]
fn restart_listing_has_two_sequential_whiles_in_first_handler() {
    let p = parse(&listing("left_turn_ped_v3")).unwrap();
    let b = p.behavior("EgoBehavior").unwrap();
    let try_stmt = b.body.iter().find(|s| matches!(s.node, StmtKind::Try { .. })).unwrap();
    let StmtKind::Try { interrupts, .. } = &try_stmt.node else { unreachable!() };
    let whiles: Vec<_> = interrupts[0]
        .handler
        .iter()
        .filter(|s| matches!(s.node, StmtKind::While { .. }))
        .collect();
    assert_eq!(whiles.len(), 2);
    let StmtKind::While { condition, .. } = &whiles[1].node else { unreachable!() };
    assert!(matches!(condition.node, ExprKind::Unary(dsl::ast::UnaryOp::Not, _)));
}

#[test]
fn all_listings_validate_cleanly() {
    let symbols = SymbolTable::standard();
    for name in LISTINGS {
        let p = parse(&listing(name)).unwrap_or_else(|d| panic!("{name}: {}", d[0]));
        let diags = validate(&p, &symbols);
        assert!(diags.is_empty(), "{name}: {diags:?}");
    }
}

#[test]
fn misspelled_behavior_is_reported_by_name() {
    let src = listing("right_turn_v1").replace(
        "with behaviour FollowTrajectoryBehavior(",
        "with behaviour FolowTrajectoryBehavior(",
    );
    let diags = validate(&parse(&src).unwrap(), &SymbolTable::standard());
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0].code, Code::UnknownBehavior);
    assert!(diags[0].message.contains("FolowTrajectoryBehavior"));
}

#[test]
fn missing_ego_is_reported() {
    let src = listing("right_turn_v1");
    let src: String = {
        let lines: Vec<&str> = src.lines().collect();
        let start = lines.iter().position(|l| l.starts_with("ego = Car")).unwrap();
        lines
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < start || *i > start + 2)
            .map(|(_, l)| *l)
            .collect::<Vec<_>>()
            .join("\n")
    };
    let diags = validate(&parse(&src).unwrap(), &SymbolTable::standard());
    let codes: Vec<_> = diags.iter().map(|d| d.code).collect();
    assert_eq!(codes, vec![Code::NoEgoDefined]);
}

#[test]
fn unknown_identifier_names_the_symbol() {
    let src = "param carla_map = 'Town05'\nego = Car at spot\n";
    let diags = validate(&parse(src).unwrap(), &SymbolTable::standard());
    assert_eq!(diags[0].code, Code::UnknownIdentifier);
    assert_eq!(diags[0].message, "name 'spot' is not defined");
}

#[test]
fn comparing_region_to_number_is_type_mismatch() {
    let src = "lane = Uniform(*network.lanes)\nego = Car at OrientedPoint in lane.centerline\nrequire network.drivableRegion < 3\n";
    let diags = validate(&parse(src).unwrap(), &SymbolTable::standard());
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0].code, Code::TypeMismatch);
}

#[test]
fn unknown_with_property_is_reported() {
    let src = "lane = Uniform(*network.lanes)\nego = Car at OrientedPoint in lane.centerline,\n    with colour 'red'\n";
    let diags = validate(&parse(src).unwrap(), &SymbolTable::standard());
    assert_eq!(diags[0].code, Code::UnknownProperty);
}

#[test]
fn diagnostics_are_deterministic() {
    let src = "x = (\n";
    let a = parse(src).unwrap_err()[0].render();
    let b = parse(src).unwrap_err()[0].render();
    assert_eq!(a, b);
    assert_eq!(a, "SyntaxError: unexpected end of input, expected expression (line 2, col 1)");
}

#[test]
fn listings_round_trip_through_unparse() {
    for name in LISTINGS {
        let p = parse(&listing(name)).unwrap();
        let again = parse(&unparse(&p)).unwrap_or_else(|d| panic!("{name}: {}", d[0]));
        assert_eq!(p, again, "{name}");
    }
}

#[test]
fn pre_and_post_processing_round_trip_listings() {
    for name in LISTINGS {
        let src = listing(name);
        let desc = fs::read_to_string(repo().join("fixtures/listings").join(format!("{name}.txt"))).unwrap();
        let pre = preprocess_training(&src);
        assert!(!pre.contains('#'));
        assert!(!pre.contains("localPath"));
        let post = postprocess_generated(&pre, &desc).unwrap();
        let a = parse(&src).unwrap();
        let b = parse(&post).unwrap();
        assert_eq!(a.statements, b.statements, "{name}");
        assert_eq!(b.docstring.as_deref(), Some(desc.trim()));
    }
}

fn ident() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["alpha", "beta", "lane", "spot", "k", "speed"]).prop_map(str::to_string)
}

fn expr_src() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0u32..1000).prop_map(|n| n.to_string()),
        (0u32..100, 1u32..100).prop_map(|(a, b)| format!("{a}.{b}")),
        ident(),
        Just("True".to_string()),
        Just("None".to_string()),
        "[a-z ]{0,6}".prop_map(|s| format!("'{s}'")),
    ];
    leaf.prop_recursive(4, 32, 4, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop::sample::select(vec!["+", "-", "*", "/", "and", "or", "<", "<=", "==", "is", "in"]))
                .prop_map(|(a, b, op)| format!("{a} {op} {b}")),
            inner.clone().prop_map(|a| format!("({a})")),
            inner.clone().prop_map(|a| format!("-({a})")),
            inner.clone().prop_map(|a| format!("(not {a})")),
            (ident(), ident()).prop_map(|(a, b)| format!("{a}.{b}")),
            (ident(), inner.clone()).prop_map(|(a, b)| format!("{a}[{b}]")),
            prop::collection::vec(inner.clone(), 0..3).prop_map(|v| format!("[{}]", v.join(", "))),
            (ident(), inner.clone(), inner.clone()).prop_map(|(f, a, b)| format!("{f}({a}, key={b})")),
            inner.clone().prop_map(|a| format!("Uniform(*filter(lambda x: x.flag, {a}))")),
            ident().prop_map(|a| format!("distance to {a}")),
            (ident(), ident()).prop_map(|(a, b)| format!("distance from {a} to {b}")),
            ident().prop_map(|a| format!("OrientedPoint in {a}.centerline")),
        ]
    })
}

fn program_src() -> impl Strategy<Value = String> {
    let stmt = prop_oneof![
        (ident(), expr_src()).prop_map(|(n, e)| format!("{n} = {e}")),
        (ident(), expr_src()).prop_map(|(n, e)| format!("param {n} = {e}")),
        expr_src().prop_map(|e| format!("require {e}")),
        expr_src().prop_map(|e| format!("terminate when {e}")),
        (ident(), expr_src(), expr_src()).prop_map(|(n, a, b)| format!("{n} = Car at {a},\n    with heading {b}")),
        (ident(), expr_src(), expr_src()).prop_map(|(n, a, d)| format!("{n} = Pedestrian left of {a} by {d}")),
        (expr_src(), expr_src()).prop_map(|(c, d)| format!(
            "behaviour B(p, q):\n    f = True\n    try:\n        do Inner(p)\n    interrupt when {c}:\n        while {d}:\n            take Act(1)\n        terminate"
        )),
    ];
    prop::collection::vec(stmt, 0..6).prop_map(|v| v.join("\n"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generated_programs_round_trip(src in program_src()) {
        let p = parse(&src).map_err(|d| TestCaseError::fail(format!("{}\n{src}", d[0])))?;
        let text = unparse(&p);
        let again = parse(&text).map_err(|d| TestCaseError::fail(format!("{}\n{text}", d[0])))?;
        prop_assert_eq!(p, again);
    }

    #[test]
    fn preprocess_is_idempotent_and_never_grows(lines in prop::collection::vec(
        prop_oneof![
            Just(String::new()),
            Just("   ".to_string()),
            Just("# comment".to_string()),
            Just("param map = localPath('x/Town05.xodr')".to_string()),
            Just("MODEL = 'vehicle.lincoln.mkz2017'  # old name".to_string()),
            Just("model scenic.simulators.carla.models".to_string()),
            "[a-z]{1,5} = '[#a-z ]{0,5}'".prop_map(|s| s),
            "    [a-z]{1,5} = [0-9]{1,3}   ".prop_map(|s| s),
        ], 0..12)) {
        let src = lines.join("\n");
        let once = preprocess_training(&src);
        prop_assert_eq!(preprocess_training(&once), once.clone());
        prop_assert!(once.lines().count() <= src.lines().count());
    }
}
