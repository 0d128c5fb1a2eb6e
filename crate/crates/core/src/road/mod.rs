//! Road network model: lanes, intersections, typed maneuvers and regions.
//!
//! A [`RoadNetwork`] is immutable once loaded. Every collection is keyed by id
//! in a `BTreeMap`, so iteration order (and therefore sampling) is stable.

pub mod format;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Polygon, Polyline, Region, Vec2};
use format::{MapDocument, FORMAT_VERSION};

/// Turns sharper than this (either way) are typed LEFT_TURN / RIGHT_TURN.
pub const TURN_THRESHOLD_DEG: f64 = 30.0;

const CURVE_SEGMENTS: usize = 16;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dangling lane reference '{lane}' in {context}")]
    DanglingLaneReference { lane: String, context: String },
    #[error("degenerate centerline for lane '{0}'")]
    DegenerateCenterline(String),
    #[error("could not read map file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManeuverType {
    LeftTurn,
    RightTurn,
    Straight,
}

impl ManeuverType {
    pub fn name(self) -> &'static str {
        match self {
            ManeuverType::LeftTurn => "LEFT_TURN",
            ManeuverType::RightTurn => "RIGHT_TURN",
            ManeuverType::Straight => "STRAIGHT",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "LEFT_TURN" => Some(ManeuverType::LeftTurn),
            "RIGHT_TURN" => Some(ManeuverType::RightTurn),
            "STRAIGHT" => Some(ManeuverType::Straight),
            _ => None,
        }
    }

    /// Classifies by the signed heading change from `start` to `end`.
    pub fn classify(start_heading: f64, end_heading: f64) -> Self {
        let turn = normalize_angle(end_heading - start_heading).to_degrees();
        if turn > TURN_THRESHOLD_DEG {
            ManeuverType::LeftTurn
        } else if turn < -TURN_THRESHOLD_DEG {
            ManeuverType::RightTurn
        } else {
            ManeuverType::Straight
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub id: String,
    pub centerline: Polyline,
    pub width: f64,
    pub successors: Vec<String>,
    pub predecessors: Vec<String>,
    pub shoulder: bool,
    /// Set for connecting lanes inside an intersection.
    pub intersection: Option<String>,
    region: Region,
}

impl Lane {
    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn is_connecting(&self) -> bool {
        self.intersection.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maneuver {
    /// Same as the connecting lane id.
    pub id: String,
    pub kind: ManeuverType,
    pub start_lane: String,
    pub connecting_lane: String,
    pub end_lane: String,
    pub intersection: String,
}

#[derive(Debug, Clone)]
pub struct Intersection {
    pub id: String,
    pub boundary: Polygon,
    pub incoming_lanes: Vec<String>,
    pub outgoing_lanes: Vec<String>,
    pub maneuvers: Vec<String>,
    pub arms: usize,
    region: Region,
}

impl Intersection {
    pub fn is_3way(&self) -> bool {
        self.arms == 3
    }

    pub fn is_4way(&self) -> bool {
        self.arms == 4
    }

    pub fn region(&self) -> &Region {
        &self.region
    }
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub name: String,
    pub carla_map: Option<String>,
    lanes: BTreeMap<String, Lane>,
    intersections: BTreeMap<String, Intersection>,
    maneuvers: BTreeMap<String, Maneuver>,
    conflicts: BTreeMap<String, Vec<String>>,
    drivable: Region,
}

/// Maps bundled with the crate, by name.
pub const BUNDLED_MAPS: &[(&str, &str)] = &[
    ("town_cross4", include_str!("../../../../maps/town_cross4.map")),
    ("town_tee3", include_str!("../../../../maps/town_tee3.map")),
    ("town_straight", include_str!("../../../../maps/town_straight.map")),
];

pub fn bundled_map(name: &str) -> Option<&'static str> {
    BUNDLED_MAPS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Loads a map from a path, or a bundled map by name when no such file exists.
pub fn load_network(path_or_name: &str) -> Result<RoadNetwork, MapError> {
    let path = Path::new(path_or_name);
    if !path.exists() {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(path_or_name);
        if let Some(text) = bundled_map(stem) {
            return RoadNetwork::from_text(text);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path_or_name.to_string(),
        source,
    })?;
    RoadNetwork::from_text(&text)
}

fn to_points(raw: &[[f64; 2]]) -> Vec<Vec2> {
    raw.iter().map(|p| Vec2::new(p[0], p[1])).collect()
}

fn quadratic_connector(from: &Polyline, to: &Polyline) -> Vec<Vec2> {
    let p0 = from.last();
    let p2 = to.first();
    let d0 = Vec2::from_heading(from.end_heading());
    let d2 = Vec2::from_heading(to.start_heading());
    let denom = d0.cross(d2);
    if denom.abs() < 1e-9 {
        return vec![p0, p2];
    }
    // p0 + t*d0 = p2 - u*d2
    let t = (p2 - p0).cross(d2) / denom;
    let p1 = p0 + d0 * t;
    (0..=CURVE_SEGMENTS)
        .map(|i| {
            let u = i as f64 / CURVE_SEGMENTS as f64;
            p0 * ((1.0 - u) * (1.0 - u)) + p1 * (2.0 * u * (1.0 - u)) + p2 * (u * u)
        })
        .collect()
}

fn count_arms(headings: &[f64]) -> usize {
    let mut clusters: Vec<f64> = Vec::new();
    for &h in headings {
        let near = clusters
            .iter()
            .any(|&c| normalize_angle(h - c).abs() <= TURN_THRESHOLD_DEG.to_radians());
        if !near {
            clusters.push(h);
        }
    }
    clusters.len()
}

impl RoadNetwork {
    pub fn from_text(text: &str) -> Result<Self, MapError> {
        let doc = MapDocument::parse(text).map_err(|e| MapError::Schema(e.message().to_string()))?;
        Self::from_document(&doc)
    }

    pub fn from_document(doc: &MapDocument) -> Result<Self, MapError> {
        if doc.format_version != FORMAT_VERSION {
            return Err(MapError::Schema(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let declared: BTreeSet<&str> = doc.lanes.iter().map(|l| l.id.as_str()).collect();
        if declared.len() != doc.lanes.len() {
            return Err(MapError::Schema("duplicate lane id".into()));
        }
        let check = |lane: &str, context: String| -> Result<(), MapError> {
            if declared.contains(lane) {
                Ok(())
            } else {
                Err(MapError::DanglingLaneReference {
                    lane: lane.to_string(),
                    context,
                })
            }
        };

        // Explicit centerlines first, then generated connectors.
        let mut centerlines: BTreeMap<String, Polyline> = BTreeMap::new();
        for lane in &doc.lanes {
            if lane.width <= 0.0 {
                return Err(MapError::Schema(format!("lane '{}' has non-positive width", lane.id)));
            }
            for s in &lane.successors {
                check(s, format!("successors of lane '{}'", lane.id))?;
            }
            match (&lane.centerline, &lane.curve) {
                (Some(pts), None) => {
                    let pts = to_points(pts);
                    let degenerate =
                        pts.len() < 2 || pts.windows(2).any(|w| w[0].distance(w[1]) < 1e-9);
                    if degenerate {
                        return Err(MapError::DegenerateCenterline(lane.id.clone()));
                    }
                    centerlines.insert(lane.id.clone(), Polyline::new(pts));
                }
                (None, Some(curve)) => {
                    check(&curve.from, format!("curve of lane '{}'", lane.id))?;
                    check(&curve.to, format!("curve of lane '{}'", lane.id))?;
                }
                _ => {
                    return Err(MapError::Schema(format!(
                        "lane '{}' needs exactly one of centerline or curve",
                        lane.id
                    )))
                }
            }
        }
        for lane in &doc.lanes {
            if let Some(curve) = &lane.curve {
                let from = centerlines.get(&curve.from).ok_or_else(|| {
                    MapError::Schema(format!("curve source '{}' is itself a curve", curve.from))
                })?;
                let to = centerlines.get(&curve.to).ok_or_else(|| {
                    MapError::Schema(format!("curve target '{}' is itself a curve", curve.to))
                })?;
                let pts = quadratic_connector(from, to);
                if pts.windows(2).any(|w| w[0].distance(w[1]) < 1e-9) {
                    return Err(MapError::DegenerateCenterline(lane.id.clone()));
                }
                centerlines.insert(lane.id.clone(), Polyline::new(pts));
            }
        }

        let mut successors: BTreeMap<String, BTreeSet<String>> = doc
            .lanes
            .iter()
            .map(|l| (l.id.clone(), l.successors.iter().cloned().collect()))
            .collect();
        let mut connecting_owner: BTreeMap<String, String> = BTreeMap::new();
        let mut maneuvers = BTreeMap::new();
        let mut intersections = BTreeMap::new();
        for inter in &doc.intersections {
            let ring = to_points(&inter.boundary);
            let boundary = Polygon::new(ring);
            if !boundary.is_simple() {
                return Err(MapError::Schema(format!(
                    "boundary of intersection '{}' is not a simple ring",
                    inter.id
                )));
            }
            let mut incoming = BTreeSet::new();
            let mut outgoing = BTreeSet::new();
            let mut ids = Vec::new();
            for m in &inter.maneuvers {
                let ctx = format!("maneuver of intersection '{}'", inter.id);
                check(&m.start, ctx.clone())?;
                check(&m.connecting, ctx.clone())?;
                check(&m.end, ctx)?;
                let kind = ManeuverType::classify(
                    centerlines[&m.start].end_heading(),
                    centerlines[&m.end].start_heading(),
                );
                successors.get_mut(&m.start).unwrap().insert(m.connecting.clone());
                successors.get_mut(&m.connecting).unwrap().insert(m.end.clone());
                connecting_owner.insert(m.connecting.clone(), inter.id.clone());
                incoming.insert(m.start.clone());
                outgoing.insert(m.end.clone());
                ids.push(m.connecting.clone());
                let prev = maneuvers.insert(
                    m.connecting.clone(),
                    Maneuver {
                        id: m.connecting.clone(),
                        kind,
                        start_lane: m.start.clone(),
                        connecting_lane: m.connecting.clone(),
                        end_lane: m.end.clone(),
                        intersection: inter.id.clone(),
                    },
                );
                if prev.is_some() {
                    return Err(MapError::Schema(format!(
                        "connecting lane '{}' used by more than one maneuver",
                        m.connecting
                    )));
                }
            }
            ids.sort();
            let headings: Vec<f64> = incoming.iter().map(|l| centerlines[l].end_heading()).collect();
            let arms = count_arms(&headings);
            intersections.insert(
                inter.id.clone(),
                Intersection {
                    id: inter.id.clone(),
                    region: Region::new(vec![boundary.clone()]),
                    boundary,
                    incoming_lanes: incoming.into_iter().collect(),
                    outgoing_lanes: outgoing.into_iter().collect(),
                    maneuvers: ids,
                    arms,
                },
            );
        }

        let mut predecessors: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (from, tos) in &successors {
            for to in tos {
                predecessors.entry(to.clone()).or_default().insert(from.clone());
            }
        }

        let mut lanes = BTreeMap::new();
        for lane in &doc.lanes {
            let centerline = centerlines.remove(&lane.id).unwrap();
            let region = Region::new(centerline.buffered_quads(lane.width / 2.0));
            lanes.insert(
                lane.id.clone(),
                Lane {
                    id: lane.id.clone(),
                    centerline,
                    width: lane.width,
                    successors: successors[&lane.id].iter().cloned().collect(),
                    predecessors: predecessors
                        .get(&lane.id)
                        .map(|s| s.iter().cloned().collect())
                        .unwrap_or_default(),
                    shoulder: lane.shoulder,
                    intersection: connecting_owner.get(&lane.id).cloned(),
                    region,
                },
            );
        }

        let mut drivable = Vec::new();
        for lane in lanes.values() {
            drivable.extend(lane.region.polygons.iter().cloned());
        }
        for inter in intersections.values() {
            drivable.push(inter.boundary.clone());
        }

        let mut network = RoadNetwork {
            name: doc.name.clone(),
            carla_map: doc.carla_map.clone(),
            lanes,
            intersections,
            maneuvers,
            conflicts: BTreeMap::new(),
            drivable: Region::new(drivable),
        };
        network.conflicts = network.compute_conflicts();
        Ok(network)
    }

    fn compute_conflicts(&self) -> BTreeMap<String, Vec<String>> {
        let mut out = BTreeMap::new();
        for m in self.maneuvers.values() {
            let mine = &self.lanes[&m.connecting_lane];
            let list = self
                .maneuvers
                .values()
                .filter(|o| o.intersection == m.intersection && o.start_lane != m.start_lane)
                .filter(|o| {
                    let other = &self.lanes[&o.connecting_lane];
                    let reach = (mine.width + other.width) / 2.0;
                    mine.centerline.distance_to_polyline(&other.centerline) < reach - 1e-6
                })
                .map(|o| o.id.clone())
                .collect();
            out.insert(m.id.clone(), list);
        }
        out
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.get(id)
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.values()
    }

    /// Lanes that are not intersection connectors, in id order.
    pub fn road_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.values().filter(|l| !l.is_connecting())
    }

    pub fn intersection(&self, id: &str) -> Option<&Intersection> {
        self.intersections.get(id)
    }

    pub fn intersections(&self) -> impl Iterator<Item = &Intersection> {
        self.intersections.values()
    }

    pub fn maneuver(&self, id: &str) -> Option<&Maneuver> {
        self.maneuvers.get(id)
    }

    pub fn maneuvers(&self) -> impl Iterator<Item = &Maneuver> {
        self.maneuvers.values()
    }

    /// Maneuvers starting on `lane`, in id order.
    pub fn maneuvers_of(&self, lane: &str) -> Vec<&Maneuver> {
        self.maneuvers.values().filter(|m| m.start_lane == lane).collect()
    }

    /// Maneuvers at the same intersection, from a different start lane, whose
    /// lane-width-buffered connecting lanes overlap `m`'s.
    pub fn conflicting_maneuvers(&self, m: &str) -> Vec<&Maneuver> {
        self.conflicts
            .get(m)
            .map(|ids| ids.iter().map(|id| &self.maneuvers[id]).collect())
            .unwrap_or_default()
    }

    pub fn drivable_region(&self) -> &Region {
        &self.drivable
    }

    /// Nearest non-connecting lane to a point.
    pub fn nearest_road_lane(&self, p: Vec2) -> Option<&Lane> {
        self.road_lanes().min_by(|a, b| {
            a.centerline
                .distance_to_point(p)
                .partial_cmp(&b.centerline.distance_to_point(p))
                .unwrap()
        })
    }

    /// Total width of the road lanes (either direction) crossed by the line
    /// through `p` perpendicular to `lane`.
    pub fn road_width_at(&self, lane: &Lane, p: Vec2) -> f64 {
        let s = lane.centerline.project(p);
        let foot = lane.centerline.point_at(s);
        let dir = Vec2::from_heading(foot.heading);
        self.road_lanes()
            .filter(|other| {
                let s2 = other.centerline.project(foot.position);
                let q = other.centerline.point_at(s2);
                let parallel = Vec2::from_heading(q.heading).dot(dir).abs() > (PI / 12.0).cos();
                let interior = s2 > 1e-6 && s2 < other.centerline.length() - 1e-6;
                let on_cross_line = (q.position - foot.position).dot(dir).abs() < 0.5;
                parallel && (interior || other.id == lane.id) && on_cross_line
            })
            .map(|l| l.width)
            .sum()
    }
}

pub fn point_in_region(point: Vec2, region: &Region) -> bool {
    region.contains(point)
}

pub fn distance_to_region(point: Vec2, region: &Region) -> f64 {
    region.distance(point)
}
