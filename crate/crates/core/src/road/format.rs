//! On-disk map schema (`format_version = 1`), see `docs/map-format.md`.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDocument {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub carla_map: Option<String>,
    pub lanes: Vec<LaneDoc>,
    #[serde(default)]
    pub intersections: Vec<IntersectionDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneDoc {
    pub id: String,
    pub width: f64,
    #[serde(default)]
    pub centerline: Option<Vec<[f64; 2]>>,
    /// Generated connector from the end of one lane to the start of another.
    #[serde(default)]
    pub curve: Option<CurveDoc>,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(default)]
    pub shoulder: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveDoc {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionDoc {
    pub id: String,
    pub boundary: Vec<[f64; 2]>,
    pub maneuvers: Vec<ManeuverDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverDoc {
    pub start: String,
    pub connecting: String,
    pub end: String,
}

impl MapDocument {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Rotates every explicit coordinate about the origin.
    pub fn rotate(&mut self, angle: f64) {
        let rot = |p: &mut [f64; 2]| {
            let v = Vec2::new(p[0], p[1]).rotated(angle);
            *p = [v.x, v.y];
        };
        for lane in &mut self.lanes {
            if let Some(pts) = &mut lane.centerline {
                pts.iter_mut().for_each(rot);
            }
        }
        for inter in &mut self.intersections {
            inter.boundary.iter_mut().for_each(rot);
        }
    }
}
