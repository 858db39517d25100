//! GeoJSON export of trajectories, their verdicts and the subgoal nodes.
//! Coordinates are `[lon, lat]` as GeoJSON requires.

use std::collections::HashMap;

use geojson::{Feature, FeatureCollection, Geometry, JsonObject, Value};
use serde_json::json;

use crate::detector::TrajectoryReport;
use crate::graph::SubgoalGraph;
use crate::traj::Trajectory;

/// Meters per degree of latitude.
const M_PER_DEG_LAT: f64 = 111_320.0;

fn feature(geometry: Value, properties: JsonObject) -> Feature {
    Feature {
        bbox: None,
        geometry: Some(Geometry::new(geometry)),
        id: None,
        properties: Some(properties),
        foreign_members: None,
    }
}

fn props(v: serde_json::Value) -> JsonObject {
    match v {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("properties are built from object literals"),
    }
}

/// One LineString per trajectory with `{id, label, verdict, stage}`; verdict
/// and stage are null for trajectories without a report. Trajectories with
/// fewer than two points are skipped (a LineString needs two). With a graph,
/// every node becomes a Point with `radius` in meters and the normalized
/// radius in `radius_norm`.
pub fn to_geojson(trajs: &[Trajectory], reports: &[TrajectoryReport], graph: Option<&SubgoalGraph>) -> FeatureCollection {
    let by_id: HashMap<&str, &TrajectoryReport> = reports.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut features = Vec::new();
    for t in trajs.iter().filter(|t| t.points.len() >= 2) {
        let line = t.points.iter().map(|p| vec![p.lon, p.lat]).collect();
        let r = by_id.get(t.id.as_str());
        let p = json!({
            "id": t.id,
            "label": t.label,
            "verdict": r.map(|r| if r.is_anomaly { "anomalous" } else { "normal" }),
            "stage": r.map(|r| r.stage.as_str()),
        });
        features.push(feature(Value::LineString(line), props(p)));
    }
    if let Some(g) = graph {
        // normalized units span 2 over the bbox height
        let m_per_unit = 0.5 * (g.bbox.lat_max - g.bbox.lat_min) * M_PER_DEG_LAT;
        for n in g.nodes() {
            let (lat, lon) = g.bbox.denormalize(n.center);
            let p = json!({
                "node": n.id,
                "kind": n.kind,
                "radius": n.radius * m_per_unit,
                "radius_norm": n.radius,
            });
            features.push(feature(Value::Point(vec![lon, lat]), props(p)));
        }
    }
    FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    }
}
