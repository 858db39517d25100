//! Synthetic goal-directed worlds: agents walk fixed node routes on a small
//! grid, each leg bent by smooth corridor noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{lerp, Vec2};
use crate::graph::{GraphParams, NodeKind, SubgoalGraph, SubgoalNode};
use crate::segment::subgoal_hits;
use crate::traj::{normalize, BoundingBox, GeoPoint, Label, Trajectory};

/// Node position in grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldNode {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldRoute {
    pub nodes: Vec<usize>,
    pub weight: f64,
    /// Peak sideways corridor offset, in cells.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Grid cell size in degrees.
    pub cell_deg: f64,
    pub nodes: Vec<WorldNode>,
    pub routes: Vec<WorldRoute>,
    /// Per-point Gaussian jitter, in cells.
    pub jitter: f64,
    /// Inclusive range of points per grid cell of leg length.
    pub points_per_cell: (usize, usize),
    pub n_trajectories: usize,
    pub seed: u64,
    /// Region radius of the ground-truth graph, normalized frame.
    pub node_radius: f64,
    /// Bounding-box margin as a share of the node span.
    pub margin: f64,
    pub id_prefix: String,
}

fn node(name: &str, x: f64, y: f64, kind: NodeKind) -> WorldNode {
    WorldNode {
        name: name.into(),
        x,
        y,
        kind,
    }
}

fn route(nodes: &[usize], weight: f64, noise: f64) -> WorldRoute {
    WorldRoute {
        nodes: nodes.to_vec(),
        weight,
        noise,
    }
}

impl WorldSpec {
    fn base(nodes: Vec<WorldNode>, routes: Vec<WorldRoute>, n: usize, seed: u64) -> Self {
        Self {
            origin_lat: 30.66,
            origin_lon: 104.06,
            cell_deg: 0.04,
            nodes,
            routes,
            jitter: 0.01,
            points_per_cell: (12, 20),
            n_trajectories: n,
            seed,
            node_radius: 0.08,
            margin: 0.1,
            id_prefix: "w".into(),
        }
    }

    /// Four corner destinations joined through an inner square of four
    /// turning points; six routes that share corridors pairwise.
    pub fn default_world(n: usize, seed: u64) -> Self {
        use NodeKind::{Destination as D, TurningPoint as T};
        let nodes = vec![
            node("A", 0.0, 0.0, D),
            node("B", 3.0, 0.0, D),
            node("C", 0.0, 3.0, D),
            node("D", 3.0, 3.0, D),
            node("E", 1.0, 1.0, T),
            node("F", 2.0, 1.0, T),
            node("G", 1.0, 2.0, T),
            node("H", 2.0, 2.0, T),
        ];
        let noise = 0.06;
        let routes = vec![
            route(&[0, 4, 6, 2], 1.0, noise),
            route(&[0, 4, 5, 1], 1.0, noise),
            route(&[3, 7, 6, 2], 1.0, noise),
            route(&[3, 7, 5, 1], 1.0, noise),
            route(&[1, 5, 4, 0], 1.0, noise),
            route(&[2, 6, 7, 3], 1.0, noise),
        ];
        Self::base(nodes, routes, n, seed)
    }

    /// One start, one fork, two destinations; the left branch is preferred.
    pub fn y_world(n: usize, seed: u64) -> Self {
        use NodeKind::{Destination as D, TurningPoint as T};
        let nodes = vec![
            node("S", 0.0, 0.0, D),
            node("F", 0.0, 1.0, T),
            node("D1", -0.7, 1.7, D),
            node("D2", 0.7, 1.7, D),
        ];
        let routes = vec![route(&[0, 1, 2], 0.7, 0.04), route(&[0, 1, 3], 0.3, 0.04)];
        Self {
            id_prefix: "y".into(),
            ..Self::base(nodes, routes, n, seed)
        }
    }

    /// Nine nodes on a 3x3 grid, numbered 1..9 as in the classic route
    /// switching picture (id = number - 1); normal routes 7-6-5-2-1 and 7-8-9.
    pub fn fig3_world(n: usize, seed: u64) -> Self {
        use NodeKind::{Destination as D, TurningPoint as T};
        let at = |k: usize| -> (f64, f64) {
            match k {
                1 => (0.0, 2.0),
                2 => (1.0, 2.0),
                3 => (2.0, 2.0),
                4 => (2.0, 1.0),
                5 => (1.0, 1.0),
                6 => (0.0, 1.0),
                7 => (0.0, 0.0),
                8 => (1.0, 0.0),
                _ => (2.0, 0.0),
            }
        };
        let nodes = (1..=9)
            .map(|k| {
                let (x, y) = at(k);
                let kind = if matches!(k, 1 | 7 | 9) { D } else { T };
                node(&k.to_string(), x, y, kind)
            })
            .collect();
        let routes = vec![route(&[6, 5, 4, 1, 0], 1.0, 0.04), route(&[6, 7, 8], 1.0, 0.04)];
        Self {
            id_prefix: "f".into(),
            ..Self::base(nodes, routes, n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.routes.is_empty() {
            return Err(Error::param("world needs nodes and routes"));
        }
        if !(self.cell_deg > 0.0) || !(self.margin >= 0.0) || !(self.node_radius > 0.0) {
            return Err(Error::param("cell_deg and node_radius must be positive, margin non-negative"));
        }
        if self.jitter < 0.0 || self.points_per_cell.0 == 0 || self.points_per_cell.0 > self.points_per_cell.1 {
            return Err(Error::param("invalid jitter or points_per_cell"));
        }
        for (i, r) in self.routes.iter().enumerate() {
            if r.nodes.len() < 2 {
                return Err(Error::param(format!("route {i} needs at least 2 nodes")));
            }
            if let Some(&bad) = r.nodes.iter().find(|&&n| n >= self.nodes.len()) {
                return Err(Error::param(format!("route {i} references unknown node {bad}")));
            }
            if r.nodes.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::param(format!("route {i} repeats a node")));
            }
            if !(r.weight > 0.0) || r.noise < 0.0 {
                return Err(Error::param(format!("route {i} needs positive weight and non-negative noise")));
            }
        }
        Ok(())
    }

    fn to_geo(&self, p: Vec2) -> Result<GeoPoint> {
        GeoPoint::new(self.origin_lat + p[1] * self.cell_deg, self.origin_lon + p[0] * self.cell_deg)
    }

    /// Node span plus the relative margin on every side.
    pub fn bbox(&self) -> Result<BoundingBox> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for n in &self.nodes {
            x0 = x0.min(n.x);
            x1 = x1.max(n.x);
            y0 = y0.min(n.y);
            y1 = y1.max(n.y);
        }
        let mx = ((x1 - x0) * self.margin).max(self.margin);
        let my = ((y1 - y0) * self.margin).max(self.margin);
        let lo = self.to_geo([x0 - mx, y0 - my])?;
        let hi = self.to_geo([x1 + mx, y1 + my])?;
        BoundingBox::new(lo.lat, hi.lat, lo.lon, hi.lon)
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: WorldSpec,
    pub bbox: BoundingBox,
    /// Ground-truth graph; edges count the transitions of the generated set.
    pub graph: SubgoalGraph,
    pub trajectories: Vec<Trajectory>,
    /// Route index of each trajectory.
    pub route_of: Vec<usize>,
}

/// Smooth sideways offset vanishing at both ends of a leg.
fn corridor(coef: &[f64; 3], f: f64) -> f64 {
    coef.iter()
        .enumerate()
        .map(|(m, c)| c * ((m + 1) as f64 * std::f64::consts::PI * f).sin())
        .sum()
}

fn walk<R: Rng>(spec: &WorldSpec, r: &WorldRoute, rng: &mut R) -> Result<Vec<Vec2>> {
    let jitter = Normal::new(0.0, spec.jitter).map_err(|e| Error::param(e.to_string()))?;
    let mut pts = Vec::new();
    let n_legs = r.nodes.len() - 1;
    for (k, w) in r.nodes.windows(2).enumerate() {
        let a = [spec.nodes[w[0]].x, spec.nodes[w[0]].y];
        let b = [spec.nodes[w[1]].x, spec.nodes[w[1]].y];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let per_cell = rng.random_range(spec.points_per_cell.0..=spec.points_per_cell.1);
        let n = ((len * per_cell as f64).round() as usize).max(2);
        // coefficients shrink with frequency so the bend stays smooth
        let coef = [
            r.noise * rng.random_range(-1.0..=1.0),
            r.noise * rng.random_range(-1.0..=1.0) / 2.0,
            r.noise * rng.random_range(-1.0..=1.0) / 3.0,
        ];
        let normal = [-(b[1] - a[1]) / len, (b[0] - a[0]) / len];
        let last = if k + 1 == n_legs { n } else { n - 1 };
        for i in 0..=last {
            let f = i as f64 / n as f64;
            let off = corridor(&coef, f);
            let mut p = lerp(a, b, f);
            p[0] += normal[0] * off;
            p[1] += normal[1] * off;
            if spec.jitter > 0.0 {
                p[0] += jitter.sample(rng);
                p[1] += jitter.sample(rng);
            }
            pts.push(p);
        }
    }
    Ok(pts)
}

pub fn synth_world(spec: &WorldSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let bbox = spec.bbox()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_w: f64 = spec.routes.iter().map(|r| r.weight).sum();
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    let mut route_of = Vec::with_capacity(spec.n_trajectories);
    for i in 0..spec.n_trajectories {
        let mut u = rng.random::<f64>() * total_w;
        let mut ri = spec.routes.len() - 1;
        for (j, r) in spec.routes.iter().enumerate() {
            if u < r.weight {
                ri = j;
                break;
            }
            u -= r.weight;
        }
        let xy = walk(spec, &spec.routes[ri], &mut rng)?;
        let t0 = 1_700_000_000 + 3600 * i as i64;
        let points = xy
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let g = spec.to_geo(p)?;
                GeoPoint::with_time(g.lat, g.lon, Some(t0 + 10 * k as i64))
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory::new(format!("{}{i:05}", spec.id_prefix), points, Label::Normal));
        route_of.push(ri);
    }

    let params = GraphParams {
        radius: spec.node_radius,
        ..GraphParams::default()
    };
    let nodes = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(id, n)| {
            let g = spec.to_geo([n.x, n.y])?;
            Ok(SubgoalNode {
                id,
                center: bbox.normalize_point(&g, false)?,
                radius: spec.node_radius,
                kind: n.kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut graph = SubgoalGraph::from_parts(params, bbox, nodes, BTreeMap::new())?;
    let mut edges = BTreeMap::new();
    for t in &trajectories {
        let pts = normalize(&t.points, &bbox, true)?;
        for w in subgoal_hits(&pts, &graph).windows(2) {
            *edges.entry((w[0].node, w[1].node)).or_insert(0) += 1;
        }
    }
    graph.set_edges(edges);
    Ok(SynthWorld {
        spec: spec.clone(),
        bbox,
        graph,
        trajectories,
        route_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::segment::{segment_by_graph, subgoal_sequence};

    fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let f = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        ((p[0] - a[0] - f * dx).powi(2) + (p[1] - a[1] - f * dy).powi(2)).sqrt()
    }

    #[test]
    fn zero_noise_lies_on_route() {
        let mut spec = WorldSpec::default_world(30, 1);
        spec.jitter = 0.0;
        for r in &mut spec.routes {
            r.noise = 0.0;
        }
        let w = synth_world(&spec).unwrap();
        for (t, &ri) in w.trajectories.iter().zip(&w.route_of) {
            let corners: Vec<Vec2> = spec.routes[ri]
                .nodes
                .iter()
                .map(|&n| [spec.origin_lon + spec.nodes[n].x * 0.04, spec.origin_lat + spec.nodes[n].y * 0.04])
                .collect();
            for p in &t.points {
                let d = corners
                    .windows(2)
                    .map(|c| seg_dist([p.lon, p.lat], c[0], c[1]))
                    .fold(f64::INFINITY, f64::min);
                assert!(d < 1e-12, "{} off route by {d}", t.id);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synth_world(&WorldSpec::default_world(10, 3)).unwrap();
        let b = synth_world(&WorldSpec::default_world(10, 3)).unwrap();
        let c = synth_world(&WorldSpec::default_world(10, 4)).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn rejects_bad_routes() {
        let mut spec = WorldSpec::y_world(5, 0);
        spec.routes[0].nodes = vec![0, 9];
        assert!(synth_world(&spec).is_err());
        spec.routes[0].nodes = vec![0];
        assert!(synth_world(&spec).is_err());
    }

    #[test]
    fn y_world_graph_is_recovered() {
        let w = synth_world(&WorldSpec::y_world(200, 5)).unwrap();
        let built = build_graph(&w.trajectories, &GraphParams::default(), &w.bbox).unwrap();
        assert_eq!(built.n_nodes(), w.graph.n_nodes());
        // match each true node to its nearest built node; the map must be a bijection
        let mut map = vec![usize::MAX; w.graph.n_nodes()];
        for t in w.graph.nodes() {
            let b = built.nearest_node(t.center).expect("true node has a built counterpart");
            assert!(crate::geom::dist(built.node(b).unwrap().center, t.center) < t.radius);
            map[t.id] = b;
        }
        let mut seen = map.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), map.len());
        let mapped: std::collections::BTreeSet<(usize, usize)> = w.graph.edges().keys().map(|&(u, v)| (map[u], map[v])).collect();
        let built_edges: std::collections::BTreeSet<(usize, usize)> = built.edges().keys().copied().collect();
        assert_eq!(mapped, built_edges);
    }

    #[test]
    fn default_world_graph_is_recovered() {
        let w = synth_world(&WorldSpec::default_world(300, 6)).unwrap();
        let built = build_graph(&w.trajectories, &GraphParams::default(), &w.bbox).unwrap();
        assert_eq!(built.n_nodes(), 8);
        for t in w.graph.nodes() {
            let b = built.nearest_node(t.center).unwrap();
            assert!(crate::geom::dist(built.node(b).unwrap().center, t.center) < t.radius);
        }
    }

    #[test]
    fn fig3_segmentation_matches_route() {
        let spec = WorldSpec::fig3_world(60, 7);
        let w = synth_world(&spec).unwrap();
        for (t, &ri) in w.trajectories.iter().zip(&w.route_of) {
            assert_eq!(subgoal_sequence(t, &w.graph, &w.bbox).unwrap(), spec.routes[ri].nodes);
            let seg = segment_by_graph(t, &w.graph, &w.bbox, 16).unwrap();
            assert_eq!(seg.n_legs(), spec.routes[ri].nodes.len() - 1);
        }
        assert!(w.graph.has_edge(6, 5) && w.graph.has_edge(7, 8));
        assert!(!w.graph.has_edge(7, 4));
    }
}
