//! Subgoal graph: destination clusters plus frequent turning points, joined by
//! the transitions observed in training trajectories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{angle_between, dist, mean_heading, Vec2};
use crate::segment::subgoal_hits;
use crate::traj::{normalize, BoundingBox, Trajectory};

/// Graph construction parameters. Distances are in the normalized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    /// Turning-point bins need strictly more than this many trajectories.
    pub f_min: usize,
    /// Minimum distance between any two node centers.
    pub d_min: f64,
    /// Node region radius.
    pub radius: f64,
    /// Heading change (degrees) that marks a turning point.
    pub theta_turn: f64,
    /// Points on each side of a vertex used for the mean heading.
    pub window: usize,
    /// Flat-kernel bandwidth for destination clustering.
    pub bandwidth: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            f_min: 10,
            d_min: 0.2,
            radius: 0.08,
            theta_turn: 30.0,
            window: 5,
            bandwidth: 0.15,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_turn > 0.0 && self.theta_turn < 180.0) {
            return Err(Error::param("theta_turn must lie in (0, 180)"));
        }
        if self.window == 0 {
            return Err(Error::param("window must be >= 1"));
        }
        for (name, v) in [("d_min", self.d_min), ("radius", self.radius), ("bandwidth", self.bandwidth)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Destination,
    TurningPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalNode {
    pub id: usize,
    pub center: Vec2,
    pub radius: f64,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalGraph {
    pub params: GraphParams,
    pub bbox: BoundingBox,
    nodes: Vec<SubgoalNode>,
    edges: BTreeMap<(usize, usize), usize>,
}

impl SubgoalGraph {
    /// Builds a graph from explicit nodes; ids must be `0..n` in order.
    pub fn from_parts(
        params: GraphParams,
        bbox: BoundingBox,
        nodes: Vec<SubgoalNode>,
        edges: BTreeMap<(usize, usize), usize>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::param("subgoal graph needs at least one node"));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::param(format!("node ids must be 0..n in order; found {} at {i}", n.id)));
            }
            if !(n.radius > 0.0) {
                return Err(Error::param(format!("node {i} has non-positive radius")));
            }
        }
        for (&(u, v), &c) in &edges {
            if u >= nodes.len() || v >= nodes.len() {
                return Err(Error::UnknownNode(u.max(v)));
            }
            if c == 0 {
                return Err(Error::param(format!("edge {u}->{v} has zero count")));
            }
        }
        Ok(Self {
            params,
            bbox,
            nodes,
            edges,
        })
    }

    pub fn nodes(&self) -> &[SubgoalNode] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: usize) -> Result<&SubgoalNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn edges(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.edges
    }

    pub fn edge_count(&self, from: usize, to: usize) -> usize {
        self.edges.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains_key(&(from, to))
    }

    pub(crate) fn set_edges(&mut self, edges: BTreeMap<(usize, usize), usize>) {
        self.edges = edges;
    }

    /// Node with the closest center if it lies within twice that node's
    /// radius. Equidistant centers resolve to the lower id.
    pub fn nearest_node(&self, p: Vec2) -> Option<usize> {
        let (id, d) = self.closest(p)?;
        (d <= 2.0 * self.nodes[id].radius).then_some(id)
    }

    /// Node whose region (disc of `radius`) contains `p`.
    pub fn region_of(&self, p: Vec2) -> Option<usize> {
        let (id, d) = self.closest(p)?;
        (d <= self.nodes[id].radius).then_some(id)
    }

    fn closest(&self, p: Vec2) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for n in &self.nodes {
            let d = dist(n.center, p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((n.id, d));
            }
        }
        best
    }

    /// Minimum pairwise distance between node centers (infinite for one node).
    pub fn min_node_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.nodes.iter().enumerate() {
            for b in &self.nodes[i + 1..] {
                best = best.min(dist(a.center, b.center));
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    params: GraphParams,
    bbox: BoundingBox,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    x: f64,
    y: f64,
    radius: f64,
    kind: NodeKind,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    from: usize,
    to: usize,
    count: usize,
}

impl From<&SubgoalGraph> for GraphFile {
    fn from(g: &SubgoalGraph) -> Self {
        GraphFile {
            params: g.params.clone(),
            bbox: g.bbox,
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    x: n.center[0],
                    y: n.center[1],
                    radius: n.radius,
                    kind: n.kind,
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|(&(from, to), &count)| EdgeRecord { from, to, count })
                .collect(),
        }
    }
}

impl TryFrom<GraphFile> for SubgoalGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        f.bbox.validate()?;
        let mut nodes: Vec<SubgoalNode> = f
            .nodes
            .into_iter()
            .map(|n| SubgoalNode {
                id: n.id,
                center: [n.x, n.y],
                radius: n.radius,
                kind: n.kind,
            })
            .collect();
        nodes.sort_by_key(|n| n.id);
        let edges = f.edges.into_iter().map(|e| ((e.from, e.to), e.count)).collect();
        SubgoalGraph::from_parts(f.params, f.bbox, nodes, edges)
    }
}

/// A mean-shift mode and the number of input points that converged to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: Vec2,
    pub count: usize,
}

/// Flat-kernel mean shift. Every point climbs to the mean of its neighbours
/// within `bandwidth` until the shift drops below 1e-6; converged modes closer
/// than `bandwidth / 2` are merged. Clusters come back in discovery order.
pub fn cluster_destinations(endpoints: &[Vec2], bandwidth: f64) -> Result<Vec<Cluster>> {
    if !(bandwidth > 0.0) {
        return Err(Error::param("bandwidth must be positive"));
    }
    if endpoints.is_empty() {
        return Err(Error::param("no endpoints to cluster"));
    }
    const MAX_ITERS: usize = 500;

    let mut clusters: Vec<(Vec2, Vec2, usize)> = Vec::new(); // (representative, sum, count)
    for &start in endpoints {
        let mut mode = start;
        for _ in 0..MAX_ITERS {
            let mut sum = [0.0, 0.0];
            let mut n = 0usize;
            for &q in endpoints {
                if dist(q, mode) <= bandwidth {
                    sum[0] += q[0];
                    sum[1] += q[1];
                    n += 1;
                }
            }
            // the start point is always its own neighbour on the first pass
            let next = if n == 0 { mode } else { [sum[0] / n as f64, sum[1] / n as f64] };
            let shift = dist(next, mode);
            mode = next;
            if shift < 1e-6 {
                break;
            }
        }
        match clusters.iter_mut().find(|(rep, _, _)| dist(*rep, mode) < bandwidth / 2.0) {
            Some((_, sum, count)) => {
                sum[0] += mode[0];
                sum[1] += mode[1];
                *count += 1;
            }
            None => clusters.push((mode, mode, 1)),
        }
    }
    Ok(clusters
        .into_iter()
        .map(|(_, sum, count)| Cluster {
            center: [sum[0] / count as f64, sum[1] / count as f64],
            count,
        })
        .collect())
}

/// A spatial bin in which trajectories turn, with the number of distinct
/// trajectories that turned there.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnCandidate {
    pub bin: (i64, i64),
    pub center: Vec2,
    pub frequency: usize,
}

/// Marks vertices whose windowed heading change exceeds `theta_turn` degrees,
/// keeps the sharpest vertex of every run of marked vertices, and counts the
/// trajectories turning in each `bin_size` grid cell. Sorted by frequency
/// (descending) then bin coordinates.
pub fn detect_turning_points(polylines: &[Vec<Vec2>], theta_turn: f64, window: usize, bin_size: f64) -> Result<Vec<TurnCandidate>> {
    if !(theta_turn > 0.0 && theta_turn < 180.0) {
        return Err(Error::param("theta_turn must lie in (0, 180)"));
    }
    if window == 0 || !(bin_size > 0.0) {
        return Err(Error::param("window must be >= 1 and bin size positive"));
    }
    let threshold = theta_turn.to_radians();
    let mut bins: BTreeMap<(i64, i64), (Vec2, usize)> = BTreeMap::new();

    for pts in polylines {
        let n = pts.len();
        if n < 2 * window + 1 {
            continue;
        }
        let change: Vec<Option<f64>> = (0..n)
            .map(|i| {
                if i < window || i + window >= n {
                    return None;
                }
                let h_in = mean_heading(&pts[i - window..=i])?;
                let h_out = mean_heading(&pts[i..=i + window])?;
                let c = angle_between(h_in, h_out);
                (c > threshold).then_some(c)
            })
            .collect();

        let mut picked: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < n {
            if change[i].is_none() {
                i += 1;
                continue;
            }
            let mut best = i;
            let mut j = i;
            while j < n && change[j].is_some() {
                if change[j] > change[best] {
                    best = j;
                }
                j += 1;
            }
            picked.push(best);
            i = j;
        }

        let mut seen: BTreeMap<(i64, i64), Vec2> = BTreeMap::new();
        for idx in picked {
            let p = pts[idx];
            let key = ((p[0] / bin_size).floor() as i64, (p[1] / bin_size).floor() as i64);
            seen.entry(key).or_insert(p);
        }
        for (key, p) in seen {
            let e = bins.entry(key).or_insert(([0.0, 0.0], 0));
            e.0[0] += p[0];
            e.0[1] += p[1];
            e.1 += 1;
        }
    }

    let mut out: Vec<TurnCandidate> = bins
        .into_iter()
        .map(|(bin, (sum, n))| TurnCandidate {
            bin,
            center: [sum[0] / n as f64, sum[1] / n as f64],
            frequency: n,
        })
        .collect();
    out.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.bin.cmp(&b.bin)));
    Ok(out)
}

/// Builds the subgoal graph from normal training trajectories: destination
/// clusters first, then frequent turning points in descending frequency, each
/// kept only if farther than `d_min` from every node already chosen. Edges
/// count the consecutive subgoal pairs of every training trajectory.
pub fn build_graph(trajs: &[Trajectory], params: &GraphParams, bbox: &BoundingBox) -> Result<SubgoalGraph> {
    params.validate()?;
    if trajs.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let polylines: Vec<Vec<Vec2>> = trajs
        .iter()
        .map(|t| normalize(&t.points, bbox, true))
        .collect::<Result<_>>()?;

    let endpoints: Vec<Vec2> = polylines
        .iter()
        .filter(|p| !p.is_empty())
        .flat_map(|p| [p[0], p[p.len() - 1]])
        .collect();
    if endpoints.is_empty() {
        return Err(Error::param("no destinations found"));
    }
    let mut clusters = cluster_destinations(&endpoints, params.bandwidth)?;
    clusters.sort_by_key(|c| std::cmp::Reverse(c.count));

    let mut nodes: Vec<SubgoalNode> = Vec::new();
    let try_add = |center: Vec2, kind: NodeKind, nodes: &mut Vec<SubgoalNode>| {
        if nodes.iter().all(|n| dist(n.center, center) > params.d_min) {
            nodes.push(SubgoalNode {
                id: nodes.len(),
                center,
                radius: params.radius,
                kind,
            });
        }
    };
    for c in &clusters {
        try_add(c.center, NodeKind::Destination, &mut nodes);
    }
    let candidates = detect_turning_points(&polylines, params.theta_turn, params.window, params.d_min / 2.0)?;
    for c in candidates.iter().filter(|c| c.frequency > params.f_min) {
        try_add(c.center, NodeKind::TurningPoint, &mut nodes);
    }

    let mut graph = SubgoalGraph::from_parts(params.clone(), *bbox, nodes, BTreeMap::new())?;
    let mut edges = BTreeMap::new();
    for pts in &polylines {
        let hits = subgoal_hits(pts, &graph);
        for w in hits.windows(2) {
            *edges.entry((w[0].node, w[1].node)).or_insert(0) += 1;
        }
    }
    graph.set_edges(edges);
    log::info!(
        "built subgoal graph: {} nodes ({} destinations), {} edges",
        graph.n_nodes(),
        graph.nodes.iter().filter(|n| n.kind == NodeKind::Destination).count(),
        graph.edges.len()
    );
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{GeoPoint, Label};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_bbox() -> BoundingBox {
        BoundingBox::new(-1.0, 1.0, -1.0, 1.0).unwrap()
    }

    /// Trajectory whose lat/lon equal the normalized coordinates under
    /// `unit_bbox` (x = lon, y = lat).
    fn traj_xy(id: &str, pts: &[Vec2]) -> Trajectory {
        Trajectory::new(id, pts.iter().map(|p| GeoPoint::new(p[1], p[0]).unwrap()).collect(), Label::Normal)
    }

    fn densify(corners: &[Vec2], step: f64) -> Vec<Vec2> {
        let mut out = vec![corners[0]];
        for w in corners.windows(2) {
            let n = (dist(w[0], w[1]) / step).round().max(1.0) as usize;
            for k in 1..=n {
                out.push(crate::geom::lerp(w[0], w[1], k as f64 / n as f64));
            }
        }
        out
    }

    #[test]
    fn identical_endpoints_give_one_cluster() {
        let pts = vec![[0.25, -0.5]; 7];
        let c = cluster_destinations(&pts, 0.1).unwrap();
        assert_eq!(c, vec![Cluster { center: [0.25, -0.5], count: 7 }]);
    }

    #[test]
    fn single_point_is_its_own_center() {
        let c = cluster_destinations(&[[0.1, 0.2]], 0.3).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].center, [0.1, 0.2]);
        assert!(cluster_destinations(&[[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bw = 0.2;
        let centers = [[-0.6, -0.4], [0.5, 0.6]];
        let mut pts = Vec::new();
        let mut blobs: Vec<Vec<Vec2>> = vec![vec![], vec![]];
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..40 {
                let p = [c[0] + rng.random_range(-0.04..0.04), c[1] + rng.random_range(-0.04..0.04)];
                pts.push(p);
                blobs[b].push(p);
            }
        }
        let clusters = cluster_destinations(&pts, bw).unwrap();
        assert_eq!(clusters.len(), 2);
        for (cl, blob) in clusters.iter().zip(&blobs) {
            let mean = [
                blob.iter().map(|p| p[0]).sum::<f64>() / blob.len() as f64,
                blob.iter().map(|p| p[1]).sum::<f64>() / blob.len() as f64,
            ];
            assert!(dist(cl.center, mean) < bw / 2.0);
            assert_eq!(cl.count, 40);
        }
    }

    #[test]
    fn straight_line_has_no_turns() {
        let line = densify(&[[-0.8, -0.8], [0.8, 0.8]], 0.05);
        assert!(detect_turning_points(&[line], 30.0, 5, 0.1).unwrap().is_empty());
    }

    #[test]
    fn right_angle_gives_one_candidate_at_corner() {
        let corner = [0.33, -0.21];
        let l = densify(&[[-0.7, -0.21], corner, [0.33, 0.7]], 0.05);
        let c = detect_turning_points(&[l], 30.0, 5, 0.1).unwrap();
        assert_eq!(c.len(), 1);
        // analytic: the heading flips by 90 degrees exactly at the corner vertex
        assert!(dist(c[0].center, corner) < 1e-12);
        assert_eq!(c[0].bin, ((0.33f64 / 0.1).floor() as i64, (-0.21f64 / 0.1).floor() as i64));
    }

    #[test]
    fn shared_corner_counts_both_trajectories() {
        let a = densify(&[[-0.7, 0.0], [0.0, 0.0], [0.0, 0.7]], 0.05);
        let b = densify(&[[-0.7, 0.0], [0.0, 0.0], [0.0, -0.7]], 0.05);
        let c = detect_turning_points(&[a, b], 30.0, 5, 0.1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].frequency, 2);
    }

    #[test]
    fn straight_route_builds_two_nodes_one_edge() {
        let trajs: Vec<Trajectory> = (0..6)
            .map(|i| traj_xy(&format!("t{i}"), &densify(&[[-0.8, 0.0], [0.8, 0.0]], 0.05)))
            .collect();
        let g = build_graph(&trajs, &GraphParams::default(), &unit_bbox()).unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert!(g.nodes().iter().all(|n| n.kind == NodeKind::Destination));
        assert_eq!(g.edges().len(), 1);
        let (&(u, v), &count) = g.edges().iter().next().unwrap();
        assert_eq!(count, 6);
        assert!(g.node(u).unwrap().center[0] < g.node(v).unwrap().center[0]);
    }

    #[test]
    fn turning_point_near_destination_is_excluded() {
        let params = GraphParams::default();
        // corner sits 0.5 * d_min from the route's end
        let end = [0.0, 0.0];
        let corner = [0.0, -0.5 * params.d_min];
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| traj_xy(&format!("t{i}"), &densify(&[[-0.8, -0.5 * params.d_min], corner, end], 0.01)))
            .collect();
        let polylines: Vec<Vec<Vec2>> = trajs.iter().map(|t| normalize(&t.points, &unit_bbox(), false).unwrap()).collect();
        let cands = detect_turning_points(&polylines, params.theta_turn, 3, params.d_min / 2.0).unwrap();
        assert!(!cands.is_empty(), "the corner is a candidate");
        let g = build_graph(
            &trajs,
            &GraphParams {
                window: 3,
                ..params.clone()
            },
            &unit_bbox(),
        )
        .unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert!(g.min_node_separation() > params.d_min);
    }

    #[test]
    fn nearest_node_rules() {
        let nodes = vec![
            SubgoalNode { id: 0, center: [0.0, 0.0], radius: 0.1, kind: NodeKind::Destination },
            SubgoalNode { id: 1, center: [0.4, 0.0], radius: 0.1, kind: NodeKind::Destination },
        ];
        let g = SubgoalGraph::from_parts(GraphParams::default(), unit_bbox(), nodes, BTreeMap::new()).unwrap();
        assert_eq!(g.nearest_node([0.4, 0.0]), Some(1));
        // equidistant, and exactly on both 2r boundaries
        assert_eq!(g.nearest_node([0.2, 0.0]), Some(0));
        assert_eq!(g.nearest_node([0.2, 0.3]), None);
        assert_eq!(g.nearest_node([0.0, -0.3]), None);
        let wide = SubgoalGraph::from_parts(
            GraphParams::default(),
            unit_bbox(),
            vec![
                SubgoalNode { id: 0, center: [0.0, 0.0], radius: 0.3, kind: NodeKind::Destination },
                SubgoalNode { id: 1, center: [0.4, 0.0], radius: 0.3, kind: NodeKind::Destination },
            ],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(wide.nearest_node([0.2, 0.1]), Some(0));
    }

    #[test]
    fn json_round_trip_and_schema() {
        let nodes = vec![
            SubgoalNode { id: 0, center: [0.1, 0.2], radius: 0.05, kind: NodeKind::Destination },
            SubgoalNode { id: 1, center: [-0.3, 0.4], radius: 0.05, kind: NodeKind::TurningPoint },
        ];
        let edges = BTreeMap::from([((0, 1), 12)]);
        let g = SubgoalGraph::from_parts(GraphParams::default(), unit_bbox(), nodes, edges).unwrap();
        let json = g.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["nodes"][1]["kind"], "turning_point");
        assert_eq!(v["edges"][0], serde_json::json!({"from": 0, "to": 1, "count": 12}));
        assert!(v["params"]["d_min"].is_number());
        assert_eq!(SubgoalGraph::from_json(&json).unwrap(), g);
    }

    #[test]
    fn edge_endpoints_must_exist() {
        let nodes = vec![SubgoalNode { id: 0, center: [0.0, 0.0], radius: 0.1, kind: NodeKind::Destination }];
        let r = SubgoalGraph::from_parts(GraphParams::default(), unit_bbox(), nodes, BTreeMap::from([((0, 3), 1)]));
        assert!(r.is_err());
    }
}
