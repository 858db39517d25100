//! Decomposition of a trajectory into a subgoal sequence and fixed-length legs.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::graph::SubgoalGraph;
use crate::traj::{normalize, resample_arclength, BoundingBox, GeoPoint, NormalizedSubtrajectory, Trajectory};

/// A point entering a node region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hit {
    pub node: usize,
    pub index: usize,
}

/// Walks the points in order and records each entry into a node region.
/// Consecutive hits of the same node collapse into the first one.
pub fn subgoal_hits(points: &[Vec2], graph: &SubgoalGraph) -> Vec<Hit> {
    let mut hits: Vec<Hit> = Vec::new();
    let mut prev: Option<usize> = None;
    for (index, &p) in points.iter().enumerate() {
        let region = graph.region_of(p);
        if region != prev {
            if let Some(node) = region {
                if hits.last().map(|h| h.node) != Some(node) {
                    hits.push(Hit { node, index });
                }
            }
        }
        prev = region;
    }
    hits
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Subgoal node ids; no two consecutive entries are equal.
    pub subgoal_seq: Vec<usize>,
    /// `subgoal_seq.len() - 1` legs, each resampled to L rows.
    pub legs: Vec<NormalizedSubtrajectory>,
    pub raw_legs: Vec<Vec<GeoPoint>>,
    /// Inclusive point index range of each raw leg; neighbouring legs share
    /// their boundary point.
    pub leg_ranges: Vec<(usize, usize)>,
}

impl Segmentation {
    pub fn n_legs(&self) -> usize {
        self.legs.len()
    }

    /// `(g_i, g_{i+1})` of leg `i`.
    pub fn leg_subgoals(&self, i: usize) -> (usize, usize) {
        (self.subgoal_seq[i], self.subgoal_seq[i + 1])
    }
}

/// Subgoal sequence alone, without leg resampling.
pub fn subgoal_sequence(traj: &Trajectory, graph: &SubgoalGraph, bbox: &BoundingBox) -> Result<Vec<usize>> {
    let pts = normalize(&traj.points, bbox, true)?;
    Ok(subgoal_hits(&pts, graph).into_iter().map(|h| h.node).collect())
}

/// Splits `traj` at its subgoal hits. Points before the first hit belong to
/// the first leg and points after the last hit to the last leg.
pub fn segment_by_graph(traj: &Trajectory, graph: &SubgoalGraph, bbox: &BoundingBox, len: usize) -> Result<Segmentation> {
    let pts = normalize(&traj.points, bbox, true)?;
    let hits = subgoal_hits(&pts, graph);
    if hits.len() < 2 {
        return Err(Error::Segmentation { hits: hits.len() });
    }
    let k = hits.len();
    let n = pts.len();
    let mut legs = Vec::with_capacity(k - 1);
    let mut raw_legs = Vec::with_capacity(k - 1);
    let mut leg_ranges = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let start = if j == 0 { 0 } else { hits[j].index };
        let end = if j == k - 2 { n - 1 } else { hits[j + 1].index };
        let coords = resample_arclength(&pts[start..=end], len)?;
        legs.push(NormalizedSubtrajectory::new(coords)?);
        raw_legs.push(traj.points[start..=end].to_vec());
        leg_ranges.push((start, end));
    }
    Ok(Segmentation {
        subgoal_seq: hits.iter().map(|h| h.node).collect(),
        legs,
        raw_legs,
        leg_ranges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::lerp;
    use crate::graph::{GraphParams, NodeKind, SubgoalNode};
    use crate::traj::Label;
    use std::collections::BTreeMap;

    fn unit_bbox() -> BoundingBox {
        BoundingBox::new(-1.0, 1.0, -1.0, 1.0).unwrap()
    }

    fn graph(centers: &[Vec2], radius: f64) -> SubgoalGraph {
        let nodes = centers
            .iter()
            .enumerate()
            .map(|(id, &center)| SubgoalNode {
                id,
                center,
                radius,
                kind: NodeKind::Destination,
            })
            .collect();
        SubgoalGraph::from_parts(GraphParams::default(), unit_bbox(), nodes, BTreeMap::new()).unwrap()
    }

    fn traj(pts: &[Vec2]) -> Trajectory {
        Trajectory::new("t", pts.iter().map(|p| GeoPoint::new(p[1], p[0]).unwrap()).collect(), Label::Normal)
    }

    fn line(a: Vec2, b: Vec2, n: usize) -> Vec<Vec2> {
        (0..=n).map(|k| lerp(a, b, k as f64 / n as f64)).collect()
    }

    #[test]
    fn three_regions_in_order() {
        // nodes 7, 8, 9 on a line; ids 0..6 sit off the path
        let mut centers: Vec<Vec2> = (0..7).map(|i| [-0.9 + 0.1 * i as f64, 0.9]).collect();
        centers.extend([[-0.6, -0.5], [0.0, -0.5], [0.6, -0.5]]);
        let g = graph(&centers, 0.05);
        let pts = line([-0.6, -0.5], [0.6, -0.5], 60);
        let seg = segment_by_graph(&traj(&pts), &g, &unit_bbox(), 16).unwrap();
        assert_eq!(seg.subgoal_seq, vec![7, 8, 9]);
        assert_eq!(seg.n_legs(), 2);
        assert!(seg.legs.iter().all(|l| l.len() == 16));
    }

    #[test]
    fn single_region_is_an_error() {
        let g = graph(&[[0.0, 0.0], [0.5, 0.5]], 0.2);
        let pts = line([-0.05, 0.0], [0.05, 0.0], 10);
        assert!(matches!(
            segment_by_graph(&traj(&pts), &g, &unit_bbox(), 8),
            Err(Error::Segmentation { hits: 1 })
        ));
    }

    #[test]
    fn concatenated_legs_are_recovered() {
        let a = [-0.6, -0.6];
        let b = [0.0, 0.2];
        let c = [0.7, -0.3];
        let g = graph(&[a, b, c], 0.05);
        let leg1 = line(a, b, 40);
        let leg2 = line(b, c, 40);
        let mut pts = leg1.clone();
        pts.extend_from_slice(&leg2[1..]);
        let t = traj(&pts);
        let seg = segment_by_graph(&t, &g, &unit_bbox(), 12).unwrap();
        assert_eq!(seg.subgoal_seq, vec![0, 1, 2]);
        // oracle: the legs are bounded by the trajectory ends and the first
        // point of the concatenation inside b's region
        let (first, last) = (seg.leg_ranges[0], seg.leg_ranges[1]);
        assert_eq!(first.0, 0);
        assert_eq!(last.1, pts.len() - 1);
        let entry = pts.iter().position(|p| crate::geom::dist(*p, b) <= 0.05).unwrap();
        assert_eq!(first.1, entry);
        assert_eq!(last.0, entry);
        let l0 = seg.legs[0].coords();
        assert!(crate::geom::dist([l0[[0, 0]], l0[[0, 1]]], a) < 1e-12);
        let l1 = seg.legs[1].coords();
        assert!(crate::geom::dist([l1[[11, 0]], l1[[11, 1]]], c) < 1e-12);
    }

    #[test]
    fn raw_legs_partition_the_points() {
        let g = graph(&[[-0.5, 0.0], [0.0, 0.0], [0.5, 0.0]], 0.06);
        let mut pts = line([-0.9, 0.3], [-0.5, 0.0], 10);
        pts.extend(&line([-0.5, 0.0], [0.9, 0.0], 50)[1..]);
        let t = traj(&pts);
        let seg = segment_by_graph(&t, &g, &unit_bbox(), 8).unwrap();
        let mut joined: Vec<GeoPoint> = Vec::new();
        for raw in &seg.raw_legs {
            let skip = usize::from(!joined.is_empty());
            joined.extend_from_slice(&raw[skip..]);
        }
        assert_eq!(joined, t.points);
        assert!(seg.subgoal_seq.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn reentering_the_same_region_does_not_repeat() {
        let g = graph(&[[-0.5, 0.0], [0.5, 0.0]], 0.1);
        let pts = vec![[-0.5, 0.0], [-0.2, 0.0], [-0.5, 0.05], [0.0, 0.0], [0.5, 0.0]];
        let seq = subgoal_sequence(&traj(&pts), &g, &unit_bbox()).unwrap();
        assert_eq!(seq, vec![0, 1]);
    }
}
