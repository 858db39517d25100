//! Labelled anomaly synthesis: big detours, small detours and route switches.
//!
//! All geometry runs in the local planar frame of the trajectory, so `d` and
//! `sigma` are in degrees (longitude scaled by the cosine of the mean
//! latitude).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cumulative_lengths, dist, lerp, point_at, polyline_length, scale, sub, Vec2};
use crate::graph::SubgoalGraph;
use crate::segment::{segment_by_graph, subgoal_sequence, Segmentation};
use crate::traj::{GeoPoint, Label, PlanarFrame, Trajectory};

const SMALL_DETOUR_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeParams {
    /// Extra path length added by a detour.
    pub d: f64,
    /// Share of the whole trajectory replaced by a big detour.
    pub omega: f64,
    /// Share of one leg replaced by a small detour.
    pub omega_star: f64,
    /// Minimum separation of the two split points of a route switch.
    pub sigma: f64,
}

impl Default for ForgeParams {
    fn default() -> Self {
        Self::chengdu()
    }
}

impl ForgeParams {
    pub fn chengdu() -> Self {
        Self {
            d: 0.04,
            omega: 0.6,
            omega_star: 0.6,
            sigma: 0.03,
        }
    }

    pub fn ais() -> Self {
        Self {
            d: 1.0,
            omega: 0.6,
            omega_star: 0.6,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.sigma > 0.0) {
            return Err(Error::param("forge d and sigma must be positive"));
        }
        for (name, v) in [("omega", self.omega), ("omega_star", self.omega_star)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::param(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Apex offset `h` of the isosceles wedge over a base of length `base` whose
/// two sides sum to `base + extra`.
pub fn wedge_height(base: f64, extra: f64) -> f64 {
    (extra * extra + 2.0 * extra * base).sqrt() / 2.0
}

/// Two-segment path `a -> m -> b` where `m` is the midpoint of `ab` pushed
/// sideways so the path is `extra` longer than `|ab|`. `left` picks the side.
pub fn detour_wedge(a: Vec2, b: Vec2, extra: f64, left: bool) -> Result<[Vec2; 3]> {
    let base = dist(a, b);
    if !(base > 0.0) {
        return Err(Error::Geometry("detour endpoints coincide".into()));
    }
    if !(extra > 0.0) {
        return Err(Error::param("detour extra length must be positive"));
    }
    let h = wedge_height(base, extra);
    let dir = scale(sub(b, a), 1.0 / base);
    let normal = if left { [-dir[1], dir[0]] } else { [dir[1], -dir[0]] };
    let m = add(lerp(a, b, 0.5), scale(normal, h));
    Ok([a, m, b])
}

/// [`detour_wedge`] with the side drawn by a fair coin.
pub fn detour_polyline<R: Rng + ?Sized>(a: Vec2, b: Vec2, extra: f64, rng: &mut R) -> Result<Vec<Vec2>> {
    let left = rng.random_bool(0.5);
    Ok(detour_wedge(a, b, extra, left)?.to_vec())
}

struct Cut {
    xy: Vec2,
    t: Option<f64>,
    /// Index of the original vertex at this arc position, if any.
    vertex: Option<usize>,
}

fn cut_at(points: &[GeoPoint], xy: &[Vec2], cum: &[f64], s: f64) -> Cut {
    if let Some(i) = cum.iter().position(|&c| c == s) {
        return Cut {
            xy: xy[i],
            t: points[i].t.map(|t| t as f64),
            vertex: Some(i),
        };
    }
    let hi = cum.partition_point(|&c| c <= s).min(cum.len() - 1);
    let lo = hi.saturating_sub(1);
    let f = if cum[hi] > cum[lo] { (s - cum[lo]) / (cum[hi] - cum[lo]) } else { 0.0 };
    let t = match (points[lo].t, points[hi].t) {
        (Some(a), Some(b)) => Some(a as f64 + (b - a) as f64 * f),
        _ => None,
    };
    Cut {
        xy: point_at(xy, cum, s),
        t,
        vertex: None,
    }
}

/// Replaces the arc `[s0, s1]` with a wedge whose length makes the whole path
/// exactly `d` longer. Vertices outside the arc are kept untouched; the wedge
/// carries as many interior samples as the arc had vertices, plus its apex.
fn replace_with_detour(points: &[GeoPoint], frame: &PlanarFrame, s0: f64, s1: f64, d: f64, left: bool) -> Result<Vec<GeoPoint>> {
    let xy = frame.project_all(points);
    let cum = cumulative_lengths(&xy);
    let a = cut_at(points, &xy, &cum, s0);
    let b = cut_at(points, &xy, &cum, s1);
    let chord = dist(a.xy, b.xy);
    let extra = d + (s1 - s0) - chord;
    let wedge = detour_wedge(a.xy, b.xy, extra, left)?;
    let n_inside = cum.iter().filter(|&&c| c > s0 && c < s1).count();

    let wedge_cum = cumulative_lengths(&wedge);
    let wedge_len = wedge_cum[2];
    let mut inner: Vec<(f64, Vec2)> = (1..=n_inside)
        .map(|k| {
            let s = wedge_len * k as f64 / (n_inside + 1) as f64;
            (s, point_at(&wedge, &wedge_cum, s))
        })
        .collect();
    if !inner.iter().any(|&(s, _)| s == wedge_cum[1]) {
        let at = inner.partition_point(|&(s, _)| s < wedge_cum[1]);
        inner.insert(at, (wedge_cum[1], wedge[1]));
    }

    let time_at = |s: f64| match (a.t, b.t) {
        (Some(ta), Some(tb)) => Some((ta + (tb - ta) * s / wedge_len).round() as i64),
        _ => None,
    };

    let mut out: Vec<GeoPoint> = points.iter().zip(&cum).filter(|(_, &c)| c < s0).map(|(p, _)| *p).collect();
    match a.vertex {
        Some(i) => out.push(points[i]),
        None => out.push(frame.unproject(a.xy, a.t.map(|t| t.round() as i64))),
    }
    for &(s, p) in &inner {
        out.push(frame.unproject(p, time_at(s)));
    }
    match b.vertex {
        Some(i) => out.push(points[i]),
        None => out.push(frame.unproject(b.xy, b.t.map(|t| t.round() as i64))),
    }
    out.extend(points.iter().zip(&cum).filter(|(_, &c)| c > s1).map(|(p, _)| *p));
    Ok(out)
}

/// Planar path length of a geo polyline in `frame`.
pub fn planar_length(points: &[GeoPoint], frame: &PlanarFrame) -> f64 {
    polyline_length(&frame.project_all(points))
}

/// Replaces a contiguous share `omega` of the trajectory's arc length, placed
/// uniformly at random, with a wedge detour so the total length grows by `d`.
pub fn make_big_detour<R: Rng + ?Sized>(traj: &Trajectory, d: f64, omega: f64, rng: &mut R) -> Result<Trajectory> {
    if !(omega > 0.0 && omega < 1.0) || !(d > 0.0) {
        return Err(Error::param("big detour needs d > 0 and omega in (0, 1)"));
    }
    if traj.points.len() < 2 {
        return Err(Error::Forge(format!("trajectory {} has fewer than 2 points", traj.id)));
    }
    let frame = PlanarFrame::for_points(&traj.points);
    let total = planar_length(&traj.points, &frame);
    if !(total > 0.0) {
        return Err(Error::Forge(format!("trajectory {} has zero length", traj.id)));
    }
    let span = omega * total;
    let s0 = rng.random_range(0.0..=(total - span));
    let left = rng.random_bool(0.5);
    let points = replace_with_detour(&traj.points, &frame, s0, s0 + span, d, left)?;
    Ok(Trajectory::new(format!("{}-bd", traj.id), points, Label::BigDetour))
}

/// Replaces a share `omega_star` of one uniformly chosen leg, strictly inside
/// it, with a detour adding `d`. Placement and side are redrawn until the
/// forged trajectory keeps the original subgoal sequence.
pub fn make_small_detour<R: Rng + ?Sized>(
    traj: &Trajectory,
    seg: &Segmentation,
    graph: &SubgoalGraph,
    d: f64,
    omega_star: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(omega_star > 0.0 && omega_star < 1.0) || !(d > 0.0) {
        return Err(Error::param("small detour needs d > 0 and omega_star in (0, 1)"));
    }
    if seg.n_legs() == 0 {
        return Err(Error::Forge("segmentation has no legs".into()));
    }
    let frame = PlanarFrame::for_points(&traj.points);
    let cum = cumulative_lengths(&frame.project_all(&traj.points));
    let leg = rng.random_range(0..seg.n_legs());
    let (i0, i1) = seg.leg_ranges[leg];
    let (l0, l1) = (cum[i0], cum[i1]);
    let span = omega_star * (l1 - l0);
    if !(span > 0.0) {
        return Err(Error::Forge(format!("leg {leg} of {} has zero length", traj.id)));
    }

    for _ in 0..SMALL_DETOUR_RETRIES {
        // open interval keeps the replaced arc strictly inside the leg
        let s0 = l0 + rng.random::<f64>() * (l1 - l0 - span);
        let left = rng.random_bool(0.5);
        if s0 <= l0 || s0 + span >= l1 {
            continue;
        }
        let points = replace_with_detour(&traj.points, &frame, s0, s0 + span, d, left)?;
        let forged = Trajectory::new(format!("{}-sd", traj.id), points, Label::SmallDetour);
        if subgoal_sequence(&forged, graph, &graph.bbox)? == seg.subgoal_seq {
            return Ok(forged);
        }
    }
    Err(Error::Forge(format!(
        "small detour on {} changed the subgoal sequence {SMALL_DETOUR_RETRIES} times",
        traj.id
    )))
}

/// Segments `traj` and forges a small detour on it.
pub fn make_small_detour_on_graph<R: Rng + ?Sized>(
    traj: &Trajectory,
    graph: &SubgoalGraph,
    len: usize,
    d: f64,
    omega_star: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let seg = segment_by_graph(traj, graph, &graph.bbox, len)?;
    make_small_detour(traj, &seg, graph, d, omega_star, rng)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn split_half(points: &[GeoPoint], frame: &PlanarFrame) -> (Cut, Vec<f64>, Vec<Vec2>) {
    let xy = frame.project_all(points);
    let cum = cumulative_lengths(&xy);
    let half = cum[cum.len() - 1] / 2.0;
    (cut_at(points, &xy, &cum, half), cum, xy)
}

/// Splices the first half of `a` (by arc length) onto the second half of `b`
/// through a straight bridge sampled at the median point spacing of both.
/// Returns `None` when the split points are closer than `sigma`.
pub fn make_route_switch(a: &Trajectory, b: &Trajectory, sigma: f64) -> Option<Trajectory> {
    if a.points.len() < 2 || b.points.len() < 2 {
        return None;
    }
    let all: Vec<GeoPoint> = a.points.iter().chain(&b.points).copied().collect();
    let frame = PlanarFrame::for_points(&all);
    let (ca, cum_a, xy_a) = split_half(&a.points, &frame);
    let (cb, cum_b, xy_b) = split_half(&b.points, &frame);
    let gap = dist(ca.xy, cb.xy);
    if !(gap >= sigma) {
        return None;
    }
    let spacings: Vec<f64> = xy_a
        .windows(2)
        .chain(xy_b.windows(2))
        .map(|w| dist(w[0], w[1]))
        .filter(|&s| s > 0.0)
        .collect();
    let step = if spacings.is_empty() { gap } else { median(spacings) };
    let n_bridge = ((gap / step).ceil() as usize).max(1);

    let half_a = cum_a[cum_a.len() - 1] / 2.0;
    let half_b = cum_b[cum_b.len() - 1] / 2.0;
    let mut out: Vec<GeoPoint> = a.points.iter().zip(&cum_a).filter(|(_, &c)| c < half_a).map(|(p, _)| *p).collect();
    out.push(match ca.vertex {
        Some(i) => a.points[i],
        None => frame.unproject(ca.xy, ca.t.map(|t| t.round() as i64)),
    });
    for k in 1..n_bridge {
        out.push(frame.unproject(lerp(ca.xy, cb.xy, k as f64 / n_bridge as f64), None));
    }
    out.push(match cb.vertex {
        Some(i) => b.points[i],
        None => frame.unproject(cb.xy, cb.t.map(|t| t.round() as i64)),
    });
    out.extend(b.points.iter().zip(&cum_b).filter(|(_, &c)| c > half_b).map(|(p, _)| *p));
    // the two halves come from different clocks
    for p in &mut out {
        p.t = None;
    }
    let mut t = Trajectory::new(format!("{}+{}-rs", a.id, b.id), out, Label::RouteSwitch);
    t.dedup_consecutive();
    Some(t)
}
