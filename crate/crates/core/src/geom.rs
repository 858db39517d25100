//! Small planar geometry helpers shared by resampling, graph building and forging.

pub type Vec2 = [f64; 2];

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn lerp(a: Vec2, b: Vec2, f: f64) -> Vec2 {
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]
}

/// Cumulative arc length at every vertex, starting at 0.
pub fn cumulative_lengths(points: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in points.windows(2) {
        acc += dist(w[0], w[1]);
        out.push(acc);
    }
    out
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point at arc length `s` along the polyline with precomputed cumulative
/// lengths. `s` is clamped to `[0, total]`.
pub fn point_at(points: &[Vec2], cum: &[f64], s: f64) -> Vec2 {
    let total = *cum.last().unwrap_or(&0.0);
    if s <= 0.0 {
        return points[0];
    }
    if s >= total {
        return points[points.len() - 1];
    }
    // first vertex with cum > s
    let hi = cum.partition_point(|&c| c <= s);
    let lo = hi - 1;
    let seg = cum[hi] - cum[lo];
    if seg <= 0.0 {
        return points[lo];
    }
    lerp(points[lo], points[hi], (s - cum[lo]) / seg)
}

/// Heading in radians of the resultant of unit segment vectors over `points`.
pub fn mean_heading(points: &[Vec2]) -> Option<f64> {
    let mut acc = [0.0, 0.0];
    for w in points.windows(2) {
        let d = sub(w[1], w[0]);
        let n = norm(d);
        if n > 0.0 {
            acc = add(acc, scale(d, 1.0 / n));
        }
    }
    if norm(acc) == 0.0 {
        None
    } else {
        Some(acc[1].atan2(acc[0]))
    }
}

/// Absolute difference of two angles wrapped into `[0, pi]`.
pub fn angle_between(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_at_walks_segments() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        let cum = cumulative_lengths(&pts);
        assert_eq!(cum, vec![0.0, 1.0, 2.0]);
        assert_eq!(point_at(&pts, &cum, 0.5), [0.5, 0.0]);
        assert_eq!(point_at(&pts, &cum, 1.5), [1.0, 0.5]);
        assert_eq!(point_at(&pts, &cum, 9.0), [1.0, 1.0]);
    }

    #[test]
    fn angle_wraps() {
        let pi = std::f64::consts::PI;
        assert!((angle_between(0.1, 2.0 * pi - 0.1) - 0.2).abs() < 1e-12);
        assert!((angle_between(0.0, pi) - pi).abs() < 1e-12);
    }
}
