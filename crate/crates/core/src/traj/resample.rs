use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{cumulative_lengths, lerp, Vec2};

/// Resamples a polyline to `len` points spaced uniformly by arc length.
/// Both endpoints are copied exactly.
pub fn resample_arclength(points: &[Vec2], len: usize) -> Result<Array2<f64>> {
    if len < 2 {
        return Err(Error::param(format!("resample length must be >= 2, got {len}")));
    }
    if points.len() < 2 {
        return Err(Error::Geometry("need at least 2 points to resample".into()));
    }
    let cum = cumulative_lengths(points);
    let total = cum[cum.len() - 1];
    if !(total > 0.0) {
        return Err(Error::Geometry("polyline has zero length".into()));
    }

    let mut out = Array2::zeros((len, 2));
    let mut seg = 0usize;
    for k in 0..len {
        let p = if k == 0 {
            points[0]
        } else if k == len - 1 {
            points[points.len() - 1]
        } else {
            let s = total * k as f64 / (len - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            if span > 0.0 {
                lerp(points[seg], points[seg + 1], ((s - cum[seg]) / span).clamp(0.0, 1.0))
            } else {
                points[seg]
            }
        };
        out[[k, 0]] = p[0];
        out[[k, 1]] = p[1];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist;
    use proptest::prelude::*;

    fn rows(a: &Array2<f64>) -> Vec<Vec2> {
        a.rows().into_iter().map(|r| [r[0], r[1]]).collect()
    }

    #[test]
    fn straight_segment_three_points() {
        let out = resample_arclength(&[[0.0, 0.0], [1.0, 0.0]], 3).unwrap();
        assert_eq!(rows(&out), vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn uniform_input_is_reproduced() {
        let pts: Vec<Vec2> = (0..6).map(|i| [i as f64 * 0.2, 1.0 - i as f64 * 0.2]).collect();
        let out = resample_arclength(&pts, pts.len()).unwrap();
        for (a, b) in rows(&out).iter().zip(&pts) {
            assert!(dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn l_shape_matches_analytic_parametrization() {
        let out = resample_arclength(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], 5).unwrap();
        // arc length s maps to (s, 0) for s <= 1 and (1, s - 1) afterwards
        let oracle = |s: f64| if s <= 1.0 { [s, 0.0] } else { [1.0, s - 1.0] };
        for (k, p) in rows(&out).iter().enumerate() {
            let q = oracle(0.5 * k as f64);
            assert!(dist(*p, q) < 1e-12, "{k}: {p:?} vs {q:?}");
        }
    }

    #[test]
    fn zero_length_rejected() {
        assert!(resample_arclength(&[[0.3, 0.3], [0.3, 0.3]], 4).is_err());
        assert!(resample_arclength(&[[0.0, 0.0], [1.0, 0.0]], 1).is_err());
    }

    proptest! {
        #[test]
        fn uniform_spacing_and_exact_endpoints(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..20),
            len in 2usize..80,
        ) {
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let total: f64 = pts.windows(2).map(|w| dist(w[0], w[1])).sum();
            prop_assume!(total > 1e-6);
            let out = resample_arclength(&pts, len).unwrap();
            prop_assert_eq!(out.nrows(), len);
            let r = rows(&out);
            prop_assert_eq!(r[0], pts[0]);
            prop_assert_eq!(r[len - 1], pts[pts.len() - 1]);

            // every sample sits at arc position k * total / (len - 1) of the input
            let cum = cumulative_lengths(&pts);
            for (k, p) in r.iter().enumerate() {
                let s = total * k as f64 / (len - 1) as f64;
                let q = crate::geom::point_at(&pts, &cum, s);
                prop_assert!(dist(*p, q) <= 1e-6 * total.max(1.0), "k={} {:?} {:?}", k, p, q);
            }
        }
    }
}
