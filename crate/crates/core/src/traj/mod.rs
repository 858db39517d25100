//! Trajectory types, normalization into the `[-1, 1]²` frame and arc-length
//! resampling.

mod io;
mod resample;

pub use io::{parse_trajectories, read_trajectories, write_trajectories, ParseOutcome, TrajFormat};
pub use resample::resample_arclength;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    /// Epoch seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<i64>,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        Self::with_time(lat, lon, None)
    }

    pub fn with_time(lat: f64, lon: f64, t: Option<i64>) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::Geometry(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Geometry(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Geometry(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(Self { lat, lon, t })
    }

    pub fn same_location(&self, other: &GeoPoint) -> bool {
        self.lat == other.lat && self.lon == other.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    BigDetour,
    SmallDetour,
    RouteSwitch,
    Unknown,
}

impl Label {
    pub const ANOMALIES: [Label; 3] = [Label::BigDetour, Label::SmallDetour, Label::RouteSwitch];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::BigDetour => "big_detour",
            Label::SmallDetour => "small_detour",
            Label::RouteSwitch => "route_switch",
            Label::Unknown => "unknown",
        }
    }

    pub fn is_anomaly(&self) -> bool {
        matches!(self, Label::BigDetour | Label::SmallDetour | Label::RouteSwitch)
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "normal" => Label::Normal,
            "big_detour" => Label::BigDetour,
            "small_detour" => Label::SmallDetour,
            "route_switch" => Label::RouteSwitch,
            "unknown" | "" => Label::Unknown,
            other => return Err(Error::param(format!("unknown label `{other}`"))),
        })
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<GeoPoint>,
    pub label: Label,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<GeoPoint>, label: Label) -> Self {
        Self {
            id: id.into(),
            points,
            label,
        }
    }

    /// Removes consecutive points sharing the same location.
    pub fn dedup_consecutive(&mut self) {
        self.points.dedup_by(|b, a| a.same_location(b));
    }

    pub fn mean_lat(&self) -> f64 {
        self.points.iter().map(|p| p.lat).sum::<f64>() / self.points.len().max(1) as f64
    }
}

/// Affine frame mapping a lat/lon rectangle onto `[-1, 1]²` (x from lon, y
/// from lat).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite())
            && self.lat_min < self.lat_max
            && self.lon_min < self.lon_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!("degenerate bounding box {self:?}")))
        }
    }

    /// Tight box around every point, grown by `margin` times the span on each
    /// side.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a GeoPoint>, margin: f64) -> Result<Self> {
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            lat = (lat.0.min(p.lat), lat.1.max(p.lat));
            lon = (lon.0.min(p.lon), lon.1.max(p.lon));
        }
        if !lat.0.is_finite() {
            return Err(Error::EmptyInput);
        }
        let dlat = (lat.1 - lat.0) * margin;
        let dlon = (lon.1 - lon.0) * margin;
        Self::new(lat.0 - dlat, lat.1 + dlat, lon.0 - dlon, lon.1 + dlon)
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn normalize_point(&self, p: &GeoPoint, clamp: bool) -> Result<Vec2> {
        if !clamp && !self.contains(p) {
            return Err(Error::OutOfBounds { lat: p.lat, lon: p.lon });
        }
        let x = 2.0 * (p.lon - self.lon_min) / (self.lon_max - self.lon_min) - 1.0;
        let y = 2.0 * (p.lat - self.lat_min) / (self.lat_max - self.lat_min) - 1.0;
        if clamp {
            Ok([x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0)])
        } else {
            Ok([x, y])
        }
    }

    /// Inverse of [`BoundingBox::normalize_point`]; returns `(lat, lon)`.
    pub fn denormalize(&self, xy: Vec2) -> (f64, f64) {
        let lon = (xy[0] + 1.0) * 0.5 * (self.lon_max - self.lon_min) + self.lon_min;
        let lat = (xy[1] + 1.0) * 0.5 * (self.lat_max - self.lat_min) + self.lat_min;
        (lat, lon)
    }
}

/// Maps every point into the bbox frame. With `clamp`, points outside the box
/// are pinned to its border instead of rejected.
pub fn normalize(points: &[GeoPoint], bbox: &BoundingBox, clamp: bool) -> Result<Vec<Vec2>> {
    bbox.validate()?;
    points.iter().map(|p| bbox.normalize_point(p, clamp)).collect()
}

pub fn denormalize(points: &[Vec2], bbox: &BoundingBox) -> Vec<(f64, f64)> {
    points.iter().map(|&p| bbox.denormalize(p)).collect()
}

/// A leg resampled to a fixed number of rows in the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSubtrajectory {
    coords: Array2<f64>,
}

impl NormalizedSubtrajectory {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 2 || coords.nrows() < 2 {
            return Err(Error::Shape(format!(
                "subtrajectory must be L x 2 with L >= 2, got {:?}",
                coords.shape()
            )));
        }
        if coords.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Geometry("subtrajectory leaves the [-1, 1] frame".into()));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.coords
    }
}

/// Local planar frame in degrees: `x = lon * cos(lat0)`, `y = lat`.
#[derive(Debug, Clone, Copy)]
pub struct PlanarFrame {
    cos_lat: f64,
}

impl PlanarFrame {
    pub fn new(ref_lat: f64) -> Self {
        Self {
            cos_lat: ref_lat.to_radians().cos(),
        }
    }

    pub fn for_points(points: &[GeoPoint]) -> Self {
        let lat = points.iter().map(|p| p.lat).sum::<f64>() / points.len().max(1) as f64;
        Self::new(lat)
    }

    pub fn project(&self, p: &GeoPoint) -> Vec2 {
        [p.lon * self.cos_lat, p.lat]
    }

    pub fn unproject(&self, xy: Vec2, t: Option<i64>) -> GeoPoint {
        GeoPoint {
            lat: xy[1],
            lon: xy[0] / self.cos_lat,
            t,
        }
    }

    pub fn project_all(&self, points: &[GeoPoint]) -> Vec<Vec2> {
        points.iter().map(|p| self.project(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox() -> BoundingBox {
        BoundingBox::new(30.0, 31.0, 104.0, 106.0).unwrap()
    }

    #[test]
    fn center_maps_to_origin() {
        let p = GeoPoint::new(30.5, 105.0).unwrap();
        assert_eq!(bbox().normalize_point(&p, false).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn min_corner_maps_to_minus_one() {
        let p = GeoPoint::new(30.0, 104.0).unwrap();
        assert_eq!(bbox().normalize_point(&p, false).unwrap(), [-1.0, -1.0]);
    }

    #[test]
    fn round_trip_is_tight() {
        let b = bbox();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<GeoPoint> = (0..100)
            .map(|_| GeoPoint::new(rng.random_range(30.0..31.0), rng.random_range(104.0..106.0)).unwrap())
            .collect();
        let xy = normalize(&pts, &b, false).unwrap();
        for (p, q) in pts.iter().zip(denormalize(&xy, &b)) {
            assert!((p.lat - q.0).abs() < 1e-9 && (p.lon - q.1).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(1.0, 1.0, 0.0, 2.0).is_err());
        let broken = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 2.0,
            lon_max: 2.0,
        };
        assert!(normalize(&[GeoPoint::new(0.5, 2.0).unwrap()], &broken, true).is_err());
    }

    #[test]
    fn outside_point_clamps_or_fails() {
        let p = GeoPoint::new(32.0, 105.0).unwrap();
        assert!(matches!(bbox().normalize_point(&p, false), Err(Error::OutOfBounds { .. })));
        assert_eq!(bbox().normalize_point(&p, true).unwrap(), [0.0, 1.0]);
    }

    #[test]
    fn geo_point_bounds() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }
}
