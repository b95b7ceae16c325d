//! Great-circle distances, cluster hulls with a distance buffer, and the
//! assignment of outcome units to clusters of interventional units.
//!
//! Point-to-point distances use the haversine formula on a sphere of radius
//! [`EARTH_RADIUS_KM`]. Hull geometry is computed on a local equirectangular
//! projection about the cluster centroid, which is accurate to well under a
//! kilometre at the extents of a regional cluster.

mod assign;
mod hull;
pub mod kmeans;

pub use assign::{assign_outcome_units, AnalysisSample, ClusterAssignment};
pub use hull::{convex_hull, within_buffer, ClusterGeometry, Hull};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

pub const DEFAULT_BUFFER_KM: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;
    fn try_from(r: RawPoint) -> Result<Self> {
        GeoPoint::new(r.lat, r.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    /// Latitude in [-90, 90], longitude in [-180, 180], both in degrees.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidGeoPoint { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection to kilometres about a fixed origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat0: f64,
}

fn wrap_degrees(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 && d > 0.0 {
        180.0
    } else {
        w
    }
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            cos_lat0: origin.lat.to_radians().cos(),
        }
    }

    /// Projection centred on the mean latitude / circular-mean longitude.
    pub fn about_centroid(points: &[GeoPoint]) -> Self {
        let n = points.len().max(1) as f64;
        let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
        let (s, c) = points.iter().fold((0.0, 0.0), |(s, c), p| {
            let l = p.lon.to_radians();
            (s + l.sin(), c + l.cos())
        });
        let lon = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c).to_degrees() };
        Self::new(GeoPoint {
            lat,
            lon: lon.clamp(-180.0, 180.0),
        })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn project(&self, p: GeoPoint) -> [f64; 2] {
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        [
            k * wrap_degrees(p.lon - self.origin.lon) * self.cos_lat0,
            k * (p.lat - self.origin.lat),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn zero_distance() {
        assert_eq!(haversine_km(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
    }

    #[test]
    fn one_equatorial_degree() {
        let expected = std::f64::consts::PI / 180.0 * 6371.0088;
        let d = haversine_km(pt(0.0, 0.0), pt(0.0, 1.0));
        assert!((d - 111.1951).abs() < 1e-3, "{d}");
        assert!((d - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(serde_json::from_str::<GeoPoint>(r#"{"lat":100,"lon":0}"#).is_err());
    }

    #[test]
    fn projection_is_exact_along_the_meridian() {
        let proj = LocalProjection::new(pt(40.0, -90.0));
        let p = proj.project(pt(41.0, -90.0));
        assert!(p[0].abs() < 1e-12);
        assert!((p[1] - haversine_km(pt(40.0, -90.0), pt(41.0, -90.0))).abs() < 1e-9);
    }

    #[test]
    fn projection_handles_the_antimeridian() {
        let proj = LocalProjection::about_centroid(&[pt(0.0, 179.5), pt(0.0, -179.5)]);
        let a = proj.project(pt(0.0, 179.5));
        let b = proj.project(pt(0.0, -179.5));
        assert!(((b[0] - a[0]).abs() - 111.1951).abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn haversine_is_symmetric(
            la1 in -90.0f64..90.0, lo1 in -180.0f64..180.0,
            la2 in -90.0f64..90.0, lo2 in -180.0f64..180.0,
        ) {
            let (a, b) = (pt(la1, lo1), pt(la2, lo2));
            prop_assert!((haversine_km(a, b) - haversine_km(b, a)).abs() <= 1e-12);
            prop_assert!(haversine_km(a, b) <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
        }
    }
}
