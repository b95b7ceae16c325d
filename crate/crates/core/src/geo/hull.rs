use serde::{Deserialize, Serialize};

use super::{haversine_km, GeoPoint, LocalProjection};
use crate::error::{Error, Result};

/// Convex hull of a point set: counterclockwise vertices without collinear
/// points. Degenerates to a segment (2 vertices) or a point (1 vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    projection: LocalProjection,
    vertices: Vec<GeoPoint>,
    projected: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGeometry {
    pub cluster: usize,
    pub hull: Hull,
    pub buffer_km: f64,
}

impl ClusterGeometry {
    pub fn new(cluster: usize, points: &[GeoPoint], buffer_km: f64) -> Result<Self> {
        if !(buffer_km > 0.0 && buffer_km.is_finite()) {
            return Err(Error::Config(format!("buffer must be positive, got {buffer_km}")));
        }
        Ok(Self {
            cluster,
            hull: convex_hull(points)?,
            buffer_km,
        })
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Andrew's monotone chain on the local projection of `points`.
pub fn convex_hull(points: &[GeoPoint]) -> Result<Hull> {
    if points.is_empty() {
        return Err(Error::Config("convex hull of an empty point set".into()));
    }
    let projection = LocalProjection::about_centroid(points);
    let mut pts: Vec<([f64; 2], GeoPoint)> = points.iter().map(|&p| (projection.project(p), p)).collect();
    pts.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]).then(a.0[1].total_cmp(&b.0[1])));
    pts.dedup_by(|a, b| a.0 == b.0);

    if pts.len() <= 2 {
        return Ok(Hull {
            projection,
            vertices: pts.iter().map(|p| p.1).collect(),
            projected: pts.iter().map(|p| p.0).collect(),
        });
    }

    let mut hull: Vec<([f64; 2], GeoPoint)> = Vec::with_capacity(2 * pts.len());
    // lower hull, then upper hull; `<= 0` drops collinear points
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2].0, hull[hull.len() - 1].0, p.0) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2].0, hull[hull.len() - 1].0, p.0) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();

    Ok(Hull {
        projection,
        vertices: hull.iter().map(|p| p.1).collect(),
        projected: hull.iter().map(|p| p.0).collect(),
    })
}

impl Hull {
    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn projected_vertices(&self) -> &[[f64; 2]] {
        &self.projected
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    /// Inside or on the boundary of the hull polygon. Always false for
    /// degenerate hulls, whose area is zero.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let n = self.projected.len();
        if n < 3 {
            return false;
        }
        let q = self.projection.project(p);
        (0..n).all(|e| {
            let a = self.projected[e];
            let b = self.projected[(e + 1) % n];
            let scale = norm(sub(b, a)) * norm(sub(q, a));
            scale == 0.0 || cross(a, b, q) >= -1e-12 * scale
        })
    }

    /// Distance from `p` to the hull boundary in km. Vertex distances are
    /// exact great-circle distances; edge interiors use the projected plane.
    pub fn boundary_distance_km(&self, p: GeoPoint) -> f64 {
        let mut best = self
            .vertices
            .iter()
            .map(|&v| haversine_km(v, p))
            .fold(f64::INFINITY, f64::min);
        let n = self.projected.len();
        if n < 2 {
            return best;
        }
        let q = self.projection.project(p);
        let edges = if n == 2 { 1 } else { n };
        for e in 0..edges {
            let a = self.projected[e];
            let b = self.projected[(e + 1) % n];
            let ab = sub(b, a);
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            if len2 == 0.0 {
                continue;
            }
            let aq = sub(q, a);
            let t = (aq[0] * ab[0] + aq[1] * ab[1]) / len2;
            if t > 0.0 && t < 1.0 {
                best = best.min(cross(a, b, q).abs() / len2.sqrt());
            }
        }
        best
    }
}

/// Inside the hull or within `buffer_km` of its boundary.
pub fn within_buffer(geom: &ClusterGeometry, p: GeoPoint) -> bool {
    geom.hull.contains(p) || geom.hull.boundary_distance_km(p) <= geom.buffer_km
}
