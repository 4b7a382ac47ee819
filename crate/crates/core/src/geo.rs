//! Geodetic points, great-circle distance and the local planar projection.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

/// Mean Earth radius used for every distance and projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84-style latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Builds a point, rejecting coordinates outside lat ∈ [−90, 90], lon ∈ [−180, 180).
    pub fn new(lat: f64, lon: f64) -> Result<Self, GraphError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..180.0).contains(&self.lon) {
            return Err(GraphError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            });
        }
        Ok(())
    }
}

/// A point in the local metric frame: x east, y north, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

/// Haversine great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Local equirectangular projection about a fixed origin.
///
/// `x = R·Δlon·cos(lat₀)`, `y = R·Δlat`, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat0: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        LocalProjection {
            origin,
            cos_lat0: origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn forward(&self, p: GeoPoint) -> Point2 {
        Point2::new(
            EARTH_RADIUS_M * (p.lon - self.origin.lon).to_radians() * self.cos_lat0,
            EARTH_RADIUS_M * (p.lat - self.origin.lat).to_radians(),
        )
    }

    pub fn inverse(&self, p: Point2) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + (p.y / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin.lon + (p.x / (EARTH_RADIUS_M * self.cos_lat0)).to_degrees(),
        }
    }

    /// Great-circle length of a planar polyline, summed per segment.
    pub fn polyline_length(&self, polyline: &[Point2]) -> f64 {
        polyline
            .windows(2)
            .map(|w| haversine(self.inverse(w[0]), self.inverse(w[1])))
            .sum()
    }
}

/// Wraps an angle into [−π, π).
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut r = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return TAU itself for inputs a hair below a multiple of TAU
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// Closest point on segment `a→b` to `p`; returns (distance, parameter t ∈ [0,1]).
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> (f64, f64) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.dist(a.lerp(b, t)), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_points_have_zero_distance() {
        let a = GeoPoint::new(42.36, -71.09).unwrap();
        assert_eq!(haversine(a, a), 0.0);
    }

    #[test]
    fn one_degree_of_longitude_on_the_equator() {
        // R·π/180 = 111194.92664455873 m, evaluated in extended precision.
        let d = haversine(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 1.0).unwrap());
        assert!((d - 111_194.926_644_558_7).abs() < 0.1, "{d}");
    }

    #[test]
    fn haversine_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = GeoPoint::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0))
                .unwrap();
            let b = GeoPoint::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0))
                .unwrap();
            assert_eq!(haversine(a, b), haversine(b, a));
            assert!(haversine(a, b) >= 0.0);
        }
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.0).is_err());
        assert!(GeoPoint::new(0.0, -180.0).is_ok());
    }

    #[test]
    fn projection_round_trips() {
        let proj = LocalProjection::new(GeoPoint::new(42.36, -71.09).unwrap());
        let p = Point2::new(1234.5, -987.25);
        let back = proj.forward(proj.inverse(p));
        assert!(back.dist(p) < 1e-8);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        for a in [-10.0, -PI, -PI + 1e-12, 0.0, PI, 3.0 * PI, 7.5, -2.0 * PI] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((w - a) / (2.0 * PI)).round() * 2.0 * PI - (w - a) < 1e-9);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }
}
