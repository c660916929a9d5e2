//! Spherical-Earth position arithmetic and per-tick kinematics.
//!
//! Separation is horizontal only: altitude rides along as metadata and never
//! enters a distance.

use core::f64::consts::PI;

use libm::{asin, atan2, cos, sin, sqrt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius of the spherical model, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of arc on the model sphere.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeoError {
    #[error("undefined bearing: points coincide")]
    UndefinedBearing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl GeoPosition {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Self {
        Self {
            lat_deg,
            lon_deg,
            alt_m,
        }
    }

    /// Same horizontal position at a different altitude.
    pub fn with_alt(self, alt_m: f64) -> Self {
        Self { alt_m, ..self }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat_deg)
            && (-180.0..=180.0).contains(&self.lon_deg)
            && self.alt_m >= 0.0
    }

    /// Point reached from `self` by moving `east_m` and `north_m` along the
    /// great circle through the combined bearing.
    pub fn offset(self, east_m: f64, north_m: f64) -> Self {
        let dist = sqrt(east_m * east_m + north_m * north_m);
        if dist == 0.0 {
            return self;
        }
        let bearing = normalize_heading(atan2(east_m, north_m).to_degrees());
        displace(self, bearing, dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub speed_mps: f64,
    pub heading_deg: f64,
    pub accel_mps2: f64,
}

impl Kinematics {
    pub fn new(speed_mps: f64, heading_deg: f64, accel_mps2: f64) -> Self {
        Self {
            speed_mps: speed_mps.max(0.0),
            heading_deg: normalize_heading(heading_deg),
            accel_mps2,
        }
    }
}

/// Wrap an angle in degrees into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg % 360.0;
    let h = if h < 0.0 { h + 360.0 } else { h };
    // -1e-18 % 360 + 360 rounds to 360.0
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

fn normalize_lon(deg: f64) -> f64 {
    if (-180.0..=180.0).contains(&deg) {
        return deg;
    }
    let l = (deg + 180.0) % 360.0;
    let l = if l < 0.0 { l + 360.0 } else { l };
    l - 180.0
}

/// Great-circle distance in meters, ignoring altitude.
pub fn haversine_distance(a: GeoPosition, b: GeoPosition) -> f64 {
    let phi1 = a.lat_deg.to_radians();
    let phi2 = b.lat_deg.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon_deg - a.lon_deg).to_radians();
    let s1 = sin(dphi / 2.0);
    let s2 = sin(dlambda / 2.0);
    let h = (s1 * s1 + cos(phi1) * cos(phi2) * s2 * s2).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * asin(sqrt(h))
}

/// Initial great-circle bearing from `a` toward `b`, degrees in `[0, 360)`.
pub fn initial_bearing(a: GeoPosition, b: GeoPosition) -> Result<f64, GeoError> {
    if a.lat_deg == b.lat_deg && a.lon_deg == b.lon_deg {
        return Err(GeoError::UndefinedBearing);
    }
    let phi1 = a.lat_deg.to_radians();
    let phi2 = b.lat_deg.to_radians();
    let dlambda = (b.lon_deg - a.lon_deg).to_radians();
    let y = sin(dlambda) * cos(phi2);
    let x = cos(phi1) * sin(phi2) - sin(phi1) * cos(phi2) * cos(dlambda);
    Ok(normalize_heading(atan2(y, x).to_degrees()))
}

fn displace(p: GeoPosition, bearing_deg: f64, dist_m: f64) -> GeoPosition {
    let delta = dist_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = p.lat_deg.to_radians();
    let lambda1 = p.lon_deg.to_radians();
    let sin_phi2 = (sin(phi1) * cos(delta) + cos(phi1) * sin(delta) * cos(theta)).clamp(-1.0, 1.0);
    let phi2 = asin(sin_phi2);
    let lambda2 = lambda1
        + atan2(
            sin(theta) * sin(delta) * cos(phi1),
            cos(delta) - sin(phi1) * sin_phi2,
        );
    GeoPosition {
        lat_deg: phi2.to_degrees(),
        lon_deg: normalize_lon(lambda2.to_degrees()),
        alt_m: p.alt_m,
    }
}

/// Advance `p` by `speed_mps * dt_s` meters along the great circle leaving at
/// `heading_deg`.
pub fn step_position(p: GeoPosition, heading_deg: f64, speed_mps: f64, dt_s: f64) -> GeoPosition {
    let dist = speed_mps * dt_s;
    if dist <= 0.0 {
        return p;
    }
    displace(p, heading_deg, dist)
}

/// `speed + accel * dt`, clamped to `[v_min, v_max]`.
pub fn update_speed(speed_mps: f64, accel_mps2: f64, dt_s: f64, v_min: f64, v_max: f64) -> f64 {
    (speed_mps + accel_mps2 * dt_s).clamp(v_min, v_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPosition {
        GeoPosition::new(lat, lon, 0.0)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn haversine_identity_and_antipode() {
        let a = p(33.137421, -96.861632);
        assert_eq!(haversine_distance(a, a), 0.0);
        let d = haversine_distance(p(0.0, 0.0), p(0.0, 180.0));
        assert!(rel(d, PI * EARTH_RADIUS_M) < 1e-6);
    }

    #[test]
    fn bearing_cardinal_directions() {
        assert_eq!(initial_bearing(p(0.0, 0.0), p(1.0, 0.0)).unwrap(), 0.0);
        assert!((initial_bearing(p(0.0, 0.0), p(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        assert!((initial_bearing(p(0.0, 0.0), p(-1.0, 0.0)).unwrap() - 180.0).abs() < 1e-12);
        assert!((initial_bearing(p(0.0, 0.0), p(0.0, -1.0)).unwrap() - 270.0).abs() < 1e-12);
        assert_eq!(
            initial_bearing(p(3.0, 4.0), p(3.0, 4.0)),
            Err(GeoError::UndefinedBearing)
        );
    }

    #[test]
    fn step_zero_speed_is_identity() {
        let a = p(33.1, -96.8);
        assert_eq!(step_position(a, 45.0, 0.0, 1.0), a);
    }

    #[test]
    fn step_thirty_meters_any_heading() {
        let a = p(33.137421, -96.861632);
        for h in [0.0, 20.13, 90.0, 181.0, 270.0, 359.9] {
            let b = step_position(a, h, 30.0, 1.0);
            assert!((haversine_distance(a, b) - 30.0).abs() < 1e-4, "heading {h}");
        }
    }

    #[test]
    fn step_north_from_equator_matches_flat_earth() {
        let b = step_position(p(0.0, 0.0), 0.0, 44.88, 1.0);
        let expected = 44.88 / METERS_PER_DEGREE;
        assert!(rel(b.lat_deg, expected) < 1e-6);
        assert!(b.lon_deg.abs() < 1e-12);
    }

    #[test]
    fn update_speed_examples() {
        assert!((update_speed(34.98, 1.7, 1.0, 0.0, 41.16) - 36.68).abs() < 1e-12);
        assert_eq!(update_speed(44.88, 1.71, 1.0, 0.0, 44.88), 44.88);
        assert_eq!(update_speed(0.5, -1.02, 1.0, 0.0, 30.12), 0.0);
    }

    #[test]
    fn heading_normalization() {
        assert_eq!(normalize_heading(360.0), 0.0);
        assert_eq!(normalize_heading(-90.0), 270.0);
        assert_eq!(normalize_heading(725.0), 5.0);
        assert!(normalize_heading(-1e-18) < 360.0);
    }

    #[test]
    fn longitude_wraps_across_antimeridian() {
        let b = step_position(p(0.0, 179.9999), 90.0, 1000.0, 1.0);
        assert!(b.is_valid());
        assert!(b.lon_deg < 0.0);
    }
}
