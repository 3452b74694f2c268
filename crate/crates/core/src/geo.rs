//! Geographic primitives: WGS84 positions, great-circle distances, and the
//! small amount of spherical kinematics the simulation needs.
//!
//! All distances are in meters on a sphere of radius 6,371,000 m. The
//! operating areas modeled here are a few kilometers across, so segment
//! interpolation uses a local equirectangular approximation; the error against
//! a true great-circle at that scale is far below GPS noise.

use rand::Rng;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 position in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

impl Location {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Great-circle (haversine) distance between two positions, in meters.
pub fn distance(a: Location, b: Location) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Total length of a polyline through `points`, in meters.
pub fn path_length(points: &[Location]) -> f64 {
    points.windows(2).map(|w| distance(w[0], w[1])).sum()
}

/// Moves from `from` toward `to` by `step_m` meters.
///
/// Returns the new position and the unspent part of the step if the target
/// was reached before the budget ran out.
pub fn move_toward(from: Location, to: Location, step_m: f64) -> (Location, f64) {
    let remaining = distance(from, to);
    if step_m >= remaining {
        return (to, step_m - remaining);
    }
    let f = step_m / remaining;
    let pos = Location {
        lat: from.lat + f * (to.lat - from.lat),
        lon: from.lon + f * (to.lon - from.lon),
    };
    (pos, 0.0)
}

/// Position a fraction `f` (in [0,1]) of the way from `a` to `b`.
pub fn interpolate(a: Location, b: Location, f: f64) -> Location {
    Location {
        lat: a.lat + f * (b.lat - a.lat),
        lon: a.lon + f * (b.lon - a.lon),
    }
}

/// Samples a point uniformly from the disk of `radius_m` meters around
/// `center`.
///
/// Rejection-checked against the haversine metric so every returned point
/// satisfies `distance(center, p) <= radius_m` exactly as measured.
pub fn uniform_point_in_disk<R: Rng + ?Sized>(
    center: Location,
    radius_m: f64,
    rng: &mut R,
) -> Location {
    loop {
        let r = radius_m * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let dlat = (r * theta.cos()) / EARTH_RADIUS_M;
        let dlon = (r * theta.sin()) / (EARTH_RADIUS_M * center.lat.to_radians().cos());
        let p = Location {
            lat: center.lat + dlat.to_degrees(),
            lon: center.lon + dlon.to_degrees(),
        };
        if distance(center, p) <= radius_m {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Spherical law of cosines, as an independent route to the same
    /// great-circle distance.
    fn law_of_cosines(a: Location, b: Location) -> f64 {
        let la = a.lat.to_radians();
        let lb = b.lat.to_radians();
        let dlon = (b.lon - a.lon).to_radians();
        let c = (la.sin() * lb.sin() + la.cos() * lb.cos() * dlon.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let p = Location::new(40.4168, -3.7038);
        assert_eq!(distance(p, p), 0.0);
    }

    #[test]
    fn madrid_east_west_km() {
        let a = Location::new(40.4168, -3.7038);
        let b = Location::new(40.4168, -3.6920);
        let d = distance(a, b);
        assert!((d - law_of_cosines(a, b)).abs() < 1e-6);
        assert!((d - 999.0).abs() < 1.0, "got {d}");
    }

    #[test]
    fn move_toward_consumes_budget() {
        let a = Location::new(40.0, -3.0);
        let b = Location::new(40.01, -3.0);
        let total = distance(a, b);
        let (mid, leftover) = move_toward(a, b, total / 2.0);
        assert_eq!(leftover, 0.0);
        assert!((distance(a, mid) - total / 2.0).abs() < 1e-3);

        let (end, leftover) = move_toward(a, b, total + 25.0);
        assert_eq!(end, b);
        assert!((leftover - 25.0).abs() < 1e-9);
    }

    #[test]
    fn disk_sampling_respects_radius() {
        let center = Location::new(40.4168, -3.7038);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2_000 {
            let p = uniform_point_in_disk(center, 1_500.0, &mut rng);
            assert!(distance(center, p) <= 1_500.0);
        }
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(
            lat1 in -80.0f64..80.0, lon1 in -179.0f64..179.0,
            lat2 in -80.0f64..80.0, lon2 in -179.0f64..179.0,
        ) {
            let a = Location::new(lat1, lon1);
            let b = Location::new(lat2, lon2);
            prop_assert!((distance(a, b) - distance(b, a)).abs() < 1e-9);
        }

        #[test]
        fn distance_matches_law_of_cosines(
            lat in 39.0f64..41.0, lon in -4.0f64..-3.0,
            dlat in -0.05f64..0.05, dlon in -0.05f64..0.05,
        ) {
            let a = Location::new(lat, lon);
            let b = Location::new(lat + dlat, lon + dlon);
            // Law of cosines loses precision for near-coincident points, so
            // compare at meter scale with a loose absolute bound.
            prop_assert!((distance(a, b) - law_of_cosines(a, b)).abs() < 1e-3);
        }
    }
}
