//! Great-circle distance and a local metric projection.

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection around a reference point; accurate to well
/// under a metre across a city.
#[derive(Clone, Copy, Debug)]
pub struct LocalProjection {
    lon0: f64,
    lat0: f64,
    cos_lat0: f64,
}

impl LocalProjection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Self { lon0, lat0, cos_lat0: lat0.to_radians().cos() }
    }

    pub fn project(&self, p: (f64, f64)) -> (f64, f64) {
        let x = (p.0 - self.lon0).to_radians() * self.cos_lat0 * EARTH_RADIUS_M;
        let y = (p.1 - self.lat0).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn unproject(&self, xy: (f64, f64)) -> (f64, f64) {
        let lon = self.lon0 + (xy.0 / (EARTH_RADIUS_M * self.cos_lat0)).to_degrees();
        let lat = self.lat0 + (xy.1 / EARTH_RADIUS_M).to_degrees();
        (lon, lat)
    }
}

pub fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Closest point of a planar polyline to `p`: `(distance, arc length from
/// the start to the foot point)`.
pub fn project_onto_polyline(pts: &[(f64, f64)], p: (f64, f64)) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut travelled = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let foot = (a.0 + t * dx, a.1 + t * dy);
        let d = dist(foot, p);
        if d < best.0 {
            best = (d, travelled + t * len2.sqrt());
        }
        travelled += len2.sqrt();
    }
    best
}
