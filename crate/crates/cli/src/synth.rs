//! Synthetic grid city: a rectangular street grid with arterials on every
//! fourth interior line and residential streets elsewhere, surrounded by a
//! highway ring that the arterials run out to. Every street is two-way.
//! Trajectories follow fastest routes between random segments at constant
//! per-level speeds, sampled at a fixed interval with Gaussian GPS noise.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use msrf_core::netio::geo::LocalProjection;
use msrf_core::netio::{GpsPoint, LabelClass, RoadLevel, RoadNetwork, Segment, Trajectory};
use msrf_core::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const EPOCH_BASE: f64 = 1_600_000_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCitySpec {
    /// Intersections per row.
    pub width: usize,
    /// Intersections per column.
    pub height: usize,
    pub spacing_m: f64,
    pub ring: bool,
    pub arterial_every: usize,
    pub n_trajectories: usize,
    pub noise_m: f64,
    pub sample_interval_s: f64,
    /// Extra routing cost of a turn, in seconds.
    pub turn_penalty_s: f64,
    /// Probability that both endpoints lie in the same west/east half;
    /// `None` draws endpoints uniformly.
    pub intra_half: Option<f64>,
    pub origin: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            spacing_m: 200.0,
            ring: true,
            arterial_every: 4,
            n_trajectories: 500,
            noise_m: 5.0,
            sample_interval_s: 2.0,
            turn_penalty_s: 20.0,
            intra_half: None,
            origin: (-8.61, 41.15),
            seed: 0,
        }
    }
}

impl SyntheticCitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!("grid must be at least 2x2, got {}x{}", self.width, self.height)));
        }
        if self.n_trajectories == 0 {
            return Err(Error::Config("n_trajectories must be at least 1".into()));
        }
        if self.arterial_every == 0 {
            return Err(Error::Config("arterial_every must be at least 1".into()));
        }
        if !(self.spacing_m > 0.0 && self.sample_interval_s > 0.0 && self.noise_m >= 0.0) {
            return Err(Error::Config("spacing, sample interval and noise must be positive".into()));
        }
        if let Some(p) = self.intra_half {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("intra_half must lie in [0, 1], got {}", p)));
            }
        }
        Ok(())
    }
}

pub fn level_speed_kmh(level: RoadLevel) -> f64 {
    match level {
        RoadLevel::Highway => 90.0,
        RoadLevel::Arterial => 50.0,
        RoadLevel::Residential => 30.0,
    }
}

fn level_class(level: RoadLevel) -> LabelClass {
    let code = match level {
        RoadLevel::Highway => 1,
        RoadLevel::Arterial => 3,
        RoadLevel::Residential => 4,
    };
    LabelClass::from_code(code).expect("class code in range")
}

fn level_lanes(level: RoadLevel) -> u32 {
    match level {
        RoadLevel::Highway => 3,
        RoadLevel::Arterial => 2,
        RoadLevel::Residential => 1,
    }
}

/// Arterial grid lines: interior indices that are multiples of
/// `arterial_every`, or the middle line when there are none.
fn arterial_lines(spec: &SyntheticCitySpec, count: usize) -> Vec<usize> {
    let lines: Vec<usize> = (1..count.saturating_sub(1)).filter(|i| i % spec.arterial_every == 0).collect();
    if lines.is_empty() {
        vec![(count - 1) / 2]
    } else {
        lines
    }
}

type Street = ((i64, i64), (i64, i64), RoadLevel);

/// Undirected streets in grid coordinates. The ring runs one block outside
/// the grid and meets it only at the ends of the arterials.
fn streets(spec: &SyntheticCitySpec) -> Vec<Street> {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let cols = arterial_lines(spec, spec.width);
    let rows = arterial_lines(spec, spec.height);
    let level = |i: usize, art: &[usize]| if art.contains(&i) { RoadLevel::Arterial } else { RoadLevel::Residential };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w - 1 {
            out.push(((x, y), (x + 1, y), level(y as usize, &rows)));
        }
    }
    for x in 0..w {
        for y in 0..h - 1 {
            out.push(((x, y), (x, y + 1), level(x as usize, &cols)));
        }
    }
    if spec.ring {
        for &c in &cols {
            out.push(((c as i64, 0), (c as i64, -1), RoadLevel::Arterial));
            out.push(((c as i64, h - 1), (c as i64, h), RoadLevel::Arterial));
        }
        for &r in &rows {
            out.push(((0, r as i64), (-1, r as i64), RoadLevel::Arterial));
            out.push(((w - 1, r as i64), (w, r as i64), RoadLevel::Arterial));
        }
        let mut perimeter = Vec::new();
        perimeter.extend((-1..w).map(|x| (x, -1)));
        perimeter.extend((-1..h).map(|y| (w, y)));
        perimeter.extend((0..=w).rev().map(|x| (x, h)));
        perimeter.extend((0..=h).rev().map(|y| (-1, y)));
        for i in 0..perimeter.len() {
            out.push((perimeter[i], perimeter[(i + 1) % perimeter.len()], RoadLevel::Highway));
        }
    }
    out
}

/// The generated network plus metric geometry for trajectory synthesis.
pub struct City {
    pub net: RoadNetwork,
    proj: LocalProjection,
    xy: Vec<[(f64, f64); 2]>,
    width_m: f64,
    turn_penalty_s: f64,
}

impl City {
    pub fn build(spec: &SyntheticCitySpec) -> Result<Self> {
        spec.validate()?;
        let proj = LocalProjection::new(spec.origin.0, spec.origin.1);
        let stride = spec.width as i64 + 2;
        let node = |(x, y): (i64, i64)| (y + 1) * stride + (x + 1);
        let pos = |(x, y): (i64, i64)| (x as f64 * spec.spacing_m, y as f64 * spec.spacing_m);
        let streets = streets(spec);
        let mut segments = Vec::with_capacity(2 * streets.len());
        let mut xy = Vec::with_capacity(2 * streets.len());
        for (a, b, level) in streets {
            for (u, v) in [(a, b), (b, a)] {
                let (pu, pv) = (pos(u), pos(v));
                segments.push(Segment {
                    orig_id: segments.len() as i64,
                    from_node: node(u),
                    to_node: node(v),
                    geometry: vec![proj.unproject(pu), proj.unproject(pv)],
                    length_m: spec.spacing_m,
                    lanes: level_lanes(level),
                    speed_kmh: level_speed_kmh(level),
                    level,
                    label: level_class(level),
                });
                xy.push([pu, pv]);
            }
        }
        let net = RoadNetwork::new(segments)?;
        Ok(Self { net, proj, xy, width_m: (spec.width - 1) as f64 * spec.spacing_m, turn_penalty_s: spec.turn_penalty_s })
    }

    fn west(&self, seg: usize) -> bool {
        let [a, b] = self.xy[seg];
        (a.0 + b.0) / 2.0 < self.width_m / 2.0
    }

    fn heading(&self, seg: usize) -> (f64, f64) {
        let [a, b] = self.xy[seg];
        (b.0 - a.0, b.1 - a.1)
    }

    fn is_turn(&self, from: usize, to: usize) -> bool {
        let (a, b) = (self.heading(from), self.heading(to));
        (a.0 * b.1 - a.1 * b.0).abs() > 1e-9
    }

    /// Fastest segment path from `src` to `dst`, both included, with the
    /// turn penalty added at every change of heading.
    pub fn fastest_route(&self, src: usize, dst: usize) -> Option<Vec<usize>> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        let cost = |s: usize| {
            let seg = self.net.segment(s);
            seg.length_m / (seg.speed_kmh / 3.6)
        };
        let n = self.net.len();
        let mut best = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        best[src] = cost(src);
        heap.push(Item(best[src], src));
        while let Some(Item(c, s)) = heap.pop() {
            if c > best[s] {
                continue;
            }
            if s == dst {
                break;
            }
            for &t in self.net.successors(s) {
                // No U-turns onto the reverse carriageway.
                if self.net.segment(t).to_node == self.net.segment(s).from_node {
                    continue;
                }
                let turn = if self.is_turn(s, t) { self.turn_penalty_s } else { 0.0 };
                let nc = c + cost(t) + turn;
                if nc < best[t] {
                    best[t] = nc;
                    prev[t] = s;
                    heap.push(Item(nc, t));
                }
            }
        }
        if !best[dst].is_finite() {
            return None;
        }
        let mut path = vec![dst];
        while *path.last().unwrap() != src {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        Some(path)
    }

    /// GPS trace of driving `route` from `t0`: one fix every `dt` seconds
    /// plus the final position. The trip starts at fraction `enter` of the
    /// first segment and stops at fraction `leave` of the last one.
    pub fn drive(
        &self,
        route: &[usize],
        (enter, leave): (f64, f64),
        t0: f64,
        dt: f64,
        noise: &mut dyn FnMut() -> (f64, f64),
    ) -> Vec<GpsPoint> {
        let mut legs = Vec::with_capacity(route.len());
        let mut t = 0.0;
        for &s in route {
            let seg = self.net.segment(s);
            let dur = seg.length_m / (seg.speed_kmh / 3.6);
            legs.push((s, t, t + dur));
            t += dur;
        }
        let start = enter * (legs[0].2 - legs[0].1);
        let last = legs[legs.len() - 1];
        let total = last.1 + leave * (last.2 - last.1) - start;
        let at = |time: f64| {
            let (s, a, b) = *legs.iter().find(|l| time <= l.2).unwrap_or(legs.last().unwrap());
            let f = ((time - a) / (b - a)).clamp(0.0, 1.0);
            let [p, q] = self.xy[s];
            (p.0 + f * (q.0 - p.0), p.1 + f * (q.1 - p.1))
        };
        let steps = (total / dt).floor() as usize;
        let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        if total - times.last().copied().unwrap_or(0.0) > 1e-9 {
            times.push(total);
        }
        times
            .into_iter()
            .map(|time| {
                let (x, y) = at(start + time);
                let (nx, ny) = noise();
                let (lon, lat) = self.proj.unproject((x + nx, y + ny));
                GpsPoint { lon, lat, t: (t0 + time).round_to_ms() }
            })
            .collect()
    }
}

trait RoundMs {
    fn round_to_ms(self) -> f64;
}

impl RoundMs for f64 {
    fn round_to_ms(self) -> f64 {
        (self * 1000.0).round() / 1000.0
    }
}

/// A trajectory with the route it was generated from.
#[derive(Debug, Clone)]
pub struct PlantedTrajectory {
    pub trajectory: Trajectory,
    pub route: Vec<usize>,
}

pub fn generate(spec: &SyntheticCitySpec) -> Result<(RoadNetwork, Vec<PlantedTrajectory>)> {
    let city = City::build(spec)?;
    let n = city.net.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_m.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let west: Vec<usize> = (0..n).filter(|&s| city.west(s)).collect();
    let east: Vec<usize> = (0..n).filter(|&s| !city.west(s)).collect();
    let mut out = Vec::with_capacity(spec.n_trajectories);
    while out.len() < spec.n_trajectories {
        let (src, dst) = match spec.intra_half {
            Some(p) if rng.gen::<f64>() < p => {
                let side = if rng.gen::<bool>() { &west } else { &east };
                (side[rng.gen_range(0..side.len())], side[rng.gen_range(0..side.len())])
            }
            _ => (rng.gen_range(0..n), rng.gen_range(0..n)),
        };
        let Some(route) = city.fastest_route(src, dst) else { continue };
        if route.len() < 3 {
            continue;
        }
        let id = out.len() as i64;
        let sigma = spec.noise_m;
        let ends = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
        let mut noise = || if sigma > 0.0 { (normal.sample(&mut rng), normal.sample(&mut rng)) } else { (0.0, 0.0) };
        let points = city.drive(&route, ends, EPOCH_BASE + id as f64 * 3600.0, spec.sample_interval_s, &mut noise);
        out.push(PlantedTrajectory { trajectory: Trajectory { traj_id: id, points }, route });
    }
    Ok((city.net, out))
}
