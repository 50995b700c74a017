//! Road networks, trajectories and map matching.

pub mod geo;
mod files;
mod matcher;

pub use files::{
    load_road_network, load_trajectories, read_matched_sequences, read_road_network, read_trajectories,
    read_traversals, write_matched_sequences, write_road_network, write_trajectories, write_traversals,
};
pub use matcher::{map_match, MapMatcher, MatchParams, MatchedPoint, MatchedTrajectory, Traversal};

use std::collections::HashMap;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoadLevel {
    Highway,
    Arterial,
    Residential,
}

impl RoadLevel {
    pub const ALL: [RoadLevel; 3] = [RoadLevel::Highway, RoadLevel::Arterial, RoadLevel::Residential];

    pub fn code(self) -> u8 {
        match self {
            RoadLevel::Highway => 1,
            RoadLevel::Arterial => 2,
            RoadLevel::Residential => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(RoadLevel::Highway),
            2 => Some(RoadLevel::Arterial),
            3 => Some(RoadLevel::Residential),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadLevel::Highway => "highway",
            RoadLevel::Arterial => "arterial",
            RoadLevel::Residential => "residential",
        }
    }
}

/// Merged OSM road class, `1..=5`, or unlabeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelClass(u8);

impl LabelClass {
    pub const UNLABELED: LabelClass = LabelClass(0);
    pub const N_CLASSES: usize = 5;

    pub fn from_code(code: u8) -> Option<Self> {
        (code as usize <= Self::N_CLASSES).then_some(LabelClass(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Class number `1..=5`, `None` when unlabeled.
    pub fn class(self) -> Option<usize> {
        (self.0 != 0).then_some(self.0 as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Identifier as it appears in the input file.
    pub orig_id: i64,
    pub from_node: i64,
    pub to_node: i64,
    /// `(lon, lat)` vertices, at least two.
    pub geometry: Vec<(f64, f64)>,
    pub length_m: f64,
    pub lanes: u32,
    pub speed_kmh: f64,
    pub level: RoadLevel,
    pub label: LabelClass,
}

/// Directed segment graph. Segment `i` precedes `j` when `j` starts at the
/// node where `i` ends.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    segments: Vec<Segment>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
    lookup: HashMap<i64, usize>,
}

impl RoadNetwork {
    /// Validates the segments and builds adjacency. Segments are densified
    /// to `0..n` in ascending order of their original ids.
    pub fn new(mut segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::NoSegments);
        }
        segments.sort_by_key(|s| s.orig_id);
        for w in segments.windows(2) {
            if w[0].orig_id == w[1].orig_id {
                return Err(Error::DuplicateSegment(w[0].orig_id));
            }
        }
        for s in &segments {
            for node in [s.from_node, s.to_node] {
                if node < 0 {
                    return Err(Error::DanglingNode { seg_id: s.orig_id, node });
                }
            }
            if s.geometry.len() < 2 {
                return Err(Error::Invalid(format!("segment {} has fewer than 2 geometry points", s.orig_id)));
            }
            if !(s.length_m > 0.0 && s.length_m.is_finite()) {
                return Err(Error::Invalid(format!("segment {} has non-positive length", s.orig_id)));
            }
            if s.lanes < 1 {
                return Err(Error::Invalid(format!("segment {} has no lanes", s.orig_id)));
            }
            if !(s.speed_kmh > 0.0 && s.speed_kmh.is_finite()) {
                return Err(Error::Invalid(format!("segment {} has non-positive speed limit", s.orig_id)));
            }
        }
        let n = segments.len();
        let mut by_from: HashMap<i64, Vec<usize>> = HashMap::new();
        for (i, s) in segments.iter().enumerate() {
            by_from.entry(s.from_node).or_default().push(i);
        }
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for (i, s) in segments.iter().enumerate() {
            if let Some(next) = by_from.get(&s.to_node) {
                for &j in next {
                    if j != i {
                        out_adj[i].push(j);
                        in_adj[j].push(i);
                    }
                }
            }
        }
        for row in in_adj.iter_mut() {
            row.sort_unstable();
        }
        let lookup = segments.iter().enumerate().map(|(i, s)| (s.orig_id, i)).collect();
        Ok(Self { segments, out_adj, in_adj, lookup })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, i: usize) -> &Segment {
        &self.segments[i]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Successor segments of `i`, ascending.
    pub fn successors(&self, i: usize) -> &[usize] {
        &self.out_adj[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.out_adj[i].binary_search(&j).is_ok()
    }

    /// Dense index of an original segment id.
    pub fn dense_id(&self, orig: i64) -> Option<usize> {
        self.lookup.get(&orig).copied()
    }

    pub fn orig_id(&self, i: usize) -> i64 {
        self.segments[i].orig_id
    }

    /// Number of distinct endpoint nodes.
    pub fn intersection_count(&self) -> usize {
        let mut nodes: Vec<i64> = self.segments.iter().flat_map(|s| [s.from_node, s.to_node]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes.len()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut b = BoundingBox {
            min_lon: f64::INFINITY,
            min_lat: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
            max_lat: f64::NEG_INFINITY,
        };
        for &(lon, lat) in self.segments.iter().flat_map(|s| s.geometry.iter()) {
            b.min_lon = b.min_lon.min(lon);
            b.min_lat = b.min_lat.min(lat);
            b.max_lon = b.max_lon.max(lon);
            b.max_lat = b.max_lat.max(lat);
        }
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub traj_id: i64,
    pub points: Vec<GpsPoint>,
}

/// Map-matched trajectory: consecutive entries are distinct and adjacent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoadSequence {
    pub traj_id: i64,
    pub segs: Vec<usize>,
}

impl RoadSequence {
    /// Collapses runs of identical segment ids.
    pub fn collapsed(traj_id: i64, mut segs: Vec<usize>) -> Self {
        segs.dedup();
        Self { traj_id, segs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BoundingBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self> {
        if !(min_lon < max_lon && min_lat < max_lat) {
            return Err(Error::Invalid(format!(
                "bounding box needs min < max on both axes, got ({}, {}, {}, {})",
                min_lon, min_lat, max_lon, max_lat
            )));
        }
        Ok(Self { min_lon, min_lat, max_lon, max_lat })
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon <= self.max_lon && lat >= self.min_lat && lat <= self.max_lat
    }

    pub fn expanded(&self, deg: f64) -> Self {
        Self {
            min_lon: self.min_lon - deg,
            min_lat: self.min_lat - deg,
            max_lon: self.max_lon + deg,
            max_lat: self.max_lat + deg,
        }
    }
}

/// Drops trajectories that leave `bbox` or have fewer than `min_points`
/// points.
pub fn filter_trajectories(trajs: &[Trajectory], bbox: &BoundingBox, min_points: usize) -> Vec<Trajectory> {
    let min_points = min_points.max(2);
    trajs
        .iter()
        .filter(|t| t.points.len() >= min_points && t.points.iter().all(|p| bbox.contains(p.lon, p.lat)))
        .cloned()
        .collect()
}

/// Fraction of segments appearing in at least one sequence.
pub fn coverage(seqs: &[RoadSequence], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut seen = vec![false; n];
    for s in seqs {
        for &i in &s.segs {
            seen[i] = true;
        }
    }
    seen.iter().filter(|&&b| b).count() as f64 / n as f64
}
