//! HMM map matcher.
//!
//! Hidden states are candidate positions on segments near each GPS point.
//! Emissions are Gaussian in the point-to-segment distance; transitions
//! penalise the gap between the network distance separating two candidates
//! and the great-circle distance separating the two fixes. Decoding is
//! Viterbi, and the decoded candidates are stitched into a connected
//! segment path with shortest routes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::netio::geo::{haversine_m, polyline_length, project_onto_polyline, LocalProjection};
use crate::netio::{RoadNetwork, RoadSequence, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    pub search_radius_m: f64,
    pub max_candidates: usize,
    /// Rate of the exponential transition penalty, per metre.
    pub transition_beta: f64,
    /// Emission standard deviation in metres.
    pub sigma_m: f64,
    /// Backward movement along one segment up to this distance is read as
    /// GPS jitter rather than a loop.
    pub backtrack_tolerance_m: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            search_radius_m: 50.0,
            max_candidates: 8,
            transition_beta: 0.1,
            sigma_m: 15.0,
            backtrack_tolerance_m: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    seg: usize,
    /// Distance from the segment start along its length, in `length_m` units.
    offset: f64,
    dist: f64,
}

/// A GPS fix assigned to a position of the matched path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPoint {
    pub point_index: usize,
    pub path_pos: usize,
    pub offset_m: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedTrajectory {
    pub seq: RoadSequence,
    pub points: Vec<MatchedPoint>,
}

/// Interpolated entry and exit times of one full pass over a segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Traversal {
    pub seg: usize,
    pub entry_t: f64,
    pub exit_t: f64,
}

struct GridIndex {
    cell: f64,
    origin: (f64, f64),
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
}

impl GridIndex {
    fn build(lines: &[Vec<(f64, f64)>], cell: f64) -> Self {
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in lines.iter().flatten() {
            min = (min.0.min(x), min.1.min(y));
            max = (max.0.max(x), max.1.max(y));
        }
        let cols = ((max.0 - min.0) / cell).floor() as usize + 1;
        let rows = ((max.1 - min.1) / cell).floor() as usize + 1;
        let mut grid = Self { cell, origin: min, cols, rows, cells: vec![Vec::new(); cols * rows] };
        for (i, line) in lines.iter().enumerate() {
            let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
            for &(x, y) in line {
                lo = (lo.0.min(x), lo.1.min(y));
                hi = (hi.0.max(x), hi.1.max(y));
            }
            let (c0, r0) = grid.cell_of(lo);
            let (c1, r1) = grid.cell_of(hi);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    grid.cells[r * cols + c].push(i);
                }
            }
        }
        grid
    }

    fn cell_of(&self, p: (f64, f64)) -> (usize, usize) {
        let c = ((p.0 - self.origin.0) / self.cell).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = ((p.1 - self.origin.1) / self.cell).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    fn near(&self, p: (f64, f64), radius: f64) -> Vec<usize> {
        let (c0, r0) = self.cell_of((p.0 - radius, p.1 - radius));
        let (c1, r1) = self.cell_of((p.0 + radius, p.1 + radius));
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend_from_slice(&self.cells[r * self.cols + c]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap; ties broken by segment id.
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Routes from the end of one segment: target → (distance to the target's
/// start, predecessor segment).
type Routes = HashMap<usize, (f64, usize)>;

/// Map matcher over a shared read-only network; `Sync`, so trajectories can
/// be matched in parallel.
pub struct MapMatcher<'a> {
    net: &'a RoadNetwork,
    params: MatchParams,
    proj: LocalProjection,
    lines: Vec<Vec<(f64, f64)>>,
    planar_len: Vec<f64>,
    index: GridIndex,
}

impl<'a> MapMatcher<'a> {
    pub fn new(net: &'a RoadNetwork, params: MatchParams) -> Self {
        let bb = net.bounding_box();
        let proj = LocalProjection::new((bb.min_lon + bb.max_lon) / 2.0, (bb.min_lat + bb.max_lat) / 2.0);
        let lines: Vec<Vec<(f64, f64)>> =
            net.segments().iter().map(|s| s.geometry.iter().map(|&p| proj.project(p)).collect()).collect();
        let planar_len = lines.iter().map(|l| polyline_length(l)).collect();
        let index = GridIndex::build(&lines, params.search_radius_m.max(1.0));
        Self { net, params, proj, lines, planar_len, index }
    }

    pub fn params(&self) -> &MatchParams {
        &self.params
    }

    fn candidates(&self, lon: f64, lat: f64) -> Vec<Candidate> {
        let p = self.proj.project((lon, lat));
        let mut out: Vec<Candidate> = self
            .index
            .near(p, self.params.search_radius_m)
            .into_iter()
            .filter_map(|seg| {
                let (dist, along) = project_onto_polyline(&self.lines[seg], p);
                if dist > self.params.search_radius_m {
                    return None;
                }
                let frac = if self.planar_len[seg] > 0.0 { along / self.planar_len[seg] } else { 0.0 };
                Some(Candidate { seg, offset: frac * self.net.segment(seg).length_m, dist })
            })
            .collect();
        out.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.seg.cmp(&b.seg)));
        out.truncate(self.params.max_candidates);
        out
    }

    fn routes_from(&self, seg: usize, limit: f64) -> Routes {
        let mut best: Routes = HashMap::new();
        let mut heap = BinaryHeap::new();
        for &j in self.net.successors(seg) {
            best.insert(j, (0.0, seg));
            heap.push(HeapEntry(0.0, j));
        }
        while let Some(HeapEntry(d, u)) = heap.pop() {
            if d > limit {
                break;
            }
            if best.get(&u).map_or(false, |&(bd, _)| d > bd) {
                continue;
            }
            let nd = d + self.net.segment(u).length_m;
            if nd > limit {
                continue;
            }
            for &w in self.net.successors(u) {
                let better = best.get(&w).map_or(true, |&(bd, _)| nd < bd);
                if better {
                    best.insert(w, (nd, u));
                    heap.push(HeapEntry(nd, w));
                }
            }
        }
        best
    }

    fn route_limit(&self, gc: f64) -> f64 {
        (3.0 * gc).max(gc + 2.0 * self.params.search_radius_m) + 100.0
    }

    /// Network distance between two candidates, or `None` if unreachable
    /// within the route limit.
    fn network_distance(&self, a: &Candidate, b: &Candidate, routes: &Routes) -> Option<f64> {
        if a.seg == b.seg && b.offset >= a.offset - self.params.backtrack_tolerance_m {
            return Some((b.offset - a.offset).max(0.0));
        }
        routes
            .get(&b.seg)
            .map(|&(d, _)| (self.net.segment(a.seg).length_m - a.offset).max(0.0) + d + b.offset)
    }

    fn emission(&self, c: &Candidate) -> f64 {
        -0.5 * (c.dist / self.params.sigma_m).powi(2)
    }

    /// Full match with per-point assignments.
    pub fn match_detailed(&self, traj: &Trajectory) -> Result<MatchedTrajectory> {
        let pts = &traj.points;
        let cands: Vec<Vec<Candidate>> = pts.iter().map(|p| self.candidates(p.lon, p.lat)).collect();
        if cands.iter().all(|c| c.is_empty()) {
            return Err(Error::NoMatch(traj.traj_id));
        }

        // Each piece: (first point index, decoded candidate per point).
        let mut pieces: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut start = 0usize;
        let mut scores: Vec<f64> = Vec::new();
        let mut back: Vec<Vec<usize>> = Vec::new();
        let mut open = false;

        let close = |start: usize, scores: &[f64], back: &[Vec<usize>], pieces: &mut Vec<(usize, Vec<usize>)>| {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            let mut path = vec![best];
            for bp in back.iter().rev() {
                let prev = bp[*path.last().unwrap()];
                path.push(prev);
            }
            path.reverse();
            pieces.push((start, path));
        };

        for t in 0..pts.len() {
            if cands[t].is_empty() {
                if open {
                    close(start, &scores, &back, &mut pieces);
                    open = false;
                }
                continue;
            }
            if !open {
                start = t;
                scores = cands[t].iter().map(|c| self.emission(c)).collect();
                back.clear();
                open = true;
                continue;
            }
            let gc = haversine_m((pts[t - 1].lon, pts[t - 1].lat), (pts[t].lon, pts[t].lat));
            let limit = self.route_limit(gc);
            let routes: Vec<Routes> = cands[t - 1].iter().map(|c| self.routes_from(c.seg, limit)).collect();
            let mut next = vec![f64::NEG_INFINITY; cands[t].len()];
            let mut bp = vec![0usize; cands[t].len()];
            for (j, cb) in cands[t].iter().enumerate() {
                for (i, ca) in cands[t - 1].iter().enumerate() {
                    if scores[i] == f64::NEG_INFINITY {
                        continue;
                    }
                    if let Some(d) = self.network_distance(ca, cb, &routes[i]) {
                        let s = scores[i] - self.params.transition_beta * (d - gc).abs();
                        if s > next[j] {
                            next[j] = s;
                            bp[j] = i;
                        }
                    }
                }
                if next[j] > f64::NEG_INFINITY {
                    next[j] += self.emission(cb);
                }
            }
            if next.iter().all(|&s| s == f64::NEG_INFINITY) {
                close(start, &scores, &back, &mut pieces);
                start = t;
                scores = cands[t].iter().map(|c| self.emission(c)).collect();
                back.clear();
            } else {
                scores = next;
                back.push(bp);
            }
        }
        if open {
            close(start, &scores, &back, &mut pieces);
        }

        let (start, choice) = pieces
            .into_iter()
            .fold(None::<(usize, Vec<usize>)>, |best, p| match best {
                Some(b) if b.1.len() >= p.1.len() => Some(b),
                _ => Some(p),
            })
            .expect("at least one piece");

        let decoded: Vec<Candidate> = choice.iter().enumerate().map(|(k, &c)| cands[start + k][c]).collect();
        let mut path = vec![decoded[0].seg];
        let mut points = vec![MatchedPoint {
            point_index: start,
            path_pos: 0,
            offset_m: decoded[0].offset,
            t: pts[start].t,
        }];
        for k in 1..decoded.len() {
            let (a, b) = (&decoded[k - 1], &decoded[k]);
            let same = a.seg == b.seg && b.offset >= a.offset - self.params.backtrack_tolerance_m;
            if !same {
                let t = start + k;
                let gc = haversine_m((pts[t - 1].lon, pts[t - 1].lat), (pts[t].lon, pts[t].lat));
                let routes = self.routes_from(a.seg, self.route_limit(gc));
                let mut via = Vec::new();
                let mut cur = b.seg;
                loop {
                    let &(_, prev) = routes.get(&cur).expect("decoded transition is reachable");
                    if prev == a.seg {
                        break;
                    }
                    via.push(prev);
                    cur = prev;
                }
                path.extend(via.into_iter().rev());
                path.push(b.seg);
            }
            points.push(MatchedPoint {
                point_index: start + k,
                path_pos: path.len() - 1,
                offset_m: b.offset,
                t: pts[start + k].t,
            });
        }
        debug_assert!(path.windows(2).all(|w| w[0] != w[1]));
        Ok(MatchedTrajectory { seq: RoadSequence { traj_id: traj.traj_id, segs: path }, points })
    }

    pub fn match_trajectory(&self, traj: &Trajectory) -> Result<RoadSequence> {
        self.match_detailed(traj).map(|m| m.seq)
    }
}

impl MatchedTrajectory {
    /// Entry and exit times of every path segment that the fixes bracket on
    /// both sides, by linear interpolation of time over path distance.
    pub fn traversals(&self, net: &RoadNetwork) -> Vec<Traversal> {
        let segs = &self.seq.segs;
        let mut cum = Vec::with_capacity(segs.len() + 1);
        cum.push(0.0);
        for &s in segs {
            cum.push(cum.last().unwrap() + net.segment(s).length_m);
        }
        let mut track: Vec<(f64, f64)> = Vec::with_capacity(self.points.len());
        let mut run_max = f64::NEG_INFINITY;
        for p in &self.points {
            let pos = (cum[p.path_pos] + p.offset_m).max(run_max);
            run_max = pos;
            track.push((pos, p.t));
        }
        let (Some(&first), Some(&last)) = (track.first(), track.last()) else {
            return Vec::new();
        };
        let time_at = |pos: f64| -> f64 {
            let k = track.partition_point(|&(s, _)| s < pos);
            if k == 0 {
                return track[0].1;
            }
            let (s0, t0) = track[k - 1];
            let (s1, t1) = track[k.min(track.len() - 1)];
            if s1 > s0 {
                t0 + (pos - s0) / (s1 - s0) * (t1 - t0)
            } else {
                t1
            }
        };
        let mut out = Vec::new();
        for (p, &seg) in segs.iter().enumerate() {
            let (entry, exit) = (cum[p], cum[p + 1]);
            if entry < first.0 || exit > last.0 {
                continue;
            }
            let (te, tx) = (time_at(entry), time_at(exit));
            if tx > te {
                out.push(Traversal { seg, entry_t: te, exit_t: tx });
            }
        }
        out
    }
}

/// Matches one trajectory. Builds a fresh spatial index; use [`MapMatcher`]
/// directly when matching many trajectories.
pub fn map_match(traj: &Trajectory, net: &RoadNetwork, params: MatchParams) -> Result<RoadSequence> {
    MapMatcher::new(net, params).match_trajectory(traj)
}
