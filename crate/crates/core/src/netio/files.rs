use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::netio::{GpsPoint, LabelClass, RoadLevel, RoadNetwork, RoadSequence, Segment, Trajectory, Traversal};
use crate::{Error, Result};

const NETWORK_HEADER: [&str; 9] =
    ["seg_id", "from_node", "to_node", "length_m", "lanes", "speed_kmh", "level", "label_class", "wkt_linestring"];
const TRAJECTORY_HEADER: [&str; 5] = ["traj_id", "point_index", "lon", "lat", "epoch_seconds"];
const TRAVERSAL_HEADER: [&str; 4] = ["traj_id", "seg_id", "entry_s", "exit_s"];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))
}

fn field<'r, T: std::str::FromStr>(rec: &'r csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(idx).ok_or_else(|| Error::Parse { line, msg: format!("missing field {}", name) })?;
    raw.trim().parse::<T>().map_err(|e| Error::Parse { line, msg: format!("field {} = {:?}: {}", name, raw, e) })
}

fn check_header(rec: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = rec.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::Parse { line: 1, msg: format!("expected header {:?}, got {:?}", want.join(","), got.join(",")) });
    }
    Ok(())
}

fn parse_wkt(raw: &str, line: usize) -> Result<Vec<(f64, f64)>> {
    let s = raw.trim();
    let bad = |msg: &str| Error::Parse { line, msg: format!("{}: {:?}", msg, raw) };
    let body = s
        .strip_prefix("LINESTRING")
        .map(str::trim_start)
        .and_then(|b| b.strip_prefix('('))
        .and_then(|b| b.strip_suffix(')'))
        .ok_or_else(|| bad("expected LINESTRING(...)"))?;
    body.split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let lon = it.next().and_then(|v| v.parse::<f64>().ok());
            let lat = it.next().and_then(|v| v.parse::<f64>().ok());
            match (lon, lat, it.next()) {
                (Some(lon), Some(lat), None) if lon.is_finite() && lat.is_finite() => Ok((lon, lat)),
                _ => Err(bad("bad coordinate pair")),
            }
        })
        .collect()
}

fn format_wkt(pts: &[(f64, f64)]) -> String {
    let body: Vec<String> = pts.iter().map(|(lon, lat)| format!("{} {}", lon, lat)).collect();
    format!("LINESTRING({})", body.join(", "))
}

pub fn read_road_network<R: Read>(input: R) -> Result<RoadNetwork> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &NETWORK_HEADER)?;
    let mut segments = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let level_code: u8 = field(&rec, 6, "level", line)?;
        let label_code: u8 = field(&rec, 7, "label_class", line)?;
        let seg = Segment {
            orig_id: field(&rec, 0, "seg_id", line)?,
            from_node: field(&rec, 1, "from_node", line)?,
            to_node: field(&rec, 2, "to_node", line)?,
            length_m: field(&rec, 3, "length_m", line)?,
            lanes: field(&rec, 4, "lanes", line)?,
            speed_kmh: field(&rec, 5, "speed_kmh", line)?,
            level: RoadLevel::from_code(level_code)
                .ok_or_else(|| Error::Parse { line, msg: format!("level {} not in 1..=3", level_code) })?,
            label: LabelClass::from_code(label_code)
                .ok_or_else(|| Error::Parse { line, msg: format!("label_class {} not in 0..=5", label_code) })?,
            geometry: parse_wkt(rec.get(8).unwrap_or_default(), line)?,
        };
        if seg.geometry.len() < 2 {
            return Err(Error::Parse { line, msg: "geometry needs at least 2 points".into() });
        }
        segments.push(seg);
    }
    RoadNetwork::new(segments)
}

pub fn load_road_network(path: &Path) -> Result<RoadNetwork> {
    read_road_network(BufReader::new(open(path)?))
}

pub fn write_road_network<W: Write>(out: W, net: &RoadNetwork) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(NETWORK_HEADER)?;
    for s in net.segments() {
        w.write_record([
            s.orig_id.to_string(),
            s.from_node.to_string(),
            s.to_node.to_string(),
            s.length_m.to_string(),
            s.lanes.to_string(),
            s.speed_kmh.to_string(),
            s.level.code().to_string(),
            s.label.code().to_string(),
            format_wkt(&s.geometry),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the trajectory CSV, groups rows by `traj_id` and orders points by
/// `point_index`. Trajectories with fewer than two points are dropped.
pub fn read_trajectories<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &TRAJECTORY_HEADER)?;
    let mut groups: BTreeMap<i64, Vec<(i64, usize, GpsPoint)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let traj_id: i64 = field(&rec, 0, "traj_id", line)?;
        let idx: i64 = field(&rec, 1, "point_index", line)?;
        let lon: f64 = field(&rec, 2, "lon", line)?;
        let lat: f64 = field(&rec, 3, "lat", line)?;
        let t: f64 = field(&rec, 4, "epoch_seconds", line)?;
        if !(lon.is_finite() && lat.is_finite() && t.is_finite()) {
            return Err(Error::Parse { line, msg: "non-finite coordinate or timestamp".into() });
        }
        groups.entry(traj_id).or_default().push((idx, line, GpsPoint { lon, lat, t }));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (traj_id, mut pts) in groups {
        pts.sort_by_key(|&(idx, _, _)| idx);
        for w in pts.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Parse {
                    line: w[1].1,
                    msg: format!("trajectory {} repeats point_index {}", traj_id, w[1].0),
                });
            }
            if w[1].2.t < w[0].2.t {
                return Err(Error::Parse {
                    line: w[1].1,
                    msg: format!("trajectory {} has decreasing timestamps", traj_id),
                });
            }
        }
        if pts.len() >= 2 {
            out.push(Trajectory { traj_id, points: pts.into_iter().map(|(_, _, p)| p).collect() });
        }
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(BufReader::new(open(path)?))
}

pub fn write_trajectories<W: Write>(out: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for t in trajs {
        for (i, p) in t.points.iter().enumerate() {
            w.write_record([
                t.traj_id.to_string(),
                i.to_string(),
                p.lon.to_string(),
                p.lat.to_string(),
                p.t.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `traj_id,seg_id[;seg_id]*`, one trajectory per line, original segment ids.
pub fn write_matched_sequences<W: Write>(mut out: W, seqs: &[RoadSequence], net: &RoadNetwork) -> Result<()> {
    for s in seqs {
        let ids: Vec<String> = s.segs.iter().map(|&i| net.orig_id(i).to_string()).collect();
        writeln!(out, "{},{}", s.traj_id, ids.join(";"))?;
    }
    Ok(())
}

pub fn read_matched_sequences<R: BufRead>(input: R, net: &RoadNetwork) -> Result<Vec<RoadSequence>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse { line: lineno, msg: "expected traj_id,seg_ids".into() })?;
        let traj_id = id.trim().parse::<i64>().map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let mut segs = Vec::new();
        for tok in rest.split(';').filter(|t| !t.trim().is_empty()) {
            let orig = tok.trim().parse::<i64>().map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
            let dense = net
                .dense_id(orig)
                .ok_or_else(|| Error::Parse { line: lineno, msg: format!("unknown seg_id {}", orig) })?;
            segs.push(dense);
        }
        out.push(RoadSequence::collapsed(traj_id, segs));
    }
    Ok(out)
}

pub fn write_traversals<W: Write>(out: W, rows: &[(i64, Traversal)], net: &RoadNetwork) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(TRAVERSAL_HEADER)?;
    for (traj_id, t) in rows {
        w.write_record([
            traj_id.to_string(),
            net.orig_id(t.seg).to_string(),
            t.entry_t.to_string(),
            t.exit_t.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traversals<R: Read>(input: R, net: &RoadNetwork) -> Result<Vec<(i64, Traversal)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(rdr.headers()?, &TRAVERSAL_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let traj_id: i64 = field(&rec, 0, "traj_id", line)?;
        let orig: i64 = field(&rec, 1, "seg_id", line)?;
        let seg =
            net.dense_id(orig).ok_or_else(|| Error::Parse { line, msg: format!("unknown seg_id {}", orig) })?;
        out.push((
            traj_id,
            Traversal { seg, entry_t: field(&rec, 2, "entry_s", line)?, exit_t: field(&rec, 3, "exit_s", line)? },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NET: &str = "seg_id,from_node,to_node,length_m,lanes,speed_kmh,level,label_class,wkt_linestring
0,10,11,120.5,2,50,2,3,\"LINESTRING(-8.61 41.15, -8.6095 41.1505)\"
1,11,12,80,1,30,3,4,\"LINESTRING(-8.6095 41.1505, -8.609 41.151)\"
2,10,12,200,3,90,1,1,\"LINESTRING(-8.61 41.15, -8.6092 41.1508, -8.609 41.151)\"
";

    #[test]
    fn parses_network_and_round_trips() {
        let net = read_road_network(NET.as_bytes()).unwrap();
        assert_eq!(net.len(), 3);
        assert_eq!(net.successors(0), &[1]);
        assert_eq!(net.segment(2).geometry.len(), 3);
        assert_eq!(net.segment(2).level, RoadLevel::Highway);
        let mut buf = Vec::new();
        write_road_network(&mut buf, &net).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), NET);
        let again = read_road_network(&buf[..]).unwrap();
        let mut buf2 = Vec::new();
        write_road_network(&mut buf2, &again).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn empty_network_is_an_error() {
        let only_header = NET.lines().next().unwrap().to_string() + "\n";
        assert!(matches!(read_road_network(only_header.as_bytes()), Err(Error::NoSegments)));
    }

    #[test]
    fn parse_error_carries_line() {
        let bad = NET.replace("120.5", "abc");
        match read_road_network(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn duplicate_seg_id_rejected() {
        let dup = NET.replace("\n1,11,12", "\n0,11,12");
        assert!(matches!(read_road_network(dup.as_bytes()), Err(Error::DuplicateSegment(0))));
    }

    #[test]
    fn trajectories_grouped_and_ordered() {
        let csv = "traj_id,point_index,lon,lat,epoch_seconds
7,1,-8.6,41.1,10
3,0,-8.5,41.0,0
7,0,-8.61,41.11,5
3,1,-8.51,41.01,2
";
        let trajs = read_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(trajs.len(), 2);
        assert_eq!(trajs[0].traj_id, 3);
        assert_eq!(trajs[1].traj_id, 7);
        assert_eq!(trajs[1].points[0].t, 5.0);
        assert_eq!(trajs[1].points[1].t, 10.0);
    }

    #[test]
    fn trajectory_errors() {
        let bad_coord = "traj_id,point_index,lon,lat,epoch_seconds\n1,0,abc,41,0\n1,1,-8,41,1\n";
        assert!(matches!(read_trajectories(bad_coord.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let dup = "traj_id,point_index,lon,lat,epoch_seconds\n1,0,-8,41,0\n1,0,-8,41,1\n";
        assert!(read_trajectories(dup.as_bytes()).is_err());
    }

    #[test]
    fn matched_sequences_round_trip() {
        let net = read_road_network(NET.as_bytes()).unwrap();
        let seqs = vec![RoadSequence { traj_id: 4, segs: vec![0, 1] }, RoadSequence { traj_id: 9, segs: vec![2] }];
        let mut buf = Vec::new();
        write_matched_sequences(&mut buf, &seqs, &net).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "4,0;1\n9,2\n");
        assert_eq!(read_matched_sequences(&buf[..], &net).unwrap(), seqs);
    }
}
