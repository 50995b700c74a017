use std::io::{BufRead, Write};

use crate::netio::geo::haversine_m;
use crate::netio::{RoadLevel, RoadNetwork};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const FEATURE_NAMES: [&str; 8] = [
    "length",
    "lanes",
    "speed",
    "level_highway",
    "level_arterial",
    "level_residential",
    "vertices",
    "sinuosity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Tensor,
    pub names: Vec<String>,
}

impl FeatureMatrix {
    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn f(&self) -> usize {
        self.data.cols()
    }
}

/// Population z-score; a constant column maps to zeros.
pub fn zscore(col: &mut [f64]) {
    let n = col.len() as f64;
    if col.is_empty() {
        return;
    }
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in col.iter_mut() {
        *x = if sd > 1e-12 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Eight attribute columns per segment. Sinuosity divides the length by the
/// endpoint distance, floored at one metre for closed loops.
pub fn encode_features(net: &RoadNetwork) -> FeatureMatrix {
    let n = net.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); FEATURE_NAMES.len()];
    for s in net.segments() {
        let first = s.geometry[0];
        let last = *s.geometry.last().expect("validated geometry");
        let chord = haversine_m(first, last).max(1.0);
        cols[0].push(s.length_m);
        cols[1].push(s.lanes as f64);
        cols[2].push(s.speed_kmh);
        for level in RoadLevel::ALL {
            cols[3 + level.index()].push(if s.level == level { 1.0 } else { 0.0 });
        }
        cols[6].push(s.geometry.len() as f64);
        cols[7].push(s.length_m / chord);
    }
    for c in [0, 1, 2, 6, 7] {
        zscore(&mut cols[c]);
    }
    let mut data = Tensor::zeros(&[n, FEATURE_NAMES.len()]);
    for (c, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data.set(i, c, x);
        }
    }
    FeatureMatrix { data, names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect() }
}

pub const EMBEDDINGS_HEADER: &str = "# msrf-embeddings v1";

pub fn write_embeddings<W: Write>(mut out: W, h: &Tensor, net: &RoadNetwork) -> Result<()> {
    if h.rows() != net.len() {
        return Err(Error::ShapeMismatch(format!("{} embedding rows for {} segments", h.rows(), net.len())));
    }
    writeln!(out, "{} d={}", EMBEDDINGS_HEADER, h.cols())?;
    let cols: Vec<String> = (0..h.cols()).map(|c| format!("v_{}", c)).collect();
    writeln!(out, "seg_id,{}", cols.join(","))?;
    for i in 0..h.rows() {
        let vals: Vec<String> = h.row(i).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{},{}", net.orig_id(i), vals.join(","))?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(input: R, net: &RoadNetwork) -> Result<Tensor> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty embeddings file".into() })??;
    let d: usize = first
        .strip_prefix(EMBEDDINGS_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("d="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("bad embeddings header {:?}", first) })?;
    let mut h = Tensor::zeros(&[net.len(), d]);
    let mut seen = vec![false; net.len()];
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.starts_with("seg_id") || line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let mut parts = line.split(',');
        let sid: i64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| perr("bad seg_id".into()))?;
        let i = net.dense_id(sid).ok_or_else(|| perr(format!("unknown seg_id {}", sid)))?;
        let vals: Vec<f64> = parts
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(e.to_string()))?;
        if vals.len() != d {
            return Err(perr(format!("expected {} values, got {}", d, vals.len())));
        }
        h.row_mut(i).copy_from_slice(&vals);
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!("segment {} has no embedding", net.orig_id(i))));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netio::test_support::seg;

    #[test]
    fn identical_segments_zero_columns() {
        let net = RoadNetwork::new(vec![seg(0, 0, 1), seg(1, 1, 2), seg(2, 2, 3)]).unwrap();
        let f = encode_features(&net);
        assert_eq!(f.f(), 8);
        for i in 0..3 {
            let r = f.data.row(i);
            assert_eq!(&r[..3], &[0.0, 0.0, 0.0]);
            assert_eq!(&r[3..6], &[0.0, 0.0, 1.0]);
            assert_eq!(&r[6..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn two_lengths_standardise_to_unit() {
        let mut a = seg(0, 0, 1);
        let mut b = seg(1, 1, 2);
        a.length_m = 100.0;
        b.length_m = 300.0;
        let f = encode_features(&RoadNetwork::new(vec![a, b]).unwrap());
        assert!((f.data.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((f.data.at(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_round_trip() {
        let net = RoadNetwork::new(vec![seg(10, 0, 1), seg(20, 1, 2)]).unwrap();
        let h = Tensor::from_rows(&[vec![0.1, -2.5], vec![1.0 / 3.0, 7.0]]);
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &h, &net).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# msrf-embeddings v1 d=2\nseg_id,v_0,v_1\n10,0.1,-2.5\n"));
        assert_eq!(read_embeddings(&buf[..], &net).unwrap(), h);
    }
}
