//! Spectral partitioning of interaction graphs into regions.
//!
//! The Laplacian of an unweighted graph is block diagonal over connected
//! components, so each component is solved on its own: dense Jacobi up to
//! [`DENSE_LIMIT`] nodes, Lanczos above. The smallest eigenpairs of all
//! components are then merged.

pub mod eigen;
mod kmeans;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

pub use kmeans::{kmeans, KMEANS_MAX_ITER, KMEANS_TOL};

use crate::interaction::InteractionMatrix;
use crate::netio::RoadNetwork;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const DENSE_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Laplacian {
    /// `L = D − S`.
    #[default]
    Unnormalized,
    /// `I − D^{-1/2} S D^{-1/2}`, with zero rows for isolated nodes. The
    /// spectral rows are unit-normalised before clustering.
    Symmetric,
}

impl std::str::FromStr for Laplacian {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unnormalized" => Ok(Laplacian::Unnormalized),
            "symmetric" => Ok(Laplacian::Symmetric),
            other => Err(Error::Config(format!("unknown laplacian {:?}", other))),
        }
    }
}

impl std::fmt::Display for Laplacian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Laplacian::Unnormalized => "unnormalized",
            Laplacian::Symmetric => "symmetric",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// `n × d_s`, one eigenvector per column.
    pub u: Tensor,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    k: usize,
    r: usize,
    assign: Vec<usize>,
}

impl RegionPartition {
    pub fn new(k: usize, r: usize, assign: Vec<usize>) -> Result<Self> {
        let mut used = vec![false; r];
        for (i, &a) in assign.iter().enumerate() {
            if a >= r {
                return Err(Error::Invalid(format!("node {} has region {} but r = {}", i, a, r)));
            }
            used[a] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::Invalid(format!("region {} has no members", empty)));
        }
        Ok(Self { k, r, assign })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> usize {
        self.assign.len()
    }

    pub fn assign(&self) -> &[usize] {
        &self.assign
    }

    pub fn region_of(&self, node: usize) -> usize {
        self.assign[node]
    }

    /// Node lists per region, each ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.r];
        for (i, &a) in self.assign.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

fn components(s: &InteractionMatrix) -> Vec<Vec<usize>> {
    let n = s.n();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut head = 0;
        while head < comp.len() {
            let v = comp[head];
            head += 1;
            for &w in s.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

struct Eigenpair {
    value: f64,
    comp: usize,
    /// Entries over the component's nodes.
    vector: Vec<f64>,
}

fn component_eigens(
    s: &InteractionMatrix,
    nodes: &[usize],
    want: usize,
    kind: Laplacian,
    dense_limit: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let m = nodes.len();
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(a, &v)| (v, a)).collect();
    let deg: Vec<f64> = nodes.iter().map(|&v| s.degree(v) as f64).collect();
    let weight = |a: usize, b: usize| -> f64 {
        match kind {
            Laplacian::Unnormalized => 1.0,
            Laplacian::Symmetric => 1.0 / (deg[a] * deg[b]).sqrt(),
        }
    };
    let diag = |a: usize| -> f64 {
        match kind {
            Laplacian::Unnormalized => deg[a],
            Laplacian::Symmetric if deg[a] > 0.0 => 1.0,
            Laplacian::Symmetric => 0.0,
        }
    };
    if m == 1 {
        return Ok(vec![(0.0, vec![1.0])]);
    }
    if m <= dense_limit {
        let mut a = vec![0.0; m * m];
        for (ai, &v) in nodes.iter().enumerate() {
            a[ai * m + ai] = diag(ai);
            for &w in s.neighbors(v) {
                let bi = local[&w];
                a[ai * m + bi] = -weight(ai, bi);
            }
        }
        let (vals, vecs) = eigen::jacobi_eigen(a, m)?;
        Ok((0..want.min(m))
            .map(|c| (vals[c], (0..m).map(|row| vecs[row * m + c]).collect()))
            .collect())
    } else {
        let adj: Vec<Vec<usize>> = nodes.iter().map(|&v| s.neighbors(v).iter().map(|w| local[w]).collect()).collect();
        let matvec = |x: &[f64], y: &mut [f64]| {
            for a in 0..m {
                let mut acc = diag(a) * x[a];
                for &b in &adj[a] {
                    acc -= weight(a, b) * x[b];
                }
                y[a] = acc;
            }
        };
        let upper = match kind {
            Laplacian::Unnormalized => 2.0 * deg.iter().cloned().fold(0.0, f64::max),
            Laplacian::Symmetric => 2.0,
        };
        let (vals, vecs) = eigen::lanczos_smallest(matvec, m, want, upper)?;
        Ok(vals.into_iter().zip(vecs).collect())
    }
}

/// The `d_s` smallest eigenpairs of the unnormalised Laplacian of `s`.
pub fn laplacian_eigens(s: &InteractionMatrix, d_s: usize) -> Result<SpectralEmbedding> {
    laplacian_eigens_with(s, d_s, Laplacian::Unnormalized, DENSE_LIMIT)
}

pub fn laplacian_eigens_with(
    s: &InteractionMatrix,
    d_s: usize,
    kind: Laplacian,
    dense_limit: usize,
) -> Result<SpectralEmbedding> {
    let n = s.n();
    if d_s == 0 || d_s > n {
        return Err(Error::Domain(format!("d_s = {} must lie in 1..={}", d_s, n)));
    }
    let comps = components(s);
    let mut pairs: Vec<Eigenpair> = Vec::new();
    for (ci, nodes) in comps.iter().enumerate() {
        for (value, vector) in component_eigens(s, nodes, d_s, kind, dense_limit)? {
            pairs.push(Eigenpair { value, comp: ci, vector });
        }
    }
    // Exact zeros for tiny negative round-off keep the tie order stable.
    for p in pairs.iter_mut() {
        if p.value.abs() < 1e-12 {
            p.value = 0.0;
        }
    }
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.comp.cmp(&b.comp)));
    pairs.truncate(d_s);
    let mut u = Tensor::zeros(&[n, d_s]);
    let mut eigenvalues = Vec::with_capacity(d_s);
    for (col, p) in pairs.iter().enumerate() {
        for (&node, &x) in comps[p.comp].iter().zip(&p.vector) {
            u.set(node, col, x);
        }
        eigenvalues.push(p.value);
    }
    Ok(SpectralEmbedding { u, eigenvalues })
}

pub fn spectral_partition(s: &InteractionMatrix, r: usize, seed: u64) -> Result<RegionPartition> {
    spectral_partition_with(s, r, seed, Laplacian::Unnormalized)
}

pub fn spectral_partition_with(s: &InteractionMatrix, r: usize, seed: u64, kind: Laplacian) -> Result<RegionPartition> {
    if r < 2 || r > s.n() {
        return Err(Error::Domain(format!("region count {} must lie in 2..={}", r, s.n())));
    }
    let emb = laplacian_eigens_with(s, r, kind, DENSE_LIMIT)?;
    let mut u = emb.u;
    if kind == Laplacian::Symmetric {
        for i in 0..u.rows() {
            let row = u.row_mut(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }
    let assign = kmeans(&u, r, seed);
    RegionPartition::new(s.k(), r, assign)
}

/// Co-membership counts `(region_1, region_2, shared)`, largest first.
pub fn region_overlap_report(p1: &RegionPartition, p2: &RegionPartition) -> Result<Vec<(usize, usize, usize)>> {
    if p1.n() != p2.n() {
        return Err(Error::ShapeMismatch(format!("partitions over {} and {} nodes", p1.n(), p2.n())));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&a, &b) in p1.assign.iter().zip(&p2.assign) {
        *table.entry((a, b)).or_insert(0) += 1;
    }
    let mut rows: Vec<_> = table.into_iter().map(|((a, b), c)| (a, b, c)).collect();
    rows.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    Ok(rows)
}

pub fn write_partition<W: Write>(mut out: W, p: &RegionPartition, seed: u64, net: &RoadNetwork) -> Result<()> {
    writeln!(out, "# n={} r={} k={} seed={}", p.n(), p.r, p.k, seed)?;
    for (i, &a) in p.assign.iter().enumerate() {
        writeln!(out, "{},{}", net.orig_id(i), a)?;
    }
    Ok(())
}

/// Reads a partition file; returns the partition and its recorded seed.
pub fn read_partition<R: BufRead>(input: R, net: &RoadNetwork) -> Result<(RegionPartition, u64)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty partition file".into() })??;
    let bad = || Error::Parse { line: 1, msg: format!("bad partition header {:?}", first) };
    let rest = first.strip_prefix("# ").ok_or_else(bad)?;
    let mut fields = BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(bad)?;
        fields.insert(k.to_string(), v.parse::<u64>().map_err(|_| bad())?);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
    let (n, r, k, seed) = (get("n")? as usize, get("r")? as usize, get("k")? as usize, get("seed")?);
    if n != net.len() {
        return Err(Error::ShapeMismatch(format!("partition has n = {} but network has {} segments", n, net.len())));
    }
    let mut assign = vec![usize::MAX; n];
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let (sid, rid) = line.split_once(',').ok_or_else(|| perr(format!("expected seg_id,region_id, got {:?}", line)))?;
        let sid: i64 = sid.trim().parse().map_err(|_| perr(format!("bad seg_id {:?}", sid)))?;
        let rid: usize = rid.trim().parse().map_err(|_| perr(format!("bad region_id {:?}", rid)))?;
        let dense = net.dense_id(sid).ok_or_else(|| perr(format!("unknown seg_id {}", sid)))?;
        assign[dense] = rid;
    }
    if let Some(missing) = assign.iter().position(|&a| a == usize::MAX) {
        return Err(Error::Invalid(format!("segment {} has no region", net.orig_id(missing))));
    }
    Ok((RegionPartition::new(k, r, assign)?, seed))
}
