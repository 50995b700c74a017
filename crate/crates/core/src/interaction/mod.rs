//! k-order transfer matrices and modularity-filtered interaction graphs.

mod files;

pub use files::{read_interaction_matrix, read_transfer_matrix, write_interaction_matrix, write_transfer_matrix};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::netio::{RoadNetwork, RoadSequence};
use crate::numerics::{CsrMatrix, Tensor};
use crate::{Error, Result};

/// Rows of the k-hop reachability relation are truncated to this many
/// targets (lowest ids kept).
pub const REACHABILITY_ROW_CAP: usize = 10_000;

/// Observed lag-k transfers: `(i, j)` → number of positions `p` with
/// `segs[p] = i` and `segs[p + k] = j`. Self-transfers are not stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountMatrix {
    k: usize,
    entries: BTreeMap<(usize, usize), u64>,
}

impl CountMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, entries: BTreeMap::new() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), u64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.entries.range((i, 0)..(i + 1, 0)).map(|(&(_, j), &v)| (j, v))
    }

    pub fn add(&mut self, i: usize, j: usize, c: u64) {
        if i != j && c > 0 {
            *self.entries.entry((i, j)).or_insert(0) += c;
        }
    }

    /// Entrywise sum; counts of disjoint trajectory sets merge this way.
    pub fn merge(&mut self, other: &CountMatrix) {
        debug_assert_eq!(self.k, other.k);
        for (&(i, j), &c) in &other.entries {
            self.add(i, j, c);
        }
    }
}

/// Counts every lag-`k` position pair across `seqs` (overlapping windows).
pub fn count_k_hop(seqs: &[RoadSequence], k: usize) -> CountMatrix {
    assert!(k >= 1, "order must be at least 1");
    seqs.par_iter()
        .fold(
            || CountMatrix::new(k),
            |mut acc, s| {
                for w in s.segs.windows(k + 1) {
                    acc.add(w[0], w[k], 1);
                }
                acc
            },
        )
        .reduce(
            || CountMatrix::new(k),
            |mut a, b| {
                a.merge(&b);
                a
            },
        )
}

/// Laplace smoothing term added to every count before normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// `+1` for pairs joined by a directed walk of exactly k hops.
    #[default]
    KHop,
    /// `+1` for directly adjacent pairs regardless of k.
    Adjacency,
}

impl std::str::FromStr for Smoothing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "khop" => Ok(Smoothing::KHop),
            "adjacency" => Ok(Smoothing::Adjacency),
            other => Err(Error::Config(format!("unknown smoothing {:?} (khop|adjacency)", other))),
        }
    }
}

impl std::fmt::Display for Smoothing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Smoothing::KHop => "khop",
            Smoothing::Adjacency => "adjacency",
        })
    }
}

/// Targets reachable from each segment by a directed walk of exactly `k`
/// hops, excluding the segment itself. Rows are sorted and capped at
/// [`REACHABILITY_ROW_CAP`].
pub fn k_hop_reachability(net: &RoadNetwork, k: usize) -> Vec<Vec<usize>> {
    let n = net.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut mark = vec![false; n];
            let mut frontier = vec![i];
            for _ in 0..k {
                let mut next = Vec::new();
                for &u in &frontier {
                    for &v in net.successors(u) {
                        if !mark[v] {
                            mark[v] = true;
                            next.push(v);
                        }
                    }
                }
                for &v in &next {
                    mark[v] = false;
                }
                next.sort_unstable();
                next.truncate(REACHABILITY_ROW_CAP);
                frontier = next;
                if frontier.is_empty() {
                    break;
                }
            }
            frontier.retain(|&j| j != i);
            frontier
        })
        .collect()
}

/// Row-normalised k-order transfer probabilities. Rows with nothing to
/// normalise are stored empty and reported absent.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    k: usize,
    matrix: CsrMatrix,
}

impl TransferMatrix {
    pub fn from_csr(k: usize, matrix: CsrMatrix) -> Result<Self> {
        if matrix.n_rows() != matrix.n_cols() {
            return Err(Error::ShapeMismatch(format!(
                "transfer matrix must be square, got {}x{}",
                matrix.n_rows(),
                matrix.n_cols()
            )));
        }
        Ok(Self { k, matrix })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.matrix.row(i)
    }

    pub fn row_present(&self, i: usize) -> bool {
        self.matrix.row_len(i) > 0
    }

    pub fn present_rows(&self) -> usize {
        (0..self.n()).filter(|&i| self.row_present(i)).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.matrix.iter()
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn to_dense(&self) -> Tensor {
        self.matrix.to_dense()
    }
}

/// `p_ij = (count(i→j) + r_ij) / Σ_j (count(i→j) + r_ij)` with `r` the
/// smoothing indicator.
pub fn build_transfer_matrix(counts: &CountMatrix, net: &RoadNetwork, smoothing: Smoothing) -> TransferMatrix {
    let k = counts.k();
    let n = net.len();
    let smooth_rows: Vec<Vec<usize>> = match smoothing {
        Smoothing::Adjacency => (0..n).map(|i| net.successors(i).to_vec()).collect(),
        Smoothing::KHop if k == 1 => (0..n).map(|i| net.successors(i).to_vec()).collect(),
        Smoothing::KHop => k_hop_reachability(net, k),
    };
    let rows = (0..n)
        .map(|i| {
            let mut w: BTreeMap<usize, u64> = counts.row(i).collect();
            for &j in &smooth_rows[i] {
                *w.entry(j).or_insert(0) += 1;
            }
            let total: u64 = w.values().sum();
            if total == 0 {
                return Vec::new();
            }
            w.into_iter().map(|(j, c)| (j, c as f64 / total as f64)).collect()
        })
        .collect();
    let matrix = CsrMatrix::from_rows(n, rows).expect("rows are sorted and in range");
    TransferMatrix { k, matrix }
}

/// Degree-style strengths of the modularity null model.
#[derive(Clone, Debug)]
pub struct ModularityNull {
    /// `p_i = Σ_j (p_ij + p_ji)`.
    pub strength: Vec<f64>,
    /// `Σ_ij p_ij`.
    pub total: f64,
}

impl ModularityNull {
    pub fn new(p: &TransferMatrix) -> Self {
        let mut strength = vec![0.0; p.n()];
        let mut total = 0.0;
        for (i, j, v) in p.iter() {
            strength[i] += v;
            strength[j] += v;
            total += v;
        }
        Self { strength, total }
    }

    /// `s_ij = p_ij + p_ji − p_i·p_j / (2T)`.
    pub fn score(&self, p: &TransferMatrix, i: usize, j: usize) -> f64 {
        p.get(i, j) + p.get(j, i) - self.strength[i] * self.strength[j] / (2.0 * self.total)
    }
}

/// Binary symmetric interaction graph of order k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionMatrix {
    k: usize,
    n: usize,
    /// Unordered edges as `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl InteractionMatrix {
    pub fn new(k: usize, n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut list: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                continue;
            }
            if a >= n || b >= n {
                return Err(Error::ShapeMismatch(format!("edge ({}, {}) with n = {}", a, b, n)));
            }
            list.push((a.min(b), a.max(b)));
        }
        list.sort_unstable();
        list.dedup();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &list {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for row in neighbors.iter_mut() {
            row.sort_unstable();
        }
        Ok(Self { k, n, edges: list, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.neighbors[i].binary_search(&j).is_ok()
    }
}

/// Keeps the pairs whose bidirectional transfer exceeds the modularity null
/// model: edge `{i, j}` iff `s_ij > 0` and `i ≠ j`.
pub fn build_interaction_matrix(p: &TransferMatrix) -> Result<InteractionMatrix> {
    let null = ModularityNull::new(p);
    if null.total <= 0.0 {
        return Err(Error::DegenerateMatrix(format!("order {} transfer matrix is empty", p.k())));
    }
    // Only pairs with p_ij + p_ji > 0 can score above zero.
    let mut pairs: Vec<(usize, usize)> =
        p.iter().filter(|&(i, j, _)| i != j).map(|(i, j, _)| (i.min(j), i.max(j))).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let edges: Vec<(usize, usize)> = pairs.into_iter().filter(|&(i, j)| null.score(p, i, j) > 0.0).collect();
    InteractionMatrix::new(p.k(), p.n(), edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netio::test_support::seg;

    /// a_01 = a_02 = a_12 = 1: segment 1 is a loop at the node where 0 ends
    /// and 2 starts.
    fn spec_net() -> RoadNetwork {
        RoadNetwork::new(vec![seg(0, 0, 1), seg(1, 1, 1), seg(2, 1, 2)]).unwrap()
    }

    fn rs(segs: &[usize]) -> RoadSequence {
        RoadSequence { traj_id: 0, segs: segs.to_vec() }
    }

    #[test]
    fn lag_counts() {
        let c = count_k_hop(&[rs(&[0, 1, 2]), rs(&[0, 1])], 1);
        assert_eq!(c.iter().collect::<Vec<_>>(), vec![((0, 1), 2), ((1, 2), 1)]);
        let c = count_k_hop(&[rs(&[0, 1, 2])], 2);
        assert_eq!(c.iter().collect::<Vec<_>>(), vec![((0, 2), 1)]);
        assert!(count_k_hop(&[rs(&[0, 1, 2])], 3).is_empty());
    }

    #[test]
    fn self_transfers_are_not_counted() {
        let c = count_k_hop(&[rs(&[0, 1, 0, 1])], 2);
        assert!(c.is_empty());
    }

    #[test]
    fn transfer_probabilities_worked_example() {
        let net = spec_net();
        assert_eq!(net.successors(0), &[1, 2]);
        assert_eq!(net.successors(1), &[2]);
        let counts = count_k_hop(&[rs(&[0, 1, 2]), rs(&[0, 1])], 1);
        let p = build_transfer_matrix(&counts, &net, Smoothing::KHop);
        assert_eq!(p.get(0, 1), 3.0 / 4.0);
        assert_eq!(p.get(0, 2), 1.0 / 4.0);
        assert_eq!(p.get(1, 2), 1.0);
        assert!(!p.row_present(2));
    }

    #[test]
    fn second_order_worked_example() {
        let net = spec_net();
        let counts = count_k_hop(&[rs(&[0, 1, 2])], 2);
        let p = build_transfer_matrix(&counts, &net, Smoothing::KHop);
        assert_eq!(p.get(0, 2), 1.0);
        assert_eq!(p.row(0).count(), 1);
        assert!(!p.row_present(1));
    }

    #[test]
    fn no_counts_gives_uniform_rows() {
        let net = spec_net();
        let p = build_transfer_matrix(&CountMatrix::new(1), &net, Smoothing::KHop);
        assert_eq!(p.get(0, 1), 0.5);
        assert_eq!(p.get(0, 2), 0.5);
    }

    #[test]
    fn khop_smoothing_uses_walks_of_exact_length() {
        // chain 0→1→2
        let net = RoadNetwork::new(vec![seg(0, 0, 1), seg(1, 1, 2), seg(2, 2, 3)]).unwrap();
        let reach = k_hop_reachability(&net, 2);
        assert_eq!(reach, vec![vec![2], vec![], vec![]]);
        let counts = count_k_hop(&[rs(&[0, 1, 2])], 2);
        let p = build_transfer_matrix(&counts, &net, Smoothing::KHop);
        assert_eq!(p.get(0, 2), 1.0);
        assert!(!p.row_present(1));
        let adj = build_transfer_matrix(&counts, &net, Smoothing::Adjacency);
        assert_eq!(adj.get(0, 2), 0.5);
        assert_eq!(adj.get(0, 1), 0.5);
    }

    fn p_from(entries: &[(usize, usize, f64)], n: usize) -> TransferMatrix {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, v) in entries {
            rows[i].push((j, v));
        }
        TransferMatrix::from_csr(1, CsrMatrix::from_rows(n, rows).unwrap()).unwrap()
    }

    #[test]
    fn modularity_filter_worked_example() {
        let p = p_from(&[(0, 1, 0.75), (0, 2, 0.25), (1, 2, 1.0)], 3);
        let null = ModularityNull::new(&p);
        assert_eq!(null.total, 2.0);
        assert_eq!(null.strength, vec![1.0, 1.75, 1.25]);
        assert!((null.score(&p, 0, 1) - 0.3125).abs() < 1e-15);
        assert!((null.score(&p, 0, 2) + 0.0625).abs() < 1e-15);
        assert!((null.score(&p, 1, 2) - 0.453125).abs() < 1e-15);
        let s = build_interaction_matrix(&p).unwrap();
        assert_eq!(s.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn single_entry_interaction() {
        let p = p_from(&[(0, 1, 1.0)], 3);
        let null = ModularityNull::new(&p);
        assert!((null.score(&p, 0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(build_interaction_matrix(&p).unwrap().edges(), &[(0, 1)]);
    }

    #[test]
    fn empty_transfer_is_degenerate() {
        let p = p_from(&[], 3);
        assert!(matches!(build_interaction_matrix(&p), Err(Error::DegenerateMatrix(_))));
    }

    #[test]
    fn interaction_symmetric_zero_diagonal() {
        let s = InteractionMatrix::new(1, 4, vec![(2, 1), (1, 2), (3, 3), (0, 3)]).unwrap();
        assert_eq!(s.edges(), &[(0, 3), (1, 2)]);
        assert!(s.has_edge(1, 2) && s.has_edge(2, 1));
        assert!(!s.has_edge(3, 3));
    }
}
