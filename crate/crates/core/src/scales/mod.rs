//! Road-level interaction-order statistics and the choice of the three
//! scale orders.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::netio::{RoadLevel, RoadNetwork, RoadSequence};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderHistogram {
    pub k_max: usize,
    pub counts: BTreeMap<(RoadLevel, RoadLevel, usize), u64>,
    pub sample_size: usize,
}

impl OrderHistogram {
    pub fn get(&self, from: RoadLevel, to: RoadLevel, order: usize) -> u64 {
        self.counts.get(&(from, to, order)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Total count per order, summed over level pairs.
    pub fn order_totals(&self) -> Vec<u64> {
        let mut t = vec![0; self.k_max + 1];
        for (&(_, _, o), &c) in &self.counts {
            t[o] += c;
        }
        t
    }
}

/// Counts every within-sequence position pair `(p, p + o)` for
/// `1 ≤ o ≤ k_max` by the levels of its two segments.
pub fn order_distribution(seqs: &[RoadSequence], net: &RoadNetwork, k_max: usize) -> Result<OrderHistogram> {
    if k_max == 0 {
        return Err(Error::Domain("k_max must be at least 1".into()));
    }
    let mut counts = BTreeMap::new();
    for seq in seqs {
        for o in 1..=k_max {
            for w in 0..seq.segs.len().saturating_sub(o) {
                let a = net.segment(seq.segs[w]).level;
                let b = net.segment(seq.segs[w + o]).level;
                *counts.entry((a, b, o)).or_insert(0) += 1;
            }
        }
    }
    Ok(OrderHistogram { k_max, counts, sample_size: seqs.len() })
}

/// Up to `size` sequences drawn uniformly without replacement, in input order.
pub fn sample_sequences(seqs: &[RoadSequence], size: usize, seed: u64) -> Vec<RoadSequence> {
    if seqs.len() <= size {
        return seqs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, seqs.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| seqs[i].clone()).collect()
}

pub fn write_histogram<W: Write>(mut out: W, hist: &OrderHistogram) -> Result<()> {
    writeln!(out, "level_from,level_to,order,count")?;
    for (&(a, b, o), &c) in &hist.counts {
        writeln!(out, "{},{},{},{}", a.code(), b.code(), o, c)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaleOrders {
    pub k_s: usize,
    pub k_m: usize,
    pub k_l: usize,
}

impl ScaleOrders {
    pub fn new(k_s: usize, k_m: usize, k_l: usize) -> Result<Self> {
        let o = Self { k_s, k_m, k_l };
        if !o.is_ordered() {
            return Err(Error::Invalid(format!("scale orders {} must satisfy 1 <= k_S < k_M < k_L", o)));
        }
        Ok(o)
    }

    /// No ordering check; the orders must still be at least 1.
    pub fn unchecked(k_s: usize, k_m: usize, k_l: usize) -> Result<Self> {
        if k_s == 0 || k_m == 0 || k_l == 0 {
            return Err(Error::Invalid(format!("scale orders {},{},{} must be at least 1", k_s, k_m, k_l)));
        }
        Ok(Self { k_s, k_m, k_l })
    }

    pub fn is_ordered(&self) -> bool {
        1 <= self.k_s && self.k_s < self.k_m && self.k_m < self.k_l
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.k_s, self.k_m, self.k_l]
    }

    pub fn max(&self) -> usize {
        self.k_s.max(self.k_m).max(self.k_l)
    }
}

impl std::fmt::Display for ScaleOrders {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.k_s, self.k_m, self.k_l)
    }
}

impl std::str::FromStr for ScaleOrders {
    type Err = Error;
    /// Parses `a,b,c` without enforcing the order relation.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("scale orders {:?} are not integers", s)))?;
        match parts[..] {
            [a, b, c] => Self::unchecked(a, b, c),
            _ => Err(Error::Config(format!("expected three scale orders, got {:?}", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleRanges {
    pub small: (usize, usize),
    pub medium: (usize, usize),
    pub large: (usize, usize),
}

impl Default for ScaleRanges {
    fn default() -> Self {
        Self { small: (1, 3), medium: (3, 6), large: (6, 9) }
    }
}

impl ScaleRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("small", self.small), ("medium", self.medium), ("large", self.large)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{} range [{}, {}] is empty or starts at 0", name, lo, hi)));
            }
        }
        if self.small.0 > self.medium.0 || self.medium.0 > self.large.0 || self.small.1 > self.medium.1 || self.medium.1 > self.large.1 {
            return Err(Error::Config("scale ranges must be increasing".into()));
        }
        Ok(())
    }

    pub fn contains(&self, o: &ScaleOrders) -> bool {
        let within = |k: usize, (lo, hi): (usize, usize)| lo <= k && k <= hi;
        within(o.k_s, self.small) && within(o.k_m, self.medium) && within(o.k_l, self.large)
    }

    /// Every strictly increasing triple inside the ranges.
    pub fn candidates(&self) -> Vec<ScaleOrders> {
        let mut out = Vec::new();
        for s in self.small.0..=self.small.1 {
            for m in self.medium.0.max(s + 1)..=self.medium.1 {
                for l in self.large.0.max(m + 1)..=self.large.1 {
                    out.push(ScaleOrders { k_s: s, k_m: m, k_l: l });
                }
            }
        }
        out
    }
}

fn modal_in_range(hist: &OrderHistogram, lo: usize, hi: usize, name: &str) -> Result<usize> {
    if lo > hi || lo == 0 {
        return Err(Error::EmptyRange(name.to_string()));
    }
    let mut pair_totals: BTreeMap<(RoadLevel, RoadLevel), u64> = BTreeMap::new();
    for (&(a, b, o), &c) in &hist.counts {
        if (lo..=hi).contains(&o) {
            *pair_totals.entry((a, b)).or_insert(0) += c;
        }
    }
    // Dominant pair: largest total, first in level order on ties.
    let dominant = pair_totals.iter().fold(None, |best: Option<((RoadLevel, RoadLevel), u64)>, (&p, &c)| match best {
        Some((_, bc)) if bc >= c => best,
        _ => Some((p, c)),
    });
    match dominant {
        Some((pair, c)) if c > 0 => {
            let mut best = (lo, 0u64);
            for o in lo..=hi {
                let c = hist.get(pair.0, pair.1, o);
                if c > best.1 {
                    best = (o, c);
                }
            }
            Ok(best.0)
        }
        // Nothing observed: take the smallest order of the range.
        _ => Ok(lo),
    }
}

/// Modal criterion: in each range, the most frequent order of the range's
/// dominant level pair, restricted so the triple stays strictly increasing.
pub fn select_scale_orders(hist: &OrderHistogram, ranges: &ScaleRanges) -> Result<ScaleOrders> {
    ranges.validate()?;
    let k_s = modal_in_range(hist, ranges.small.0, ranges.small.1, "small")?;
    let k_m = modal_in_range(hist, ranges.medium.0.max(k_s + 1), ranges.medium.1, "medium")?;
    let k_l = modal_in_range(hist, ranges.large.0.max(k_m + 1), ranges.large.1, "large")?;
    ScaleOrders::new(k_s, k_m, k_l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub mi_f1: f64,
    pub ma_f1: f64,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub orders: ScaleOrders,
    pub violation: bool,
    /// `None` when skipped for an order violation or failed.
    pub metrics: Option<SweepMetrics>,
    pub error: Option<String>,
}

/// Runs `eval` on every candidate. Order-violating candidates produce a
/// flagged row and only run with `allow_violations`. A failing candidate
/// records its error and the sweep continues. Rows keep candidate order.
pub fn order_sweep<F>(candidates: &[ScaleOrders], allow_violations: bool, eval: F) -> Vec<SweepRow>
where
    F: Fn(ScaleOrders) -> Result<SweepMetrics> + Sync,
{
    candidates
        .par_iter()
        .map(|&orders| {
            let violation = !orders.is_ordered();
            if violation && !allow_violations {
                return SweepRow {
                    orders,
                    violation,
                    metrics: None,
                    error: Some("violates k_S < k_M < k_L".into()),
                };
            }
            match eval(orders) {
                Ok(m) => SweepRow { orders, violation, metrics: Some(m), error: None },
                Err(e) => SweepRow { orders, violation, metrics: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Rows by decreasing Mi-F1, then increasing MAE; rows without metrics last.
pub fn rank_rows(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| match (&a.metrics, &b.metrics) {
        (Some(x), Some(y)) => y.mi_f1.total_cmp(&x.mi_f1).then(x.mae.total_cmp(&y.mae)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    out
}

/// Validation criterion: best ordered row inside `ranges`.
pub fn select_by_validation(rows: &[SweepRow], ranges: &ScaleRanges) -> Result<ScaleOrders> {
    rank_rows(rows)
        .into_iter()
        .find(|r| r.metrics.is_some() && !r.violation && ranges.contains(&r.orders))
        .map(|r| r.orders)
        .ok_or_else(|| Error::EmptyRange("no evaluated candidate inside the scale ranges".into()))
}

/// Writes the ranked sweep table.
pub fn write_sweep<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "k_S,k_M,k_L,mi_f1,ma_f1,mae,rmse,violation_flag")?;
    for r in rank_rows(rows) {
        let o = r.orders;
        let metrics = match r.metrics {
            Some(m) => format!("{},{},{},{}", m.mi_f1, m.ma_f1, m.mae, m.rmse),
            None => ",,,".to_string(),
        };
        writeln!(out, "{},{},{},{},{}", o.k_s, o.k_m, o.k_l, metrics, u8::from(r.violation))?;
    }
    Ok(())
}
