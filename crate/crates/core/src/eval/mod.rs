//! Downstream evaluation of frozen embeddings: road label classification
//! (RLC) and traffic speed inference (TI) under k-fold cross-validation.

mod heads;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use heads::{HeadKind, HeadTargets, HeadTraining, TaskHead, TI_HIDDEN};

use crate::model::zscore;
use crate::netio::{LabelClass, RoadNetwork, Traversal};
use crate::numerics::Tensor;
use crate::{derive_seed, Error, Result};

fn confusion(y_true: &[usize], y_pred: &[usize], c: usize) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    assert_eq!(y_true.len(), y_pred.len(), "label vectors differ in length");
    let mut tp = vec![0; c + 1];
    let mut fp = vec![0; c + 1];
    let mut fn_ = vec![0; c + 1];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        assert!((1..=c).contains(&t) && (1..=c).contains(&p), "labels must lie in 1..={}", c);
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    (tp, fp, fn_)
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    if p == r {
        p
    } else if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Micro-averaged F1 over labels `1..=c`.
pub fn micro_f1(y_true: &[usize], y_pred: &[usize], c: usize) -> f64 {
    let (tp, fp, fn_) = confusion(y_true, y_pred, c);
    f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum())
}

/// Mean per-class F1 over all `c` classes; a class never seen in either
/// vector scores 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], c: usize) -> f64 {
    let (tp, fp, fn_) = confusion(y_true, y_pred, c);
    (1..=c).map(|k| f1(tp[k], fp[k], fn_[k])).sum::<f64>() / c as f64
}

pub fn mae_rmse(y_true: &[f64], y_pred: &[f64]) -> (f64, f64) {
    assert_eq!(y_true.len(), y_pred.len(), "target vectors differ in length");
    assert!(!y_true.is_empty(), "empty target vector");
    let n = y_true.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        abs += (t - p).abs();
        sq += (t - p) * (t - p);
    }
    (abs / n, (sq / n).sqrt())
}

/// Mean traversal speed in km/h per segment; traversals without positive
/// duration are skipped.
pub fn segment_speed_targets(traversals: &[Traversal], net: &RoadNetwork) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for t in traversals {
        let dt = t.exit_t - t.entry_t;
        if !(dt > 0.0) {
            continue;
        }
        let kmh = net.segment(t.seg).length_m / dt * 3.6;
        let e = acc.entry(t.seg).or_insert((0.0, 0));
        e.0 += kmh;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, c))| (s, sum / c as f64)).collect()
}

pub fn write_speed_targets<W: Write>(mut out: W, speeds: &BTreeMap<usize, f64>, net: &RoadNetwork) -> Result<()> {
    writeln!(out, "seg_id,kmh")?;
    for (&s, &v) in speeds {
        writeln!(out, "{},{}", net.orig_id(s), v)?;
    }
    Ok(())
}

pub fn read_speed_targets<R: BufRead>(input: R, net: &RoadNetwork) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if lineno == 1 || line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let (sid, v) = line.split_once(',').ok_or_else(|| perr(format!("expected seg_id,kmh, got {:?}", line)))?;
        let sid: i64 = sid.trim().parse().map_err(|_| perr(format!("bad seg_id {:?}", sid)))?;
        let v: f64 = v.trim().parse().map_err(|_| perr(format!("bad speed {:?}", v)))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(perr(format!("speed {} is not a finite nonnegative number", v)));
        }
        let dense = net.dense_id(sid).ok_or_else(|| perr(format!("unknown seg_id {}", sid)))?;
        out.insert(dense, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Rlc,
    Ti,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Rlc => "rlc",
            Task::Ti => "ti",
        }
    }
}

/// Embedding rows with targets; `seg_ids` are dense segment indices.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub x: Tensor,
    pub y: Targets,
    pub seg_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids in `1..=classes`.
    Classes { labels: Vec<usize>, classes: usize },
    /// Speeds in km/h.
    Speeds(Vec<f64>),
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.seg_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seg_ids.is_empty()
    }

    pub fn task(&self) -> Task {
        match self.y {
            Targets::Classes { .. } => Task::Rlc,
            Targets::Speeds(_) => Task::Ti,
        }
    }
}

fn gather(h: &Tensor, rows: &[usize]) -> Tensor {
    heads::subset_rows(h, rows)
}

/// Labelled segments only.
pub fn rlc_dataset(h: &Tensor, net: &RoadNetwork) -> LabeledDataset {
    let (seg_ids, labels): (Vec<usize>, Vec<usize>) =
        (0..net.len()).filter_map(|i| net.segment(i).label.class().map(|c| (i, c))).unzip();
    LabeledDataset { x: gather(h, &seg_ids), y: Targets::Classes { labels, classes: LabelClass::N_CLASSES }, seg_ids }
}

pub fn ti_dataset(h: &Tensor, speeds: &BTreeMap<usize, f64>) -> LabeledDataset {
    let seg_ids: Vec<usize> = speeds.keys().copied().collect();
    let y = speeds.values().copied().collect();
    LabeledDataset { x: gather(h, &seg_ids), y: Targets::Speeds(y), seg_ids }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskMetrics {
    Rlc { mi_f1: f64, ma_f1: f64 },
    Ti { mae: f64, rmse: f64 },
}

impl TaskMetrics {
    pub fn values(&self) -> [(&'static str, f64); 2] {
        match *self {
            TaskMetrics::Rlc { mi_f1, ma_f1 } => [("mi_f1", mi_f1), ("ma_f1", ma_f1)],
            TaskMetrics::Ti { mae, rmse } => [("mae", mae), ("rmse", rmse)],
        }
    }

    fn mean(all: &[TaskMetrics]) -> TaskMetrics {
        let n = all.len() as f64;
        let mut a = 0.0;
        let mut b = 0.0;
        for m in all {
            let v = m.values();
            a += v[0].1;
            b += v[1].1;
        }
        match all[0] {
            TaskMetrics::Rlc { .. } => TaskMetrics::Rlc { mi_f1: a / n, ma_f1: b / n },
            TaskMetrics::Ti { .. } => TaskMetrics::Ti { mae: a / n, rmse: b / n },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub per_fold: Vec<TaskMetrics>,
    pub mean: TaskMetrics,
    pub n_folds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    pub n_folds: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub head: HeadTraining,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { n_folds: 5, val_frac: 0.1, seed: 0, head: HeadTraining::default() }
    }
}

/// Seeded shuffle into `n_folds` test folds; the first `m mod n_folds`
/// folds hold one extra sample.
pub fn fold_assignment(m: usize, n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = m / n_folds;
    let extra = m % n_folds;
    let mut out = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        out.push(idx[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Column statistics of `x` restricted to `rows`; zero deviation maps to 1.
fn column_stats(x: &Tensor, rows: &[usize]) -> Vec<(f64, f64)> {
    (0..x.cols())
        .map(|c| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|&r| x.at(r, c)).sum::<f64>() / n;
            let var = rows.iter().map(|&r| (x.at(r, c) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .collect()
}

fn standardized(x: &Tensor, rows: &[usize], stats: &[(f64, f64)]) -> Tensor {
    let mut out = Tensor::zeros(&[rows.len(), x.cols()]);
    for (r, &i) in rows.iter().enumerate() {
        for (c, &(m, s)) in stats.iter().enumerate() {
            out.set(r, c, (x.at(i, c) - m) / s);
        }
    }
    out
}

fn run_fold(data: &LabeledDataset, folds: &[Vec<usize>], f: usize, cfg: &CvConfig) -> Result<TaskMetrics> {
    let test = &folds[f];
    let mut train: Vec<usize> = folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.iter().copied()).collect();
    let fold_seed = derive_seed(cfg.seed, f as u64 + 1);
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
    let n_val = ((cfg.val_frac * train.len() as f64).ceil() as usize).clamp(1, train.len().saturating_sub(1).max(1));
    let (val, fit) = train.split_at(n_val);
    let stats = column_stats(&data.x, fit);
    let (x_fit, x_val, x_test) = (standardized(&data.x, fit, &stats), standardized(&data.x, val, &stats), standardized(&data.x, test, &stats));
    let d = data.x.cols();
    match &data.y {
        Targets::Classes { labels, classes } => {
            let y = HeadTargets::Classes(labels.iter().map(|&l| l - 1).collect());
            let mut head = TaskHead::new(HeadKind::Classifier { classes: *classes }, d, fold_seed);
            head.fit(&x_fit, &heads::subset_targets(&y, fit), &x_val, &heads::subset_targets(&y, val), &cfg.head)?;
            let logits = head.predict(&x_test)?;
            let pred: Vec<usize> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b }) + 1
                })
                .collect();
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            Ok(TaskMetrics::Rlc { mi_f1: micro_f1(&truth, &pred, *classes), ma_f1: macro_f1(&truth, &pred, *classes) })
        }
        Targets::Speeds(v) => {
            let fit_vals: Vec<f64> = fit.iter().map(|&i| v[i]).collect();
            let mean = fit_vals.iter().sum::<f64>() / fit_vals.len() as f64;
            let var = fit_vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / fit_vals.len() as f64;
            let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            let y = HeadTargets::Values(v.iter().map(|x| (x - mean) / sd).collect());
            let mut head = TaskHead::new(HeadKind::Regressor, d, fold_seed);
            head.fit(&x_fit, &heads::subset_targets(&y, fit), &x_val, &heads::subset_targets(&y, val), &cfg.head)?;
            let pred: Vec<f64> = head.predict(&x_test)?.data().iter().map(|p| p * sd + mean).collect();
            let truth: Vec<f64> = test.iter().map(|&i| v[i]).collect();
            let (mae, rmse) = mae_rmse(&truth, &pred);
            Ok(TaskMetrics::Ti { mae, rmse })
        }
    }
}

/// K-fold cross-validation of a fresh head per fold. Inputs are
/// standardised with statistics of each fold's fitting rows.
pub fn cross_validate(data: &LabeledDataset, cfg: &CvConfig) -> Result<MetricReport> {
    if cfg.n_folds < 2 {
        return Err(Error::Invalid(format!("n_folds must be at least 2, got {}", cfg.n_folds)));
    }
    if !(cfg.val_frac > 0.0 && cfg.val_frac < 1.0) {
        return Err(Error::Invalid(format!("val_frac must lie in (0, 1), got {}", cfg.val_frac)));
    }
    let folds = fold_assignment(data.len(), cfg.n_folds, cfg.seed);
    let min_size = match data.y {
        Targets::Classes { classes, .. } => classes,
        Targets::Speeds(_) => 1,
    };
    if let Some((f, fold)) = folds.iter().enumerate().find(|(_, v)| v.len() < min_size) {
        return Err(Error::FoldTooSmall { fold: f, size: fold.len(), classes: min_size });
    }
    if data.len() - folds.iter().map(Vec::len).max().unwrap_or(0) < 2 {
        return Err(Error::Invalid("too few samples to hold out a validation slice".into()));
    }
    let per_fold = (0..cfg.n_folds).into_par_iter().map(|f| run_fold(data, &folds, f, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { task: data.task(), mean: TaskMetrics::mean(&per_fold), per_fold, n_folds: cfg.n_folds })
}

pub fn write_report<W: Write>(mut out: W, reports: &[MetricReport]) -> Result<()> {
    writeln!(out, "task,fold,metric,value")?;
    for r in reports {
        for (f, m) in r.per_fold.iter().enumerate() {
            for (name, v) in m.values() {
                writeln!(out, "{},{},{},{}", r.task.name(), f, name, v)?;
            }
        }
        for (name, v) in r.mean.values() {
            writeln!(out, "{},mean,{},{}", r.task.name(), name, v)?;
        }
    }
    Ok(())
}

/// Standardises every column of `x` in place (population statistics).
pub fn standardize_columns(x: &mut Tensor) {
    for c in 0..x.cols() {
        let mut col: Vec<f64> = (0..x.rows()).map(|r| x.at(r, c)).collect();
        zscore(&mut col);
        for (r, v) in col.into_iter().enumerate() {
            x.set(r, c, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_examples() {
        let t = [1, 1, 2, 3];
        let p = [1, 2, 2, 3];
        assert!((micro_f1(&t, &p, 3) - 0.75).abs() < 1e-12);
        assert!((macro_f1(&t, &p, 3) - 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(micro_f1(&t, &t, 3), 1.0);
        assert_eq!(macro_f1(&t, &t, 3), 1.0);
        let t5 = [1, 2, 3, 1];
        assert!((macro_f1(&t5, &t5, 5) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn regression_errors() {
        assert_eq!(mae_rmse(&[1.0, 2.0], &[1.0, 2.0]), (0.0, 0.0));
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]);
        assert!((mae - 3.0).abs() < 1e-12 && (rmse - 10f64.sqrt()).abs() < 1e-12);
        let (mae, rmse) = mae_rmse(&[1.0, 2.0, 3.0], &[6.0, 7.0, 8.0]);
        assert!((mae - 5.0).abs() < 1e-12 && (rmse - 5.0).abs() < 1e-12);
    }

    #[test]
    fn speed_targets() {
        use crate::netio::test_support::seg;
        let mut a = seg(0, 0, 1);
        a.length_m = 500.0;
        let b = seg(1, 1, 2);
        let net = RoadNetwork::new(vec![a, b]).unwrap();
        let tr = [Traversal { seg: 0, entry_t: 0.0, exit_t: 60.0 }, Traversal { seg: 0, entry_t: 100.0, exit_t: 136.0 }];
        let s = segment_speed_targets(&tr, &net);
        assert_eq!(s.len(), 1);
        assert!((s[&0] - 40.0).abs() < 1e-9);
        let one = segment_speed_targets(&tr[..1], &net);
        assert!((one[&0] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn folds_partition_samples() {
        let folds = fold_assignment(103, 5, 4);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![21, 21, 21, 20, 20]);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn separable_clusters_classify() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        for i in 0..100 {
            let c = i % 5;
            let mut r = vec![0.0; 6];
            r[c] = 5.0;
            for v in r.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
            rows.push(r);
            labels.push(c + 1);
        }
        let data = LabeledDataset { x: Tensor::from_rows(&rows), y: Targets::Classes { labels, classes: 5 }, seg_ids: (0..100).collect() };
        let rep = cross_validate(&data, &CvConfig::default()).unwrap();
        assert_eq!(rep.per_fold.len(), 5);
        match rep.mean {
            TaskMetrics::Rlc { mi_f1, .. } => assert!(mi_f1 > 0.95, "{}", mi_f1),
            _ => unreachable!(),
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let data = LabeledDataset { x: Tensor::from_rows(&rows), y: Targets::Speeds(vec![42.0; 50]), seg_ids: (0..50).collect() };
        let rep = cross_validate(&data, &CvConfig::default()).unwrap();
        match rep.mean {
            TaskMetrics::Ti { mae, rmse } => assert!(mae < 0.5 && rmse >= mae, "{} {}", mae, rmse),
            _ => unreachable!(),
        }
    }

    #[test]
    fn small_fold_rejected() {
        let data = LabeledDataset {
            x: Tensor::zeros(&[12, 2]),
            y: Targets::Classes { labels: vec![1; 12], classes: 5 },
            seg_ids: (0..12).collect(),
        };
        assert!(matches!(cross_validate(&data, &CvConfig::default()), Err(Error::FoldTooSmall { .. })));
    }
}
