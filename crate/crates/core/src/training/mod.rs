//! Contrastive training over interaction pairs.
//!
//! Positives are the edges of the three interaction graphs, tagged by their
//! order; negatives are uniformly drawn non-edges, resampled every epoch.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interaction::InteractionMatrix;
use crate::model::{forward_tape, FeatureMatrix, ModelState};
use crate::numerics::{adam_step, logistic_term, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::scales::ScaleOrders;
use crate::{derive_seed, Error, Result};

/// A pair `(i, j, k)` with `i < j` from the order-`k` interaction graph.
pub type Pair = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    pub epoch_seed: u64,
}

impl PairBatch {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Fixed positives plus per-call negative sampling.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    scales: Vec<&'a InteractionMatrix>,
    positives: Vec<Vec<Pair>>,
    neg_ratio: f64,
}

impl<'a> PairSampler<'a> {
    /// `present[s][i]` marks node `i` as having a transfer row at scale `s`;
    /// positives need both endpoints present. `None` keeps every edge.
    pub fn new(scales: Vec<&'a InteractionMatrix>, present: Option<&[Vec<bool>]>, neg_ratio: f64) -> Result<Self> {
        if !(neg_ratio > 0.0) || !neg_ratio.is_finite() {
            return Err(Error::Invalid(format!("neg_ratio must be positive, got {}", neg_ratio)));
        }
        if let Some(first) = scales.first() {
            if scales.iter().any(|s| s.n() != first.n()) {
                return Err(Error::ShapeMismatch("interaction matrices over different node counts".into()));
            }
        }
        if let Some(p) = present {
            if p.len() != scales.len() || p.iter().zip(&scales).any(|(m, s)| m.len() != s.n()) {
                return Err(Error::ShapeMismatch("presence masks do not match the scales".into()));
            }
        }
        let positives = scales
            .iter()
            .enumerate()
            .map(|(si, s)| {
                s.edges()
                    .iter()
                    .filter(|&&(i, j)| present.map_or(true, |p| p[si][i] && p[si][j]))
                    .map(|&(i, j)| (i, j, s.k()))
                    .collect()
            })
            .collect();
        Ok(Self { scales, positives, neg_ratio })
    }

    pub fn positive_count(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Batch over all scales.
    pub fn batch(&self, seed: u64) -> Result<PairBatch> {
        self.batch_for(seed, None)
    }

    /// Batch restricted to scale index `only` when given.
    pub fn batch_for(&self, seed: u64, only: Option<usize>) -> Result<PairBatch> {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (si, s) in self.scales.iter().enumerate() {
            if only.map_or(false, |o| o != si) {
                continue;
            }
            let pos = &self.positives[si];
            positives.extend_from_slice(pos);
            let want = (self.neg_ratio * pos.len() as f64).ceil() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, si as u64));
            negatives.extend(sample_non_edges(s, want, &mut rng)?.into_iter().map(|(i, j)| (i, j, s.k())));
        }
        Ok(PairBatch { positives, negatives, epoch_seed: seed })
    }
}

fn sample_non_edges(s: &InteractionMatrix, want: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let n = s.n();
    let total = n * n.saturating_sub(1) / 2;
    let available = total - s.edge_count();
    if want > available {
        return Err(Error::InsufficientNegatives { k: s.k(), requested: want, available });
    }
    if want == 0 {
        return Ok(Vec::new());
    }
    if 2 * want > available {
        let mut all = Vec::with_capacity(available);
        for i in 0..n {
            for j in i + 1..n {
                if !s.has_edge(i, j) {
                    all.push((i, j));
                }
            }
        }
        all.shuffle(rng);
        all.truncate(want);
        return Ok(all);
    }
    let mut seen = HashSet::with_capacity(want);
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if s.has_edge(pair.0, pair.1) || !seen.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn sample_pairs(scales: &[&InteractionMatrix], neg_ratio: f64, seed: u64) -> Result<PairBatch> {
    PairSampler::new(scales.to_vec(), None, neg_ratio)?.batch(seed)
}

/// Records the loss of `batch` on embeddings `h`.
pub fn contrastive_loss_tape(tape: &mut Tape<'_>, h: Var, batch: &PairBatch) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pairs = batch.positives.iter().chain(&batch.negatives).map(|&(i, j, _)| (i, j)).collect();
    let z = tape.pair_dot(h, pairs)?;
    tape.logistic_pair_loss(z, batch.positives.len())
}

pub fn contrastive_loss(h: &Tensor, batch: &PairBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = h.rows();
    let dot = |&(i, j, _): &Pair| -> Result<f64> {
        if i >= n || j >= n {
            return Err(Error::ShapeMismatch(format!("pair ({}, {}) with {} rows", i, j, n)));
        }
        Ok(h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum())
    };
    let mut loss = 0.0;
    if !batch.positives.is_empty() {
        let mut s = 0.0;
        for p in &batch.positives {
            s += logistic_term(dot(p)?, true);
        }
        loss += s / batch.positives.len() as f64;
    }
    if !batch.negatives.is_empty() {
        let mut s = 0.0;
        for p in &batch.negatives {
            s += logistic_term(dot(p)?, false);
        }
        loss += s / batch.negatives.len() as f64;
    }
    Ok(loss)
}

/// Which layer outputs the loss is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossLayers {
    #[default]
    Final,
    /// Sum of the losses on `H^1`, `H^2` and `H^3`.
    All,
}

impl std::str::FromStr for LossLayers {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(LossLayers::Final),
            "all" => Ok(LossLayers::All),
            other => Err(Error::Config(format!("unknown loss layers {:?}", other))),
        }
    }
}

impl std::fmt::Display for LossLayers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossLayers::Final => "final",
            LossLayers::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub neg_ratio: f64,
    pub seed: u64,
    pub scales: ScaleOrders,
    pub loss_layers: LossLayers,
    /// Train on one scale per epoch, cycling small, medium, large.
    pub alternate_scales: bool,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(scales: ScaleOrders) -> Self {
        Self {
            epochs: 1000,
            lr: 1e-3,
            neg_ratio: 1.0,
            seed: 0,
            scales,
            loss_layers: LossLayers::Final,
            alternate_scales: false,
            checkpoint_every: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate {} is not a finite nonnegative number", self.lr)));
        }
        if !(self.neg_ratio > 0.0) {
            return Err(Error::Invalid(format!("neg_ratio must be positive, got {}", self.neg_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Loss before each epoch's update, epochs numbered from 1.
    pub losses: Vec<f64>,
}

/// Fits `state` in place. `hook` runs after every `checkpoint_every`-th
/// epoch (and after the last one) with the epoch number.
pub fn train(
    state: &mut ModelState,
    f: &FeatureMatrix,
    scales: &[&InteractionMatrix],
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let orders = state.orders();
    if orders != cfg.scales.as_array() {
        return Err(Error::Invalid(format!("model bound to orders {:?}, config asks for {:?}", orders, cfg.scales.as_array())));
    }
    if scales.len() != 3 || scales.iter().zip(orders).any(|(s, k)| s.k() != k || s.n() != state.n()) {
        return Err(Error::ShapeMismatch("interaction matrices do not match the model's scales".into()));
    }
    let present: Vec<Vec<bool>> = state
        .bindings()
        .iter()
        .map(|b| (0..state.n()).map(|i| b.transfer().row_present(i)).collect())
        .collect();
    let sampler = PairSampler::new(scales.to_vec(), Some(&present), cfg.neg_ratio)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(state.params());
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let only = cfg.alternate_scales.then(|| (epoch - 1) % 3);
        let batch = sampler.batch_for(derive_seed(cfg.seed, epoch as u64), only)?;
        let non_finite = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { epoch },
            other => other,
        };
        let (loss_value, grads) = {
            let mut tape = Tape::new();
            let vars = forward_tape(&mut tape, state, f, true).map_err(non_finite)?;
            let loss = match cfg.loss_layers {
                LossLayers::Final => contrastive_loss_tape(&mut tape, vars.h[3], &batch).map_err(non_finite)?,
                LossLayers::All => {
                    let mut total = contrastive_loss_tape(&mut tape, vars.h[1], &batch).map_err(non_finite)?;
                    for l in 2..=3 {
                        let part = contrastive_loss_tape(&mut tape, vars.h[l], &batch).map_err(non_finite)?;
                        total = tape.add(total, part).map_err(non_finite)?;
                    }
                    total
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let g = tape.backward(loss).map_err(non_finite)?;
            let grads: Vec<Tensor> = vars.params.iter().map(|&v| g.get(v)).collect();
            (value, grads)
        };
        losses.push(loss_value);
        adam_step(state.params_mut(), &grads, &mut opt, &adam)?;
        if state.params().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) || epoch == cfg.epochs {
            hook(epoch, state)?;
        }
    }
    Ok(TrainOutcome { losses })
}

pub fn write_loss_curve<W: Write>(mut out: W, losses: &[f64]) -> Result<()> {
    writeln!(out, "epoch,loss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(out, "{},{}", e + 1, l)?;
    }
    Ok(())
}
