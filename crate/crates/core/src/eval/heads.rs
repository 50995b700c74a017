use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{adam_step, glorot_uniform, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::Result;

pub const TI_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTraining {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self { lr: 0.01, patience: 20, max_epochs: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Linear layer to `classes` logits with softmax.
    Classifier { classes: usize },
    /// `d → 64 → 1` with a ReLU hidden layer.
    Regressor,
}

/// Targets of one head: 0-based class ids or real values.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl HeadTargets {
    fn subset(&self, idx: &[usize]) -> HeadTargets {
        match self {
            HeadTargets::Classes(y) => HeadTargets::Classes(idx.iter().map(|&i| y[i]).collect()),
            HeadTargets::Values(y) => HeadTargets::Values(idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    kind: HeadKind,
    params: Vec<Tensor>,
}

impl TaskHead {
    pub fn new(kind: HeadKind, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match kind {
            HeadKind::Classifier { classes } => vec![glorot_uniform(d, classes, &mut rng), Tensor::zeros(&[1, classes])],
            HeadKind::Regressor => vec![
                glorot_uniform(d, TI_HIDDEN, &mut rng),
                Tensor::zeros(&[1, TI_HIDDEN]),
                glorot_uniform(TI_HIDDEN, 1, &mut rng),
                Tensor::zeros(&[1, 1]),
            ],
        };
        Self { kind, params }
    }

    fn record(&self, tape: &mut Tape<'_>, x: &Tensor, trainable: bool) -> Result<(Vec<Var>, Var)> {
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        let xv = tape.constant(x.clone());
        let out = match self.kind {
            HeadKind::Classifier { .. } => {
                let z = tape.matmul(xv, p[0])?;
                tape.add_row(z, p[1])?
            }
            HeadKind::Regressor => {
                let z = tape.matmul(xv, p[0])?;
                let z = tape.add_row(z, p[1])?;
                let a = tape.relu(z)?;
                let o = tape.matmul(a, p[2])?;
                tape.add_row(o, p[3])?
            }
        };
        Ok((p, out))
    }

    fn loss(&self, tape: &mut Tape<'_>, out: Var, y: &HeadTargets) -> Result<Var> {
        match y {
            HeadTargets::Classes(c) => tape.softmax_cross_entropy(out, c.clone()),
            HeadTargets::Values(v) => tape.mse(out, v.clone()),
        }
    }

    pub fn eval_loss(&self, x: &Tensor, y: &HeadTargets) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, x, false)?;
        let l = self.loss(&mut tape, out, y)?;
        Ok(tape.value(l).item())
    }

    /// Raw outputs: logits for a classifier, values for a regressor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, x, false)?;
        Ok(tape.value(out).clone())
    }

    /// Full-batch Adam with early stopping on the validation loss; the
    /// parameters of the best validation epoch are kept.
    pub fn fit(&mut self, x: &Tensor, y: &HeadTargets, x_val: &Tensor, y_val: &HeadTargets, cfg: &HeadTraining) -> Result<usize> {
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut opt = AdamState::new(&self.params);
        let mut best = (self.eval_loss(x_val, y_val)?, self.params.clone(), 0usize);
        let mut since_best = 0;
        for epoch in 1..=cfg.max_epochs {
            let grads = {
                let mut tape = Tape::new();
                let (p, out) = self.record(&mut tape, x, true)?;
                let l = self.loss(&mut tape, out, y)?;
                let g = tape.backward(l)?;
                p.iter().map(|&v| g.get(v)).collect::<Vec<_>>()
            };
            adam_step(&mut self.params, &grads, &mut opt, &adam)?;
            let v = self.eval_loss(x_val, y_val)?;
            if v < best.0 {
                best = (v, self.params.clone(), epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        self.params = best.1;
        Ok(best.2)
    }
}

pub(crate) fn subset_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(&[idx.len(), x.cols()]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

pub(crate) fn subset_targets(y: &HeadTargets, idx: &[usize]) -> HeadTargets {
    y.subset(idx)
}
