//! Spatial flow convolution followed by three region-blocked graph
//! transformer layers, each with a residual connection.

mod features;

pub use features::{encode_features, read_embeddings, write_embeddings, zscore, FeatureMatrix, EMBEDDINGS_HEADER, FEATURE_NAMES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::interaction::TransferMatrix;
use crate::numerics::{glorot_uniform, Tape, Tensor, Var};
use crate::regions::RegionPartition;
use crate::{Error, Result};

/// Number of log-spaced probability buckets; bucket 0 holds `p = 0`.
pub const BIAS_BUCKETS: usize = 16;
pub const DEFAULT_REGION_CAP: usize = 4096;

pub fn bias_bucket(p: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("transfer probability {} outside [0, 1]", p)));
    }
    if p == 0.0 {
        return Ok(0);
    }
    let b = BIAS_BUCKETS as f64;
    let x = -(p.max((-b).exp2())).log2();
    let bucket = 1 + (x * (b - 1.0) / b).floor() as usize;
    Ok(bucket.clamp(1, BIAS_BUCKETS))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub region_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 208, heads: 4, region_cap: DEFAULT_REGION_CAP }
    }
}

/// One scale: its transfer matrix, its regions and the bias buckets of
/// every ordered pair inside each region.
#[derive(Debug, Clone)]
pub struct ScaleBinding {
    p: TransferMatrix,
    regions: RegionPartition,
    members: Vec<Vec<usize>>,
    buckets: Vec<Vec<usize>>,
}

impl ScaleBinding {
    pub fn new(p: TransferMatrix, regions: RegionPartition, region_cap: usize) -> Result<Self> {
        if p.n() != regions.n() {
            return Err(Error::ShapeMismatch(format!(
                "transfer matrix over {} nodes, partition over {}",
                p.n(),
                regions.n()
            )));
        }
        if p.k() != regions.k() {
            return Err(Error::ShapeMismatch(format!(
                "transfer matrix of order {} bound to regions of order {}",
                p.k(),
                regions.k()
            )));
        }
        let members = regions.members();
        let mut buckets = Vec::with_capacity(members.len());
        for (r, nodes) in members.iter().enumerate() {
            if nodes.len() > region_cap {
                return Err(Error::RegionTooLarge { region: r, size: nodes.len(), cap: region_cap });
            }
            let m = nodes.len();
            let mut b = vec![0usize; m * m];
            for (a, &i) in nodes.iter().enumerate() {
                // Row i of P restricted to the region, by merge of sorted lists.
                let mut row = p.row(i).peekable();
                for (c, &j) in nodes.iter().enumerate() {
                    while row.peek().map_or(false, |&(col, _)| col < j) {
                        row.next();
                    }
                    if let Some(&(col, v)) = row.peek() {
                        if col == j {
                            b[a * m + c] = bias_bucket(v.min(1.0))?;
                        }
                    }
                }
            }
            buckets.push(b);
        }
        Ok(Self { p, regions, members, buckets })
    }

    pub fn k(&self) -> usize {
        self.p.k()
    }

    pub fn transfer(&self) -> &TransferMatrix {
        &self.p
    }

    pub fn regions(&self) -> &RegionPartition {
        &self.regions
    }
}

/// Indices into the flat parameter list for one transformer layer.
#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    base: usize,
    heads: usize,
}

impl LayerLayout {
    fn wq(&self, h: usize) -> usize {
        self.base + 3 * h
    }
    fn wk(&self, h: usize) -> usize {
        self.base + 3 * h + 1
    }
    fn wv(&self, h: usize) -> usize {
        self.base + 3 * h + 2
    }
    fn wo(&self) -> usize {
        self.base + 3 * self.heads
    }
    fn bias(&self) -> usize {
        self.base + 3 * self.heads + 1
    }
    fn len(heads: usize) -> usize {
        3 * heads + 2
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    cfg: ModelConfig,
    f: usize,
    p1: TransferMatrix,
    bindings: Vec<ScaleBinding>,
    params: Vec<Tensor>,
    names: Vec<String>,
    cache: Vec<Tensor>,
}

impl ModelState {
    /// Builds a model bound to `p1` for the convolution and three scales in
    /// strictly increasing order. Weights are Glorot-uniform from `seed`;
    /// bias tables start at zero.
    pub fn new(cfg: ModelConfig, f: usize, p1: TransferMatrix, bindings: Vec<ScaleBinding>, seed: u64) -> Result<Self> {
        if bindings.len() == 3 && !(bindings[0].k() < bindings[1].k() && bindings[1].k() < bindings[2].k()) {
            return Err(Error::Invalid(format!(
                "scale orders ({}, {}, {}) are not strictly increasing",
                bindings[0].k(),
                bindings[1].k(),
                bindings[2].k()
            )));
        }
        Self::new_unordered(cfg, f, p1, bindings, seed)
    }

    /// Like [`ModelState::new`] without the order check, for sensitivity
    /// runs over order-violating triples.
    pub fn new_unordered(cfg: ModelConfig, f: usize, p1: TransferMatrix, bindings: Vec<ScaleBinding>, seed: u64) -> Result<Self> {
        if bindings.len() != 3 {
            return Err(Error::Invalid(format!("expected 3 scale bindings, got {}", bindings.len())));
        }
        if cfg.heads == 0 || cfg.d == 0 || cfg.d % cfg.heads != 0 {
            return Err(Error::Invalid(format!("d = {} is not divisible by {} heads", cfg.d, cfg.heads)));
        }
        if p1.k() != 1 {
            return Err(Error::Invalid(format!("convolution needs the order-1 transfer matrix, got k = {}", p1.k())));
        }
        let n = p1.n();
        if let Some(b) = bindings.iter().find(|b| b.p.n() != n) {
            return Err(Error::ShapeMismatch(format!("scale {} has {} nodes, expected {}", b.k(), b.p.n(), n)));
        }
        let d = cfg.d;
        let dh = d / cfg.heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![glorot_uniform(f, d, &mut rng)];
        let mut names = vec!["sfc.w".to_string()];
        for l in 0..3 {
            for h in 0..cfg.heads {
                for m in ["wq", "wk", "wv"] {
                    params.push(glorot_uniform(d, dh, &mut rng));
                    names.push(format!("gt{}.h{}.{}", l + 1, h, m));
                }
            }
            params.push(glorot_uniform(d, d, &mut rng));
            names.push(format!("gt{}.wo", l + 1));
            params.push(Tensor::zeros(&[cfg.heads, BIAS_BUCKETS + 1]));
            names.push(format!("gt{}.bias", l + 1));
        }
        Ok(Self { cfg, f, p1, bindings, params, names, cache: Vec::new() })
    }

    fn layout(&self, l: usize) -> LayerLayout {
        LayerLayout { base: 1 + l * LayerLayout::len(self.cfg.heads), heads: self.cfg.heads }
    }

    pub fn config(&self) -> ModelConfig {
        self.cfg
    }

    pub fn n(&self) -> usize {
        self.p1.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.f
    }

    pub fn orders(&self) -> [usize; 3] {
        [self.bindings[0].k(), self.bindings[1].k(), self.bindings[2].k()]
    }

    pub fn bindings(&self) -> &[ScaleBinding] {
        &self.bindings
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    /// Replaces parameters from a checkpoint; names and shapes must match.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors for {} parameters", named.len(), self.params.len())));
        }
        for (idx, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[idx] || t.shape() != self.params[idx].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {} does not match {} {}",
                    name,
                    t.shape_string(),
                    self.names[idx],
                    self.params[idx].shape_string()
                )));
            }
            self.params[idx] = t;
        }
        Ok(())
    }

    /// Zeroes every transformer-layer parameter, leaving the convolution.
    pub fn zero_transformer(&mut self) {
        for t in self.params.iter_mut().skip(1) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `H^0..H^3` of the most recent [`ModelState::forward`].
    pub fn cached(&self) -> &[Tensor] {
        &self.cache
    }

    /// Runs the model and caches every layer output; returns `H^3`.
    pub fn forward(&mut self, f: &FeatureMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = forward_tape(&mut tape, self, f, false)?;
        let cache: Vec<Tensor> = out.h.iter().map(|&v| tape.value(v).clone()).collect();
        drop(tape);
        self.cache = cache;
        Ok(self.cache[3].clone())
    }
}

/// The variables recorded by one forward pass.
pub struct ForwardVars {
    /// One leaf per parameter, in [`ModelState::params`] order.
    pub params: Vec<Var>,
    /// `H^0..H^3`.
    pub h: Vec<Var>,
    /// Attention weights per layer, per region, per head.
    pub attention: Vec<Vec<Vec<Var>>>,
}

/// Records the forward pass on `tape`. With `trainable` the parameter
/// leaves require gradients.
pub fn forward_tape<'a>(tape: &mut Tape<'a>, state: &'a ModelState, f: &FeatureMatrix, trainable: bool) -> Result<ForwardVars> {
    if f.n() != state.n() || f.f() != state.f {
        return Err(Error::ShapeMismatch(format!(
            "features {} for a model over {} nodes with f = {}",
            f.data.shape_string(),
            state.n(),
            state.f
        )));
    }
    let params: Vec<Var> = state.params.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
    let x = tape.constant(f.data.clone());
    let h0 = sfc_tape(tape, state.p1.csr(), x, params[0])?;
    let mut h = vec![h0];
    let mut attention = Vec::new();
    for l in 0..3 {
        let lay = state.layout(l);
        let vars = LayerVars {
            wq: (0..lay.heads).map(|i| params[lay.wq(i)]).collect(),
            wk: (0..lay.heads).map(|i| params[lay.wk(i)]).collect(),
            wv: (0..lay.heads).map(|i| params[lay.wv(i)]).collect(),
            wo: params[lay.wo()],
            bias: params[lay.bias()],
        };
        let (out, att) = gt_layer_tape(tape, h[l], &vars, &state.bindings[l])?;
        h.push(out);
        attention.push(att);
    }
    Ok(ForwardVars { params, h, attention })
}

fn sfc_tape<'a>(tape: &mut Tape<'a>, p1: &'a crate::numerics::CsrMatrix, x: Var, w: Var) -> Result<Var> {
    let pf = tape.sparse_matmul(p1, x)?;
    let z = tape.matmul(pf, w)?;
    tape.relu(z)
}

/// Parameter variables of one transformer layer.
pub struct LayerVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    /// `heads × (BIAS_BUCKETS + 1)`.
    pub bias: Var,
}

/// One region-blocked transformer layer with residual. Returns the output
/// and the attention matrices per region and head.
pub fn gt_layer_tape(tape: &mut Tape<'_>, h_in: Var, vars: &LayerVars, binding: &ScaleBinding) -> Result<(Var, Vec<Vec<Var>>)> {
    let n = tape.value(h_in).rows();
    let d = tape.value(h_in).cols();
    let heads = vars.wq.len();
    if binding.regions.n() != n {
        return Err(Error::ShapeMismatch(format!("layer input has {} rows, regions cover {}", n, binding.regions.n())));
    }
    let dh = tape.value(vars.wq[0]).cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(binding.members.len());
    let mut attention = Vec::with_capacity(binding.members.len());
    for (nodes, buckets) in binding.members.iter().zip(&binding.buckets) {
        let m = nodes.len();
        let hr = tape.gather_rows(h_in, nodes.clone())?;
        let mut head_out = Vec::with_capacity(heads);
        let mut head_att = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.matmul(hr, vars.wq[hd])?;
            let k = tape.matmul(hr, vars.wk[hd])?;
            let v = tape.matmul(hr, vars.wv[hd])?;
            let kt = tape.transpose(k)?;
            let qk = tape.matmul(q, kt)?;
            let qk = tape.scale(qk, scale)?;
            let idx = buckets.iter().map(|&b| hd * (BIAS_BUCKETS + 1) + b).collect();
            let bias = tape.lookup(vars.bias, idx, &[m, m])?;
            let logits = tape.add(qk, bias)?;
            let att = tape.row_softmax(logits, None)?;
            head_out.push(tape.matmul(att, v)?);
            head_att.push(att);
        }
        let cat = tape.concat_cols(head_out)?;
        parts.push((cat, nodes.clone()));
        attention.push(head_att);
    }
    let merged = tape.scatter_rows(parts, n)?;
    if tape.value(merged).cols() != d {
        return Err(Error::ShapeMismatch(format!("heads concatenate to {} columns, expected {}", tape.value(merged).cols(), d)));
    }
    let proj = tape.matmul(merged, vars.wo)?;
    let out = tape.add(proj, h_in)?;
    Ok((out, attention))
}

/// `ReLU(P¹ · F · W)`.
pub fn sfc_forward(p1: &TransferMatrix, f: &FeatureMatrix, w: &Tensor) -> Result<Tensor> {
    if p1.k() != 1 {
        return Err(Error::Invalid(format!("convolution needs k = 1, got {}", p1.k())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.data.clone());
    let wv = tape.constant(w.clone());
    let out = sfc_tape(&mut tape, p1.csr(), x, wv)?;
    Ok(tape.value(out).clone())
}

/// Tensor-level parameters of one transformer layer.
#[derive(Debug, Clone)]
pub struct GtLayerParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub bias: Tensor,
}

impl GtLayerParams {
    pub fn zeros(d: usize, heads: usize) -> Self {
        let dh = d / heads;
        Self {
            wq: vec![Tensor::zeros(&[d, dh]); heads],
            wk: vec![Tensor::zeros(&[d, dh]); heads],
            wv: vec![Tensor::zeros(&[d, dh]); heads],
            wo: Tensor::zeros(&[d, d]),
            bias: Tensor::zeros(&[heads, BIAS_BUCKETS + 1]),
        }
    }
}

/// Applies one layer to `h_in`; returns the output and attention weights
/// per region and head.
pub fn gt_layer_forward(h_in: &Tensor, layer: &GtLayerParams, binding: &ScaleBinding) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let h = tape.constant(h_in.clone());
    let vars = LayerVars {
        wq: layer.wq.iter().map(|t| tape.constant(t.clone())).collect(),
        wk: layer.wk.iter().map(|t| tape.constant(t.clone())).collect(),
        wv: layer.wv.iter().map(|t| tape.constant(t.clone())).collect(),
        wo: tape.constant(layer.wo.clone()),
        bias: tape.constant(layer.bias.clone()),
    };
    let (out, att) = gt_layer_tape(&mut tape, h, &vars, binding)?;
    let att = att.iter().map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect()).collect();
    Ok((tape.value(out).clone(), att))
}

/// Runs the model once and returns `H^3`.
pub fn forward(state: &mut ModelState, f: &FeatureMatrix) -> Result<Tensor> {
    state.forward(f)
}
