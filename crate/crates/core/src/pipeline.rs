//! In-memory composition of the stages, shared by the command line and the
//! end-to-end tests. Every function is a pure function of its inputs and
//! seeds, so running the stages one by one through files gives the same
//! numbers as running them here.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::eval::{cross_validate, rlc_dataset, segment_speed_targets, ti_dataset, CvConfig, MetricReport, TaskMetrics};
use crate::interaction::{build_interaction_matrix, build_transfer_matrix, count_k_hop, InteractionMatrix, Smoothing, TransferMatrix};
use crate::model::{encode_features, FeatureMatrix, ModelConfig, ModelState, ScaleBinding};
use crate::netio::{coverage, MapMatcher, MatchParams, RoadNetwork, RoadSequence, Trajectory, Traversal};
use crate::numerics::Tensor;
use crate::regions::{spectral_partition_with, Laplacian, RegionPartition};
use crate::scales::{order_sweep, ScaleOrders, SweepMetrics, SweepRow};
use crate::training::{train, LossLayers, TrainConfig};
use crate::{derive_seed, Error, Result};

const MODEL_STREAM: u64 = 0x6d6f_6465_6c00;
const REGION_STREAM: u64 = 0x7265_6769_6f6e;

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub seqs: Vec<RoadSequence>,
    /// `(traj_id, traversal)` in trajectory order.
    pub traversals: Vec<(i64, Traversal)>,
    pub unmatched: Vec<i64>,
    pub coverage: f64,
}

/// Matches every trajectory in parallel, keeping input order. Trajectories
/// without any candidate are listed in `unmatched`.
pub fn match_all(net: &RoadNetwork, trajs: &[Trajectory], params: MatchParams) -> Result<MatchOutput> {
    let matcher = MapMatcher::new(net, params);
    let results: Vec<Result<Option<_>>> = trajs
        .par_iter()
        .map(|t| match matcher.match_detailed(t) {
            Ok(m) => Ok(Some(m)),
            Err(Error::NoMatch(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut seqs = Vec::new();
    let mut traversals = Vec::new();
    let mut unmatched = Vec::new();
    for (t, r) in trajs.iter().zip(results) {
        match r? {
            Some(m) => {
                traversals.extend(m.traversals(net).into_iter().map(|tr| (t.traj_id, tr)));
                seqs.push(m.seq);
            }
            None => unmatched.push(t.traj_id),
        }
    }
    let coverage = coverage(&seqs, net.len());
    Ok(MatchOutput { seqs, traversals, unmatched, coverage })
}

pub fn speed_targets(traversals: &[(i64, Traversal)], net: &RoadNetwork) -> BTreeMap<usize, f64> {
    let flat: Vec<Traversal> = traversals.iter().map(|&(_, t)| t).collect();
    segment_speed_targets(&flat, net)
}

#[derive(Debug, Clone)]
pub struct ScaleMatrices {
    pub transfer: TransferMatrix,
    pub interaction: InteractionMatrix,
}

pub fn transfer_matrix(seqs: &[RoadSequence], net: &RoadNetwork, k: usize, smoothing: Smoothing) -> TransferMatrix {
    build_transfer_matrix(&count_k_hop(seqs, k), net, smoothing)
}

pub fn scale_matrices(seqs: &[RoadSequence], net: &RoadNetwork, k: usize, smoothing: Smoothing) -> Result<ScaleMatrices> {
    let transfer = transfer_matrix(seqs, net, k, smoothing);
    let interaction = build_interaction_matrix(&transfer)?;
    Ok(ScaleMatrices { transfer, interaction })
}

/// Seed of the k-means run for order `k`; it depends on the order only, so
/// one partition serves every triple containing `k`.
pub fn region_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed ^ REGION_STREAM, k as u64)
}

pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, MODEL_STREAM)
}

/// Settings of everything downstream of the matched sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub smoothing: Smoothing,
    pub regions: usize,
    pub laplacian: Laplacian,
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub neg_ratio: f64,
    pub loss_layers: LossLayers,
    pub alternate_scales: bool,
    pub checkpoint_every: usize,
    pub cv: CvConfig,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let probe = TrainConfig::new(ScaleOrders { k_s: 1, k_m: 2, k_l: 3 });
        Self {
            smoothing: Smoothing::default(),
            regions: 300,
            laplacian: Laplacian::default(),
            model: ModelConfig::default(),
            epochs: probe.epochs,
            lr: probe.lr,
            neg_ratio: probe.neg_ratio,
            loss_layers: probe.loss_layers,
            alternate_scales: probe.alternate_scales,
            checkpoint_every: probe.checkpoint_every,
            cv: CvConfig::default(),
            seed: 0,
        }
    }
}

impl Settings {
    pub fn train_config(&self, orders: ScaleOrders) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            neg_ratio: self.neg_ratio,
            seed: self.seed,
            scales: orders,
            loss_layers: self.loss_layers,
            alternate_scales: self.alternate_scales,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig { seed: self.seed, ..self.cv }
    }
}

/// Matrices and partition of one order.
#[derive(Debug, Clone)]
pub struct ScaleArtifacts {
    pub matrices: ScaleMatrices,
    pub partition: RegionPartition,
}

pub fn scale_artifacts(seqs: &[RoadSequence], net: &RoadNetwork, k: usize, settings: &Settings) -> Result<ScaleArtifacts> {
    let matrices = scale_matrices(seqs, net, k, settings.smoothing)?;
    let partition = spectral_partition_with(&matrices.interaction, settings.regions, region_seed(settings.seed, k), settings.laplacian)?;
    Ok(ScaleArtifacts { matrices, partition })
}

/// Builds the untrained model for `orders`. Order-violating triples are
/// accepted only with `allow_violations`.
pub fn build_model(
    f: &FeatureMatrix,
    p1: &TransferMatrix,
    scales: [&ScaleArtifacts; 3],
    settings: &Settings,
    allow_violations: bool,
) -> Result<ModelState> {
    let bindings = scales
        .iter()
        .map(|a| ScaleBinding::new(a.matrices.transfer.clone(), a.partition.clone(), settings.model.region_cap))
        .collect::<Result<Vec<_>>>()?;
    let seed = model_seed(settings.seed);
    if allow_violations {
        ModelState::new_unordered(settings.model, f.f(), p1.clone(), bindings, seed)
    } else {
        ModelState::new(settings.model, f.f(), p1.clone(), bindings, seed)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub state: ModelState,
    pub losses: Vec<f64>,
    pub embeddings: Tensor,
}

pub fn train_model(
    mut state: ModelState,
    f: &FeatureMatrix,
    scales: [&ScaleArtifacts; 3],
    orders: ScaleOrders,
    settings: &Settings,
    hook: &mut dyn FnMut(usize, &ModelState) -> Result<()>,
) -> Result<Trained> {
    let s: Vec<&InteractionMatrix> = scales.iter().map(|a| &a.matrices.interaction).collect();
    let outcome = train(&mut state, f, &s, &settings.train_config(orders), hook)?;
    let embeddings = state.forward(f)?;
    Ok(Trained { state, losses: outcome.losses, embeddings })
}

/// RLC and TI reports; TI is skipped when no segment has a speed.
pub fn evaluate(h: &Tensor, net: &RoadNetwork, speeds: &BTreeMap<usize, f64>, cv: &CvConfig) -> Result<Vec<MetricReport>> {
    let mut reports = vec![cross_validate(&rlc_dataset(h, net), cv)?];
    if !speeds.is_empty() {
        reports.push(cross_validate(&ti_dataset(h, speeds), cv)?);
    }
    Ok(reports)
}

pub fn sweep_metrics(reports: &[MetricReport]) -> Result<SweepMetrics> {
    let mut m = SweepMetrics { mi_f1: f64::NAN, ma_f1: f64::NAN, mae: f64::NAN, rmse: f64::NAN };
    for r in reports {
        match r.mean {
            TaskMetrics::Rlc { mi_f1, ma_f1 } => (m.mi_f1, m.ma_f1) = (mi_f1, ma_f1),
            TaskMetrics::Ti { mae, rmse } => (m.mae, m.rmse) = (mae, rmse),
        }
    }
    if m.mi_f1.is_nan() || m.mae.is_nan() {
        return Err(Error::Invalid("sweep needs both RLC and TI reports".into()));
    }
    Ok(m)
}

/// Inputs shared by every run on one city.
#[derive(Debug, Clone)]
pub struct Inputs<'a> {
    pub net: &'a RoadNetwork,
    pub seqs: &'a [RoadSequence],
    pub speeds: &'a BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub orders: ScaleOrders,
    pub trained: Trained,
    pub reports: Vec<MetricReport>,
}

/// Per-order artifacts computed once for a set of triples.
#[derive(Debug, Clone)]
pub struct ScaleCache {
    pub p1: TransferMatrix,
    pub by_order: BTreeMap<usize, ScaleArtifacts>,
}

impl ScaleCache {
    pub fn build(inputs: &Inputs<'_>, orders: &[ScaleOrders], settings: &Settings) -> Result<Self> {
        let ks: BTreeSet<usize> = orders.iter().flat_map(|o| o.as_array()).collect();
        let ks: Vec<usize> = ks.into_iter().collect();
        let built = ks
            .par_iter()
            .map(|&k| scale_artifacts(inputs.seqs, inputs.net, k, settings).map(|a| (k, a)))
            .collect::<Result<Vec<_>>>()?;
        let p1 = match built.iter().find(|(k, _)| *k == 1) {
            Some((_, a)) => a.matrices.transfer.clone(),
            None => transfer_matrix(inputs.seqs, inputs.net, 1, settings.smoothing),
        };
        Ok(Self { p1, by_order: built.into_iter().collect() })
    }

    pub fn get(&self, orders: ScaleOrders) -> Result<[&ScaleArtifacts; 3]> {
        let look = |k: usize| self.by_order.get(&k).ok_or_else(|| Error::Invalid(format!("order {} not cached", k)));
        Ok([look(orders.k_s)?, look(orders.k_m)?, look(orders.k_l)?])
    }
}

/// Model construction, training and evaluation for one triple.
pub fn run_with_cache(
    inputs: &Inputs<'_>,
    cache: &ScaleCache,
    orders: ScaleOrders,
    settings: &Settings,
    allow_violations: bool,
) -> Result<RunOutput> {
    let f = encode_features(inputs.net);
    let scales = cache.get(orders)?;
    let state = build_model(&f, &cache.p1, scales, settings, allow_violations)?;
    let trained = train_model(state, &f, scales, orders, settings, &mut |_, _| Ok(()))?;
    let reports = evaluate(&trained.embeddings, inputs.net, inputs.speeds, &settings.cv_config())?;
    Ok(RunOutput { orders, trained, reports })
}

/// Everything downstream of the matched sequences for one triple.
pub fn run_orders(inputs: &Inputs<'_>, orders: ScaleOrders, settings: &Settings, allow_violations: bool) -> Result<RunOutput> {
    let cache = ScaleCache::build(inputs, &[orders], settings)?;
    run_with_cache(inputs, &cache, orders, settings, allow_violations)
}

/// Sensitivity sweep over candidate triples; see [`order_sweep`].
pub fn sweep(inputs: &Inputs<'_>, candidates: &[ScaleOrders], settings: &Settings, allow_violations: bool) -> Result<Vec<SweepRow>> {
    let runnable: Vec<ScaleOrders> = candidates.iter().copied().filter(|o| allow_violations || o.is_ordered()).collect();
    let cache = ScaleCache::build(inputs, &runnable, settings)?;
    Ok(order_sweep(candidates, allow_violations, |orders| {
        let out = run_with_cache(inputs, &cache, orders, settings, true)?;
        sweep_metrics(&out.reports)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netio::{GpsPoint, LabelClass, RoadLevel, Segment};

    fn ring(n: usize) -> RoadNetwork {
        let segs = (0..n)
            .map(|i| {
                let a = i as f64 * 0.001;
                Segment {
                    orig_id: i as i64 + 100,
                    from_node: i as i64,
                    to_node: ((i + 1) % n) as i64,
                    geometry: vec![(a, 0.0), (a + 0.001, 0.0)],
                    length_m: 111.0,
                    lanes: 1,
                    speed_kmh: 50.0,
                    level: RoadLevel::Residential,
                    label: LabelClass::from_code(4).unwrap(),
                }
            })
            .collect();
        RoadNetwork::new(segs).unwrap()
    }

    #[test]
    fn unmatched_trajectories_are_listed() {
        let net = ring(4);
        let far = Trajectory {
            traj_id: 7,
            points: vec![GpsPoint { lon: 5.0, lat: 5.0, t: 0.0 }, GpsPoint { lon: 5.0, lat: 5.001, t: 10.0 }],
        };
        let out = match_all(&net, &[far], MatchParams::default()).unwrap();
        assert!(out.seqs.is_empty());
        assert_eq!(out.unmatched, vec![7]);
        assert_eq!(out.coverage, 0.0);
    }

    #[test]
    fn region_seed_depends_on_order_only() {
        assert_eq!(region_seed(3, 5), region_seed(3, 5));
        assert_ne!(region_seed(3, 5), region_seed(3, 6));
    }

    #[test]
    fn cache_shares_orders() {
        let net = ring(12);
        let seqs = vec![RoadSequence { traj_id: 0, segs: (0..12).collect() }];
        let speeds = BTreeMap::new();
        let inputs = Inputs { net: &net, seqs: &seqs, speeds: &speeds };
        let settings = Settings { regions: 2, ..Settings::default() };
        let orders = [ScaleOrders::new(1, 2, 3).unwrap(), ScaleOrders::new(1, 3, 4).unwrap()];
        let cache = ScaleCache::build(&inputs, &orders, &settings).unwrap();
        assert_eq!(cache.by_order.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(cache.p1.k(), 1);
    }
}
