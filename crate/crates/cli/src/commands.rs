//! Pipeline stages. Each stage reads its inputs from the workdir, checks
//! them against the manifests of the stages that wrote them, and writes its
//! own artifacts plus a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use msrf_core::eval::{read_speed_targets, write_report, write_speed_targets, TaskMetrics};
use msrf_core::interaction::{
    read_interaction_matrix, read_transfer_matrix, write_interaction_matrix, write_transfer_matrix,
};
use msrf_core::model::{encode_features, read_embeddings, write_embeddings};
use msrf_core::netio::{
    filter_trajectories, load_road_network, load_trajectories, read_matched_sequences, write_matched_sequences,
    write_road_network, write_trajectories, write_traversals, RoadNetwork, RoadSequence,
};
use msrf_core::numerics::{write_checkpoint, Tensor};
use msrf_core::pipeline::{self, Inputs, ScaleArtifacts, ScaleMatrices};
use msrf_core::regions::{read_partition, region_overlap_report, spectral_partition_with, write_partition};
use msrf_core::scales::{
    order_distribution, sample_sequences, select_scale_orders, write_histogram, write_sweep, ScaleOrders,
};
use msrf_core::training::write_loss_curve;

use crate::config::{resolve, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_file, io_err, sha256_hex, Manifest};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Match,
    Scales,
    Matrices,
    Regions,
    Train,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Match => "match",
            Stage::Scales => "scales",
            Stage::Matrices => "matrices",
            Stage::Regions => "regions",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    /// Config sections whose values can change this stage's outputs.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["", "synth"],
            Stage::Match => &["", "match"],
            Stage::Scales => &["", "match", "scales"],
            Stage::Matrices => &["", "match", "scales", "matrices"],
            Stage::Regions => &["", "match", "scales", "matrices", "regions"],
            Stage::Train => &["", "match", "scales", "matrices", "regions", "model", "train"],
            Stage::Eval => &["", "match", "scales", "matrices", "regions", "model", "train", "eval"],
            Stage::Sweep => &["", "match", "scales", "matrices", "regions", "model", "train", "eval", "sweep"],
            Stage::Report => &["", "match", "scales", "matrices", "regions", "model", "train", "report"],
        }
    }
}

/// Everything a stage needs besides its inputs.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: PipelineConfig,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub force: bool,
    pub allow_violations: bool,
}

impl Context {
    pub fn new(cfg: PipelineConfig, base: PathBuf) -> Self {
        Self { cfg, base, force: false, allow_violations: false }
    }

    pub fn workdir(&self) -> PathBuf {
        resolve(&self.base, &self.cfg.paths.workdir)
    }

    pub fn network_path(&self) -> PathBuf {
        resolve(&self.base, &self.cfg.paths.network)
    }

    pub fn trajectories_path(&self) -> PathBuf {
        resolve(&self.base, &self.cfg.paths.trajectories)
    }

    pub fn config_hash(&self, stage: Stage) -> String {
        sha256_hex(self.cfg.render_only(stage.sections()).as_bytes())
    }

    fn load_network(&self) -> CliResult<(RoadNetwork, String)> {
        let path = self.network_path();
        let hash = hash_file(&path)?;
        let net = load_road_network(&path)?;
        Ok((net, hash))
    }
}

/// Bookkeeping for one stage invocation.
struct StageRun<'a> {
    ctx: &'a Context,
    workdir: PathBuf,
    manifest: Manifest,
    network_hash: Option<String>,
    upstream: BTreeMap<&'static str, Manifest>,
}

impl<'a> StageRun<'a> {
    fn begin(ctx: &'a Context, stage: Stage) -> CliResult<Self> {
        let workdir = ctx.workdir();
        fs::create_dir_all(&workdir).map_err(|e| io_err(&workdir, e))?;
        Ok(Self {
            ctx,
            workdir,
            manifest: Manifest::new(stage.name(), ctx.config_hash(stage), ctx.cfg.seed),
            network_hash: None,
            upstream: BTreeMap::new(),
        })
    }

    fn network(&mut self) -> CliResult<RoadNetwork> {
        let (net, hash) = self.ctx.load_network()?;
        self.manifest.inputs.push(("network".into(), hash.clone()));
        self.network_hash = Some(hash);
        Ok(net)
    }

    fn upstream_manifest(&mut self, stage: Stage, artifact: &Path) -> CliResult<Option<&Manifest>> {
        if !self.upstream.contains_key(stage.name()) {
            match Manifest::read(&self.workdir, stage.name())? {
                Some(m) => {
                    self.upstream.insert(stage.name(), m);
                }
                None if self.ctx.force => return Ok(None),
                None => {
                    return Err(CliError::Stale(format!(
                        "{} has no {} manifest",
                        artifact.display(),
                        stage.name()
                    )))
                }
            }
        }
        Ok(self.upstream.get(stage.name()))
    }

    /// Verifies an upstream artifact and records it as an input.
    fn consume(&mut self, stage: Stage, name: &str) -> CliResult<PathBuf> {
        let path = self.workdir.join(name);
        let hash = hash_file(&path)?;
        let force = self.ctx.force;
        let expected_config = self.ctx.config_hash(stage);
        let network_hash = self.network_hash.clone();
        if let Some(m) = self.upstream_manifest(stage, &path)? {
            if !force {
                if m.config_hash != expected_config {
                    return Err(CliError::Stale(format!(
                        "{} was written by {} with different settings",
                        name,
                        stage.name()
                    )));
                }
                if m.output(name) != Some(hash.as_str()) {
                    return Err(CliError::Stale(format!("{} does not match the {} manifest", name, stage.name())));
                }
                if let (Some(want), Some(had)) = (network_hash.as_deref(), m.input("network")) {
                    if want != had {
                        return Err(CliError::Stale(format!(
                            "{} was built from a different road network",
                            stage.name()
                        )));
                    }
                }
            }
        }
        self.manifest.inputs.push((name.to_string(), hash));
        Ok(path)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.workdir.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.manifest.outputs.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn finish(self) -> CliResult<()> {
        self.manifest.write(&self.workdir)
    }
}

fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn render<F>(f: F) -> CliResult<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> msrf_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn transfer_name(k: usize) -> String {
    format!("transfer_k{}.txt", k)
}

pub fn interaction_name(k: usize) -> String {
    format!("interaction_k{}.txt", k)
}

pub fn regions_name(k: usize) -> String {
    format!("regions_k{}.csv", k)
}

fn distinct(orders: ScaleOrders) -> Vec<usize> {
    orders.as_array().into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

fn read_orders(path: &Path) -> CliResult<ScaleOrders> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let line = text.lines().nth(1).ok_or_else(|| CliError::Stale(format!("{} is truncated", path.display())))?;
    Ok(line.parse::<ScaleOrders>()?)
}

fn check_orders(ctx: &Context, orders: ScaleOrders) -> CliResult<()> {
    if !orders.is_ordered() && !ctx.allow_violations {
        return Err(CliError::Config(format!(
            "orders {} violate k_S < k_M < k_L (pass --allow-violations to run anyway)",
            orders
        )));
    }
    Ok(())
}

pub fn cmd_synth(ctx: &Context) -> CliResult<()> {
    let spec = &ctx.cfg.synth;
    let (net, planted) = synth::generate(spec)?;
    let trajs: Vec<_> = planted.into_iter().map(|p| p.trajectory).collect();
    let mut run = StageRun::begin(ctx, Stage::Synth)?;
    for (path, bytes) in [
        (ctx.network_path(), render(|b| write_road_network(b, &net))?),
        (ctx.trajectories_path(), render(|b| write_trajectories(b, &trajs))?),
    ] {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        run.manifest.outputs.push((name, sha256_hex(&bytes)));
    }
    println!(
        "synth: {}x{} grid, {} segments, {} trajectories",
        spec.width,
        spec.height,
        net.len(),
        trajs.len()
    );
    run.finish()
}

pub fn cmd_match(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Match)?;
    let traj_path = ctx.trajectories_path();
    for p in [ctx.network_path(), traj_path.clone()] {
        if !p.exists() {
            return Err(CliError::Missing(p));
        }
    }
    let net = run.network()?;
    let traj_hash = hash_file(&traj_path)?;
    run.manifest.inputs.push(("trajectories".into(), traj_hash));
    let all = load_trajectories(&traj_path)?;
    let kept = filter_trajectories(&all, &ctx.cfg.bbox(&net), ctx.cfg.matching.min_points);
    eprintln!("match: kept {} of {} trajectories", kept.len(), all.len());
    let out = pipeline::match_all(&net, &kept, ctx.cfg.matching.params)?;
    let speeds = pipeline::speed_targets(&out.traversals, &net);
    run.write("matched.txt", &render(|b| write_matched_sequences(b, &out.seqs, &net))?)?;
    run.write("traversals.csv", &render(|b| write_traversals(b, &out.traversals, &net))?)?;
    run.write("speeds.csv", &render(|b| write_speed_targets(b, &speeds, &net))?)?;
    println!(
        "match: {} matched, {} unmatched, coverage {:.4}",
        out.seqs.len(),
        out.unmatched.len(),
        out.coverage
    );
    run.finish()
}

fn load_sequences(run: &mut StageRun<'_>, net: &RoadNetwork) -> CliResult<Vec<RoadSequence>> {
    let path = run.consume(Stage::Match, "matched.txt")?;
    Ok(read_matched_sequences(open(&path)?, net)?)
}

pub fn cmd_scales(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Scales)?;
    let net = run.network()?;
    let seqs = load_sequences(&mut run, &net)?;
    let sc = &ctx.cfg.scales;
    let sample = sample_sequences(&seqs, sc.sample_size, ctx.cfg.seed);
    let hist = order_distribution(&sample, &net, sc.k_max)?;
    let orders = match sc.orders {
        Some(o) => o,
        None => select_scale_orders(&hist, &sc.ranges)?,
    };
    check_orders(ctx, orders)?;
    run.write("histogram.csv", &render(|b| write_histogram(b, &hist))?)?;
    run.write("scales.txt", format!("k_S,k_M,k_L\n{}\n", orders).as_bytes())?;
    println!("scales: orders {} from {} sampled sequences", orders, sample.len());
    run.finish()
}

fn load_orders(run: &mut StageRun<'_>) -> CliResult<ScaleOrders> {
    let path = run.consume(Stage::Scales, "scales.txt")?;
    let orders = read_orders(&path)?;
    check_orders(run.ctx, orders)?;
    Ok(orders)
}

pub fn cmd_matrices(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Matrices)?;
    let net = run.network()?;
    let orders = load_orders(&mut run)?;
    let seqs = load_sequences(&mut run, &net)?;
    let ks = distinct(orders);
    let smoothing = ctx.cfg.smoothing;
    let built = ks
        .par_iter()
        .map(|&k| pipeline::scale_matrices(&seqs, &net, k, smoothing).map(|m| (k, m)))
        .collect::<msrf_core::Result<Vec<(usize, ScaleMatrices)>>>()?;
    for (k, m) in &built {
        run.write(&transfer_name(*k), &render(|b| write_transfer_matrix(b, &m.transfer))?)?;
        run.write(&interaction_name(*k), &render(|b| write_interaction_matrix(b, &m.interaction))?)?;
        eprintln!(
            "matrices: k={} transfer rows {} nnz {}, interaction edges {}",
            k,
            m.transfer.present_rows(),
            m.transfer.nnz(),
            m.interaction.edge_count()
        );
    }
    if !ks.contains(&1) {
        let p1 = pipeline::transfer_matrix(&seqs, &net, 1, smoothing);
        run.write(&transfer_name(1), &render(|b| write_transfer_matrix(b, &p1))?)?;
    }
    println!("matrices: orders {}", orders);
    run.finish()
}

pub fn cmd_regions(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Regions)?;
    let net = run.network()?;
    let orders = load_orders(&mut run)?;
    let ks = distinct(orders);
    let mut mats = Vec::new();
    for &k in &ks {
        let path = run.consume(Stage::Matrices, &interaction_name(k))?;
        mats.push((k, read_interaction_matrix(open(&path)?)?));
    }
    let (r, seed, lap) = (ctx.cfg.regions, ctx.cfg.seed, ctx.cfg.laplacian);
    let parts = mats
        .par_iter()
        .map(|(k, s)| {
            let rs = pipeline::region_seed(seed, *k);
            spectral_partition_with(s, r, rs, lap).map(|p| (*k, rs, p))
        })
        .collect::<msrf_core::Result<Vec<_>>>()?;
    for (k, rs, p) in &parts {
        run.write(&regions_name(*k), &render(|b| write_partition(b, p, *rs, &net))?)?;
        let sizes: Vec<usize> = p.members().iter().map(Vec::len).collect();
        eprintln!("regions: k={} sizes {:?}", k, sizes);
    }
    println!("regions: r={} for orders {}", r, orders);
    run.finish()
}

fn load_scale(run: &mut StageRun<'_>, net: &RoadNetwork, k: usize) -> CliResult<ScaleArtifacts> {
    let tp = run.consume(Stage::Matrices, &transfer_name(k))?;
    let ip = run.consume(Stage::Matrices, &interaction_name(k))?;
    let rp = run.consume(Stage::Regions, &regions_name(k))?;
    Ok(ScaleArtifacts {
        matrices: ScaleMatrices {
            transfer: read_transfer_matrix(open(&tp)?)?,
            interaction: read_interaction_matrix(open(&ip)?)?,
        },
        partition: read_partition(open(&rp)?, net)?.0,
    })
}

pub fn cmd_train(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Train)?;
    let net = run.network()?;
    let orders = load_orders(&mut run)?;
    let mut by_k = BTreeMap::new();
    for k in distinct(orders) {
        by_k.insert(k, load_scale(&mut run, &net, k)?);
    }
    let p1 = match by_k.get(&1) {
        Some(a) => a.matrices.transfer.clone(),
        None => {
            let path = run.consume(Stage::Matrices, &transfer_name(1))?;
            read_transfer_matrix(open(&path)?)?
        }
    };
    let scales = [&by_k[&orders.k_s], &by_k[&orders.k_m], &by_k[&orders.k_l]];
    let settings = ctx.cfg.settings();
    let f = encode_features(&net);
    let state = pipeline::build_model(&f, &p1, scales, &settings, ctx.allow_violations)?;
    let mut checkpoints = Vec::new();
    let trained = pipeline::train_model(state, &f, scales, orders, &settings, &mut |epoch, s| {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s.named_params())?;
        checkpoints.push((format!("checkpoints/epoch_{:05}.ckpt", epoch), buf));
        Ok(())
    })?;
    for (name, bytes) in &checkpoints {
        run.write(name, bytes)?;
    }
    run.write("params.ckpt", &render(|b| write_checkpoint(b, &trained.state.named_params()))?)?;
    run.write("loss.csv", &render(|b| write_loss_curve(b, &trained.losses))?)?;
    run.write("embeddings.csv", &render(|b| write_embeddings(b, &trained.embeddings, &net))?)?;
    println!(
        "train: f={}, {} epochs, loss {} -> {}",
        f.f(),
        trained.losses.len(),
        trained.losses.first().copied().unwrap_or(f64::NAN),
        trained.losses.last().copied().unwrap_or(f64::NAN)
    );
    run.finish()
}

fn print_reports(stage: &str, reports: &[msrf_core::eval::MetricReport]) {
    for r in reports {
        match r.mean {
            TaskMetrics::Rlc { mi_f1, ma_f1 } => println!("{}: RLC mi_f1 {} ma_f1 {}", stage, mi_f1, ma_f1),
            TaskMetrics::Ti { mae, rmse } => println!("{}: TI mae {} rmse {}", stage, mae, rmse),
        }
    }
}

pub fn cmd_eval(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Eval)?;
    let net = run.network()?;
    let orders = load_orders(&mut run)?;
    for k in distinct(orders) {
        run.consume(Stage::Matrices, &transfer_name(k))?;
        run.consume(Stage::Matrices, &interaction_name(k))?;
    }
    let emb = run.consume(Stage::Train, "embeddings.csv")?;
    let h = read_embeddings(open(&emb)?, &net)?;
    let sp = run.consume(Stage::Match, "speeds.csv")?;
    let speeds = read_speed_targets(open(&sp)?, &net)?;
    let reports = pipeline::evaluate(&h, &net, &speeds, &ctx.cfg.settings().cv_config())?;
    run.write("report.csv", &render(|b| write_report(b, &reports))?)?;
    print_reports("eval", &reports);
    run.finish()
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Sweep)?;
    let net = run.network()?;
    let seqs = load_sequences(&mut run, &net)?;
    let sp = run.consume(Stage::Match, "speeds.csv")?;
    let speeds = read_speed_targets(open(&sp)?, &net)?;
    let candidates = if ctx.cfg.sweep.candidates.is_empty() {
        ctx.cfg.scales.ranges.candidates()
    } else {
        ctx.cfg.sweep.candidates.clone()
    };
    let inputs = Inputs { net: &net, seqs: &seqs, speeds: &speeds };
    let rows = pipeline::sweep(&inputs, &candidates, &ctx.cfg.settings(), ctx.allow_violations)?;
    for r in &rows {
        match (&r.metrics, &r.error) {
            (Some(m), _) => println!("sweep: {} mi_f1 {} mae {}", r.orders, m.mi_f1, m.mae),
            (None, e) => println!("sweep: {} skipped ({})", r.orders, e.as_deref().unwrap_or("no metrics")),
        }
    }
    run.write("sweep.csv", &render(|b| write_sweep(b, &rows))?)?;
    run.finish()
}

fn cosine(h: &Tensor, a: usize, b: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for c in 0..h.cols() {
        let (x, y) = (h.at(a, c), h.at(b, c));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

pub fn cmd_report(ctx: &Context) -> CliResult<()> {
    let mut run = StageRun::begin(ctx, Stage::Report)?;
    let net = run.network()?;
    let orders = load_orders(&mut run)?;
    let mut parts = BTreeMap::new();
    for k in distinct(orders) {
        let path = run.consume(Stage::Regions, &regions_name(k))?;
        parts.insert(k, read_partition(open(&path)?, &net)?.0);
    }
    for (a, b) in [(orders.k_s, orders.k_m), (orders.k_m, orders.k_l)] {
        if a == b {
            continue;
        }
        let rows = region_overlap_report(&parts[&a], &parts[&b])?;
        let mut text = format!("region_k{},region_k{},count\n", a, b);
        for (ra, rb, c) in rows {
            text.push_str(&format!("{},{},{}\n", ra, rb, c));
        }
        run.write(&format!("overlap_k{}_k{}.csv", a, b), text.as_bytes())?;
    }
    let ids = &ctx.cfg.report_seg_ids;
    if !ids.is_empty() {
        let emb = run.consume(Stage::Train, "embeddings.csv")?;
        let h = read_embeddings(open(&emb)?, &net)?;
        let dense = ids
            .iter()
            .map(|&id| {
                net.dense_id(id)
                    .ok_or_else(|| msrf_core::Error::Invalid(format!("report seg_id {} is not in the network", id)))
            })
            .collect::<msrf_core::Result<Vec<_>>>()?;
        let mut text = String::from("seg_id");
        for id in ids {
            text.push_str(&format!(",{}", id));
        }
        text.push('\n');
        for (i, &a) in dense.iter().enumerate() {
            text.push_str(&ids[i].to_string());
            for (j, &b) in dense.iter().enumerate() {
                let s = if i == j { 1.0 } else { cosine(&h, a, b) };
                text.push_str(&format!(",{}", s));
            }
            text.push('\n');
        }
        run.write("similarity.csv", text.as_bytes())?;
    }
    println!("report: overlaps for orders {}, {} similarity ids", orders, ids.len());
    run.finish()
}

/// match, scales, matrices, regions, train, eval and report in order.
pub fn cmd_run_all(ctx: &Context) -> CliResult<()> {
    cmd_match(ctx)?;
    cmd_scales(ctx)?;
    cmd_matrices(ctx)?;
    cmd_regions(ctx)?;
    cmd_train(ctx)?;
    cmd_eval(ctx)?;
    cmd_report(ctx)
}

/// Reads the `MSRF_THREADS` cap, if set.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("MSRF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("MSRF_THREADS must be a positive integer, got {:?}", v))),
        Err(_) => Ok(None),
    }
}
