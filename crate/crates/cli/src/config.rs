//! Flat `key = value` configuration with `[section]` headers.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! `render` writes every key in a fixed order; parsing the rendered text
//! gives back the same configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msrf_core::eval::{CvConfig, HeadTraining};
use msrf_core::interaction::Smoothing;
use msrf_core::model::{ModelConfig, DEFAULT_REGION_CAP};
use msrf_core::netio::{BoundingBox, MatchParams, RoadNetwork};
use msrf_core::pipeline::Settings;
use msrf_core::regions::Laplacian;
use msrf_core::scales::{ScaleOrders, ScaleRanges, DEFAULT_SAMPLE_SIZE};
use msrf_core::training::LossLayers;

use crate::error::CliError;
use crate::synth::SyntheticCitySpec;

pub const SECTIONS: [&str; 12] =
    ["", "paths", "synth", "match", "scales", "matrices", "regions", "model", "train", "eval", "sweep", "report"];

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub network: PathBuf,
    pub trajectories: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSection {
    pub params: MatchParams,
    pub min_points: usize,
    /// `None` uses the network extent grown by `bbox_margin_deg`.
    pub bbox: Option<BoundingBox>,
    pub bbox_margin_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalesSection {
    pub k_max: usize,
    pub sample_size: usize,
    pub ranges: ScaleRanges,
    /// Explicit orders; `None` selects them from the order histogram.
    pub orders: Option<ScaleOrders>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub neg_ratio: f64,
    pub loss_layers: LossLayers,
    pub alternate_scales: bool,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    /// Empty means every ordered triple of the scale ranges.
    pub candidates: Vec<ScaleOrders>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticCitySpec,
    pub matching: MatchSection,
    pub scales: ScalesSection,
    pub smoothing: Smoothing,
    pub regions: usize,
    pub laplacian: Laplacian,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: CvConfig,
    pub sweep: SweepSection,
    pub report_seg_ids: Vec<i64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let head = HeadTraining::default();
        let match_defaults = MatchParams::default();
        Self {
            seed: 0,
            paths: Paths {
                network: "network.csv".into(),
                trajectories: "trajectories.csv".into(),
                workdir: "work".into(),
            },
            synth: SyntheticCitySpec::default(),
            matching: MatchSection { params: match_defaults, min_points: 10, bbox: None, bbox_margin_deg: 0.01 },
            scales: ScalesSection {
                k_max: 10,
                sample_size: DEFAULT_SAMPLE_SIZE,
                ranges: ScaleRanges::default(),
                orders: None,
            },
            smoothing: Smoothing::KHop,
            regions: 300,
            laplacian: Laplacian::Unnormalized,
            model: ModelConfig::default(),
            train: TrainSection {
                epochs: 1000,
                lr: 1e-3,
                neg_ratio: 1.0,
                loss_layers: LossLayers::Final,
                alternate_scales: false,
                checkpoint_every: 100,
            },
            eval: CvConfig { head, ..CvConfig::default() },
            sweep: SweepSection { candidates: Vec::new() },
            report_seg_ids: Vec::new(),
        }
    }
}

type Entries = BTreeMap<String, String>;

fn key(section: &str, k: &str) -> String {
    if section.is_empty() {
        k.to_string()
    } else {
        format!("{}.{}", section, k)
    }
}

/// Parses `key = value` text into dotted keys.
pub fn parse_entries(text: &str) -> Result<Entries, CliError> {
    let mut out = Entries::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("line {}: unterminated section header", lineno)))?
                .trim();
            if !SECTIONS.contains(&name) || name.is_empty() {
                return Err(CliError::Config(format!("line {}: unknown section [{}]", lineno, name)));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", lineno)))?;
        let full = key(&section, k.trim());
        if out.insert(full.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key {}", lineno, full)));
        }
    }
    Ok(out)
}

struct Reader {
    entries: Entries,
}

impl Reader {
    fn take<T: FromStr>(&mut self, k: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.entries.remove(k) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::Config(format!("{} = {:?}: {}", k, v, e))),
        }
    }

    fn take_with<T>(&mut self, k: &str, default: T, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, CliError> {
        match self.entries.remove(k) {
            None => Ok(default),
            Some(v) => parse(&v).map_err(|e| CliError::Config(format!("{} = {:?}: {}", k, v, e))),
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or("expected lo-hi")?;
    let lo = a.trim().parse().map_err(|e| format!("{}", e))?;
    let hi = b.trim().parse().map_err(|e| format!("{}", e))?;
    Ok((lo, hi))
}

fn parse_orders(s: &str) -> Result<ScaleOrders, String> {
    s.parse::<ScaleOrders>().map_err(|e| e.to_string())
}

fn parse_opt_orders(s: &str) -> Result<Option<ScaleOrders>, String> {
    if s == "auto" {
        Ok(None)
    } else {
        parse_orders(s).map(Some)
    }
}

fn parse_candidates(s: &str) -> Result<Vec<ScaleOrders>, String> {
    s.split(';').map(str::trim).filter(|t| !t.is_empty()).map(parse_orders).collect()
}

fn parse_bbox(s: &str) -> Result<Option<BoundingBox>, String> {
    if s == "auto" {
        return Ok(None);
    }
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    if v.len() != 4 {
        return Err("expected min_lon,min_lat,max_lon,max_lat".into());
    }
    BoundingBox::new(v[0], v[1], v[2], v[3]).map(Some).map_err(|e| e.to_string())
}

fn parse_ids(s: &str) -> Result<Vec<i64>, String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| t.parse::<i64>().map_err(|e| e.to_string())).collect()
}

fn parse_intra(s: &str) -> Result<Option<f64>, String> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse::<f64>().map(Some).map_err(|e| e.to_string())
    }
}

fn parse_origin(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lon,lat")?;
    Ok((a.trim().parse().map_err(|e| format!("{}", e))?, b.trim().parse().map_err(|e| format!("{}", e))?))
}

impl PipelineConfig {
    pub fn from_entries(entries: Entries) -> Result<Self, CliError> {
        let d = PipelineConfig::default();
        let mut r = Reader { entries };
        let seed = r.take("seed", d.seed)?;
        let paths = Paths {
            network: r.take::<String>("paths.network", d.paths.network.display().to_string())?.into(),
            trajectories: r.take::<String>("paths.trajectories", d.paths.trajectories.display().to_string())?.into(),
            workdir: r.take::<String>("paths.workdir", d.paths.workdir.display().to_string())?.into(),
        };
        let s = &d.synth;
        let synth = SyntheticCitySpec {
            width: r.take("synth.width", s.width)?,
            height: r.take("synth.height", s.height)?,
            spacing_m: r.take("synth.spacing_m", s.spacing_m)?,
            ring: r.take("synth.ring", s.ring)?,
            arterial_every: r.take("synth.arterial_every", s.arterial_every)?,
            n_trajectories: r.take("synth.n_trajectories", s.n_trajectories)?,
            noise_m: r.take("synth.noise_m", s.noise_m)?,
            sample_interval_s: r.take("synth.sample_interval_s", s.sample_interval_s)?,
            turn_penalty_s: r.take("synth.turn_penalty_s", s.turn_penalty_s)?,
            intra_half: r.take_with("synth.intra_half", s.intra_half, parse_intra)?,
            origin: r.take_with("synth.origin", s.origin, parse_origin)?,
            seed,
        };
        let m = &d.matching;
        let matching = MatchSection {
            params: MatchParams {
                search_radius_m: r.take("match.search_radius_m", m.params.search_radius_m)?,
                max_candidates: r.take("match.max_candidates", m.params.max_candidates)?,
                transition_beta: r.take("match.transition_beta", m.params.transition_beta)?,
                sigma_m: r.take("match.sigma_m", m.params.sigma_m)?,
                backtrack_tolerance_m: r.take("match.backtrack_tolerance_m", m.params.backtrack_tolerance_m)?,
            },
            min_points: r.take("match.min_points", m.min_points)?,
            bbox: r.take_with("match.bbox", m.bbox, parse_bbox)?,
            bbox_margin_deg: r.take("match.bbox_margin_deg", m.bbox_margin_deg)?,
        };
        let sc = &d.scales;
        let scales = ScalesSection {
            k_max: r.take("scales.k_max", sc.k_max)?,
            sample_size: r.take("scales.sample_size", sc.sample_size)?,
            ranges: ScaleRanges {
                small: r.take_with("scales.small", sc.ranges.small, parse_range)?,
                medium: r.take_with("scales.medium", sc.ranges.medium, parse_range)?,
                large: r.take_with("scales.large", sc.ranges.large, parse_range)?,
            },
            orders: r.take_with("scales.orders", sc.orders, parse_opt_orders)?,
        };
        let smoothing = r.take("matrices.smoothing", d.smoothing)?;
        let regions = r.take("regions.r", d.regions)?;
        let laplacian = r.take("regions.laplacian", d.laplacian)?;
        let model = ModelConfig {
            d: r.take("model.d", d.model.d)?,
            heads: r.take("model.heads", d.model.heads)?,
            region_cap: r.take("model.region_cap", DEFAULT_REGION_CAP)?,
        };
        let t = &d.train;
        let train = TrainSection {
            epochs: r.take("train.epochs", t.epochs)?,
            lr: r.take("train.lr", t.lr)?,
            neg_ratio: r.take("train.neg_ratio", t.neg_ratio)?,
            loss_layers: r.take("train.loss_layers", t.loss_layers)?,
            alternate_scales: r.take("train.alternate_scales", t.alternate_scales)?,
            checkpoint_every: r.take("train.checkpoint_every", t.checkpoint_every)?,
        };
        let e = &d.eval;
        let eval = CvConfig {
            n_folds: r.take("eval.n_folds", e.n_folds)?,
            val_frac: r.take("eval.val_frac", e.val_frac)?,
            seed,
            head: HeadTraining {
                lr: r.take("eval.head_lr", e.head.lr)?,
                patience: r.take("eval.patience", e.head.patience)?,
                max_epochs: r.take("eval.max_epochs", e.head.max_epochs)?,
            },
        };
        let sweep = SweepSection { candidates: r.take_with("sweep.candidates", Vec::new(), parse_candidates)? };
        let report_seg_ids = r.take_with("report.seg_ids", Vec::new(), parse_ids)?;
        if let Some(k) = r.entries.keys().next() {
            return Err(CliError::Config(format!("unknown key {}", k)));
        }
        let cfg = Self {
            seed,
            paths,
            synth,
            matching,
            scales,
            smoothing,
            regions,
            laplacian,
            model,
            train,
            eval,
            sweep,
            report_seg_ids,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut entries = parse_entries(text)?;
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        Self::from_entries(entries)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.model.heads == 0 || self.model.d % self.model.heads != 0 {
            return bad(format!("model.d = {} is not divisible by model.heads = {}", self.model.d, self.model.heads));
        }
        if self.regions < 2 {
            return bad(format!("regions.r must be at least 2, got {}", self.regions));
        }
        if self.scales.k_max == 0 {
            return bad("scales.k_max must be at least 1".into());
        }
        self.scales.ranges.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// `(section, key, value)` for every setting in rendering order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let s = &self.synth;
        let m = &self.matching;
        let sc = &self.scales;
        let t = &self.train;
        let e = &self.eval;
        let range = |r: (usize, usize)| format!("{}-{}", r.0, r.1);
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        vec![
            ("", "seed", self.seed.to_string()),
            ("paths", "network", self.paths.network.display().to_string()),
            ("paths", "trajectories", self.paths.trajectories.display().to_string()),
            ("paths", "workdir", self.paths.workdir.display().to_string()),
            ("synth", "width", s.width.to_string()),
            ("synth", "height", s.height.to_string()),
            ("synth", "spacing_m", s.spacing_m.to_string()),
            ("synth", "ring", s.ring.to_string()),
            ("synth", "arterial_every", s.arterial_every.to_string()),
            ("synth", "n_trajectories", s.n_trajectories.to_string()),
            ("synth", "noise_m", s.noise_m.to_string()),
            ("synth", "sample_interval_s", s.sample_interval_s.to_string()),
            ("synth", "turn_penalty_s", s.turn_penalty_s.to_string()),
            ("synth", "intra_half", s.intra_half.map_or("none".into(), |p| p.to_string())),
            ("synth", "origin", format!("{},{}", s.origin.0, s.origin.1)),
            ("match", "search_radius_m", m.params.search_radius_m.to_string()),
            ("match", "max_candidates", m.params.max_candidates.to_string()),
            ("match", "transition_beta", m.params.transition_beta.to_string()),
            ("match", "sigma_m", m.params.sigma_m.to_string()),
            ("match", "backtrack_tolerance_m", m.params.backtrack_tolerance_m.to_string()),
            ("match", "min_points", m.min_points.to_string()),
            (
                "match",
                "bbox",
                m.bbox.map_or("auto".into(), |b| format!("{},{},{},{}", b.min_lon, b.min_lat, b.max_lon, b.max_lat)),
            ),
            ("match", "bbox_margin_deg", m.bbox_margin_deg.to_string()),
            ("scales", "k_max", sc.k_max.to_string()),
            ("scales", "sample_size", sc.sample_size.to_string()),
            ("scales", "small", range(sc.ranges.small)),
            ("scales", "medium", range(sc.ranges.medium)),
            ("scales", "large", range(sc.ranges.large)),
            ("scales", "orders", sc.orders.map_or("auto".into(), |o| o.to_string())),
            ("matrices", "smoothing", self.smoothing.to_string()),
            ("regions", "r", self.regions.to_string()),
            ("regions", "laplacian", self.laplacian.to_string()),
            ("model", "d", self.model.d.to_string()),
            ("model", "heads", self.model.heads.to_string()),
            ("model", "region_cap", self.model.region_cap.to_string()),
            ("train", "epochs", t.epochs.to_string()),
            ("train", "lr", t.lr.to_string()),
            ("train", "neg_ratio", t.neg_ratio.to_string()),
            ("train", "loss_layers", t.loss_layers.to_string()),
            ("train", "alternate_scales", t.alternate_scales.to_string()),
            ("train", "checkpoint_every", t.checkpoint_every.to_string()),
            ("eval", "n_folds", e.n_folds.to_string()),
            ("eval", "val_frac", e.val_frac.to_string()),
            ("eval", "head_lr", e.head.lr.to_string()),
            ("eval", "patience", e.head.patience.to_string()),
            ("eval", "max_epochs", e.head.max_epochs.to_string()),
            ("sweep", "candidates", join(self.sweep.candidates.iter().map(|o| o.to_string()).collect(), ";")),
            ("report", "seg_ids", join(self.report_seg_ids.iter().map(|i| i.to_string()).collect(), ",")),
        ]
    }

    pub fn render(&self) -> String {
        render_sections(&self.entries(), None)
    }

    /// Canonical text of the given sections, used for stage hashes.
    pub fn render_only(&self, sections: &[&str]) -> String {
        render_sections(&self.entries(), Some(sections))
    }

    pub fn settings(&self) -> Settings {
        Settings {
            smoothing: self.smoothing,
            regions: self.regions,
            laplacian: self.laplacian,
            model: self.model,
            epochs: self.train.epochs,
            lr: self.train.lr,
            neg_ratio: self.train.neg_ratio,
            loss_layers: self.train.loss_layers,
            alternate_scales: self.train.alternate_scales,
            checkpoint_every: self.train.checkpoint_every,
            cv: self.eval,
            seed: self.seed,
        }
    }

    pub fn bbox(&self, net: &RoadNetwork) -> BoundingBox {
        self.matching.bbox.unwrap_or_else(|| net.bounding_box().expanded(self.matching.bbox_margin_deg))
    }
}

fn render_sections(entries: &[(&str, &str, String)], only: Option<&[&str]>) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for (section, k, v) in entries {
        if only.is_some_and(|o| !o.contains(section)) {
            continue;
        }
        if current != Some(section) {
            if !section.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", section));
            }
            current = Some(section);
        }
        out.push_str(&format!("{} = {}\n", k, v));
    }
    out
}

/// Splits `--section.key value` and `--seed value` pairs (or their
/// `--k=v` forms) out of the argument list.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(name.contains('.') || name == "seed") {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{} needs a value", name)))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

/// Resolves `p` against the directory of the configuration file.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
