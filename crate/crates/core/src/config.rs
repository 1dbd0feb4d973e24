//! Flat `key = value` configuration with dotted sections.
//!
//! ```text
//! # comment
//! seed = 3
//! data.snr = 3.0, 0.8
//! gm.tau = 0.4
//! ```
//!
//! Every key is optional and falls back to its default; unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{MieError, Result};
use crate::eval::Fusion;
use crate::gradmod::GmScope;
use crate::trainer::{GmMask, TrainConfig};

/// Parsed `key = value` pairs in file order; duplicate keys are an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MieError::validation(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(MieError::validation(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(MieError::validation(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Rejects any key not in `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(MieError::validation(format!("line {line}: unknown key {k}")));
            }
        }
        Ok(())
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| parse_scalar(key, v)).transpose()
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key).map(|v| parse_list(key, v)).transpose()
    }
}

pub fn parse_scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| MieError::validation(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s))
        .collect()
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(MieError::validation(format!("{key}: expected on/off, got {other:?}"))),
    }
}

/// `full`, or `+`/`,`-separated 1-based `source->target` pairs.
pub fn parse_mask(key: &str, v: &str) -> Result<GmMask> {
    let v = v.trim();
    if v == "full" {
        return Ok(GmMask::Full);
    }
    let mut pairs = Vec::new();
    for part in v.split(['+', ',']).map(str::trim).filter(|s| !s.is_empty()) {
        let (a, b) = part
            .split_once("->")
            .ok_or_else(|| MieError::validation(format!("{key}: expected `k->j`, got {part:?}")))?;
        let a: usize = parse_scalar(key, a)?;
        let b: usize = parse_scalar(key, b)?;
        if a == 0 || b == 0 {
            return Err(MieError::validation(format!("{key}: modalities are numbered from 1")));
        }
        pairs.push((a - 1, b - 1));
    }
    Ok(GmMask::Pairs(pairs))
}

pub fn format_mask(mask: &GmMask) -> String {
    match mask {
        GmMask::Full => "full".into(),
        GmMask::Pairs(p) if p.is_empty() => "none".into(),
        GmMask::Pairs(p) => p
            .iter()
            .map(|(a, b)| format!("{}->{}", a + 1, b + 1))
            .collect::<Vec<_>>()
            .join("+"),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeConfig {
    pub radius: f64,
    pub points: usize,
    /// 1-based.
    pub modality: usize,
    /// Number of test samples in the evaluation batch; `0` means all.
    pub samples: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            radius: 1.0,
            points: 41,
            modality: 1,
            samples: 0,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub data_path: PathBuf,
    pub train: TrainConfig,
    pub fusion: Fusion,
    pub output_dir: PathBuf,
    pub landscape: LandscapeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SyntheticSpec::default(),
            data_path: PathBuf::from("data.mmd"),
            train: TrainConfig::default(),
            fusion: Fusion::Average,
            output_dir: PathBuf::from("run"),
            landscape: LandscapeConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "data.path",
    "data.n",
    "data.classes",
    "data.dims",
    "data.snr",
    "data.splits",
    "model.hidden_dim",
    "model.feature_dim",
    "train.out_iters",
    "train.inner_iters",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.patience",
    "sam.on",
    "sam.rho",
    "sam.zero_grad_threshold",
    "gm.on",
    "gm.tau",
    "gm.scope",
    "gm.mask",
    "gm.degenerate_tolerance",
    "fusion",
    "output.dir",
    "landscape.radius",
    "landscape.points",
    "landscape.modality",
    "landscape.samples",
];

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::read(path)?)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(CONFIG_KEYS)?;
        let mut c = RunConfig::default();
        if let Some(s) = kv.parse_value("seed")? {
            c.set_seed(s);
        }
        if let Some(p) = kv.get("data.path") {
            c.data_path = PathBuf::from(p);
        }
        if let Some(v) = kv.parse_value("data.n")? {
            c.data.n = v;
        }
        if let Some(v) = kv.parse_value("data.classes")? {
            c.data.classes = v;
        }
        if let Some(v) = kv.parse_list("data.dims")? {
            c.data.dims = v;
        }
        if let Some(v) = kv.parse_list("data.snr")? {
            c.data.snr = v;
        }
        if let Some(v) = kv.parse_list::<f64>("data.splits")? {
            c.data.split_fractions = v.try_into().map_err(|v: Vec<f64>| {
                MieError::validation(format!("data.splits needs 3 fractions, got {}", v.len()))
            })?;
        }
        let t = &mut c.train;
        if let Some(v) = kv.parse_value("model.hidden_dim")? {
            t.hidden_dim = v;
        }
        if let Some(v) = kv.parse_value("model.feature_dim")? {
            t.feature_dim = v;
        }
        if let Some(v) = kv.parse_value("train.out_iters")? {
            t.out_iters = v;
        }
        if let Some(v) = kv.get("train.inner_iters") {
            t.inner_iters = match v {
                "epoch" => None,
                other => Some(parse_scalar("train.inner_iters", other)?),
            };
        }
        if let Some(v) = kv.parse_value("train.batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = kv.parse_list("train.lr")? {
            t.lr = v;
        }
        if let Some(v) = kv.parse_value("train.momentum")? {
            t.momentum = v;
        }
        if let Some(v) = kv.parse_value("train.weight_decay")? {
            t.weight_decay = v;
        }
        if let Some(v) = kv.parse_value("train.patience")? {
            t.patience = v;
        }
        if let Some(v) = kv.get("sam.on") {
            t.ablation.sam_on = parse_switch("sam.on", v)?;
        }
        if let Some(v) = kv.parse_list("sam.rho")? {
            t.rho = v;
        }
        if let Some(v) = kv.parse_value("sam.zero_grad_threshold")? {
            t.zero_grad_threshold = v;
        }
        if let Some(v) = kv.get("gm.on") {
            t.ablation.gm_on = parse_switch("gm.on", v)?;
        }
        if let Some(v) = kv.parse_value("gm.tau")? {
            t.gm.tau = v;
        }
        if let Some(v) = kv.get("gm.scope") {
            t.gm.scope = v.parse::<GmScope>()?;
        }
        if let Some(v) = kv.get("gm.mask") {
            t.ablation.gm_mask = parse_mask("gm.mask", v)?;
        }
        if let Some(v) = kv.parse_value("gm.degenerate_tolerance")? {
            t.gm.degenerate_tolerance = v;
        }
        if let Some(v) = kv.get("fusion") {
            c.fusion = v.parse()?;
        }
        if let Some(v) = kv.get("output.dir") {
            c.output_dir = PathBuf::from(v);
        }
        let l = &mut c.landscape;
        if let Some(v) = kv.parse_value("landscape.radius")? {
            l.radius = v;
        }
        if let Some(v) = kv.parse_value("landscape.points")? {
            l.points = v;
        }
        if let Some(v) = kv.parse_value("landscape.modality")? {
            l.modality = v;
        }
        if let Some(v) = kv.parse_value("landscape.samples")? {
            l.samples = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// One seed drives data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate(self.data.modalities())?;
        if self.landscape.points % 2 == 0 {
            return Err(MieError::validation("landscape.points must be odd"));
        }
        if self.landscape.modality == 0 || self.landscape.modality > self.data.modalities() {
            return Err(MieError::validation("landscape.modality out of range"));
        }
        Ok(())
    }

    /// Run label used in output metadata.
    pub fn label(&self) -> &'static str {
        self.train.ablation.label()
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let l = &self.landscape;
        let lines = [
            ("seed", self.seed.to_string()),
            ("data.path", self.data_path.display().to_string()),
            ("data.n", d.n.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.dims", join(&d.dims)),
            ("data.snr", join(&d.snr)),
            ("data.splits", join(&d.split_fractions)),
            ("model.hidden_dim", t.hidden_dim.to_string()),
            ("model.feature_dim", t.feature_dim.to_string()),
            ("train.out_iters", t.out_iters.to_string()),
            (
                "train.inner_iters",
                t.inner_iters.map_or("epoch".into(), |v| v.to_string()),
            ),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", join(&t.lr)),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.patience", t.patience.to_string()),
            ("sam.on", on_off(t.ablation.sam_on)),
            ("sam.rho", join(&t.rho)),
            ("sam.zero_grad_threshold", t.zero_grad_threshold.to_string()),
            ("gm.on", on_off(t.ablation.gm_on)),
            ("gm.tau", t.gm.tau.to_string()),
            ("gm.scope", t.gm.scope.to_string()),
            ("gm.mask", format_mask(&t.ablation.gm_mask)),
            ("gm.degenerate_tolerance", t.gm.degenerate_tolerance.to_string()),
            ("fusion", self.fusion.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("landscape.radius", l.radius.to_string()),
            ("landscape.points", l.points.to_string()),
            ("landscape.modality", l.modality.to_string()),
            ("landscape.samples", l.samples.to_string()),
        ];
        lines
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

/// One axis of an ablation grid file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridAxis {
    /// `(sam_on, gm_on)` pairs, written `on/off`.
    Switches(Vec<(bool, bool)>),
    Tau(Vec<f64>),
    Rho(Vec<f64>),
    /// `None` turns gradient modification off.
    Scope(Vec<Option<GmScope>>),
    Mask(Vec<GmMask>),
}

/// Parsed grid file: the seed list plus the axes whose Cartesian product
/// forms the variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub seeds: Vec<u64>,
    pub axes: Vec<GridAxis>,
}

pub const GRID_KEYS: &[&str] = &["seeds", "switches", "tau", "rho", "scope", "mask"];

impl Grid {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_known(GRID_KEYS)?;
        let seeds: Vec<u64> = kv.parse_list("seeds")?.unwrap_or_default();
        if seeds.is_empty() {
            return Err(MieError::validation("grid: seeds must list at least one seed"));
        }
        let mut axes = Vec::new();
        if let Some(v) = kv.get("switches") {
            let pairs = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let (a, b) = s.split_once('/').ok_or_else(|| {
                        MieError::validation(format!("switches: expected sam/gm like on/off, got {s:?}"))
                    })?;
                    Ok((parse_switch("switches", a)?, parse_switch("switches", b)?))
                })
                .collect::<Result<Vec<_>>>()?;
            axes.push(GridAxis::Switches(pairs));
        }
        if let Some(v) = kv.parse_list("tau")? {
            axes.push(GridAxis::Tau(v));
        }
        if let Some(v) = kv.parse_list("rho")? {
            axes.push(GridAxis::Rho(v));
        }
        if let Some(v) = kv.get("scope") {
            let scopes = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "off" => Ok(None),
                    other => other.parse().map(Some),
                })
                .collect::<Result<Vec<_>>>()?;
            axes.push(GridAxis::Scope(scopes));
        }
        if let Some(v) = kv.get("mask") {
            let masks = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_mask("mask", s))
                .collect::<Result<Vec<_>>>()?;
            axes.push(GridAxis::Mask(masks));
        }
        Ok(Grid { seeds, axes })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Cartesian product of the axes applied to `base`, in axis order.
    pub fn variants(&self, base: &TrainConfig) -> Vec<crate::trainer::Variant> {
        let mut out: Vec<(Vec<String>, TrainConfig)> = vec![(Vec::new(), base.clone())];
        for axis in &self.axes {
            let mut next = Vec::new();
            for (labels, cfg) in &out {
                let mut push = |label: String, cfg: TrainConfig| {
                    let mut l = labels.clone();
                    l.push(label);
                    next.push((l, cfg));
                };
                match axis {
                    GridAxis::Switches(v) => {
                        for &(sam, gm) in v {
                            let mut c = cfg.clone();
                            c.ablation.sam_on = sam;
                            c.ablation.gm_on = gm;
                            push(c.ablation.label().to_string(), c);
                        }
                    }
                    GridAxis::Tau(v) => {
                        for &tau in v {
                            let mut c = cfg.clone();
                            c.gm.tau = tau;
                            push(format!("tau={tau}"), c);
                        }
                    }
                    GridAxis::Rho(v) => {
                        for &rho in v {
                            let mut c = cfg.clone();
                            c.rho = vec![rho];
                            push(format!("rho={rho}"), c);
                        }
                    }
                    GridAxis::Scope(v) => {
                        for s in v {
                            let mut c = cfg.clone();
                            match s {
                                Some(scope) => {
                                    c.gm.scope = *scope;
                                    c.ablation.gm_on = true;
                                }
                                None => c.ablation.gm_on = false,
                            }
                            let label = s.map_or("off".to_string(), |s| s.to_string());
                            push(format!("scope={label}"), c);
                        }
                    }
                    GridAxis::Mask(v) => {
                        for m in v {
                            let mut c = cfg.clone();
                            c.ablation.gm_mask = m.clone();
                            push(format!("mask={}", format_mask(m)), c);
                        }
                    }
                }
            }
            out = next;
        }
        if self.axes.is_empty() {
            return Vec::new();
        }
        out.into_iter()
            .map(|(labels, config)| crate::trainer::Variant {
                label: labels.join(","),
                config,
            })
            .collect()
    }
}
