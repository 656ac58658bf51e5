//! Declarative description of an experiment.
//!
//! A config is one JSON document. Every field has a default and unknown keys
//! are rejected, so `{}` is a valid supervised-only run on the reference
//! synthetic task.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::consistency::{
    Bandwidth, DivergenceMode, GateConfig, DEFAULT_ARC_MIN_ROWS, DEFAULT_BUFFER_CAPACITY, DEFAULT_BUFFER_K,
};
use crate::data::{CsvSchema, SyntheticTaskSpec};
use crate::error::{ConfigIssue, Error, Result};
use crate::model::Architecture;
use crate::ssl::{SslConfig, SslMethod};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Seeds `seed, seed+1, …` used by sweeps and comparisons.
    pub num_seeds: usize,
    pub n_labeled: usize,
    /// Columns of the comparison table.
    pub n_labeled_grid: Vec<usize>,
    pub task: SyntheticTaskSpec,
    /// Replaces the synthetic task when set.
    pub csv: Option<CsvSource>,
    pub model: Architecture,
    pub methods: MethodFlags,
    pub weights: LossWeights,
    pub gates: GateRatios,
    pub akc: AkcOptions,
    pub arc: ArcOptions,
    pub ssl: SslOptions,
    pub optim: OptimConfig,
    pub pretrain: PretrainConfig,
    pub head_init: HeadInit,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            num_seeds: 5,
            n_labeled: 40,
            n_labeled_grid: vec![20, 40, 100],
            task: SyntheticTaskSpec::default(),
            csv: None,
            model: Architecture::default(),
            methods: MethodFlags::default(),
            weights: LossWeights::default(),
            gates: GateRatios::default(),
            akc: AkcOptions::default(),
            arc: ArcOptions::default(),
            ssl: SslOptions::default(),
            optim: OptimConfig::default(),
            pretrain: PretrainConfig::default(),
            head_init: HeadInit::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
}

/// Which terms of the composite loss are active. Flags compose freely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodFlags {
    pub akc: bool,
    pub arc: bool,
    pub ssl: SslMethod,
}

impl MethodFlags {
    pub const SUPERVISED: Self = Self {
        akc: false,
        arc: false,
        ssl: SslMethod::None,
    };

    pub fn label(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        match self.ssl {
            SslMethod::None => {}
            SslMethod::PseudoLabel => parts.push("pseudo_label"),
            SslMethod::MeanTeacher => parts.push("mean_teacher"),
        }
        if self.akc {
            parts.push("akc");
        }
        if self.arc {
            parts.push("arc");
        }
        if parts.is_empty() {
            "supervised".into()
        } else {
            parts.join("+")
        }
    }
}

/// `λ_K`, `λ_R`, `λ_S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_k: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_k: 1.0,
            lambda_r: 30.0,
            lambda_s: 1.0,
        }
    }
}

/// Entropy thresholds as fractions of `ln C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateRatios {
    pub eps_k_ratio: f64,
    pub eps_r_ratio: f64,
}

impl Default for GateRatios {
    fn default() -> Self {
        Self {
            eps_k_ratio: crate::consistency::DEFAULT_GATE_RATIO,
            eps_r_ratio: crate::consistency::DEFAULT_GATE_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AkcOptions {
    pub mode: DivergenceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcOptions {
    pub buffer_capacity: usize,
    pub k: usize,
    /// Skip ARC until both buffered sets hold at least this many rows (≥ 2).
    pub min_rows: usize,
    /// Fixed kernel bandwidths; `None` uses the median heuristic.
    pub sigmas: Option<Vec<f64>>,
}

impl Default for ArcOptions {
    fn default() -> Self {
        Self {
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            k: DEFAULT_BUFFER_K,
            min_rows: DEFAULT_ARC_MIN_ROWS,
            sigmas: None,
        }
    }
}

impl ArcOptions {
    pub fn bandwidth(&self) -> Bandwidth {
        match &self.sigmas {
            Some(s) => Bandwidth::Fixed(s.clone()),
            None => Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslOptions {
    pub pl_confidence: f64,
    pub ema_alpha: f64,
    pub noise_std: f64,
}

impl Default for SslOptions {
    fn default() -> Self {
        let d = SslConfig::default();
        Self {
            pl_confidence: d.pl_confidence,
            ema_alpha: d.ema_alpha,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            epochs: 60,
            batch_labeled: 64,
            batch_unlabeled: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Imprint,
    Random,
}

impl ExperimentConfig {
    /// Parses a JSON document, reporting the dotted path of the first
    /// offending field, then runs [`Self::validate`].
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", format!("malformed JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every semantic constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: &str| {
            issues.push(ConfigIssue {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bad("schema_version", "unsupported schema version");
        }
        if self.num_seeds == 0 {
            bad("num_seeds", "must be positive");
        }
        if self.csv.is_none() {
            if let Err(Error::Config(found)) = self.task.validate() {
                for i in found {
                    bad(&i.path, &i.message);
                }
            }
            if self.n_labeled < self.task.target_classes {
                bad("n_labeled", "must cover every target class");
            }
            if self.n_labeled > self.task.target_train {
                bad("n_labeled", "exceeds task.target_train");
            }
            if self.n_labeled_grid.iter().any(|&n| n < self.task.target_classes || n > self.task.target_train) {
                bad("n_labeled_grid", "every entry must lie in [target_classes, target_train]");
            }
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            bad("model", "layer widths must be positive");
        }
        for (path, v) in [
            ("weights.lambda_k", self.weights.lambda_k),
            ("weights.lambda_r", self.weights.lambda_r),
            ("weights.lambda_s", self.weights.lambda_s),
            ("gates.eps_k_ratio", self.gates.eps_k_ratio),
            ("gates.eps_r_ratio", self.gates.eps_r_ratio),
            ("ssl.noise_std", self.ssl.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad(path, "must be a finite non-negative number");
            }
        }
        if self.arc.buffer_capacity == 0 {
            bad("arc.buffer_capacity", "must be positive");
        }
        if self.arc.k == 0 {
            bad("arc.k", "must be positive");
        }
        if self.arc.min_rows < 2 || self.arc.min_rows > self.arc.k {
            bad("arc.min_rows", "must lie in [2, arc.k]");
        }
        if let Some(s) = &self.arc.sigmas {
            if s.is_empty() || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                bad("arc.sigmas", "must be a non-empty list of positive numbers");
            }
        }
        if !(self.ssl.pl_confidence > 0.0 && self.ssl.pl_confidence <= 1.0) {
            bad("ssl.pl_confidence", "must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.ssl.ema_alpha) {
            bad("ssl.ema_alpha", "must lie in [0, 1)");
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            bad("optim.lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            bad("optim.momentum", "must lie in [0, 1)");
        }
        if self.optim.batch_labeled == 0 {
            bad("optim.batch_labeled", "must be positive");
        }
        if self.optim.batch_unlabeled == 0 {
            bad("optim.batch_unlabeled", "must be positive");
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            bad("pretrain.lr", "must be positive");
        }
        if self.pretrain.batch_size == 0 {
            bad("pretrain.batch_size", "must be positive");
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn gate_config(&self, source_classes: usize, target_classes: usize) -> GateConfig {
        GateConfig::from_ratios(self.gates.eps_k_ratio, self.gates.eps_r_ratio, source_classes, target_classes)
    }

    pub fn ssl_config(&self) -> SslConfig {
        SslConfig {
            method: self.methods.ssl,
            lambda_s: self.weights.lambda_s,
            pl_confidence: self.ssl.pl_confidence,
            ema_alpha: self.ssl.ema_alpha,
            noise_std: self.ssl.noise_std,
        }
    }
}

/// Sets `dotted.path` inside a JSON document, creating objects as needed.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut serde_json::Value, dotted: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
    let mut cur = doc;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(dotted, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = serde_json::Value::Object(Default::default());
            } else {
                return Err(Error::config(parts[..i].join("."), "is not an object"));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
