//! Flat `key = value` experiment configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys, bad
//! values and inconsistent settings are reported with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accountant::BoundKind;
use crate::learning::{Algorithm, BlobSpec, TaskKind, TaskSpec};
use crate::topology::{TopologyMode, TopologySchedule, WeightScheme};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}: {key}: {message}", line.map_or("default".to_string(), |l| format!("line {l}")))]
    Invalid { line: Option<usize>, key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologyConfig {
    pub n: usize,
    pub k: usize,
    pub mode: TopologyMode,
    pub scheme: WeightScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub eta: f64,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseConfig {
    /// Multiplier applied to the calibrated base scale.
    pub level: f64,
    /// Fixed base scale; calibrated from a pilot run when absent.
    pub sigma_base: Option<f64>,
    /// Scale Zip-DL noise so its per-message variance matches Muffliato's.
    pub amplify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackConfig {
    pub enabled: bool,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub delta: f64,
    /// Falls back to the task's smoothness (quadratic) or 1.
    pub smoothness: Option<f64>,
    pub rounds: usize,
    pub bounds: Vec<BoundKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub algos: Vec<Algorithm>,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub algo: Algorithm,
    pub seed: u64,
    pub output_dir: String,
    pub topology: TopologyConfig,
    pub task: TaskSpec,
    pub train: TrainSettings,
    pub noise: NoiseConfig,
    pub muffliato_rounds: usize,
    pub calibration_iterations: usize,
    pub attacks: AttackConfig,
    pub privacy: PrivacyConfig,
    pub sweep: SweepConfig,
    #[serde(skip)]
    lines: KeyLines,
}

/// Where each key was set; ignored by equality.
#[derive(Debug, Clone, Default)]
struct KeyLines(BTreeMap<String, usize>);

impl PartialEq for KeyLines {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec {
            kind: TaskKind::Logistic,
            n: 16,
            blobs: BlobSpec { classes: 16, features: 32, train_per_class: 64, test_per_class: 64, separation: 1.0, spread: 1.0 },
            ..TaskSpec::default()
        };
        Self {
            algo: Algorithm::Zipdl,
            seed: 1,
            output_dir: "out".into(),
            topology: TopologyConfig { n: 16, k: 3, mode: TopologyMode::Static, scheme: WeightScheme::Uniform },
            task,
            train: TrainSettings { eta: 0.1, steps_per_round: 3, batch_size: 32, iterations: 200 },
            noise: NoiseConfig { level: 1.0, sigma_base: None, amplify: true },
            muffliato_rounds: 10,
            calibration_iterations: 20,
            attacks: AttackConfig { enabled: true, every: 1 },
            privacy: PrivacyConfig { enabled: true, alpha: 2.0, delta: 1.0, smoothness: None, rounds: 10, bounds: vec![BoundKind::SingleRound, BoundKind::Averaging, BoundKind::Muffliato] },
            sweep: SweepConfig { algos: vec![Algorithm::Zipdl, Algorithm::Muffliato, Algorithm::Dpsgd], levels: vec![1.0, 4.0, 16.0, 64.0] },
            lines: KeyLines::default(),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse '{value}': {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true/false, got '{other}'")),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every key in serialization order.
    pub const KEYS: [&'static str; 43] = [
        "algo",
        "seed",
        "output.dir",
        "topology.n",
        "topology.k",
        "topology.mode",
        "topology.scheme",
        "task.kind",
        "task.dim",
        "task.samples_per_node",
        "task.heterogeneity",
        "task.sample_spread",
        "task.eig_min",
        "task.eig_max",
        "task.shared_curvature",
        "task.hidden",
        "task.l2",
        "data.classes",
        "data.features",
        "data.train_per_class",
        "data.test_per_class",
        "data.separation",
        "data.spread",
        "data.shards",
        "train.eta",
        "train.steps_per_round",
        "train.batch_size",
        "train.iterations",
        "noise.level",
        "noise.sigma_base",
        "noise.amplify",
        "muffliato.rounds",
        "calibration.iterations",
        "attacks.enabled",
        "attacks.every",
        "privacy.enabled",
        "privacy.alpha",
        "privacy.delta",
        "privacy.smoothness",
        "privacy.rounds",
        "privacy.bounds",
        "sweep.algos",
        "sweep.levels",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "algo" => self.algo = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "output.dir" => self.output_dir = value.to_string(),
            "topology.n" => self.topology.n = parse(value)?,
            "topology.k" => self.topology.k = parse(value)?,
            "topology.mode" => self.topology.mode = parse(value)?,
            "topology.scheme" => self.topology.scheme = parse(value)?,
            "task.kind" => self.task.kind = parse(value)?,
            "task.dim" => self.task.dim = parse(value)?,
            "task.samples_per_node" => self.task.samples_per_node = parse(value)?,
            "task.heterogeneity" => self.task.heterogeneity = parse(value)?,
            "task.sample_spread" => self.task.sample_spread = parse(value)?,
            "task.eig_min" => self.task.eig_min = parse(value)?,
            "task.eig_max" => self.task.eig_max = parse(value)?,
            "task.shared_curvature" => self.task.shared_curvature = parse_bool(value)?,
            "task.hidden" => self.task.hidden = parse(value)?,
            "task.l2" => self.task.l2 = parse(value)?,
            "data.classes" => self.task.blobs.classes = parse(value)?,
            "data.features" => self.task.blobs.features = parse(value)?,
            "data.train_per_class" => self.task.blobs.train_per_class = parse(value)?,
            "data.test_per_class" => self.task.blobs.test_per_class = parse(value)?,
            "data.separation" => self.task.blobs.separation = parse(value)?,
            "data.spread" => self.task.blobs.spread = parse(value)?,
            "data.shards" => self.task.shards = parse(value)?,
            "train.eta" => self.train.eta = parse(value)?,
            "train.steps_per_round" => self.train.steps_per_round = parse(value)?,
            "train.batch_size" => self.train.batch_size = parse(value)?,
            "train.iterations" => self.train.iterations = parse(value)?,
            "noise.level" => self.noise.level = parse(value)?,
            "noise.sigma_base" => self.noise.sigma_base = if value == "auto" { None } else { Some(parse(value)?) },
            "noise.amplify" => self.noise.amplify = parse_bool(value)?,
            "muffliato.rounds" => self.muffliato_rounds = parse(value)?,
            "calibration.iterations" => self.calibration_iterations = parse(value)?,
            "attacks.enabled" => self.attacks.enabled = parse_bool(value)?,
            "attacks.every" => self.attacks.every = parse(value)?,
            "privacy.enabled" => self.privacy.enabled = parse_bool(value)?,
            "privacy.alpha" => self.privacy.alpha = parse(value)?,
            "privacy.delta" => self.privacy.delta = parse(value)?,
            "privacy.smoothness" => self.privacy.smoothness = if value == "auto" { None } else { Some(parse(value)?) },
            "privacy.rounds" => self.privacy.rounds = parse(value)?,
            "privacy.bounds" => self.privacy.bounds = parse_list(value)?,
            "sweep.algos" => self.sweep.algos = parse_list(value)?,
            "sweep.levels" => self.sweep.levels = parse_list(value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        self.task.n = self.topology.n;
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        match key {
            "algo" => self.algo.to_string(),
            "seed" => self.seed.to_string(),
            "output.dir" => self.output_dir.clone(),
            "topology.n" => self.topology.n.to_string(),
            "topology.k" => self.topology.k.to_string(),
            "topology.mode" => self.topology.mode.to_string(),
            "topology.scheme" => self.topology.scheme.to_string(),
            "task.kind" => self.task.kind.to_string(),
            "task.dim" => self.task.dim.to_string(),
            "task.samples_per_node" => self.task.samples_per_node.to_string(),
            "task.heterogeneity" => self.task.heterogeneity.to_string(),
            "task.sample_spread" => self.task.sample_spread.to_string(),
            "task.eig_min" => self.task.eig_min.to_string(),
            "task.eig_max" => self.task.eig_max.to_string(),
            "task.shared_curvature" => self.task.shared_curvature.to_string(),
            "task.hidden" => self.task.hidden.to_string(),
            "task.l2" => self.task.l2.to_string(),
            "data.classes" => self.task.blobs.classes.to_string(),
            "data.features" => self.task.blobs.features.to_string(),
            "data.train_per_class" => self.task.blobs.train_per_class.to_string(),
            "data.test_per_class" => self.task.blobs.test_per_class.to_string(),
            "data.separation" => self.task.blobs.separation.to_string(),
            "data.spread" => self.task.blobs.spread.to_string(),
            "data.shards" => self.task.shards.to_string(),
            "train.eta" => self.train.eta.to_string(),
            "train.steps_per_round" => self.train.steps_per_round.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "noise.level" => self.noise.level.to_string(),
            "noise.sigma_base" => opt(self.noise.sigma_base),
            "noise.amplify" => self.noise.amplify.to_string(),
            "muffliato.rounds" => self.muffliato_rounds.to_string(),
            "calibration.iterations" => self.calibration_iterations.to_string(),
            "attacks.enabled" => self.attacks.enabled.to_string(),
            "attacks.every" => self.attacks.every.to_string(),
            "privacy.enabled" => self.privacy.enabled.to_string(),
            "privacy.alpha" => self.privacy.alpha.to_string(),
            "privacy.delta" => self.privacy.delta.to_string(),
            "privacy.smoothness" => opt(self.privacy.smoothness),
            "privacy.rounds" => self.privacy.rounds.to_string(),
            "privacy.bounds" => join(&self.privacy.bounds),
            "sweep.algos" => join(&self.sweep.algos),
            "sweep.levels" => join(&self.sweep.levels),
            other => unreachable!("unknown key {other}"),
        }
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Parse { line, message: format!("expected 'key = value', got '{trimmed}'") })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = cfg.lines.0.get(key) {
                return Err(ConfigError::Parse { line, message: format!("duplicate key '{key}' (first set on line {prev})") });
            }
            cfg.set(key, value).map_err(|message| ConfigError::Parse { line, message })?;
            cfg.lines.0.insert(key.to_string(), line);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// SHA-256 of the canonical text without `output.dir`, hex encoded.
    pub fn hash(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("output.dir ")).flat_map(|l| [l, "\n"]).collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { line: self.lines.0.get(key).copied(), key: key.to_string(), message: message.into() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        if t.n < 2 {
            return Err(self.invalid("topology.n", "need at least 2 nodes"));
        }
        if t.k == 0 || t.k >= t.n || (t.n * t.k) % 2 != 0 {
            return Err(self.invalid("topology.k", format!("no simple {}-regular graph on {} nodes", t.k, t.n)));
        }
        if !(self.train.eta > 0.0 && self.train.eta.is_finite()) {
            return Err(self.invalid("train.eta", "must be > 0"));
        }
        if self.train.iterations == 0 {
            return Err(self.invalid("train.iterations", "must be >= 1"));
        }
        if self.train.steps_per_round == 0 {
            return Err(self.invalid("train.steps_per_round", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(self.invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.noise.level >= 0.0 && self.noise.level.is_finite()) {
            return Err(self.invalid("noise.level", "must be >= 0"));
        }
        if self.noise.sigma_base.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(self.invalid("noise.sigma_base", "must be >= 0"));
        }
        if self.muffliato_rounds == 0 {
            return Err(self.invalid("muffliato.rounds", "must be >= 1"));
        }
        if self.attacks.every == 0 {
            return Err(self.invalid("attacks.every", "must be >= 1"));
        }
        if self.attacks.enabled && self.task.kind == TaskKind::Quadratic {
            return Err(self.invalid("attacks.enabled", "attacks need a classification task"));
        }
        if self.task.kind != TaskKind::Quadratic {
            let b = &self.task.blobs;
            if b.classes < 2 {
                return Err(self.invalid("data.classes", "must be >= 2"));
            }
            if b.features == 0 {
                return Err(self.invalid("data.features", "must be >= 1"));
            }
            if self.task.shards == 0 || t.n * self.task.shards > b.classes * b.train_per_class {
                return Err(self.invalid("data.shards", format!("cannot cut {} samples into {} slices", b.classes * b.train_per_class, t.n * self.task.shards)));
            }
            if self.attacks.enabled && b.test_per_class == 0 {
                return Err(self.invalid("data.test_per_class", "attacks need held-out samples"));
            }
        }
        let p = &self.privacy;
        if !(p.alpha > 1.0) {
            return Err(self.invalid("privacy.alpha", "must be > 1"));
        }
        if !(p.delta >= 0.0) {
            return Err(self.invalid("privacy.delta", "must be >= 0"));
        }
        if p.smoothness.is_some_and(|l| !(l > 0.0)) {
            return Err(self.invalid("privacy.smoothness", "must be > 0"));
        }
        if self.sweep.algos.is_empty() {
            return Err(self.invalid("sweep.algos", "needs at least one algorithm"));
        }
        if self.sweep.levels.is_empty() || self.sweep.levels.iter().any(|l| !(*l >= 0.0)) {
            return Err(self.invalid("sweep.levels", "needs at least one level, all >= 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> TopologySchedule {
        TopologySchedule { mode: self.topology.mode, n: self.topology.n, k: self.topology.k, scheme: self.topology.scheme, seed: self.seed }
    }

    /// Stepsize guidance `η ≤ 1/(12L)`.
    pub fn stepsize_warning(&self, smoothness: f64) -> Option<String> {
        let limit = 1.0 / (12.0 * smoothness);
        (self.train.eta > limit).then(|| format!("train.eta = {} exceeds 1/(12L) = {limit:.4e}", self.train.eta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn every_key_is_settable() {
        let c = ExperimentConfig::default();
        for key in ExperimentConfig::KEYS {
            let mut d = ExperimentConfig::default();
            d.set(key, &c.get(key)).unwrap();
        }
    }

    #[test]
    fn errors_have_line_numbers() {
        let text = "# comment\nalgo = zipdl\n\ntopology.n = sixteen\n";
        assert!(matches!(ExperimentConfig::parse_str(text), Err(ConfigError::Parse { line: 4, .. })));
        assert!(matches!(ExperimentConfig::parse_str("bogus.key = 1"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse_str("seed = 1\nseed = 2"), Err(ConfigError::Parse { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse_str("no equals sign"), Err(ConfigError::Parse { line: 1, .. })));
        match ExperimentConfig::parse_str("seed = 3\ntopology.n = 5\ntopology.k = 3\n") {
            Err(ConfigError::Invalid { line, key, .. }) => assert_eq!((line, key.as_str()), (Some(3), "topology.k")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
