//! Experiment runner: calibration, single runs, sweeps and their outputs.

pub mod config;
pub mod output;

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::accountant::{epsilon_matrix, AccountantError, EpsilonMatrix, PrivacyParams};
use crate::attacks::{AttackError, AttackMonitor, AttackReport};
use crate::learning::{train, Algorithm, LearningError, LossTask, RoundView, TrainConfig, TrainingTrace};
use crate::noise::{NoiseError, NoisePlan};
use crate::topology::{GossipMatrix, TopologyError};

pub use config::{ConfigError, ExperimentConfig};
use output::{fmt_f64, fmt_opt, write_atomic, write_csv, write_json};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("node {0} has no neighbor besides itself; Zip-DL noise is undefined")]
    DegreeOne(usize),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub const METRICS_HEADER: [&str; 13] = [
    "iteration",
    "algo",
    "noise_level",
    "sigma",
    "train_loss",
    "test_accuracy",
    "r_t",
    "consensus_distance",
    "bytes_cumulative",
    "mia_auc",
    "linkability_acc",
    "mean_grad_norm",
    "config_hash",
];

pub const TRADEOFF_HEADER: [&str; 10] = [
    "algo",
    "noise_level",
    "sigma",
    "max_accuracy",
    "final_accuracy",
    "mean_linkability",
    "mean_mia_auc",
    "bytes_per_iteration",
    "total_bytes",
    "config_hash",
];

pub const EPS_HEADER: [&str; 6] = ["from", "to", "T", "bound_kind", "epsilon", "config_hash"];

/// Ratio that equalizes Zip-DL's per-message variance with plain Gaussian
/// noise of the same σ: `sqrt(d/(d-1))` for closed degree `d`.
pub fn amplification_factor(w: &GossipMatrix, a: usize) -> Result<f64, HarnessError> {
    let d = w.closed_degree(a);
    if d < 2 {
        return Err(HarnessError::DegreeOne(a));
    }
    Ok((d as f64 / (d - 1) as f64).sqrt())
}

/// Base noise scale `g/(128η)` where `g` is the mean local gradient norm of
/// a noiseless pilot run.
pub fn calibrate_sigma(cfg: &ExperimentConfig, task: &LossTask) -> Result<f64, HarnessError> {
    let pilot_cfg = TrainConfig { algo: Algorithm::Dpsgd, iterations: cfg.calibration_iterations.max(1), ..train_config(cfg) };
    let plan = NoisePlan::uniform(task.n(), 0.0, cfg.train.eta, task.dim())?;
    let pilot = train(task, &pilot_cfg, &cfg.schedule(), &plan, None)?;
    Ok(pilot.mean_grad_norm() / (128.0 * cfg.train.eta))
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        algo: cfg.algo,
        iterations: cfg.train.iterations,
        steps_per_round: cfg.train.steps_per_round,
        batch_size: cfg.train.batch_size,
        eta: cfg.train.eta,
        muffliato_rounds: cfg.muffliato_rounds,
        seed: cfg.seed,
    }
}

/// Per-node σ for the configured algorithm and level.
pub fn node_sigmas(cfg: &ExperimentConfig, sigma_base: f64, w: &GossipMatrix) -> Result<Vec<f64>, HarnessError> {
    let base = cfg.noise.level * sigma_base;
    (0..w.n())
        .map(|a| match cfg.algo {
            Algorithm::Dpsgd => Ok(0.0),
            Algorithm::Muffliato => Ok(base),
            Algorithm::Zipdl if cfg.noise.amplify => Ok(base * amplification_factor(w, a)?),
            Algorithm::Zipdl => Ok(base),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PrivacySummary {
    pub bound_kind: String,
    pub rounds: usize,
    pub max_epsilon: f64,
    pub mean_loss_to: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algo: String,
    pub noise_level: f64,
    pub sigma_base: f64,
    pub sigma_mean: f64,
    pub iterations: usize,
    pub final_train_loss: f64,
    pub final_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub final_r_t: Option<f64>,
    pub mean_consensus_distance: f64,
    pub total_bytes: u64,
    pub bytes_per_iteration: f64,
    pub mean_linkability: Option<f64>,
    pub mean_mia_auc: Option<f64>,
    /// Relative to the run directory.
    pub eps_matrix: Option<String>,
    pub privacy: Vec<PrivacySummary>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub sigma_base: f64,
    pub sigma: Vec<f64>,
    pub trace: TrainingTrace,
    pub attacks: Option<AttackReport>,
    pub eps: Vec<EpsilonMatrix>,
    pub graph_edges: String,
    pub summary: RunSummary,
}

impl RunOutcome {
    pub fn metrics_rows(&self, cfg: &ExperimentConfig) -> Vec<Vec<String>> {
        let sigma_mean = mean(&self.sigma);
        self.trace
            .records
            .iter()
            .map(|r| {
                let (auc, link) = match &self.attacks {
                    Some(rep) => (rep.mean_auc(Some(r.iteration)), rep.linkability_accuracy(Some(r.iteration))),
                    None => (None, None),
                };
                vec![
                    r.iteration.to_string(),
                    cfg.algo.to_string(),
                    fmt_f64(cfg.noise.level),
                    fmt_f64(sigma_mean),
                    fmt_f64(r.train_loss),
                    fmt_opt(r.test_accuracy),
                    fmt_opt(r.distance_to_optimum),
                    fmt_f64(r.consensus_distance),
                    r.bytes_cumulative.to_string(),
                    fmt_opt(auc),
                    fmt_opt(link),
                    fmt_f64(r.mean_grad_norm),
                    self.config_hash.clone(),
                ]
            })
            .collect()
    }

    pub fn eps_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for m in &self.eps {
            for (a, row) in m.eps.iter().enumerate() {
                for (v, e) in row.iter().enumerate() {
                    if a != v {
                        rows.push(vec![a.to_string(), v.to_string(), m.rounds.to_string(), m.kind.to_string(), fmt_f64(*e), self.config_hash.clone()]);
                    }
                }
            }
        }
        rows
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs one experiment in memory. `sigma_base` overrides both the config and
/// calibration.
pub fn run_experiment(cfg: &ExperimentConfig, sigma_base: Option<f64>) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let task = LossTask::build(&cfg.task, cfg.seed)?;
    let schedule = cfg.schedule();
    let w0 = schedule.resample(0)?;
    let sigma_base = match sigma_base.or(cfg.noise.sigma_base) {
        Some(s) => s,
        None => calibrate_sigma(cfg, &task)?,
    };
    let sigma = node_sigmas(cfg, sigma_base, &w0)?;
    let plan = NoisePlan::new(sigma.clone(), cfg.train.eta, task.dim())?;

    let mut monitor = if cfg.attacks.enabled { Some(AttackMonitor::new(&task, cfg.attacks.every, cfg.seed)?) } else { None };
    let trace = match monitor.as_mut() {
        Some(m) => {
            let mut obs = |v: &RoundView<'_>| m.observe(v);
            train(&task, &train_config(cfg), &schedule, &plan, Some(&mut obs))?
        }
        None => train(&task, &train_config(cfg), &schedule, &plan, None)?,
    };
    let attacks = monitor.map(|m| m.report);

    let eps = if cfg.privacy.enabled {
        let smoothness = cfg.privacy.smoothness.or(task.quadratic.as_ref().map(|q| q.smoothness)).unwrap_or(1.0);
        let params = PrivacyParams { alpha: cfg.privacy.alpha, delta: cfg.privacy.delta, eta: cfg.train.eta, smoothness, sigma: sigma.clone(), rounds: cfg.privacy.rounds };
        cfg.privacy.bounds.iter().map(|&k| epsilon_matrix(&w0, &params, k)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    let config_hash = cfg.hash();
    let last = trace.records.last().expect("at least one iteration");
    let total_bytes = last.bytes_cumulative;
    let summary = RunSummary {
        algo: cfg.algo.to_string(),
        noise_level: cfg.noise.level,
        sigma_base,
        sigma_mean: mean(&sigma),
        iterations: cfg.train.iterations,
        final_train_loss: last.train_loss,
        final_accuracy: trace.final_accuracy(),
        max_accuracy: trace.max_accuracy(),
        final_r_t: last.distance_to_optimum,
        mean_consensus_distance: trace.mean_consensus_distance(),
        total_bytes,
        bytes_per_iteration: total_bytes as f64 / cfg.train.iterations as f64,
        mean_linkability: attacks.as_ref().and_then(|r| r.linkability_accuracy(None)),
        mean_mia_auc: attacks.as_ref().and_then(|r| r.mean_auc(None)),
        eps_matrix: cfg.privacy.enabled.then(|| "eps_matrix.csv".to_string()),
        privacy: eps
            .iter()
            .map(|m| PrivacySummary {
                bound_kind: m.kind.to_string(),
                rounds: m.rounds,
                max_epsilon: m.eps.iter().flatten().copied().fold(0.0, f64::max),
                mean_loss_to: (0..m.n()).map(|v| m.mean_to(v)).collect(),
            })
            .collect(),
        config_hash: config_hash.clone(),
    };
    let graph_edges = format!("# config_hash {config_hash}\n{}", schedule.graph(0)?.to_edge_list());
    Ok(RunOutcome { config_hash, sigma_base, sigma, trace, attacks, eps, graph_edges, summary })
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seed: u64,
    version: &'static str,
    files: Vec<&'static str>,
    config: &'a str,
}

/// Writes `metrics.csv`, `eps_matrix.csv` (when privacy is enabled),
/// `topology.edges`, `summary.json` and `manifest.json` into `dir`.
pub fn write_run(outcome: &RunOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, &outcome.metrics_rows(cfg))?;
    let mut files = vec!["metrics.csv", "topology.edges", "summary.json"];
    if cfg.privacy.enabled {
        write_csv(&dir.join("eps_matrix.csv"), &EPS_HEADER, &outcome.eps_rows())?;
        files.push("eps_matrix.csv");
    }
    write_atomic(&dir.join("topology.edges"), outcome.graph_edges.as_bytes())?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    let text = cfg.to_text();
    write_json(&dir.join("manifest.json"), &Manifest { config_hash: &outcome.config_hash, seed: cfg.seed, version: env!("CARGO_PKG_VERSION"), files, config: &text })
}

pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, HarnessError> {
    let outcome = run_experiment(cfg, None)?;
    write_run(&outcome, cfg, dir)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub algo: Algorithm,
    pub noise_level: f64,
    pub sigma: f64,
    pub max_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub mean_linkability: Option<f64>,
    pub mean_mia_auc: Option<f64>,
    pub bytes_per_iteration: u64,
    pub total_bytes: u64,
    pub config_hash: String,
}

impl TradeoffRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.algo.to_string(),
            fmt_f64(self.noise_level),
            fmt_f64(self.sigma),
            fmt_opt(self.max_accuracy),
            fmt_opt(self.final_accuracy),
            fmt_opt(self.mean_linkability),
            fmt_opt(self.mean_mia_auc),
            self.bytes_per_iteration.to_string(),
            self.total_bytes.to_string(),
            self.config_hash.clone(),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub sigma_base: f64,
    pub rows: Vec<TradeoffRow>,
    pub config_hash: String,
}

impl SweepOutcome {
    pub fn row(&self, algo: Algorithm, level: f64) -> Option<&TradeoffRow> {
        self.rows.iter().find(|r| r.algo == algo && r.noise_level == level)
    }
}

/// Config of one sweep point.
pub fn sweep_point(cfg: &ExperimentConfig, algo: Algorithm, level: f64, sigma_base: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.algo = algo;
    c.noise.level = level;
    c.noise.sigma_base = Some(sigma_base);
    c
}

/// Runs every `sweep.algos × sweep.levels` point with one shared calibrated
/// base scale on a pool of `jobs` threads (0 = all cores). With `out`, each
/// point goes to `out/<algo>_<level>/` and the table to `out/tradeoff.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>, jobs: usize) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    let sigma_base = match cfg.noise.sigma_base {
        Some(s) => s,
        None => calibrate_sigma(cfg, &LossTask::build(&cfg.task, cfg.seed)?)?,
    };
    let points: Vec<(Algorithm, f64)> = cfg.sweep.algos.iter().flat_map(|&a| cfg.sweep.levels.iter().map(move |&l| (a, l))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|&(algo, level)| {
                let point = sweep_point(cfg, algo, level, sigma_base);
                let o = run_experiment(&point, Some(sigma_base))?;
                if let Some(dir) = out {
                    write_run(&o, &point, &dir.join(format!("{algo}_{level}")))?;
                }
                let iters = point.train.iterations as u64;
                Ok(TradeoffRow {
                    algo,
                    noise_level: level,
                    sigma: o.summary.sigma_mean,
                    max_accuracy: o.summary.max_accuracy,
                    final_accuracy: o.summary.final_accuracy,
                    mean_linkability: o.summary.mean_linkability,
                    mean_mia_auc: o.summary.mean_mia_auc,
                    bytes_per_iteration: o.summary.total_bytes / iters,
                    total_bytes: o.summary.total_bytes,
                    config_hash: o.config_hash,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let outcome = SweepOutcome { sigma_base, rows, config_hash: cfg.hash() };
    if let Some(dir) = out {
        let cells: Vec<Vec<String>> = outcome.rows.iter().map(TradeoffRow::cells).collect();
        write_csv(&dir.join("tradeoff.csv"), &TRADEOFF_HEADER, &cells)?;
        write_json(&dir.join("summary.json"), &outcome)?;
        let text = cfg.to_text();
        write_json(&dir.join("manifest.json"), &Manifest { config_hash: &outcome.config_hash, seed: cfg.seed, version: env!("CARGO_PKG_VERSION"), files: vec!["tradeoff.csv", "summary.json"], config: &text })?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Quick numerical self-check of the noise construction on a few graphs:
/// zero weighted sum, mean conservation and Monte Carlo moments within
/// `z` standard errors.
pub fn selftest(draws: usize, z: f64, seed: u64) -> Result<Vec<SelfCheck>, HarnessError> {
    use crate::averaging::{zipdl_round, SystemState};
    use crate::noise::{draw_bundle, monte_carlo_moments, noise_stream};
    use crate::topology::{build_gossip_matrix, generate_k_regular, Graph, WeightScheme};

    let graphs = vec![
        ("ring8/uniform", build_gossip_matrix(&Graph::ring(8), WeightScheme::Uniform)?),
        ("regular12x4/uniform", build_gossip_matrix(&generate_k_regular(12, 4, seed)?, WeightScheme::Uniform)?),
        ("path5/metropolis", build_gossip_matrix(&Graph::path(5), WeightScheme::MetropolisHastings)?),
        ("complete5/metropolis", build_gossip_matrix(&Graph::complete(5), WeightScheme::MetropolisHastings)?),
    ];
    let mut out = Vec::new();
    for (name, w) in &graphs {
        let n = w.n();
        let plan = NoisePlan::uniform(n, 1.0, 0.5, 3)?;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            let b = draw_bundle(a, w, &plan, &mut noise_stream(seed, a, 0))?;
            worst = worst.max(b.weighted_sum_residual(w) / b.max_abs_intermediate().max(1.0));
        }
        out.push(SelfCheck { name: format!("{name}: zero sum"), passed: worst <= 1e-12, detail: format!("max residual {worst:.3e}") });

        let models: Vec<Vec<f64>> = (0..n).map(|a| vec![a as f64, -(a as f64), 1.0]).collect();
        let s = SystemState::new(models);
        let next = zipdl_round(&s, w, &plan, seed).map_err(LearningError::from)?;
        let drift = s.mean().iter().zip(next.mean()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        out.push(SelfCheck { name: format!("{name}: mean conserved"), passed: drift <= 1e-9, detail: format!("drift {drift:.3e}") });

        let a = n / 2;
        for m in monte_carlo_moments(a, w, &plan, draws, seed)? {
            let passed = m.passes(z);
            out.push(SelfCheck {
                name: format!("{name}: {}", m.label),
                passed,
                detail: format!("closed form {:.6e}, estimate {:.6e} ± {:.1e}", m.closed_form, m.estimate, m.standard_error),
            });
        }
    }
    Ok(out)
}
