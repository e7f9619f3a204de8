use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use zipdl_core::accountant::{epsilon_matrix, BoundKind, PrivacyParams};
use zipdl_core::harness::output::{write_csv, write_json};
use zipdl_core::harness::{self, calibrate_sigma, node_sigmas, ExperimentConfig, EPS_HEADER};
use zipdl_core::learning::{Algorithm, LossTask};
use zipdl_core::topology::{build_gossip_matrix, Graph};

#[derive(Parser)]
#[command(name = "zipdl", version, about = "Decentralized learning with correlated zero-sum noise")]
struct Cli {
    /// Config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, privacy bounds and summaries.
    Run,
    /// Run every algorithm and noise level and write tradeoff.csv.
    Sweep {
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Overrides `sweep.levels`, comma separated.
        #[arg(long)]
        levels: Option<String>,
        /// Overrides `sweep.algos`, comma separated.
        #[arg(long)]
        algos: Option<String>,
    },
    /// Compute pairwise privacy-loss bounds for a graph.
    Accountant {
        /// Edge-list file; defaults to the configured topology.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Uniform σ; defaults to the configured level times the base scale.
        #[arg(long)]
        sigma: Option<f64>,
        /// Overrides `privacy.bounds`, comma separated.
        #[arg(long)]
        bounds: Option<String>,
        /// Overrides `privacy.rounds`.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Print the calibrated base noise scale.
    Calibrate,
    /// Check the noise construction numerically.
    Selftest {
        #[arg(long, default_value_t = 200_000)]
        draws: usize,
        /// Tolerance in standard errors.
        #[arg(long, default_value_t = 4.0)]
        z: f64,
    },
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse_str(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.display().to_string();
    }
    Ok(cfg)
}

fn set(cfg: &mut ExperimentConfig, key: &str, value: &Option<String>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, v).map_err(|e| anyhow::anyhow!("--{}: {e}", key.rsplit('.').next().unwrap_or(key)))?;
    }
    Ok(())
}

fn accountant(cfg: &ExperimentConfig, graph: &Option<PathBuf>, sigma: Option<f64>) -> Result<()> {
    let w = match graph {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            build_gossip_matrix(&Graph::from_edge_list(&text)?, cfg.topology.scheme)?
        }
        None => cfg.schedule().resample(0)?,
    };
    let sigma = match sigma {
        Some(s) => vec![s; w.n()],
        None => {
            let base = match cfg.noise.sigma_base {
                Some(s) => s,
                None => {
                    let mut c = cfg.clone();
                    c.topology.n = w.n();
                    c.task.n = w.n();
                    calibrate_sigma(&c, &LossTask::build(&c.task, c.seed)?)?
                }
            };
            node_sigmas(cfg, base, &w)?
        }
    };
    let smoothness = cfg.privacy.smoothness.unwrap_or(1.0);
    let params = PrivacyParams { alpha: cfg.privacy.alpha, delta: cfg.privacy.delta, eta: cfg.train.eta, smoothness, sigma, rounds: cfg.privacy.rounds };
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &kind in &cfg.privacy.bounds {
        let m = epsilon_matrix(&w, &params, kind)?;
        let means: Vec<f64> = (0..m.n()).map(|v| m.mean_to(v)).collect();
        println!("{kind}: mean loss to each node = {}", means.iter().map(|e| format!("{e:.4e}")).collect::<Vec<_>>().join(" "));
        for (a, row) in m.eps.iter().enumerate() {
            for (v, e) in row.iter().enumerate() {
                if a != v {
                    rows.push(vec![a.to_string(), v.to_string(), m.rounds.to_string(), kind.to_string(), harness::output::fmt_f64(*e), hash.clone()]);
                }
            }
        }
        summary.push(serde_json::json!({ "bound_kind": kind.to_string(), "rounds": m.rounds, "mean_loss_to": means }));
    }
    let dir = Path::new(&cfg.output_dir);
    write_csv(&dir.join("eps_matrix.csv"), &EPS_HEADER, &rows)?;
    write_json(&dir.join("summary.json"), &serde_json::json!({ "config_hash": hash, "bounds": summary }))?;
    println!("wrote {}", dir.join("eps_matrix.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Run => {
            let dir = PathBuf::from(&cfg.output_dir);
            let o = harness::run(&cfg, &dir)?;
            let s = &o.summary;
            println!(
                "{} level={} sigma={:.4e} final_acc={} total_bytes={} -> {}",
                s.algo,
                s.noise_level,
                s.sigma_mean,
                s.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                s.total_bytes,
                dir.display()
            );
        }
        Command::Sweep { jobs, levels, algos } => {
            set(&mut cfg, "sweep.levels", levels)?;
            set(&mut cfg, "sweep.algos", algos)?;
            cfg.validate()?;
            let dir = PathBuf::from(&cfg.output_dir);
            let o = harness::sweep(&cfg, Some(&dir), *jobs)?;
            println!("sigma_base = {:.6e}", o.sigma_base);
            for r in &o.rows {
                println!(
                    "{:<9} level={:<6} max_acc={} link={} bytes/iter={}",
                    r.algo.to_string(),
                    r.noise_level,
                    r.max_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    r.mean_linkability.map_or("n/a".into(), |a| format!("{a:.4}")),
                    r.bytes_per_iteration
                );
            }
            println!("wrote {}", dir.join("tradeoff.csv").display());
        }
        Command::Accountant { graph, sigma, bounds, rounds } => {
            set(&mut cfg, "privacy.bounds", bounds)?;
            if let Some(r) = rounds {
                cfg.privacy.rounds = *r;
            }
            if cfg.privacy.bounds.is_empty() {
                bail!("no bound kinds selected; choose from {}", BoundKind::ALL.map(|k| k.to_string()).join(","));
            }
            accountant(&cfg, graph, *sigma)?;
        }
        Command::Calibrate => {
            cfg.validate()?;
            let task = LossTask::build(&cfg.task, cfg.seed)?;
            let base = calibrate_sigma(&cfg, &task)?;
            println!("sigma_base = {base:.16e}");
            let w = cfg.schedule().resample(0)?;
            for algo in [Algorithm::Zipdl, Algorithm::Muffliato] {
                let mut c = cfg.clone();
                c.algo = algo;
                let s = node_sigmas(&c, base, &w)?;
                println!("{algo} sigma at level {} = {:.6e}", cfg.noise.level, s.iter().sum::<f64>() / s.len() as f64);
            }
        }
        Command::Selftest { draws, z } => {
            let checks = harness::selftest(*draws, *z, cfg.seed)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(ExitCode::SUCCESS)
}
