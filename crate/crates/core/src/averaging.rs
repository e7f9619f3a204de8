//! One synchronous communication round for each algorithm variant.
//!
//! Every round reads an immutable snapshot of all models and returns a new
//! state. Self-messages are free; every other parameter costs 8 bytes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{draw_bundle, noise_stream, NoiseBundle, NoiseError, NoisePlan};
use crate::rng::{self, Domain};
use crate::topology::GossipMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("muffliato needs at least one gossip round")]
    ZeroRounds,
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub models: Vec<Vec<f64>>,
    /// Number of averaging steps applied so far.
    pub round: u64,
    pub bytes_sent: u64,
}

impl SystemState {
    pub fn new(models: Vec<Vec<f64>>) -> Self {
        Self { models, round: 0, bytes_sent: 0 }
    }

    pub fn n(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_model(&self.models)
    }

    /// `Ξ = (1/n) Σ_a ‖x_a − x̄‖²`.
    pub fn consensus_distance(&self) -> f64 {
        consensus_distance(&self.models)
    }
}

pub fn mean_model(models: &[Vec<f64>]) -> Vec<f64> {
    let dim = models.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for x in models {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    let n = models.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn consensus_distance(models: &[Vec<f64>]) -> f64 {
    let mean = mean_model(models);
    let total: f64 = models.iter().map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
    total / models.len().max(1) as f64
}

fn check_dims(models: &[Vec<f64>], w: &GossipMatrix, dim: Option<usize>) -> Result<usize, AveragingError> {
    if models.len() != w.n() {
        return Err(AveragingError::DimensionMismatch { expected: w.n(), found: models.len() });
    }
    let d = dim.unwrap_or_else(|| models.first().map_or(0, Vec::len));
    if let Some(bad) = models.iter().find(|x| x.len() != d) {
        return Err(AveragingError::DimensionMismatch { expected: d, found: bad.len() });
    }
    Ok(d)
}

fn mix(models: &[Vec<f64>], w: &GossipMatrix, dim: usize) -> Vec<Vec<f64>> {
    (0..w.n())
        .map(|a| {
            let mut out = vec![0.0; dim];
            for &v in w.neighbors(a) {
                let wv = w.weight(a, v);
                for (o, x) in out.iter_mut().zip(&models[v]) {
                    *o += wv * x;
                }
            }
            out
        })
        .collect()
}

/// Draws every node's bundle and returns the averaged models together with
/// the bundles (so callers can inspect the messages on the wire).
pub fn zipdl_exchange(models: &[Vec<f64>], w: &GossipMatrix, plan: &NoisePlan, seed: u64, round: u64) -> Result<(Vec<Vec<f64>>, Vec<NoiseBundle>), AveragingError> {
    let dim = check_dims(models, w, Some(plan.dim()))?;
    if plan.n() != w.n() {
        return Err(AveragingError::DimensionMismatch { expected: w.n(), found: plan.n() });
    }
    let bundles = (0..w.n())
        .map(|a| draw_bundle(a, w, plan, &mut noise_stream(seed, a, round)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = (0..w.n())
        .map(|a| {
            let mut x = vec![0.0; dim];
            for &v in w.neighbors(a) {
                let wv = w.weight(a, v);
                let z = bundles[v].correlated_for(a).expect("symmetric neighborhoods");
                for ((o, m), n) in x.iter_mut().zip(&models[v]).zip(z) {
                    *o += wv * (m + n);
                }
            }
            x
        })
        .collect();
    Ok((out, bundles))
}

/// `x_a′ = Σ_{v∈N_a} W[a,v]·(x_v + Z_{v→a})`.
pub fn zipdl_round(s: &SystemState, w: &GossipMatrix, plan: &NoisePlan, seed: u64) -> Result<SystemState, AveragingError> {
    let (models, _) = zipdl_exchange(&s.models, w, plan, seed, s.round)?;
    Ok(SystemState { models, round: s.round + 1, bytes_sent: s.bytes_sent + w.round_bytes(plan.dim()) })
}

/// `x′ = W x`.
pub fn plain_round(s: &SystemState, w: &GossipMatrix) -> Result<SystemState, AveragingError> {
    let dim = check_dims(&s.models, w, None)?;
    Ok(SystemState { models: mix(&s.models, w, dim), round: s.round + 1, bytes_sent: s.bytes_sent + w.round_bytes(dim) })
}

/// Independent noise `N(0, η²σ_a²)` each node adds before gossiping.
pub fn muffliato_noise(plan: &NoisePlan, seed: u64, round: u64) -> Vec<Vec<f64>> {
    (0..plan.n())
        .map(|a| {
            let mut r = rng::stream(seed, Domain::MuffliatoNoise, &[a as u64, round]);
            let s = plan.std_dev(a);
            (0..plan.dim())
                .map(|_| {
                    let z: f64 = r.sample(StandardNormal);
                    s * z
                })
                .collect()
        })
        .collect()
}

/// Adds the injected noise once, then runs `rounds` plain gossip steps.
/// Returns the averaged models and the injected noise.
pub fn muffliato_exchange(models: &[Vec<f64>], w: &GossipMatrix, plan: &NoisePlan, rounds: usize, seed: u64, round: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), AveragingError> {
    if rounds == 0 {
        return Err(AveragingError::ZeroRounds);
    }
    let dim = check_dims(models, w, Some(plan.dim()))?;
    if plan.n() != w.n() {
        return Err(AveragingError::DimensionMismatch { expected: w.n(), found: plan.n() });
    }
    let noise = muffliato_noise(plan, seed, round);
    let mut x: Vec<Vec<f64>> = models.iter().zip(&noise).map(|(m, z)| m.iter().zip(z).map(|(a, b)| a + b).collect()).collect();
    for _ in 0..rounds {
        x = mix(&x, w, dim);
    }
    Ok((x, noise))
}

pub fn muffliato_round(s: &SystemState, w: &GossipMatrix, plan: &NoisePlan, rounds: usize, seed: u64) -> Result<SystemState, AveragingError> {
    let (models, _) = muffliato_exchange(&s.models, w, plan, rounds, seed, s.round)?;
    Ok(SystemState { models, round: s.round + 1, bytes_sent: s.bytes_sent + rounds as u64 * w.round_bytes(plan.dim()) })
}
