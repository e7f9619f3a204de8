//! Decentralized SGD: local steps followed by one averaging step.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::task::LossTask;
use super::LearningError;
use crate::averaging::{mean_model, muffliato_exchange, zipdl_exchange, SystemState};
use crate::noise::{NoiseBundle, NoisePlan};
use crate::rng::{self, Domain};
use crate::topology::{GossipMatrix, TopologySchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Zipdl,
    Dpsgd,
    Muffliato,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zipdl" => Ok(Self::Zipdl),
            "dpsgd" => Ok(Self::Dpsgd),
            "muffliato" => Ok(Self::Muffliato),
            other => Err(format!("unknown algorithm '{other}'")),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zipdl => "zipdl",
            Self::Dpsgd => "dpsgd",
            Self::Muffliato => "muffliato",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algorithm,
    pub iterations: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub muffliato_rounds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { algo: Algorithm::Zipdl, iterations: 100, steps_per_round: 3, batch_size: 32, eta: 0.05, muffliato_rounds: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based: values after this many iterations.
    pub iteration: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub distance_to_optimum: Option<f64>,
    pub consensus_distance: f64,
    pub bytes_cumulative: u64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<IterationRecord>,
    pub final_state: SystemState,
}

impl TrainingTrace {
    pub fn max_accuracy(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.test_accuracy).reduce(f64::max)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_accuracy)
    }

    pub fn mean_grad_norm(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.mean_grad_norm).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_consensus_distance(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.consensus_distance).sum::<f64>() / self.records.len() as f64
    }
}

enum Wire<'a> {
    Plain,
    Zipdl(&'a [NoiseBundle]),
    Muffliato(&'a [Vec<f64>]),
}

/// What travels on the network during one averaging step.
pub struct RoundView<'a> {
    pub iteration: usize,
    /// Models after the local steps, before averaging.
    pub half_models: &'a [Vec<f64>],
    pub w: &'a GossipMatrix,
    wire: Wire<'a>,
}

impl RoundView<'_> {
    /// The model `from` sends to `to`; `None` if they are not neighbors.
    pub fn message(&self, from: usize, to: usize) -> Option<Vec<f64>> {
        if from == to || !self.w.is_neighbor(from, to) {
            return None;
        }
        let x = &self.half_models[from];
        let noise: Option<&[f64]> = match &self.wire {
            Wire::Plain => None,
            Wire::Zipdl(b) => b[from].correlated_for(to),
            Wire::Muffliato(z) => Some(&z[from]),
        };
        Some(match noise {
            Some(z) => x.iter().zip(z).map(|(a, b)| a + b).collect(),
            None => x.clone(),
        })
    }
}

fn draw_batch(len: usize, batch: usize, seed: u64, a: usize, t: usize, step: usize) -> Vec<usize> {
    if batch >= len {
        return (0..len).collect();
    }
    let mut r = rng::stream(seed, Domain::Batch, &[a as u64, t as u64, step as u64]);
    index::sample(&mut r, len, batch).into_vec()
}

/// Runs `cfg.iterations` iterations. `observer` sees every averaging step.
pub fn train(
    task: &LossTask,
    cfg: &TrainConfig,
    schedule: &TopologySchedule,
    plan: &NoisePlan,
    mut observer: Option<&mut dyn FnMut(&RoundView<'_>)>,
) -> Result<TrainingTrace, LearningError> {
    let n = task.n();
    if cfg.iterations == 0 {
        return Err(LearningError::InvalidSpec("iterations must be >= 1".into()));
    }
    if schedule.n != n || plan.n() != n || plan.dim() != task.dim() {
        return Err(LearningError::InvalidSpec(format!(
            "size mismatch: task n={n} dim={}, topology n={}, noise n={} dim={}",
            task.dim(),
            schedule.n,
            plan.n(),
            plan.dim()
        )));
    }
    if !(cfg.eta.is_finite() && cfg.eta > 0.0) {
        return Err(LearningError::InvalidSpec(format!("eta must be > 0, got {}", cfg.eta)));
    }
    let x0 = task.init_model(cfg.seed);
    let mut state = SystemState::new(vec![x0; n]);
    let mut records = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let mut norm_sum = 0.0;
        let mut half = state.models.clone();
        for (a, x) in half.iter_mut().enumerate() {
            let own = task.partition.node(a);
            for step in 0..cfg.steps_per_round {
                let batch: Vec<usize> = draw_batch(own.len(), cfg.batch_size, cfg.seed, a, t, step).into_iter().map(|i| own[i]).collect();
                let g = task.local_gradient(a, x, &batch)?;
                norm_sum += g.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (p, gi) in x.iter_mut().zip(&g) {
                    *p -= cfg.eta * gi;
                }
            }
        }
        let w = schedule.resample(t as u64)?;
        let round = t as u64;
        let (models, bytes) = match cfg.algo {
            Algorithm::Zipdl => {
                let (m, bundles) = zipdl_exchange(&half, &w, plan, cfg.seed, round)?;
                if let Some(obs) = observer.as_mut() {
                    obs(&RoundView { iteration: t, half_models: &half, w: &w, wire: Wire::Zipdl(&bundles) });
                }
                (m, w.round_bytes(task.dim()))
            }
            Algorithm::Muffliato => {
                let (m, noise) = muffliato_exchange(&half, &w, plan, cfg.muffliato_rounds, cfg.seed, round)?;
                if let Some(obs) = observer.as_mut() {
                    obs(&RoundView { iteration: t, half_models: &half, w: &w, wire: Wire::Muffliato(&noise) });
                }
                (m, cfg.muffliato_rounds as u64 * w.round_bytes(task.dim()))
            }
            Algorithm::Dpsgd => {
                let next = crate::averaging::plain_round(&SystemState::new(half.clone()), &w)?;
                if let Some(obs) = observer.as_mut() {
                    obs(&RoundView { iteration: t, half_models: &half, w: &w, wire: Wire::Plain });
                }
                (next.models, next.bytes_sent)
            }
        };
        if let Some(node) = models.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(LearningError::Divergence { iteration: t + 1, node });
        }
        state = SystemState { models, round: state.round + 1, bytes_sent: state.bytes_sent + bytes };

        let mean = mean_model(&state.models);
        let accuracy = if task.test.is_some() {
            let acc: Option<f64> = state.models.iter().map(|x| task.accuracy(x)).sum();
            acc.map(|s| s / n as f64)
        } else {
            None
        };
        records.push(IterationRecord {
            iteration: t + 1,
            train_loss: task.objective(&mean),
            test_accuracy: accuracy,
            distance_to_optimum: task.distance_to_optimum(&mean),
            consensus_distance: state.consensus_distance(),
            bytes_cumulative: state.bytes_sent,
            mean_grad_norm: norm_sum / (n * cfg.steps_per_round.max(1)) as f64,
        });
    }
    Ok(TrainingTrace { records, final_state: state })
}
