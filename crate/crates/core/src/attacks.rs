//! Honest-but-curious attacks on the messages a node receives.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::{LossTask, Partition, RoundView};
use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("member or non-member set is empty")]
    EmptySet,
    #[error("partition of node {0} is empty")]
    EmptyPartition(usize),
    #[error("no partitions")]
    NoPartitions,
    #[error("task has no held-out data")]
    NoTestSet,
}

/// ROC AUC of "lower loss means member": the probability that a random
/// member has a strictly lower loss than a random non-member, ties counted
/// half. Exact rational value computed with integers.
pub fn auc_from_losses(members: &[f64], nonmembers: &[f64]) -> Result<f64, AttackError> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(AttackError::EmptySet);
    }
    let mut sorted = nonmembers.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len() as u128;
    let mut twice_u: u128 = 0;
    for m in members {
        let le = sorted.partition_point(|x| x.total_cmp(m).is_le()) as u128;
        let lt = sorted.partition_point(|x| x.total_cmp(m).is_lt()) as u128;
        twice_u += 2 * (k - le) + (le - lt);
    }
    Ok(twice_u as f64 / (2 * members.len() as u128 * k) as f64)
}

/// Threshold membership inference with `model` on the task's training
/// (members) and held-out (non-members) samples.
pub fn threshold_mia(model: &[f64], task: &LossTask, members: &[usize], nonmembers: &[usize]) -> Result<f64, AttackError> {
    let test = task.test.as_ref().ok_or(AttackError::NoTestSet)?;
    let m: Vec<f64> = members.iter().map(|&i| task.sample_loss(model, &task.train, i)).collect();
    let k: Vec<f64> = nonmembers.iter().map(|&i| task.sample_loss(model, test, i)).collect();
    auc_from_losses(&m, &k)
}

/// Index of the smallest value, lowest index on ties.
pub fn linkability_from_losses(mean_losses: &[f64]) -> Result<usize, AttackError> {
    if mean_losses.is_empty() {
        return Err(AttackError::NoPartitions);
    }
    Ok((1..mean_losses.len()).fold(0, |best, i| if mean_losses[i] < mean_losses[best] { i } else { best }))
}

/// Node whose training set gives `model` the lowest mean loss.
pub fn linkability(model: &[f64], task: &LossTask, partitions: &Partition) -> Result<usize, AttackError> {
    if let Some(a) = partitions.nodes.iter().position(Vec::is_empty) {
        return Err(AttackError::EmptyPartition(a));
    }
    let losses: Vec<f64> = partitions.nodes.iter().map(|idx| task.mean_loss(model, &task.train, idx)).collect();
    linkability_from_losses(&losses)
}

/// Held-out samples matching the class of each member, drawn without
/// replacement while the class pool lasts.
pub fn matched_nonmembers(task: &LossTask, members: &[usize], seed: u64, victim: usize) -> Result<Vec<usize>, AttackError> {
    let test = task.test.as_ref().ok_or(AttackError::NoTestSet)?;
    let mut pools = test.by_class();
    let mut r = rng::stream(seed, Domain::Attack, &[victim as u64]);
    for p in &mut pools {
        p.shuffle(&mut r);
    }
    let mut used = vec![0usize; pools.len()];
    members
        .iter()
        .map(|&i| {
            let c = task.train.labels[i];
            let pool = &pools[c];
            if pool.is_empty() {
                return Err(AttackError::EmptySet);
            }
            let pick = pool[used[c] % pool.len()];
            used[c] += 1;
            Ok(pick)
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub iteration: usize,
    pub victim: usize,
    pub attacker: usize,
    pub mia_auc: f64,
    pub linkability_correct: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub records: Vec<AttackRecord>,
}

impl AttackReport {
    fn at(&self, iteration: Option<usize>) -> impl Iterator<Item = &AttackRecord> {
        self.records.iter().filter(move |r| iteration.is_none_or(|t| r.iteration == t))
    }

    pub fn mean_auc(&self, iteration: Option<usize>) -> Option<f64> {
        let v: Vec<f64> = self.at(iteration).map(|r| r.mia_auc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn linkability_accuracy(&self, iteration: Option<usize>) -> Option<f64> {
        let v: Vec<bool> = self.at(iteration).map(|r| r.linkability_correct).collect();
        (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
    }
}

/// Observes training rounds: every `every` iterations each victim's message
/// to its lowest-index neighbor is attacked.
pub struct AttackMonitor<'a> {
    task: &'a LossTask,
    every: usize,
    nonmembers: Vec<Vec<usize>>,
    pub report: AttackReport,
}

impl<'a> AttackMonitor<'a> {
    pub fn new(task: &'a LossTask, every: usize, seed: u64) -> Result<Self, AttackError> {
        let nonmembers = (0..task.n()).map(|a| matched_nonmembers(task, task.partition.node(a), seed, a)).collect::<Result<_, _>>()?;
        Ok(Self { task, every: every.max(1), nonmembers, report: AttackReport::default() })
    }

    pub fn observe(&mut self, view: &RoundView<'_>) {
        if (view.iteration + 1) % self.every != 0 {
            return;
        }
        for victim in 0..self.task.n() {
            let Some(attacker) = view.w.neighbors(victim).iter().copied().find(|&v| v != victim) else {
                continue;
            };
            let msg = view.message(victim, attacker).expect("attacker is a neighbor");
            let auc = threshold_mia(&msg, self.task, self.task.partition.node(victim), &self.nonmembers[victim]).expect("non-empty sets");
            let guess = linkability(&msg, self.task, &self.task.partition).expect("non-empty partitions");
            self.report.records.push(AttackRecord { iteration: view.iteration + 1, victim, attacker, mia_auc: auc, linkability_correct: guess == victim });
        }
    }
}
