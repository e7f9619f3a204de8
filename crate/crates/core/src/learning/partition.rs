//! Class-sorted shard partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LearningError;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub nodes: Vec<Vec<usize>>,
    pub shards_per_node: usize,
}

impl Partition {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, a: usize) -> &[usize] {
        &self.nodes[a]
    }

    /// Every node owns a contiguous block of `per_node` consecutive indices.
    pub fn contiguous(n: usize, per_node: usize) -> Self {
        Self { nodes: (0..n).map(|a| (a * per_node..(a + 1) * per_node).collect()).collect(), shards_per_node: 1 }
    }
}

/// Sorts samples by class (stable), cuts them into `n·shards` contiguous
/// slices of equal length and hands each node `shards` slices chosen by a
/// seeded permutation. The remainder after equal slicing is dropped.
pub fn partition_shards(labels: &[usize], n: usize, shards: usize, seed: u64) -> Result<Partition, LearningError> {
    let total = n * shards;
    if n == 0 || shards == 0 || total > labels.len() {
        return Err(LearningError::TooManyShards { slices: total, samples: labels.len() });
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let len = labels.len() / total;
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(&mut rng::stream(seed, Domain::Partition, &[n as u64, shards as u64]));
    let nodes = (0..n)
        .map(|a| {
            let mut mine: Vec<usize> = slots[a * shards..(a + 1) * shards].to_vec();
            mine.sort_unstable();
            mine.iter().flat_map(|&s| order[s * len..(s + 1) * len].iter().copied()).collect()
        })
        .collect();
    Ok(Partition { nodes, shards_per_node: shards })
}
