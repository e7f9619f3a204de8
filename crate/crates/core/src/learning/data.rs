//! Synthetic classification data: isotropic Gaussian blobs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Indices of each class, in sample order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class centers.
    pub separation: f64,
    /// Per-coordinate standard deviation around a center.
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 10, features: 16, train_per_class: 64, test_per_class: 64, separation: 1.0, spread: 1.0 }
    }
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    r.sample(StandardNormal)
}

/// Train and test sets drawn around the same class centers.
pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> (Dataset, Dataset) {
    let mut cr = rng::stream(seed, Domain::Data, &[0]);
    let centers: Vec<Vec<f64>> = (0..spec.classes).map(|_| (0..spec.features).map(|_| spec.separation * normal(&mut cr)).collect()).collect();
    let draw = |part: u64, per_class: usize| {
        let mut r = rng::stream(seed, Domain::Data, &[1 + part]);
        let mut features = Vec::with_capacity(per_class * spec.classes);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                features.push(center.iter().map(|m| m + spec.spread * normal(&mut r)).collect());
                labels.push(c);
            }
        }
        Dataset { features, labels, num_classes: spec.classes }
    };
    (draw(0, spec.train_per_class), draw(1, spec.test_per_class))
}
