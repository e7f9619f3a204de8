//! Local objectives: per-node quadratics, softmax regression, and a
//! one-hidden-layer tanh network.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{gaussian_blobs, BlobSpec, Dataset};
use super::partition::{partition_shards, Partition};
use super::LearningError;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
    Mlp,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown task kind '{other}'")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Quadratic => "quadratic",
            Self::Logistic => "logistic",
            Self::Mlp => "mlp",
        })
    }
}

/// Everything needed to generate a task deterministically from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    /// Quadratic: model dimension.
    pub dim: usize,
    /// Quadratic: targets held by each node.
    pub samples_per_node: usize,
    /// Quadratic: scale of the per-node target centers.
    pub heterogeneity: f64,
    /// Quadratic: spread of targets around their node's center.
    pub sample_spread: f64,
    /// Quadratic: eigenvalue range of each curvature matrix.
    pub eig_min: f64,
    pub eig_max: f64,
    /// Quadratic: one curvature matrix shared by every node.
    pub shared_curvature: bool,
    pub blobs: BlobSpec,
    pub shards: usize,
    pub hidden: usize,
    pub l2: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Logistic,
            n: 16,
            dim: 10,
            samples_per_node: 32,
            heterogeneity: 1.0,
            sample_spread: 0.5,
            eig_min: 0.5,
            eig_max: 2.0,
            shared_curvature: false,
            blobs: BlobSpec::default(),
            shards: 2,
            hidden: 16,
            l2: 1e-3,
        }
    }
}

/// Closed-form facts about a quadratic task.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInfo {
    pub curvature: Vec<DMatrix<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// Largest eigenvalue of the mean curvature.
    pub smoothness: f64,
    /// Smallest eigenvalue of the mean curvature.
    pub strong_convexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTask {
    pub kind: TaskKind,
    /// For quadratic tasks each "sample" is a target vector and its label
    /// is the owning node.
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub partition: Partition,
    pub quadratic: Option<QuadraticInfo>,
    dim: usize,
    hidden: usize,
    l2: f64,
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    r.sample(StandardNormal)
}

fn random_spd<R: Rng>(dim: usize, lo: f64, hi: f64, r: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| normal(r));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |_, _| lo + (hi - lo) * r.random::<f64>());
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&a + a.transpose()) * 0.5
}

fn quad_value(a: &DMatrix<f64>, x: &[f64], b: &[f64]) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(b).map(|(p, q)| p - q));
    0.5 * d.dot(&(a * &d))
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

fn log_softmax_at(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[y] - lse
}

impl LossTask {
    pub fn build(spec: &TaskSpec, seed: u64) -> Result<Self, LearningError> {
        if spec.n == 0 {
            return Err(LearningError::InvalidSpec("n must be >= 1".into()));
        }
        match spec.kind {
            TaskKind::Quadratic => Self::build_quadratic(spec, seed),
            TaskKind::Logistic | TaskKind::Mlp => {
                if spec.blobs.classes < 2 || spec.blobs.features == 0 {
                    return Err(LearningError::InvalidSpec("need >= 2 classes and >= 1 feature".into()));
                }
                if spec.kind == TaskKind::Mlp && spec.hidden == 0 {
                    return Err(LearningError::InvalidSpec("mlp needs hidden >= 1".into()));
                }
                let (train, test) = gaussian_blobs(&spec.blobs, seed);
                let partition = partition_shards(&train.labels, spec.n, spec.shards, seed)?;
                let (f, c, h) = (spec.blobs.features, spec.blobs.classes, spec.hidden);
                let dim = match spec.kind {
                    TaskKind::Logistic => c * (f + 1),
                    _ => h * (f + 1) + c * (h + 1),
                };
                Ok(Self { kind: spec.kind, train, test: Some(test), partition, quadratic: None, dim, hidden: h, l2: spec.l2 })
            }
        }
    }

    fn build_quadratic(spec: &TaskSpec, seed: u64) -> Result<Self, LearningError> {
        let (n, d, m) = (spec.n, spec.dim, spec.samples_per_node);
        if d == 0 || m == 0 || !(spec.eig_min > 0.0 && spec.eig_max >= spec.eig_min) {
            return Err(LearningError::InvalidSpec("quadratic needs dim, samples > 0 and 0 < eig_min <= eig_max".into()));
        }
        let mut r = rng::stream(seed, Domain::Data, &[u64::MAX]);
        let shared = random_spd(d, spec.eig_min, spec.eig_max, &mut r);
        let curvature: Vec<DMatrix<f64>> = (0..n)
            .map(|_| if spec.shared_curvature { shared.clone() } else { random_spd(d, spec.eig_min, spec.eig_max, &mut r) })
            .collect();
        let mut features = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n * m);
        for a in 0..n {
            let c: Vec<f64> = (0..d).map(|_| spec.heterogeneity * normal(&mut r)).collect();
            for _ in 0..m {
                features.push(c.iter().map(|v| v + spec.sample_spread * normal(&mut r)).collect::<Vec<f64>>());
                labels.push(a);
            }
        }
        let train = Dataset { features, labels, num_classes: n };
        let partition = Partition::contiguous(n, m);

        let means: Vec<DVector<f64>> = (0..n)
            .map(|a| {
                let mut s = DVector::zeros(d);
                for &i in partition.node(a) {
                    s += DVector::from_column_slice(&train.features[i]);
                }
                s / m as f64
            })
            .collect();
        let sum_a = curvature.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a);
        let rhs = curvature.iter().zip(&means).fold(DVector::zeros(d), |acc, (a, b)| acc + a * b);
        let x_star = sum_a.clone().cholesky().ok_or_else(|| LearningError::InvalidSpec("curvature sum not positive definite".into()))?.solve(&rhs);
        let eig = (sum_a / n as f64).symmetric_eigen().eigenvalues;
        let x_star: Vec<f64> = x_star.iter().copied().collect();

        let mut task = Self { kind: TaskKind::Quadratic, train, test: None, partition, quadratic: None, dim: d, hidden: 0, l2: 0.0 };
        let info = QuadraticInfo {
            f_star: 0.0,
            x_star,
            smoothness: eig.max(),
            strong_convexity: eig.min(),
            curvature,
            centers: means.iter().map(|v| v.iter().copied().collect()).collect(),
        };
        task.quadratic = Some(info);
        let f_star = task.objective(&task.quadratic.as_ref().expect("just set").x_star);
        task.quadratic.as_mut().expect("just set").f_star = f_star;
        Ok(task)
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    /// Common starting point for every node.
    pub fn init_model(&self, seed: u64) -> Vec<f64> {
        match self.kind {
            TaskKind::Quadratic | TaskKind::Logistic => vec![0.0; self.dim],
            TaskKind::Mlp => {
                let mut r = rng::stream(seed, Domain::Init, &[]);
                let (f, h, c) = (self.train.num_features(), self.hidden, self.num_classes());
                let mut x = vec![0.0; self.dim];
                let s1 = (1.0 / f as f64).sqrt();
                for v in &mut x[..h * f] {
                    *v = s1 * normal(&mut r);
                }
                let w2 = h * (f + 1);
                let s2 = (1.0 / h as f64).sqrt();
                for v in &mut x[w2..w2 + c * h] {
                    *v = s2 * normal(&mut r);
                }
                x
            }
        }
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        let (f, c, h) = (self.train.num_features(), self.num_classes(), self.hidden);
        let sq: f64 = match self.kind {
            TaskKind::Quadratic => 0.0,
            TaskKind::Logistic => (0..c).flat_map(|k| x[k * (f + 1)..k * (f + 1) + f].iter()).map(|v| v * v).sum(),
            TaskKind::Mlp => x[..h * f].iter().chain(&x[h * (f + 1)..h * (f + 1) + c * h]).map(|v| v * v).sum(),
        };
        0.5 * self.l2 * sq
    }

    fn add_penalty_grad(&self, x: &[f64], g: &mut [f64]) {
        if self.l2 == 0.0 {
            return;
        }
        let (f, c, h) = (self.train.num_features(), self.num_classes(), self.hidden);
        let ranges: Vec<std::ops::Range<usize>> = match self.kind {
            TaskKind::Quadratic => vec![],
            TaskKind::Logistic => (0..c).map(|k| k * (f + 1)..k * (f + 1) + f).collect(),
            TaskKind::Mlp => vec![0..h * f, h * (f + 1)..h * (f + 1) + c * h],
        };
        for r in ranges {
            for i in r {
                g[i] += self.l2 * x[i];
            }
        }
    }

    fn logits(&self, x: &[f64], feat: &[f64], hidden_out: Option<&mut Vec<f64>>) -> Vec<f64> {
        let (f, c) = (feat.len(), self.num_classes());
        match self.kind {
            TaskKind::Logistic => (0..c)
                .map(|k| {
                    let row = &x[k * (f + 1)..(k + 1) * (f + 1)];
                    row[..f].iter().zip(feat).map(|(w, v)| w * v).sum::<f64>() + row[f]
                })
                .collect(),
            TaskKind::Mlp => {
                let h = self.hidden;
                let (b1, w2, b2) = (h * f, h * (f + 1), h * (f + 1) + c * h);
                let act: Vec<f64> = (0..h).map(|j| (x[j * f..(j + 1) * f].iter().zip(feat).map(|(w, v)| w * v).sum::<f64>() + x[b1 + j]).tanh()).collect();
                let z = (0..c).map(|k| x[w2 + k * h..w2 + (k + 1) * h].iter().zip(&act).map(|(w, v)| w * v).sum::<f64>() + x[b2 + k]).collect();
                if let Some(out) = hidden_out {
                    *out = act;
                }
                z
            }
            TaskKind::Quadratic => unreachable!("quadratic tasks have no logits"),
        }
    }

    /// Loss of `x` on sample `i` of `data` (regularization included).
    pub fn sample_loss(&self, x: &[f64], data: &Dataset, i: usize) -> f64 {
        match self.kind {
            TaskKind::Quadratic => {
                let q = self.quadratic.as_ref().expect("quadratic info");
                quad_value(&q.curvature[data.labels[i]], x, &data.features[i])
            }
            _ => -log_softmax_at(&self.logits(x, &data.features[i], None), data.labels[i]) + self.penalty(x),
        }
    }

    pub fn mean_loss(&self, x: &[f64], data: &Dataset, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        match self.kind {
            TaskKind::Quadratic => idx.iter().map(|&i| self.sample_loss(x, data, i)).sum::<f64>() / idx.len() as f64,
            _ => idx.iter().map(|&i| -log_softmax_at(&self.logits(x, &data.features[i], None), data.labels[i])).sum::<f64>() / idx.len() as f64 + self.penalty(x),
        }
    }

    /// Global training objective `(1/n) Σ_a f_a(x)`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|a| self.mean_loss(x, &self.train, self.partition.node(a))).sum::<f64>() / self.n() as f64
    }

    /// Mini-batch gradient of node `a`'s objective at `x`.
    pub fn local_gradient(&self, a: usize, x: &[f64], batch: &[usize]) -> Result<Vec<f64>, LearningError> {
        if batch.is_empty() {
            return Err(LearningError::EmptyBatch);
        }
        let m = batch.len() as f64;
        let mut g = vec![0.0; self.dim];
        match self.kind {
            TaskKind::Quadratic => {
                let q = self.quadratic.as_ref().expect("quadratic info");
                let mut diff = DVector::zeros(self.dim);
                for &i in batch {
                    for (k, d) in diff.iter_mut().enumerate() {
                        *d += (x[k] - self.train.features[i][k]) / m;
                    }
                }
                let ga = &q.curvature[a] * diff;
                g.copy_from_slice(ga.as_slice());
            }
            TaskKind::Logistic => {
                let f = self.train.num_features();
                for &i in batch {
                    let feat = &self.train.features[i];
                    let mut p = self.logits(x, feat, None);
                    softmax_in_place(&mut p);
                    p[self.train.labels[i]] -= 1.0;
                    for (k, pk) in p.iter().enumerate() {
                        let row = &mut g[k * (f + 1)..(k + 1) * (f + 1)];
                        for (r, v) in row.iter_mut().zip(feat) {
                            *r += pk * v / m;
                        }
                        row[f] += pk / m;
                    }
                }
                self.add_penalty_grad(x, &mut g);
            }
            TaskKind::Mlp => {
                let (f, h, c) = (self.train.num_features(), self.hidden, self.num_classes());
                let (b1, w2, b2) = (h * f, h * (f + 1), h * (f + 1) + c * h);
                let mut act = Vec::new();
                for &i in batch {
                    let feat = &self.train.features[i];
                    let mut p = self.logits(x, feat, Some(&mut act));
                    softmax_in_place(&mut p);
                    p[self.train.labels[i]] -= 1.0;
                    let mut dh = vec![0.0; h];
                    for (k, pk) in p.iter().enumerate() {
                        for j in 0..h {
                            g[w2 + k * h + j] += pk * act[j] / m;
                            dh[j] += x[w2 + k * h + j] * pk;
                        }
                        g[b2 + k] += pk / m;
                    }
                    for j in 0..h {
                        let da = dh[j] * (1.0 - act[j] * act[j]);
                        for (t, v) in feat.iter().enumerate() {
                            g[j * f + t] += da * v / m;
                        }
                        g[b1 + j] += da / m;
                    }
                }
                self.add_penalty_grad(x, &mut g);
            }
        }
        Ok(g)
    }

    pub fn predict(&self, x: &[f64], feat: &[f64]) -> usize {
        let z = self.logits(x, feat, None);
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    /// Test accuracy; `None` for tasks without labels.
    pub fn accuracy(&self, x: &[f64]) -> Option<f64> {
        let test = self.test.as_ref()?;
        if self.kind == TaskKind::Quadratic || test.is_empty() {
            return None;
        }
        let hits = (0..test.len()).filter(|&i| self.predict(x, &test.features[i]) == test.labels[i]).count();
        Some(hits as f64 / test.len() as f64)
    }

    /// `‖x − x*‖²` for quadratic tasks.
    pub fn distance_to_optimum(&self, x: &[f64]) -> Option<f64> {
        self.quadratic.as_ref().map(|q| q.x_star.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum())
    }
}
