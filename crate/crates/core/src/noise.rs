//! Correlated zero-sum noise.
//!
//! Node `a` draws one intermediate Gaussian `Y_{a→v} ~ N(0, η²σ_a²)` per
//! closed neighbor `v` (and per coordinate), then removes a weighted share of
//! their sum so that `Σ_v W[a,v]·Z_{a→v} = 0`:
//!
//! ```text
//! Z_{a→v} = Y_{a→v} − (1 / (d_a·W[a,v])) · Σ_{j∈N_a} W[a,j]·Y_{a→j}
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};
use crate::topology::GossipMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise plan: {0}")]
    InvalidPlan(String),
    #[error("node {0} out of range")]
    UnknownNode(usize),
    #[error("W[{a},{v}] is zero for a listed neighbor")]
    ZeroWeight { a: usize, v: usize },
    #[error("{v} is not in the closed neighborhood of {a}")]
    NotNeighbor { a: usize, v: usize },
    #[error("covariance needs two distinct destinations, got {0} twice")]
    SameDestination(usize),
}

/// Per-node privacy scales `σ_a`, the stepsize `η`, and the model dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    sigma: Vec<f64>,
    eta: f64,
    dim: usize,
}

impl NoisePlan {
    pub fn new(sigma: Vec<f64>, eta: f64, dim: usize) -> Result<Self, NoiseError> {
        if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(NoiseError::InvalidPlan(format!("sigma must be finite and >= 0, got {bad}")));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(NoiseError::InvalidPlan(format!("eta must be > 0, got {eta}")));
        }
        Ok(Self { sigma, eta, dim })
    }

    pub fn uniform(n: usize, sigma: f64, eta: f64, dim: usize) -> Result<Self, NoiseError> {
        Self::new(vec![sigma; n], eta, dim)
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    /// Standard deviation `η·σ_a` of the intermediate noises of node `a`.
    pub fn std_dev(&self, a: usize) -> f64 {
        self.eta * self.sigma[a]
    }

    /// Variance `η²σ_a²`.
    pub fn variance(&self, a: usize) -> f64 {
        let s = self.std_dev(a);
        s * s
    }

    /// Same plan with every `σ_a` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, NoiseError> {
        Self::new(self.sigma.iter().map(|s| s * factor).collect(), self.eta, self.dim)
    }

    /// Same plan with every `σ_a` multiplied by its own factor.
    pub fn scaled_per_node(&self, factors: &[f64]) -> Result<Self, NoiseError> {
        Self::new(self.sigma.iter().zip(factors).map(|(s, f)| s * f).collect(), self.eta, self.dim)
    }
}

/// Noises node `owner` attaches to the copies of its model sent to each
/// member of its closed neighborhood. Vectors are stored destination-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub owner: usize,
    pub destinations: Vec<usize>,
    pub dim: usize,
    intermediate: Vec<f64>,
    correlated: Vec<f64>,
}

impl NoiseBundle {
    fn position(&self, v: usize) -> Option<usize> {
        self.destinations.binary_search(&v).ok()
    }

    /// `Y_{owner→v}`.
    pub fn intermediate_for(&self, v: usize) -> Option<&[f64]> {
        self.position(v).map(|i| &self.intermediate[i * self.dim..(i + 1) * self.dim])
    }

    /// `Z_{owner→v}`.
    pub fn correlated_for(&self, v: usize) -> Option<&[f64]> {
        self.position(v).map(|i| &self.correlated[i * self.dim..(i + 1) * self.dim])
    }

    pub fn correlated(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.destinations.iter().copied().zip(self.correlated.chunks_exact(self.dim.max(1)))
    }

    /// Largest `|Σ_v W[owner,v]·Z_{owner→v}|` over coordinates.
    pub fn weighted_sum_residual(&self, w: &GossipMatrix) -> f64 {
        (0..self.dim)
            .map(|c| {
                self.destinations
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| w.weight(self.owner, v) * self.correlated[i * self.dim + c])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs_intermediate(&self) -> f64 {
        self.intermediate.iter().fold(0.0, |m, y| m.max(y.abs()))
    }
}

/// Stream used for node `a`'s noise at `round`.
pub fn noise_stream(seed: u64, a: usize, round: u64) -> rng::Stream {
    rng::stream(seed, Domain::ZipNoise, &[a as u64, round])
}

/// Draws `Y` for every closed neighbor of `a` and derives the zero-sum `Z`.
pub fn draw_bundle<R: Rng + ?Sized>(a: usize, w: &GossipMatrix, plan: &NoisePlan, rng: &mut R) -> Result<NoiseBundle, NoiseError> {
    if a >= w.n() || a >= plan.n() {
        return Err(NoiseError::UnknownNode(a));
    }
    let destinations = w.neighbors(a).to_vec();
    let weights: Vec<f64> = destinations.iter().map(|&v| w.weight(a, v)).collect();
    if let Some(i) = weights.iter().position(|&x| x == 0.0) {
        return Err(NoiseError::ZeroWeight { a, v: destinations[i] });
    }
    let dim = plan.dim();
    let d = destinations.len() as f64;
    let scale = plan.std_dev(a);

    let mut intermediate = Vec::with_capacity(destinations.len() * dim);
    for _ in 0..destinations.len() * dim {
        let z: f64 = rng.sample(StandardNormal);
        intermediate.push(scale * z);
    }

    let mut correlated = vec![0.0; intermediate.len()];
    for c in 0..dim {
        let weighted: f64 = weights.iter().enumerate().map(|(i, wj)| wj * intermediate[i * dim + c]).sum();
        for (i, wv) in weights.iter().enumerate() {
            correlated[i * dim + c] = intermediate[i * dim + c] - weighted / (d * wv);
        }
    }
    Ok(NoiseBundle { owner: a, destinations, dim, intermediate, correlated })
}

fn check_neighbor(a: usize, v: usize, w: &GossipMatrix) -> Result<(), NoiseError> {
    if a >= w.n() {
        return Err(NoiseError::UnknownNode(a));
    }
    if v >= w.n() || !w.is_neighbor(a, v) {
        return Err(NoiseError::NotNeighbor { a, v });
    }
    Ok(())
}

/// Closed-form `ζ²_{a→v} = Var(Z_{a→v})` (per coordinate):
/// `[(d_a−1)²/d_a² + Σ_{j≠v} W[a,j]² / (d_a·W[a,v])²]·η²σ_a²`.
pub fn zsum_variance(a: usize, v: usize, w: &GossipMatrix, plan: &NoisePlan) -> Result<f64, NoiseError> {
    check_neighbor(a, v, w)?;
    let d = w.closed_degree(a) as f64;
    let wv = w.weight(a, v);
    let others: f64 = w.neighbors(a).iter().filter(|&&j| j != v).map(|&j| w.weight(a, j).powi(2)).sum();
    let factor = (d - 1.0).powi(2) / (d * d) + others / (d * wv).powi(2);
    Ok(factor * plan.variance(a))
}

/// Closed-form `Cov(Z_{a→v}, Z_{a→v2})` for two distinct destinations:
/// `[(Σ_k W[a,k]² − d_a(W[a,v]² + W[a,v2]²)) / (d_a·W[a,v]·W[a,v2])]·η²σ_a²/d_a`.
pub fn zsum_covariance(a: usize, v: usize, v2: usize, w: &GossipMatrix, plan: &NoisePlan) -> Result<f64, NoiseError> {
    check_neighbor(a, v, w)?;
    check_neighbor(a, v2, w)?;
    if v == v2 {
        return Err(NoiseError::SameDestination(v));
    }
    let d = w.closed_degree(a) as f64;
    let (wv, wv2) = (w.weight(a, v), w.weight(a, v2));
    let total: f64 = w.neighbors(a).iter().map(|&k| w.weight(a, k).powi(2)).sum();
    let factor = (total - d * (wv * wv + wv2 * wv2)) / (d * wv * wv2);
    Ok(factor * plan.variance(a) / d)
}

/// Outcome of a Monte-Carlo comparison between sampled noise moments and
/// the closed forms.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub label: String,
    pub closed_form: f64,
    pub estimate: f64,
    pub standard_error: f64,
}

impl MomentCheck {
    /// Within `z` standard errors.
    pub fn passes(&self, z: f64) -> bool {
        (self.estimate - self.closed_form).abs() <= z * self.standard_error
    }
}

/// Samples `draws` bundles for node `a` (scalar model) and checks
/// `Var(Z_{a→v})` for every destination plus `Cov(Z_{a→v}, Z_{a→v2})` for
/// the first two distinct destinations, and the mean of `Z_{a→v}`.
pub fn monte_carlo_moments(a: usize, w: &GossipMatrix, plan: &NoisePlan, draws: usize, seed: u64) -> Result<Vec<MomentCheck>, NoiseError> {
    let scalar = NoisePlan::new(plan.sigma().to_vec(), plan.eta(), 1)?;
    let dests = w.neighbors(a).to_vec();
    let k = dests.len();
    let mut samples = vec![Vec::with_capacity(draws); k];
    let mut rng = rng::stream(seed, Domain::ZipNoise, &[u64::MAX, a as u64]);
    for _ in 0..draws {
        let b = draw_bundle(a, w, &scalar, &mut rng)?;
        for (i, (_, z)) in b.correlated().enumerate() {
            samples[i].push(z[0]);
        }
    }
    let m = draws as f64;
    let mut out = Vec::new();
    for (i, &v) in dests.iter().enumerate() {
        let xs = &samples[i];
        let mean = xs.iter().sum::<f64>() / m;
        // Known zero mean: second moment estimates the variance directly.
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let var_hat = sq.iter().sum::<f64>() / m;
        let var_se = (sq.iter().map(|s| (s - var_hat).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
        out.push(MomentCheck {
            label: format!("var Z[{a}->{v}]"),
            closed_form: zsum_variance(a, v, w, &scalar)?,
            estimate: var_hat,
            standard_error: var_se,
        });
        out.push(MomentCheck {
            label: format!("mean Z[{a}->{v}]"),
            closed_form: 0.0,
            estimate: mean,
            standard_error: (var_hat / m).sqrt(),
        });
    }
    if k >= 2 {
        let (x, y) = (&samples[0], &samples[1]);
        let prods: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let cov_hat = prods.iter().sum::<f64>() / m;
        let cov_se = (prods.iter().map(|p| (p - cov_hat).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
        out.push(MomentCheck {
            label: format!("cov Z[{a}->{}],Z[{a}->{}]", dests[0], dests[1]),
            closed_form: zsum_covariance(a, dests[0], dests[1], w, &scalar)?,
            estimate: cov_hat,
            standard_error: cov_se,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_gossip_matrix, generate_k_regular, Graph, WeightScheme};
    use proptest::prelude::*;

    fn plan(n: usize, sigma: f64, eta: f64, dim: usize) -> NoisePlan {
        NoisePlan::uniform(n, sigma, eta, dim).unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(NoisePlan::new(vec![1.0, -1.0], 0.1, 1).is_err());
        assert!(NoisePlan::new(vec![1.0], 0.0, 1).is_err());
        assert!(NoisePlan::new(vec![0.0], 0.5, 1).is_ok());
    }

    #[test]
    fn lone_node_gets_zero_noise() {
        let w = GossipMatrix::identity(3);
        let b = draw_bundle(1, &w, &plan(3, 2.0, 0.5, 4), &mut noise_stream(1, 1, 0)).unwrap();
        assert_eq!(b.destinations, vec![1]);
        assert!(b.correlated_for(1).unwrap().iter().all(|&z| z == 0.0));
        assert_eq!(zsum_variance(1, 1, &w, &plan(3, 2.0, 0.5, 4)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_correction_is_plain_mean() {
        // Y = (3, 0, 0) on a uniform triangle: correction = mean(Y) = 1.
        let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
        let mut b = NoiseBundle { owner: 0, destinations: vec![0, 1, 2], dim: 1, intermediate: vec![3.0, 0.0, 0.0], correlated: vec![0.0; 3] };
        let weighted: f64 = (0..3).map(|i| w.weight(0, i) * b.intermediate[i]).sum();
        for i in 0..3 {
            b.correlated[i] = b.intermediate[i] - weighted / (3.0 * w.weight(0, i));
        }
        let expect = [2.0, -1.0, -1.0];
        for i in 0..3 {
            assert!((b.correlated[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn regular_variance_and_covariance() {
        let g = generate_k_regular(10, 4, 2).unwrap();
        let w = build_gossip_matrix(&g, WeightScheme::Uniform).unwrap();
        let p = plan(10, 1.5, 0.2, 1);
        let s2 = 0.2f64.powi(2) * 1.5f64.powi(2);
        for &v in w.neighbors(3) {
            assert!((zsum_variance(3, v, &w, &p).unwrap() - 4.0 / 5.0 * s2).abs() < 1e-15);
        }
        let nb = w.neighbors(3);
        assert!((zsum_covariance(3, nb[0], nb[1], &w, &p).unwrap() + s2 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn mh_path_middle_node() {
        let w = build_gossip_matrix(&Graph::path(3), WeightScheme::MetropolisHastings).unwrap();
        let p = plan(3, 1.0, 1.0, 1);
        assert!((zsum_variance(1, 0, &w, &p).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        for check in monte_carlo_moments(1, &w, &p, 100_000, 8).unwrap() {
            assert!(check.passes(3.0), "{check:?}");
        }
    }

    #[test]
    fn zero_sigma_gives_zero_covariance() {
        let w = build_gossip_matrix(&Graph::complete(4), WeightScheme::Uniform).unwrap();
        assert_eq!(zsum_covariance(0, 1, 2, &w, &plan(4, 0.0, 0.3, 1)).unwrap(), 0.0);
    }

    #[test]
    fn error_paths() {
        let w = build_gossip_matrix(&Graph::path(4), WeightScheme::MetropolisHastings).unwrap();
        let p = plan(4, 1.0, 1.0, 1);
        assert_eq!(zsum_variance(0, 3, &w, &p), Err(NoiseError::NotNeighbor { a: 0, v: 3 }));
        assert_eq!(zsum_covariance(1, 2, 2, &w, &p), Err(NoiseError::SameDestination(2)));
        assert_eq!(zsum_covariance(1, 0, 3, &w, &p), Err(NoiseError::NotNeighbor { a: 1, v: 3 }));
    }

    #[test]
    fn scaling_sigma_scales_noise() {
        let g = generate_k_regular(8, 3, 4).unwrap();
        let w = build_gossip_matrix(&g, WeightScheme::MetropolisHastings).unwrap();
        let base = plan(8, 0.7, 0.1, 5);
        let b1 = draw_bundle(2, &w, &base, &mut noise_stream(5, 2, 3)).unwrap();
        for c in [2.0, 0.5, 3.3] {
            let b2 = draw_bundle(2, &w, &base.scaled(c).unwrap(), &mut noise_stream(5, 2, 3)).unwrap();
            for ((_, z1), (_, z2)) in b1.correlated().zip(b2.correlated()) {
                for (x, y) in z1.iter().zip(z2) {
                    if c == 2.0 || c == 0.5 {
                        assert_eq!(*y, c * x);
                    } else {
                        assert!((y - c * x).abs() <= 1e-12 * (1.0 + (c * x).abs()));
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn bundles_are_zero_sum(n in 3usize..20, seed in any::<u64>(), sigma in 0.0f64..10.0, eta in 0.001f64..2.0, mh in any::<bool>()) {
            let k = if n % 2 == 0 { 3.min(n - 1) } else { 2 };
            let g = generate_k_regular(n, k, seed).unwrap();
            let w = build_gossip_matrix(&g, if mh { WeightScheme::MetropolisHastings } else { WeightScheme::Uniform }).unwrap();
            let p = NoisePlan::uniform(n, sigma, eta, 3).unwrap();
            for a in 0..n {
                let b = draw_bundle(a, &w, &p, &mut noise_stream(seed, a, 0)).unwrap();
                let tol = 1e-10 * w.closed_degree(a) as f64 * b.max_abs_intermediate();
                prop_assert!(b.weighted_sum_residual(&w) <= tol);
                prop_assert!(b.correlated().all(|(_, z)| z.iter().all(|x| x.is_finite())));
            }
        }
    }
}
