//! Pairwise network privacy accounting.
//!
//! Every node `a` is split into `n` virtual nodes `idx(a,j) = n·a + j`, one
//! per potential destination. In that space the per-destination noises
//! become a linear map of independent Gaussians (`Ẑ = C·Ŷ`) and one round of
//! averaging becomes `x̂′ = M·Ŵ·(x̂ + Ẑ)`.
//!
//! All rows of `(M·Ŵ)^s` belonging to the same real node coincide, and they
//! equal `W^{s−1}·R` where `R` holds one representative row of `M·Ŵ` per
//! node. The accumulated noise covariance seen by any virtual node of `w`
//! after `h` rounds is therefore `Σ_{s=1}^{h} (W^{s−1}·G·W^{s−1 ᵀ})[w,w]`
//! with `G = (R·C)·Σ_Y·(R·C)ᵀ`, an `n×n` matrix.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::noise::{zsum_variance, NoiseError, NoisePlan};
use crate::topology::GossipMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid privacy parameters: {0}")]
    InvalidParams(String),
    #[error("target node {0} is among the colluders")]
    TargetInColluders(usize),
    #[error("colluder set is empty")]
    EmptyColluders,
    #[error("node {0} out of range")]
    UnknownNode(usize),
    #[error("stepsize too large: eta*L = {0} must be < 1")]
    InvalidStepsize(f64),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Rényi order, `> 1`.
    pub alpha: f64,
    /// Sensitivity `Δ`.
    pub delta: f64,
    pub eta: f64,
    /// Smoothness constant `L`.
    pub smoothness: f64,
    pub sigma: Vec<f64>,
    pub rounds: usize,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<(), AccountantError> {
        let bad = |m: String| Err(AccountantError::InvalidParams(m));
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 1, got {}", self.alpha));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return bad(format!("smoothness must be > 0, got {}", self.smoothness));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma entries must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn noise_plan(&self) -> Result<NoisePlan, AccountantError> {
        Ok(NoisePlan::new(self.sigma.clone(), self.eta, 1)?)
    }

    fn scale(&self) -> f64 {
        self.alpha * self.delta * self.delta
    }
}

/// Which correlation the virtual system models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// Zero-sum correlated noise.
    ZipDl,
    /// Independent noise (`C = I`).
    Identity,
}

/// How the numerator of the averaging bound indexes the matrix power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumeratorPower {
    /// `(W^{t+1})[w,a]` inside the sum over `t`.
    Horizon,
    /// `(W^T)[w,a]` for every term.
    Final,
}

#[derive(Debug, Clone)]
pub struct VirtualSystem {
    pub n: usize,
    pub w_hat: CsMat<f64>,
    pub m: CsMat<f64>,
    pub c: CsMat<f64>,
    /// Diagonal of `Σ_Y`.
    pub sigma_y: Vec<f64>,
    pub correlation: Correlation,
    w: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
}

/// Index of the virtual node of `i` associated with `j`.
pub fn virtual_index(n: usize, i: usize, j: usize) -> usize {
    n * i + j
}

pub fn build_virtual(w: &GossipMatrix, params: &PrivacyParams) -> Result<VirtualSystem, AccountantError> {
    VirtualSystem::build(w, params, Correlation::ZipDl)
}

impl VirtualSystem {
    pub fn build(w: &GossipMatrix, params: &PrivacyParams, correlation: Correlation) -> Result<Self, AccountantError> {
        params.validate()?;
        let n = w.n();
        if params.sigma.len() != n {
            return Err(AccountantError::InvalidParams(format!("{} sigma values for {n} nodes", params.sigma.len())));
        }
        let nn = n * n;
        let idx = |i, j| virtual_index(n, i, j);

        let mut t = TriMat::new((nn, nn));
        for i in 0..n {
            for &j in w.neighbors(i) {
                t.add_triplet(idx(i, j), idx(j, i), w.weight(i, j));
            }
        }
        let w_hat = t.to_csr();

        let mut t = TriMat::new((nn, nn));
        for a in 0..n {
            for r in 0..n {
                for c in 0..n {
                    t.add_triplet(idx(a, r), idx(a, c), 1.0);
                }
            }
        }
        let m = t.to_csr();

        let c = match correlation {
            Correlation::Identity => CsMat::eye(nn),
            Correlation::ZipDl => {
                let mut t = TriMat::new((nn, nn));
                for a in 0..n {
                    let d = w.closed_degree(a) as f64;
                    for &v in w.neighbors(a) {
                        for &j in w.neighbors(a) {
                            let value = if j == v { (d - 1.0) / d } else { -w.weight(a, j) / (d * w.weight(a, v)) };
                            t.add_triplet(idx(a, v), idx(a, j), value);
                        }
                    }
                }
                t.to_csr()
            }
        };

        let sigma_y = (0..nn).map(|k| (params.eta * params.sigma[k / n]).powi(2)).collect();
        Ok(Self { n, w_hat, m, c, sigma_y, correlation, w: w.to_dmatrix(), neighbors: (0..n).map(|a| w.neighbors(a).to_vec()).collect() })
    }

    pub fn gossip(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `x̂` with `x̂[idx(i,k)] = x[i]` for every `k`.
    pub fn duplicate(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n * self.n).map(|k| x[k / self.n]).collect()
    }

    /// `M·Ŵ`.
    pub fn mixing(&self) -> CsMat<f64> {
        &self.m * &self.w_hat
    }

    pub fn apply(mat: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
        mat.outer_iterator().map(|row| row.iter().map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `diag(C·Σ_Y·Cᵀ)`: variance of every virtual noise.
    pub fn noise_variance_diag(&self) -> Vec<f64> {
        self.c.outer_iterator().map(|row| row.iter().map(|(j, v)| v * v * self.sigma_y[j]).sum()).collect()
    }

    /// `G = (R·C)·Σ_Y·(R·C)ᵀ` (see module docs).
    fn base_covariance(&self) -> DMatrix<f64> {
        let n = self.n;
        let mw = self.mixing();
        let mut t = TriMat::new((n, n * n));
        for w in 0..n {
            if let Some(row) = mw.outer_view(virtual_index(n, w, 0)) {
                for (j, v) in row.iter() {
                    t.add_triplet(w, j, *v);
                }
            }
        }
        let r: CsMat<f64> = t.to_csr();
        let q = &r * &self.c;
        let mut dense = vec![0.0; n * n];
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            let qi = q.outer_view(i).expect("row in range");
            for (k, v) in qi.iter() {
                dense[k] = v * self.sigma_y[k];
            }
            for j in 0..n {
                let qj = q.outer_view(j).expect("row in range");
                g[(i, j)] = qj.iter().map(|(k, v)| v * dense[k]).sum();
            }
            for (k, _) in qi.iter() {
                dense[k] = 0.0;
            }
        }
        g
    }

    /// Per-node accumulated noise variances `D_h` for `h = 1..=horizon`,
    /// where round `s` is weighted by `decay^s` (1 for plain averaging).
    pub fn accumulated_variances(&self, horizon: usize, decay: f64) -> Vec<Vec<f64>> {
        let mut k = self.base_covariance();
        let mut acc = vec![0.0; self.n];
        let mut factor = 1.0;
        let mut out = Vec::with_capacity(horizon);
        for s in 1..=horizon {
            factor *= decay;
            for (i, a) in acc.iter_mut().enumerate() {
                *a += factor * k[(i, i)];
            }
            out.push(acc.clone());
            if s < horizon {
                k = &self.w * k * self.w.transpose();
            }
        }
        out
    }

    /// `W^h` for `h = 1..=horizon`.
    fn powers(&self, horizon: usize) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let next = if h == 0 { self.w.clone() } else { &out[h - 1] * &self.w };
            out.push(next);
        }
        out
    }

    fn check_colluders(&self, a: usize, colluders: &[usize]) -> Result<(), AccountantError> {
        if a >= self.n {
            return Err(AccountantError::UnknownNode(a));
        }
        if colluders.is_empty() {
            return Err(AccountantError::EmptyColluders);
        }
        if let Some(&v) = colluders.iter().find(|&&v| v >= self.n) {
            return Err(AccountantError::UnknownNode(v));
        }
        if colluders.contains(&a) {
            return Err(AccountantError::TargetInColluders(a));
        }
        Ok(())
    }
}

/// `num/den` with `0/0 = 0` and `x/0 = +∞`.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Single-round bound `αΔ²/(4ζ²_{a→v})` for a neighbor `v ≠ a`, else 0.
pub fn single_round_bound(a: usize, v: usize, w: &GossipMatrix, params: &PrivacyParams) -> Result<f64, AccountantError> {
    params.validate()?;
    if a >= w.n() || v >= w.n() {
        return Err(AccountantError::UnknownNode(a.max(v)));
    }
    if a == v || !w.is_neighbor(a, v) {
        return Ok(0.0);
    }
    let zeta2 = zsum_variance(a, v, w, &params.noise_plan()?)?;
    Ok(ratio(params.scale(), 4.0 * zeta2))
}

/// `(αΔ²/2) Σ_{v,v′∈V} 1[a∈N_v∩N_v′] / (ζ²_{a→v} + ζ²_{a→v′})` over ordered pairs.
pub fn colluder_bound(a: usize, colluders: &[usize], w: &GossipMatrix, params: &PrivacyParams) -> Result<f64, AccountantError> {
    params.validate()?;
    if a >= w.n() {
        return Err(AccountantError::UnknownNode(a));
    }
    if colluders.is_empty() {
        return Err(AccountantError::EmptyColluders);
    }
    if colluders.contains(&a) {
        return Err(AccountantError::TargetInColluders(a));
    }
    let plan = params.noise_plan()?;
    let zeta: Vec<Option<f64>> = colluders
        .iter()
        .map(|&v| if v < w.n() && w.is_neighbor(a, v) { zsum_variance(a, v, w, &plan).map(Some) } else { Ok(None) })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for z1 in zeta.iter().flatten() {
        for z2 in zeta.iter().flatten() {
            total += ratio(1.0, z1 + z2);
        }
    }
    Ok(0.5 * params.scale() * total)
}

/// Horizon-indexed denominators and gossip powers shared by all pairs.
struct Terms {
    dens: Vec<Vec<f64>>,
    pows: Vec<DMatrix<f64>>,
}

impl Terms {
    fn new(vs: &VirtualSystem, rounds: usize, decay: f64) -> Self {
        Self { dens: vs.accumulated_variances(rounds, decay), pows: vs.powers(rounds) }
    }

    fn sum(&self, a: usize, colluders: &[usize], vs: &VirtualSystem, numerator: impl Fn(usize, &[DMatrix<f64>], usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for t in 0..self.dens.len() {
            for &v in colluders {
                for &w in &vs.neighbors[v] {
                    total += ratio(numerator(t, &self.pows, w, a), self.dens[t][w]);
                }
            }
        }
        total
    }
}

fn averaging_sum(a: usize, colluders: &[usize], vs: &VirtualSystem, terms: &Terms, power: NumeratorPower) -> f64 {
    let last = terms.pows.len().saturating_sub(1);
    terms.sum(a, colluders, vs, |t, pows, w, a| match power {
        NumeratorPower::Horizon => pows[t][(w, a)],
        NumeratorPower::Final => pows[last][(w, a)],
    })
}

fn sgd_growth(params: &PrivacyParams) -> Result<f64, AccountantError> {
    let (eta, l) = (params.eta, params.smoothness);
    if eta * l >= 1.0 {
        return Err(AccountantError::InvalidStepsize(eta * l));
    }
    Ok(2.0 + 4.0 * eta * eta * l)
}

fn sgd_prefactor(params: &PrivacyParams) -> f64 {
    let (eta, l) = (params.eta, params.smoothness);
    2.0 * params.alpha * eta * eta * params.delta * params.delta / (l + 4.0 * eta * eta * l * l)
}

// Term t of the SGD bound uses the covariance accumulated over rounds 1..=t;
// t = 0 has a zero numerator and is skipped, so `terms` covers t = 1..T-1.
fn sgd_sum(a: usize, colluders: &[usize], vs: &VirtualSystem, terms: &Terms, growth: f64) -> f64 {
    terms.sum(a, colluders, vs, |t, _, _, _| growth.powi(t as i32 + 1) - 1.0)
}

/// Bound after `rounds` rounds of noisy averaging.
pub fn averaging_bound(a: usize, colluders: &[usize], vs: &VirtualSystem, params: &PrivacyParams, rounds: usize) -> Result<f64, AccountantError> {
    averaging_bound_with(a, colluders, vs, params, rounds, NumeratorPower::Horizon)
}

pub fn averaging_bound_with(a: usize, colluders: &[usize], vs: &VirtualSystem, params: &PrivacyParams, rounds: usize, power: NumeratorPower) -> Result<f64, AccountantError> {
    params.validate()?;
    vs.check_colluders(a, colluders)?;
    let terms = Terms::new(vs, rounds, 1.0);
    Ok(0.5 * params.scale() * averaging_sum(a, colluders, vs, &terms, power))
}

/// Same as [`averaging_bound`]; `vs` must be built with [`Correlation::Identity`].
pub fn muffliato_bound(a: usize, colluders: &[usize], vs: &VirtualSystem, params: &PrivacyParams, rounds: usize) -> Result<f64, AccountantError> {
    if vs.correlation != Correlation::Identity {
        return Err(AccountantError::InvalidParams("muffliato bound needs an identity-correlation system".into()));
    }
    averaging_bound(a, colluders, vs, params, rounds)
}

/// Bound after `rounds` iterations of noisy SGD with averaging.
pub fn sgd_bound(a: usize, colluders: &[usize], vs: &VirtualSystem, params: &PrivacyParams, rounds: usize) -> Result<f64, AccountantError> {
    params.validate()?;
    let growth = sgd_growth(params)?;
    vs.check_colluders(a, colluders)?;
    let terms = Terms::new(vs, rounds.saturating_sub(1), 1.0 - params.eta * params.smoothness);
    Ok(sgd_prefactor(params) * sgd_sum(a, colluders, vs, &terms, growth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    SingleRound,
    Averaging,
    AveragingFinalPower,
    Muffliato,
    Sgd,
}

impl BoundKind {
    pub const ALL: [BoundKind; 5] = [Self::SingleRound, Self::Averaging, Self::AveragingFinalPower, Self::Muffliato, Self::Sgd];
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleRound => "single_round",
            Self::Averaging => "averaging",
            Self::AveragingFinalPower => "averaging_final_power",
            Self::Muffliato => "muffliato",
            Self::Sgd => "sgd",
        })
    }
}

impl std::str::FromStr for BoundKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.to_string() == s).ok_or_else(|| format!("unknown bound kind '{s}'"))
    }
}

/// `eps[a][v]`: loss from `a` to `v`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonMatrix {
    pub kind: BoundKind,
    pub rounds: usize,
    pub eps: Vec<Vec<f64>>,
}

impl EpsilonMatrix {
    pub fn n(&self) -> usize {
        self.eps.len()
    }

    /// `(1/n) Σ_{u≠v} eps[u][v]`.
    pub fn mean_to(&self, v: usize) -> f64 {
        mean_loss_to(v, &self.eps)
    }
}

pub fn mean_loss_to(v: usize, eps: &[Vec<f64>]) -> f64 {
    let n = eps.len();
    (0..n).filter(|&u| u != v).map(|u| eps[u][v]).sum::<f64>() / n as f64
}

/// Every pairwise bound of one kind.
pub fn epsilon_matrix(w: &GossipMatrix, params: &PrivacyParams, kind: BoundKind) -> Result<EpsilonMatrix, AccountantError> {
    params.validate()?;
    let n = w.n();
    let rounds = params.rounds;
    let mut eps = vec![vec![0.0; n]; n];
    if kind == BoundKind::SingleRound {
        for (a, row) in eps.iter_mut().enumerate() {
            for (v, e) in row.iter_mut().enumerate() {
                *e = single_round_bound(a, v, w, params)?;
            }
        }
        return Ok(EpsilonMatrix { kind, rounds, eps });
    }
    let correlation = if kind == BoundKind::Muffliato { Correlation::Identity } else { Correlation::ZipDl };
    let vs = VirtualSystem::build(w, params, correlation)?;
    let (terms, growth) = if kind == BoundKind::Sgd {
        let g = sgd_growth(params)?;
        (Terms::new(&vs, rounds.saturating_sub(1), 1.0 - params.eta * params.smoothness), g)
    } else {
        (Terms::new(&vs, rounds, 1.0), 0.0)
    };
    for (a, row) in eps.iter_mut().enumerate() {
        for (v, e) in row.iter_mut().enumerate() {
            if a == v {
                continue;
            }
            *e = match kind {
                BoundKind::Averaging | BoundKind::Muffliato => 0.5 * params.scale() * averaging_sum(a, &[v], &vs, &terms, NumeratorPower::Horizon),
                BoundKind::AveragingFinalPower => 0.5 * params.scale() * averaging_sum(a, &[v], &vs, &terms, NumeratorPower::Final),
                BoundKind::Sgd => sgd_prefactor(params) * sgd_sum(a, &[v], &vs, &terms, growth),
                BoundKind::SingleRound => unreachable!("handled above"),
            };
        }
    }
    Ok(EpsilonMatrix { kind, rounds, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_gossip_matrix, Graph, WeightScheme};

    fn params(n: usize, sigma: f64) -> PrivacyParams {
        PrivacyParams { alpha: 2.0, delta: 1.0, eta: 0.1, smoothness: 1.0, sigma: vec![sigma; n], rounds: 3 }
    }

    #[test]
    fn single_round_examples() {
        // Uniform triangle, eta=1: zeta² = (2/3)σ²; σ² = 3/4 gives zeta² = 0.5.
        let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
        let p = PrivacyParams { eta: 1.0, sigma: vec![0.75f64.sqrt(); 3], ..params(3, 1.0) };
        assert!((single_round_bound(0, 1, &w, &p).unwrap() - 1.0).abs() < 1e-12);
        let path = build_gossip_matrix(&Graph::path(3), WeightScheme::MetropolisHastings).unwrap();
        assert_eq!(single_round_bound(0, 2, &path, &params(3, 1.0)).unwrap(), 0.0);
        assert_eq!(single_round_bound(0, 1, &path, &params(3, 0.0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn colluder_examples() {
        let path = build_gossip_matrix(&Graph::path(4), WeightScheme::MetropolisHastings).unwrap();
        assert_eq!(colluder_bound(0, &[2, 3], &path, &params(4, 1.0)).unwrap(), 0.0);
        assert_eq!(colluder_bound(0, &[0, 1], &path, &params(4, 1.0)), Err(AccountantError::TargetInColluders(0)));
        assert_eq!(colluder_bound(0, &[], &path, &params(4, 1.0)), Err(AccountantError::EmptyColluders));
    }

    #[test]
    fn virtual_index_map_two_nodes() {
        let w = build_gossip_matrix(&Graph::complete(2), WeightScheme::Uniform).unwrap();
        let vs = build_virtual(&w, &params(2, 1.0)).unwrap();
        let expect = [(0, 0), (1, 2), (2, 1), (3, 3)];
        assert_eq!(vs.w_hat.nnz(), 4);
        for (r, c) in expect {
            assert_eq!(vs.w_hat.get(r, c), Some(&0.5));
        }
    }

    #[test]
    fn sgd_rejects_large_steps_and_zero_horizon() {
        let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
        let p = PrivacyParams { eta: 2.0, ..params(3, 1.0) };
        let vs = build_virtual(&w, &params(3, 1.0)).unwrap();
        assert_eq!(sgd_bound(0, &[1], &vs, &p, 3), Err(AccountantError::InvalidStepsize(2.0)));
        assert_eq!(sgd_bound(0, &[1], &vs, &params(3, 1.0), 1).unwrap(), 0.0);
        assert_eq!(averaging_bound(0, &[1], &vs, &params(3, 1.0), 0).unwrap(), 0.0);
    }

    #[test]
    fn mean_loss_examples() {
        let eps = vec![vec![0.0, 2.0], vec![3.0, 0.0]];
        assert_eq!(mean_loss_to(1, &eps), 1.0);
        let c = vec![vec![0.0, 1.5, 1.5], vec![1.5, 0.0, 1.5], vec![1.5, 1.5, 0.0]];
        assert!((mean_loss_to(0, &c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn param_validation() {
        let mut p = params(2, 1.0);
        p.alpha = 1.0;
        assert!(p.validate().is_err());
        p.alpha = 2.0;
        p.delta = -1.0;
        assert!(p.validate().is_err());
    }
}
