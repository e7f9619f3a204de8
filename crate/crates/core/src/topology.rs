//! Communication graphs and symmetric stochastic gossip matrices.
//!
//! Conventions used by every downstream module:
//! - graphs store undirected edges without self loops;
//! - a gossip matrix always works on *closed* neighborhoods, so node `a`
//!   is in `N_a` and its closed degree is `d_a = |N_a| = deg(a) + 1`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};

/// Pairing attempts before giving up on a k-regular graph.
pub const REGULAR_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid degree k={k} for n={n} nodes (need 0 < k < n and n*k even)")]
    InvalidDegree { n: usize, k: usize },
    #[error("no simple {k}-regular graph on {n} nodes found after {attempts} attempts")]
    GenerationFailure { n: usize, k: usize, attempts: usize },
    #[error("uniform weights requested on a non-regular graph")]
    NonRegularUniform,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    regular_degree: Option<usize>,
}

impl Graph {
    /// Builds a graph from an edge list. Self edges are rejected, duplicate
    /// edges collapse. `regular_degree` is filled in when every node has the
    /// same degree.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(TopologyError::Parse { line: 0, message: format!("edge ({u},{v}) out of range for n={n}") });
            }
            if u == v {
                return Err(TopologyError::Parse { line: 0, message: format!("self edge on node {u}") });
            }
            set.insert((u.min(v), u.max(v)));
        }
        let mut g = Graph { n, edges: set, regular_degree: None };
        let degrees = g.degrees();
        if let Some(&d0) = degrees.first() {
            if degrees.iter().all(|&d| d == d0) {
                g.regular_degree = Some(d0);
            }
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)));
        Self::from_edges(n, edges).expect("complete graph is simple")
    }

    pub fn ring(n: usize) -> Self {
        let edges = (0..n).map(|u| (u, (u + 1) % n));
        Self::from_edges(n, edges).expect("ring is simple")
    }

    pub fn path(n: usize) -> Self {
        let edges = (1..n).map(|u| (u - 1, u));
        Self::from_edges(n, edges).expect("path is simple")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn regular_degree(&self) -> Option<usize> {
        self.regular_degree
    }

    /// Edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Sorted open neighborhoods.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Serializes to the edge-list text format: a header `n k` (k = 0 when
    /// the graph is not regular) then one `u v` pair per line, 0-indexed.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.n, self.regular_degree.unwrap_or(0));
        for (u, v) in self.edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(TopologyError::Parse { line: 1, message: "missing header".into() })?;
        let (n, k) = parse_pair(hline, header)?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            edges.push(parse_pair(line, l)?);
        }
        let g = Self::from_edges(n, edges).map_err(|e| match e {
            TopologyError::Parse { message, .. } => TopologyError::Parse { line: 0, message },
            other => other,
        })?;
        if k != 0 && g.regular_degree != Some(k) {
            return Err(TopologyError::Parse {
                line: hline,
                message: format!("header declares {k}-regular but degrees differ"),
            });
        }
        Ok(g)
    }
}

fn parse_pair(line: usize, text: &str) -> Result<(usize, usize), TopologyError> {
    let mut it = text.split_whitespace();
    let mut next = || -> Result<usize, TopologyError> {
        it.next()
            .ok_or_else(|| TopologyError::Parse { line, message: "expected two integers".into() })?
            .parse()
            .map_err(|e| TopologyError::Parse { line, message: format!("{e}") })
    };
    let a = next()?;
    let b = next()?;
    if it.next().is_some() {
        return Err(TopologyError::Parse { line, message: "trailing tokens".into() });
    }
    Ok((a, b))
}

/// Random simple k-regular graph from the pairing (configuration) model.
///
/// Stubs are shuffled and paired; pairs that would create a loop or a
/// parallel edge are sent back to the pool and re-paired. An attempt that
/// gets stuck (no suitable pair left) restarts from scratch, up to
/// [`REGULAR_RETRY_BUDGET`] attempts.
pub fn generate_k_regular(n: usize, k: usize, seed: u64) -> Result<Graph, TopologyError> {
    if k == 0 || k >= n || (n * k) % 2 != 0 {
        return Err(TopologyError::InvalidDegree { n, k });
    }
    let mut rng = rng::stream(seed, Domain::Topology, &[n as u64, k as u64]);
    // Dense degrees: pair the sparser complement and flip it.
    let sparse_k = k.min(n - 1 - k);
    for _ in 0..REGULAR_RETRY_BUDGET {
        if let Some(mut edges) = try_pairing(n, sparse_k, &mut rng) {
            if sparse_k != k {
                let flipped = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).filter(|e| !edges.contains(e)).collect();
                edges = flipped;
            }
            let mut g = Graph::from_edges(n, edges)?;
            g.regular_degree = Some(k);
            return Ok(g);
        }
    }
    Err(TopologyError::GenerationFailure { n, k, attempts: REGULAR_RETRY_BUDGET })
}

const MAX_REPAIR_PASSES: usize = 64;

fn try_pairing(n: usize, k: usize, rng: &mut rng::Stream) -> Option<BTreeSet<(usize, usize)>> {
    let mut edges = BTreeSet::new();
    let mut stubs: Vec<usize> = (0..n).flat_map(|u| std::iter::repeat_n(u, k)).collect();
    for _ in 0..MAX_REPAIR_PASSES {
        if stubs.is_empty() {
            return Some(edges);
        }
        stubs.shuffle(rng);
        let mut leftover = Vec::new();
        for pair in stubs.chunks_exact(2) {
            let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if u != v && !edges.contains(&(u, v)) {
                edges.insert((u, v));
            } else {
                leftover.push(pair[0]);
                leftover.push(pair[1]);
            }
        }
        if !leftover.is_empty() && !has_suitable_pair(&leftover, &edges) {
            return None;
        }
        stubs = leftover;
    }
    stubs.is_empty().then_some(edges)
}

fn has_suitable_pair(stubs: &[usize], edges: &BTreeSet<(usize, usize)>) -> bool {
    let nodes: BTreeSet<usize> = stubs.iter().copied().collect();
    let nodes: Vec<usize> = nodes.into_iter().collect();
    for (i, &u) in nodes.iter().enumerate() {
        for &v in &nodes[i + 1..] {
            if !edges.contains(&(u, v)) {
                return true;
            }
        }
    }
    false
}

/// Weighting rule turning a graph into a gossip matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `1/|N_a|` on the closed neighborhood; regular graphs only.
    Uniform,
    /// `1/max(|N_a|, |N_v|)` off the diagonal, remainder on the diagonal.
    MetropolisHastings,
}

impl std::str::FromStr for WeightScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "metropolis_hastings" | "mh" => Ok(Self::MetropolisHastings),
            other => Err(format!("unknown weight scheme '{other}'")),
        }
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::MetropolisHastings => "metropolis_hastings",
        })
    }
}

/// Symmetric, row-stochastic gossip matrix over closed neighborhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipMatrix {
    n: usize,
    weights: Vec<f64>,
    closed_neighbors: Vec<Vec<usize>>,
}

impl GossipMatrix {
    /// Wraps a dense row-major matrix, checking the gossip invariants.
    pub fn from_dense(n: usize, weights: Vec<f64>) -> Result<Self, TopologyError> {
        if weights.len() != n * n {
            return Err(TopologyError::NumericalFailure(format!("expected {} weights, got {}", n * n, weights.len())));
        }
        let closed_neighbors = (0..n)
            .map(|a| (0..n).filter(|&v| weights[a * n + v] != 0.0).collect::<Vec<_>>())
            .collect();
        let m = GossipMatrix { n, weights, closed_neighbors };
        m.check().map_err(TopologyError::NumericalFailure)?;
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for a in 0..n {
            w[a * n + a] = 1.0;
        }
        Self::from_dense(n, w).expect("identity is a gossip matrix")
    }

    /// Verifies row sums, symmetry, range, and closed-neighborhood structure.
    pub fn check(&self) -> Result<(), String> {
        let n = self.n;
        for a in 0..n {
            let row = self.row(a);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("row {a} sums to {sum}"));
            }
            if row[a] == 0.0 {
                return Err(format!("node {a} has no self weight"));
            }
            for v in 0..n {
                let w = row[v];
                if !(0.0..=1.0).contains(&w) {
                    return Err(format!("W[{a},{v}] = {w} outside [0,1]"));
                }
                if w != self.weights[v * n + a] {
                    return Err(format!("W[{a},{v}] != W[{v},{a}]"));
                }
            }
            let expected: Vec<usize> = (0..n).filter(|&v| row[v] != 0.0).collect();
            if expected != self.closed_neighbors[a] {
                return Err(format!("neighbor list of {a} does not match nonzero pattern"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn weight(&self, a: usize, v: usize) -> f64 {
        self.weights[a * self.n + v]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.weights[a * self.n..(a + 1) * self.n]
    }

    /// Closed neighborhood `N_a`, sorted, always containing `a`.
    pub fn neighbors(&self, a: usize) -> &[usize] {
        &self.closed_neighbors[a]
    }

    /// `d_a = |N_a|`, self included.
    pub fn closed_degree(&self, a: usize) -> usize {
        self.closed_neighbors[a].len()
    }

    pub fn is_neighbor(&self, a: usize, v: usize) -> bool {
        self.weight(a, v) != 0.0
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.weights)
    }

    /// Bytes moved by one gossip round: every node ships `dim` doubles to
    /// each neighbor other than itself.
    pub fn round_bytes(&self, dim: usize) -> u64 {
        (0..self.n).map(|a| ((self.closed_degree(a) - 1) * dim * 8) as u64).sum()
    }
}

pub fn build_gossip_matrix(g: &Graph, scheme: WeightScheme) -> Result<GossipMatrix, TopologyError> {
    let n = g.n();
    let adj = g.adjacency();
    let closed: Vec<usize> = adj.iter().map(|l| l.len() + 1).collect();
    let mut w = vec![0.0; n * n];
    match scheme {
        WeightScheme::Uniform => {
            let k = g.regular_degree().ok_or(TopologyError::NonRegularUniform)?;
            let value = 1.0 / (k + 1) as f64;
            for a in 0..n {
                w[a * n + a] = value;
                for &v in &adj[a] {
                    w[a * n + v] = value;
                }
            }
        }
        WeightScheme::MetropolisHastings => {
            for a in 0..n {
                let mut off = 0.0;
                for &v in &adj[a] {
                    let value = 1.0 / closed[a].max(closed[v]) as f64;
                    w[a * n + v] = value;
                    off += value;
                }
                w[a * n + a] = 1.0 - off;
            }
        }
    }
    GossipMatrix::from_dense(n, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for TopologyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(format!("unknown topology mode '{other}'")),
        }
    }
}

impl std::fmt::Display for TopologyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Static => "static",
            Self::Dynamic => "dynamic",
        })
    }
}

/// A k-regular topology that is either fixed or redrawn every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySchedule {
    pub mode: TopologyMode,
    pub n: usize,
    pub k: usize,
    pub scheme: WeightScheme,
    pub seed: u64,
}

impl TopologySchedule {
    pub fn graph(&self, round: u64) -> Result<Graph, TopologyError> {
        let seed = match self.mode {
            TopologyMode::Static => self.seed,
            TopologyMode::Dynamic => rng::derive_seed(self.seed, Domain::Topology, &[round]),
        };
        generate_k_regular(self.n, self.k, seed)
    }

    /// Gossip matrix in effect at `round`; static schedules ignore `round`.
    pub fn resample(&self, round: u64) -> Result<GossipMatrix, TopologyError> {
        build_gossip_matrix(&self.graph(round)?, self.scheme)
    }
}

/// `p = 1 - λ₂(WᵀW)`, clamped to `[0, 1]`.
pub fn estimate_consensus_rate(w: &GossipMatrix) -> Result<f64, TopologyError> {
    let m = w.to_dmatrix();
    spectral_rate(&(m.transpose() * &m))
}

/// Consensus rate of a dynamic schedule, from `E[WᵀW]` averaged over
/// `samples` consecutive rounds.
pub fn estimate_expected_consensus_rate(schedule: &TopologySchedule, samples: usize) -> Result<f64, TopologyError> {
    if schedule.mode == TopologyMode::Static || samples == 0 {
        return estimate_consensus_rate(&schedule.resample(0)?);
    }
    let n = schedule.n;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for round in 0..samples as u64 {
        let m = schedule.resample(round)?.to_dmatrix();
        acc += m.transpose() * &m;
    }
    acc /= samples as f64;
    spectral_rate(&acc)
}

fn spectral_rate(wtw: &DMatrix<f64>) -> Result<f64, TopologyError> {
    let n = wtw.nrows();
    if n < 2 {
        return Ok(1.0);
    }
    if wtw.iter().any(|x| !x.is_finite()) {
        return Err(TopologyError::NumericalFailure("non-finite entry in WᵀW".into()));
    }
    let eig = wtw.clone().symmetric_eigen();
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok((1.0 - values[1]).clamp(0.0, 1.0))
}
