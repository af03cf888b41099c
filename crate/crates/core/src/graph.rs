//! CSR graphs, normalized propagation operators, datasets and splits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Matrix;

/// Immutable symmetric adjacency in CSR form.
///
/// Rows are sorted, free of duplicates and self-loops. `num_arcs` counts
/// directed arcs, so an undirected edge contributes two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl Graph {
    pub fn empty(num_nodes: usize) -> Self {
        Self { row_offsets: vec![0; num_nodes + 1], col_indices: Vec::new() }
    }

    /// Builds a symmetric graph from an edge list. Self-loops are dropped and
    /// duplicate or reversed edges collapse into one undirected edge.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for (u, v) in edges {
            for index in [u, v] {
                if index >= num_nodes {
                    return Err(Error::Index { index, num_nodes });
                }
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        Ok(Self::from_adjacency(adj))
    }

    fn from_adjacency(mut adj: Vec<Vec<usize>>) -> Self {
        let mut row_offsets = Vec::with_capacity(adj.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in adj.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Self { row_offsets, col_indices }
    }

    /// Wraps raw CSR arrays after checking every graph invariant.
    pub fn from_csr(row_offsets: Vec<usize>, col_indices: Vec<usize>) -> Result<Self> {
        let g = Self { row_offsets, col_indices };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidGraph(msg.into()));
        if self.row_offsets.first() != Some(&0) {
            return bad("row_offsets must start at 0");
        }
        if *self.row_offsets.last().unwrap_or(&0) != self.col_indices.len() {
            return bad("row_offsets must end at the arc count");
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_offsets must be nondecreasing");
        }
        let n = self.num_nodes();
        for i in 0..n {
            let row = self.neighbors(i);
            if let Some(&index) = row.iter().find(|&&j| j >= n) {
                return Err(Error::Index { index, num_nodes: n });
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return bad("rows must be sorted without duplicate arcs");
            }
            if row.contains(&i) {
                return bad("self-loops are not stored");
            }
        }
        if !self.is_symmetric() {
            return bad("adjacency must be symmetric");
        }
        Ok(())
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    /// Directed arc count `M` (twice the undirected edge count).
    #[inline]
    pub fn num_arcs(&self) -> usize {
        self.col_indices.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.num_arcs() / 2
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|i| self.degree(i)).collect()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn has_arc(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges `(i, j)` with `i < j`, in CSR order.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |i| {
            self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j))
        })
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.num_nodes()).all(|i| self.neighbors(i).iter().all(|&j| self.has_arc(j, i)))
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<_> = self.undirected_edges().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(self.num_nodes(), edges)
    }
}

/// Which normalization of `Â = A + I` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NormKind {
    /// `D̂^{-1/2} Â D̂^{-1/2}`
    Symmetric,
    /// `D̂^{-1} Â`
    Row,
}

/// `Â` with one self-loop per node and per-arc propagation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    base: Graph,
    kind: NormKind,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedGraph {
    pub fn new(graph: &Graph, kind: NormKind) -> Self {
        let n = graph.num_nodes();
        let deg_hat: Vec<f64> = (0..n).map(|i| (graph.degree(i) + 1) as f64).collect();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::with_capacity(graph.num_arcs() + n);
        row_offsets.push(0);
        for i in 0..n {
            let row = graph.neighbors(i);
            let split = row.partition_point(|&j| j < i);
            col_indices.extend_from_slice(&row[..split]);
            col_indices.push(i);
            col_indices.extend_from_slice(&row[split..]);
            row_offsets.push(col_indices.len());
        }
        let mut weights = Vec::with_capacity(col_indices.len());
        for i in 0..n {
            for &j in &col_indices[row_offsets[i]..row_offsets[i + 1]] {
                weights.push(match kind {
                    NormKind::Symmetric => 1.0 / libm::sqrt(deg_hat[i] * deg_hat[j]),
                    NormKind::Row => 1.0 / deg_hat[i],
                });
            }
        }
        Self { base: graph.clone(), kind, row_offsets, col_indices, weights }
    }

    pub fn base(&self) -> &Graph {
        &self.base
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn self_loops_added(&self) -> bool {
        true
    }

    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    /// Arc count of `Â`, i.e. `M + N`.
    pub fn num_arcs(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `d̂_i`, the degree including the self-loop.
    pub fn degree_hat(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[r.clone()], &self.weights[r])
    }

    /// Dense copy of the weighted operator.
    pub fn to_dense(&self) -> Matrix {
        let n = self.num_nodes();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            let (cols, w) = self.row(i);
            for (&j, &v) in cols.iter().zip(w) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

pub fn normalize(graph: &Graph, kind: NormKind) -> NormalizedGraph {
    NormalizedGraph::new(graph, kind)
}

/// Dense node features stored as `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} feature values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("length checked at construction")
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }
}

/// Train/validation/test membership. The three masks are disjoint; a node
/// may belong to none of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMask {
    pub fn none(n: usize) -> Self {
        Self { train: vec![false; n], val: vec![false; n], test: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.train.len();
        if self.val.len() != n || self.test.len() != n {
            return Err(Error::shape("split masks differ in length"));
        }
        for i in 0..n {
            let count = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if count > 1 {
                return Err(Error::config(format!("node {i} is in more than one split")));
            }
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        indices(&self.test)
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Seeded random split: `floor(f·n)` train and validation nodes, the rest test.
pub fn random_split(n: usize, fractions: (f64, f64), seed: u64) -> Result<SplitMask> {
    let (ft, fv) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && ft + fv <= 1.0 + 1e-12) {
        return Err(Error::config(format!("split fractions ({ft}, {fv}) must be nonnegative and sum to at most 1")));
    }
    let n_train = libm::floor(ft * n as f64) as usize;
    let n_val = (libm::floor(fv * n as f64) as usize).min(n - n_train);
    random_split_sizes(n, n_train, n_val, seed)
}

/// Seeded split with exact train and validation counts; the rest is test.
pub fn random_split_sizes(n: usize, n_train: usize, n_val: usize, seed: u64) -> Result<SplitMask> {
    if n_train + n_val > n {
        return Err(Error::config(format!("{n_train} train + {n_val} validation nodes exceed {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_rng(seed, 0, stream::SPLIT));
    let mut split = SplitMask::none(n);
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            split.train[i] = true;
        } else if rank < n_train + n_val {
            split.val[i] = true;
        } else {
            split.test[i] = true;
        }
    }
    Ok(split)
}

/// Graph, features, labels and splits. Labels use `-1` for unlabeled nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: Features,
    pub labels: Vec<i64>,
    pub splits: SplitMask,
}

impl Dataset {
    pub fn new(graph: Graph, features: Features, labels: Vec<i64>, splits: SplitMask) -> Result<Self> {
        let ds = Self { graph, features, labels, splits };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(Error::shape(format!("{} feature rows for {n} nodes", self.features.rows())));
        }
        if self.labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} nodes", self.labels.len())));
        }
        if self.splits.len() != n {
            return Err(Error::shape(format!("split masks of length {} for {n} nodes", self.splits.len())));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l < -1) {
            return Err(Error::config(format!("label {l} below the unlabeled sentinel -1")));
        }
        self.splits.validate()
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of classes `C`, i.e. one more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }
}

/// Parameters of the stochastic-block-model generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Weight of the block indicator in the features; noise gets `1 - signal`.
    pub signal: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            nodes_per_block: 100,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 32,
            signal: 0.5,
            seed: 0,
            train_fraction: 0.1,
            val_fraction: 0.1,
        }
    }
}

/// Samples a stochastic block model dataset. Node `i` belongs to block
/// `i / nodes_per_block`, which is also its label.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    let prob = |p: f64| (0.0..=1.0).contains(&p);
    if !prob(cfg.p_in) || !prob(cfg.p_out) {
        return Err(Error::config("p_in and p_out must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&cfg.signal) {
        return Err(Error::config("signal must lie in [0, 1]"));
    }
    if cfg.blocks == 0 || cfg.nodes_per_block == 0 {
        return Err(Error::config("blocks and nodes_per_block must be positive"));
    }
    if cfg.feature_dim < cfg.blocks {
        return Err(Error::config("feature_dim must be at least the number of blocks"));
    }
    let n = cfg.blocks * cfg.nodes_per_block;
    let block = |i: usize| i / cfg.nodes_per_block;

    let mut rng = rng::seeded(cfg.seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_edges(n, edges)?;

    let noise = 1.0 - cfg.signal;
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    for i in 0..n {
        for f in 0..cfg.feature_dim {
            let z: f64 = rng.sample(StandardNormal);
            let indicator = if f == block(i) { cfg.signal } else { 0.0 };
            data.push((indicator + noise * z) as f32);
        }
    }
    let features = Features::new(n, cfg.feature_dim, data)?;
    let labels = (0..n).map(|i| block(i) as i64).collect();
    let splits = random_split(n, (cfg.train_fraction, cfg.val_fraction), cfg.seed)?;
    Dataset::new(graph, features, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrizes_and_counts_arcs() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_arcs(), 4);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert!(g.is_symmetric());
    }

    #[test]
    fn self_loops_and_duplicates_dropped() {
        let g = Graph::from_edges(3, [(1, 1), (0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_arcs(), 2);
        g.validate().unwrap();
    }

    #[test]
    fn out_of_range_node_is_index_error() {
        let err = Graph::from_edges(2, [(0, 2)]).unwrap_err();
        assert_eq!(err, Error::Index { index: 2, num_nodes: 2 });
    }

    #[test]
    fn from_csr_rejects_asymmetry() {
        assert!(Graph::from_csr(vec![0, 1, 1], vec![1]).is_err());
        assert!(Graph::from_csr(vec![0, 1, 2], vec![1, 0]).is_ok());
    }

    #[test]
    fn isolated_node_normalizes_to_unit_loop() {
        for kind in [NormKind::Symmetric, NormKind::Row] {
            let ng = normalize(&Graph::empty(1), kind);
            assert_eq!(ng.num_arcs(), 1);
            assert_eq!(ng.weights(), &[1.0]);
        }
    }

    #[test]
    fn single_edge_symmetric_weights_are_half() {
        let ng = normalize(&Graph::from_edges(2, [(0, 1)]).unwrap(), NormKind::Symmetric);
        assert_eq!(ng.num_arcs(), 4);
        for &w in ng.weights() {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_row_normalization_matches_dense_oracle() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        // D̂⁻¹Â from the dense adjacency plus identity.
        let mut a_hat = Matrix::identity(3);
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            a_hat[(i, j)] = 1.0;
        }
        let oracle = Matrix::from_fn(3, 3, |i, j| {
            let d: f64 = a_hat.row(i).iter().sum();
            a_hat[(i, j)] / d
        });
        let dense = normalize(&g, NormKind::Row).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[(i, j)] - oracle[(i, j)]).abs() < 1e-15);
            }
        }
        assert!((dense[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((dense[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = random_split(10, (0.1, 0.1), 3).unwrap();
        assert_eq!(s.train_indices().len(), 1);
        assert_eq!(s.val_indices().len(), 1);
        assert_eq!(s.test_indices().len(), 8);
        let all = random_split(5, (1.0, 0.0), 3).unwrap();
        assert_eq!(all.train_indices().len(), 5);
        assert!(all.val_indices().is_empty() && all.test_indices().is_empty());
        assert!(random_split(5, (0.8, 0.3), 0).is_err());
    }

    #[test]
    fn split_seeds_never_collide() {
        let base = random_split(1000, (0.1, 0.1), 0).unwrap();
        assert_eq!(base, random_split(1000, (0.1, 0.1), 0).unwrap());
        for seed in 1..20 {
            assert_ne!(base, random_split(1000, (0.1, 0.1), seed).unwrap());
        }
    }

    #[test]
    fn disjoint_cliques_when_p_out_is_zero() {
        let cfg = SbmConfig { blocks: 2, nodes_per_block: 3, p_in: 1.0, p_out: 0.0, feature_dim: 2, ..Default::default() };
        let ds = generate_sbm(&cfg).unwrap();
        assert_eq!(ds.graph.num_arcs(), 12);
        assert!(!ds.graph.has_arc(0, 3));
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn sbm_arc_count_within_three_sigma() {
        let cfg = SbmConfig { blocks: 4, nodes_per_block: 100, p_in: 0.1, p_out: 0.01, signal: 0.5, seed: 0, ..Default::default() };
        let ds = generate_sbm(&cfg).unwrap();
        // Undirected edge count is a sum of independent Bernoullis.
        let pairs_in = 4.0 * (100.0 * 99.0 / 2.0);
        let pairs_out = 6.0 * 100.0 * 100.0;
        let mean = pairs_in * 0.1 + pairs_out * 0.01;
        let var = pairs_in * 0.1 * 0.9 + pairs_out * 0.01 * 0.99;
        let m = ds.graph.num_undirected_edges() as f64;
        assert!((m - mean).abs() <= 3.0 * libm::sqrt(var), "edges {m}, mean {mean}");
        assert_eq!(ds.graph.num_arcs() % 2, 0);
    }

    #[test]
    fn sbm_is_deterministic_and_validates_ranges() {
        let cfg = SbmConfig::default();
        assert_eq!(generate_sbm(&cfg).unwrap(), generate_sbm(&cfg).unwrap());
        assert!(generate_sbm(&SbmConfig { p_in: 1.5, ..Default::default() }).is_err());
        assert!(generate_sbm(&SbmConfig { feature_dim: 2, ..Default::default() }).is_err());
    }

    #[test]
    fn dataset_rejects_row_mismatch() {
        let g = Graph::empty(3);
        let err = Dataset::new(g, Features::zeros(2, 1), vec![0; 3], SplitMask::none(3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
