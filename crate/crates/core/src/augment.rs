//! Feature and edge masking used to build the two training views.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Features, Graph};
use crate::rng::{self, stream, Rng};

/// Masking probabilities for the two views.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentationConfig {
    pub p_f1: f64,
    pub p_f2: f64,
    pub p_e1: f64,
    pub p_e2: f64,
}

impl AugmentationConfig {
    pub const NONE: Self = Self { p_f1: 0.0, p_f2: 0.0, p_e1: 0.0, p_e2: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_f1", self.p_f1), ("p_f2", self.p_f2), ("p_e1", self.p_e1), ("p_e2", self.p_e2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("augment.{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { p_f1: 0.2, p_f2: 0.1, p_e1: 0.2, p_e2: 0.3 }
    }
}

/// One augmented copy of the input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub graph: Graph,
    pub features: Features,
    /// `(seed, step, stream)` the view was drawn from.
    pub source: (u64, u64, u64),
}

/// Zeroes whole feature columns. One keep-mask of length `F` is drawn and
/// shared by every node.
pub fn mask_features(features: &Features, p_f: f64, rng: &mut Rng) -> Features {
    let cols = features.cols();
    let keep: Vec<bool> = (0..cols).map(|_| rng.random::<f64>() >= p_f).collect();
    let mut out = features.clone();
    if keep.iter().all(|&k| k) {
        return out;
    }
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        for (v, &k) in row.iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    out
}

/// Drops each undirected edge with probability `p_e`; both arcs of an edge
/// share one draw so the result stays symmetric.
pub fn mask_edges(graph: &Graph, p_e: f64, rng: &mut Rng) -> Graph {
    if p_e <= 0.0 {
        return graph.clone();
    }
    let kept: Vec<(usize, usize)> = graph.undirected_edges().filter(|_| rng.random::<f64>() >= p_e).collect();
    Graph::from_edges(graph.num_nodes(), kept).expect("subset of a valid graph")
}

fn make_view(graph: &Graph, features: &Features, p_f: f64, p_e: f64, source: (u64, u64, u64)) -> View {
    let mut rng = rng::stream_rng(source.0, source.1, source.2);
    let features = mask_features(features, p_f, &mut rng);
    let graph = mask_edges(graph, p_e, &mut rng);
    View { graph, features, source }
}

/// Draws both views for training step `step`. Each view has its own stream so
/// the pair is reproducible from `(seed, step)` alone.
pub fn make_views(graph: &Graph, features: &Features, cfg: &AugmentationConfig, seed: u64, step: u64) -> (View, View) {
    (
        make_view(graph, features, cfg.p_f1, cfg.p_e1, (seed, step, stream::VIEW_1)),
        make_view(graph, features, cfg.p_f2, cfg.p_e2, (seed, step, stream::VIEW_2)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmConfig};
    use proptest::prelude::*;

    fn features(rows: usize, cols: usize) -> Features {
        Features::new(rows, cols, (0..rows * cols).map(|v| v as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn feature_mask_extremes() {
        let x = features(4, 6);
        assert_eq!(mask_features(&x, 0.0, &mut rng::seeded(0)), x);
        assert!(mask_features(&x, 1.0, &mut rng::seeded(0)).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_mask_fraction_within_binomial_bound() {
        let x = features(2, 10_000);
        let masked = mask_features(&x, 0.3, &mut rng::seeded(11));
        let zeroed = masked.row(0).iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((0.285..=0.315).contains(&zeroed), "fraction {zeroed}");
    }

    #[test]
    fn feature_mask_is_shared_across_nodes() {
        let x = features(20, 50);
        let masked = mask_features(&x, 0.5, &mut rng::seeded(4));
        let zero_cols = |r: usize| masked.row(r).iter().map(|&v| v == 0.0).collect::<Vec<_>>();
        for r in 1..20 {
            assert_eq!(zero_cols(0), zero_cols(r));
        }
    }

    #[test]
    fn edge_mask_extremes() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(mask_edges(&g, 0.0, &mut rng::seeded(0)), g);
        let empty = mask_edges(&g, 1.0, &mut rng::seeded(0));
        assert_eq!(empty.num_arcs(), 0);
        assert_eq!(empty.num_nodes(), 4);
    }

    #[test]
    fn edge_mask_rate_within_binomial_bound() {
        // A 10,000-edge path-like ring keeps every edge distinct.
        let n = 10_000;
        let g = Graph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap();
        assert_eq!(g.num_undirected_edges(), 10_000);
        let kept = mask_edges(&g, 0.5, &mut rng::seeded(5)).num_undirected_edges();
        assert!((4850..=5150).contains(&kept), "kept {kept}");
    }

    #[test]
    fn views_are_deterministic_and_identity_without_masking() {
        let ds = generate_sbm(&SbmConfig { nodes_per_block: 10, ..Default::default() }).unwrap();
        let (a, b) = make_views(&ds.graph, &ds.features, &AugmentationConfig::NONE, 1, 0);
        assert_eq!(a.graph, ds.graph);
        assert_eq!(b.features, ds.features);
        let cfg = AugmentationConfig::default();
        assert_eq!(make_views(&ds.graph, &ds.features, &cfg, 9, 3), make_views(&ds.graph, &ds.features, &cfg, 9, 3));
        assert_ne!(make_views(&ds.graph, &ds.features, &cfg, 9, 3).0, make_views(&ds.graph, &ds.features, &cfg, 9, 4).0);
    }

    #[test]
    fn config_rejects_bad_probability() {
        assert!(AugmentationConfig { p_e2: 1.2, ..Default::default() }.validate().is_err());
        AugmentationConfig::default().validate().unwrap();
    }

    proptest! {
        #[test]
        fn edge_mask_preserves_symmetry(
            edges in proptest::collection::vec((0usize..30, 0usize..30), 0..120),
            p in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let g = Graph::from_edges(30, edges).unwrap();
            let masked = mask_edges(&g, p, &mut rng::seeded(seed));
            prop_assert!(masked.validate().is_ok());
            prop_assert!(masked.undirected_edges().all(|(i, j)| g.has_arc(i, j)));
        }
    }
}
