//! Fixed-fanout neighborhood sampling and induced-subgraph minibatches.

use alloc::collections::btree_map::Entry;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::graph::{Features, Graph};
use crate::rng::Rng;

/// Per-hop neighbor caps; the depth is the number of hops.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct FanoutSpec(pub Vec<usize>);

impl FanoutSpec {
    /// Every neighbor at every one of `depth` hops.
    pub fn unbounded(depth: usize) -> Self {
        Self(alloc::vec![usize::MAX; depth])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::config(format!("fanout caps must be at least 1, got {:?}", self.0)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Upper bound on the subgraph size for `seeds` centrals.
    pub fn node_budget(&self, seeds: usize) -> usize {
        self.0.iter().fold(seeds, |acc, &c| acc.saturating_mul(c.saturating_add(1)))
    }
}

/// Two hops: ten first-hop and five second-hop neighbors per node.
impl Default for FanoutSpec {
    fn default() -> Self {
        Self(alloc::vec![10, 5])
    }
}

impl core::str::FromStr for FanoutSpec {
    type Err = Error;

    /// Comma-separated caps, e.g. `10,5`.
    fn from_str(s: &str) -> Result<Self> {
        let caps = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| Error::config(format!("bad fanout entry {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let spec = Self(caps);
        spec.validate()?;
        Ok(spec)
    }
}

/// Induced subgraph around a batch of central nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// Original node ids; position in this list is the local id. The
    /// central nodes come first, in batch order.
    pub nodes: Vec<usize>,
    pub num_central: usize,
    pub graph: Graph,
    pub features: Features,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn central_mask(&self) -> Vec<bool> {
        (0..self.nodes.len()).map(|i| i < self.num_central).collect()
    }

    pub fn central(&self) -> &[usize] {
        &self.nodes[..self.num_central]
    }
}

/// Breadth-wise expansion from `seeds`: at each hop every newly reached
/// node keeps `min(degree, cap)` neighbors drawn without replacement. The
/// subgraph is induced on every reached node. Duplicate seeds are merged.
pub fn sample_neighborhood(
    graph: &Graph,
    features: &Features,
    seeds: &[usize],
    fanout: &FanoutSpec,
    rng: &mut Rng,
) -> Result<Subgraph> {
    fanout.validate()?;
    let n = graph.num_nodes();
    if features.rows() != n {
        return Err(Error::Shape(format!("{} feature rows for {n} nodes", features.rows())));
    }
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    let mut nodes = Vec::new();
    for &s in seeds {
        if s >= n {
            return Err(Error::Index { index: s, num_nodes: n });
        }
        if let Entry::Vacant(e) = local.entry(s) {
            e.insert(nodes.len());
            nodes.push(s);
        }
    }
    let num_central = nodes.len();

    let mut frontier = nodes.clone();
    for &cap in &fanout.0 {
        let mut next = Vec::new();
        for &u in &frontier {
            let nbrs = graph.neighbors(u);
            let mut visit = |v: usize| {
                if let Entry::Vacant(e) = local.entry(v) {
                    e.insert(nodes.len());
                    nodes.push(v);
                    next.push(v);
                }
            };
            if nbrs.len() <= cap {
                nbrs.iter().for_each(|&v| visit(v));
            } else {
                index::sample(rng, nbrs.len(), cap).into_iter().for_each(|k| visit(nbrs[k]));
            }
        }
        frontier = next;
    }

    let mut offsets = Vec::with_capacity(nodes.len() + 1);
    let mut cols = Vec::new();
    offsets.push(0);
    for &u in &nodes {
        let start = cols.len();
        cols.extend(graph.neighbors(u).iter().filter_map(|v| local.get(v).copied()));
        cols[start..].sort_unstable();
        offsets.push(cols.len());
    }
    Ok(Subgraph {
        graph: Graph::from_csr(offsets, cols)?,
        features: features.select_rows(&nodes),
        nodes,
        num_central,
    })
}
