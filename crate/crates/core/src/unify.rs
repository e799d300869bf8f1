//! Fixed-width input views of variable-size graphs.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::GraphDataset;
use crate::features::NodeFeatureBundle;

pub const DEFAULT_SEGMENT_K: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UnifyError {
    #[error("k must be positive")]
    ZeroK,
    #[error("full-input requires k = max_nodes ({max_nodes}), got k = {k}")]
    FullInputOverride { k: usize, max_nodes: usize },
    #[error("graph with {nodes} nodes does not fit full-input width {k}")]
    TooLarge { nodes: usize, k: usize },
    #[error("serialization order is not a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("unknown strategy {0:?} (expected full-input, padding-pruning or segment-shifting)")]
    UnknownStrategy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    FullInput,
    PaddingPruning,
    SegmentShifting,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FullInput => "full-input",
            Strategy::PaddingPruning => "padding-pruning",
            Strategy::SegmentShifting => "segment-shifting",
        })
    }
}

impl FromStr for Strategy {
    type Err = UnifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-input" => Ok(Strategy::FullInput),
            "padding-pruning" => Ok(Strategy::PaddingPruning),
            "segment-shifting" => Ok(Strategy::SegmentShifting),
            other => Err(UnifyError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Strategy, slot count `k`, and adjacency-row width `n_adj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnifyPlan {
    pub strategy: Strategy,
    pub k: usize,
    pub n_adj: usize,
}

impl UnifyPlan {
    /// Resolves `k` and `n_adj` for a dataset.
    pub fn for_dataset(
        ds: &GraphDataset,
        strategy: Strategy,
        k_override: Option<usize>,
    ) -> Result<Self, UnifyError> {
        let k = resolve_k(ds, strategy, k_override)?;
        Ok(UnifyPlan {
            strategy,
            k,
            n_adj: adjacency_width(strategy, k, ds.max_nodes),
        })
    }
}

/// Padding/pruning width for known benchmarks; otherwise the average size
/// rounded up to a multiple of 5.
pub fn default_padding_k(name: &str, avg_nodes: f64) -> usize {
    let n = name.to_ascii_uppercase();
    match n.as_str() {
        "MUTAG" => 25,
        "IMDB-B" | "IMDB-BINARY" | "IMDB-M" | "IMDB-MULTI" | "NCI1" => 50,
        "COLLAB" => 100,
        _ if n.starts_with("PTC") => 50,
        _ if n.starts_with("PROTEINS") => 100,
        _ => ((avg_nodes.ceil() as usize).max(1)).div_ceil(5) * 5,
    }
}

pub fn resolve_k(
    ds: &GraphDataset,
    strategy: Strategy,
    k_override: Option<usize>,
) -> Result<usize, UnifyError> {
    if k_override == Some(0) {
        return Err(UnifyError::ZeroK);
    }
    match strategy {
        Strategy::FullInput => match k_override {
            Some(k) if k != ds.max_nodes => Err(UnifyError::FullInputOverride {
                k,
                max_nodes: ds.max_nodes,
            }),
            _ => Ok(ds.max_nodes),
        },
        Strategy::PaddingPruning => {
            Ok(k_override.unwrap_or_else(|| default_padding_k(&ds.name, ds.avg_nodes)))
        }
        Strategy::SegmentShifting => Ok(k_override.unwrap_or(DEFAULT_SEGMENT_K)),
    }
}

/// `k` for full-input and padding/pruning; `max_nodes` rounded up to a
/// multiple of `k` for segment shifting.
pub fn adjacency_width(strategy: Strategy, k: usize, max_nodes: usize) -> usize {
    match strategy {
        Strategy::FullInput | Strategy::PaddingPruning => k,
        Strategy::SegmentShifting => max_nodes.div_ceil(k).max(1) * k,
    }
}

/// Slot assignment of a graph: each inner list has `k` entries, `None` for
/// dummy slots. `order` is the serialization order of the nodes.
pub fn segment_layout(
    order: &[usize],
    strategy: Strategy,
    k: usize,
) -> Result<Vec<Vec<Option<usize>>>, UnifyError> {
    if k == 0 {
        return Err(UnifyError::ZeroK);
    }
    let n = order.len();
    let pad = |chunk: &[usize]| {
        let mut s: Vec<Option<usize>> = chunk.iter().copied().map(Some).collect();
        s.resize(k, None);
        s
    };
    Ok(match strategy {
        Strategy::FullInput if n > k => return Err(UnifyError::TooLarge { nodes: n, k }),
        Strategy::FullInput | Strategy::PaddingPruning => vec![pad(&order[..n.min(k)])],
        Strategy::SegmentShifting => order.chunks(k).map(pad).collect(),
    })
}

/// One `k`-slot view of (part of) a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub node_ids: Vec<Option<usize>>,
    pub bundles: Vec<NodeFeatureBundle>,
}

impl Segment {
    pub fn k(&self) -> usize {
        self.node_ids.len()
    }

    pub fn real_mask(&self) -> Vec<bool> {
        self.node_ids.iter().map(Option::is_some).collect()
    }

    pub fn real_count(&self) -> usize {
        self.node_ids.iter().flatten().count()
    }
}

/// Segments in the identity serialization order.
pub fn unify(bundles: &[NodeFeatureBundle], plan: &UnifyPlan) -> Result<Vec<Segment>, UnifyError> {
    let order: Vec<usize> = (0..bundles.len()).collect();
    unify_with_order(bundles, &order, plan)
}

/// Segments when nodes are serialized in `order`. Bundles keep their
/// fixed-order adjacency rows regardless of `order`.
pub fn unify_with_order(
    bundles: &[NodeFeatureBundle],
    order: &[usize],
    plan: &UnifyPlan,
) -> Result<Vec<Segment>, UnifyError> {
    let n = bundles.len();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(UnifyError::BadOrder(n));
    }
    let (n_adj, d_x) = bundles
        .first()
        .map_or((plan.n_adj, 0), |b| (b.adjacency_row.len(), b.raw_attr.len()));
    Ok(segment_layout(order, plan.strategy, plan.k)?
        .into_iter()
        .map(|node_ids| {
            let bundles = node_ids
                .iter()
                .map(|slot| match slot {
                    Some(i) => bundles[*i].clone(),
                    None => NodeFeatureBundle::dummy(n_adj, d_x),
                })
                .collect();
            Segment { node_ids, bundles }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GraphInstance;
    use crate::features::build_bundles;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn dataset(name: &str, sizes: &[usize]) -> GraphDataset {
        let graphs = sizes
            .iter()
            .map(|&n| GraphInstance::from_undirected(n, &[], 0).unwrap())
            .collect();
        GraphDataset::from_graphs(name, graphs).unwrap()
    }

    #[test]
    fn resolves_k() {
        let mutag = dataset("MUTAG", &[28, 10]);
        assert_eq!(resolve_k(&mutag, Strategy::FullInput, None), Ok(28));
        assert_eq!(resolve_k(&mutag, Strategy::PaddingPruning, None), Ok(25));
        assert_eq!(resolve_k(&mutag, Strategy::SegmentShifting, None), Ok(20));
        assert_eq!(
            resolve_k(&mutag, Strategy::FullInput, Some(5)),
            Err(UnifyError::FullInputOverride { k: 5, max_nodes: 28 })
        );
        assert_eq!(resolve_k(&mutag, Strategy::PaddingPruning, Some(0)), Err(UnifyError::ZeroK));
        assert_eq!(default_padding_k("PTC_MR", 14.3), 50);
        assert_eq!(default_padding_k("PROTEINS_full", 39.1), 100);
        assert_eq!(default_padding_k("IMDB-BINARY", 19.8), 50);
        assert_eq!(default_padding_k("OTHER", 17.93), 20);
    }

    #[test]
    fn adjacency_widths() {
        assert_eq!(adjacency_width(Strategy::PaddingPruning, 25, 28), 25);
        assert_eq!(adjacency_width(Strategy::SegmentShifting, 20, 28), 40);
        assert_eq!(adjacency_width(Strategy::SegmentShifting, 20, 40), 40);
    }

    #[test]
    fn layout_examples() {
        let o17: Vec<usize> = (0..17).collect();
        let s = segment_layout(&o17, Strategy::PaddingPruning, 25).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].iter().filter(|x| x.is_none()).count(), 8);

        let o28: Vec<usize> = (0..28).collect();
        let s = segment_layout(&o28, Strategy::SegmentShifting, 20).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].iter().filter(|x| x.is_none()).count(), 12);

        for strat in [Strategy::FullInput, Strategy::PaddingPruning, Strategy::SegmentShifting] {
            let s = segment_layout(&o17, strat, 17).unwrap();
            assert_eq!(s, vec![o17.iter().copied().map(Some).collect::<Vec<_>>()]);
        }
        assert!(segment_layout(&o28, Strategy::FullInput, 20).is_err());
    }

    #[test]
    fn pruning_keeps_serialization_prefix() {
        let g = GraphInstance::from_undirected(4, &[(0, 1, 1.0), (2, 3, 1.0)], 0).unwrap();
        let b = build_bundles(&g, 3, 2).unwrap();
        let plan = UnifyPlan { strategy: Strategy::PaddingPruning, k: 3, n_adj: 3 };
        let segs = unify_with_order(&b, &[3, 1, 0, 2], &plan).unwrap();
        assert_eq!(segs[0].node_ids, vec![Some(3), Some(1), Some(0)]);
        assert_eq!(segs[0].bundles[0], b[3]);
        assert!(unify_with_order(&b, &[0, 0, 1, 2], &plan).is_err());
    }

    #[test]
    fn dummy_bundles_are_zero() {
        let g = GraphInstance::from_undirected(2, &[(0, 1, 1.0)], 0).unwrap();
        let b = build_bundles(&g, 5, 2).unwrap();
        let plan = UnifyPlan { strategy: Strategy::PaddingPruning, k: 5, n_adj: 5 };
        let segs = unify(&b, &plan).unwrap();
        assert_eq!(segs[0].real_mask(), vec![true, true, false, false, false]);
        assert!(segs[0].bundles[2..].iter().all(NodeFeatureBundle::is_zero));
        assert_eq!(segs[0].bundles[2].adjacency_row.len(), 5);
    }

    proptest! {
        #[test]
        fn slot_conservation(n in 1usize..300, k in 1usize..60, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shift = segment_layout(&order, Strategy::SegmentShifting, k).unwrap();
            prop_assert_eq!(shift.len(), n.div_ceil(k));
            let mut ids: Vec<usize> = shift.iter().flatten().flatten().copied().collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
            prop_assert!(shift.iter().all(|s| s.len() == k));

            let pp = segment_layout(&order, Strategy::PaddingPruning, k).unwrap();
            prop_assert_eq!(pp.len(), 1);
            prop_assert_eq!(pp[0].iter().flatten().count(), n.min(k));
        }
    }
}
