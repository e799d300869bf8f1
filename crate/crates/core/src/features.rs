//! Order-invariant per-node inputs: degree, WL role code, adjacency row,
//! raw attributes, and the sinusoidal embedding used for integer features.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::{GraphDataset, GraphInstance};

pub const DEFAULT_WL_ITERATIONS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("embedding width must be even, got {0}")]
    OddWidth(usize),
    #[error("WL needs at least one iteration")]
    NoIterations,
    #[error("adjacency row length must be positive")]
    EmptyAdjacency,
    #[error("{codes} WL codes for a graph with {nodes} nodes")]
    CodeCount { codes: usize, nodes: usize },
}

/// Precomputed inputs of one node. The all-zero bundle marks a dummy slot.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureBundle {
    pub degree: usize,
    pub wl_code: usize,
    pub tag: Option<usize>,
    pub adjacency_row: Vec<f64>,
    pub raw_attr: Vec<f64>,
}

impl NodeFeatureBundle {
    pub fn dummy(n_adj: usize, attr_dim: usize) -> Self {
        NodeFeatureBundle {
            degree: 0,
            wl_code: 0,
            tag: None,
            adjacency_row: vec![0.0; n_adj],
            raw_attr: vec![0.0; attr_dim],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.degree == 0
            && self.wl_code == 0
            && self.tag.is_none()
            && self.adjacency_row.iter().all(|&v| v == 0.0)
            && self.raw_attr.iter().all(|&v| v == 0.0)
    }
}

/// Distinct-neighbor count per node; a self-loop counts once.
pub fn compute_degrees(g: &GraphInstance) -> Vec<usize> {
    let mut deg = vec![0; g.node_count];
    for e in &g.edges {
        deg[e.source] += 1;
    }
    deg
}

/// Sinusoidal embedding of a non-negative integer:
/// `[2l] = sin(v / 10000^(2l/d))`, `[2l+1] = cos(v / 10000^((2l+1)/d))`.
pub fn positional_embedding(value: usize, width: usize) -> Result<Vec<f64>, FeatureError> {
    if !width.is_multiple_of(2) {
        return Err(FeatureError::OddWidth(width));
    }
    let v = value as f64;
    let d = width as f64;
    Ok((0..width)
        .map(|i| {
            let angle = v / 10000f64.powf(i as f64 / d);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

/// 1-WL colors for every graph of a collection, refined in lockstep with one
/// shared dictionary. Colors are ranks of sorted signatures, so they do not
/// depend on node or graph order within equal-signature classes.
///
/// Refinement stops after `iterations` rounds or when a round no longer
/// splits any color class, whichever comes first.
pub fn wl_codes_for_graphs(
    graphs: &[&GraphInstance],
    iterations: usize,
) -> Result<Vec<Vec<usize>>, FeatureError> {
    if iterations == 0 {
        return Err(FeatureError::NoIterations);
    }
    let adjacency: Vec<Vec<Vec<usize>>> = graphs
        .iter()
        .map(|g| {
            g.adjacency_lists()
                .into_iter()
                .map(|l| l.into_iter().map(|(j, _)| j).collect())
                .collect()
        })
        .collect();

    let initial: Vec<Vec<(bool, usize)>> = graphs
        .iter()
        .map(|g| match &g.node_tags {
            Some(tags) => tags.iter().map(|&t| (true, t)).collect(),
            None => compute_degrees(g).into_iter().map(|d| (false, d)).collect(),
        })
        .collect();
    let (mut colors, mut distinct) = compress(&initial);

    for _ in 0..iterations {
        let signatures: Vec<Vec<(usize, Vec<usize>)>> = colors
            .iter()
            .zip(&adjacency)
            .map(|(c, adj)| {
                adj.iter()
                    .enumerate()
                    .map(|(i, nbrs)| {
                        let mut ms: Vec<usize> = nbrs.iter().map(|&j| c[j]).collect();
                        ms.sort_unstable();
                        (c[i], ms)
                    })
                    .collect()
            })
            .collect();
        let (next, next_distinct) = compress(&signatures);
        if next_distinct == distinct {
            break;
        }
        colors = next;
        distinct = next_distinct;
    }
    Ok(colors)
}

/// Replaces every key by its rank among the distinct keys.
fn compress<K: Ord + Clone>(keys: &[Vec<K>]) -> (Vec<Vec<usize>>, usize) {
    let mut dict: BTreeMap<K, usize> = keys.iter().flatten().map(|k| (k.clone(), 0)).collect();
    for (rank, id) in dict.values_mut().enumerate() {
        *id = rank;
    }
    let out = keys
        .iter()
        .map(|ks| ks.iter().map(|k| dict[k]).collect())
        .collect();
    (out, dict.len())
}

/// WL codes of a single graph, identical to a one-graph collection.
pub fn compute_wl_codes(g: &GraphInstance, iterations: usize) -> Result<Vec<usize>, FeatureError> {
    Ok(wl_codes_for_graphs(&[g], iterations)?.pop().unwrap())
}

/// WL codes over a whole dataset with a shared dictionary.
pub fn dataset_wl_codes(ds: &GraphDataset, iterations: usize) -> Result<Vec<Vec<usize>>, FeatureError> {
    let refs: Vec<&GraphInstance> = ds.graphs.iter().collect();
    wl_codes_for_graphs(&refs, iterations)
}

/// Row `i` of the weight matrix under the fixed index order, zero-padded or
/// truncated to `n_adj`.
pub fn adjacency_row(g: &GraphInstance, node: usize, n_adj: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_adj];
    for e in g.edges.iter().filter(|e| e.source == node && e.target < n_adj) {
        row[e.target] = e.weight;
    }
    row
}

/// Bundles from precomputed WL codes.
pub fn bundles_with_codes(
    g: &GraphInstance,
    wl_codes: &[usize],
    n_adj: usize,
) -> Result<Vec<NodeFeatureBundle>, FeatureError> {
    if n_adj == 0 {
        return Err(FeatureError::EmptyAdjacency);
    }
    if wl_codes.len() != g.node_count {
        return Err(FeatureError::CodeCount {
            codes: wl_codes.len(),
            nodes: g.node_count,
        });
    }
    let degrees = compute_degrees(g);
    let mut rows = vec![vec![0.0; n_adj]; g.node_count];
    for e in g.edges.iter().filter(|e| e.target < n_adj) {
        rows[e.source][e.target] = e.weight;
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, adjacency_row)| NodeFeatureBundle {
            degree: degrees[i],
            wl_code: wl_codes[i],
            tag: g.node_tags.as_ref().map(|t| t[i]),
            adjacency_row,
            raw_attr: g
                .node_attributes
                .as_ref()
                .map_or_else(Vec::new, |x| x.row(i).to_vec()),
        })
        .collect())
}

/// Bundles for a graph on its own, with WL codes from that graph alone.
pub fn build_bundles(
    g: &GraphInstance,
    n_adj: usize,
    wl_iterations: usize,
) -> Result<Vec<NodeFeatureBundle>, FeatureError> {
    let codes = compute_wl_codes(g, wl_iterations)?;
    bundles_with_codes(g, &codes, n_adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GraphInstance;
    use proptest::prelude::*;

    fn graph(n: usize, conns: &[(usize, usize)]) -> GraphInstance {
        let c: Vec<_> = conns.iter().map(|&(i, j)| (i, j, 1.0)).collect();
        GraphInstance::from_undirected(n, &c, 0).unwrap()
    }

    fn path3() -> GraphInstance {
        graph(3, &[(0, 1), (1, 2)])
    }

    fn triangle() -> GraphInstance {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }

    /// Nested-string refinement: a node's color is the literal text of its
    /// refinement history, so equal strings mean equal colors.
    fn oracle(graphs: &[&GraphInstance], iterations: usize) -> Vec<Vec<String>> {
        let mut cur: Vec<Vec<String>> = graphs
            .iter()
            .map(|g| {
                let deg = compute_degrees(g);
                (0..g.node_count)
                    .map(|i| match &g.node_tags {
                        Some(t) => format!("t{}", t[i]),
                        None => format!("d{}", deg[i]),
                    })
                    .collect()
            })
            .collect();
        let count = |c: &Vec<Vec<String>>| {
            c.iter().flatten().collect::<std::collections::BTreeSet<_>>().len()
        };
        for _ in 0..iterations {
            let next: Vec<Vec<String>> = graphs
                .iter()
                .zip(&cur)
                .map(|(g, c)| {
                    (0..g.node_count)
                        .map(|i| {
                            let mut nb: Vec<&String> = g
                                .edges
                                .iter()
                                .filter(|e| e.source == i)
                                .map(|e| &c[e.target])
                                .collect();
                            nb.sort();
                            let inner: Vec<&str> = nb.iter().map(|s| s.as_str()).collect();
                            format!("({}|{})", c[i], inner.join(","))
                        })
                        .collect()
                })
                .collect();
            if count(&next) == count(&cur) {
                break;
            }
            cur = next;
        }
        cur
    }

    fn same_partition(a: &[Vec<usize>], b: &[Vec<String>]) -> bool {
        let fa: Vec<&usize> = a.iter().flatten().collect();
        let fb: Vec<&String> = b.iter().flatten().collect();
        (0..fa.len()).all(|i| (0..fa.len()).all(|j| (fa[i] == fa[j]) == (fb[i] == fb[j])))
    }

    #[test]
    fn degrees() {
        assert_eq!(compute_degrees(&graph(1, &[])), vec![0]);
        assert_eq!(compute_degrees(&triangle()), vec![2, 2, 2]);
        let looped = graph(2, &[(0, 0), (0, 1)]);
        assert_eq!(compute_degrees(&looped), vec![2, 1]);
    }

    #[test]
    fn embedding_values() {
        assert_eq!(positional_embedding(0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = positional_embedding(1, 4).unwrap();
        let expect = [
            1f64.sin(),
            (1.0 / 10000f64.powf(0.25)).cos(),
            (1.0 / 10000f64.powf(0.5)).sin(),
            (1.0 / 10000f64.powf(0.75)).cos(),
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(positional_embedding(3, 5), Err(FeatureError::OddWidth(5)));
    }

    #[test]
    fn wl_examples() {
        let edgeless = compute_wl_codes(&graph(4, &[]), 2).unwrap();
        assert!(edgeless.iter().all(|&c| c == edgeless[0]));

        let p = compute_wl_codes(&path3(), 1).unwrap();
        assert_eq!(p[0], p[2]);
        assert_ne!(p[0], p[1]);

        let (t, p) = (triangle(), path3());
        let codes = wl_codes_for_graphs(&[&t, &p], 2).unwrap();
        assert!(codes[0].iter().all(|c| !codes[1].contains(c)));
        assert_eq!(compute_wl_codes(&graph(1, &[]), 0), Err(FeatureError::NoIterations));
    }

    #[test]
    fn tags_seed_the_colors() {
        let g = graph(3, &[(0, 1), (1, 2)]).with_tags(vec![0, 0, 1]).unwrap();
        let c = compute_wl_codes(&g, 2).unwrap();
        assert_ne!(c[0], c[2]);
    }

    #[test]
    fn bundles() {
        let g = graph(2, &[(0, 1)]);
        let b = build_bundles(&g, 4, 2).unwrap();
        assert_eq!(b[0].adjacency_row, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b[1].adjacency_row, vec![1.0, 0.0, 0.0, 0.0]);
        let iso = build_bundles(&graph(3, &[(0, 1)]), 3, 2).unwrap();
        assert!(iso[2].adjacency_row.iter().all(|&v| v == 0.0));
        assert!(NodeFeatureBundle::dummy(3, 2).is_zero());
        assert_eq!(build_bundles(&g, 0, 2), Err(FeatureError::EmptyAdjacency));
    }

    #[test]
    fn truncated_row_is_a_prefix() {
        let g = graph(6, &[(0, 1), (0, 3), (0, 5), (2, 4)]);
        let full = build_bundles(&g, 6, 2).unwrap();
        let short = build_bundles(&g, 4, 2).unwrap();
        for (f, s) in full.iter().zip(&short) {
            assert_eq!(&f.adjacency_row[..4], &s.adjacency_row[..]);
        }
    }

    fn arb_graph() -> impl Strategy<Value = GraphInstance> {
        (1usize..10).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..(n * 2)),
                proptest::option::of(proptest::collection::vec(0usize..3, n)),
            )
                .prop_map(|(n, es, tags)| {
                    let g = graph(n, &es);
                    match tags {
                        Some(t) => g.with_tags(t).unwrap(),
                        None => g,
                    }
                })
        })
    }

    fn arb_perm(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn wl_matches_oracle(gs in proptest::collection::vec(arb_graph(), 1..4), it in 1usize..4) {
            let refs: Vec<&GraphInstance> = gs.iter().collect();
            let codes = wl_codes_for_graphs(&refs, it).unwrap();
            prop_assert!(same_partition(&codes, &oracle(&refs, it)));
        }

        #[test]
        fn wl_permutation_invariant((g, perm) in arb_graph().prop_flat_map(|g| {
            let n = g.node_count;
            (Just(g), arb_perm(n))
        })) {
            let base = compute_wl_codes(&g, 3).unwrap();
            let moved = compute_wl_codes(&g.relabeled(&perm), 3).unwrap();
            for i in 0..g.node_count {
                prop_assert_eq!(base[i], moved[perm[i]]);
            }
        }

        #[test]
        fn wl_refines_monotonically(g in arb_graph(), t in 1usize..4) {
            let coarse = compute_wl_codes(&g, t).unwrap();
            let fine = compute_wl_codes(&g, t + 1).unwrap();
            for i in 0..g.node_count {
                for j in 0..g.node_count {
                    if fine[i] == fine[j] {
                        prop_assert_eq!(coarse[i], coarse[j]);
                    }
                }
            }
        }

        #[test]
        fn degree_sum_is_twice_edges(g in arb_graph()) {
            let loops = g.edges.iter().filter(|e| e.source == e.target).count();
            let sum: usize = compute_degrees(&g).iter().sum();
            prop_assert_eq!(sum, 2 * g.undirected_edge_count() - loops);
        }

        #[test]
        fn embedding_bounded(v in 0usize..100_000, half in 1usize..64) {
            let e = positional_embedding(v, half * 2).unwrap();
            prop_assert!(e.iter().all(|x| (-1.0..=1.0).contains(x)));
            prop_assert_eq!(e, positional_embedding(v, half * 2).unwrap());
        }
    }
}
