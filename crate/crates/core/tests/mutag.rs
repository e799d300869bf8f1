//! End-to-end checks against the MUTAG files shipped under `data/`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segbert::dataset::{load_tu_dataset, make_folds, write_tu_dataset, GraphDataset, FOLD_COUNT};
use segbert::features::{compute_degrees, compute_wl_codes, dataset_wl_codes};
use segbert::model::{prepare_dataset, random_order, ModelConfig, ResidualMode};
use segbert::training::{pretrain, PretrainTask, TrainConfig};
use segbert::unify::{Strategy, UnifyPlan};

fn mutag_dir() -> PathBuf {
    std::env::var_os("SEGBERT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
        .join("MUTAG")
}

fn mutag() -> GraphDataset {
    load_tu_dataset(&mutag_dir(), "MUTAG").expect("MUTAG is available")
}

fn raw_ints(suffix: &str) -> Vec<Vec<usize>> {
    fs::read_to_string(mutag_dir().join(format!("MUTAG_{suffix}.txt")))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|t| t.trim().parse().unwrap()).collect())
        .collect()
}

#[test]
fn statistics() {
    let ds = mutag();
    assert_eq!(ds.summary_line(), "188 graphs, 2 classes, avg 17.9, max 28");
    assert_eq!(ds.attr_dim, 0);
    assert_eq!(ds.tag_vocab_size, 7);
    assert_eq!(ds.label_values, vec![-1, 1]);
    let positives = ds.graphs.iter().filter(|g| g.label == 1).count();
    assert_eq!(positives, 125);
}

/// Degrees counted straight from the arc list.
#[test]
fn degrees_match_raw_arc_counts() {
    let ds = mutag();
    let indicator: Vec<usize> = raw_ints("graph_indicator").into_iter().map(|r| r[0]).collect();
    let mut offset = vec![0usize; ds.len() + 1];
    for &g in &indicator {
        offset[g] += 1;
    }
    for g in 1..=ds.len() {
        offset[g] += offset[g - 1];
    }
    let mut expected: Vec<Vec<usize>> = ds.graphs.iter().map(|g| vec![0; g.node_count]).collect();
    for arc in raw_ints("A") {
        let src = arc[0];
        let g = indicator[src - 1];
        expected[g - 1][src - 1 - offset[g - 1]] += 1;
    }
    for (g, want) in ds.graphs.iter().zip(&expected) {
        assert_eq!(&compute_degrees(g), want);
    }
}

#[test]
fn write_then_load_is_identity() {
    let ds = mutag();
    let dir = tempfile::tempdir().unwrap();
    write_tu_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_tu_dataset(dir.path(), "MUTAG").unwrap(), ds);
}

#[test]
fn folds_partition_and_stratify() {
    let ds = mutag();
    let folds = make_folds(&ds, 0).unwrap();
    assert_eq!(folds.len(), FOLD_COUNT);
    let mut tested: BTreeSet<usize> = BTreeSet::new();
    for f in &folds {
        let all: BTreeSet<usize> = f.train.iter().chain(&f.validation).chain(&f.test).copied().collect();
        assert_eq!(all.len(), ds.len(), "fold {} overlaps or misses graphs", f.fold_index);
        assert!((18..=19).contains(&f.test.len()));
        let pos = f.test.iter().filter(|&&i| ds.graphs[i].label == 1).count();
        assert!((12..=13).contains(&pos), "fold {} has {pos} positives", f.fold_index);
        tested.extend(&f.test);
    }
    assert_eq!(tested.len(), ds.len());
    assert_ne!(make_folds(&ds, 1).unwrap(), folds);
}

#[test]
fn shared_codes_refine_per_graph_codes() {
    let ds = mutag();
    let shared = dataset_wl_codes(&ds, 2).unwrap();
    for (g, s) in ds.graphs.iter().zip(&shared) {
        let local = compute_wl_codes(g, 2).unwrap();
        for i in 0..g.node_count {
            for j in 0..g.node_count {
                if s[i] == s[j] {
                    assert_eq!(local[i], local[j]);
                }
            }
        }
    }
}

#[test]
fn segment_shifting_covers_the_largest_graph() {
    let ds = mutag();
    let plan = UnifyPlan::for_dataset(&ds, Strategy::SegmentShifting, Some(10)).unwrap();
    let cfg = ModelConfig::for_dataset(&ds, &plan, ResidualMode::Raw);
    let prepared = prepare_dataset(&ds, &plan, &cfg, 2).unwrap();
    let (idx, g) = ds.graphs.iter().enumerate().max_by_key(|(_, g)| g.node_count).unwrap();
    assert_eq!(g.node_count, 28);
    assert_eq!(prepared[idx].segment_count, 3);
    assert_eq!(prepared[idx].kept_nodes.len(), 28);
    assert_eq!(plan.n_adj, 30);
}

/// Pre-training at the default rate lowers its loss over ten epochs. Dropout
/// makes single epochs noisy, so halves are compared.
#[test]
fn structure_pretraining_reduces_loss() {
    let ds = mutag();
    let plan = UnifyPlan::for_dataset(&ds, Strategy::PaddingPruning, None).unwrap();
    let cfg = ModelConfig::for_dataset(&ds, &plan, ResidualMode::None);
    let prepared = prepare_dataset(&ds, &plan, &cfg, 2).unwrap();
    let train = TrainConfig {
        pretrain_tasks: vec![PretrainTask::Structure, PretrainTask::Reconstruction],
        pretrain_epochs: 10,
        ..TrainConfig::default()
    };
    let (params, losses) = pretrain(&prepared, &cfg, &train).unwrap();
    assert_eq!(losses.len(), 10);
    assert!(params.is_finite());
    let first: f64 = losses[..5].iter().sum();
    let second: f64 = losses[5..].iter().sum();
    assert!(second < first && losses[9] < losses[0], "losses {losses:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Renumbering a graph's nodes permutes its degrees and WL codes.
    #[test]
    fn relabeling_permutes_codes(index in 0usize..188, seed in any::<u64>()) {
        let ds = mutag();
        let g = &ds.graphs[index];
        let perm = random_order(g.node_count, &mut ChaCha8Rng::seed_from_u64(seed));
        let h = g.relabeled(&perm);
        let (dg, dh) = (compute_degrees(g), compute_degrees(&h));
        let (cg, ch) = (compute_wl_codes(g, 3).unwrap(), compute_wl_codes(&h, 3).unwrap());
        for v in 0..g.node_count {
            prop_assert_eq!(dg[v], dh[perm[v]]);
            prop_assert_eq!(cg[v], ch[perm[v]]);
        }
    }
}
