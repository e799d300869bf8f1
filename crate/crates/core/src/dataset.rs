//! Graph-classification datasets in the TU flat-file format.
//!
//! Files for a dataset `DS` live in one directory:
//!
//! * `DS_A.txt`: one directed arc `i, j` per line, 1-based global node ids
//! * `DS_graph_indicator.txt`: line n holds the graph id of global node n
//! * `DS_graph_labels.txt`: line g holds the class label of graph g
//! * `DS_node_labels.txt` (optional): line n holds the integer tag of node n
//! * `DS_node_attributes.txt` (optional): line n holds comma-separated floats
//!
//! Global ids are converted to 0-based per-graph local indices on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Matrix;

pub const FOLD_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("dataset directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path} has {found} lines, expected {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("need at least {needed} graphs, dataset has {found}")]
    TooFewGraphs { needed: usize, found: usize },
}

/// One undirected weighted connection stored as a directed arc; every arc has
/// its reverse stored too.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// One labeled graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInstance {
    pub node_count: usize,
    /// Sorted by `(source, target)`, symmetric.
    pub edges: Vec<Edge>,
    pub node_tags: Option<Vec<usize>>,
    pub node_attributes: Option<Matrix>,
    pub label: usize,
}

impl GraphInstance {
    /// Builds a graph from undirected `(i, j, w)` connections. Both arc
    /// directions are stored; repeated pairs keep the last weight.
    pub fn from_undirected(
        node_count: usize,
        connections: &[(usize, usize, f64)],
        label: usize,
    ) -> Result<Self, DatasetError> {
        let mut arcs = BTreeMap::new();
        for &(i, j, w) in connections {
            arcs.insert((i, j), w);
            arcs.insert((j, i), w);
        }
        let g = GraphInstance {
            node_count,
            edges: arcs
                .into_iter()
                .map(|((source, target), weight)| Edge { source, target, weight })
                .collect(),
            node_tags: None,
            node_attributes: None,
            label,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_tags(mut self, tags: Vec<usize>) -> Result<Self, DatasetError> {
        self.node_tags = Some(tags);
        self.validate()?;
        Ok(self)
    }

    pub fn with_attributes(mut self, attrs: Matrix) -> Result<Self, DatasetError> {
        self.node_attributes = Some(attrs);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidGraph(m));
        if self.node_count == 0 {
            return bad("graph has no nodes".into());
        }
        for e in &self.edges {
            if e.source >= self.node_count || e.target >= self.node_count {
                return bad(format!(
                    "edge ({}, {}) outside 0..{}",
                    e.source, e.target, self.node_count
                ));
            }
            if !e.weight.is_finite() {
                return bad(format!("edge ({}, {}) has weight {}", e.source, e.target, e.weight));
            }
        }
        if !self
            .edges
            .windows(2)
            .all(|w| (w[0].source, w[0].target) < (w[1].source, w[1].target))
        {
            return bad("edges are not sorted and unique".into());
        }
        for e in &self.edges {
            match self.weight(e.target, e.source) {
                Some(w) if w == e.weight => {}
                _ => return bad(format!("edge ({}, {}) has no matching reverse", e.source, e.target)),
            }
        }
        if let Some(tags) = &self.node_tags {
            if tags.len() != self.node_count {
                return bad(format!("{} tags for {} nodes", tags.len(), self.node_count));
            }
        }
        if let Some(attrs) = &self.node_attributes {
            if attrs.rows() != self.node_count {
                return bad(format!("{} attribute rows for {} nodes", attrs.rows(), self.node_count));
            }
        }
        Ok(())
    }

    pub fn weight(&self, source: usize, target: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.source, e.target).cmp(&(source, target)))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    /// Neighbor lists in ascending index order, with weights.
    pub fn adjacency_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            adj[e.source].push((e.target, e.weight));
        }
        adj
    }

    /// Dense node_count × node_count connection-weight matrix.
    pub fn weight_matrix(&self) -> Matrix {
        let mut w = Matrix::zeros(self.node_count, self.node_count);
        for e in &self.edges {
            w.set(e.source, e.target, e.weight);
        }
        w
    }

    /// Number of undirected connections (self-loops count once).
    pub fn undirected_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.source <= e.target).count()
    }

    /// Same graph with node `i` renamed to `new_index[i]`.
    pub fn relabeled(&self, new_index: &[usize]) -> GraphInstance {
        assert_eq!(new_index.len(), self.node_count);
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                source: new_index[e.source],
                target: new_index[e.target],
                weight: e.weight,
            })
            .collect();
        edges.sort_by_key(|e| (e.source, e.target));
        let node_tags = self.node_tags.as_ref().map(|tags| {
            let mut out = vec![0; tags.len()];
            for (i, &t) in tags.iter().enumerate() {
                out[new_index[i]] = t;
            }
            out
        });
        let node_attributes = self.node_attributes.as_ref().map(|a| {
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                out.row_mut(new_index[i]).copy_from_slice(a.row(i));
            }
            out
        });
        GraphInstance {
            node_count: self.node_count,
            edges,
            node_tags,
            node_attributes,
            label: self.label,
        }
    }
}

/// A named set of labeled graphs plus the statistics the model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<GraphInstance>,
    pub class_count: usize,
    pub attr_dim: usize,
    pub tag_vocab_size: usize,
    pub max_nodes: usize,
    pub avg_nodes: f64,
    /// On-disk label of dense class `c` is `label_values[c]`.
    pub label_values: Vec<i64>,
    /// On-disk tag of dense tag `t` is `tag_values[t]`.
    pub tag_values: Vec<i64>,
}

impl GraphDataset {
    /// Assembles a dataset from graphs whose labels and tags are already dense.
    pub fn from_graphs(
        name: impl Into<String>,
        graphs: Vec<GraphInstance>,
    ) -> Result<Self, DatasetError> {
        if graphs.is_empty() {
            return Err(DatasetError::TooFewGraphs { needed: 1, found: 0 });
        }
        for g in &graphs {
            g.validate()?;
        }
        let class_count = graphs.iter().map(|g| g.label).max().unwrap() + 1;
        let tag_vocab_size = graphs
            .iter()
            .filter_map(|g| g.node_tags.as_ref())
            .flat_map(|t| t.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let dims: BTreeSet<usize> = graphs
            .iter()
            .map(|g| g.node_attributes.as_ref().map_or(0, Matrix::cols))
            .collect();
        if dims.len() > 1 {
            return Err(DatasetError::InvalidGraph(format!(
                "mixed attribute widths {dims:?}"
            )));
        }
        let attr_dim = dims.into_iter().next().unwrap_or(0);
        let max_nodes = graphs.iter().map(|g| g.node_count).max().unwrap();
        let avg_nodes =
            graphs.iter().map(|g| g.node_count as f64).sum::<f64>() / graphs.len() as f64;
        Ok(GraphDataset {
            name: name.into(),
            class_count,
            attr_dim,
            tag_vocab_size,
            max_nodes,
            avg_nodes,
            label_values: (0..class_count as i64).collect(),
            tag_values: (0..tag_vocab_size as i64).collect(),
            graphs,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn has_tags(&self) -> bool {
        self.graphs.iter().any(|g| g.node_tags.is_some())
    }

    /// Table-style one-line summary.
    pub fn summary_line(&self) -> String {
        format!(
            "{} graphs, {} classes, avg {:.1}, max {}",
            self.len(),
            self.class_count,
            self.avg_nodes,
            self.max_nodes
        )
    }
}

fn file_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path, required: bool) -> Result<Option<Vec<String>>, DatasetError> {
    if !path.exists() {
        return if required {
            Err(DatasetError::MissingFile(path.to_path_buf()))
        } else {
            Ok(None)
        };
    }
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    while lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(Some(lines))
}

fn parse_int(path: &Path, line: usize, s: &str) -> Result<i64, DatasetError> {
    s.trim().parse().map_err(|_| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("expected an integer, found {s:?}"),
    })
}

/// Loads `<dir>/<name>_*.txt`.
pub fn load_tu_dataset(dir: &Path, name: &str) -> Result<GraphDataset, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::MissingDirectory(dir.to_path_buf()));
    }
    let a_path = file_path(dir, name, "A");
    let ind_path = file_path(dir, name, "graph_indicator");
    let lab_path = file_path(dir, name, "graph_labels");
    let tag_path = file_path(dir, name, "node_labels");
    let attr_path = file_path(dir, name, "node_attributes");

    let indicator = read_lines(&ind_path, true)?.unwrap();
    let arcs = read_lines(&a_path, true)?.unwrap();
    let graph_labels = read_lines(&lab_path, true)?.unwrap();
    let node_tags = read_lines(&tag_path, false)?;
    let node_attrs = read_lines(&attr_path, false)?;

    // Global node n (0-based) -> (graph, local index).
    let mut graph_of = Vec::with_capacity(indicator.len());
    let mut sizes: Vec<usize> = Vec::new();
    let mut local = Vec::with_capacity(indicator.len());
    for (n, line) in indicator.iter().enumerate() {
        let gid = parse_int(&ind_path, n + 1, line)?;
        if gid < 1 {
            return Err(DatasetError::Parse {
                path: ind_path.clone(),
                line: n + 1,
                message: format!("graph id {gid} is not positive"),
            });
        }
        let g = (gid - 1) as usize;
        if g >= sizes.len() {
            sizes.resize(g + 1, 0);
        }
        graph_of.push(g);
        local.push(sizes[g]);
        sizes[g] += 1;
    }
    let graph_count = sizes.len();
    if graph_labels.len() != graph_count {
        return Err(DatasetError::LengthMismatch {
            path: lab_path,
            expected: graph_count,
            found: graph_labels.len(),
        });
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(DatasetError::InvalidGraph(format!(
            "graph id {} has no nodes in {}",
            g + 1,
            ind_path.display()
        )));
    }

    let mut arc_maps: Vec<BTreeMap<(usize, usize), f64>> = vec![BTreeMap::new(); graph_count];
    let mut duplicates = 0usize;
    for (ln, line) in arcs.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(i), Some(j), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(DatasetError::Parse {
                path: a_path.clone(),
                line: ln + 1,
                message: format!("expected `i, j`, found {line:?}"),
            });
        };
        let (i, j) = (parse_int(&a_path, ln + 1, i)?, parse_int(&a_path, ln + 1, j)?);
        let in_range = |v: i64| v >= 1 && (v as usize) <= graph_of.len();
        if !in_range(i) || !in_range(j) {
            return Err(DatasetError::Parse {
                path: a_path.clone(),
                line: ln + 1,
                message: format!("node id out of range 1..={}", graph_of.len()),
            });
        }
        let (i, j) = (i as usize - 1, j as usize - 1);
        if graph_of[i] != graph_of[j] {
            return Err(DatasetError::Parse {
                path: a_path.clone(),
                line: ln + 1,
                message: format!(
                    "edge joins node {} of graph {} to node {} of graph {}",
                    i + 1,
                    graph_of[i] + 1,
                    j + 1,
                    graph_of[j] + 1
                ),
            });
        }
        let map = &mut arc_maps[graph_of[i]];
        if map.insert((local[i], local[j]), 1.0).is_some() {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{}: collapsed {duplicates} duplicate arcs", a_path.display());
    }
    let mut asymmetric = 0usize;
    for map in &mut arc_maps {
        let missing: Vec<(usize, usize)> = map
            .keys()
            .filter(|&&(i, j)| !map.contains_key(&(j, i)))
            .copied()
            .collect();
        asymmetric += missing.len();
        for (i, j) in missing {
            let w = map[&(i, j)];
            map.insert((j, i), w);
        }
    }
    if asymmetric > 0 {
        log::warn!("{}: added {asymmetric} missing reverse arcs", a_path.display());
    }

    let raw_labels: Vec<i64> = graph_labels
        .iter()
        .enumerate()
        .map(|(g, l)| parse_int(&lab_path, g + 1, l))
        .collect::<Result<_, _>>()?;
    let label_values: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let (tags, tag_values) = match &node_tags {
        Some(lines) => {
            if lines.len() != graph_of.len() {
                return Err(DatasetError::LengthMismatch {
                    path: tag_path,
                    expected: graph_of.len(),
                    found: lines.len(),
                });
            }
            let raw: Vec<i64> = lines
                .iter()
                .enumerate()
                .map(|(n, l)| parse_int(&tag_path, n + 1, l))
                .collect::<Result<_, _>>()?;
            let values: Vec<i64> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            (Some(raw), values)
        }
        None => (None, Vec::new()),
    };

    let attrs = match &node_attrs {
        Some(lines) => {
            if lines.len() != graph_of.len() {
                return Err(DatasetError::LengthMismatch {
                    path: attr_path,
                    expected: graph_of.len(),
                    found: lines.len(),
                });
            }
            let mut rows = Vec::with_capacity(lines.len());
            for (n, l) in lines.iter().enumerate() {
                let row: Vec<f64> = l
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| DatasetError::Parse {
                        path: attr_path.clone(),
                        line: n + 1,
                        message: format!("bad float: {e}"),
                    })?;
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(DatasetError::Parse {
                        path: attr_path.clone(),
                        line: n + 1,
                        message: "non-finite attribute".into(),
                    });
                }
                if n > 0 && row.len() != rows.first().map_or(0, Vec::len) {
                    return Err(DatasetError::Parse {
                        path: attr_path.clone(),
                        line: n + 1,
                        message: "attribute width differs from the first line".into(),
                    });
                }
                rows.push(row);
            }
            Some(rows)
        }
        None => None,
    };

    // Nodes of each graph in global order.
    let mut members: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (n, &g) in graph_of.iter().enumerate() {
        members[g].push(n);
    }

    let mut graphs = Vec::with_capacity(graph_count);
    for (g, nodes) in members.iter().enumerate() {
        let label = label_values.binary_search(&raw_labels[g]).unwrap();
        let edges = arc_maps[g]
            .iter()
            .map(|(&(source, target), &weight)| Edge { source, target, weight })
            .collect();
        let node_tags = tags.as_ref().map(|t| {
            nodes
                .iter()
                .map(|&n| tag_values.binary_search(&t[n]).unwrap())
                .collect()
        });
        let node_attributes = attrs.as_ref().map(|rows| {
            Matrix::from_rows(&nodes.iter().map(|&n| rows[n].clone()).collect::<Vec<_>>())
        });
        let graph = GraphInstance {
            node_count: nodes.len(),
            edges,
            node_tags,
            node_attributes,
            label,
        };
        graph.validate()?;
        graphs.push(graph);
    }

    let mut ds = GraphDataset::from_graphs(name, graphs)?;
    ds.class_count = label_values.len();
    ds.tag_vocab_size = tag_values.len();
    ds.label_values = label_values;
    ds.tag_values = tag_values;
    Ok(ds)
}

/// Writes the dataset back in TU format under `dir`.
pub fn write_tu_dataset(ds: &GraphDataset, dir: &Path) -> Result<(), DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;

    let (mut a, mut ind, mut labels, mut tags, mut attrs) =
        (String::new(), String::new(), String::new(), String::new(), String::new());
    let mut offset = 0usize;
    for (g, graph) in ds.graphs.iter().enumerate() {
        for e in &graph.edges {
            let _ = writeln!(a, "{}, {}", offset + e.source + 1, offset + e.target + 1);
        }
        for n in 0..graph.node_count {
            let _ = writeln!(ind, "{}", g + 1);
            if let Some(t) = &graph.node_tags {
                let _ = writeln!(tags, "{}", ds.tag_values[t[n]]);
            }
            if let Some(x) = &graph.node_attributes {
                let row: Vec<String> = x.row(n).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(attrs, "{}", row.join(", "));
            }
        }
        let _ = writeln!(labels, "{}", ds.label_values[graph.label]);
        offset += graph.node_count;
    }

    let write = |suffix: &str, body: &str| {
        let path = file_path(dir, &ds.name, suffix);
        fs::write(&path, body).map_err(io(&path))
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &labels)?;
    if ds.graphs.iter().any(|g| g.node_tags.is_some()) {
        write("node_labels", &tags)?;
    }
    if ds.attr_dim > 0 {
        write("node_attributes", &attrs)?;
    }
    Ok(())
}

/// Train/validation/test indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ten stratified 8:1:1 splits. Graphs of each class are shuffled and dealt
/// round-robin into ten buckets; fold `i` tests on bucket `i`, validates on
/// bucket `i + 1` and trains on the rest.
pub fn make_folds(ds: &GraphDataset, seed: u64) -> Result<Vec<FoldSplit>, DatasetError> {
    if ds.len() < FOLD_COUNT {
        return Err(DatasetError::TooFewGraphs {
            needed: FOLD_COUNT,
            found: ds.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count.max(1)];
    for (i, g) in ds.graphs.iter().enumerate() {
        by_class[g.label].push(i);
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); FOLD_COUNT];
    let mut next = 0usize;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            buckets[next % FOLD_COUNT].push(i);
            next += 1;
        }
    }
    for b in &mut buckets {
        b.sort_unstable();
    }

    Ok((0..FOLD_COUNT)
        .map(|fold| {
            let val_bucket = (fold + 1) % FOLD_COUNT;
            let mut train: Vec<usize> = buckets
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != fold && b != val_bucket)
                .flat_map(|(_, b)| b.iter().copied())
                .collect();
            train.sort_unstable();
            FoldSplit {
                fold_index: fold,
                train,
                validation: buckets[val_bucket].clone(),
                test: buckets[fold].clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, name: &str, files: &[(&str, &str)]) {
        for (suffix, body) in files {
            fs::write(file_path(dir, name, suffix), body).unwrap();
        }
    }

    fn toy_dataset(n: usize) -> GraphDataset {
        let graphs = (0..n)
            .map(|i| {
                let size = 2 + i % 5;
                let conns: Vec<_> = (1..size).map(|j| (j - 1, j, 1.0)).collect();
                GraphInstance::from_undirected(size, &conns, i % 3).unwrap()
            })
            .collect();
        GraphDataset::from_graphs("TOY", graphs).unwrap()
    }

    #[test]
    fn single_node_graph_with_empty_adjacency() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "ONE",
            &[("A", ""), ("graph_indicator", "1\n"), ("graph_labels", "5\n")],
        );
        let ds = load_tu_dataset(dir.path(), "ONE").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs[0].node_count, 1);
        assert!(ds.graphs[0].edges.is_empty());
        assert_eq!(ds.class_count, 1);
        assert_eq!(ds.label_values, vec![5]);
    }

    #[test]
    fn missing_mandatory_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), "X", &[("A", ""), ("graph_indicator", "1\n")]);
        let err = load_tu_dataset(dir.path(), "X").unwrap_err();
        assert!(err.to_string().contains("X_graph_labels.txt"), "{err}");
    }

    #[test]
    fn edge_across_graphs_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "X",
            &[
                ("A", "1, 2\n2, 1\n2, 3\n"),
                ("graph_indicator", "1\n1\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
        let err = load_tu_dataset(dir.path(), "X").unwrap_err();
        match err {
            DatasetError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "X",
            &[("A", ""), ("graph_indicator", "1\n2\n"), ("graph_labels", "0\n")],
        );
        assert!(matches!(
            load_tu_dataset(dir.path(), "X"),
            Err(DatasetError::LengthMismatch { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn duplicates_collapse_and_one_way_arcs_are_mirrored() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "X",
            &[
                ("A", "1,2\n1, 2\n2, 3\n3, 2\n"),
                ("graph_indicator", "1\n1\n1\n"),
                ("graph_labels", "-1\n"),
                ("node_labels", "7\n3\n7\n"),
            ],
        );
        let ds = load_tu_dataset(dir.path(), "X").unwrap();
        let g = &ds.graphs[0];
        assert_eq!(g.edges.len(), 4);
        assert_eq!(g.weight(1, 0), Some(1.0));
        assert_eq!(g.node_tags.as_ref().unwrap(), &vec![1, 0, 1]);
        assert_eq!(ds.tag_values, vec![3, 7]);
    }

    #[test]
    fn round_trip_preserves_structure() {
        let mut graphs = Vec::new();
        for i in 0..4 {
            let g = GraphInstance::from_undirected(3, &[(0, 1, 1.0), (1, 2, 1.0)], i % 2)
                .unwrap()
                .with_tags(vec![i % 3, 1, 0])
                .unwrap()
                .with_attributes(Matrix::from_vec(3, 2, vec![0.1, -2.5, 3.0, 1e-7, 0.0, 42.0]))
                .unwrap();
            graphs.push(g);
        }
        let ds = GraphDataset::from_graphs("RT", graphs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path()).unwrap();
        let back = load_tu_dataset(dir.path(), "RT").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn folds_partition_and_rotate() {
        let ds = toy_dataset(188);
        let folds = make_folds(&ds, 3).unwrap();
        assert_eq!(folds.len(), 10);
        let mut test_seen = vec![0; ds.len()];
        let mut val_seen = vec![0; ds.len()];
        for f in &folds {
            assert!(f.test.len() == 18 || f.test.len() == 19);
            let total = f.train.len() + f.validation.len() + f.test.len();
            assert_eq!(total, ds.len());
            let all: BTreeSet<_> = f
                .train
                .iter()
                .chain(&f.validation)
                .chain(&f.test)
                .collect();
            assert_eq!(all.len(), ds.len(), "parts overlap");
            for &i in &f.test {
                test_seen[i] += 1;
            }
            for &i in &f.validation {
                val_seen[i] += 1;
            }
        }
        assert!(test_seen.iter().all(|&c| c == 1));
        assert!(val_seen.iter().all(|&c| c == 1));
        assert_eq!(folds, make_folds(&ds, 3).unwrap());
        assert_ne!(folds, make_folds(&ds, 4).unwrap());
    }

    #[test]
    fn folds_are_stratified() {
        let ds = toy_dataset(300);
        for f in make_folds(&ds, 1).unwrap() {
            let mut counts = [0usize; 3];
            for &i in &f.test {
                counts[ds.graphs[i].label] += 1;
            }
            assert!(counts.iter().all(|&c| c == 10), "{counts:?}");
        }
    }

    #[test]
    fn too_few_graphs_for_folds() {
        assert!(matches!(
            make_folds(&toy_dataset(9), 0),
            Err(DatasetError::TooFewGraphs { needed: 10, found: 9 })
        ));
    }

    #[test]
    fn relabel_keeps_structure() {
        let g = GraphInstance::from_undirected(3, &[(0, 1, 2.0), (1, 2, 1.0)], 0)
            .unwrap()
            .with_tags(vec![5, 6, 7])
            .unwrap();
        let h = g.relabeled(&[2, 0, 1]);
        h.validate().unwrap();
        assert_eq!(h.weight(2, 0), Some(2.0));
        assert_eq!(h.node_tags.as_ref().unwrap(), &vec![6, 7, 5]);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(GraphInstance::from_undirected(2, &[(0, 2, 1.0)], 0).is_err());
        assert!(GraphInstance::from_undirected(0, &[], 0).is_err());
        let g = GraphInstance::from_undirected(2, &[(0, 1, 1.0)], 0).unwrap();
        assert!(g.with_tags(vec![1]).is_err());
    }
}
