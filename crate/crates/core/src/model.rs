//! Segmented graph transformer: summed input channels, post-norm attention
//! layers with an optional raw-feature residual, mean fusion over real
//! nodes, and classification / reconstruction / structure heads.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, AutodiffError, Matrix, Mode, Tape, Tensor};
use crate::dataset::{GraphDataset, GraphInstance};
use crate::features::{
    bundles_with_codes, dataset_wl_codes, positional_embedding, FeatureError, NodeFeatureBundle,
};
use crate::unify::{unify_with_order, Segment, UnifyError, UnifyPlan};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGBERT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Unify(#[from] UnifyError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("graph has no real nodes in its segments")]
    NoRealNodes,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    None,
    Raw,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::None => "none",
            ResidualMode::Raw => "raw",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ResidualMode::None),
            "raw" => Ok(ResidualMode::Raw),
            other => Err(format!("unknown residual mode {other:?} (expected none or raw)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub dropout_hidden: f64,
    pub dropout_attn: f64,
    pub residual: ResidualMode,
    pub attr_dim: usize,
    pub n_adj: usize,
    pub classes: usize,
    pub tag_vocab_size: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            heads: 2,
            layers: 2,
            intermediate: 32,
            dropout_hidden: 0.5,
            dropout_attn: 0.3,
            residual: ResidualMode::None,
            attr_dim: 0,
            n_adj: 1,
            classes: 2,
            tag_vocab_size: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Default hyperparameters with the data-dependent widths of `ds`.
    pub fn for_dataset(ds: &GraphDataset, plan: &UnifyPlan, residual: ResidualMode) -> Self {
        ModelConfig {
            residual,
            attr_dim: ds.attr_dim,
            n_adj: plan.n_adj,
            classes: ds.class_count,
            tag_vocab_size: ds.tag_vocab_size,
            ..ModelConfig::default()
        }
    }

    /// Width of the raw matrix feeding the residual and reconstruction:
    /// attributes if present, adjacency rows otherwise.
    pub fn raw_width(&self) -> usize {
        if self.attr_dim > 0 {
            self.attr_dim
        } else {
            self.n_adj
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (name, v) in [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("intermediate", self.intermediate),
            ("n_adj", self.n_adj),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden {} must be even", self.hidden));
        }
        for (name, r) in [("dropout_hidden", self.dropout_hidden), ("dropout_attn", self.dropout_attn)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1)"));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerNormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNormIdx,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    attr: Option<Linear>,
    adj_in: Linear,
    adj_out: Linear,
    layers: Vec<LayerIdx>,
    residual: Option<Linear>,
    classifier: Linear,
    reconstruction: Linear,
}

/// Named parameter tensors. Weights are stored `in × out` and applied as
/// `x @ W + b`.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    layout: Layout,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, m: Matrix) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    fn truncated(&mut self, rows: usize, cols: usize) -> Matrix {
        let normal = Normal::new(0.0, self.std).unwrap();
        let data = (0..rows * cols)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Linear {
        let w = self.truncated(input, output);
        Linear {
            w: self.push(format!("{prefix}.weight"), w),
            b: self.push(format!("{prefix}.bias"), Matrix::zeros(1, output)),
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> LayerNormIdx {
        LayerNormIdx {
            gamma: self.push(format!("{prefix}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: self.push(format!("{prefix}.beta"), Matrix::zeros(1, width)),
        }
    }
}

impl ModelParams {
    /// Truncated-normal weights (cut at two standard deviations), zero biases,
    /// unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
            std: config.init_std,
        };
        let h = config.hidden;
        let attr = (config.attr_dim > 0).then(|| b.linear("embed.attributes", config.attr_dim, h));
        let adj_in = b.linear("embed.adjacency.0", config.n_adj, h);
        let adj_out = b.linear("embed.adjacency.1", h, h);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerIdx {
                    query: b.linear(&format!("{p}.attn.query"), h, h),
                    key: b.linear(&format!("{p}.attn.key"), h, h),
                    value: b.linear(&format!("{p}.attn.value"), h, h),
                    output: b.linear(&format!("{p}.attn.output"), h, h),
                    attn_norm: b.norm(&format!("{p}.attn.norm"), h),
                    ff_in: b.linear(&format!("{p}.ffn.in"), h, config.intermediate),
                    ff_out: b.linear(&format!("{p}.ffn.out"), config.intermediate, h),
                    ff_norm: b.norm(&format!("{p}.ffn.norm"), h),
                }
            })
            .collect();
        let residual = (config.residual == ResidualMode::Raw)
            .then(|| b.linear("residual.raw", config.raw_width(), h));
        let classifier = b.linear("head.classifier", h, config.classes);
        let reconstruction = b.linear("head.reconstruction", h, config.raw_width());
        let layout = Layout {
            attr,
            adj_in,
            adj_out,
            layers,
            residual,
            classifier,
            reconstruction,
        };
        Ok(ModelParams {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Writes `magic, version, count` then per tensor
    /// `name_len, name, rows, cols, values` (integers u32 LE, values f64 LE).
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Loads tensors by name into a freshly initialized model of `config`.
    /// Every expected name must be present with a matching shape.
    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self, ModelError> {
        let mut params = ModelParams::init(config, 0)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let err = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cur.len() < n {
                return Err(err("truncated file"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_of(take(4)?);
        if version != CHECKPOINT_VERSION as usize {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32_of(take(4)?);
        let mut seen = vec![false; params.tensors.len()];
        for _ in 0..count {
            let len = u32_of(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| err("bad name"))?;
            let (rows, cols) = (u32_of(take(4)?), u32_of(take(4)?));
            let data: Vec<f64> = take(rows * cols * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let i = params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
            if params.tensors[i].shape() != (rows, cols) {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {rows}x{cols}, expected {:?}",
                    params.tensors[i].shape()
                )));
            }
            params.tensors[i] = Matrix::from_vec(rows, cols, data);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Checkpoint(format!("missing tensor {}", params.names[i])));
        }
        Ok(params)
    }
}

/// Per-graph model inputs, built once per dataset. Rows of the stacked
/// matrices are `segment * k + slot`.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub label: usize,
    pub k: usize,
    pub segment_count: usize,
    /// Positional channels summed: degree, WL code, and tag when present.
    pub constant: Matrix,
    pub adjacency: Matrix,
    pub attributes: Matrix,
    /// Nodes present in some segment, ascending.
    pub kept_nodes: Vec<usize>,
    /// Stacked row holding each node of `kept_nodes`.
    pub kept_rows: Vec<usize>,
    /// Connection weights among `kept_nodes`.
    pub weight_target: Matrix,
    /// Raw matrix rows of `kept_nodes`.
    pub raw_target: Matrix,
}

impl PreparedGraph {
    pub fn rows(&self) -> usize {
        self.segment_count * self.k
    }
}

/// Sinusoidal part of the initial embedding of one slot.
pub fn constant_channels(bundle: &NodeFeatureBundle, hidden: usize) -> Result<Vec<f64>, FeatureError> {
    let mut out = positional_embedding(bundle.degree, hidden)?;
    for (o, v) in out.iter_mut().zip(positional_embedding(bundle.wl_code, hidden)?) {
        *o += v;
    }
    if let Some(tag) = bundle.tag {
        for (o, v) in out.iter_mut().zip(positional_embedding(tag, hidden)?) {
            *o += v;
        }
    }
    Ok(out)
}

/// Turns unified segments into stacked model inputs.
pub fn prepare_segments(
    g: &GraphInstance,
    segments: &[Segment],
    config: &ModelConfig,
) -> Result<PreparedGraph, ModelError> {
    let k = segments.first().map_or(0, Segment::k);
    let rows = segments.len() * k;
    let mut constant = Matrix::zeros(rows, config.hidden);
    let mut adjacency = Matrix::zeros(rows, config.n_adj);
    let mut attributes = Matrix::zeros(rows, config.attr_dim);
    let mut located: Vec<(usize, usize)> = Vec::new();
    for (s, seg) in segments.iter().enumerate() {
        for (slot, (id, b)) in seg.node_ids.iter().zip(&seg.bundles).enumerate() {
            let r = s * k + slot;
            if b.adjacency_row.len() != config.n_adj || b.raw_attr.len() != config.attr_dim {
                return Err(ModelError::Config(format!(
                    "bundle widths ({}, {}) differ from config ({}, {})",
                    b.adjacency_row.len(),
                    b.raw_attr.len(),
                    config.n_adj,
                    config.attr_dim
                )));
            }
            constant.row_mut(r).copy_from_slice(&constant_channels(b, config.hidden)?);
            adjacency.row_mut(r).copy_from_slice(&b.adjacency_row);
            attributes.row_mut(r).copy_from_slice(&b.raw_attr);
            if let Some(node) = id {
                located.push((*node, r));
            }
        }
    }
    if located.is_empty() {
        return Err(ModelError::NoRealNodes);
    }
    located.sort_unstable();
    let kept_nodes: Vec<usize> = located.iter().map(|&(n, _)| n).collect();
    let kept_rows: Vec<usize> = located.iter().map(|&(_, r)| r).collect();

    let full = g.weight_matrix();
    let mut weight_target = Matrix::zeros(kept_nodes.len(), kept_nodes.len());
    for (a, &i) in kept_nodes.iter().enumerate() {
        for (b, &j) in kept_nodes.iter().enumerate() {
            weight_target.set(a, b, full.get(i, j));
        }
    }
    let raw_source = if config.attr_dim > 0 { &attributes } else { &adjacency };
    let mut raw_target = Matrix::zeros(kept_rows.len(), config.raw_width());
    for (a, &r) in kept_rows.iter().enumerate() {
        raw_target.row_mut(a).copy_from_slice(raw_source.row(r));
    }
    Ok(PreparedGraph {
        label: g.label,
        k,
        segment_count: segments.len(),
        constant,
        adjacency,
        attributes,
        kept_nodes,
        kept_rows,
        weight_target,
        raw_target,
    })
}

/// Prepares one graph serialized in `order`.
pub fn prepare_graph(
    g: &GraphInstance,
    wl_codes: &[usize],
    plan: &UnifyPlan,
    config: &ModelConfig,
    order: &[usize],
) -> Result<PreparedGraph, ModelError> {
    let bundles = bundles_with_codes(g, wl_codes, plan.n_adj)?;
    let segments = unify_with_order(&bundles, order, plan)?;
    prepare_segments(g, &segments, config)
}

/// Prepares every graph in its on-disk node order.
pub fn prepare_dataset(
    ds: &GraphDataset,
    plan: &UnifyPlan,
    config: &ModelConfig,
    wl_iterations: usize,
) -> Result<Vec<PreparedGraph>, ModelError> {
    let codes = dataset_wl_codes(ds, wl_iterations)?;
    ds.graphs
        .iter()
        .zip(&codes)
        .map(|(g, c)| {
            let order: Vec<usize> = (0..g.node_count).collect();
            prepare_graph(g, c, plan, config, &order)
        })
        .collect()
}

/// Parameters registered on a tape, indexed like [`ModelParams::tensors`].
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Result<Self, ModelError> {
        let tensors = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, m)| tape.param(i, m))
            .collect::<Result<_, _>>()?;
        Ok(Bound { tensors })
    }

    /// Gradient per parameter, zero for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape, params: &ModelParams) -> Vec<Matrix> {
        self.tensors
            .iter()
            .zip(&params.tensors)
            .map(|(&t, p)| tape.grad(t).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    }

    fn linear(&self, tape: &mut Tape, x: Tensor, l: Linear) -> Result<Tensor, AutodiffError> {
        let y = tape.matmul(x, self.tensors[l.w])?;
        tape.add_row(y, self.tensors[l.b])
    }

    fn norm(&self, tape: &mut Tape, x: Tensor, n: LayerNormIdx) -> Result<Tensor, AutodiffError> {
        let y = tape.layer_norm(x)?;
        let y = tape.mul_row(y, self.tensors[n.gamma])?;
        tape.add_row(y, self.tensors[n.beta])
    }
}

/// Tape handles of one batched forward pass.
pub struct BatchForward {
    /// Real-node rows, grouped by graph, nodes ascending within a graph.
    pub h_final: Tensor,
    /// One fused vector per graph.
    pub z: Tensor,
    pub logits: Tensor,
    /// Graph `g` owns rows `offsets[g]..offsets[g + 1]` of `h_final`.
    pub offsets: Vec<usize>,
}

/// Initial embeddings of stacked slots: constant channels, adjacency
/// FC-Embed, and the attribute projection when attributes exist.
pub fn embed(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    constant: Tensor,
    adjacency: Tensor,
    attributes: Option<Tensor>,
) -> Result<Tensor, AutodiffError> {
    let lay = &params.layout;
    let a = bound.linear(tape, adjacency, lay.adj_in)?;
    let a = tape.gelu(a)?;
    let a = bound.linear(tape, a, lay.adj_out)?;
    let mut h = tape.add(constant, a)?;
    if let (Some(x), Some(l)) = (attributes, lay.attr) {
        let e = bound.linear(tape, x, l)?;
        h = tape.add(h, e)?;
    }
    Ok(h)
}

/// One attention + feed-forward layer over blocks of `k` rows. `raw` is
/// required in raw residual mode and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    layer: usize,
    h: Tensor,
    raw: Option<Tensor>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AutodiffError> {
    let cfg = &params.config;
    let idx = &params.layout.layers[layer];
    let head_dim = cfg.hidden / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = bound.linear(tape, h, idx.query)?;
    let kk = bound.linear(tape, h, idx.key)?;
    let v = bound.linear(tape, h, idx.value)?;
    let mut contexts = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let start = head * head_dim;
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, kk, v)
        } else {
            (
                tape.slice_cols(q, start, head_dim)?,
                tape.slice_cols(kk, start, head_dim)?,
                tape.slice_cols(v, start, head_dim)?,
            )
        };
        let scores = tape.block_matmul_nt(qh, kh, k)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        let probs = tape.dropout(probs, cfg.dropout_attn, rng)?;
        contexts.push(tape.block_matmul(probs, vh, k)?);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let attn = bound.linear(tape, ctx, idx.output)?;
    let attn = tape.dropout(attn, cfg.dropout_hidden, rng)?;
    let h1 = tape.add(h, attn)?;
    let h1 = bound.norm(tape, h1, idx.attn_norm)?;

    let f = bound.linear(tape, h1, idx.ff_in)?;
    let f = tape.gelu(f)?;
    let f = bound.linear(tape, f, idx.ff_out)?;
    let f = tape.dropout(f, cfg.dropout_hidden, rng)?;
    let h2 = tape.add(h1, f)?;
    let mut out = bound.norm(tape, h2, idx.ff_norm)?;

    if let Some(l) = params.layout.residual {
        let raw = raw.ok_or_else(|| {
            AutodiffError::InvalidArgument("raw residual mode needs the raw matrix".into())
        })?;
        let r = bound.linear(tape, raw, l)?;
        out = tape.add(out, r)?;
    }
    Ok(out)
}

fn stack(graphs: &[&PreparedGraph], pick: impl Fn(&PreparedGraph) -> &Matrix) -> Matrix {
    let cols = pick(graphs[0]).cols();
    let mut data = Vec::with_capacity(graphs.iter().map(|g| g.rows()).sum::<usize>() * cols);
    for g in graphs {
        data.extend_from_slice(pick(g).data());
    }
    Matrix::from_vec(data.len() / cols.max(1), cols, data)
}

/// Runs every segment of every graph through the shared layers and fuses the
/// real-node rows of each graph by their mean.
pub fn forward_batch(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    graphs: &[&PreparedGraph],
    rng: &mut ChaCha8Rng,
) -> Result<BatchForward, ModelError> {
    let cfg = &params.config;
    let k = graphs.first().ok_or(ModelError::NoRealNodes)?.k;
    if graphs.iter().any(|g| g.k != k) {
        return Err(ModelError::Config("graphs in a batch must share k".into()));
    }
    let total_rows: usize = graphs.iter().map(|g| g.rows()).sum();
    let constant = tape.input(stack(graphs, |g| &g.constant))?;
    let adjacency = tape.input(stack(graphs, |g| &g.adjacency))?;
    let attributes = if cfg.attr_dim > 0 {
        Some(tape.input(stack(graphs, |g| &g.attributes))?)
    } else {
        None
    };
    let raw = attributes.unwrap_or(adjacency);
    debug_assert_eq!(tape.shape(constant).0, total_rows);

    let mut h = embed(tape, params, bound, constant, adjacency, attributes)?;
    for layer in 0..cfg.layers {
        h = transformer_layer(tape, params, bound, layer, h, Some(raw), k, rng)?;
    }

    let mut rows = Vec::new();
    let mut offsets = vec![0];
    let mut base = 0;
    for g in graphs {
        if g.kept_rows.is_empty() {
            return Err(ModelError::NoRealNodes);
        }
        rows.extend(g.kept_rows.iter().map(|r| base + r));
        offsets.push(rows.len());
        base += g.rows();
    }
    let h_final = tape.gather_rows(h, rows)?;
    let z = tape.segment_mean_rows(h_final, offsets.clone())?;
    let logits = bound.linear(tape, z, params.layout.classifier)?;
    Ok(BatchForward {
        h_final,
        z,
        logits,
        offsets,
    })
}

/// Summed cross-entropy of the batch.
pub fn classification_loss(
    tape: &mut Tape,
    out: &BatchForward,
    graphs: &[&PreparedGraph],
) -> Result<Tensor, AutodiffError> {
    let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    tape.cross_entropy(out.logits, &labels)
}

/// Per-node linear projection of final representations back to raw width.
pub fn reconstruct_attributes(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    h_final: Tensor,
) -> Result<Tensor, AutodiffError> {
    bound.linear(tape, h_final, params.layout.reconstruction)
}

/// Pairwise cosine similarity of node representations.
pub fn recover_structure(tape: &mut Tape, h_final: Tensor) -> Result<Tensor, AutodiffError> {
    tape.cosine_rows(h_final)
}

/// Sum over graphs of the per-graph reconstruction MSE.
pub fn reconstruction_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    out: &BatchForward,
    graphs: &[&PreparedGraph],
) -> Result<Tensor, AutodiffError> {
    let recon = reconstruct_attributes(tape, params, bound, out.h_final)?;
    let mut total: Option<Tensor> = None;
    for (g, w) in graphs.iter().zip(out.offsets.windows(2)) {
        let part = tape.gather_rows(recon, (w[0]..w[1]).collect())?;
        let l = tape.mse(part, g.raw_target.clone())?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| AutodiffError::InvalidArgument("empty batch".into()))
}

/// Sum over graphs with at least two real nodes of the MSE between the
/// cosine matrix and the connection-weight matrix. `None` when no graph
/// qualifies.
pub fn structure_loss(
    tape: &mut Tape,
    out: &BatchForward,
    graphs: &[&PreparedGraph],
) -> Result<Option<Tensor>, AutodiffError> {
    let mut total: Option<Tensor> = None;
    for (g, w) in graphs.iter().zip(out.offsets.windows(2)) {
        if w[1] - w[0] < 2 {
            continue;
        }
        let part = tape.gather_rows(out.h_final, (w[0]..w[1]).collect())?;
        let cos = recover_structure(tape, part)?;
        let l = tape.mse(cos, g.weight_target.clone())?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// Plain values of a single-graph forward pass.
#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub h_final: Matrix,
    pub z: Vec<f64>,
    pub y_hat: Vec<f64>,
}

/// Forward pass of one graph without recording gradients.
pub fn forward_graph(
    params: &ModelParams,
    graph: &PreparedGraph,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<GraphOutput, ModelError> {
    let mut tape = Tape::new(mode);
    tape.set_recording(false);
    let bound = Bound::new(&mut tape, params)?;
    let out = forward_batch(&mut tape, params, &bound, &[graph], rng)?;
    let mut y_hat = tape.value(out.logits).row(0).to_vec();
    softmax_in_place(&mut y_hat);
    Ok(GraphOutput {
        h_final: tape.value(out.h_final).clone(),
        z: tape.value(out.z).row(0).to_vec(),
        y_hat,
    })
}

/// Predicted class per graph, evaluated in eval mode.
pub fn predict(params: &ModelParams, graphs: &[&PreparedGraph]) -> Result<Vec<usize>, ModelError> {
    let mut tape = Tape::new(Mode::Eval);
    tape.set_recording(false);
    let bound = Bound::new(&mut tape, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_batch(&mut tape, params, &bound, graphs, &mut rng)?;
    let logits = tape.value(out.logits);
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Initial embedding of one bundle computed directly from parameter values.
pub fn initial_embedding(
    bundle: &NodeFeatureBundle,
    params: &ModelParams,
) -> Result<Vec<f64>, ModelError> {
    let cfg = &params.config;
    if bundle.adjacency_row.len() != cfg.n_adj || bundle.raw_attr.len() != cfg.attr_dim {
        return Err(ModelError::Config("bundle widths differ from config".into()));
    }
    let lin = |x: &[f64], l: Linear| -> Vec<f64> {
        let w = &params.tensors[l.w];
        let b = &params.tensors[l.b];
        (0..w.cols())
            .map(|c| b.get(0, c) + x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum::<f64>())
            .collect()
    };
    let lay = &params.layout;
    let a: Vec<f64> = lin(&bundle.adjacency_row, lay.adj_in)
        .into_iter()
        .map(crate::autodiff::gelu)
        .collect();
    let mut h = lin(&a, lay.adj_out);
    for (o, v) in h.iter_mut().zip(constant_channels(bundle, cfg.hidden)?) {
        *o += v;
    }
    if let Some(l) = lay.attr {
        for (o, v) in h.iter_mut().zip(lin(&bundle.raw_attr, l)) {
            *o += v;
        }
    }
    Ok(h)
}

/// Draws a node permutation; helper for invariance checks.
pub fn random_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
