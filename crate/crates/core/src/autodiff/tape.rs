//! Wengert-list reverse-mode differentiation over dense 2-D matrices.
//!
//! Every forward primitive appends one entry to the tape. An entry only ever
//! refers to entries created before it, so a single reverse sweep visits each
//! entry once and sees all of its downstream gradient already accumulated.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::{gemm, GemmOperand, Matrix};
use super::AutodiffError;

/// Added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    generation: u64,
}

impl Tensor {
    pub fn id(self) -> usize {
        self.id
    }
}

/// Identifies an externally owned parameter tensor registered on the tape.
pub type ParamId = usize;

/// Train mode enables dropout; eval mode makes it the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    AddRow,
    Mul,
    MulRow,
    Scale,
    SoftmaxRows,
    LayerNorm,
    Relu,
    Gelu,
    Dropout,
    MeanRows,
    SegmentMeanRows,
    GatherRows,
    SliceCols,
    ConcatCols,
    BlockMatMulNt,
    BlockMatMul,
    CosineRows,
    Mse,
    CrossEntropy,
    SumAll,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::MulRow => "mul_row",
            OpKind::Scale => "scale",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Dropout => "dropout",
            OpKind::MeanRows => "mean_rows",
            OpKind::SegmentMeanRows => "segment_mean_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::BlockMatMulNt => "block_matmul_nt",
            OpKind::BlockMatMul => "block_matmul",
            OpKind::CosineRows => "cosine_rows",
            OpKind::Mse => "mse",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SumAll => "sum_all",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown op kind {s:?}"))
    }
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Input,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::MulRow,
        OpKind::Scale,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Dropout,
        OpKind::MeanRows,
        OpKind::SegmentMeanRows,
        OpKind::GatherRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::BlockMatMulNt,
        OpKind::BlockMatMul,
        OpKind::CosineRows,
        OpKind::Mse,
        OpKind::CrossEntropy,
        OpKind::SumAll,
    ];
}

enum Op {
    Input,
    Param(ParamId),
    /// Value computed while recording was off; gradients stop here.
    Detached,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    Scale(Tensor, f64),
    SoftmaxRows(Tensor),
    LayerNorm { input: Tensor, inv_std: Vec<f64> },
    Relu(Tensor),
    Gelu(Tensor),
    Dropout { input: Tensor, mask: Vec<f64> },
    MeanRows(Tensor),
    SegmentMeanRows { input: Tensor, offsets: Vec<usize> },
    GatherRows { input: Tensor, rows: Vec<usize> },
    SliceCols { input: Tensor, start: usize },
    ConcatCols(Vec<Tensor>),
    BlockMatMulNt { a: Tensor, b: Tensor, block: usize },
    BlockMatMul { a: Tensor, b: Tensor, block: usize },
    CosineRows { input: Tensor, norms: Vec<f64> },
    Mse { input: Tensor, target: Matrix },
    CrossEntropy { logits: Tensor, targets: Vec<usize>, probs: Matrix },
    SumAll(Tensor),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input | Op::Detached => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SegmentMeanRows { .. } => OpKind::SegmentMeanRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::BlockMatMulNt { .. } => OpKind::BlockMatMulNt,
            Op::BlockMatMul { .. } => OpKind::BlockMatMul,
            Op::CosineRows { .. } => OpKind::CosineRows,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumAll(_) => OpKind::SumAll,
        }
    }
}

struct Entry {
    value: Matrix,
    op: Op,
}

/// Computation record for one forward/backward pass.
pub struct Tape {
    entries: Vec<Entry>,
    grads: Vec<Option<Matrix>>,
    mode: Mode,
    recording: bool,
    backward_done: bool,
    generation: u64,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Mode::Eval)
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            entries: Vec::new(),
            grads: Vec::new(),
            mode,
            recording: true,
            backward_done: false,
            generation: 0,
            fault: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// When off, ops still compute values but record no backward context.
    pub fn set_recording(&mut self, recording: bool) {
        self.recording = recording;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry and gradient. Handles from before the reset become
    /// invalid.
    pub fn reset(&mut self) {
        self.entries.clear();
        self.grads.clear();
        self.backward_done = false;
        self.generation += 1;
    }

    /// Test hook: scales the input gradients produced by one op kind so that
    /// gradient checks have a negative control.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: Option<OpKind>) {
        self.fault = op;
    }

    fn check(&self, t: Tensor) -> Result<(), AutodiffError> {
        if t.generation != self.generation || t.id >= self.entries.len() {
            return Err(AutodiffError::StaleTensor);
        }
        Ok(())
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        assert_eq!(t.generation, self.generation, "tensor handle from a reset tape");
        &self.entries[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.value(t).shape()
    }

    /// Gradient of the last backward pass with respect to a leaf (input or
    /// parameter). Intermediate gradients are released during the sweep.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        if t.generation != self.generation {
            return None;
        }
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Gradients of all registered parameters, in tape order. A parameter
    /// registered twice appears twice.
    pub fn param_grads(&self) -> Vec<(ParamId, &Matrix)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e.op {
                Op::Param(pid) => self.grads.get(i).and_then(Option::as_ref).map(|g| (pid, g)),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Tensor, AutodiffError> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: kind });
        }
        let op = if self.recording || matches!(op, Op::Input | Op::Param(_)) {
            op
        } else {
            Op::Detached
        };
        self.entries.push(Entry { value, op });
        Ok(Tensor {
            id: self.entries.len() - 1,
            generation: self.generation,
        })
    }

    fn same_shape(&self, op: OpKind, a: Tensor, b: Tensor) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    /// Constant input; receives a gradient but is never updated.
    pub fn input(&mut self, value: Matrix) -> Result<Tensor, AutodiffError> {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Result<Tensor, AutodiffError> {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::MatMul,
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = va.matmul(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(OpKind::Add, a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(row)?;
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::AddRow,
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut out = va.clone();
        let bias = vr.row(0);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(OpKind::Mul, a, b)?;
        let vb = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(vb)
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        self.push(Matrix::from_vec(r, c, data), Op::Mul(a, b))
    }

    /// Multiplies every row of an r×c matrix elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(row)?;
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::MulRow,
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut out = va.clone();
        let gain = vr.row(0);
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(gain) {
                *o *= g;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        out.scale_assign(factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        let cols = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let out = Matrix::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let out = Matrix::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Gelu(a))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` in train
    /// mode, so eval mode is the identity.
    pub fn dropout(
        &mut self,
        a: Tensor,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Matrix::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Dropout { input: a, mask })
    }

    /// Column-wise mean over all rows: r×c → 1×c.
    pub fn mean_rows(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if v.rows() == 0 {
            return Err(AutodiffError::InvalidArgument("mean over zero rows".into()));
        }
        let mut out = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.row_mut(0).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / v.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Column-wise mean over consecutive row groups. `offsets` has one more
    /// element than there are groups: group g spans rows
    /// `offsets[g]..offsets[g + 1]`.
    pub fn segment_mean_rows(
        &mut self,
        a: Tensor,
        offsets: Vec<usize>,
    ) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == v.rows()
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(AutodiffError::InvalidArgument(format!(
                "segment offsets {offsets:?} do not partition {} rows into non-empty groups",
                v.rows()
            )));
        }
        let groups = offsets.len() - 1;
        let mut out = Matrix::zeros(groups, v.cols());
        for g in 0..groups {
            let n = (offsets[g + 1] - offsets[g]) as f64;
            let dst = out.row_mut(g);
            for r in offsets[g]..offsets[g + 1] {
                for (o, x) in dst.iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
            for o in dst.iter_mut() {
                *o /= n;
            }
        }
        self.push(out, Op::SegmentMeanRows { input: a, offsets })
    }

    pub fn gather_rows(&mut self, a: Tensor, rows: Vec<usize>) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather row {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * v.cols());
        for &r in &rows {
            data.extend_from_slice(v.row(r));
        }
        let out = Matrix::from_vec(rows.len(), v.cols(), data);
        self.push(out, Op::GatherRows { input: a, rows })
    }

    pub fn slice_cols(
        &mut self,
        a: Tensor,
        start: usize,
        len: usize,
    ) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(AutodiffError::InvalidArgument(format!(
                "column slice {start}..{} out of range for {} columns",
                start + len,
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Matrix::from_vec(v.rows(), len, data);
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
            if self.shape(p).0 != self.shape(first).0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpKind::ConcatCols,
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let rows = self.shape(first).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// For each block of `block` rows: `a_blk @ b_blkᵀ`. Inputs are
    /// (n·block)×d, output is (n·block)×block.
    pub fn block_matmul_nt(
        &mut self,
        a: Tensor,
        b: Tensor,
        block: usize,
    ) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(OpKind::BlockMatMulNt, a, b)?;
        let (rows, d) = self.shape(a);
        if block == 0 || rows % block != 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "{rows} rows do not split into blocks of {block}"
            )));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Matrix::zeros(rows, block);
        for blk in 0..rows / block {
            let off = blk * block * d;
            gemm(
                block,
                d,
                block,
                1.0,
                GemmOperand::new(&va[off..], d as isize, 1),
                GemmOperand::new(&vb[off..], d as isize, 1).t(),
                0.0,
                &mut out.data_mut()[blk * block * block..],
                block as isize,
            );
        }
        self.push(out, Op::BlockMatMulNt { a, b, block })
    }

    /// For each block of `block` rows: `a_blk @ b_blk` where `a` is
    /// (n·block)×block and `b` is (n·block)×d.
    pub fn block_matmul(
        &mut self,
        a: Tensor,
        b: Tensor,
        block: usize,
    ) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let ((ra, ca), (rb, d)) = (self.shape(a), self.shape(b));
        if block == 0 || ca != block || ra != rb || ra % block != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::BlockMatMul,
                left: (ra, ca),
                right: (rb, d),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Matrix::zeros(ra, d);
        for blk in 0..ra / block {
            gemm(
                block,
                block,
                d,
                1.0,
                GemmOperand::new(&va[blk * block * block..], block as isize, 1),
                GemmOperand::new(&vb[blk * block * d..], d as isize, 1),
                0.0,
                &mut out.data_mut()[blk * block * d..],
                d as isize,
            );
        }
        self.push(out, Op::BlockMatMul { a, b, block })
    }

    /// Pairwise cosine similarity of rows: r×c → r×r. Pairs involving an
    /// all-zero row get similarity 0.
    pub fn cosine_rows(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        let n = v.rows();
        let norms: Vec<f64> = (0..n)
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                    dot(v.row(i), v.row(j)) / (norms[i] * norms[j])
                } else {
                    0.0
                };
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        self.push(out, Op::CosineRows { input: a, norms })
    }

    /// Mean squared error against a constant target: scalar.
    pub fn mse(&mut self, a: Tensor, target: Matrix) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if v.shape() != target.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Mse,
                left: v.shape(),
                right: target.shape(),
            });
        }
        if v.is_empty() {
            return Err(AutodiffError::InvalidArgument("mse of an empty matrix".into()));
        }
        let sum: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum();
        let out = Matrix::scalar(sum / v.len() as f64);
        self.push(out, Op::Mse { input: a, target })
    }

    /// Summed cross-entropy of row-wise softmax(logits) against class
    /// indices: scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Tensor,
        targets: &[usize],
    ) -> Result<Tensor, AutodiffError> {
        self.check(logits)?;
        let v = self.value(logits);
        if targets.len() != v.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::CrossEntropy,
                left: v.shape(),
                right: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v.cols()) {
            return Err(AutodiffError::InvalidArgument(format!(
                "target class {bad} out of range for {} classes",
                v.cols()
            )));
        }
        let mut probs = v.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients stay available through
    /// [`Tape::grad`] and [`Tape::param_grads`] until the next reset.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), AutodiffError> {
        self.check(loss)?;
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        if !self.recording {
            return Err(AutodiffError::InvalidArgument(
                "backward on a tape that was not recording".into(),
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.entries.len()).map(|_| None).collect();
        self.grads[loss.id] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.id).rev() {
            let is_leaf = matches!(self.entries[i].op, Op::Input | Op::Param(_) | Op::Detached);
            if is_leaf {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            let mut contributions = self.local_grads(i, &upstream);
            if Some(self.entries[i].op.kind()) == self.fault {
                for (_, g) in &mut contributions {
                    g.scale_assign(1.25);
                }
            }
            for (target, g) in contributions {
                match &mut self.grads[target.id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of entry `i` for each of its inputs.
    fn local_grads(&self, i: usize, dy: &Matrix) -> Vec<(Tensor, Matrix)> {
        let entry = &self.entries[i];
        let out = &entry.value;
        match &entry.op {
            Op::Input | Op::Param(_) | Op::Detached => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut da = Matrix::zeros(m, k);
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    GemmOperand::new(dy.data(), n as isize, 1),
                    GemmOperand::new(vb.data(), n as isize, 1).t(),
                    0.0,
                    da.data_mut(),
                    k as isize,
                );
                let mut db = Matrix::zeros(k, n);
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    GemmOperand::new(va.data(), k as isize, 1).t(),
                    GemmOperand::new(dy.data(), n as isize, 1),
                    0.0,
                    db.data_mut(),
                    n as isize,
                );
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::AddRow(a, row) => {
                let mut db = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                vec![(*a, dy.clone()), (*row, db)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = zip_map(dy, vb, |g, y| g * y);
                let db = zip_map(dy, va, |g, x| g * x);
                vec![(*a, da), (*b, db)]
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let gain = vr.row(0);
                let mut da = dy.clone();
                let mut dg = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        let g = dy.get(r, c);
                        da.set(r, c, g * gain[c]);
                        dg.row_mut(0)[c] += g * va.get(r, c);
                    }
                }
                vec![(*a, da), (*row, dg)]
            }
            Op::Scale(a, f) => {
                let mut da = dy.clone();
                da.scale_assign(*f);
                vec![(*a, da)]
            }
            Op::SoftmaxRows(a) => {
                let mut da = Matrix::zeros(dy.rows(), dy.cols());
                for r in 0..dy.rows() {
                    let (y, g) = (out.row(r), dy.row(r));
                    let inner = dot(y, g);
                    for ((d, yi), gi) in da.row_mut(r).iter_mut().zip(y).zip(g) {
                        *d = yi * (gi - inner);
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = dy.cols() as f64;
                let mut da = Matrix::zeros(dy.rows(), dy.cols());
                for r in 0..dy.rows() {
                    let (y, g) = (out.row(r), dy.row(r));
                    let mean_g = g.iter().sum::<f64>() / cols;
                    let mean_gy = dot(g, y) / cols;
                    for ((d, yi), gi) in da.row_mut(r).iter_mut().zip(y).zip(g) {
                        *d = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                vec![(*input, da)]
            }
            Op::Relu(a) => {
                let da = zip_map(dy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                vec![(*a, da)]
            }
            Op::Gelu(a) => {
                let da = zip_map(dy, self.value(*a), |g, x| g * gelu_derivative(x));
                vec![(*a, da)]
            }
            Op::Dropout { input, mask } => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*input, Matrix::from_vec(dy.rows(), dy.cols(), data))]
            }
            Op::MeanRows(a) => {
                let rows = self.shape(*a).0;
                let mut da = Matrix::zeros(rows, dy.cols());
                let scale = 1.0 / rows as f64;
                for r in 0..rows {
                    for (d, g) in da.row_mut(r).iter_mut().zip(dy.row(0)) {
                        *d = g * scale;
                    }
                }
                vec![(*a, da)]
            }
            Op::SegmentMeanRows { input, offsets } => {
                let rows = self.shape(*input).0;
                let mut da = Matrix::zeros(rows, dy.cols());
                for g in 0..offsets.len() - 1 {
                    let scale = 1.0 / (offsets[g + 1] - offsets[g]) as f64;
                    for r in offsets[g]..offsets[g + 1] {
                        for (d, gv) in da.row_mut(r).iter_mut().zip(dy.row(g)) {
                            *d = gv * scale;
                        }
                    }
                }
                vec![(*input, da)]
            }
            Op::GatherRows { input, rows } => {
                let mut da = Matrix::zeros(self.shape(*input).0, dy.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, g) in da.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                vec![(*input, da)]
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = self.shape(*input);
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    da.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                vec![(*input, da)]
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[at..at + cols]);
                        }
                        at += cols;
                        (p, dp)
                    })
                    .collect()
            }
            Op::BlockMatMulNt { a, b, block } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, d) = va.shape();
                let bl = *block;
                let mut da = Matrix::zeros(rows, d);
                let mut db = Matrix::zeros(rows, d);
                for blk in 0..rows / bl {
                    let (off, goff) = (blk * bl * d, blk * bl * bl);
                    // dA = dC @ B
                    gemm(
                        bl,
                        bl,
                        d,
                        1.0,
                        GemmOperand::new(&dy.data()[goff..], bl as isize, 1),
                        GemmOperand::new(&vb.data()[off..], d as isize, 1),
                        0.0,
                        &mut da.data_mut()[off..],
                        d as isize,
                    );
                    // dB = dCᵀ @ A
                    gemm(
                        bl,
                        bl,
                        d,
                        1.0,
                        GemmOperand::new(&dy.data()[goff..], bl as isize, 1).t(),
                        GemmOperand::new(&va.data()[off..], d as isize, 1),
                        0.0,
                        &mut db.data_mut()[off..],
                        d as isize,
                    );
                }
                vec![(*a, da), (*b, db)]
            }
            Op::BlockMatMul { a, b, block } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, d) = vb.shape();
                let bl = *block;
                let mut da = Matrix::zeros(rows, bl);
                let mut db = Matrix::zeros(rows, d);
                for blk in 0..rows / bl {
                    let (aoff, boff) = (blk * bl * bl, blk * bl * d);
                    // dA = dC @ Bᵀ
                    gemm(
                        bl,
                        d,
                        bl,
                        1.0,
                        GemmOperand::new(&dy.data()[boff..], d as isize, 1),
                        GemmOperand::new(&vb.data()[boff..], d as isize, 1).t(),
                        0.0,
                        &mut da.data_mut()[aoff..],
                        bl as isize,
                    );
                    // dB = Aᵀ @ dC
                    gemm(
                        bl,
                        bl,
                        d,
                        1.0,
                        GemmOperand::new(&va.data()[aoff..], bl as isize, 1).t(),
                        GemmOperand::new(&dy.data()[boff..], d as isize, 1),
                        0.0,
                        &mut db.data_mut()[boff..],
                        d as isize,
                    );
                }
                vec![(*a, da), (*b, db)]
            }
            Op::CosineRows { input, norms } => {
                let v = self.value(*input);
                let (n, c) = v.shape();
                let mut unit = Matrix::zeros(n, c);
                for r in 0..n {
                    if norms[r] > 0.0 {
                        for (u, x) in unit.row_mut(r).iter_mut().zip(v.row(r)) {
                            *u = x / norms[r];
                        }
                    }
                }
                // S = U Uᵀ restricted to nonzero rows, so dU = (dS + dSᵀ) U.
                let mut sym = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        sym.set(i, j, dy.get(i, j) + dy.get(j, i));
                    }
                }
                let du = sym.matmul(&unit);
                let mut da = Matrix::zeros(n, c);
                for r in 0..n {
                    if norms[r] > 0.0 {
                        let (u, g) = (unit.row(r), du.row(r));
                        let radial = dot(u, g);
                        for ((d, ui), gi) in da.row_mut(r).iter_mut().zip(u).zip(g) {
                            *d = (gi - ui * radial) / norms[r];
                        }
                    }
                }
                vec![(*input, da)]
            }
            Op::Mse { input, target } => {
                let v = self.value(*input);
                let scale = 2.0 * dy.item() / v.len() as f64;
                let da = zip_map(v, target, |x, t| scale * (x - t));
                vec![(*input, da)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut da = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = da.get(r, t);
                    da.set(r, t, v - 1.0);
                }
                da.scale_assign(dy.item());
                vec![(*logits, da)]
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Matrix::filled(r, c, dy.item()))]
            }
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
