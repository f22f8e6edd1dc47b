//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a flat tape of operation records. Each builder method
//! (`add`, `matmul`, `row_normalize`, ...) validates shapes, computes the
//! output value eagerly, checks it for non-finite entries, and appends a
//! node; the returned [`VarId`] indexes that node. Because values are
//! computed at construction time, building the same operations on the same
//! inputs *is* the forward evaluation, and repeating a construction yields
//! byte-identical values.
//!
//! [`Graph::backward`] seeds the (scalar) output with 1 and walks the tape in
//! reverse creation order, which is a valid reverse topological order because
//! every node's inputs precede it. Gradient contributions accumulate in that
//! fixed traversal order, so accumulation is deterministic: the same graph
//! always produces bitwise-identical gradients. Subgraphs that cannot reach a
//! parameter leaf are skipped.
//!
//! The operation set is exactly what a batched MLP encoder and the
//! contrastive losses need: elementwise arithmetic and transcendentals,
//! matrix products, row/column broadcasts, concatenation and slicing, masked
//! row reductions, and per-row l2 normalization. All graph tensors are
//! rank-2; scalars are `1 x 1`.

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor, NORM_FLOOR};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    /// Index of the node on the tape (also its creation order).
    pub fn index(self) -> usize {
        self.0
    }
}

// `Affine::shift` and `SliceCols::end` are consumed at construction time
// only, but stay in the record so a node fully describes the computation it
// performed.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    /// Leaf that participates in differentiation.
    LeafParam,
    /// Leaf treated as a constant (no gradient).
    LeafConst,
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`, elementwise with scalar coefficients.
    Affine { scale: f64, shift: f64 },
    Exp,
    Ln,
    Tanh,
    Relu,
    Sin,
    Cos,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    MatMul,
    Transpose,
    /// Adds a `1 x d` row vector to every row of an `n x d` matrix.
    AddRow,
    /// Subtracts an `n x 1` column from every column of an `n x d` matrix.
    SubCol,
    /// Stacks two matrices with equal column counts, first on top.
    Vcat,
    /// Concatenates two matrices with equal row counts, first on the left.
    Hcat,
    /// Keeps columns `start..end`.
    SliceCols { start: usize, end: usize },
    /// Repeats each row `factor` times, in place: row `i` of the input
    /// becomes rows `i*factor .. (i+1)*factor` of the output.
    RepeatRows { factor: usize },
    /// Sum of all entries, producing a `1 x 1` scalar.
    Sum,
    /// Per-row l2 normalization; errors on rows with norm below 1e-12.
    RowNormalize,
    /// Per-row `log sum exp` over entries where `mask` is true (row-major
    /// mask of the input shape), stabilized by per-row max subtraction.
    MaskedRowLogSumExp { mask: Vec<bool> },
    /// Per-row sum over entries where `mask` is true.
    MaskedRowSum { mask: Vec<bool> },
    /// Picks one entry per row: output `i` is `input[i, cols[i]]`.
    GatherPerRow { cols: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::LeafParam => "leaf",
            Op::LeafConst => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddRow => "add_row",
            Op::SubCol => "sub_col",
            Op::Vcat => "vcat",
            Op::Hcat => "hcat",
            Op::SliceCols { .. } => "slice_cols",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Sum => "sum",
            Op::RowNormalize => "row_normalize",
            Op::MaskedRowLogSumExp { .. } => "masked_row_logsumexp",
            Op::MaskedRowSum { .. } => "masked_row_sum",
            Op::GatherPerRow { .. } => "gather_per_row",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
    /// True when a parameter leaf is reachable below this node.
    needs_grad: bool,
}

/// Tape of operation records; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to graph nodes, indexed by
/// [`VarId`]. Parameter leaves always have an entry (zeros when the output
/// does not depend on them); interior nodes and constants may have none.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`, if one was materialized.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf; panics if `id` has no gradient entry
    /// (i.e. it is not a parameter leaf of the differentiated graph).
    pub fn wrt(&self, id: VarId) -> &Tensor {
        self.get(id)
            .expect("no gradient for this node; is it a parameter leaf?")
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached value of a node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Inserts a differentiable leaf. Values are taken as-is; the first
    /// operation consuming a non-finite leaf will report the problem.
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push_leaf(value, true)
    }

    /// Inserts a constant leaf, excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            op: if needs_grad { Op::LeafParam } else { Op::LeafConst },
            inputs: Vec::new(),
            value,
            needs_grad,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor) -> Result<VarId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(VarId(id))
    }

    fn require_matrix(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(id);
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn require_same_shape(&self, a: VarId, b: VarId, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("operand shapes {sa:?} and {sb:?} differ"),
            });
        }
        Ok(())
    }

    // ── Elementwise arithmetic ──────────────────────────────────────────

    fn binary_elementwise(
        &mut self,
        op: Op,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<VarId> {
        self.require_same_shape(a, b, op.name())?;
        let va = self.value(a);
        let vb = self.value(b);
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data);
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise(Op::Div, a, b, |x, y| x / y)
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> Result<VarId> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine { scale, shift }, vec![x], value)
    }

    /// Negation, as `affine(x, -1, 0)`.
    pub fn neg(&mut self, x: VarId) -> Result<VarId> {
        self.affine(x, -1.0, 0.0)
    }

    fn unary_elementwise(&mut self, op: Op, x: VarId, f: impl Fn(f64) -> f64) -> Result<VarId> {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    pub fn exp(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Ln, x, f64::ln)
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sin(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Sin, x, f64::sin)
    }

    pub fn cos(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Cos, x, f64::cos)
    }

    pub fn sqrt(&mut self, x: VarId) -> Result<VarId> {
        self.unary_elementwise(Op::Sqrt, x, f64::sqrt)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes through entries
    /// whose input lies inside the interval (boundary included) and is zero
    /// for clipped entries.
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        assert!(lo <= hi, "clamp bounds out of order");
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { lo, hi }, vec![x], value)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Matrix product of an `m x k` and a `k x n` tensor. The inner
    /// accumulation runs left to right over `k`, so results are exactly
    /// reproducible.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.require_matrix(a, "matmul")?;
        let (kb, n) = self.require_matrix(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions {ka} and {kb} differ"),
            });
        }
        let value = matmul_values(self.value(a), self.value(b), m, ka, n);
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let (m, n) = self.require_matrix(x, "transpose")?;
        let v = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.at(i, j);
            }
        }
        self.push(Op::Transpose, vec![x], Tensor::new(&[n, m], data))
    }

    /// Adds the `1 x d` row `bias` to every row of the `n x d` matrix `x`.
    pub fn add_row(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "add_row")?;
        let (bn, bd) = self.require_matrix(bias, "add_row")?;
        if bn != 1 || bd != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("bias shape [{bn}, {bd}] does not broadcast over [{n}, {d}]"),
            });
        }
        let vx = self.value(x);
        let vb = self.value(bias);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(vx.at(i, j) + vb.at(0, j));
            }
        }
        self.push(Op::AddRow, vec![x, bias], Tensor::new(&[n, d], data))
    }

    /// Subtracts the `n x 1` column `c` from every column of the `n x d`
    /// matrix `x` (i.e. `out[i, j] = x[i, j] - c[i, 0]`).
    pub fn sub_col(&mut self, x: VarId, c: VarId) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "sub_col")?;
        let (cn, cd) = self.require_matrix(c, "sub_col")?;
        if cn != n || cd != 1 {
            return Err(Error::ShapeMismatch {
                op: "sub_col",
                detail: format!("column shape [{cn}, {cd}] does not broadcast over [{n}, {d}]"),
            });
        }
        let vx = self.value(x);
        let vc = self.value(c);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let ci = vc.at(i, 0);
            for j in 0..d {
                data.push(vx.at(i, j) - ci);
            }
        }
        self.push(Op::SubCol, vec![x, c], Tensor::new(&[n, d], data))
    }

    /// Stacks `a` on top of `b`; column counts must match.
    pub fn vcat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (na, da) = self.require_matrix(a, "vcat")?;
        let (nb, db) = self.require_matrix(b, "vcat")?;
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "vcat",
                detail: format!("column counts {da} and {db} differ"),
            });
        }
        let mut data = Vec::with_capacity((na + nb) * da);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        self.push(Op::Vcat, vec![a, b], Tensor::new(&[na + nb, da], data))
    }

    /// Concatenates `a` (left) and `b` (right); row counts must match.
    pub fn hcat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (na, da) = self.require_matrix(a, "hcat")?;
        let (nb, db) = self.require_matrix(b, "hcat")?;
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "hcat",
                detail: format!("row counts {na} and {nb} differ"),
            });
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut data = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        self.push(Op::Hcat, vec![a, b], Tensor::new(&[na, da + db], data))
    }

    /// Keeps columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "slice_cols")?;
        if start >= end || end > d {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("column range {start}..{end} invalid for width {d}"),
            });
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&v.row_slice(i)[start..end]);
        }
        self.push(
            Op::SliceCols { start, end },
            vec![x],
            Tensor::new(&[n, end - start], data),
        )
    }

    /// Repeats each row of a matrix `factor` times (so an `n x d` input
    /// becomes `n*factor x d`, grouped by source row).
    pub fn repeat_rows(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 0 {
            return Err(Error::InvalidArg {
                what: "repeat_rows factor must be at least 1".to_string(),
            });
        }
        let (n, d) = self.require_matrix(x, "repeat_rows")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * factor * d);
        for i in 0..n {
            for _ in 0..factor {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        self.push(
            Op::RepeatRows { factor },
            vec![x],
            Tensor::new(&[n * factor, d], data),
        )
    }

    // ── Reductions and row operations ───────────────────────────────────

    /// Sum of all entries, producing a `1 x 1` scalar. Accumulates in
    /// row-major order.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let mut acc = 0.0;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Op::Sum, vec![x], Tensor::scalar(acc))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Per-row l2 normalization of an `n x d` matrix. Rows with norm below
    /// `1e-12` are degenerate and produce an error identifying the row.
    pub fn row_normalize(&mut self, x: VarId) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "row_normalize")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = v.row_slice(i);
            let norm = l2_norm(row);
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateNorm {
                    context: "row_normalize",
                    row: i,
                });
            }
            data.extend(row.iter().map(|&u| u / norm));
        }
        self.push(Op::RowNormalize, vec![x], Tensor::new(&[n, d], data))
    }

    /// Per-row `log sum exp` over masked entries, stabilized by subtracting
    /// the per-row masked maximum. `mask` is row-major with the input's
    /// shape; every row must keep at least one entry.
    pub fn masked_row_logsumexp(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "masked_row_logsumexp")?;
        if mask.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "masked_row_logsumexp",
                detail: format!("mask has {} entries, input has {}", mask.len(), n * d),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = v.row_slice(i);
            let mrow = &mask[i * d..(i + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for j in 0..d {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArg {
                    what: format!("masked_row_logsumexp: row {i} has no unmasked entries"),
                });
            }
            let mut acc = 0.0;
            for j in 0..d {
                if mrow[j] {
                    acc += (row[j] - max).exp();
                }
            }
            out.push(max + acc.ln());
        }
        self.push(
            Op::MaskedRowLogSumExp {
                mask: mask.to_vec(),
            },
            vec![x],
            Tensor::new(&[n, 1], out),
        )
    }

    /// Per-row sum over masked entries (rows with empty masks sum to zero).
    pub fn masked_row_sum(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "masked_row_sum")?;
        if mask.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "masked_row_sum",
                detail: format!("mask has {} entries, input has {}", mask.len(), n * d),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = v.row_slice(i);
            let mrow = &mask[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                if mrow[j] {
                    acc += row[j];
                }
            }
            out.push(acc);
        }
        self.push(
            Op::MaskedRowSum {
                mask: mask.to_vec(),
            },
            vec![x],
            Tensor::new(&[n, 1], out),
        )
    }

    /// Picks entry `cols[i]` from row `i`, producing an `n x 1` column.
    pub fn gather_per_row(&mut self, x: VarId, cols: &[usize]) -> Result<VarId> {
        let (n, d) = self.require_matrix(x, "gather_per_row")?;
        if cols.len() != n {
            return Err(Error::ShapeMismatch {
                op: "gather_per_row",
                detail: format!("{} indices for {n} rows", cols.len()),
            });
        }
        if let Some((i, &c)) = cols.iter().enumerate().find(|(_, &c)| c >= d) {
            return Err(Error::ShapeMismatch {
                op: "gather_per_row",
                detail: format!("row {i} selects column {c}, width is {d}"),
            });
        }
        let v = self.value(x);
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| v.at(i, c)).collect();
        self.push(
            Op::GatherPerRow {
                cols: cols.to_vec(),
            },
            vec![x],
            Tensor::new(&[n, 1], out),
        )
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Gradients of the scalar node `out` with respect to every node that
    /// can reach a parameter leaf. See the module docs for the traversal and
    /// accumulation order guarantees.
    pub fn backward(&self, out: VarId) -> Result<Gradients> {
        let out_val = self.value(out);
        if out_val.numel() != 1 {
            return Err(Error::NotScalar {
                node: out.0,
                len: out_val.numel(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            // Parameter leaves keep their accumulated gradient.
            if matches!(self.nodes[id].op, Op::LeafParam) {
                grads[id] = Some(g);
            }
        }

        // Every parameter leaf gets an entry, zero when unreachable.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::LeafParam) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds `contribution` into the gradient slot of `target`.
    fn accumulate(grads: &mut [Option<Tensor>], target: VarId, contribution: Tensor) {
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let needs = |vid: VarId| self.nodes[vid.0].needs_grad;
        match &node.op {
            Op::LeafParam | Op::LeafConst => {}
            Op::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    Self::accumulate(grads, b, g.clone());
                }
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    Self::accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let vb = self.value(b);
                    Self::accumulate(grads, a, zip_map(g, vb, |gv, bv| gv * bv));
                }
                if needs(b) {
                    let va = self.value(a);
                    Self::accumulate(grads, b, zip_map(g, va, |gv, av| gv * av));
                }
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let vb = self.value(b);
                if needs(a) {
                    Self::accumulate(grads, a, zip_map(g, vb, |gv, bv| gv / bv));
                }
                if needs(b) {
                    let va = self.value(a);
                    let mut t = zip_map(g, va, |gv, av| gv * av);
                    for (tv, bv) in t.data_mut().iter_mut().zip(vb.data()) {
                        *tv = -*tv / (bv * bv);
                    }
                    Self::accumulate(grads, b, t);
                }
            }
            Op::Affine { scale, .. } => {
                let a = node.inputs[0];
                if needs(a) {
                    Self::accumulate(grads, a, g.map(|v| scale * v));
                }
            }
            Op::Exp => {
                let a = node.inputs[0];
                if needs(a) {
                    // d exp(x) = exp(x) dx, using the cached output.
                    Self::accumulate(grads, a, zip_map(g, &node.value, |gv, yv| gv * yv));
                }
            }
            Op::Ln => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    Self::accumulate(grads, a, zip_map(g, va, |gv, xv| gv / xv));
                }
            }
            Op::Tanh => {
                let a = node.inputs[0];
                if needs(a) {
                    Self::accumulate(
                        grads,
                        a,
                        zip_map(g, &node.value, |gv, yv| gv * (1.0 - yv * yv)),
                    );
                }
            }
            Op::Relu => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    Self::accumulate(
                        grads,
                        a,
                        zip_map(g, va, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    );
                }
            }
            Op::Sin => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    Self::accumulate(grads, a, zip_map(g, va, |gv, xv| gv * xv.cos()));
                }
            }
            Op::Cos => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    Self::accumulate(grads, a, zip_map(g, va, |gv, xv| -gv * xv.sin()));
                }
            }
            Op::Sqrt => {
                let a = node.inputs[0];
                if needs(a) {
                    Self::accumulate(grads, a, zip_map(g, &node.value, |gv, yv| gv / (2.0 * yv)));
                }
            }
            Op::Clamp { lo, hi } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    Self::accumulate(
                        grads,
                        a,
                        zip_map(g, va, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
                    );
                }
            }
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if needs(a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.at(i, j) * vb.at(l, j);
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[m, k], da));
                }
                if needs(b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += va.at(i, l) * g.at(i, j);
                            }
                            db[l * n + j] = acc;
                        }
                    }
                    Self::accumulate(grads, b, Tensor::new(&[k, n], db));
                }
            }
            Op::Transpose => {
                let a = node.inputs[0];
                if needs(a) {
                    let (n, m) = (g.rows(), g.cols());
                    let mut data = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            data[j * n + i] = g.at(i, j);
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[m, n], data));
                }
            }
            Op::AddRow => {
                let (x, bias) = (node.inputs[0], node.inputs[1]);
                if needs(x) {
                    Self::accumulate(grads, x, g.clone());
                }
                if needs(bias) {
                    let (n, d) = (g.rows(), g.cols());
                    let mut col_sum = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            col_sum[j] += g.at(i, j);
                        }
                    }
                    Self::accumulate(grads, bias, Tensor::new(&[1, d], col_sum));
                }
            }
            Op::SubCol => {
                let (x, c) = (node.inputs[0], node.inputs[1]);
                if needs(x) {
                    Self::accumulate(grads, x, g.clone());
                }
                if needs(c) {
                    let (n, d) = (g.rows(), g.cols());
                    let mut row_sum = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..d {
                            row_sum[i] -= g.at(i, j);
                        }
                    }
                    Self::accumulate(grads, c, Tensor::new(&[n, 1], row_sum));
                }
            }
            Op::Vcat => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let na = self.value(a).rows();
                let d = g.cols();
                if needs(a) {
                    let data = g.data()[..na * d].to_vec();
                    Self::accumulate(grads, a, Tensor::new(&[na, d], data));
                }
                if needs(b) {
                    let nb = g.rows() - na;
                    let data = g.data()[na * d..].to_vec();
                    Self::accumulate(grads, b, Tensor::new(&[nb, d], data));
                }
            }
            Op::Hcat => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let da = self.value(a).cols();
                let db = g.cols() - da;
                let n = g.rows();
                if needs(a) {
                    let mut data = Vec::with_capacity(n * da);
                    for i in 0..n {
                        data.extend_from_slice(&g.row_slice(i)[..da]);
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, da], data));
                }
                if needs(b) {
                    let mut data = Vec::with_capacity(n * db);
                    for i in 0..n {
                        data.extend_from_slice(&g.row_slice(i)[da..]);
                    }
                    Self::accumulate(grads, b, Tensor::new(&[n, db], data));
                }
            }
            Op::RepeatRows { factor } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let (n, d) = (va.rows(), va.cols());
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        for r in 0..*factor {
                            let grow = g.row_slice(i * factor + r);
                            for j in 0..d {
                                data[i * d + j] += grow[j];
                            }
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
            Op::SliceCols { start, .. } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let (n, d) = (va.rows(), va.cols());
                    let w = g.cols();
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..w {
                            data[i * d + start + j] = g.at(i, j);
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
            Op::Sum => {
                let a = node.inputs[0];
                if needs(a) {
                    let gv = g.item();
                    let va = self.value(a);
                    Self::accumulate(grads, a, Tensor::full(va.shape(), gv));
                }
            }
            Op::RowNormalize => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let y = &node.value;
                    let (n, d) = (va.rows(), va.cols());
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        let urow = va.row_slice(i);
                        let yrow = y.row_slice(i);
                        let grow = g.row_slice(i);
                        let norm = l2_norm(urow);
                        let mut ydotg = 0.0;
                        for j in 0..d {
                            ydotg += yrow[j] * grow[j];
                        }
                        // d(u/|u|) applied to g: (g - y (y . g)) / |u|
                        for j in 0..d {
                            data[i * d + j] = (grow[j] - yrow[j] * ydotg) / norm;
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
            Op::MaskedRowLogSumExp { mask } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let (n, d) = (va.rows(), va.cols());
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        let lse = node.value.at(i, 0);
                        let gi = g.at(i, 0);
                        for j in 0..d {
                            if mask[i * d + j] {
                                // softmax weight within the masked row
                                data[i * d + j] = gi * (va.at(i, j) - lse).exp();
                            }
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
            Op::MaskedRowSum { mask } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let (n, d) = (va.rows(), va.cols());
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        let gi = g.at(i, 0);
                        for j in 0..d {
                            if mask[i * d + j] {
                                data[i * d + j] = gi;
                            }
                        }
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
            Op::GatherPerRow { cols } => {
                let a = node.inputs[0];
                if needs(a) {
                    let va = self.value(a);
                    let (n, d) = (va.rows(), va.cols());
                    let mut data = vec![0.0; n * d];
                    for i in 0..n {
                        data[i * d + cols[i]] = g.at(i, 0);
                    }
                    Self::accumulate(grads, a, Tensor::new(&[n, d], data));
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

fn matmul_values(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at(i, l) * b.at(l, j);
            }
            data[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], data)
}

// ── Finite-difference checking ─────────────────────────────────────────

/// Maximum relative error between analytic gradients and central finite
/// differences for a scalar function of several tensor inputs.
///
/// `f` rebuilds its graph from the given leaves on every call; the analytic
/// gradient comes from one `backward`, the numeric one from
/// `(f(x + h e) - f(x - h e)) / 2h` per coordinate. The relative error for a
/// coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let ids: Vec<VarId> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut pts: Vec<Tensor> = points.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).clone();
        for ci in 0..points[pi].numel() {
            let orig = pts[pi].data()[ci];
            pts[pi].data_mut()[ci] = orig + h;
            let up = eval(&pts)?;
            pts[pi].data_mut()[ci] = orig - h;
            let down = eval(&pts)?;
            pts[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[ci];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// [`grad_check_multi`] specialized to a single input tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    grad_check_multi(|g, ids| f(g, ids[0]), std::slice::from_ref(point), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn non_finite_intermediate_reports_node_id() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.0, 1.0]));
        let err = g.ln(x).unwrap_err();
        match err {
            Error::NonFinite { op, node } => {
                assert_eq!(op, "ln");
                assert_eq!(node, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn forward_is_pure() {
        let build = || -> Vec<u64> {
            let mut g = Graph::new();
            let mut p = Prng::new(31);
            let x = g.param(p.gaussian_tensor(&[3, 4]));
            let w = g.param(p.gaussian_tensor(&[4, 2]));
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let n = g.row_normalize(t).unwrap();
            let s = g.sum(n).unwrap();
            let mut bits: Vec<u64> = g.value(n).data().iter().map(|v| v.to_bits()).collect();
            bits.push(g.value(s).item().to_bits());
            bits
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn chain_matches_scalar_loop_reference() {
        // y = sum(tanh(2x + 1)) against an independent scalar evaluation.
        let mut p = Prng::new(17);
        let x = p.gaussian_tensor(&[4, 3]);
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let a = g.affine(xid, 2.0, 1.0).unwrap();
        let t = g.tanh(a).unwrap();
        let y = g.sum(t).unwrap();

        let mut reference = 0.0;
        for &v in x.data() {
            reference += (2.0 * v + 1.0).tanh();
        }
        assert!((g.value(y).item() - reference).abs() <= 1e-12);
    }

    #[test]
    fn gradient_of_sin_plus_square() {
        // f(x) = sin(x0) + x1^2 at (0.5, 2.0): gradient (cos 0.5, 4.0).
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.5, 2.0]));
        let s0 = g.slice_cols(x, 0, 1).unwrap();
        let s1 = g.slice_cols(x, 1, 2).unwrap();
        let sin0 = g.sin(s0).unwrap();
        let sq1 = g.mul(s1, s1).unwrap();
        let y0 = g.add(sin0, sq1).unwrap();
        let y = g.sum(y0).unwrap();
        let grads = g.backward(y).unwrap();
        let gx = grads.wrt(x);
        assert!((gx.data()[0] - 0.5f64.cos()).abs() <= 1e-6);
        assert!((gx.data()[1] - 4.0).abs() <= 1e-6);
    }

    #[test]
    fn gradient_of_softmax_sum_is_zero() {
        // y = sum(softmax(x)) == 1 identically, so the gradient vanishes.
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.3, -1.2, 2.5, 0.0]));
        let mask = vec![true; 4];
        let lse = g.masked_row_logsumexp(x, &mask).unwrap();
        let centered = g.sub_col(x, lse).unwrap();
        let sm = g.exp(centered).unwrap();
        let y = g.sum(sm).unwrap();
        let grads = g.backward(y).unwrap();
        for &v in grads.wrt(x).data() {
            assert!(v.abs() <= 1e-12, "softmax-sum gradient component {v}");
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0]));
        let unused = g.param(Tensor::row(&[3.0, 4.0, 5.0]));
        let y = g.sum(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::NotScalar { len: 2, .. }));
    }

    #[test]
    fn reused_node_accumulates_deterministically() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.5]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // z = 2x * x = 2x^2, dz/dx = 4x = 6
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert!((grads.wrt(x).item() - 6.0).abs() <= 1e-12);
    }

    #[test]
    fn row_normalize_degenerate_row_is_reported() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let err = g.row_normalize(x).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateNorm {
                context: "row_normalize",
                row: 1
            }
        ));
    }

    /// Every differentiable op, one at a time, against central differences.
    #[test]
    fn per_op_finite_difference_check() {
        let mut p = Prng::new(2024);
        let h = 1e-5;
        let tol = 1e-6;

        // Unary elementwise ops wrapped in sum(op(x) * c) with a random
        // cotangent c so every output entry matters.
        type UnaryBuilder = fn(&mut Graph, VarId) -> Result<VarId>;
        let unary: Vec<(&str, UnaryBuilder)> = vec![
            ("exp", |g, x| g.exp(x)),
            ("tanh", |g, x| g.tanh(x)),
            ("sin", |g, x| g.sin(x)),
            ("cos", |g, x| g.cos(x)),
            ("affine", |g, x| g.affine(x, -1.7, 0.4)),
            ("transpose", |g, x| g.transpose(x)),
            ("row_normalize", |g, x| g.row_normalize(x)),
            ("slice_cols", |g, x| g.slice_cols(x, 1, 3)),
            ("clamp_inside", |g, x| g.clamp(x, -30.0, 30.0)),
        ];
        for (name, build) in unary {
            let x = p.gaussian_tensor(&[3, 4]);
            let err = grad_check(
                |g, xid| {
                    let y = build(g, xid)?;
                    let c = g.constant(Tensor::full(g.value(y).shape(), 0.0).map(|_| 0.0));
                    // random-ish fixed cotangent derived from index
                    let shape = g.value(y).shape().to_vec();
                    let cot: Vec<f64> = (0..shape.iter().product::<usize>())
                        .map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0)
                        .collect();
                    let _ = c;
                    let cid = g.constant(Tensor::new(&shape, cot));
                    let w = g.mul(y, cid)?;
                    g.sum(w)
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err <= tol, "op {name}: finite-difference error {err}");
        }

        // ln and sqrt need positive inputs.
        let xpos = p.gaussian_tensor(&[3, 4]).map(|v| v.abs() + 0.5);
        for (name, build) in [
            ("ln", (|g: &mut Graph, x| g.ln(x)) as UnaryBuilder),
            ("sqrt", |g, x| g.sqrt(x)),
        ] {
            let err = grad_check(
                |g, xid| {
                    let y = build(g, xid)?;
                    g.sum(y)
                },
                &xpos,
                h,
            )
            .unwrap();
            assert!(err <= tol, "op {name}: finite-difference error {err}");
        }

        // relu away from the kink.
        let xoff = p.gaussian_tensor(&[3, 4]).map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        let err = grad_check(|g, x| { let y = g.relu(x)?; g.sum(y) }, &xoff, h).unwrap();
        assert!(err <= tol, "relu: {err}");

        // Binary ops.
        let a = p.gaussian_tensor(&[3, 4]);
        let b = p.gaussian_tensor(&[3, 4]).map(|v| v + 3.0); // bounded away from 0 for div
        type BinaryBuilder = fn(&mut Graph, VarId, VarId) -> Result<VarId>;
        let binary: Vec<(&str, BinaryBuilder)> = vec![
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| g.div(a, b)),
        ];
        for (name, build) in binary {
            let err = grad_check_multi(
                |g, ids| {
                    let y = build(g, ids[0], ids[1])?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                &[a.clone(), b.clone()],
                h,
            )
            .unwrap();
            assert!(err <= tol, "op {name}: finite-difference error {err}");
        }

        // matmul, add_row, sub_col, vcat, hcat, reductions, gather.
        let x = p.gaussian_tensor(&[3, 4]);
        let w = p.gaussian_tensor(&[4, 2]);
        let err = grad_check_multi(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &[x.clone(), w],
            h,
        )
        .unwrap();
        assert!(err <= tol, "matmul: {err}");

        let bias = p.gaussian_tensor(&[1, 4]);
        let err = grad_check_multi(
            |g, ids| {
                let y = g.add_row(ids[0], ids[1])?;
                let t = g.tanh(y)?;
                g.sum(t)
            },
            &[x.clone(), bias],
            h,
        )
        .unwrap();
        assert!(err <= tol, "add_row: {err}");

        let col = p.gaussian_tensor(&[3, 1]);
        let err = grad_check_multi(
            |g, ids| {
                let y = g.sub_col(ids[0], ids[1])?;
                let t = g.tanh(y)?;
                g.sum(t)
            },
            &[x.clone(), col],
            h,
        )
        .unwrap();
        assert!(err <= tol, "sub_col: {err}");

        let x2 = p.gaussian_tensor(&[2, 4]);
        let err = grad_check_multi(
            |g, ids| {
                let y = g.vcat(ids[0], ids[1])?;
                let t = g.tanh(y)?;
                let n = g.row_normalize(t)?;
                g.sum(n)
            },
            &[x.clone(), x2],
            h,
        )
        .unwrap();
        assert!(err <= tol, "vcat: {err}");

        let xr = p.gaussian_tensor(&[3, 2]);
        let err = grad_check_multi(
            |g, ids| {
                let y = g.hcat(ids[0], ids[1])?;
                let t = g.tanh(y)?;
                g.sum(t)
            },
            &[x.clone(), xr],
            h,
        )
        .unwrap();
        assert!(err <= tol, "hcat: {err}");

        let err = grad_check(
            |g, xid| {
                let r = g.repeat_rows(xid, 3)?;
                let t = g.tanh(r)?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err <= tol, "repeat_rows: {err}");

        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        let err = grad_check(
            |g, xid| {
                let lse = g.masked_row_logsumexp(xid, &mask)?;
                let sq = g.mul(lse, lse)?;
                g.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err <= tol, "masked_row_logsumexp: {err}");

        let err = grad_check(
            |g, xid| {
                let s = g.masked_row_sum(xid, &mask)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err <= tol, "masked_row_sum: {err}");

        let err = grad_check(
            |g, xid| {
                let picked = g.gather_per_row(xid, &[2, 0, 3])?;
                let sq = g.mul(picked, picked)?;
                g.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err <= tol, "gather_per_row: {err}");
    }

    #[test]
    fn masked_logsumexp_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1000.0, 999.0, 998.0]));
        let lse = g.masked_row_logsumexp(x, &[true, true, true]).unwrap();
        // log(e^1000 + e^999 + e^998) = 1000 + log(1 + e^-1 + e^-2)
        let expect = 1000.0 + (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((g.value(lse).item() - expect).abs() <= 1e-12);
    }

    #[test]
    fn gather_rejects_out_of_range_column() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        assert!(g.gather_per_row(x, &[0, 3]).is_err());
    }

    #[test]
    fn logsumexp_rejects_empty_row_mask() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let err = g
            .masked_row_logsumexp(x, &[true, true, false, false])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArg { .. }));
    }
}
