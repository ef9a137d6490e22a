//! The autodiff tape: an append-only arena of operation nodes.
//!
//! Node ids increase with creation order and an op only references earlier
//! ids, so the id sequence is already a topological order; `backward` walks
//! it once in reverse. Shape violations panic — they are programming errors,
//! not runtime conditions.
//!
//! Broadcasting is limited to a documented trailing-dimension rule: the right
//! operand must be scalar, the same shape, or a trailing suffix of the left
//! operand's shape (e.g. `[n, d] op [d]`).

use crate::parallel;
use crate::schedule::{normal_cdf, normal_pdf};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    AddScalar { input: usize },
    MulScalar { input: usize, c: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Exp { input: usize },
    Silu { input: usize },
    Gelu { input: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { input: usize },
    Softmax { input: usize, axis: usize },
    LayerNormRows { input: usize, eps: f64 },
    SumAll { input: usize },
    MeanAll { input: usize },
    SliceRows { input: usize, start: usize },
    ConcatRows { inputs: Vec<usize> },
    SliceCols { input: usize, start: usize, end: usize },
    ConcatCols { inputs: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    L2NormalizeRows { input: usize },
    MaskFill { input: usize, mask: Vec<bool> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, ParamId)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            backward_done: false,
        }
    }

    /// Put a value on the tape as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), rg)
    }

    /// Put a value on the tape as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Leaf a parameter and bind its node so `backward` routes the gradient
    /// back into the set.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        let p = params.get(id);
        let node = self.push(
            Op::Leaf,
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            true,
        );
        self.bindings.push((node.0, id));
        node
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Clone a node's value out as a standalone tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "expected scalar node, shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        #[cfg(debug_assertions)]
        {
            let label = op_name(&op);
            for &v in &data {
                assert!(v.is_finite(), "non-finite output of `{label}`: {v}");
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        TensorId(id)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(Op::AddScalar { input: x.0 }, shape, data, rg)
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(Op::MulScalar { input: x.0, c }, shape, data, rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.mul_scalar(x, -1.0)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x + y, |(a, b)| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x - y, |(a, b)| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x * y, |(a, b)| Op::Mul { a, b })
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn((usize, usize)) -> Op,
    ) -> TensorId {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert!(
            broadcasts_into(&nb.shape, &na.shape),
            "shape {:?} does not broadcast into {:?} (trailing-dimension rule)",
            nb.shape,
            na.shape
        );
        let bl = nb.data.len();
        let data = na
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, nb.data[i % bl]))
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(make_op((a.0, b.0)), shape, data, rg)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(Op::Exp { input: x.0 }, shape, data, rg)
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(Op::Silu { input: x.0 }, shape, data, rg)
    }

    /// Exact GELU, `x * Phi(x)` with the standard normal CDF.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| v * normal_cdf(v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x.0);
        self.push(Op::Gelu { input: x.0 }, shape, data, rg)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `[m × k] @ [k × n] -> [m × n]`. Rows of the output are computed
    /// independently, so the parallel build is bit-identical to sequential.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        let (m, k) = (sa[0], sa[1]);
        assert_eq!(sb[0], k, "matmul inner dims disagree: {sa:?} @ {sb:?}");
        let n = sb[1];
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Op::MatMul { a: a.0, b: b.0, m, k, n }, vec![m, n], data, rg)
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "transpose needs 2-D, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x.0);
        self.push(Op::Transpose { input: x.0 }, vec![c, r], data, rg)
    }

    // ── normalization and attention pieces ──────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let data = softmax_raw(&self.nodes[x.0].data, &shape, axis);
        let rg = self.rg(x.0);
        self.push(Op::Softmax { input: x.0, axis }, shape, data, rg)
    }

    /// Per-row layer normalization over the last dimension, without an
    /// affine head (AdaLN supplies scale and shift separately).
    pub fn layer_norm_rows(&mut self, x: TensorId, eps: f64) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("layer_norm needs at least 1-D");
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / d {
            let row = &src[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for i in 0..d {
                data[r * d + i] = (row[i] - mean) * inv_std;
            }
        }
        let rg = self.rg(x.0);
        self.push(Op::LayerNormRows { input: x.0, eps }, shape, data, rg)
    }

    /// Replace elements where `mask` is true with `fill`. Gradients at
    /// masked positions are dropped.
    pub fn mask_fill(&mut self, x: TensorId, mask: &[bool], fill: f64) -> TensorId {
        let node = &self.nodes[x.0];
        assert_eq!(mask.len(), node.data.len(), "mask length mismatch");
        let data = node
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = node.shape.clone();
        let rg = self.rg(x.0);
        self.push(
            Op::MaskFill { input: x.0, mask: mask.to_vec() },
            shape,
            data,
            rg,
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x.0);
        self.push(Op::SumAll { input: x.0 }, vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x.0);
        self.push(Op::MeanAll { input: x.0 }, vec![1], vec![s / n as f64], rg)
    }

    // ── shape surgery on 2-D token matrices ──────────────────────────

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "slice_rows needs 2-D, got {s:?}");
        assert!(start <= end && end <= s[0], "row range {start}..{end} out of {s:?}");
        let c = s[1];
        let data = self.nodes[x.0].data[start * c..end * c].to_vec();
        let rg = self.rg(x.0);
        self.push(Op::SliceRows { input: x.0, start }, vec![end - start, c], data, rg)
    }

    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_rows of nothing");
        let c = self.nodes[inputs[0].0].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for id in inputs {
            let n = &self.nodes[id.0];
            assert_eq!(n.shape.len(), 2, "concat_rows needs 2-D inputs");
            assert_eq!(n.shape[1], c, "concat_rows column mismatch");
            rows += n.shape[0];
            data.extend_from_slice(&n.data);
            rg |= n.requires_grad;
        }
        let ids = inputs.iter().map(|t| t.0).collect();
        self.push(Op::ConcatRows { inputs: ids }, vec![rows, c], data, rg)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "slice_cols needs 2-D, got {s:?}");
        assert!(start <= end && end <= s[1], "col range {start}..{end} out of {s:?}");
        let (r, c) = (s[0], s[1]);
        let w = end - start;
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(x.0);
        self.push(Op::SliceCols { input: x.0, start, end }, vec![r, w], data, rg)
    }

    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_cols of nothing");
        let r = self.nodes[inputs[0].0].shape[0];
        let widths: Vec<usize> = inputs
            .iter()
            .map(|id| {
                let n = &self.nodes[id.0];
                assert_eq!(n.shape.len(), 2, "concat_cols needs 2-D inputs");
                assert_eq!(n.shape[0], r, "concat_cols row mismatch");
                n.shape[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (id, &w) in inputs.iter().zip(&widths) {
                let src = &self.nodes[id.0].data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = inputs.iter().any(|id| self.rg(id.0));
        let ids = inputs.iter().map(|t| t.0).collect();
        self.push(Op::ConcatCols { inputs: ids }, vec![r, total], data, rg)
    }

    /// Gather rows of `table` by index; gradients flow only to the selected
    /// rows.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let s = &self.nodes[table.0].shape;
        assert_eq!(s.len(), 2, "gather_rows needs a 2-D table, got {s:?}");
        let (rows, c) = (s[0], s[1]);
        for &i in ids {
            assert!(i < rows, "row id {i} out of range 0..{rows}");
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table.0);
        self.push(
            Op::GatherRows { table: table.0, ids: ids.to_vec() },
            vec![ids.len(), c],
            data,
            rg,
        )
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("l2_normalize needs at least 1-D");
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / d {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-12, "cannot L2-normalize a near-zero row");
            for i in 0..d {
                data[r * d + i] = row[i] / norm;
            }
        }
        let rg = self.rg(x.0);
        self.push(Op::L2NormalizeRows { input: x.0 }, shape, data, rg)
    }

    /// Per-row cross entropy of `[n × classes]` logits against target ids,
    /// returning an `[n]` vector of losses in nats.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let s = &self.nodes[logits.0].shape;
        assert_eq!(s.len(), 2, "cross_entropy needs 2-D logits, got {s:?}");
        let (n, classes) = (s[0], s[1]);
        assert_eq!(targets.len(), n, "one target per logits row");
        let src = &self.nodes[logits.0].data;
        let mut data = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < classes, "target {t} out of range 0..{classes}");
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.push(lse - row[t]);
        }
        let rg = self.rg(logits.0);
        self.push(
            Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() },
            vec![n],
            data,
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` for every reachable
    /// parameter in `params`; parameters the loss does not depend on are left
    /// untouched. Panics if the loss is not scalar or the tape was already
    /// consumed.
    pub fn backward(&mut self, loss: TensorId, params: &mut ParamSet) {
        assert!(!self.backward_done, "backward called twice on the same tape");
        self.backward_done = true;
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad present");
            self.step_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }

        for &(node, pid) in &self.bindings {
            if let Some(g) = &self.nodes[node].grad {
                params.get_mut(pid).tensor.accumulate_grad(g);
            }
        }
    }

    fn accum(&mut self, id: usize, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let node = &mut self.nodes[id];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gi, &v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    /// Accumulate into `id` reducing `g` (shaped like `full_len`) down to the
    /// node's own length under the trailing broadcast rule.
    fn accum_reduced(&mut self, id: usize, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let nb = self.nodes[id].data.len();
        if nb == g.len() {
            self.accum(id, g);
            return;
        }
        let mut reduced = vec![0.0; nb];
        for (i, &v) in g.iter().enumerate() {
            reduced[i % nb] += v;
        }
        self.accum(id, &reduced);
    }

    fn step_backward(&mut self, i: usize, grad: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::AddScalar { input } => self.accum(input, grad),
            Op::MulScalar { input, c } => {
                let dg: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accum(input, &dg);
            }
            Op::Add { a, b } => {
                self.accum(a, grad);
                self.accum_reduced(b, grad);
            }
            Op::Sub { a, b } => {
                self.accum(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accum_reduced(b, &neg);
            }
            Op::Mul { a, b } => {
                let bl = self.nodes[b].data.len();
                let da: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(idx, g)| g * self.nodes[b].data[idx % bl])
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(g, av)| g * av)
                    .collect();
                self.accum(a, &da);
                self.accum_reduced(b, &db);
            }
            Op::Exp { input } => {
                let dg: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, out)| g * out)
                    .collect();
                self.accum(input, &dg);
            }
            Op::Silu { input } => {
                let dg: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[input].data)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accum(input, &dg);
            }
            Op::Gelu { input } => {
                let dg: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[input].data)
                    .map(|(g, &x)| g * (normal_cdf(x) + x * normal_pdf(x)))
                    .collect();
                self.accum(input, &dg);
            }
            Op::MatMul { a, b, m, k, n } => {
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                let bt = transpose_raw(&self.nodes[b].data, k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                let at = transpose_raw(&self.nodes[a].data, m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Transpose { input } => {
                let s = &self.nodes[i].shape;
                let dg = transpose_raw(grad, s[0], s[1]);
                self.accum(input, &dg);
            }
            Op::Softmax { input, axis } => {
                let shape = self.nodes[i].shape.clone();
                let out = &self.nodes[i].data;
                let mut dg = vec![0.0; out.len()];
                lanes(&shape, axis, |offsets| {
                    let dot: f64 = offsets.iter().map(|&o| grad[o] * out[o]).sum();
                    for &o in offsets {
                        dg[o] = out[o] * (grad[o] - dot);
                    }
                });
                self.accum(input, &dg);
            }
            Op::LayerNormRows { input, eps } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let src = &self.nodes[input].data;
                let mut dg = vec![0.0; src.len()];
                for r in 0..src.len() / d {
                    let row = &src[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(row, eps);
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv_std).collect();
                    let g_mean = g.iter().sum::<f64>() / d as f64;
                    let gx_mean = g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dg[r * d + j] = inv_std * (g[j] - g_mean - xhat[j] * gx_mean);
                    }
                }
                self.accum(input, &dg);
            }
            Op::SumAll { input } => {
                let dg = vec![grad[0]; self.nodes[input].data.len()];
                self.accum(input, &dg);
            }
            Op::MeanAll { input } => {
                let n = self.nodes[input].data.len() as f64;
                let dg = vec![grad[0] / n; self.nodes[input].data.len()];
                self.accum(input, &dg);
            }
            Op::SliceRows { input, start } => {
                let c = self.nodes[i].shape[1];
                let mut dg = vec![0.0; self.nodes[input].data.len()];
                dg[start * c..start * c + grad.len()].copy_from_slice(grad);
                self.accum(input, &dg);
            }
            Op::ConcatRows { inputs } => {
                let mut off = 0;
                for id in inputs {
                    let len = self.nodes[id].data.len();
                    let piece = grad[off..off + len].to_vec();
                    self.accum(id, &piece);
                    off += len;
                }
            }
            Op::SliceCols { input, start, end } => {
                let (r, c) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                let w = end - start;
                let mut dg = vec![0.0; r * c];
                for row in 0..r {
                    dg[row * c + start..row * c + end]
                        .copy_from_slice(&grad[row * w..(row + 1) * w]);
                }
                self.accum(input, &dg);
            }
            Op::ConcatCols { inputs } => {
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut off = 0;
                for id in inputs {
                    let w = self.nodes[id].shape[1];
                    let mut dg = vec![0.0; r * w];
                    for row in 0..r {
                        dg[row * w..(row + 1) * w]
                            .copy_from_slice(&grad[row * total + off..row * total + off + w]);
                    }
                    self.accum(id, &dg);
                    off += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let c = self.nodes[i].shape[1];
                let mut dg = vec![0.0; self.nodes[table].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dg[id * c + j] += grad[r * c + j];
                    }
                }
                self.accum(table, &dg);
            }
            Op::L2NormalizeRows { input } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let src = &self.nodes[input].data;
                let mut dg = vec![0.0; src.len()];
                for r in 0..src.len() / d {
                    let row = &src[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = row.iter().zip(g).map(|(x, gg)| x * gg).sum();
                    for j in 0..d {
                        dg[r * d + j] = g[j] / norm - row[j] * dot / (norm * norm * norm);
                    }
                }
                self.accum(input, &dg);
            }
            Op::MaskFill { input, mask } => {
                let dg: Vec<f64> = grad
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { 0.0 } else { g })
                    .collect();
                self.accum(input, &dg);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let classes = self.nodes[logits].shape[1];
                let src = &self.nodes[logits].data;
                let mut dg = vec![0.0; src.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &src[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / denom;
                        let delta = if j == t { 1.0 } else { 0.0 };
                        dg[r * classes + j] = grad[r] * (p - delta);
                    }
                }
                self.accum(logits, &dg);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Row-parallel dense matmul kernel shared by forward and backward.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    parallel::for_each_chunk_mut(&mut c, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (rv, &bv) in row.iter_mut().zip(br) {
                *rv += av * bv;
            }
        }
    });
    c
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    lanes(shape, axis, |offsets| {
        let max = offsets.iter().map(|&o| x[o]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &o in offsets {
            let e = (x[o] - max).exp();
            out[o] = e;
            sum += e;
        }
        for &o in offsets {
            out[o] /= sum;
        }
    });
    out
}

/// Visit every 1-D lane along `axis`, passing the flat offsets of its
/// elements.
fn lanes(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut offsets = vec![0usize; axis_size];
    for o in 0..outer {
        for i in 0..inner {
            for (a, slot) in offsets.iter_mut().enumerate() {
                *slot = o * axis_size * inner + a * inner + i;
            }
            f(&offsets);
        }
    }
}

/// Trailing-dimension broadcast test: `small` must be `[1]`, equal to
/// `big`, or a suffix of `big`.
fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    if small == [1] {
        return true;
    }
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[cfg(debug_assertions)]
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Exp { .. } => "exp",
        Op::Silu { .. } => "silu",
        Op::Gelu { .. } => "gelu",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Softmax { .. } => "softmax",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::MaskFill { .. } => "mask_fill",
        Op::CrossEntropyRows { .. } => "cross_entropy_rows",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn add_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2], vec![3.0, 4.0]));
        let c = tape.add(a, b);
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.5, -2.0, 7.25]));
        let ones = tape.leaf(&Tensor::full(vec![3], 1.0));
        let y = tape.mul(x, ones);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.exp(x);
        assert_eq!(tape.value(y), &[1.0]);
    }

    #[test]
    fn trailing_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(vec![2], vec![10.0, 20.0]));
        let c = tape.add(a, b);
        assert_eq!(tape.value(c), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    #[should_panic(expected = "does not broadcast")]
    fn non_suffix_broadcast_is_shape_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2], vec![0.0; 2]));
        tape.add(a, b);
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let prod = tape.matmul(eye, m);
        assert_eq!(tape.value(prod), tape.value(m));

        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner dims disagree")]
    fn matmul_dim_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        tape.matmul(a, b);
    }

    #[test]
    fn softmax_symmetry_and_limit() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![0.0, 0.0]));
        let s = tape.softmax(x, 0);
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let y = tape.leaf(&t(vec![2], vec![1000.0, 0.0]));
        let sy = tape.softmax(y, 0);
        assert!((tape.value(sy)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(sy)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![0.1, -4.0, 2.0, 9.0, 9.0, 9.0]));
        let s = tape.softmax(x, 1);
        let v = tape.value(s);
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(theta^2), theta = [1, 2] -> grad [2, 4]
        let mut params = ParamSet::new();
        let pid = params.add("block0.theta", t(vec![2], vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let th = tape.param(&params, pid);
        let sq = tape.mul(th, th);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut params);
        assert_eq!(params.get(pid).tensor.grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_no_grad() {
        let mut params = ParamSet::new();
        let used = params.add("block0.a", t(vec![1], vec![3.0]));
        let unused = params.add("block0.b", t(vec![1], vec![5.0]));
        let mut tape = Tape::new();
        let a = tape.param(&params, used);
        let loss = tape.sum_all(a);
        tape.backward(loss, &mut params);
        assert!(params.get(used).tensor.grad().is_some());
        assert!(params.get(unused).tensor.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_on_non_scalar_panics() {
        let mut params = ParamSet::new();
        let pid = params.add("block0.v", t(vec![2], vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&params, pid);
        tape.backward(v, &mut params);
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn backward_twice_panics() {
        let mut params = ParamSet::new();
        let pid = params.add("block0.v", t(vec![1], vec![1.0]));
        let mut tape = Tape::new();
        let v = tape.param(&params, pid);
        let loss = tape.sum_all(v);
        tape.backward(loss, &mut params);
        tape.backward(loss, &mut params);
    }

    #[test]
    fn backward_is_linear_over_sub_losses() {
        // grad of (l1 + l2) equals grad l1 + grad l2 computed separately
        let build = |tape: &mut Tape, params: &ParamSet, pid: ParamId, both: bool| {
            let th = tape.param(params, pid);
            let sq = tape.mul(th, th);
            let l1 = tape.sum_all(sq);
            if !both {
                return l1;
            }
            let tripled = tape.mul_scalar(th, 3.0);
            let l2 = tape.sum_all(tripled);
            tape.add(l1, l2)
        };

        let mut p_joint = ParamSet::new();
        let pid = p_joint.add("block0.w", t(vec![2], vec![0.5, -1.5]));
        let mut tape = Tape::new();
        let loss = build(&mut tape, &p_joint, pid, true);
        tape.backward(loss, &mut p_joint);
        let joint: Vec<f64> = p_joint.get(pid).tensor.grad().unwrap().to_vec();

        // separately: d(sum w^2) = 2w ; d(sum 3w) = 3
        assert_eq!(joint, vec![2.0 * 0.5 + 3.0, 2.0 * -1.5 + 3.0]);
    }

    #[test]
    fn gather_grad_touches_only_selected_rows() {
        let mut params = ParamSet::new();
        let pid = params.add("block0.table", t(vec![3, 2], vec![1.0; 6]));
        let mut tape = Tape::new();
        let table = tape.param(&params, pid);
        let picked = tape.gather_rows(table, &[1]);
        let loss = tape.sum_all(picked);
        tape.backward(loss, &mut params);
        assert_eq!(
            params.get(pid).tensor.grad().unwrap(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn mask_fill_blocks_gradient_and_value() {
        let mut params = ParamSet::new();
        let pid = params.add("block0.x", t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, pid);
        let masked = tape.mask_fill(x, &[false, true, true, false], -7.0);
        assert_eq!(tape.value(masked), &[1.0, -7.0, -7.0, 4.0]);
        let loss = tape.sum_all(masked);
        tape.backward(loss, &mut params);
        assert_eq!(params.get(pid).tensor.grad().unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            let pid = params.add("block0.w", t(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]));
            let mut tape = Tape::new();
            let w = tape.param(&params, pid);
            let h = tape.matmul(w, w);
            let s = tape.softmax(h, 1);
            let loss = tape.mean_all(s);
            tape.backward(loss, &mut params);
            params.get(pid).tensor.grad().unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
