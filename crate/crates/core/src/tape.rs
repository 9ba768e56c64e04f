//! Define-by-run differentiation tape.
//!
//! Every operation records a node holding its output value. Gradients are
//! produced by `grad`, which *emits the adjoint computation as new tape
//! ops*. Because the adjoints are themselves recorded, a gradient can be
//! differentiated again — that is what lets an SGD update
//! `θ' = θ − α·∇L(θ)` sit inside a larger graph and still receive exact
//! second-order terms when an outer loss is differentiated through it.
//!
//! Dense-layer ops (matmul, softmax, elementwise, ...) are differentiable
//! to any order. The convolution-path ops (conv2d, instance norm, pooling,
//! channel bias) have hand-coded first-order adjoints recorded as opaque
//! nodes; differentiating *through* those adjoints is an error. Unrolled
//! meta-gradients therefore require dense-layer students, which is all the
//! desk-scale label-learning runs use.
//!
//! A truncation marker (`truncate`) rewrites all earlier non-leaf nodes as
//! constants: gradients stop there, but tracked leaves recorded earlier
//! keep receiving gradients through ops recorded after the marker.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    id: usize,
}

impl TensorRef {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    Matmul(TensorRef, TensorRef),
    Transpose(TensorRef),
    /// [m,n] + bias[n], broadcast over rows.
    AddBias(TensorRef, TensorRef),
    ColSum(TensorRef),
    RowSum(TensorRef),
    /// [n] -> [m,n]
    BroadcastRows(TensorRef),
    /// [m] -> [m,n]
    BroadcastCols(TensorRef),
    /// [m,n] scaled per-row by [m].
    RowScale(TensorRef, TensorRef),
    Relu(TensorRef),
    Exp(TensorRef),
    Log(TensorRef),
    Powi(TensorRef, i32),
    Softmax(TensorRef),
    LogSoftmax(TensorRef),
    Sum(TensorRef),
    /// Scalar broadcast to a fixed shape (adjoint of Sum).
    FillLike(TensorRef),
    Reshape(TensorRef),
    GatherRows(TensorRef, Arc<[usize]>),
    /// Adjoint of GatherRows: scatter-add.
    ScatterRows(TensorRef, Arc<[usize]>),
    Conv2d(TensorRef, TensorRef, ConvGeom),
    AddChannelBias(TensorRef, TensorRef),
    InstanceNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    },
    AvgPool2(TensorRef),
    /// First-order adjoint values (conv path). Not differentiable further.
    Opaque(&'static str),
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Gradients extracted by [`Tape::backward`], keyed by leaf node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
    untouched: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, r: TensorRef) -> Option<&Tensor> {
        self.grads.get(&r.id)
    }

    pub fn take(&mut self, r: TensorRef) -> Option<Tensor> {
        self.grads.remove(&r.id)
    }

    /// Tracked leaves that the loss does not depend on (their gradient is
    /// zero). Useful when debugging detached graphs.
    pub fn untouched(&self) -> &[usize] {
        &self.untouched
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    truncation_marks: Vec<usize>,
    update_depth: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drop all recorded state; handles from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.truncation_marks.clear();
        self.update_depth = 0;
    }

    /// Record a gradient-tracked leaf (parameters, learned labels).
    pub fn leaf(&mut self, value: Tensor) -> Result<TensorRef> {
        self.push("leaf", Op::Leaf, value, true)
    }

    /// Record a constant (inputs, targets, anything frozen).
    pub fn constant(&mut self, value: Tensor) -> Result<TensorRef> {
        self.push("constant", Op::Constant, value, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.id].value
    }

    pub fn is_tracked(&self, r: TensorRef) -> bool {
        self.nodes[r.id].tracked
    }

    /// Place a truncation marker: all non-leaf history before this point
    /// becomes constant. Gradients of later ops stop at values computed
    /// before the marker, while leaves keep receiving gradients through
    /// ops recorded after it.
    pub fn truncate(&mut self) -> Result<()> {
        if self.update_depth > 0 {
            return Err(CoreError::TruncateInsideUpdate);
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Constant;
                node.tracked = false;
            }
        }
        self.truncation_marks.push(self.nodes.len());
        Ok(())
    }

    pub fn truncation_marks(&self) -> &[usize] {
        &self.truncation_marks
    }

    /// Bracket one parameter-update step so that a truncation marker cannot
    /// split it in half.
    pub fn begin_update_step(&mut self) {
        self.update_depth += 1;
    }

    pub fn end_update_step(&mut self) {
        debug_assert!(self.update_depth > 0, "unbalanced end_update_step");
        self.update_depth = self.update_depth.saturating_sub(1);
    }

    // ── op recording ──────────────────────────────────────────────────

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, tracked: bool) -> Result<TensorRef> {
        if let Some(index) = value.first_non_finite() {
            return Err(CoreError::NonFinite { op: name, index });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, tracked });
        Ok(TensorRef { id })
    }

    fn tracked_any(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.id].tracked)
    }

    fn want_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn want_rank2(&self, op: &'static str, a: TensorRef) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(CoreError::BadShape {
                op,
                detail: alloc::format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.want_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push("add", Op::Add(a, b), value, tracked)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.want_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push("sub", Op::Sub(a, b), value, tracked)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.want_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push("mul", Op::Mul(a, b), value, tracked)
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("scale", Op::Scale(a, c), value, tracked)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.want_rank2("matmul", a)?;
        let (kb, n) = self.want_rank2("matmul", b)?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), m, ka, self.value(b).data(), n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push("matmul", Op::Matmul(a, b), value, tracked)
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("transpose", a)?;
        let mut out = vec![0.0; m * n];
        kernels::transpose(self.value(a).data(), m, n, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("transpose", Op::Transpose(a), value, tracked)
    }

    /// logits[m,n] + bias[n].
    pub fn add_bias(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("add_bias", a)?;
        if self.value(b).shape() != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked_any(&[a, b]);
        self.push("add_bias", Op::AddBias(a, b), value, tracked)
    }

    pub fn col_sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("col_sum", a)?;
        let mut out = vec![0.0; n];
        kernels::col_sum(self.value(a).data(), m, n, &mut out);
        let value = Tensor::new(vec![n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("col_sum", Op::ColSum(a), value, tracked)
    }

    pub fn row_sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("row_sum", a)?;
        let mut out = vec![0.0; m];
        kernels::row_sum(self.value(a).data(), m, n, &mut out);
        let value = Tensor::new(vec![m], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("row_sum", Op::RowSum(a), value, tracked)
    }

    pub fn broadcast_rows(&mut self, a: TensorRef, m: usize) -> Result<TensorRef> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 1 {
            return Err(CoreError::BadShape {
                op: "broadcast_rows",
                detail: alloc::format!("expected rank-1, got {s:?}"),
            });
        }
        let n = s[0];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            out[r * n..(r + 1) * n].copy_from_slice(self.value(a).data());
        }
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("broadcast_rows", Op::BroadcastRows(a), value, tracked)
    }

    pub fn broadcast_cols(&mut self, a: TensorRef, n: usize) -> Result<TensorRef> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 1 {
            return Err(CoreError::BadShape {
                op: "broadcast_cols",
                detail: alloc::format!("expected rank-1, got {s:?}"),
            });
        }
        let m = s[0];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let v = self.value(a).data()[r];
            out[r * n..(r + 1) * n].fill(v);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("broadcast_cols", Op::BroadcastCols(a), value, tracked)
    }

    pub fn row_scale(&mut self, a: TensorRef, s: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("row_scale", a)?;
        if self.value(s).shape() != [m] {
            return Err(CoreError::ShapeMismatch {
                op: "row_scale",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::row_scale(self.value(a).data(), self.value(s).data(), m, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked_any(&[a, s]);
        self.push("row_scale", Op::RowScale(a, s), value, tracked)
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        let mut out = vec![0.0; self.value(a).len()];
        kernels::relu(self.value(a).data(), &mut out);
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("relu", Op::Relu(a), value, tracked)
    }

    pub fn exp(&mut self, a: TensorRef) -> Result<TensorRef> {
        let data = self.value(a).data().iter().map(|&x| libm::exp(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("exp", Op::Exp(a), value, tracked)
    }

    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef> {
        let data = self.value(a).data().iter().map(|&x| libm::log(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("log", Op::Log(a), value, tracked)
    }

    pub fn powi(&mut self, a: TensorRef, k: i32) -> Result<TensorRef> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| libm::pow(x, k as f64))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("powi", Op::Powi(a, k), value, tracked)
    }

    pub fn softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("softmax", a)?;
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(self.value(a).data(), m, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("softmax", Op::Softmax(a), value, tracked)
    }

    pub fn log_softmax(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("log_softmax", a)?;
        let mut out = vec![0.0; m * n];
        kernels::log_softmax_rows(self.value(a).data(), m, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("log_softmax", Op::LogSoftmax(a), value, tracked)
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let total: f64 = self.value(a).data().iter().sum();
        let tracked = self.nodes[a.id].tracked;
        self.push("sum", Op::Sum(a), Tensor::scalar(total), tracked)
    }

    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn fill_like(&mut self, scalar: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let v = self.value(scalar).item()?;
        let value = Tensor::full(&shape, v);
        let tracked = self.nodes[scalar.id].tracked;
        self.push("fill_like", Op::FillLike(scalar), value, tracked)
    }

    pub fn reshape(&mut self, a: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let value = Tensor::new(shape.clone(), self.value(a).data().to_vec())?;
        let tracked = self.nodes[a.id].tracked;
        self.push("reshape", Op::Reshape(a), value, tracked)
    }

    pub fn gather_rows(&mut self, a: TensorRef, idx: &[usize]) -> Result<TensorRef> {
        let (m, n) = self.want_rank2("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(CoreError::InvalidArg {
                what: alloc::format!("gather_rows index {bad} out of range for {m} rows"),
            });
        }
        let mut out = vec![0.0; idx.len() * n];
        kernels::gather_rows(self.value(a).data(), n, idx, &mut out);
        let value = Tensor::new(vec![idx.len(), n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("gather_rows", Op::GatherRows(a, idx.into()), value, tracked)
    }

    fn scatter_rows(&mut self, a: TensorRef, idx: Arc<[usize]>, rows: usize) -> Result<TensorRef> {
        let (_, n) = self.want_rank2("scatter_rows", a)?;
        let mut out = vec![0.0; rows * n];
        kernels::scatter_rows_add(self.value(a).data(), n, &idx, &mut out);
        let value = Tensor::new(vec![rows, n], out)?;
        let tracked = self.nodes[a.id].tracked;
        self.push("scatter_rows", Op::ScatterRows(a, idx), value, tracked)
    }

    // ── conv path (first-order adjoints) ─────────────────────────────

    pub fn conv2d(&mut self, x: TensorRef, w: TensorRef, pad: usize) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            pad,
        };
        let mut out = vec![0.0; geom.n * geom.c_out * geom.out_h() * geom.out_w()];
        kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        let value = Tensor::new(vec![geom.n, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.tracked_any(&[x, w]);
        self.push("conv2d", Op::Conv2d(x, w, geom), value, tracked)
    }

    pub fn add_channel_bias(&mut self, x: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(b).shape() != [xs[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: xs,
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let plane = xs[2] * xs[3];
        let mut out = vec![0.0; self.value(x).len()];
        kernels::add_channel_bias(self.value(x).data(), self.value(b).data(), xs[0], xs[1], plane, &mut out);
        let value = Tensor::new(xs, out)?;
        let tracked = self.tracked_any(&[x, b]);
        self.push("add_channel_bias", Op::AddChannelBias(x, b), value, tracked)
    }

    pub fn instance_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4
            || self.value(gamma).shape() != [xs[1]]
            || self.value(beta).shape() != [xs[1]]
        {
            return Err(CoreError::ShapeMismatch {
                op: "instance_norm",
                lhs: xs,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let plane = xs[2] * xs[3];
        let mut out = vec![0.0; self.value(x).len()];
        kernels::instance_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            xs[1],
            plane,
            eps,
            &mut out,
        );
        let value = Tensor::new(xs, out)?;
        let tracked = self.tracked_any(&[x, gamma, beta]);
        self.push(
            "instance_norm",
            Op::InstanceNorm { x, gamma, beta, eps },
            value,
            tracked,
        )
    }

    pub fn avgpool2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(CoreError::BadShape {
                op: "avgpool2",
                detail: alloc::format!("expected rank-4, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; n * c * (h / 2) * (w / 2)];
        kernels::avgpool2(self.value(x).data(), n, c, h, w, &mut out);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let tracked = self.nodes[x.id].tracked;
        self.push("avgpool2", Op::AvgPool2(x), value, tracked)
    }

    fn opaque(&mut self, name: &'static str, value: Tensor, tracked: bool) -> Result<TensorRef> {
        self.push(name, Op::Opaque(name), value, tracked)
    }

    // ── reverse sweep ─────────────────────────────────────────────────

    /// Differentiate `loss` w.r.t. each of `wrt`, emitting the adjoint
    /// computation onto the tape. The returned refs stay differentiable
    /// wherever the ops involved support it.
    pub fn grad(&mut self, loss: TensorRef, wrt: &[TensorRef]) -> Result<Vec<TensorRef>> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let horizon = self.nodes.len();
        let mut adj: Vec<Option<TensorRef>> = vec![None; horizon];
        if self.nodes[loss.id].tracked {
            let one = self.constant(Tensor::scalar(1.0))?;
            adj[loss.id] = Some(one);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    self.accumulate(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    let gb = self.scale(g, -1.0)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.id].tracked {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.id].tracked {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.id].tracked {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.id].tracked {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::AddBias(a, b) => {
                    self.accumulate(&mut adj, a, g)?;
                    if self.nodes[b.id].tracked {
                        let gb = self.col_sum(g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::ColSum(a) => {
                    let m = self.value(a).shape()[0];
                    let ga = self.broadcast_rows(g, m)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RowSum(a) => {
                    let n = self.value(a).shape()[1];
                    let ga = self.broadcast_cols(g, n)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastRows(a) => {
                    let ga = self.col_sum(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastCols(a) => {
                    let ga = self.row_sum(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RowScale(a, s) => {
                    if self.nodes[a.id].tracked {
                        let ga = self.row_scale(g, s)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[s.id].tracked {
                        let prod = self.mul(g, a)?;
                        let gs = self.row_sum(prod)?;
                        self.accumulate(&mut adj, s, gs)?;
                    }
                }
                Op::Relu(a) => {
                    let mut mask = vec![0.0; self.value(a).len()];
                    kernels::relu_mask(self.value(a).data(), &mut mask);
                    let mask = self.constant(Tensor::new(self.value(a).shape().to_vec(), mask)?)?;
                    let ga = self.mul(g, mask)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let out = TensorRef { id };
                    let ga = self.mul(g, out)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let inv = self.powi(a, -1)?;
                    let ga = self.mul(g, inv)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Powi(a, k) => {
                    if k == 0 {
                        let zero = self.constant(Tensor::zeros(self.value(a).shape()))?;
                        self.accumulate(&mut adj, a, zero)?;
                    } else {
                        let pk = self.powi(a, k - 1)?;
                        let prod = self.mul(g, pk)?;
                        let ga = self.scale(prod, k as f64)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                }
                Op::Softmax(a) => {
                    // gx = s ⊙ (g − rowsum(g ⊙ s))
                    let s = TensorRef { id };
                    let n = self.value(s).shape()[1];
                    let gs = self.mul(g, s)?;
                    let t = self.row_sum(gs)?;
                    let u = self.broadcast_cols(t, n)?;
                    let d = self.sub(g, u)?;
                    let ga = self.mul(s, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::LogSoftmax(a) => {
                    // gx = g − softmax(x) ⊙ rowsum(g)
                    let out = TensorRef { id };
                    let n = self.value(out).shape()[1];
                    let s = self.exp(out)?;
                    let t = self.row_sum(g)?;
                    let u = self.broadcast_cols(t, n)?;
                    let v = self.mul(s, u)?;
                    let ga = self.sub(g, v)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.fill_like(g, shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::FillLike(a) => {
                    let ga = self.sum(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.reshape(g, shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::GatherRows(a, idx) => {
                    let rows = self.value(a).shape()[0];
                    let ga = self.scatter_rows(g, idx, rows)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::ScatterRows(a, idx) => {
                    let ga = self.gather_rows(g, &idx)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Conv2d(x, w, geom) => {
                    let want_dx = self.nodes[x.id].tracked;
                    let want_dw = self.nodes[w.id].tracked;
                    let mut dx = want_dx.then(|| vec![0.0; self.value(x).len()]);
                    let mut dw = want_dw.then(|| vec![0.0; self.value(w).len()]);
                    kernels::conv2d_backward(
                        self.value(x).data(),
                        self.value(w).data(),
                        self.value(g).data(),
                        &geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        let t = Tensor::new(self.value(x).shape().to_vec(), dx)?;
                        let gx = self.opaque("conv2d_dx", t, true)?;
                        self.accumulate(&mut adj, x, gx)?;
                    }
                    if let Some(dw) = dw {
                        let t = Tensor::new(self.value(w).shape().to_vec(), dw)?;
                        let gw = self.opaque("conv2d_dw", t, true)?;
                        self.accumulate(&mut adj, w, gw)?;
                    }
                }
                Op::AddChannelBias(x, b) => {
                    self.accumulate(&mut adj, x, g)?;
                    if self.nodes[b.id].tracked {
                        let xs = self.value(x).shape().to_vec();
                        let mut db = vec![0.0; xs[1]];
                        kernels::channel_bias_grad(
                            self.value(g).data(),
                            xs[0],
                            xs[1],
                            xs[2] * xs[3],
                            &mut db,
                        );
                        let gb = self.opaque("channel_bias_dgrad", Tensor::new(vec![xs[1]], db)?, true)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    let xs = self.value(x).shape().to_vec();
                    let mut dx = vec![0.0; self.value(x).len()];
                    let mut dgamma = vec![0.0; xs[1]];
                    let mut dbeta = vec![0.0; xs[1]];
                    kernels::instance_norm_backward(
                        self.value(x).data(),
                        self.value(gamma).data(),
                        self.value(g).data(),
                        xs[0],
                        xs[1],
                        xs[2] * xs[3],
                        eps,
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                    );
                    if self.nodes[x.id].tracked {
                        let t = Tensor::new(xs.clone(), dx)?;
                        let gx = self.opaque("instance_norm_dx", t, true)?;
                        self.accumulate(&mut adj, x, gx)?;
                    }
                    if self.nodes[gamma.id].tracked {
                        let t = Tensor::new(vec![xs[1]], dgamma)?;
                        let gg = self.opaque("instance_norm_dgamma", t, true)?;
                        self.accumulate(&mut adj, gamma, gg)?;
                    }
                    if self.nodes[beta.id].tracked {
                        let t = Tensor::new(vec![xs[1]], dbeta)?;
                        let gb = self.opaque("instance_norm_dbeta", t, true)?;
                        self.accumulate(&mut adj, beta, gb)?;
                    }
                }
                Op::AvgPool2(x) => {
                    let xs = self.value(x).shape().to_vec();
                    let mut dx = vec![0.0; self.value(x).len()];
                    kernels::avgpool2_backward(self.value(g).data(), xs[0], xs[1], xs[2], xs[3], &mut dx);
                    let t = Tensor::new(xs, dx)?;
                    let gx = self.opaque("avgpool2_dx", t, true)?;
                    self.accumulate(&mut adj, x, gx)?;
                }
                Op::Opaque(name) => {
                    return Err(CoreError::NotTwiceDifferentiable { op: name });
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match adj.get(w.id).copied().flatten() {
                Some(r) => out.push(r),
                None => {
                    let zero = self.constant(Tensor::zeros(self.value(*w).shape()))?;
                    out.push(zero);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<TensorRef>],
        target: TensorRef,
        g: TensorRef,
    ) -> Result<()> {
        if !self.nodes[target.id].tracked || target.id >= adj.len() {
            return Ok(());
        }
        adj[target.id] = Some(match adj[target.id] {
            None => g,
            Some(old) => self.add(old, g)?,
        });
        Ok(())
    }

    /// Gradient of a scalar loss w.r.t. every tracked leaf, as plain
    /// tensors. Leaves the loss does not reach get zero gradients and are
    /// listed as untouched.
    pub fn backward(&mut self, loss: TensorRef) -> Result<Gradients> {
        let leaves: Vec<TensorRef> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].tracked)
            .map(|id| TensorRef { id })
            .collect();
        let refs = self.grad(loss, &leaves)?;
        let mut grads = Gradients::default();
        for (leaf, r) in leaves.iter().zip(&refs) {
            if matches!(self.nodes[r.id].op, Op::Constant)
                && self.value(*r).data().iter().all(|&v| v == 0.0)
            {
                grads.untouched.push(leaf.id);
            }
            grads.grads.insert(leaf.id, self.value(*r).clone());
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x²), x = [1, 2] → grad = [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let x2 = tape.mul(x, x).unwrap();
        let loss = tape.sum(x2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(Tensor::scalar(7.0)).unwrap();
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.untouched(), &[x.id()]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(CoreError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let e = tape.exp(r).unwrap();
        let loss = tape.sum(e).unwrap();
        let g1 = tape.grad(loss, &[x]).unwrap();
        let g2 = tape.grad(loss, &[x]).unwrap();
        assert_eq!(tape.value(g1[0]).data(), tape.value(g2[0]).data());
    }

    #[test]
    fn one_step_unroll_closed_form() {
        // Inner: L(θ) = ½(θ−y)², θ₁ = θ − α(θ−y).
        // Outer: (θ₁ − t)² → dOuter/dy = 2(θ₁−t)·α.
        let (theta0, y0, tgt, alpha) = (0.7, -0.4, 0.25, 0.05);
        let mut tape = Tape::new();
        // θ is a leaf so the inner gradient flows through it; the outer
        // backward simply never asks for θ's own gradient.
        let theta = tape.leaf(Tensor::scalar(theta0)).unwrap();
        let y = tape.leaf(Tensor::scalar(y0)).unwrap();

        let d = tape.sub(theta, y).unwrap();
        let d2 = tape.mul(d, d).unwrap();
        let half = tape.scale(d2, 0.5).unwrap();
        let inner = tape.sum(half).unwrap();

        tape.begin_update_step();
        let gtheta = tape.grad(inner, &[theta]).unwrap()[0];
        let step = tape.scale(gtheta, alpha).unwrap();
        let theta1 = tape.sub(theta, step).unwrap();
        tape.end_update_step();

        let tc = tape.constant(Tensor::scalar(tgt)).unwrap();
        let od = tape.sub(theta1, tc).unwrap();
        let od2 = tape.mul(od, od).unwrap();
        let outer = tape.sum(od2).unwrap();

        let gy = tape.backward(outer).unwrap().take(y).unwrap().item().unwrap();
        let theta1_val = theta0 - alpha * (theta0 - y0);
        let expect = 2.0 * (theta1_val - tgt) * alpha;
        assert!((gy - expect).abs() < 1e-12, "{gy} vs {expect}");
    }

    #[test]
    fn zero_inner_lr_kills_label_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(0.7)).unwrap();
        let y = tape.leaf(Tensor::scalar(-0.4)).unwrap();
        let d = tape.sub(theta, y).unwrap();
        let d2 = tape.mul(d, d).unwrap();
        let inner = tape.sum(d2).unwrap();
        let gtheta = tape.grad(inner, &[theta]).unwrap()[0];
        let step = tape.scale(gtheta, 0.0).unwrap();
        let theta1 = tape.sub(theta, step).unwrap();
        let sq = tape.mul(theta1, theta1).unwrap();
        let outer = tape.sum(sq).unwrap();
        let gy = tape.backward(outer).unwrap().take(y).unwrap();
        assert_eq!(gy.data(), &[0.0]);
    }

    #[test]
    fn truncation_freezes_history_but_not_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let b = tape.mul(a, a).unwrap(); // b = a², pre-marker history
        tape.truncate().unwrap();
        // Post-marker: loss = b·a. Without truncation dL/da = 3a² = 12;
        // with b frozen it is b = 4.
        let l = tape.mul(b, a).unwrap();
        let loss = tape.sum(l).unwrap();
        let g = tape.backward(loss).unwrap().take(a).unwrap().item().unwrap();
        assert_eq!(g, 4.0);
    }

    #[test]
    fn truncate_inside_update_step_is_an_error() {
        let mut tape = Tape::new();
        let _ = tape.leaf(Tensor::scalar(1.0)).unwrap();
        tape.begin_update_step();
        assert!(matches!(tape.truncate(), Err(CoreError::TruncateInsideUpdate)));
        tape.end_update_step();
        assert!(tape.truncate().is_ok());
    }

    #[test]
    fn conv_adjoints_are_first_order_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 0.5)).unwrap();
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.1)).unwrap();
        let y = tape.conv2d(x, w, 1).unwrap();
        let loss = tape.sum(y).unwrap();
        let gw = tape.grad(loss, &[w]).unwrap()[0];
        // Differentiating a quantity built from the opaque adjoint fails.
        let s = tape.sum(gw).unwrap();
        assert!(matches!(
            tape.grad(s, &[w]),
            Err(CoreError::NotTwiceDifferentiable { .. })
        ));
    }

    #[test]
    fn non_finite_outputs_are_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 0.0])).unwrap();
        // log of a negative number is NaN.
        assert!(matches!(
            tape.log(x),
            Err(CoreError::NonFinite { op: "log", .. })
        ));
    }
}
