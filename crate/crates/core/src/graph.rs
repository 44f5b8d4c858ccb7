//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! A `Graph` records every operation as it runs. Nodes index earlier nodes, so
//! reverse creation order is already a topological order and `backward` is a
//! single sweep. Leaves accumulate gradients; constants stop propagation.
//!
//! The op set is exactly what the sequence model and the training losses need:
//! matmul, elementwise arithmetic, row gathers, layer norm, GELU, fused causal
//! attention, log-softmax, and a handful of clipping/min/max ops for the PPO
//! objectives.

use crate::error::NnError;
use crate::tensor::{dot, log_softmax_row, softmax_row, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        // per-row (normalized activations, inverse std)
        norm: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        // per-head attention weights, lower triangular [T x T]
        attn: Vec<Tensor>,
    },
    LogSoftmaxRows(NodeId),
    PickPerRow(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input; gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input; backward does not descend into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    /// Zero tensor if the node did not influence the loss.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape mismatch");
        let mut out = va.clone();
        for (o, &x) in out.data.iter_mut().zip(&vb.data) {
            *o -= x;
        }
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape mismatch");
        let mut out = va.clone();
        for (o, &x) in out.data.iter_mut().zip(&vb.data) {
            *o *= x;
        }
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        let ng = self.wants(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Broadcast-add a `[1 x d]` row to every row of a `[T x d]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "add_row expects a [1 x d] row");
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            let orow = out.row_mut(r);
            for (o, &x) in orow.iter_mut().zip(&vr.data) {
                *o += x;
            }
        }
        let ng = self.wants(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = Tensor::matmul(self.value(a), self.value(b));
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Matmul(a, b), ng)
    }

    /// Gather rows of `a` by index (embedding lookup / step-position select).
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(indices.len(), va.cols);
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < va.rows, "gather_rows index out of range");
            out.row_mut(r).copy_from_slice(va.row(idx));
        }
        let ng = self.wants(&[a]);
        self.push(out, Op::GatherRows(a, indices), ng)
    }

    /// Row-wise layer norm with affine gain/bias (`gain`, `bias` are [1 x d]).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(g.cols, vx.cols);
        let d = vx.cols as f64;
        let mut norm = Tensor::zeros(vx.rows, vx.cols);
        let mut inv_std = Vec::with_capacity(vx.rows);
        let mut out = Tensor::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            let nrow = norm.row_mut(r);
            for (n, &v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let orow = out.row_mut(r);
            for ((o, n), (&gv, &bv)) in orow
                .iter_mut()
                .zip(norm.row(r))
                .zip(g.data.iter().zip(&b.data))
            {
                *o = n * gv + bv;
            }
        }
        let ng = self.wants(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                norm,
                inv_std,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        let ng = self.wants(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Multi-head causal self-attention over already-projected q/k/v [T x d].
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(vq.same_shape(vk) && vq.same_shape(vv));
        let t = vq.rows;
        let d = vq.cols;
        assert!(heads > 0 && d % heads == 0, "head count must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = Tensor::zeros(t, d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut a = Tensor::zeros(t, t);
            for i in 0..t {
                // scores over positions 0..=i only (causal mask)
                let qrow = &vq.row(i)[off..off + dh];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    scores.push(dot(qrow, &vk.row(j)[off..off + dh]) * scale);
                }
                let mut probs = vec![0.0; i + 1];
                softmax_row(&scores, &mut probs);
                a.row_mut(i)[..=i].copy_from_slice(&probs);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &p) in probs.iter().enumerate() {
                    let vrow = &vv.row(j)[off..off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
            attn.push(a);
        }
        let ng = self.wants(&[q, k, v]);
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                attn,
            },
            ng,
        )
    }

    /// Row-wise numerically stable log-softmax.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let (lo, hi) = (r * va.cols, (r + 1) * va.cols);
            log_softmax_row(&va.data[lo..hi], &mut out.data[lo..hi]);
        }
        let ng = self.wants(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Select one column per row: out[r, 0] = a[r, cols[r]].
    pub fn pick_per_row(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let va = self.value(a);
        assert_eq!(cols.len(), va.rows, "pick_per_row needs one column per row");
        let mut out = Tensor::zeros(va.rows, 1);
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < va.cols, "pick_per_row column out of range");
            out.data[r] = va.at(r, c);
        }
        let ng = self.wants(&[a]);
        self.push(out, Op::PickPerRow(a, cols), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.wants(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum::<f64>() / va.numel() as f64;
        let ng = self.wants(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = -*v);
        let ng = self.wants(&[a]);
        self.push(out, Op::Neg(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.exp());
        let ng = self.wants(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let ng = self.wants(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "minimum shape mismatch");
        let mut out = va.clone();
        for (o, &x) in out.data.iter_mut().zip(&vb.data) {
            *o = o.min(x);
        }
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Minimum(a, b), ng)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "maximum shape mismatch");
        let mut out = va.clone();
        for (o, &x) in out.data.iter_mut().zip(&vb.data) {
            *o = o.max(x);
        }
        let ng = self.wants(&[a, b]);
        self.push(out, Op::Maximum(a, b), ng)
    }

    /// Reverse sweep from a scalar loss. Gradients land in the `grad` slot of
    /// every node on the path; untouched leaves read back as zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::NonScalarLoss {
                rows: self.nodes[loss.0].value.rows,
                cols: self.nodes[loss.0].value.cols,
            });
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        let mut deltas: Vec<(NodeId, Tensor)> = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            deltas.clear();
            self.propagate(i, &gout, &mut deltas);
            self.nodes[i].grad = Some(gout);
            for (id, delta) in deltas.drain(..) {
                let node = &mut self.nodes[id.0];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(g) => g.add_assign(&delta),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &Tensor, deltas: &mut Vec<(NodeId, Tensor)>) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                deltas.push((*a, gout.clone()));
                deltas.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                deltas.push((*a, gout.clone()));
                let mut gb = gout.clone();
                gb.data.iter_mut().for_each(|v| *v = -*v);
                deltas.push((*b, gb));
            }
            Op::Mul(a, b) => {
                let mut ga = gout.clone();
                for (g, &x) in ga.data.iter_mut().zip(&self.nodes[b.0].value.data) {
                    *g *= x;
                }
                let mut gb = gout.clone();
                for (g, &x) in gb.data.iter_mut().zip(&self.nodes[a.0].value.data) {
                    *g *= x;
                }
                deltas.push((*a, ga));
                deltas.push((*b, gb));
            }
            Op::Scale(a, s) => {
                let mut ga = gout.clone();
                let s = *s;
                ga.data.iter_mut().for_each(|v| *v *= s);
                deltas.push((*a, ga));
            }
            Op::AddRow(a, row) => {
                deltas.push((*a, gout.clone()));
                let mut grow = Tensor::zeros(1, gout.cols);
                for r in 0..gout.rows {
                    for (g, &x) in grow.data.iter_mut().zip(gout.row(r)) {
                        *g += x;
                    }
                }
                deltas.push((*row, grow));
            }
            Op::Matmul(a, b) => {
                // dA = dC @ B^T ; dB = A^T @ dC
                let ga = Tensor::matmul_nt(gout, &self.nodes[b.0].value);
                let gb = Tensor::matmul_tn(&self.nodes[a.0].value, gout);
                deltas.push((*a, ga));
                deltas.push((*b, gb));
            }
            Op::GatherRows(a, indices) => {
                let src = &self.nodes[a.0].value;
                let mut ga = Tensor::zeros(src.rows, src.cols);
                for (r, &idx) in indices.iter().enumerate() {
                    let grow = gout.row(r);
                    let arow = ga.row_mut(idx);
                    for (g, &x) in arow.iter_mut().zip(grow) {
                        *g += x;
                    }
                }
                deltas.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                norm,
                inv_std,
            } => {
                let g = &self.nodes[gain.0].value;
                let d = norm.cols as f64;
                let mut gx = Tensor::zeros(norm.rows, norm.cols);
                let mut ggain = Tensor::zeros(1, norm.cols);
                let mut gbias = Tensor::zeros(1, norm.cols);
                for (r, &is) in inv_std.iter().enumerate() {
                    let go = gout.row(r);
                    let nr = norm.row(r);
                    // dgain += dy .* norm ; dbias += dy
                    for c in 0..norm.cols {
                        ggain.data[c] += go[c] * nr[c];
                        gbias.data[c] += go[c];
                    }
                    // dx = (gy - mean(gy) - norm * mean(gy .* norm)) * inv_std
                    // with gy = dy .* gain
                    let mut mean_gy = 0.0;
                    let mut mean_gyn = 0.0;
                    for c in 0..norm.cols {
                        let gy = go[c] * g.data[c];
                        mean_gy += gy;
                        mean_gyn += gy * nr[c];
                    }
                    mean_gy /= d;
                    mean_gyn /= d;
                    let gxr = gx.row_mut(r);
                    for c in 0..norm.cols {
                        let gy = go[c] * g.data[c];
                        gxr[c] = (gy - mean_gy - nr[c] * mean_gyn) * is;
                    }
                }
                deltas.push((*x, gx));
                deltas.push((*gain, ggain));
                deltas.push((*bias, gbias));
            }
            Op::Gelu(a) => {
                let mut ga = gout.clone();
                for (g, &x) in ga.data.iter_mut().zip(&self.nodes[a.0].value.data) {
                    *g *= gelu_grad(x);
                }
                deltas.push((*a, ga));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                attn,
            } => {
                let vq = &self.nodes[q.0].value;
                let vk = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let t = vq.rows;
                let d = vq.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(t, d);
                let mut gk = Tensor::zeros(t, d);
                let mut gv = Tensor::zeros(t, d);
                for (h, a) in attn.iter().enumerate().take(*heads) {
                    let off = h * dh;
                    for i in 0..t {
                        let go = &gout.row(i)[off..off + dh];
                        let arow = &a.row(i)[..=i];
                        // dV[j] += a[i,j] * gout[i]; da[i,j] = dot(gout[i], V[j])
                        let mut da = vec![0.0; i + 1];
                        for (j, daj) in da.iter_mut().enumerate() {
                            let p = arow[j];
                            let vrow = &vv.row(j)[off..off + dh];
                            *daj = dot(go, vrow);
                            if p != 0.0 {
                                let gvrow = &mut gv.row_mut(j)[off..off + dh];
                                for (gvx, &g) in gvrow.iter_mut().zip(go) {
                                    *gvx += p * g;
                                }
                            }
                        }
                        // softmax backward: ds = a .* (da - sum(da .* a))
                        let inner: f64 = da.iter().zip(arow).map(|(x, y)| x * y).sum();
                        for j in 0..=i {
                            let ds = arow[j] * (da[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &vk.row(j)[off..off + dh];
                            let qrow = &vq.row(i)[off..off + dh];
                            let gqrow = &mut gq.row_mut(i)[off..off + dh];
                            for (g, &x) in gqrow.iter_mut().zip(krow) {
                                *g += ds * x;
                            }
                            let gkrow = &mut gk.row_mut(j)[off..off + dh];
                            for (g, &x) in gkrow.iter_mut().zip(qrow) {
                                *g += ds * x;
                            }
                        }
                    }
                }
                deltas.push((*q, gq));
                deltas.push((*k, gk));
                deltas.push((*v, gv));
            }
            Op::LogSoftmaxRows(a) => {
                let out = &self.nodes[idx].value;
                let mut ga = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let gsum: f64 = gout.row(r).iter().sum();
                    let orow = out.row(r);
                    let garow = ga.row_mut(r);
                    for c in 0..out.cols {
                        garow[c] = gout.row(r)[c] - orow[c].exp() * gsum;
                    }
                }
                deltas.push((*a, ga));
            }
            Op::PickPerRow(a, cols) => {
                let src = &self.nodes[a.0].value;
                let mut ga = Tensor::zeros(src.rows, src.cols);
                for (r, &c) in cols.iter().enumerate() {
                    // pick_per_row may repeat rows only via gather upstream;
                    // each output row maps to a distinct (r, c) slot here.
                    ga.set(r, c, ga.at(r, c) + gout.data[r]);
                }
                deltas.push((*a, ga));
            }
            Op::Sum(a) => {
                let src = &self.nodes[a.0].value;
                let ga = Tensor::full(src.rows, src.cols, gout.item());
                deltas.push((*a, ga));
            }
            Op::Mean(a) => {
                let src = &self.nodes[a.0].value;
                let ga = Tensor::full(src.rows, src.cols, gout.item() / src.numel() as f64);
                deltas.push((*a, ga));
            }
            Op::Neg(a) => {
                let mut ga = gout.clone();
                ga.data.iter_mut().for_each(|v| *v = -*v);
                deltas.push((*a, ga));
            }
            Op::Exp(a) => {
                let out = &self.nodes[idx].value;
                let mut ga = gout.clone();
                for (g, &y) in ga.data.iter_mut().zip(&out.data) {
                    *g *= y;
                }
                deltas.push((*a, ga));
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = gout.clone();
                for (g, &x) in ga.data.iter_mut().zip(&self.nodes[a.0].value.data) {
                    if x < *lo || x > *hi {
                        *g = 0.0;
                    }
                }
                deltas.push((*a, ga));
            }
            Op::Minimum(a, b) => {
                let mut ga = gout.clone();
                let mut gb = gout.clone();
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                for i in 0..va.len() {
                    // ties route to the first argument
                    if va[i] <= vb[i] {
                        gb.data[i] = 0.0;
                    } else {
                        ga.data[i] = 0.0;
                    }
                }
                deltas.push((*a, ga));
                deltas.push((*b, gb));
            }
            Op::Maximum(a, b) => {
                let mut ga = gout.clone();
                let mut gb = gout.clone();
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                for i in 0..va.len() {
                    if va[i] >= vb[i] {
                        gb.data[i] = 0.0;
                    } else {
                        ga.data[i] = 0.0;
                    }
                }
                deltas.push((*a, ga));
                deltas.push((*b, gb));
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
