//! Tape of executed operations and its reverse sweep.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node vector is already a topological order and the
//! reverse sweep is a simple backwards iteration. Nodes that do not depend on
//! any trainable parameter carry `requires_grad = false` and are skipped during
//! the sweep; this is what makes frozen encoders cheap.

use std::collections::HashMap;

use super::kernels::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Additive attention mask value for disallowed positions.
pub const MASK_NEG: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Receives a node and a closure that adds into that node's gradient.
type GradSink<'a, F> = dyn FnMut(NodeId, &mut dyn FnMut(&mut [F])) + 'a;

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        heads: usize,
        probs: Vec<F>,
    },
    RelPosBias {
        table: NodeId,
        gate: NodeId,
        buckets: Vec<usize>,
        gates: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients, for evaluation and generation.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        id
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf node bound to a parameter. Repeated calls within one graph return
    /// the same node so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.params.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a `[D]` vector to every row of a `[.., D]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, d) = vx.rows_cols();
        if vb.rank() != 1 || vb.len() != d {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v = *v + b;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul: cannot multiply {:?} by {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut c = vec![F::zero(); m * n];
        matmul_acc(va.data(), vb.data(), &mut c, m, k, n);
        let t = Tensor::new(vec![m, n], c)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `x · W + b` for `x: [L×I]`, `W: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a matrix, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let c = F::lit(GELU_C);
        let k = F::lit(GELU_A);
        let half = F::lit(0.5);
        let data = va
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let t = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                va.shape()
            )));
        }
        let shape = va.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = va.data();
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = F::neg_infinity();
                for j in 0..len {
                    m = m.max(x[idx(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / s;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            t,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = vx.rows_cols();
        if vg.len() != d || vb.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Value(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = F::lit(eps);
        let inv_d = F::one() / F::lit(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V×D]` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be a matrix, got {:?}",
                vt.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup of zero ids".into()));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index(format!("embedding id {i} out of range for table of {v} rows")));
            }
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let d = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rank() != 2 || vp.shape()[1] != d {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), vp.shape()));
            }
            rows += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 || len == 0 || start + len > vx.shape()[0] {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let d = vx.shape()[1];
        let t = Tensor::new(vec![len, d], vx.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [Lq×D]`, `k, v: [Lk×D]`, heads split the feature axis evenly.
    /// `bias` is an optional differentiable `[H×Lq×Lk]` logit bias and `mask`
    /// an optional constant `[Lq×Lk]` additive mask (0 or [`MASK_NEG`]).
    /// A query row whose keys are all masked outputs zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        bias: Option<NodeId>,
        mask: Option<&Tensor<F>>,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rank() != 2 || vk.rank() != 2 || vv.shape() != vk.shape() || vq.shape()[1] != vk.shape()[1] {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        let (lq, d) = (vq.shape()[0], vq.shape()[1]);
        let lk = vk.shape()[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [heads, lq, lk] {
                return Err(shape_err("attention bias", self.value(b).shape(), &[heads, lq, lk]));
            }
        }
        if let Some(m) = mask {
            if m.shape() != [lq, lk] {
                return Err(shape_err("attention mask", m.shape(), &[lq, lk]));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let dead_cut = F::lit(MASK_NEG * 0.5);
        let dead: Vec<bool> = (0..lq)
            .map(|i| mask.is_some_and(|m| m.row(i).iter().all(|&x| x <= dead_cut)))
            .collect();

        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let bd = bias.map(|b| self.value(b).data());
        let mut probs = vec![F::zero(); heads * lq * lk];
        let mut out = vec![F::zero(); lq * d];
        let mut qh = vec![F::zero(); dh];
        let mut kh = vec![F::zero(); lk * dh];
        for h in 0..heads {
            for j in 0..lk {
                kh[j * dh..(j + 1) * dh].copy_from_slice(&kd[j * d + h * dh..j * d + (h + 1) * dh]);
            }
            for i in 0..lq {
                if dead[i] {
                    continue;
                }
                qh.copy_from_slice(&qd[i * d + h * dh..i * d + (h + 1) * dh]);
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut mx = F::neg_infinity();
                for j in 0..lk {
                    let mut s = dot(&qh, &kh[j * dh..(j + 1) * dh]) * scale;
                    if let Some(bd) = bd {
                        s = s + bd[(h * lq + i) * lk + j];
                    }
                    if let Some(m) = mask {
                        s = s + m.data()[i * lk + j];
                    }
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = F::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z = z + *pj;
                }
                for pj in p.iter_mut() {
                    *pj = *pj / z;
                }
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..lk {
                    let w = p[j];
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (ov, &x) in o.iter_mut().zip(vrow) {
                        *ov = *ov + w * x;
                    }
                }
            }
        }
        let t = Tensor::new(vec![lq, d], out)?;
        let mut ins = vec![q, k, v];
        ins.extend(bias);
        let rg = self.rg(&ins);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Gated bucketed relative position bias, `[H×Lq×Lk]`:
    /// `out[h,i,j] = sigmoid(gate[h]) * table[bucket(i,j), h]`.
    ///
    /// `table: [B×H]`, `gate: [H]` (logits), `buckets` row-major `[Lq×Lk]`.
    pub fn rel_pos_bias(
        &mut self,
        table: NodeId,
        gate: NodeId,
        buckets: &[usize],
        lq: usize,
        lk: usize,
    ) -> Result<NodeId> {
        let (vt, vg) = (self.value(table), self.value(gate));
        if vt.rank() != 2 || vg.len() != vt.shape()[1] || buckets.len() != lq * lk {
            return Err(Error::Shape(format!(
                "rel_pos_bias: table {:?}, gate {:?}, {} buckets for {lq}x{lk}",
                vt.shape(),
                vg.shape(),
                buckets.len()
            )));
        }
        let (nb, heads) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&b) = buckets.iter().find(|&&b| b >= nb) {
            return Err(Error::Index(format!("bucket {b} out of range for {nb} buckets")));
        }
        let gates: Vec<F> = vg
            .data()
            .iter()
            .map(|&g| F::one() / (F::one() + (-g).exp()))
            .collect();
        let mut out = vec![F::zero(); heads * lq * lk];
        for h in 0..heads {
            for (ij, &b) in buckets.iter().enumerate() {
                out[h * lq * lk + ij] = gates[h] * vt.data()[b * heads + h];
            }
        }
        let t = Tensor::new(vec![heads, lq, lk], out)?;
        let rg = self.rg(&[table, gate]);
        Ok(self.push(
            t,
            Op::RelPosBias {
                table,
                gate,
                buckets: buckets.to_vec(),
                gates,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `[L×V]` logits against `targets`, skipping
    /// positions equal to `ignore_id`. Zero counted positions give loss 0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore_id: usize) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} for {} targets",
                vl.shape(),
                targets.len()
            )));
        }
        let (l, v) = (vl.shape()[0], vl.shape()[1]);
        let mut tg = Vec::with_capacity(l);
        for &t in targets {
            if t == ignore_id {
                tg.push(None);
            } else if t >= v {
                return Err(Error::Index(format!("target id {t} out of range for {v} classes")));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        let mut probs = vec![F::zero(); l * v];
        let mut total = F::zero();
        for r in 0..l {
            let Some(t) = tg[r] else { continue };
            let row = &vl.data()[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * v + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            total = total + (z.ln() + mx - row[t]);
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::lit(count as f64)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradients of
    /// every reachable non-frozen parameter. Consumes the graph.
    pub fn backward(self, loss: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        self.backward_scaled(loss, store, F::one())
    }

    /// As [`Graph::backward`] with the seed gradient set to `scale`.
    pub fn backward_scaled(self, loss: NodeId, store: &mut ParamStore<F>, scale: F) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![scale]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>], store: &mut ParamStore<F>) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if !p.frozen {
                    for (gv, &x) in p.grad.data_mut().iter_mut().zip(g) {
                        *gv = *gv + x;
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    acc(id, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x * *c));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &v)| *s = *s + v));
                acc(*b, &mut |s| {
                    let d = s.len();
                    for row in g.chunks(d) {
                        for (sv, &v) in s.iter_mut().zip(row) {
                            *sv = *sv + v;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &mut |s| matmul_a_bt_acc(g, vb.data(), s, m, n, k));
                acc(*b, &mut |s| matmul_at_b_acc(va.data(), g, s, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] = s[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x));
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                let c = F::lit(GELU_C);
                let k = F::lit(GELU_A);
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let xi = x[i];
                        let t = (c * (xi + k * xi * xi * xi)).tanh();
                        let dy = half * (F::one() + t)
                            + half * xi * (F::one() - t * t) * c * (F::one() + three * k * xi * xi);
                        s[i] = s[i] + g[i] * dy;
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut dotv = F::zero();
                            for j in 0..len {
                                dotv = dotv + g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..len {
                                s[idx(j)] = s[idx(j)] + y[idx(j)] * (g[idx(j)] - dotv);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let rows = rstd.len();
                let inv_d = F::one() / F::lit(d as f64);
                acc(*x, &mut |s| {
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xh[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            s[r * d + j] = s[r * d + j] + rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] = s[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] = s[j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] = s[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |s| {
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(s, &x)| *s = *s + x)
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.shape()[1];
                let off = start * d;
                acc(*x, &mut |s| {
                    for (i, &v) in g.iter().enumerate() {
                        s[off + i] = s[off + i] + v;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + g[0]));
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *bias, *heads, probs, g, &mut acc),
            Op::RelPosBias {
                table,
                gate,
                buckets,
                gates,
            } => {
                let tv = nodes[table.0].value.data();
                let heads = gates.len();
                let lql = buckets.len();
                acc(*table, &mut |s| {
                    for h in 0..heads {
                        for (ij, &b) in buckets.iter().enumerate() {
                            s[b * heads + h] = s[b * heads + h] + gates[h] * g[h * lql + ij];
                        }
                    }
                });
                acc(*gate, &mut |s| {
                    for h in 0..heads {
                        let mut t = F::zero();
                        for (ij, &b) in buckets.iter().enumerate() {
                            t = t + g[h * lql + ij] * tv[b * heads + h];
                        }
                        s[h] = s[h] + t * gates[h] * (F::one() - gates[h]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = nodes[logits.0].value.shape()[1];
                let w = g[0] / F::lit(*count as f64);
                acc(*logits, &mut |s| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            s[r * v + j] = s[r * v + j] + w * probs[r * v + j];
                        }
                        s[r * v + t] = s[r * v + t] - w;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        heads: usize,
        probs: &[F],
        g: &[F],
        acc: &mut GradSink<F>,
    ) {
        let (vq, vk, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (lq, d) = (vq.shape()[0], vq.shape()[1]);
        let lk = vk.shape()[0];
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();

        // logits gradient per head: dS = P ∘ (dP − rowsum(dP ∘ P)), dP = dO · V_hᵀ
        let mut ds = vec![F::zero(); heads * lq * lk];
        let mut dv = vec![F::zero(); lk * d];
        for h in 0..heads {
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                let mut rs = F::zero();
                let dsr = &mut ds[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for j in 0..lk {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let vrow = &vv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    let dp = dot(go, vrow);
                    dsr[j] = dp;
                    rs = rs + dp * p[j];
                    let dvr = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                    for (x, &y) in dvr.iter_mut().zip(go) {
                        *x = *x + p[j] * y;
                    }
                }
                for j in 0..lk {
                    dsr[j] = p[j] * (dsr[j] - rs);
                }
            }
        }
        acc(v, &mut |s| s.iter_mut().zip(&dv).for_each(|(s, &x)| *s = *s + x));
        if let Some(b) = bias {
            acc(b, &mut |s| s.iter_mut().zip(&ds).for_each(|(s, &x)| *s = *s + x));
        }
        acc(q, &mut |s| {
            for h in 0..heads {
                for i in 0..lq {
                    let dsr = &ds[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                    let sq = &mut s[i * d + h * dh..i * d + (h + 1) * dh];
                    for (j, &dsj) in dsr.iter().enumerate() {
                        let w = dsj * scale;
                        if w == F::zero() {
                            continue;
                        }
                        let krow = &vk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                        for (x, &y) in sq.iter_mut().zip(krow) {
                            *x = *x + w * y;
                        }
                    }
                }
            }
        });
        acc(k, &mut |s| {
            for h in 0..heads {
                for i in 0..lq {
                    let dsr = &ds[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                    let qrow = &vq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                    for j in 0..lk {
                        let w = dsr[j] * scale;
                        if w == F::zero() {
                            continue;
                        }
                        let sk = &mut s[j * d + h * dh..j * d + (h + 1) * dh];
                        for (x, &y) in sk.iter_mut().zip(qrow) {
                            *x = *x + w * y;
                        }
                    }
                }
            }
        });
    }
}

/// `[L×L]` additive mask allowing position `i` to attend to `j <= i`.
pub fn causal_mask<F: Real>(len: usize) -> Tensor<F> {
    let mut m = Tensor::zeros(&[len, len]);
    let neg = F::lit(MASK_NEG);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = neg;
        }
    }
    m
}

/// `[Lq×Lk]` additive mask hiding invalid keys.
pub fn key_mask<F: Real>(lq: usize, valid: &[bool]) -> Tensor<F> {
    let lk = valid.len();
    let mut m = Tensor::zeros(&[lq, lk]);
    let neg = F::lit(MASK_NEG);
    for i in 0..lq {
        for (j, &ok) in valid.iter().enumerate() {
            if !ok {
                m.data_mut()[i * lk + j] = neg;
            }
        }
    }
    m
}
