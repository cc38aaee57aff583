//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its value plus whatever the adjoint rule
//! needs. Node ids are indices into the node list, so inputs always precede
//! outputs and the backward sweep is a plain reverse iteration.

use std::sync::atomic::{AtomicBool, Ordering};

use super::kernels::{self, matmul_dims, mm, mm_nt, mm_tn, rms_norm_raw, sigmoid, softmax_rows_in_place};
use super::Tensor;
use crate::error::{Error, Result};

static FAULT_INJECTION: AtomicBool = AtomicBool::new(false);

/// Negative-control hook for the gradient checker: when enabled, the SiLU
/// adjoint rule is deliberately wrong by one percent.
#[doc(hidden)]
pub fn set_fault_injection(on: bool) {
    FAULT_INJECTION.store(on, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    ScaleBy { a: NodeId, s: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulRow { a: NodeId, row: NodeId },
    RmsNorm { x: NodeId, scale: Option<NodeId>, inv_rms: Vec<f64> },
    Silu { a: NodeId },
    Reshape { a: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    Softmax { a: NodeId },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum { a: NodeId },
    WeightedSum { a: NodeId, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, id: NodeId, like: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k, n, shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale { a, c })
    }

    /// `a · s` for a one-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), vs.shape()));
        }
        let c = vs.data()[0];
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(t, Op::ScaleBy { a, s }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// `a ⊙ row`, broadcasting `row` (shape `[d]`) over the last axis of `a`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        let d = va.last_dim();
        if vr.shape() != [d] {
            return Err(Error::shape("mul_row", va.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = va.data().chunks(d).flat_map(|x| x.iter().zip(r).map(|(p, q)| p * q)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRow { a, row }))
    }

    /// RMS normalisation over the last axis, with an optional learnable scale.
    pub fn rms_norm(&mut self, x: NodeId, scale: Option<NodeId>, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if d == 0 {
            return Err(Error::shape("rms_norm", vx.shape(), &[]));
        }
        let s = match scale {
            Some(s) => {
                let vs = self.value(s);
                if vs.shape() != [d] {
                    return Err(Error::shape("rms_norm", vx.shape(), vs.shape()));
                }
                Some(vs.data())
            }
            None => None,
        };
        let (out, inv_rms) = rms_norm_raw(vx.data(), d, s, eps);
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, scale, inv_rms }))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|z| kernels::silu(*z)).collect())
            .expect("same shape");
        self.push(t, Op::Silu { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Rows of a `[rows, d]` table, producing `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("gather_rows", vt.shape(), &[2]));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather row",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Row-wise softmax; `-inf` entries act as masks.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = kernels::softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::Softmax { a }))
    }

    /// Causal multi-head scaled dot-product attention core.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]` with heads laid out contiguously
    /// along `d`. Returns the per-position context `[batch*seq, d]`, before
    /// the output projection.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(Error::shape("causal_attention", &shape, self.shape(other)));
            }
        }
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::shape("causal_attention", &shape, &[batch * seq, heads]));
        }
        let d = shape[1];
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for t in 0..seq {
                    let qt = &vq[(b * seq + t) * d + h * hd..][..hd];
                    let row = &mut p[t * seq..(t + 1) * seq];
                    for (s, slot) in row.iter_mut().enumerate() {
                        *slot = if s <= t {
                            let ks = &vk[(b * seq + s) * d + h * hd..][..hd];
                            qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_rows_in_place(row, seq)?;
                    let ot = &mut out[(b * seq + t) * d + h * hd..][..hd];
                    for s in 0..=t {
                        let w = row[s];
                        let vs = &vv[(b * seq + s) * d + h * hd..][..hd];
                        for (o, x) in ot.iter_mut().zip(vs) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean cross-entropy over the rows whose target is `Some`; rows with
    /// `None` contribute nothing (and receive exactly zero gradient).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let vl = self.value(logits);
        let v = vl.last_dim();
        if vl.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross entropy with no scored positions".into()));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: v,
                });
            }
            let row = vl.row(r);
            let lse = kernels::logsumexp(row);
            total += lse - row[t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// `Σ a ⊙ weights` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, a: NodeId, weights: &[f64]) -> Result<NodeId> {
        let va = self.value(a);
        if va.numel() != weights.len() {
            return Err(Error::shape("weighted_sum", va.shape(), &[weights.len()]));
        }
        let s = va.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        self.vjp(loss, Tensor::ones(self.shape(loss)))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back through every node that `output` depends on.
    pub fn vjp(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("vjp seed", seed.shape(), self.shape(output)));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.into_data());
        let fault = FAULT_INJECTION.load(Ordering::Relaxed);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    accumulate(&mut adj, *a, mm_nt(&g, vb, *m, *n, *k));
                    accumulate(&mut adj, *b, mm_tn(va, &g, *m, *k, *n));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.clone());
                }
                Op::Scale { a, c } => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::ScaleBy { a, s } => {
                    let c = self.value(*s).data()[0];
                    let va = self.value(*a).data();
                    let gs: f64 = g.iter().zip(va).map(|(x, y)| x * y).sum();
                    accumulate(&mut adj, *a, g.iter().map(|x| x * c).collect());
                    accumulate(&mut adj, *s, vec![gs]);
                }
                Op::Mul { a, b } => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    accumulate(&mut adj, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                    accumulate(&mut adj, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
                Op::MulRow { a, row } => {
                    let va = self.value(*a).data();
                    let vr = self.value(*row).data();
                    let d = vr.len();
                    let ga = g
                        .chunks(d)
                        .flat_map(|gr| gr.iter().zip(vr).map(|(x, y)| x * y))
                        .collect();
                    let mut gr = vec![0.0; d];
                    for (gc, ac) in g.chunks(d).zip(va.chunks(d)) {
                        for j in 0..d {
                            gr[j] += gc[j] * ac[j];
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *row, gr);
                }
                Op::RmsNorm { x, scale, inv_rms } => {
                    let vx = self.value(*x).data();
                    let d = self.value(*x).last_dim();
                    let s = scale.map(|s| self.value(s).data());
                    let mut gx = vec![0.0; vx.len()];
                    let mut gs = scale.map(|_| vec![0.0; d]);
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // gs_j = g_j * s_j (the adjoint of the unscaled normalised row)
                        let mut dot = 0.0;
                        for j in 0..d {
                            let gsj = gr[j] * s.map_or(1.0, |s| s[j]);
                            dot += gsj * xr[j];
                        }
                        let coef = ir * ir * ir * dot / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let gsj = gr[j] * s.map_or(1.0, |s| s[j]);
                            out[j] = ir * gsj - xr[j] * coef;
                        }
                        if let Some(gs) = gs.as_mut() {
                            for j in 0..d {
                                gs[j] += gr[j] * xr[j] * ir;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                    if let (Some(sid), Some(gs)) = (scale, gs) {
                        accumulate(&mut adj, *sid, gs);
                    }
                }
                Op::Silu { a } => {
                    let va = self.value(*a).data();
                    let bump = if fault { 1.01 } else { 1.0 };
                    let ga = g
                        .iter()
                        .zip(va)
                        .map(|(gi, z)| {
                            let sg = sigmoid(*z);
                            gi * sg * (1.0 + z * (1.0 - sg)) * bump
                        })
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Reshape { a } => accumulate(&mut adj, *a, g.clone()),
                Op::Gather { table, indices } => {
                    let vt = self.value(*table);
                    let d = vt.last_dim();
                    let mut gt = vec![0.0; vt.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut ga = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, &g);
                    accumulate(&mut adj, *q, gq);
                    accumulate(&mut adj, *k, gk);
                    accumulate(&mut adj, *v, gv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = self.value(*logits).last_dim();
                    let count = targets.iter().flatten().count() as f64;
                    let g0 = g[0] / count;
                    let mut gl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let out = &mut gl[r * v..(r + 1) * v];
                        for (o, p) in out.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o = g0 * p;
                        }
                        out[t] -= g0;
                    }
                    accumulate(&mut adj, *logits, gl);
                }
                Op::Sum { a } => {
                    let n = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::WeightedSum { a, weights } => {
                    accumulate(&mut adj, *a, weights.iter().map(|w| w * g[0]).collect());
                }
            }
            adj[idx] = Some(g);
        }

        let adjoints = adj
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("adjoint shape")))
            .collect();
        Ok(Gradients { adjoints })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.value(q).last_dim();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; vq.len()];
        let mut gk = vec![0.0; vk.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                for t in 0..seq {
                    let gt = &g[(b * seq + t) * d + h * hd..][..hd];
                    let row = &p[t * seq..(t + 1) * seq];
                    // dP[t, s] = g_t · v_s ; dV_s += P[t, s] g_t
                    for s in 0..=t {
                        let vs = &vv[(b * seq + s) * d + h * hd..][..hd];
                        dp[s] = gt.iter().zip(vs).map(|(x, y)| x * y).sum();
                        let gvs = &mut gv[(b * seq + s) * d + h * hd..][..hd];
                        for (o, x) in gvs.iter_mut().zip(gt) {
                            *o += row[s] * x;
                        }
                    }
                    let dot: f64 = (0..=t).map(|s| row[s] * dp[s]).sum();
                    let qt = &vq[(b * seq + t) * d + h * hd..][..hd];
                    for s in 0..=t {
                        let ds = row[s] * (dp[s] - dot) * scale;
                        let ks = &vk[(b * seq + s) * d + h * hd..][..hd];
                        let gqt = &mut gq[(b * seq + t) * d + h * hd..][..hd];
                        for (o, x) in gqt.iter_mut().zip(ks) {
                            *o += ds * x;
                        }
                        let gks = &mut gk[(b * seq + s) * d + h * hd..][..hd];
                        for (o, x) in gks.iter_mut().zip(qt) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}
