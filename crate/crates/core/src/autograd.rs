//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an op can only consume nodes that exist. `backward`
//! walks the tape once in reverse, accumulating vector-Jacobian products into
//! per-node gradient buffers. Nodes that do not depend on any parameter leaf
//! are never visited.
//!
//! Broadcasting is limited to a leading batch dimension: the right operand of
//! `add`/`mul` may have a shape that is a suffix of the left operand's shape,
//! and the right operand of `matmul` may be a plain matrix shared by every
//! batch entry.

use rand::Rng;

use crate::exec::Exec;
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Default layer-norm epsilon. Small enough that normalized rows have unit
/// variance to ~1e-11 in `f64`.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds addressable through [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Scale(f64),
    Gelu,
    SoftmaxLastDim,
    /// Inputs: `x`, `gamma`, `beta`.
    LayerNorm,
    /// Input: the table; the op gathers these rows.
    EmbedGather(Vec<u32>),
    /// Concatenation along the last axis.
    Concat,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Add,
    Mul,
    Scale(f64),
    Gelu { tanh: Vec<f64> },
    Softmax,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    EmbedGather { ids: Vec<u32> },
    Concat { widths: Vec<usize> },
    Transpose,
    Reshape,
    SwapAxes12,
    Nll {
        targets: Vec<u32>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        per_row: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
    finite: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// Below this many multiply-adds packing costs more than it saves.
const SMALL_GEMM: usize = 1024;

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if !accumulate {
                row.fill(0.0);
            }
            for p in 0..k {
                let x = a[i * rsa + p * csa];
                if csb == 1 {
                    let br = &b[p * rsb..p * rsb + n];
                    row.iter_mut().zip(br).for_each(|(c, b)| *c += x * b);
                } else {
                    row.iter_mut()
                        .enumerate()
                        .for_each(|(j, c)| *c += x * b[p * rsb + j * csb]);
                }
            }
        }
        return;
    }
    // SAFETY: callers pass slices covering the strided extents of an m×k,
    // k×n and m×n matrix respectively; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let finite = t.is_finite();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            needs_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let finite = value.is_finite();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if inputs.iter().all(|v| self.nodes[v.0].finite) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Generic entry point over the core op kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::InvalidShape {
                    op,
                    shape: vec![inputs.len()],
                    reason: format!("expects {n} inputs"),
                })
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Scale(c) => {
                arity(1, "scale")?;
                self.scale(inputs[0], c)
            }
            OpKind::Gelu => {
                arity(1, "gelu")?;
                self.gelu(inputs[0])
            }
            OpKind::SoftmaxLastDim => {
                arity(1, "softmax_lastdim")?;
                self.softmax(inputs[0])
            }
            OpKind::LayerNorm => {
                arity(3, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], LAYER_NORM_EPS)
            }
            OpKind::EmbedGather(ids) => {
                arity(1, "embed_gather")?;
                self.embed_gather(inputs[0], &ids)
            }
            OpKind::Concat => self.concat(inputs),
        }
    }

    /// `[.., m, k] x [k, n]` or `[.., m, k] x [.., k, n]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if k != k2 || !(lead_b.is_empty() || lead_b == lead_a) {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if lead_b.is_empty() {
            gemm(batch * m, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
        } else {
            self.exec.for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    (k, 1),
                    &bv[i * k * n..],
                    (n, 1),
                    c,
                    false,
                )
            });
        }
        Ok(self.push(Op::Matmul, vec![a, b], Tensor::from_parts(out_shape, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    /// Elementwise product, same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check_finite(name, &[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(tb.shape(), ta.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let nb = tb.numel();
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(op, vec![a, b], Tensor::from_parts(shape, out)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let t = self.value(a).map(|x| x * c);
        Ok(self.push(Op::Scale(c), vec![a], t))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_finite("gelu", &[a])?;
        let x = self.value(a);
        let tanh: Vec<f64> = x
            .data()
            .iter()
            .map(|&x| (GELU_C * (x + GELU_A * x * x * x)).tanh())
            .collect();
        let out = x
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| 0.5 * x * (1.0 + t))
            .collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Op::Gelu { tanh }, vec![a], Tensor::from_parts(shape, out)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax_lastdim", &[a])?;
        let t = self.value(a);
        let w = last_dim(t.shape());
        let mut out = t.to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Softmax, vec![a], Tensor::from_parts(shape, out)))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let tx = self.value(x);
        let d = last_dim(tx.shape());
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Op::LayerNorm { xhat, inv_std },
            vec![x, gamma, beta],
            Tensor::from_parts(shape, out),
        ))
    }

    /// Rows `ids` of a `[V, H]` table, giving `[ids.len(), H]`.
    pub fn embed_gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.check_finite("embed_gather", &[table])?;
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embed_gather",
                shape: t.shape().to_vec(),
                reason: "expects a [vocab, hidden] table and at least one id".into(),
            });
        }
        let (v, h) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed_gather",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t.data()[id * h..(id + 1) * h]);
        }
        Ok(self.push(
            Op::EmbedGather { ids: ids.to_vec() },
            vec![table],
            Tensor::from_parts(vec![ids.len(), h], out),
        ))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_finite("concat", parts)?;
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        };
        let s0 = self.shape(first).to_vec();
        let lead = &s0[..s0.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Op::Concat { widths },
            parts.to_vec(),
            Tensor::from_parts(shape, out),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_finite("transpose", &[a])?;
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(t.data(), m, n);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Op::Transpose, vec![a], Tensor::from_parts(shape, out)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite("reshape", &[a])?;
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], t))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to move heads next to the batch axis.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        self.check_finite("swap_axes12", &[x])?;
        let t = self.value(x);
        let [a, b, c, d] = *t.shape() else {
            return Err(TensorError::InvalidShape {
                op: "swap_axes12",
                shape: t.shape().to_vec(),
                reason: "rank must be 4".into(),
            });
        };
        let out = swap12(t.data(), a, b, c, d);
        Ok(self.push(
            Op::SwapAxes12,
            vec![x],
            Tensor::from_parts(vec![a, c, b, d], out),
        ))
    }

    /// Weighted negative log-likelihood `sum_i w_i * -log softmax(logits_i)[t_i]`
    /// over rows of a `[N, V]` logit matrix. Rows with zero weight are skipped.
    pub fn nll(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        self.check_finite("nll", &[logits])?;
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() || weights.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "nll",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = s[1];
        let mut probs = vec![0.0; t.numel()];
        let mut per_row = vec![0.0; targets.len()];
        let mut total = 0.0;
        for (i, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let tgt = tgt as usize;
            if tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll",
                    index: tgt,
                    size: v,
                });
            }
            let row = &t.data()[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            per_row[i] = lse - row[tgt];
            total += w * per_row[i];
        }
        Ok(self.push(
            Op::Nll {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                per_row,
            },
            vec![logits],
            Tensor::scalar(total),
        ))
    }

    /// Mean token-level cross entropy over targets that are not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad_id: u32) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if t == pad_id { 0.0 } else { w })
            .collect();
        self.nll(logits, targets, &weights)
    }

    /// Per-row negative log-likelihoods recorded by an `nll` node.
    pub fn row_nll(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Nll { per_row, .. } => Some(per_row),
            _ => None,
        }
    }

    /// Inverted dropout: zeroes entries with probability `p`, rescales the rest.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        out.resize(self.nodes.len(), None);
        Ok(Gradients { grads: out, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                self.grad_slot(grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (ta, tb) = (self.value(a), self.value(b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let shared = sb.len() == 2;
                if wants(a) {
                    let da = acc!(a);
                    if shared {
                        gemm(batch * m, n, k, g, (n, 1), tb.data(), (1, n), da, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                (n, 1),
                                &tb.data()[i * k * n..],
                                (1, n),
                                &mut da[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if wants(b) {
                    let db = acc!(b);
                    if shared {
                        gemm(k, batch * m, n, ta.data(), (1, k), g, (n, 1), db, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[i * m * k..],
                                (1, k),
                                &g[i * m * n..],
                                (n, 1),
                                &mut db[i * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if wants(a) {
                    for (d, x) in acc!(a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(b) {
                    let db = acc!(b);
                    let nb = db.len();
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let nb = tb.len();
                if wants(a) {
                    for (i, d) in acc!(a).iter_mut().enumerate() {
                        *d += g[i] * tb[i % nb];
                    }
                }
                if wants(b) {
                    let db = acc!(b);
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x * ta[i];
                    }
                }
            }
            Op::Scale(c) => {
                let a = node.inputs[0];
                for (d, x) in acc!(a).iter_mut().zip(g) {
                    *d += c * x;
                }
            }
            Op::Gelu { tanh } => {
                let a = node.inputs[0];
                let xs = self.value(a).data();
                for (((d, &x), gx), &t) in acc!(a).iter_mut().zip(xs).zip(g).zip(tanh) {
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
            Op::Softmax => {
                let a = node.inputs[0];
                let y = node.value.data();
                let w = last_dim(node.value.shape());
                let da = acc!(a);
                for r in 0..y.len() / w {
                    let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..w {
                        da[r * w + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let d = last_dim(node.value.shape());
                let rows = xhat.len() / d;
                let gm = self.value(gamma).data();
                if wants(gamma) {
                    let dg = acc!(gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(beta) {
                    let db = acc!(beta);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if wants(x) {
                    let dx = acc!(x);
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for j in 0..d {
                            let dh = gs[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_xh += dh * xh[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_xh /= d as f64;
                        for j in 0..d {
                            let dh = gs[j] * gm[j];
                            dx[r * d + j] += inv_std[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
                        }
                    }
                }
            }
            Op::EmbedGather { ids } => {
                let t = node.inputs[0];
                let h = self.shape(t)[1];
                let dt = acc!(t);
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..h {
                        dt[id * h + j] += g[i * h + j];
                    }
                }
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in node.inputs.iter().zip(widths) {
                    if wants(p) {
                        let dp = acc!(p);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose => {
                let a = node.inputs[0];
                let s = node.value.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_last2(g, m, n);
                for (d, x) in acc!(a).iter_mut().zip(&back) {
                    *d += x;
                }
            }
            Op::Reshape => {
                let a = node.inputs[0];
                for (d, x) in acc!(a).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::SwapAxes12 => {
                let a = node.inputs[0];
                let [p, q, r, s] = *node.value.shape() else {
                    unreachable!()
                };
                let back = swap12(g, p, q, r, s);
                for (d, x) in acc!(a).iter_mut().zip(&back) {
                    *d += x;
                }
            }
            Op::Nll {
                targets,
                weights,
                probs,
                ..
            } => {
                let l = node.inputs[0];
                let v = self.shape(l)[1];
                let dl = acc!(l);
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    for j in 0..v {
                        dl[i * v + j] += s * probs[i * v + j];
                    }
                    dl[i * v + t as usize] -= s;
                }
            }
        }
    }
}

impl Graph {
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn transpose_last2(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..x.len() / (m * n) {
        let (src, dst) = (&x[b * m * n..], &mut out[b * m * n..]);
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn swap12(x: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.forward_op(OpKind::SoftmaxLastDim, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y).data(), a.data());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 8], 3.0, &mut rng));
        let gamma = g.constant(Tensor::ones(&[8]));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.forward_op(OpKind::LayerNorm, &[x, gamma, beta]).unwrap();
        for r in 0..4 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "var {var}");
        }
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            g.add(a, c),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, f64::NAN]));
        assert_eq!(
            g.scale(a, 2.0).unwrap_err(),
            TensorError::NonFinite { op: "scale" }
        );
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), Some(3.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::ones(&[2, 2]));
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(!grads.is_reachable(unused));
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 8]));
        let ce = g.cross_entropy(l, &[1, 2, 0], 0).unwrap();
        assert!((g.value(ce).item().unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(
            g.cross_entropy(l, &[0, 0, 0], 0).unwrap_err(),
            TensorError::DegenerateBatch
        );
    }

    #[test]
    fn cross_entropy_grows_with_wrong_margin() {
        let mut prev = 0.0;
        for margin in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut g = Graph::new();
            let l = g.constant(t(&[1, 3], &[margin, 0.0, 0.0]));
            let ce = g.cross_entropy(l, &[1], 99).unwrap();
            let v = g.value(ce).item().unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn swap_axes_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[1, 2, 3, 4], &data));
        let y = g.swap_axes12(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2, 4]);
        assert_eq!(g.value(y).data()[4..8], [12.0, 13.0, 14.0, 15.0]);
        let z = g.swap_axes12(y).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }
}
