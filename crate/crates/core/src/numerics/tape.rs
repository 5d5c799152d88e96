//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. The
//! tape is rebuilt for each forward pass and consumed by [`Tape::grad`],
//! which walks the recorded nodes in reverse order exactly once.
//!
//! Nodes are appended as they are created, so a node's parents always have
//! lower indices than the node itself. Shape errors inside an operation are
//! contract violations and panic with the offending shapes.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Silu(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    SmoothL1(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    LayerNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        input: usize,
        norms: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropyDiag {
        logits: usize,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | AddScalar(a)
            | Silu(a)
            | Tanh(a)
            | Exp(a)
            | Abs(a)
            | SmoothL1(a)
            | Sum(a)
            | Mean(a)
            | Reshape(a)
            | Transpose(a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            GatherRows { table, .. } => vec![*table],
            LayerNorm { input, .. } | NormalizeRows { input, .. } => vec![*input],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            CrossEntropyDiag { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Tensor {
        let i = self.check(v);
        self.nodes.borrow()[i].value.clone()
    }

    fn val(&self, v: Var) -> (usize, Tensor) {
        let i = self.check(v);
        (i, self.nodes.borrow()[i].value.clone())
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> (usize, Tensor, usize, Tensor) {
        let (ia, va) = self.val(a);
        let (ib, vb) = self.val(b);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        (ia, va, ib, vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (ia, va, ib, vb) = self.binary_same(a, b, "add");
        let out = va.zip_map(&vb, |x, y| x + y).expect("shapes checked");
        self.push(out, Op::Add(ia, ib))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (ia, va, ib, vb) = self.binary_same(a, b, "sub");
        let out = va.zip_map(&vb, |x, y| x - y).expect("shapes checked");
        self.push(out, Op::Sub(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (ia, va, ib, vb) = self.binary_same(a, b, "mul");
        let out = va.zip_map(&vb, |x, y| x * y).expect("shapes checked");
        self.push(out, Op::Mul(ia, ib))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.scale(k), Op::Scale(ia, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.map(|x| x + k), Op::AddScalar(ia))
    }

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ia, va) = self.val(a);
        let (ib, vb) = self.val(b);
        let (m, k) = dims2(&va);
        let (k2, n) = dims2(&vb);
        assert_eq!(
            k,
            k2,
            "matmul: inner dims {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(va.data(), false, vb.data(), false, m, k, n, &mut out, false);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib))
    }

    /// Adds a length-`n` vector to every row of `x: [m, n]`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let (ix, vx) = self.val(x);
        let (ib, vb) = self.val(b);
        let n = vx.cols();
        assert_eq!(vb.len(), n, "add_row: {:?} + {:?}", vx.shape(), vb.shape());
        let bias = vb.data();
        let out: Vec<f64> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        self.push(
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::AddRow(ix, ib),
        )
    }

    /// Multiplies every row of `x: [m, n]` elementwise by a length-`n` vector.
    pub fn mul_row(&self, x: Var, g: Var) -> Var {
        let (ix, vx) = self.val(x);
        let (ig, vg) = self.val(g);
        let n = vx.cols();
        assert_eq!(vg.len(), n, "mul_row: {:?} * {:?}", vx.shape(), vg.shape());
        let gain = vg.data();
        let out: Vec<f64> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gain[i % n])
            .collect();
        self.push(
            Tensor::from_parts(vx.shape().to_vec(), out),
            Op::MulRow(ix, ig),
        )
    }

    pub fn silu(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.map(silu), Op::Silu(ia))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.map(f64::tanh), Op::Tanh(ia))
    }

    pub fn exp(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.map(f64::exp), Op::Exp(ia))
    }

    pub fn abs(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(va.map(f64::abs), Op::Abs(ia))
    }

    /// Elementwise Huber penalty with unit transition point.
    pub fn smooth_l1(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        let out = va.map(|d| {
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        });
        self.push(out, Op::SmoothL1(ia))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(Tensor::scalar(va.sum()), Op::Sum(ia))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        self.push(Tensor::scalar(va.mean()), Op::Mean(ia))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let (ia, va) = self.val(a);
        let out = va
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", va.shape()));
        self.push(out, Op::Reshape(ia))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        let (m, n) = dims2(&va);
        let src = va.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(ia))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let vals: Vec<(usize, Tensor)> = parts.iter().map(|&p| self.val(p)).collect();
        let m = vals[0].1.rows();
        assert!(
            vals.iter().all(|(_, v)| v.rows() == m),
            "concat_cols: row counts differ"
        );
        let n: usize = vals.iter().map(|(_, v)| v.cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (_, v) in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let idx = vals.iter().map(|(i, _)| *i).collect();
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(idx))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let vals: Vec<(usize, Tensor)> = parts.iter().map(|&p| self.val(p)).collect();
        let n = vals[0].1.cols();
        assert!(
            vals.iter().all(|(_, v)| v.cols() == n),
            "concat_rows: column counts differ"
        );
        let mut out = Vec::new();
        for (_, v) in &vals {
            out.extend_from_slice(v.data());
        }
        let m = out.len() / n;
        let idx = vals.iter().map(|(i, _)| *i).collect();
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(idx))
    }

    /// Selects rows of `table` (embedding lookup); rows may repeat.
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Var {
        let (it, vt) = self.val(table);
        let n = vt.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < vt.rows(), "gather_rows: row {r} of {}", vt.rows());
            out.extend_from_slice(vt.row(r));
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::GatherRows {
                table: it,
                rows: rows.to_vec(),
            },
        )
    }

    /// Standardizes each row to zero mean and unit variance.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (ia, va) = self.val(a);
        let (m, n) = dims2(&va);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = va.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|x| (x - mu) * inv));
        }
        self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::LayerNorm { input: ia, inv_std },
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (ia, va) = self.val(a);
        let (m, n) = dims2(&va);
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = va.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        self.push(
            Tensor::from_parts(va.shape().to_vec(), out),
            Op::NormalizeRows { input: ia, norms },
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k` and `v` are `[batch * seq, d]` with rows grouped by sequence;
    /// heads split `d` into equal contiguous column blocks. Tokens attend only
    /// within their own sequence.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (iq, vq) = self.val(q);
        let (ik, vk) = self.val(k);
        let (iv, vv) = self.val(v);
        let d = vq.cols();
        assert_eq!(
            vq.rows(),
            batch * seq,
            "attention: rows {} != {batch}*{seq}",
            vq.rows()
        );
        assert!(
            vk.shape() == vq.shape() && vv.shape() == vq.shape(),
            "attention: q/k/v shapes"
        );
        assert_eq!(d % heads, 0, "attention: {d} columns over {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        *p = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    for p in prow.iter_mut() {
                        *p /= z;
                    }
                    let orow = &mut out[(b * seq + i) * d + col..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vq.shape().to_vec(), out),
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits[i, ·])[i]` for a square matrix.
    ///
    /// Entries with `mask[i * n + j] == true` (off-diagonal only) are
    /// excluded from row `i`'s partition function.
    pub fn cross_entropy_diag(&self, logits: Var, mask: &[bool]) -> Var {
        let (il, vl) = self.val(logits);
        let (m, n) = dims2(&vl);
        assert_eq!(
            m,
            n,
            "cross_entropy_diag: logits must be square, got {:?}",
            vl.shape()
        );
        assert_eq!(mask.len(), n * n, "cross_entropy_diag: mask size");
        let mut probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = vl.row(i);
            let valid = |j: usize| j == i || !mask[i * n + j];
            let max = (0..n)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..n).filter(|&j| valid(j)) {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                probs[i * n + j] /= z;
            }
            loss += -(row[i] - max) + z.ln();
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropyDiag {
                logits: il,
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`, returning one gradient per `wrt`.
    ///
    /// Variables recorded after `loss`, or that never influenced it, receive
    /// zero gradients.
    pub fn grad(self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, NumericsError> {
        let nodes = self.nodes.into_inner();
        if loss.tape != self.id || loss.idx >= nodes.len() {
            return Err(NumericsError::NotOnTape);
        }
        if nodes[loss.idx].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(
                nodes[loss.idx].value.shape().to_vec(),
            ));
        }
        for w in wrt {
            if w.tape != self.id || w.idx >= nodes.len() || !nodes[w.idx].requires_grad {
                return Err(NumericsError::NotOnTape);
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.idx + 1);
        grads.resize_with(loss.idx + 1, || None);
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let shape = nodes[w.idx].value.shape().to_vec();
                match grads.get_mut(w.idx).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn backward_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(nodes, grads, *b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(nodes, grads, *b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
            });
        }
        Op::Mul(a, b) => {
            let va = nodes[*a].value.data();
            let vb = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, k) => {
            accumulate(nodes, grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        Op::MatMul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (m, k) = dims2(va);
            let n = vb.cols();
            accumulate(nodes, grads, *a, |s| {
                gemm(g, false, vb.data(), true, m, n, k, s, true)
            });
            accumulate(nodes, grads, *b, |s| {
                gemm(va.data(), true, g, false, k, m, n, s, true)
            });
        }
        Op::AddRow(x, b) => {
            let n = out.cols();
            accumulate(nodes, grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(nodes, grads, *b, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % n] += gv;
                }
            });
        }
        Op::MulRow(x, gain) => {
            let n = out.cols();
            let vx = nodes[*x].value.data();
            let vg = nodes[*gain].value.data();
            accumulate(nodes, grads, *x, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i] += gv * vg[i % n];
                }
            });
            accumulate(nodes, grads, *gain, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % n] += gv * vx[i];
                }
            });
        }
        Op::Silu(a) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * silu_grad(va[i]);
                }
            });
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Abs(a) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * sign(va[i]);
                }
            });
        }
        Op::SmoothL1(a) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    let d = va[i];
                    s[i] += g[i] * if d.abs() < 1.0 { d } else { sign(d) };
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(nodes, grads, *a, |s| {
                s.iter_mut().for_each(|s| *s += g[0] / n)
            });
        }
        Op::Transpose(a) => {
            // out is [n, m]; input is [m, n]
            let (n, m) = dims2(out);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let m = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate(nodes, grads, p, |s| {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * w + c] += g[r * total + offset + c];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, |s| {
                    s.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(s, g)| *s += g)
                });
                offset += len;
            }
        }
        Op::GatherRows { table, rows } => {
            let n = out.cols();
            accumulate(nodes, grads, *table, |s| {
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        s[r * n + c] += g[k * n + c];
                    }
                }
            });
        }
        Op::LayerNorm { input, inv_std } => {
            let (m, n) = dims2(out);
            let y = out.data();
            accumulate(nodes, grads, *input, |s| {
                for r in 0..m {
                    let gy = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        s[r * n + c] += inv_std[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                    }
                }
            });
        }
        Op::NormalizeRows { input, norms } => {
            let (m, n) = dims2(out);
            let y = out.data();
            accumulate(nodes, grads, *input, |s| {
                for r in 0..m {
                    let gy = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let proj = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for c in 0..n {
                        s[r * n + c] += (gy[c] - yr[c] * proj) / norms[r];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *batch, *seq, *heads, probs),
        Op::CrossEntropyDiag {
            logits,
            mask,
            probs,
        } => {
            let n = out_len_sqrt(probs.len());
            let scale = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |s| {
                for i in 0..n {
                    for j in 0..n {
                        if j != i && mask[i * n + j] {
                            continue;
                        }
                        let target = if i == j { 1.0 } else { 0.0 };
                        s[i * n + j] += scale * (probs[i * n + j] - target);
                    }
                }
            });
        }
    }
}

fn out_len_sqrt(len: usize) -> usize {
    let n = (len as f64).sqrt().round() as usize;
    debug_assert_eq!(n * n, len);
    n
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (iq, ik, iv): (usize, usize, usize),
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[f64],
) {
    let d = nodes[iq].value.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qd = nodes[iq].value.data();
    let kd = nodes[ik].value.data();
    let vd = nodes[iv].value.data();
    let len = batch * seq * d;
    let mut dq = vec![0.0; len];
    let mut dk = vec![0.0; len];
    let mut dv = vec![0.0; len];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            let col = h * dh;
            for i in 0..seq {
                let gi = &g[(b * seq + i) * d + col..][..dh];
                let prow = &probs[pbase + i * seq..][..seq];
                // dV_j += p_ij * g_i ; dP_ij = g_i . v_j
                for j in 0..seq {
                    let row = (b * seq + j) * d + col;
                    let vj = &vd[row..row + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let p = prow[j];
                    for (o, x) in dv[row..row + dh].iter_mut().zip(gi) {
                        *o += p * x;
                    }
                }
                let inner: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qrow = (b * seq + i) * d + col;
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * seq + j) * d + col;
                    for c in 0..dh {
                        dq[qrow + c] += ds * kd[krow + c];
                        dk[krow + c] += ds * qd[qrow + c];
                    }
                }
            }
        }
    }
    let add = |s: &mut [f64], src: &[f64]| s.iter_mut().zip(src).for_each(|(s, x)| *s += x);
    accumulate(nodes, grads, iq, |s| add(s, &dq));
    accumulate(nodes, grads, ik, |s| add(s, &dk));
    accumulate(nodes, grads, iv, |s| add(s, &dv));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.scale(c, 2.0);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.grad(y, &[x]),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_inputs_are_rejected() {
        let other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, c);
        assert!(matches!(
            tape.grad(y, &[foreign]),
            Err(NumericsError::NotOnTape)
        ));

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, c);
        assert!(matches!(tape.grad(y, &[c]), Err(NumericsError::NotOnTape)));
    }

    #[test]
    fn reused_variable_accumulates() {
        // f = x*x + 3x at x = 2 -> 2x + 3 = 7
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let sq = tape.mul(x, x);
        let lin = tape.scale(x, 3.0);
        let f = tape.add(sq, lin);
        assert_eq!(tape.grad(f, &[x]).unwrap()[0].item(), 7.0);
    }

    #[test]
    fn masked_cross_entropy_of_single_entry_is_zero() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 1, vec![3.7]).unwrap());
        let ce = tape.cross_entropy_diag(l, &[false]);
        assert_eq!(tape.value(ce).item(), 0.0);
    }
}
