//! Forward ops. Each builder validates shapes, computes the output, and
//! records exactly the tensors its VJP will need given which inputs require
//! gradients. The records are the source of truth for retained memory.

use std::rc::Rc;

use ndarray::ArrayView2;

use super::{Elem, Node, NodeId, SaveReason, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
        rows: usize,
        cols: usize,
    },
    AddRows {
        a: NodeId,
        rows: NodeId,
        batch: usize,
        seq: usize,
        cols: usize,
    },
    BroadcastRows {
        x: NodeId,
        batch: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulScalarT {
        scalar: NodeId,
        x: NodeId,
    },
    OneMinus {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: NodeId,
        ids: Rc<Vec<u32>>,
    },
    Softmax {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rows: usize,
        cols: usize,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<u32>>,
        rows: usize,
        cols: usize,
        reduction: Reduction,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    CausalMask {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
}

pub(crate) fn mm<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<E> {
    let a = ArrayView2::from_shape((m, k), a).expect("lhs buffer matches (m, k)");
    let out = if trans_b {
        let b = ArrayView2::from_shape((n, k), b).expect("rhs buffer matches (n, k)");
        a.dot(&b.t())
    } else {
        let b = ArrayView2::from_shape((k, n), b).expect("rhs buffer matches (k, n)");
        a.dot(&b)
    };
    out.into_raw_vec_and_offset().0
}

/// `C = A^T B` for `A [k, m]`, `B [k, n]`; used by VJPs.
pub(crate) fn mm_ta<E: Elem>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let a = ArrayView2::from_shape((k, m), a).expect("lhs buffer matches (k, m)");
    let b = ArrayView2::from_shape((k, n), b).expect("rhs buffer matches (k, n)");
    a.t().dot(&b).into_raw_vec_and_offset().0
}

fn last_dim(shape: &[usize]) -> Option<usize> {
    shape.last().copied()
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl<E: Elem> Tape<E> {
    fn node_shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.id.0].shape.clone()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.id.0].requires_grad
    }

    fn val(&self, v: Var) -> Rc<Vec<E>> {
        Rc::clone(&self.nodes[v.id.0].value)
    }

    /// `C = A B` (or `A B^T`). `a` is `[m, k]`; `b` is `[k, n]`, or `[n, k]`
    /// when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("expected 2-d operands, got {sa:?} and {sb:?}"),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if trans_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims differ: {sa:?} vs {sb:?} (trans_b={trans_b})"),
            });
        }
        let out = mm(&self.val(a), &self.val(b), m, k, n, trans_b);
        let requires = self.req(a) || self.req(b);
        let mut saved = Vec::new();
        if requires {
            if self.req(b) {
                self.save_value(&mut saved, a.id, SaveReason::InputActivation);
            }
            if self.req(a) {
                self.save_value(&mut saved, b.id, SaveReason::InputActivation);
            }
        }
        Ok(self.push(
            Op::MatMul { a: a.id, b: b.id, trans_b, m, k, n },
            out,
            vec![m, n],
            requires,
            Vec::new(),
            saved,
        ))
    }

    /// Batched matmul over the leading dim: `a [p, m, k]`, `b [p, k, n]`
    /// (or `[p, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "bmm",
                detail: format!("expected matching 3-d operands, got {sa:?} and {sb:?}"),
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (n, kb) = if trans_b { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
        if k != kb {
            return Err(Error::Shape {
                op: "bmm",
                detail: format!("inner dims differ: {sa:?} vs {sb:?} (trans_b={trans_b})"),
            });
        }
        let av = self.val(a);
        let bv = self.val(b);
        let bstride = if trans_b { n * k } else { k * n };
        let mut out = Vec::with_capacity(batch * m * n);
        for p in 0..batch {
            out.extend(mm(
                &av[p * m * k..(p + 1) * m * k],
                &bv[p * bstride..(p + 1) * bstride],
                m,
                k,
                n,
                trans_b,
            ));
        }
        let requires = self.req(a) || self.req(b);
        let mut saved = Vec::new();
        if requires {
            if self.req(b) {
                self.save_value(&mut saved, a.id, SaveReason::InputActivation);
            }
            if self.req(a) {
                self.save_value(&mut saved, b.id, SaveReason::InputActivation);
            }
        }
        Ok(self.push(
            Op::Bmm { a: a.id, b: b.id, trans_b, batch, m, k, n },
            out,
            vec![batch, m, n],
            requires,
            Vec::new(),
            saved,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                detail: format!("operand shapes differ: {sa:?} vs {sb:?}"),
            });
        }
        let av = self.val(a);
        let bv = self.val(b);
        let out: Vec<E> = av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Add { a: a.id, b: b.id }, out, sa, requires, Vec::new(), Vec::new()))
    }

    /// `[.., cols] + [cols]`, the linear-layer bias.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(bias);
        let cols = match last_dim(&sa) {
            Some(c) => c,
            None => {
                return Err(Error::Shape {
                    op: "add_bias",
                    detail: "lhs is 0-d".to_string(),
                })
            }
        };
        if sb != vec![cols] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias shape {sb:?} does not match trailing dim of {sa:?}"),
            });
        }
        let rows = rows_of(&sa);
        let av = self.val(a);
        let bv = self.val(bias);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            for c in 0..cols {
                out.push(av[r * cols + c] + bv[c]);
            }
        }
        let requires = self.req(a) || self.req(bias);
        Ok(self.push(
            Op::AddBias { a: a.id, bias: bias.id, rows, cols },
            out,
            sa,
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// `[batch, seq, cols] + [seq, cols]`, broadcast over the batch dim;
    /// used for learned positional embeddings.
    pub fn add_rows(&mut self, a: Var, rows: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sr = self.node_shape(rows);
        if sa.len() != 3 || sr.len() != 2 || sa[1] != sr[0] || sa[2] != sr[1] {
            return Err(Error::Shape {
                op: "add_rows",
                detail: format!("cannot broadcast {sr:?} over {sa:?}"),
            });
        }
        let (batch, seq, cols) = (sa[0], sa[1], sa[2]);
        let av = self.val(a);
        let rv = self.val(rows);
        let mut out = Vec::with_capacity(av.len());
        for b in 0..batch {
            for i in 0..seq * cols {
                out.push(av[b * seq * cols + i] + rv[i]);
            }
        }
        let requires = self.req(a) || self.req(rows);
        Ok(self.push(
            Op::AddRows { a: a.id, rows: rows.id, batch, seq, cols },
            out,
            sa,
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// `[seq, cols]` replicated to `[batch, seq, cols]`; used to hand a
    /// prompt block to every sequence in a batch.
    pub fn broadcast_rows(&mut self, x: Var, batch: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        if sx.len() != 2 || batch == 0 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                detail: format!("expected 2-d input and batch > 0, got {sx:?} and batch {batch}"),
            });
        }
        let xv = self.val(x);
        let mut out = Vec::with_capacity(batch * xv.len());
        for _ in 0..batch {
            out.extend_from_slice(&xv);
        }
        let requires = self.req(x);
        Ok(self.push(
            Op::BroadcastRows { x: x.id, batch },
            out,
            vec![batch, sx[0], sx[1]],
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("operand shapes differ: {sa:?} vs {sb:?}"),
            });
        }
        let av = self.val(a);
        let bv = self.val(b);
        let out: Vec<E> = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect();
        let requires = self.req(a) || self.req(b);
        let mut saved = Vec::new();
        if requires {
            if self.req(b) {
                self.save_value(&mut saved, a.id, SaveReason::InputActivation);
            }
            if self.req(a) {
                self.save_value(&mut saved, b.id, SaveReason::InputActivation);
            }
        }
        Ok(self.push(Op::Mul { a: a.id, b: b.id }, out, sa, requires, Vec::new(), saved))
    }

    /// Multiply a tensor by a one-element tensor (a learned gate).
    pub fn mul_scalar_t(&mut self, scalar: Var, x: Var) -> Result<Var> {
        let ss = self.node_shape(scalar);
        if self.numel(scalar) != 1 {
            return Err(Error::Shape {
                op: "mul_scalar_t",
                detail: format!("scalar operand has shape {ss:?}"),
            });
        }
        let s = self.val(scalar)[0];
        let xv = self.val(x);
        let out: Vec<E> = xv.iter().map(|&v| s * v).collect();
        let shape = self.node_shape(x);
        let requires = self.req(scalar) || self.req(x);
        let mut saved = Vec::new();
        if requires {
            if self.req(scalar) {
                self.save_value(&mut saved, x.id, SaveReason::InputActivation);
            }
            if self.req(x) {
                self.save_value(&mut saved, scalar.id, SaveReason::InputActivation);
            }
        }
        Ok(self.push(
            Op::MulScalarT { scalar: scalar.id, x: x.id },
            out,
            shape,
            requires,
            Vec::new(),
            saved,
        ))
    }

    /// `1 - x` elementwise; the complement arm of a gate.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let out: Vec<E> = xv.iter().map(|&v| E::one() - v).collect();
        let shape = self.node_shape(x);
        let requires = self.req(x);
        Ok(self.push(Op::OneMinus { x: x.id }, out, shape, requires, Vec::new(), Vec::new()))
    }

    /// Multiply by a compile-time constant (no saved tensors).
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = E::from_f64(factor);
        let xv = self.val(x);
        let out: Vec<E> = xv.iter().map(|&v| f * v).collect();
        let shape = self.node_shape(x);
        let requires = self.req(x);
        Ok(self.push(Op::Scale { x: x.id, factor }, out, shape, requires, Vec::new(), Vec::new()))
    }

    /// Concatenate two tensors along `axis`; all other dims must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        let rank_ok = sa.len() == sb.len() && axis < sa.len();
        let dims_ok = rank_ok
            && sa
                .iter()
                .zip(sb.iter())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !dims_ok {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("cannot concat {sa:?} and {sb:?} along axis {axis}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let av = self.val(a);
        let bv = self.val(b);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bv[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Op::Concat { a: a.id, b: b.id, axis }, out, shape, requires, Vec::new(), Vec::new()))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("range {start}..{} out of bounds for {sx:?} axis {axis}", start + len),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let width = sx[axis];
        let xv = self.val(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * width + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx.clone();
        shape[axis] = len;
        let requires = self.req(x);
        Ok(self.push(Op::Slice { x: x.id, axis, start, len }, out, shape, requires, Vec::new(), Vec::new()))
    }

    /// Gather rows of `table` (`[vocab, dim]`) by token id; output shape is
    /// `prefix + [dim]` where `prefix` multiplies out to `ids.len()`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], prefix: &[usize]) -> Result<Var> {
        let st = self.node_shape(table);
        if st.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("table must be 2-d, got {st:?}"),
            });
        }
        let count: usize = prefix.iter().product();
        if count != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("prefix {prefix:?} implies {count} ids but {} given", ids.len()),
            });
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let tv = self.val(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &t in ids {
            let t = t as usize;
            out.extend_from_slice(&tv[t * dim..(t + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        let requires = self.req(table);
        Ok(self.push(
            Op::Embedding { table: table.id, ids: Rc::new(ids.to_vec()) },
            out,
            shape,
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// Row-wise softmax over the trailing dim. The output doubles as the
    /// cached derivative for the backward pass and is counted as such.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.node_shape(x);
        let cols = match last_dim(&sx) {
            Some(c) if c > 0 => c,
            _ => {
                return Err(Error::Shape {
                    op: "softmax",
                    detail: format!("trailing dim must be positive, got {sx:?}"),
                })
            }
        };
        let rows = rows_of(&sx);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            let base = out.len();
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for v in &mut out[base..] {
                *v = *v / sum;
            }
        }
        let requires = self.req(x);
        let node = self.push(
            Op::Softmax { x: x.id, rows, cols },
            out,
            sx,
            requires,
            Vec::new(),
            Vec::new(),
        );
        if requires {
            let mut saved = Vec::new();
            self.save_value(&mut saved, node.id, SaveReason::Derivative);
            self.nodes[node.id.0].saved = saved;
        }
        Ok(node)
    }

    /// Layer norm over the trailing dim with learned `gamma` and `beta`.
    /// Keeps the normalized input and the reciprocal std for backward.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.node_shape(x);
        let cols = match last_dim(&sx) {
            Some(c) if c > 0 => c,
            _ => {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("trailing dim must be positive, got {sx:?}"),
                })
            }
        };
        if self.node_shape(gamma) != vec![cols] || self.node_shape(beta) != vec![cols] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} do not match trailing dim of {sx:?}",
                    self.node_shape(gamma),
                    self.node_shape(beta)
                ),
            });
        }
        let rows = rows_of(&sx);
        let xv = self.val(x);
        let gv = self.val(gamma);
        let bv = self.val(beta);
        let eps = E::from_f64(eps);
        let inv_cols = E::from_f64(1.0 / cols as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_cols;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_cols;
            let rs = (var + eps).sqrt().recip();
            rstd.push(rs);
            for (c, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(gv[c] * xh + bv[c]);
            }
        }
        let x_req = self.req(x);
        let g_req = self.req(gamma);
        let requires = x_req || g_req || self.req(beta);
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if x_req || g_req {
            self.save_aux(&mut saved, xhat.len(), SaveReason::InputActivation);
            aux.push(xhat);
        }
        if x_req {
            self.save_aux(&mut saved, rstd.len(), SaveReason::Derivative);
            aux.push(rstd);
        }
        Ok(self.push(
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, rows, cols },
            out,
            sx,
            requires,
            aux,
            saved,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut mask = Vec::new();
        let requires = self.req(x);
        if requires {
            mask.reserve(xv.len());
        }
        for &v in xv.iter() {
            let on = v > E::zero();
            out.push(if on { v } else { E::zero() });
            if requires {
                mask.push(if on { E::one() } else { E::zero() });
            }
        }
        let shape = self.node_shape(x);
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if requires {
            self.save_aux(&mut saved, mask.len(), SaveReason::Derivative);
            aux.push(mask);
        }
        Ok(self.push(Op::Relu { x: x.id }, out, shape, requires, aux, saved))
    }

    /// Gaussian error linear unit (tanh form), derivative materialized.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
        const A: f64 = 0.044_715;
        let c = E::from_f64(C);
        let a = E::from_f64(A);
        let half = E::from_f64(0.5);
        let three_a = E::from_f64(3.0 * A);
        let xv = self.val(x);
        let requires = self.req(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut deriv = Vec::new();
        if requires {
            deriv.reserve(xv.len());
        }
        for &v in xv.iter() {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            out.push(half * v * (E::one() + t));
            if requires {
                let sech2 = E::one() - t * t;
                let du = c * (E::one() + three_a * v * v);
                deriv.push(half * (E::one() + t) + half * v * sech2 * du);
            }
        }
        let shape = self.node_shape(x);
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if requires {
            self.save_aux(&mut saved, deriv.len(), SaveReason::Derivative);
            aux.push(deriv);
        }
        Ok(self.push(Op::Gelu { x: x.id }, out, shape, requires, aux, saved))
    }

    /// Logistic sigmoid, derivative `y (1 - y)` materialized.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let requires = self.req(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut deriv = Vec::new();
        if requires {
            deriv.reserve(xv.len());
        }
        for &v in xv.iter() {
            let y = if v >= E::zero() {
                (E::one() + (-v).exp()).recip()
            } else {
                let e = v.exp();
                e / (E::one() + e)
            };
            out.push(y);
            if requires {
                deriv.push(y * (E::one() - y));
            }
        }
        let shape = self.node_shape(x);
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if requires {
            self.save_aux(&mut saved, deriv.len(), SaveReason::Derivative);
            aux.push(deriv);
        }
        Ok(self.push(Op::Sigmoid { x: x.id }, out, shape, requires, aux, saved))
    }

    /// Token cross-entropy from raw logits (`[.., classes]`), one target per
    /// row. The softmax probabilities are materialized for backward.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], reduction: Reduction) -> Result<Var> {
        let sl = self.node_shape(logits);
        let cols = match last_dim(&sl) {
            Some(c) if c > 1 => c,
            _ => {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    detail: format!("need at least two classes, got {sl:?}"),
                })
            }
        };
        let rows = rows_of(&sl);
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{rows} logit rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
            return Err(Error::Input(format!("target {bad} out of range for {cols} classes")));
        }
        let xv = self.val(logits);
        let requires = self.req(logits);
        let mut probs = Vec::new();
        if requires {
            probs.reserve(xv.len());
        }
        let mut loss = E::zero();
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            loss += lse - row[targets[r] as usize];
            if requires {
                for &v in row {
                    probs.push((v - lse).exp());
                }
            }
        }
        if reduction == Reduction::Mean {
            loss = loss * E::from_f64(1.0 / rows as f64);
        }
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if requires {
            self.save_aux(&mut saved, probs.len(), SaveReason::Derivative);
            aux.push(probs);
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.id,
                targets: Rc::new(targets.to_vec()),
                rows,
                cols,
                reduction,
            },
            vec![loss],
            vec![1],
            requires,
            aux,
            saved,
        ))
    }

    /// Mean squared error over all elements; the scaled residual is the
    /// cached derivative.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let sp = self.node_shape(pred);
        let st = self.node_shape(target);
        if sp != st {
            return Err(Error::Shape {
                op: "mse",
                detail: format!("operand shapes differ: {sp:?} vs {st:?}"),
            });
        }
        let pv = self.val(pred);
        let tv = self.val(target);
        let n = pv.len();
        let inv_n = E::from_f64(1.0 / n as f64);
        let two = E::from_f64(2.0);
        let requires = self.req(pred) || self.req(target);
        let mut loss = E::zero();
        let mut diff = Vec::new();
        if requires {
            diff.reserve(n);
        }
        for (&p, &t) in pv.iter().zip(tv.iter()) {
            let d = p - t;
            loss += d * d;
            if requires {
                diff.push(two * d * inv_n);
            }
        }
        loss = loss * inv_n;
        let mut aux = Vec::new();
        let mut saved = Vec::new();
        if requires {
            self.save_aux(&mut saved, diff.len(), SaveReason::Derivative);
            aux.push(diff);
        }
        Ok(self.push(
            Op::Mse { pred: pred.id, target: target.id },
            vec![loss],
            vec![1],
            requires,
            aux,
            saved,
        ))
    }

    /// A pure view: shares the source buffer and keeps the source's owner,
    /// so retained-byte accounting sees the same allocation either way.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.node_shape(x)),
            });
        }
        let src = &self.nodes[x.id.0];
        let node = Node {
            op: Op::Reshape { x: x.id },
            value: Rc::clone(&src.value),
            shape: shape.to_vec(),
            requires_grad: src.requires_grad,
            owner: src.owner,
            param: None,
            aux: Vec::new(),
            saved: Vec::new(),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        Ok(Var { id })
    }

    /// `[batch, seq, heads * head_dim]` to `[batch * heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        if sx.len() != 3 || heads == 0 || sx[2] % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                detail: format!("cannot split {sx:?} into {heads} heads"),
            });
        }
        let (batch, seq, model) = (sx[0], sx[1], sx[2]);
        let head_dim = model / heads;
        let xv = self.val(x);
        let mut out = vec![E::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * model + h * head_dim;
                    let dst = ((b * heads + h) * seq + s) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(
            Op::SplitHeads { x: x.id, batch, seq, heads, head_dim },
            out,
            vec![batch * heads, seq, head_dim],
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        if sx.len() != 3 || heads == 0 || sx[0] % heads != 0 {
            return Err(Error::Shape {
                op: "merge_heads",
                detail: format!("cannot merge {sx:?} from {heads} heads"),
            });
        }
        let (batch, seq, head_dim) = (sx[0] / heads, sx[1], sx[2]);
        let model = heads * head_dim;
        let xv = self.val(x);
        let mut out = vec![E::zero(); xv.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + s) * head_dim;
                    let dst = (b * seq + s) * model + h * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(
            Op::MergeHeads { x: x.id, batch, seq, heads, head_dim },
            out,
            vec![batch, seq, model],
            requires,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// Add a large negative constant above the diagonal of each trailing
    /// `[seq, seq]` block, so softmax zeroes attention to future positions.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let sx = self.node_shape(x);
        let n = sx.len();
        if n < 2 || sx[n - 1] != sx[n - 2] {
            return Err(Error::Shape {
                op: "causal_mask",
                detail: format!("expected trailing square dims, got {sx:?}"),
            });
        }
        let seq = sx[n - 1];
        let blocks: usize = sx[..n - 2].iter().product();
        let neg = E::from_f64(-1.0e30);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(xv.len());
        for blk in 0..blocks {
            for i in 0..seq {
                for j in 0..seq {
                    let v = xv[(blk * seq + i) * seq + j];
                    out.push(if j > i { v + neg } else { v });
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(Op::CausalMask { x: x.id }, out, sx, requires, Vec::new(), Vec::new()))
    }

    /// Sum of every element, yielding a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let mut acc = E::zero();
        for &v in xv.iter() {
            acc += v;
        }
        let requires = self.req(x);
        Ok(self.push(Op::SumAll { x: x.id }, vec![acc], vec![1], requires, Vec::new(), Vec::new()))
    }
}
