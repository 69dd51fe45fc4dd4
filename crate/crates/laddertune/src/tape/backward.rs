//! Reverse sweep. Gradients flow only into nodes with `requires_grad`;
//! frozen subgraphs are never touched and never allocate buffers.

use super::ops::{mm, mm_ta, Op, Reduction};
use super::{Elem, GradMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn accumulate<E: Elem>(grads: &mut [Option<Vec<E>>], target: usize, contrib: Vec<E>) {
    match &mut grads[target] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => grads[target] = Some(contrib),
    }
}

impl<E: Elem> Tape<E> {
    /// Reverse sweep from a scalar loss with seed 1. Refuses non-scalar
    /// roots and non-finite losses.
    pub fn backward(&self, loss: Var) -> Result<GradMap<E>> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let v = self.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {v}")));
        }
        self.backward_from(loss, &[E::one()])
    }

    /// Reverse sweep from an arbitrary root with an explicit cotangent seed.
    pub fn backward_from(&self, root: Var, seed: &[E]) -> Result<GradMap<E>> {
        if seed.len() != self.numel(root) {
            return Err(Error::Shape {
                op: "backward_from",
                detail: format!(
                    "seed has {} elements but root shape is {:?}",
                    seed.len(),
                    self.shape(root)
                ),
            });
        }
        let mut out = GradMap::default();
        if !self.requires_grad(root) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.id.0] = Some(seed.to_vec());

        for id in (0..=root.id.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let req = |v: super::NodeId| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(info) = &node.param {
                        if info.trainable {
                            let t = Tensor::new(node.shape.clone(), dy)
                                .expect("gradient matches node shape");
                            out.map.insert(info.name.clone(), t);
                        }
                    }
                }
                &Op::MatMul { a, b, trans_b, m, k, n } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if req(a) {
                        let da = if trans_b {
                            mm(&dy, bv, m, n, k, false)
                        } else {
                            mm(&dy, bv, m, n, k, true)
                        };
                        accumulate(&mut grads, a.0, da);
                    }
                    if req(b) {
                        let db = if trans_b {
                            mm_ta(&dy, av, m, n, k)
                        } else {
                            mm_ta(av, &dy, m, k, n)
                        };
                        accumulate(&mut grads, b.0, db);
                    }
                }
                &Op::Bmm { a, b, trans_b, batch, m, k, n } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let bstride = k * n;
                    if req(a) {
                        let mut da = Vec::with_capacity(batch * m * k);
                        for p in 0..batch {
                            let dyp = &dy[p * m * n..(p + 1) * m * n];
                            let bp = &bv[p * bstride..(p + 1) * bstride];
                            da.extend(if trans_b {
                                mm(dyp, bp, m, n, k, false)
                            } else {
                                mm(dyp, bp, m, n, k, true)
                            });
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if req(b) {
                        let mut db = Vec::with_capacity(batch * bstride);
                        for p in 0..batch {
                            let dyp = &dy[p * m * n..(p + 1) * m * n];
                            let ap = &av[p * m * k..(p + 1) * m * k];
                            db.extend(if trans_b {
                                mm_ta(dyp, ap, m, n, k)
                            } else {
                                mm_ta(ap, dyp, m, k, n)
                            });
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                }
                &Op::Add { a, b } => {
                    if req(a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                    if req(b) {
                        accumulate(&mut grads, b.0, dy);
                    }
                }
                &Op::AddBias { a, bias, rows, cols } => {
                    if req(bias) {
                        let mut db = vec![E::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += dy[r * cols + c];
                            }
                        }
                        accumulate(&mut grads, bias.0, db);
                    }
                    if req(a) {
                        accumulate(&mut grads, a.0, dy);
                    }
                }
                &Op::AddRows { a, rows, batch, seq, cols } => {
                    if req(rows) {
                        let mut dr = vec![E::zero(); seq * cols];
                        for b in 0..batch {
                            for i in 0..seq * cols {
                                dr[i] += dy[b * seq * cols + i];
                            }
                        }
                        accumulate(&mut grads, rows.0, dr);
                    }
                    if req(a) {
                        accumulate(&mut grads, a.0, dy);
                    }
                }
                &Op::BroadcastRows { x, batch } => {
                    if req(x) {
                        let len = self.nodes[x.0].value.len();
                        let mut dx = vec![E::zero(); len];
                        for b in 0..batch {
                            for i in 0..len {
                                dx[i] += dy[b * len + i];
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::Mul { a, b } => {
                    if req(a) {
                        let bv = &self.nodes[b.0].value;
                        let da: Vec<E> = dy.iter().zip(bv.iter()).map(|(&d, &v)| d * v).collect();
                        accumulate(&mut grads, a.0, da);
                    }
                    if req(b) {
                        let av = &self.nodes[a.0].value;
                        let db: Vec<E> = dy.iter().zip(av.iter()).map(|(&d, &v)| d * v).collect();
                        accumulate(&mut grads, b.0, db);
                    }
                }
                &Op::MulScalarT { scalar, x } => {
                    if req(scalar) {
                        let xv = &self.nodes[x.0].value;
                        let mut ds = E::zero();
                        for (&d, &v) in dy.iter().zip(xv.iter()) {
                            ds += d * v;
                        }
                        accumulate(&mut grads, scalar.0, vec![ds]);
                    }
                    if req(x) {
                        let s = self.nodes[scalar.0].value[0];
                        let dx: Vec<E> = dy.iter().map(|&d| s * d).collect();
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::OneMinus { x } => {
                    if req(x) {
                        let dx: Vec<E> = dy.iter().map(|&d| -d).collect();
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::Scale { x, factor } => {
                    if req(x) {
                        let f = E::from_f64(factor);
                        let dx: Vec<E> = dy.iter().map(|&d| f * d).collect();
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::Concat { a, b, axis } => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let (la, lb) = (sa[axis], sb[axis]);
                    let row = (la + lb) * inner;
                    if req(a) {
                        let mut da = Vec::with_capacity(outer * la * inner);
                        for o in 0..outer {
                            da.extend_from_slice(&dy[o * row..o * row + la * inner]);
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if req(b) {
                        let mut db = Vec::with_capacity(outer * lb * inner);
                        for o in 0..outer {
                            db.extend_from_slice(&dy[o * row + la * inner..(o + 1) * row]);
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                }
                &Op::Slice { x, axis, start, len } => {
                    if req(x) {
                        let sx = &self.nodes[x.0].shape;
                        let outer: usize = sx[..axis].iter().product();
                        let inner: usize = sx[axis + 1..].iter().product();
                        let width = sx[axis];
                        let mut dx = vec![E::zero(); self.nodes[x.0].value.len()];
                        for o in 0..outer {
                            let dst = (o * width + start) * inner;
                            let src = o * len * inner;
                            for i in 0..len * inner {
                                dx[dst + i] += dy[src + i];
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    if req(table) {
                        let dim = self.nodes[table.0].shape[1];
                        let mut dt = vec![E::zero(); self.nodes[table.0].value.len()];
                        for (i, &t) in ids.iter().enumerate() {
                            let t = t as usize;
                            for c in 0..dim {
                                dt[t * dim + c] += dy[i * dim + c];
                            }
                        }
                        accumulate(&mut grads, table.0, dt);
                    }
                }
                &Op::Softmax { x, rows, cols } => {
                    if req(x) {
                        let y = &node.value;
                        let mut dx = Vec::with_capacity(y.len());
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let dr = &dy[r * cols..(r + 1) * cols];
                            let mut dot = E::zero();
                            for (&yi, &di) in yr.iter().zip(dr.iter()) {
                                dot += yi * di;
                            }
                            for (&yi, &di) in yr.iter().zip(dr.iter()) {
                                dx.push(yi * (di - dot));
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::LayerNorm { x, gamma, beta, rows, cols } => {
                    if req(beta) {
                        let mut db = vec![E::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += dy[r * cols + c];
                            }
                        }
                        accumulate(&mut grads, beta.0, db);
                    }
                    if req(gamma) {
                        let xhat = &node.aux[0];
                        let mut dg = vec![E::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += dy[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                        accumulate(&mut grads, gamma.0, dg);
                    }
                    if req(x) {
                        let xhat = &node.aux[0];
                        let rstd = &node.aux[1];
                        let gv = &self.nodes[gamma.0].value;
                        let inv_cols = E::from_f64(1.0 / cols as f64);
                        let mut dx = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let mut m1 = E::zero();
                            let mut m2 = E::zero();
                            for c in 0..cols {
                                let g = dy[r * cols + c] * gv[c];
                                m1 += g;
                                m2 += g * xhat[r * cols + c];
                            }
                            m1 = m1 * inv_cols;
                            m2 = m2 * inv_cols;
                            for c in 0..cols {
                                let g = dy[r * cols + c] * gv[c];
                                dx.push(rstd[r] * (g - m1 - xhat[r * cols + c] * m2));
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::Relu { x } | &Op::Gelu { x } | &Op::Sigmoid { x } => {
                    if req(x) {
                        let deriv = &node.aux[0];
                        let dx: Vec<E> = dy.iter().zip(deriv.iter()).map(|(&d, &s)| d * s).collect();
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::CrossEntropy { logits, targets, rows, cols, reduction } => {
                    let logits = *logits;
                    if req(logits) {
                        let (rows, cols) = (*rows, *cols);
                        let scale = match reduction {
                            Reduction::Mean => dy[0] * E::from_f64(1.0 / rows as f64),
                            Reduction::Sum => dy[0],
                        };
                        let probs = &node.aux[0];
                        let mut dl = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let t = targets[r] as usize;
                            for c in 0..cols {
                                let ind = if c == t { E::one() } else { E::zero() };
                                dl.push(scale * (probs[r * cols + c] - ind));
                            }
                        }
                        accumulate(&mut grads, logits.0, dl);
                    }
                }
                &Op::Mse { pred, target } => {
                    let diff = &node.aux[0];
                    if req(pred) {
                        let dp: Vec<E> = diff.iter().map(|&d| dy[0] * d).collect();
                        accumulate(&mut grads, pred.0, dp);
                    }
                    if req(target) {
                        let dt: Vec<E> = diff.iter().map(|&d| -(dy[0] * d)).collect();
                        accumulate(&mut grads, target.0, dt);
                    }
                }
                &Op::Reshape { x } => {
                    if req(x) {
                        accumulate(&mut grads, x.0, dy);
                    }
                }
                &Op::SplitHeads { x, batch, seq, heads, head_dim } => {
                    if req(x) {
                        let model = heads * head_dim;
                        let mut dx = vec![E::zero(); dy.len()];
                        for b in 0..batch {
                            for s in 0..seq {
                                for h in 0..heads {
                                    let src = ((b * heads + h) * seq + s) * head_dim;
                                    let dst = (b * seq + s) * model + h * head_dim;
                                    for i in 0..head_dim {
                                        dx[dst + i] += dy[src + i];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::MergeHeads { x, batch, seq, heads, head_dim } => {
                    if req(x) {
                        let model = heads * head_dim;
                        let mut dx = vec![E::zero(); dy.len()];
                        for b in 0..batch {
                            for s in 0..seq {
                                for h in 0..heads {
                                    let src = (b * seq + s) * model + h * head_dim;
                                    let dst = ((b * heads + h) * seq + s) * head_dim;
                                    for i in 0..head_dim {
                                        dx[dst + i] += dy[src + i];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                &Op::CausalMask { x, .. } => {
                    if req(x) {
                        accumulate(&mut grads, x.0, dy);
                    }
                }
                &Op::SumAll { x } => {
                    if req(x) {
                        let len = self.nodes[x.0].value.len();
                        accumulate(&mut grads, x.0, vec![dy[0]; len]);
                    }
                }
            }
        }
        Ok(out)
    }
}
