//! A small reverse-mode differentiation tape over row-major matrices.
//!
//! Every value is an `Array2<f64>`. Batched tensors are stacked along rows:
//! sample `b` of a batch with `t` rows per sample owns rows `b*t..(b+1)*t`.
//! The op set is deliberately narrow, covering only what the backbone and the
//! part head need, and several ops are fused (attention, token assembly, part
//! pooling) so their backward passes stay cheap.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Array1<f64>,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    AssembleTokens {
        patches: Var,
        pos: Var,
        cls: Var,
        reg: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        stride: usize,
        offset: usize,
        count: usize,
    },
    NegSqDist(Var, Var),
    Softmax {
        x: Var,
        inv_tau: f64,
    },
    PartPool {
        attn: Var,
        feats: Var,
        batch: usize,
    },
    Standardize {
        x: Var,
        block_rows: usize,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    BlockAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        mask: Array2<f64>,
    },
    MeanRows {
        x: Var,
        block_rows: usize,
        take: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter (`requires_grad = true`) or a constant input.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `x · w + b` with `w` of shape `in×out` and `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with a learned `1×n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut rstd = Array1::zeros(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            Zip::from(xhat.row_mut(r))
                .and(row)
                .for_each(|h, &v| *h = (v - mean) * inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head softmax self-attention over a packed `q|k|v` matrix of
    /// shape `(batch·seq) × 3d`, returning `(batch·seq) × d`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (rows, three_d) = qv.dim();
        let d = three_d / 3;
        let dh = d / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rs = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let q = qv.slice(s![rs.clone(), h * dh..(h + 1) * dh]);
                let k = qv.slice(s![rs.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qv.slice(s![rs.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                p *= scale;
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![rs.clone(), h * dh..(h + 1) * dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            &[qkv],
        )
    }

    /// Builds the token sequence `[cls, reg.., patch + pos ..]` for every sample.
    ///
    /// `patches` is `(batch·n)×d`, `pos` is `n×d`, `cls` is `1×d`, `reg` is `r×d`.
    pub fn assemble_tokens(
        &mut self,
        patches: Var,
        pos: Var,
        cls: Var,
        reg: Var,
        batch: usize,
    ) -> Var {
        let pv = self.value(patches);
        let posv = self.value(pos);
        let clsv = self.value(cls);
        let regv = self.value(reg);
        let n = posv.nrows();
        let r = regv.nrows();
        let d = posv.ncols();
        let seq = 1 + r + n;
        let mut out = Array2::zeros((batch * seq, d));
        for b in 0..batch {
            let base = b * seq;
            out.slice_mut(s![base..base + 1, ..]).assign(clsv);
            out.slice_mut(s![base + 1..base + 1 + r, ..]).assign(regv);
            let mut body = out.slice_mut(s![base + 1 + r..base + seq, ..]);
            body.assign(&pv.slice(s![b * n..(b + 1) * n, ..]));
            body += posv;
        }
        self.push(
            out,
            Op::AssembleTokens {
                patches,
                pos,
                cls,
                reg,
                batch,
            },
            &[patches, pos, cls, reg],
        )
    }

    /// Keeps rows `offset..offset+count` of every `stride`-row block.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize, count: usize) -> Var {
        let xv = self.value(x);
        let batch = xv.nrows() / stride;
        let mut out = Array2::zeros((batch * count, xv.ncols()));
        for b in 0..batch {
            out.slice_mut(s![b * count..(b + 1) * count, ..])
                .assign(&xv.slice(s![b * stride + offset..b * stride + offset + count, ..]));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                stride,
                offset,
                count,
            },
            &[x],
        )
    }

    /// `out[r, k] = -‖z_r − p_k‖²`
    pub fn neg_sq_dist(&mut self, z: Var, p: Var) -> Var {
        let out = neg_sq_dist(self.value(z).view(), self.value(p).view());
        self.push(out, Op::NegSqDist(z, p), &[z, p])
    }

    /// Row softmax of `(x + noise) / tau`. The noise is a constant.
    pub fn softmax(&mut self, x: Var, noise: Option<&Array2<f64>>, tau: f64) -> Var {
        let inv_tau = 1.0 / tau;
        let mut out = match noise {
            Some(n) => self.value(x) + n,
            None => self.value(x).clone(),
        };
        out *= inv_tau;
        softmax_rows_inplace(&mut out);
        self.push(out, Op::Softmax { x, inv_tau }, &[x])
    }

    /// Per-sample `Aᵀ Z / n` with `A` of shape `(batch·n)×c` and `Z` of shape
    /// `(batch·n)×d`, producing `(batch·c)×d`.
    pub fn part_pool(&mut self, attn: Var, feats: Var, batch: usize) -> Var {
        let out = part_pool(self.value(attn).view(), self.value(feats).view(), batch);
        self.push(out, Op::PartPool { attn, feats, batch }, &[attn, feats])
    }

    /// Standardizes each `block_rows`-row block jointly over all its entries.
    pub fn standardize_blocks(&mut self, x: Var, block_rows: usize, eps: f64) -> Var {
        let (xhat, rstd) = standardize_blocks(self.value(x).view(), block_rows, eps);
        let out = xhat.clone();
        self.push(
            out,
            Op::Standardize {
                x,
                block_rows,
                xhat,
                rstd,
            },
            &[x],
        )
    }

    /// Elementwise `x ⊙ w + b` where `w`, `b` are tiled over every block.
    pub fn block_affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let block = wv.nrows();
        let mut out = xv.clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), block) {
            chunk *= wv;
            chunk += bv;
        }
        self.push(out, Op::BlockAffine { x, w, b }, &[x, w, b])
    }

    pub fn mul_const(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let out = self.value(x) * &mask;
        self.push(out, Op::MulConst { x, mask }, &[x])
    }

    /// Mean of the first `take` rows of every `block_rows`-row block.
    pub fn mean_rows(&mut self, x: Var, block_rows: usize, take: usize) -> Var {
        let xv = self.value(x);
        let batch = xv.nrows() / block_rows;
        let mut out = Array2::zeros((batch, xv.ncols()));
        for b in 0..batch {
            let rows = xv.slice(s![b * block_rows..b * block_rows + take, ..]);
            out.row_mut(b)
                .assign(&rows.sum_axis(Axis(0)).mapv(|v| v / take as f64));
        }
        self.push(
            out,
            Op::MeanRows {
                x,
                block_rows,
                take,
            },
            &[x],
        )
    }

    /// Reverse pass seeded with `dL/dv` for each `(v, seed)` pair.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(
                g.dim(),
                self.nodes[v.0].value.dim(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Gelu(a) => {
                let mut da = self.value(*a).mapv(gelu_grad);
                da *= g;
                accumulate(&mut grads[a.0], da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.wants(*gamma) {
                    accumulate(
                        &mut grads[gamma.0],
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let inv = rstd[r];
                        Zip::from(dx.row_mut(r))
                            .and(dh)
                            .and(h)
                            .for_each(|o, &a, &b| {
                                *o = inv / n * (n * a - sum_dh - b * sum_dh_h);
                            });
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let (rows, three_d) = qv.dim();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = rows / seq;
                let mut dqkv = Array2::zeros((rows, three_d));
                for b in 0..batch {
                    let rs = b * seq..(b + 1) * seq;
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let q = qv.slice(s![rs.clone(), h * dh..(h + 1) * dh]);
                        let k = qv.slice(s![rs.clone(), d + h * dh..d + (h + 1) * dh]);
                        let v = qv.slice(s![rs.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                        let go = g.slice(s![rs.clone(), h * dh..(h + 1) * dh]);
                        let dp = go.dot(&v.t());
                        let dv = p.t().dot(&go);
                        let ds = softmax_backward(p, &dp) * scale;
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        dqkv.slice_mut(s![rs.clone(), h * dh..(h + 1) * dh])
                            .assign(&dq);
                        dqkv.slice_mut(s![rs.clone(), d + h * dh..d + (h + 1) * dh])
                            .assign(&dk);
                        dqkv.slice_mut(s![rs.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh])
                            .assign(&dv);
                    }
                }
                accumulate(&mut grads[qkv.0], dqkv);
            }
            Op::AssembleTokens {
                patches,
                pos,
                cls,
                reg,
                batch,
            } => {
                let n = self.value(*pos).nrows();
                let r = self.value(*reg).nrows();
                let seq = 1 + r + n;
                let d = g.ncols();
                let mut dpatch = Array2::zeros((batch * n, d));
                let mut dpos = Array2::zeros((n, d));
                let mut dcls = Array2::zeros((1, d));
                let mut dreg = Array2::zeros((r, d));
                for b in 0..*batch {
                    let base = b * seq;
                    dcls += &g.slice(s![base..base + 1, ..]);
                    dreg += &g.slice(s![base + 1..base + 1 + r, ..]);
                    let body = g.slice(s![base + 1 + r..base + seq, ..]);
                    dpos += &body;
                    dpatch.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&body);
                }
                for (v, gv) in [(patches, dpatch), (pos, dpos), (cls, dcls), (reg, dreg)] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
            Op::SelectRows {
                x,
                stride,
                offset,
                count,
            } => {
                let xv = self.value(*x);
                let batch = xv.nrows() / stride;
                let mut dx = Array2::zeros(xv.dim());
                for b in 0..batch {
                    dx.slice_mut(s![b * stride + offset..b * stride + offset + count, ..])
                        .assign(&g.slice(s![b * count..(b + 1) * count, ..]));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::NegSqDist(z, p) => {
                let zv = self.value(*z);
                let pv = self.value(*p);
                if self.wants(*z) {
                    // dz_r = -2 (Σ_k g_rk) z_r + 2 (g p)_r
                    let mut dz = g.dot(pv) * 2.0;
                    let rs = g.sum_axis(Axis(1));
                    Zip::from(dz.rows_mut())
                        .and(zv.rows())
                        .and(&rs)
                        .for_each(|mut o, zr, &s| {
                            o.scaled_add(-2.0 * s, &zr);
                        });
                    accumulate(&mut grads[z.0], dz);
                }
                if self.wants(*p) {
                    // dp_k = 2 (gᵀ z)_k − 2 (Σ_r g_rk) p_k
                    let mut dp = g.t().dot(zv) * 2.0;
                    let cs = g.sum_axis(Axis(0));
                    Zip::from(dp.rows_mut())
                        .and(pv.rows())
                        .and(&cs)
                        .for_each(|mut o, pr, &s| {
                            o.scaled_add(-2.0 * s, &pr);
                        });
                    accumulate(&mut grads[p.0], dp);
                }
            }
            Op::Softmax { x, inv_tau } => {
                let dx = softmax_backward(&node.value, g) * *inv_tau;
                accumulate(&mut grads[x.0], dx);
            }
            Op::PartPool { attn, feats, batch } => {
                let av = self.value(*attn);
                let zv = self.value(*feats);
                let n = av.nrows() / batch;
                let c = av.ncols();
                let inv = 1.0 / n as f64;
                if self.wants(*attn) {
                    let mut da = Array2::zeros(av.dim());
                    for b in 0..*batch {
                        let gz = g.slice(s![b * c..(b + 1) * c, ..]);
                        let zb = zv.slice(s![b * n..(b + 1) * n, ..]);
                        da.slice_mut(s![b * n..(b + 1) * n, ..])
                            .assign(&(zb.dot(&gz.t()) * inv));
                    }
                    accumulate(&mut grads[attn.0], da);
                }
                if self.wants(*feats) {
                    let mut dz = Array2::zeros(zv.dim());
                    for b in 0..*batch {
                        let gz = g.slice(s![b * c..(b + 1) * c, ..]);
                        let ab = av.slice(s![b * n..(b + 1) * n, ..]);
                        dz.slice_mut(s![b * n..(b + 1) * n, ..])
                            .assign(&(ab.dot(&gz) * inv));
                    }
                    accumulate(&mut grads[feats.0], dz);
                }
            }
            Op::Standardize {
                x,
                block_rows,
                xhat,
                rstd,
            } => {
                let mut dx = Array2::zeros(xhat.dim());
                for (bi, ((mut o, h), gb)) in dx
                    .axis_chunks_iter_mut(Axis(0), *block_rows)
                    .zip(xhat.axis_chunks_iter(Axis(0), *block_rows))
                    .zip(g.axis_chunks_iter(Axis(0), *block_rows))
                    .enumerate()
                {
                    let n = h.len() as f64;
                    let sum_g = gb.sum();
                    let sum_gh = (&gb * &h).sum();
                    let inv = rstd[bi];
                    Zip::from(&mut o).and(&gb).and(&h).for_each(|o, &a, &b| {
                        *o = inv / n * (n * a - sum_g - b * sum_gh);
                    });
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::BlockAffine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let block = wv.nrows();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for mut chunk in dx.axis_chunks_iter_mut(Axis(0), block) {
                        chunk *= wv;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    let mut dw = Array2::zeros(wv.dim());
                    for (gc, xc) in g
                        .axis_chunks_iter(Axis(0), block)
                        .zip(xv.axis_chunks_iter(Axis(0), block))
                    {
                        dw += &(&gc * &xc);
                    }
                    accumulate(&mut grads[w.0], dw);
                }
                if self.wants(*b) {
                    let mut db = Array2::zeros(wv.dim());
                    for gc in g.axis_chunks_iter(Axis(0), block) {
                        db += &gc;
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::MulConst { x, mask } => {
                accumulate(&mut grads[x.0], g * mask);
            }
            Op::MeanRows {
                x,
                block_rows,
                take,
            } => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                let inv = 1.0 / *take as f64;
                for b in 0..g.nrows() {
                    let row = g.row(b).mapv(|v| v * inv);
                    for r in 0..*take {
                        dx.row_mut(b * block_rows + r).assign(&row);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `dx = y ⊙ (g − rowsum(g ⊙ y))` for a row softmax with output `y`.
fn softmax_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut dx = g.clone();
    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot = row.dot(&yr);
        Zip::from(&mut row)
            .and(&yr)
            .for_each(|o, &p| *o = p * (*o - dot));
    }
    dx
}

/// `out[r, k] = -‖z_r − p_k‖²` for `z` of shape `n×d` and `p` of shape `c×d`.
pub fn neg_sq_dist(z: ArrayView2<f64>, p: ArrayView2<f64>) -> Array2<f64> {
    let (n, _) = z.dim();
    let c = p.nrows();
    let mut out = Array2::zeros((n, c));
    for (mut orow, zr) in out.rows_mut().into_iter().zip(z.rows()) {
        for (o, pr) in orow.iter_mut().zip(p.rows()) {
            let mut acc = 0.0;
            for (a, b) in zr.iter().zip(pr.iter()) {
                let d = a - b;
                acc += d * d;
            }
            *o = -acc;
        }
    }
    out
}

/// Per-sample `Aᵀ Z / n`.
pub fn part_pool(attn: ArrayView2<f64>, feats: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let n = attn.nrows() / batch;
    let c = attn.ncols();
    let mut out = Array2::zeros((batch * c, feats.ncols()));
    for b in 0..batch {
        let ab = attn.slice(s![b * n..(b + 1) * n, ..]);
        let zb = feats.slice(s![b * n..(b + 1) * n, ..]);
        out.slice_mut(s![b * c..(b + 1) * c, ..])
            .assign(&(ab.t().dot(&zb) / n as f64));
    }
    out
}

/// Joint standardization of each block; returns the standardized values and
/// the per-block reciprocal standard deviations.
pub fn standardize_blocks(
    x: ArrayView2<f64>,
    block_rows: usize,
    eps: f64,
) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut rstd = Vec::new();
    for mut chunk in out.axis_chunks_iter_mut(Axis(0), block_rows) {
        let n = chunk.len() as f64;
        let mean = chunk.sum() / n;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        chunk.mapv_inplace(|v| (v - mean) * inv);
        rstd.push(inv);
    }
    (out, rstd)
}
