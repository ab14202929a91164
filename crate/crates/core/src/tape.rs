//! Define-by-run reverse-mode differentiation over `Array2<f64>` values.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node that requires
//! them. All tensors are rank-2 (scalars are 1x1), which is enough for the
//! encoder/fusion stack: token grids are `T x d`, vectors are `1 x d`.
//!
//! Scalar loss heads (InfoNCE, the hybrid objective) attach through
//! [`Tape::scalar_head`], which takes the loss value together with its
//! analytic input gradient computed eagerly at forward time.

use ndarray::{s, Array2, Axis};

use crate::error::{AqaError, Result};

pub const GELU_COEF: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// `(T x d) + (1 x d)` with the right operand broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    Transpose(usize),
    Rows {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    /// Mean over consecutive row blocks of fixed size.
    BlockMeanRows {
        x: usize,
        block: usize,
    },
    L2NormalizeRows {
        x: usize,
        eps: f64,
    },
    /// Multi-head softmax attention: out = concat_h softmax(q_h k_h^T / sqrt(dk)) v_h.
    Mha {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
    },
    SumAll(usize),
    /// Scalar head with its input gradient precomputed at forward time.
    ScalarHead {
        x: usize,
        grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients harvested from a backward pass, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-head attention weights for `q: Tq x dm`, `k: Tk x dm`. Returns one
/// `Tq x Tk` matrix per head. Pure helper shared by the tape op and tests.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>, n_heads: usize) -> Vec<Array2<f64>> {
    let dm = q.ncols();
    let dk = dm / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    (0..n_heads)
        .map(|h| {
            let qh = q.slice(s![.., h * dk..(h + 1) * dk]);
            let kh = k.slice(s![.., h * dk..(h + 1) * dk]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|v| v * scale);
            softmax_rows_inplace(&mut scores);
            scores
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    /// Row-broadcast add: `a` is `T x d`, `bias` is `1 x d`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + &self.value(bias).row(0);
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRow(a.0, bias.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a.0), ng)
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(
            value,
            Op::Rows {
                x: a.0,
                start,
                len,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let mut value = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        value.slice_mut(s![.., ..av.ncols()]).assign(av);
        value.slice_mut(s![.., av.ncols()..]).assign(bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a.0, b.0), ng)
    }

    /// Stack variables vertically (all must share a column count).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.ncols(), cols, "concat_rows column mismatch");
            value.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a.0), ng)
    }

    /// Row-wise layer normalization with learnable gain and bias (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut value = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                value[[i, j]] = g[j] * (v - mean) * inv + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            ng,
        )
    }

    /// Mean over consecutive blocks of `block` rows: `(B*block) x d -> B x d`.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Var {
        let xv = self.value(a);
        assert!(block >= 1 && xv.nrows() % block == 0, "block size mismatch");
        let blocks = xv.nrows() / block;
        let mut value = Array2::zeros((blocks, xv.ncols()));
        for bidx in 0..blocks {
            let chunk = xv.slice(s![bidx * block..(bidx + 1) * block, ..]);
            value
                .row_mut(bidx)
                .assign(&(chunk.sum_axis(Axis(0)) / block as f64));
        }
        let ng = self.needs(a);
        self.push(value, Op::BlockMeanRows { x: a.0, block }, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let block = self.value(a).nrows();
        self.block_mean_rows(a, block)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let xv = self.value(a);
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.needs(a);
        self.push(value, Op::L2NormalizeRows { x: a.0, eps }, ng)
    }

    /// Multi-head attention. `q: Tq x dm`, `k, v: Tk x dm`, `dm % n_heads == 0`.
    /// Heads act on contiguous column bands of width `dm / n_heads` and are
    /// concatenated in order; scaling is `1/sqrt(dk)` per head.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let dm = qv.ncols();
        assert_eq!(kv.ncols(), dm);
        assert_eq!(vv.ncols(), dm);
        assert_eq!(kv.nrows(), vv.nrows());
        assert!(n_heads >= 1 && dm % n_heads == 0, "dm must divide by heads");
        let dk = dm / n_heads;
        let mut out = Array2::zeros((qv.nrows(), dm));
        for h in 0..n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x / (dk as f64).sqrt());
            softmax_rows_inplace(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vh));
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Mha {
                q: q.0,
                k: k.0,
                v: v.0,
                n_heads,
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a.0), ng)
    }

    /// Attach a scalar loss head. `f` maps the input value to the loss and
    /// its gradient with respect to the input.
    pub fn scalar_head<F>(&mut self, x: Var, f: F) -> Result<Var>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let (loss, grad) = f(self.value(x))?;
        if !loss.is_finite() {
            return Err(AqaError::Numeric("non-finite loss value".into()));
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::ScalarHead { x: x.0, grad },
            ng,
        ))
    }

    /// Reverse pass from a scalar output. Gradients are accumulated for every
    /// node on a path to a grad-requiring leaf.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.nodes[out.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], node: usize, delta: Array2<f64>) {
        if !self.nodes[node].needs_grad {
            return;
        }
        match &mut grads[node] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.add_grad(grads, *a, g.dot(&bv.t()));
                self.add_grad(grads, *b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(grads, *bias, summed);
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g * *c);
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * &self.nodes[*b].value);
                self.add_grad(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.t().to_owned());
            }
            Op::Rows { x, start, len } => {
                let shape = self.nodes[*x].value.dim();
                let mut dx = Array2::zeros(shape);
                dx.slice_mut(s![*start..*start + *len, ..]).assign(g);
                self.add_grad(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let a_cols = self.nodes[*a].value.ncols();
                self.add_grad(grads, *a, g.slice(s![.., ..a_cols]).to_owned());
                self.add_grad(grads, *b, g.slice(s![.., a_cols..]).to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let rows = self.nodes[*p].value.nrows();
                    self.add_grad(grads, *p, g.slice(s![at..at + rows, ..]).to_owned());
                    at += rows;
                }
            }
            Op::Gelu(a) => {
                let dx = g * &self.nodes[*a].value.mapv(gelu_deriv);
                self.add_grad(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.row(0).to_owned();
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dgain = Array2::zeros((1, xv.ncols()));
                let mut dbias = Array2::zeros((1, xv.ncols()));
                for (i, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let dy = g[[i, j]];
                        dgain[[0, j]] += dy * xhat[j];
                        dbias[[0, j]] += dy;
                        let dxh = dy * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    for j in 0..xv.ncols() {
                        let dxh = g[[i, j]] * gv[j];
                        dx[[i, j]] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gain, dgain);
                self.add_grad(grads, *bias, dbias);
            }
            Op::BlockMeanRows { x, block } => {
                let shape = self.nodes[*x].value.dim();
                let mut dx = Array2::zeros(shape);
                let scale = 1.0 / *block as f64;
                for bidx in 0..g.nrows() {
                    for r in 0..*block {
                        for c in 0..shape.1 {
                            dx[[bidx * block + r, c]] = g[[bidx, c]] * scale;
                        }
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::zeros(xv.dim());
                for (i, row) in xv.rows().into_iter().enumerate() {
                    let sq = row.iter().map(|v| v * v).sum::<f64>() + eps;
                    let n = sq.sqrt();
                    let dot: f64 = (0..row.len()).map(|j| g[[i, j]] * row[j]).sum();
                    for j in 0..row.len() {
                        dx[[i, j]] = g[[i, j]] / n - row[j] * dot / (n * sq);
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Mha { q, k, v, n_heads } => {
                let qv = &self.nodes[*q].value;
                let kv = &self.nodes[*k].value;
                let vv = &self.nodes[*v].value;
                let dm = qv.ncols();
                let dk = dm / n_heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dkm = Array2::zeros(kv.dim());
                let mut dvm = Array2::zeros(vv.dim());
                for h in 0..*n_heads {
                    let cols = s![.., h * dk..(h + 1) * dk];
                    let qh = qv.slice(cols);
                    let kh = kv.slice(cols);
                    let vh = vv.slice(cols);
                    let gh = g.slice(cols);
                    let mut p = qh.dot(&kh.t());
                    p.mapv_inplace(|x| x * scale);
                    softmax_rows_inplace(&mut p);
                    // dV = P^T g ; dP = g V^T ; dS = P .* (dP - rowsum(dP .* P))
                    dvm.slice_mut(cols).assign(&p.t().dot(&gh));
                    let dp = gh.dot(&vh.t());
                    let mut ds = Array2::zeros(p.dim());
                    for i in 0..p.nrows() {
                        let rowdot: f64 = (0..p.ncols()).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                        for j in 0..p.ncols() {
                            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - rowdot) * scale;
                        }
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kh));
                    dkm.slice_mut(cols).assign(&ds.t().dot(&qh));
                }
                self.add_grad(grads, *q, dq);
                self.add_grad(grads, *k, dkm);
                self.add_grad(grads, *v, dvm);
            }
            Op::SumAll(a) => {
                let shape = self.nodes[*a].value.dim();
                self.add_grad(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::ScalarHead { x, grad } => {
                self.add_grad(grads, *x, grad * g[[0, 0]]);
            }
        }
    }
}
