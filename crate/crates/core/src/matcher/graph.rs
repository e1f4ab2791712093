//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records one forward evaluation of a matcher. Every node stores
//! its value; [`Graph::backward`] walks the tape in reverse and accumulates
//! parameter gradients into a [`Gradients`] buffer. Shapes are row-major.
//! Recurrent layers and convolutions are fused ops with hand-written
//! backward passes so that the tape stays short.

use super::params::{Gradients, ParamId, ParamSet, Real};
use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
}

enum Op<F> {
    Constant,
    Param(ParamId),
    Embed {
        table: ParamId,
        tokens: Vec<TokenId>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Gru(Box<GruTape<F>>),
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxOverRows {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxOverCols {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    PadTo {
        input: Var,
    },
    Reshape(Var),
}

struct GruTape<F> {
    input: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
    // Per step: reset gate, update gate, candidate, recurrent candidate
    // pre-activation (h W_hn + b_hn), previous hidden state.
    r: Vec<F>,
    z: Vec<F>,
    n: Vec<F>,
    gh_n: Vec<F>,
    h_prev: Vec<F>,
}

pub struct Graph<'p, F: Real> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<Var>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("expected a matrix, got shape {shape:?}"),
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<F>) -> Var {
        self.push(Op::Constant, shape.to_vec(), value)
    }

    /// Leaf bound to a model parameter; repeated calls reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(Op::Param(id), t.shape.clone(), t.data.clone());
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Gathers embedding rows: `[len(tokens), dim]`.
    pub fn embed(&mut self, table: ParamId, tokens: &[TokenId]) -> Var {
        let t = self.params.get(table);
        let dim = t.shape[1];
        let mut value = Vec::with_capacity(tokens.len() * dim);
        for &tok in tokens {
            let row = tok as usize * dim;
            value.extend_from_slice(&t.data[row..row + dim]);
        }
        self.push(
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            vec![tokens.len(), dim],
            value,
        )
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.shape(a));
        let (n, k2) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul_t inner dimensions");
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(Op::MatMulT(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a), vec![n, m], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, out)
    }

    /// Adds a `[n]` bias to every row of `[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        assert_eq!(self.value(bias).len(), n, "bias length");
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| *x + b[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddRow(a, bias), shape, out)
    }

    /// `x W + b` for `x: [m,k]`, `W: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).iter().map(|x| *x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|x| if *x > F::zero() { *x } else { F::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape, out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::SoftmaxRows(a), shape, out)
    }

    /// Gated recurrent unit over the rows of `input: [len, in_dim]`; returns
    /// every hidden state, `[len, hidden]`, starting from a zero state.
    ///
    /// Gate layout along the `3 * hidden` axis is reset, update, candidate.
    pub fn gru(
        &mut self,
        input: Var,
        w_ih: ParamId,
        w_hh: ParamId,
        b_ih: ParamId,
        b_hh: ParamId,
    ) -> Var {
        let w_ih = self.param(w_ih);
        let w_hh = self.param(w_hh);
        let b_ih = self.param(b_ih);
        let b_hh = self.param(b_hh);
        let (len, in_dim) = rows_cols(self.shape(input));
        let (_, three_h) = rows_cols(self.shape(w_hh));
        let hd = three_h / 3;

        let mut gi = vec![F::zero(); len * three_h];
        gemm_nn(self.value(input), self.value(w_ih), &mut gi, len, in_dim, three_h);
        let bi = self.value(b_ih);
        for row in gi.chunks_mut(three_h) {
            for (x, b) in row.iter_mut().zip(bi) {
                *x += *b;
            }
        }

        let whh = self.value(w_hh);
        let bh = self.value(b_hh);
        let mut r = vec![F::zero(); len * hd];
        let mut z = vec![F::zero(); len * hd];
        let mut n = vec![F::zero(); len * hd];
        let mut gh_n = vec![F::zero(); len * hd];
        let mut h_prev = vec![F::zero(); len * hd];
        let mut out = vec![F::zero(); len * hd];
        let mut h = vec![F::zero(); hd];
        let mut gh = vec![F::zero(); three_h];
        for t in 0..len {
            gh.copy_from_slice(bh);
            gemm_nn(&h, whh, &mut gh, 1, hd, three_h);
            let g = &gi[t * three_h..(t + 1) * three_h];
            let s = t * hd;
            h_prev[s..s + hd].copy_from_slice(&h);
            for j in 0..hd {
                let rj = sigmoid(g[j] + gh[j]);
                let zj = sigmoid(g[hd + j] + gh[hd + j]);
                let nj = (g[2 * hd + j] + rj * gh[2 * hd + j]).tanh();
                r[s + j] = rj;
                z[s + j] = zj;
                n[s + j] = nj;
                gh_n[s + j] = gh[2 * hd + j];
                h[j] = (F::one() - zj) * nj + zj * h[j];
            }
            out[s..s + hd].copy_from_slice(&h);
        }
        self.push(
            Op::Gru(Box::new(GruTape {
                input,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                hidden: hd,
                r,
                z,
                n,
                gh_n,
                h_prev,
            })),
            vec![len, hd],
            out,
        )
    }

    /// Stride-1 3x3 convolution with zero padding of one cell.
    /// `input: [C,H,W]`, `weight: [O,C,3,3]`, `bias: [O]` -> `[O,H,W]`.
    pub fn conv3x3(&mut self, input: Var, weight: ParamId, bias: ParamId) -> Var {
        let weight = self.param(weight);
        let bias = self.param(bias);
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => panic!("conv3x3 expects [C,H,W], got {s:?}"),
        };
        let o = self.shape(weight)[0];
        assert_eq!(self.shape(weight)[1], c, "conv input channels");
        let x = self.value(input);
        let k = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![F::zero(); o * h * w];
        for oc in 0..o {
            let plane = &mut out[oc * h * w..(oc + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..c {
                let src = &x[ic * h * w..(ic + 1) * h * w];
                let ker = &k[(oc * c + ic) * 9..(oc * c + ic) * 9 + 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = ker[ky * 3 + kx];
                        let (y0, y1) = tap_range(ky, h);
                        let (x0, x1) = tap_range(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (d, sv) in dst.iter_mut().zip(s) {
                                *d += kv * *sv;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv3x3 {
                input,
                weight,
                bias,
            },
            vec![o, h, w],
            out,
        )
    }

    /// Non-overlapping 2x2 max pooling, `[C,H,W] -> [C,H/2,W/2]`.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => panic!("max_pool2 expects [C,H,W], got {s:?}"),
        };
        let (ph, pw) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * ph * pw);
        let mut argmax = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = ch * h * w + 2 * py * w + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * py + dy) * w + 2 * px + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(x[best]);
                }
            }
        }
        self.push(Op::MaxPool2 { input, argmax }, vec![c, ph, pw], out)
    }

    /// Column-wise maximum of `[m,n]`, giving `[n]`. Ties keep the first row.
    pub fn max_over_rows(&mut self, input: Var) -> Var {
        let (m, n) = rows_cols(self.shape(input));
        let x = self.value(input);
        let mut argmax = vec![0usize; n];
        for (j, best) in argmax.iter_mut().enumerate() {
            *best = j;
            for i in 1..m {
                if x[i * n + j] > x[*best] {
                    *best = i * n + j;
                }
            }
        }
        let out = argmax.iter().map(|&i| x[i]).collect();
        self.push(Op::MaxOverRows { input, argmax }, vec![n], out)
    }

    /// Row-wise maximum of `[m,n]` (any trailing dims flattened), giving `[m]`.
    pub fn max_over_cols(&mut self, input: Var) -> Var {
        let shape = self.shape(input);
        let m = shape[0];
        let n: usize = shape[1..].iter().product();
        let x = self.value(input);
        let mut argmax = vec![0usize; m];
        for (i, best) in argmax.iter_mut().enumerate() {
            *best = i * n;
            for j in 1..n {
                if x[i * n + j] > x[*best] {
                    *best = i * n + j;
                }
            }
        }
        let out = argmax.iter().map(|&i| x[i]).collect();
        self.push(Op::MaxOverCols { input, argmax }, vec![m], out)
    }

    /// Mean of the rows of `[m,n]`, giving `[n]`.
    pub fn mean_rows(&mut self, input: Var) -> Var {
        let (m, n) = rows_cols(self.shape(input));
        let x = self.value(input);
        let inv = F::one() / F::of(m as f64);
        let mut out = vec![F::zero(); n];
        for row in x.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(input), vec![n], out)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let inner = self.shape(parts[0]).to_vec();
        let mut out = Vec::with_capacity(parts.len() * inner.iter().product::<usize>());
        for p in parts {
            assert_eq!(self.shape(*p), inner.as_slice(), "stack shapes");
            out.extend_from_slice(self.value(*p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Op::Concat(parts.to_vec()), shape, out)
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = rows_cols(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|p| rows_cols(self.shape(*p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            assert_eq!(rows_cols(self.shape(*p)).0, m, "concat_cols rows");
            let src = self.value(*p);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], out)
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let (m, n) = rows_cols(self.shape(input));
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(input);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Op::SliceCols { input, start }, vec![m, len], out)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Var {
        let (m, n) = rows_cols(self.shape(input));
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(input)[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows { input, start }, vec![len, n], out)
    }

    /// Zero-pads `[h,w]` on the bottom and right to `[rows, cols]`.
    pub fn pad_to(&mut self, input: Var, rows: usize, cols: usize) -> Var {
        let (h, w) = rows_cols(self.shape(input));
        assert!(h <= rows && w <= cols, "pad_to cannot shrink");
        let src = self.value(input);
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..h {
            out[i * cols..i * cols + w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
        self.push(Op::PadTo { input }, vec![rows, cols], out)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(input).len(),
            "reshape size"
        );
        let value = self.value(input).to_vec();
        self.push(Op::Reshape(input), shape.to_vec(), value)
    }

    /// Back-propagates `seed * d(root)` and adds parameter gradients to `grads`.
    /// `root` must be a single-element node.
    pub fn backward(&self, root: Var, seed: F, grads: &mut Gradients<F>) {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (dst, v) in grads.tensor_mut(*id).iter_mut().zip(&g) {
                        *dst += *v;
                    }
                }
                Op::Embed { table, tokens } => {
                    let dim = node.shape[1];
                    let dst = grads.tensor_mut(*table);
                    for (row, &tok) in tokens.iter().enumerate() {
                        let base = tok as usize * dim;
                        for j in 0..dim {
                            dst[base + j] += g[row * dim + j];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(self.shape(*a));
                    let n = rows_cols(self.shape(*b)).1;
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(&g, self.value(*b), &mut da, m, n, k);
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(self.value(*a), &g, &mut db, k, m, n);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = rows_cols(self.shape(*a));
                    let n = rows_cols(self.shape(*b)).0;
                    let mut da = vec![F::zero(); m * k];
                    gemm_nn(&g, self.value(*b), &mut da, m, n, k);
                    let mut db = vec![F::zero(); n * k];
                    gemm_tn(&g, self.value(*a), &mut db, n, m, k);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Transpose(a) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let mut da = vec![F::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let (_, n) = rows_cols(&node.shape);
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    accumulate(&mut adj, *bias, db);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, factor) => {
                    let da = g.iter().map(|v| *v * *factor).collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| *d * *y * (F::one() - *y))
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| *d * (F::one() - *y * *y))
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Relu(a) => {
                    let da = g
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| if *y > F::zero() { *d } else { F::zero() })
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let (_, n) = rows_cols(&node.shape);
                    let mut da = vec![F::zero(); g.len()];
                    for ((drow, grow), yrow) in da
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(node.value.chunks(n))
                    {
                        let dot: F = grow.iter().zip(yrow).map(|(d, y)| *d * *y).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Gru(tape) => self.gru_backward(tape, &g, &mut adj),
                Op::Conv3x3 {
                    input,
                    weight,
                    bias,
                } => {
                    let (c, h, w) = match self.shape(*input) {
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let o = node.shape[0];
                    let x = self.value(*input);
                    let k = self.value(*weight);
                    let mut dx = vec![F::zero(); c * h * w];
                    let mut dk = vec![F::zero(); o * c * 9];
                    let mut db = vec![F::zero(); o];
                    for oc in 0..o {
                        let gp = &g[oc * h * w..(oc + 1) * h * w];
                        db[oc] = gp.iter().copied().sum();
                        for ic in 0..c {
                            let src = &x[ic * h * w..(ic + 1) * h * w];
                            let base = (oc * c + ic) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let kv = k[base + ky * 3 + kx];
                                    let (y0, y1) = tap_range(ky, h);
                                    let (x0, x1) = tap_range(kx, w);
                                    let mut acc = F::zero();
                                    for y in y0..y1 {
                                        let sy = y + ky - 1;
                                        let gr = &gp[y * w + x0..y * w + x1];
                                        let so = sy * w + x0 + kx - 1;
                                        let sr = &src[so..so + (x1 - x0)];
                                        let dr = &mut dx[ic * h * w + so
                                            ..ic * h * w + so + (x1 - x0)];
                                        for ((gv, sv), dv) in gr.iter().zip(sr).zip(dr) {
                                            acc += *gv * *sv;
                                            *dv += *gv * kv;
                                        }
                                    }
                                    dk[base + ky * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *input, dx);
                    accumulate(&mut adj, *weight, dk);
                    accumulate(&mut adj, *bias, db);
                }
                Op::MaxPool2 { input, argmax }
                | Op::MaxOverRows { input, argmax }
                | Op::MaxOverCols { input, argmax } => {
                    let mut dx = vec![F::zero(); self.value(*input).len()];
                    for (gv, &i) in g.iter().zip(argmax) {
                        dx[i] += *gv;
                    }
                    accumulate(&mut adj, *input, dx);
                }
                Op::MeanRows(a) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let inv = F::one() / F::of(m as f64);
                    let mut da = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        da.extend(g.iter().map(|v| *v * inv));
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        accumulate(&mut adj, *p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = rows_cols(&node.shape);
                    let mut offset = 0;
                    for p in parts {
                        let w = rows_cols(self.shape(*p)).1;
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut adj, *p, dp);
                        offset += w;
                    }
                }
                Op::SliceCols { input, start } => {
                    let (m, n) = rows_cols(self.shape(*input));
                    let len = node.shape[1];
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, *input, dx);
                }
                Op::SliceRows { input, start } => {
                    let (m, n) = rows_cols(self.shape(*input));
                    let mut dx = vec![F::zero(); m * n];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut adj, *input, dx);
                }
                Op::PadTo { input } => {
                    let (h, w) = rows_cols(self.shape(*input));
                    let cols = node.shape[1];
                    let mut dx = Vec::with_capacity(h * w);
                    for i in 0..h {
                        dx.extend_from_slice(&g[i * cols..i * cols + w]);
                    }
                    accumulate(&mut adj, *input, dx);
                }
                Op::Reshape(a) => accumulate(&mut adj, *a, g),
            }
        }
    }

    fn gru_backward(&self, tape: &GruTape<F>, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let hd = tape.hidden;
        let three_h = 3 * hd;
        let (len, in_dim) = rows_cols(self.shape(tape.input));
        let whh = self.value(tape.w_hh);
        let wih = self.value(tape.w_ih);

        let mut d_gi = vec![F::zero(); len * three_h];
        let mut d_whh = vec![F::zero(); hd * three_h];
        let mut d_bhh = vec![F::zero(); three_h];
        let mut dh_next = vec![F::zero(); hd];
        let mut d_gh = vec![F::zero(); three_h];
        for t in (0..len).rev() {
            let s = t * hd;
            let dgi = &mut d_gi[t * three_h..(t + 1) * three_h];
            let mut dh_prev = vec![F::zero(); hd];
            for j in 0..hd {
                let dh = g[s + j] + dh_next[j];
                let (r, z, n) = (tape.r[s + j], tape.z[s + j], tape.n[s + j]);
                let hp = tape.h_prev[s + j];
                let dn = dh * (F::one() - z);
                let dz = dh * (hp - n);
                dh_prev[j] = dh * z;
                let dn_pre = dn * (F::one() - n * n);
                let dr = dn_pre * tape.gh_n[s + j];
                let dr_pre = dr * r * (F::one() - r);
                let dz_pre = dz * z * (F::one() - z);
                dgi[j] = dr_pre;
                dgi[hd + j] = dz_pre;
                dgi[2 * hd + j] = dn_pre;
                d_gh[j] = dr_pre;
                d_gh[hd + j] = dz_pre;
                d_gh[2 * hd + j] = dn_pre * r;
            }
            // dh_prev += d_gh W_hh^T ; dW_hh += h_prev^T d_gh
            gemm_nt(&d_gh, whh, &mut dh_prev, 1, three_h, hd);
            gemm_tn(&tape.h_prev[s..s + hd], &d_gh, &mut d_whh, hd, 1, three_h);
            for (b, d) in d_bhh.iter_mut().zip(&d_gh) {
                *b += *d;
            }
            dh_next = dh_prev;
        }
        let mut dx = vec![F::zero(); len * in_dim];
        gemm_nt(&d_gi, wih, &mut dx, len, three_h, in_dim);
        let mut d_wih = vec![F::zero(); in_dim * three_h];
        gemm_tn(self.value(tape.input), &d_gi, &mut d_wih, in_dim, len, three_h);
        let mut d_bih = vec![F::zero(); three_h];
        for row in d_gi.chunks(three_h) {
            for (b, d) in d_bih.iter_mut().zip(row) {
                *b += *d;
            }
        }
        accumulate(adj, tape.input, dx);
        accumulate(adj, tape.w_ih, d_wih);
        accumulate(adj, tape.w_hh, d_whh);
        accumulate(adj, tape.b_ih, d_bih);
        accumulate(adj, tape.b_hh, d_bhh);
    }
}

fn accumulate<F: Real>(adj: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Output rows (or columns) for which kernel tap `k` reads inside the input.
fn tap_range(k: usize, size: usize) -> (usize, usize) {
    match k {
        0 => (1.min(size), size),
        1 => (0, size),
        _ => (0, size.saturating_sub(1)),
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `out[m,n] += a[m,k] b[k,n]`
fn gemm_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] b[n,k]^T`
fn gemm_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T b[k,n]`
fn gemm_tn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
}
