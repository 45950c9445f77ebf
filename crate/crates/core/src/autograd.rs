//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! then walks the tape in reverse and accumulates gradients. Everything is a
//! 2-D matrix: images are stored channels-last as `[batch * height * width,
//! channels]`, token sequences as `[batch * len, dim]`.
//!
//! Several operations (attention, layer norm, the loss primitives) are fused
//! with hand-written backward passes; they are checked against central finite
//! differences in the unit tests below.

use ndarray::{s, Array2, ArrayView2, Axis};
use std::rc::Rc;

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial layout of a channels-last image batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Kernel, stride and zero padding of a square convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Shape bookkeeping for the fused multi-head attention op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub query_len: usize,
    pub key_len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Im2Col {
        x: Var,
        geom: ImageGeom,
        window: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
        in_rows: usize,
    },
    AvgPoolTo {
        x: Var,
        geom: ImageGeom,
        out: usize,
    },
    GatherRows {
        sources: Vec<Var>,
        map: Rc<Vec<(usize, usize)>>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<Matrix>,
    },
    SqDist(Var, Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
    RowDot(Var, Matrix),
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Tape of evaluated operations.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `[1, m]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `x @ w + b` for a `[in, out]` weight and `[1, out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Row-wise layer normalisation with affine `[1, d]` parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Matrix::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Unfolds convolution patches: `[B*H*W, C]` to `[B*Ho*Wo, k*k*C]`, with
    /// patch columns ordered (ky, kx, c).
    pub fn im2col(&mut self, x: Var, geom: ImageGeom, window: Window) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.rows(), geom.channels), "im2col input shape");
        let ho = window.out_size(geom.height);
        let wo = window.out_size(geom.width);
        let k = window.kernel;
        let c = geom.channels;
        let mut out = Matrix::zeros((geom.batch * ho * wo, k * k * c));
        let src = xv.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        let cols = k * k * c;
        for b in 0..geom.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let orow = (b * ho + oy) * wo + ox;
                    for ky in 0..k {
                        let iy = (oy * window.stride + ky) as isize - window.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * window.stride + kx) as isize - window.padding as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let irow = (b * geom.height + iy as usize) * geom.width + ix as usize;
                            let d0 = orow * cols + (ky * k + kx) * c;
                            dst[d0..d0 + c].copy_from_slice(&src[irow * c..irow * c + c]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Im2Col { x, geom, window }, rg)
    }

    /// Max pooling over channels-last images; padding cells never win.
    pub fn max_pool(&mut self, x: Var, geom: ImageGeom, window: Window) -> Var {
        let xv = self.value(x);
        let ho = window.out_size(geom.height);
        let wo = window.out_size(geom.width);
        let c = geom.channels;
        let mut out = Matrix::from_elem((geom.batch * ho * wo, c), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; geom.batch * ho * wo * c];
        for b in 0..geom.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let orow = (b * ho + oy) * wo + ox;
                    for ky in 0..window.kernel {
                        let iy = (oy * window.stride + ky) as isize - window.padding as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..window.kernel {
                            let ix = (ox * window.stride + kx) as isize - window.padding as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let irow = (b * geom.height + iy as usize) * geom.width + ix as usize;
                            for ch in 0..c {
                                let v = xv[[irow, ch]];
                                if v > out[[orow, ch]] {
                                    out[[orow, ch]] = v;
                                    argmax[orow * c + ch] = irow;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::MaxPool {
                x,
                argmax,
                in_rows: geom.rows(),
            },
            rg,
        )
    }

    /// Adaptive average pooling to an `out x out` grid.
    pub fn avg_pool_to(&mut self, x: Var, geom: ImageGeom, out: usize) -> Var {
        let xv = self.value(x);
        let c = geom.channels;
        let mut res = Matrix::zeros((geom.batch * out * out, c));
        for b in 0..geom.batch {
            for oy in 0..out {
                let (y0, y1) = adaptive_range(oy, out, geom.height);
                for ox in 0..out {
                    let (x0, x1) = adaptive_range(ox, out, geom.width);
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    let orow = (b * out + oy) * out + ox;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let irow = (b * geom.height + iy) * geom.width + ix;
                            for ch in 0..c {
                                res[[orow, ch]] += xv[[irow, ch]] / n;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(res, Op::AvgPoolTo { x, geom, out }, rg)
    }

    /// Builds a new matrix whose row `i` is row `map[i].1` of `sources[map[i].0]`.
    /// Covers row selection, tiling and interleaved concatenation.
    pub fn gather_rows(&mut self, sources: &[Var], map: Rc<Vec<(usize, usize)>>) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut out = Matrix::zeros((map.len(), cols));
        for (i, &(s, r)) in map.iter().enumerate() {
            let src = self.value(sources[s]);
            assert_eq!(src.ncols(), cols, "gather_rows column mismatch");
            out.row_mut(i).assign(&src.row(r));
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        self.push(
            out,
            Op::GatherRows {
                sources: sources.to_vec(),
                map,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("same rows");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Scaled dot-product attention over `heads` column groups. `q` is
    /// `[batch * query_len, d]`, `k` and `v` are `[batch * key_len, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        assert_eq!(d % shape.heads, 0, "model dim not divisible by heads");
        assert_eq!(qv.nrows(), shape.batch * shape.query_len);
        assert_eq!(kv.nrows(), shape.batch * shape.key_len);
        let dh = d / shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let qr = b * shape.query_len..(b + 1) * shape.query_len;
            let kr = b * shape.key_len..(b + 1) * shape.key_len;
            for h in 0..shape.heads {
                let cr = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![qr.clone(), cr.clone()]);
                let ks = kv.slice(s![kr.clone(), cr.clone()]);
                let vs = vv.slice(s![kr.clone(), cr.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![qr.clone(), cr]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        )
    }

    /// Pairwise squared Euclidean distances: `[n, d]` x `[m, d]` to `[n, m]`.
    pub fn sq_dist(&mut self, x: Var, protos: Var) -> Var {
        let value = sq_dist_matrix(self.value(x).view(), self.value(protos).view());
        let rg = self.rg(x) || self.rg(protos);
        self.push(value, Op::SqDist(x, protos), rg)
    }

    /// Per-row cross entropy against a soft target distribution:
    /// `-sum_c t[r, c] * log softmax(logits[r])_c`, output `[n, 1]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "target shape");
        let mut probs = lv.clone();
        softmax_rows_inplace(&mut probs);
        let mut out = Matrix::zeros((lv.nrows(), 1));
        for r in 0..lv.nrows() {
            let lse = log_sum_exp(lv.row(r).iter().copied());
            let mut acc = 0.0;
            for c in 0..lv.ncols() {
                let t = targets[[r, c]];
                if t != 0.0 {
                    acc -= t * (lv[[r, c]] - lse);
                }
            }
            out[[r, 0]] = acc;
        }
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Per-row dot product with a constant weight matrix, output `[n, 1]`.
    pub fn row_dot(&mut self, x: Var, weights: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), weights.dim(), "row_dot shape");
        let value = (xv * &weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::RowDot(x, weights), rg)
    }

    /// `sum_i w[i] * x[i, 0]` as a `[1, 1]` scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (weights.len(), 1), "weighted_sum shape");
        let total: f64 = xv.column(0).iter().zip(&weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(x);
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::WeightedSum(x, weights),
            rg,
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    /// Reverse pass from a `[1, 1]` output. Returns gradients indexed by node;
    /// entries are `None` for nodes that do not require gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::from_elem((1, 1), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let (n, d) = g.dim();
                    let gh = g * gv;
                    let mut dx = Matrix::zeros((n, d));
                    for r in 0..n {
                        let ghr = gh.row(r);
                        let xr = xhat.row(r);
                        let m1 = ghr.sum() / d as f64;
                        let m2 = ghr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = inv_std[r] * (ghr[c] - m1 - xr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Im2Col { x, geom, window } => {
                let ho = window.out_size(geom.height);
                let wo = window.out_size(geom.width);
                let k = window.kernel;
                let c = geom.channels;
                let cols = k * k * c;
                let mut dx = Matrix::zeros((geom.rows(), c));
                let gs = g.as_slice().expect("standard layout");
                let ds = dx.as_slice_mut().expect("standard layout");
                for b in 0..geom.batch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let orow = (b * ho + oy) * wo + ox;
                            for ky in 0..k {
                                let iy =
                                    (oy * window.stride + ky) as isize - window.padding as isize;
                                if iy < 0 || iy >= geom.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * window.stride + kx) as isize
                                        - window.padding as isize;
                                    if ix < 0 || ix >= geom.width as isize {
                                        continue;
                                    }
                                    let irow =
                                        (b * geom.height + iy as usize) * geom.width + ix as usize;
                                    let g0 = orow * cols + (ky * k + kx) * c;
                                    for ch in 0..c {
                                        ds[irow * c + ch] += gs[g0 + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MaxPool {
                x,
                argmax,
                in_rows,
            } => {
                let c = g.ncols();
                let mut dx = Matrix::zeros((*in_rows, c));
                for r in 0..g.nrows() {
                    for ch in 0..c {
                        dx[[argmax[r * c + ch], ch]] += g[[r, ch]];
                    }
                }
                acc(*x, dx);
            }
            Op::AvgPoolTo { x, geom, out } => {
                let c = geom.channels;
                let mut dx = Matrix::zeros((geom.rows(), c));
                for b in 0..geom.batch {
                    for oy in 0..*out {
                        let (y0, y1) = adaptive_range(oy, *out, geom.height);
                        for ox in 0..*out {
                            let (x0, x1) = adaptive_range(ox, *out, geom.width);
                            let n = ((y1 - y0) * (x1 - x0)) as f64;
                            let orow = (b * out + oy) * out + ox;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let irow = (b * geom.height + iy) * geom.width + ix;
                                    for ch in 0..c {
                                        dx[[irow, ch]] += g[[orow, ch]] / n;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { sources, map } => {
                let mut ds: Vec<Option<Matrix>> = sources
                    .iter()
                    .map(|&s| {
                        self.rg(s)
                            .then(|| Matrix::zeros(self.value(s).dim()))
                    })
                    .collect();
                for (i, &(s, r)) in map.iter().enumerate() {
                    if let Some(d) = &mut ds[s] {
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                }
                for (s, d) in sources.iter().zip(ds) {
                    if let Some(d) = d {
                        acc(*s, d);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                acc(*a, g.slice(s![.., ..ca]).to_owned());
                acc(*b, g.slice(s![.., ca..]).to_owned());
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let d = qv.ncols();
                let dh = d / shape.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.dim());
                let mut dk = Matrix::zeros(kv.dim());
                let mut dv = Matrix::zeros(vv.dim());
                for b in 0..shape.batch {
                    let qr = b * shape.query_len..(b + 1) * shape.query_len;
                    let kr = b * shape.key_len..(b + 1) * shape.key_len;
                    for h in 0..shape.heads {
                        let cr = h * dh..(h + 1) * dh;
                        let p = &probs[b * shape.heads + h];
                        let go = g.slice(s![qr.clone(), cr.clone()]);
                        let vs = vv.slice(s![kr.clone(), cr.clone()]);
                        let ks = kv.slice(s![kr.clone(), cr.clone()]);
                        let qs = qv.slice(s![qr.clone(), cr.clone()]);
                        dv.slice_mut(s![kr.clone(), cr.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        // softmax backward: ds = p * (dp - rowsum(p * dp))
                        let mut dsm = &dp * p;
                        let rs = dsm.sum_axis(Axis(1));
                        for (r, mut row) in dsm.rows_mut().into_iter().enumerate() {
                            for (c, x) in row.iter_mut().enumerate() {
                                *x -= p[[r, c]] * rs[r];
                            }
                        }
                        dsm *= scale;
                        dq.slice_mut(s![qr.clone(), cr.clone()])
                            .assign(&dsm.dot(&ks));
                        dk.slice_mut(s![kr.clone(), cr]).assign(&dsm.t().dot(&qs));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SqDist(x, p) => {
                // d[i,j] = |x_i - p_j|^2
                let xv = self.value(*x);
                let pv = self.value(*p);
                let gsum_rows = g.sum_axis(Axis(1));
                if self.rg(*x) {
                    let mut dx = g.dot(pv) * -2.0;
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row.scaled_add(2.0 * gsum_rows[i], &xv.row(i));
                    }
                    acc(*x, dx);
                }
                if self.rg(*p) {
                    let gsum_cols = g.sum_axis(Axis(0));
                    let mut dp = g.t().dot(xv) * -2.0;
                    for (j, mut row) in dp.rows_mut().into_iter().enumerate() {
                        row.scaled_add(2.0 * gsum_cols[j], &pv.row(j));
                    }
                    acc(*p, dp);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut dl = Matrix::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    let tsum: f64 = targets.row(r).sum();
                    for c in 0..probs.ncols() {
                        dl[[r, c]] = g[[r, 0]] * (tsum * probs[[r, c]] - targets[[r, c]]);
                    }
                }
                acc(*logits, dl);
            }
            Op::RowDot(x, w) => {
                let mut dx = w.clone();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    row *= g[[r, 0]];
                }
                acc(*x, dx);
            }
            Op::WeightedSum(x, w) => {
                let gs = g[[0, 0]];
                let dx = Matrix::from_shape_fn((w.len(), 1), |(i, _)| w[i] * gs);
                acc(*x, dx);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn adaptive_range(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = (i * size) / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows_inplace(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn sq_dist_matrix(x: ArrayView2<f64>, p: ArrayView2<f64>) -> Matrix {
    assert_eq!(x.ncols(), p.ncols(), "sq_dist dim mismatch");
    let mut out = Matrix::zeros((x.nrows(), p.nrows()));
    for (i, xr) in x.rows().into_iter().enumerate() {
        for (j, pr) in p.rows().into_iter().enumerate() {
            out[[i, j]] = xr
                .iter()
                .zip(pr.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks the analytic gradient of `build(leaves) -> scalar` against
    /// central differences for every leaf entry.
    fn check_grad(leaves: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient");
            for idx in 0..leaf.len() {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let mut plus = leaves.clone();
                plus[li][[r, c]] += h;
                let mut minus = leaves.clone();
                minus[li][[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - fd).abs() / (1e-6 + a.abs().max(fd.abs()));
                assert!(err < 1e-5, "leaf {li} [{r},{c}]: analytic {a} vs fd {fd}");
            }
        }
    }

    fn sum_all(g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).len();
        let cols = g.value(x).ncols();
        let w = Matrix::from_shape_fn((n / cols, cols), |(r, c)| 0.3 + 0.1 * ((r * 7 + c * 3) % 5) as f64);
        let rows = g.row_dot(x, w);
        let len = g.value(rows).nrows();
        g.weighted_sum(rows, vec![1.0; len])
    }

    #[test]
    fn matmul_add_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grad(
            vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 2), rand_matrix(&mut rng, 1, 2)],
            |g, v| {
                let h = g.linear(v[0], v[1], v[2]);
                let h = g.relu(h);
                let h = g.scale(h, 1.7);
                sum_all(g, h)
            },
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            vec![rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 1, 5), rand_matrix(&mut rng, 1, 5)],
            |g, v| {
                let h = g.layer_norm(v[0], v[1], v[2], 1e-5);
                sum_all(g, h)
            },
        );
    }

    #[test]
    fn im2col_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ImageGeom { batch: 2, height: 5, width: 4, channels: 2 };
        let win = Window { kernel: 3, stride: 2, padding: 1 };
        check_grad(vec![rand_matrix(&mut rng, geom.rows(), 2)], move |g, v| {
            let cols = g.im2col(v[0], geom, win);
            sum_all(g, cols)
        });
        check_grad(vec![rand_matrix(&mut rng, geom.rows(), 2)], move |g, v| {
            let p = g.max_pool(v[0], geom, win);
            sum_all(g, p)
        });
        check_grad(vec![rand_matrix(&mut rng, geom.rows(), 2)], move |g, v| {
            let p = g.avg_pool_to(v[0], geom, 3);
            sum_all(g, p)
        });
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = AttnShape { batch: 2, heads: 2, query_len: 3, key_len: 4 };
        check_grad(
            vec![rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 8, 4), rand_matrix(&mut rng, 8, 4)],
            move |g, v| {
                let o = g.attention(v[0], v[1], v[2], shape);
                sum_all(g, o)
            },
        );
    }

    #[test]
    fn gather_concat_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = Matrix::from_shape_vec((3, 3), vec![0.3, 0.7, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        check_grad(
            vec![rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 3, 6)],
            move |g, v| {
                let map = Rc::new(vec![(0, 1), (1, 0), (0, 1)]);
                let x = g.gather_rows(&[v[0], v[1]], map);
                let x = g.concat_cols(x, x);
                let d = g.sq_dist(x, v[2]);
                let logits = g.scale(d, -0.5);
                let ce = g.soft_cross_entropy(logits, targets.clone());
                let mse = g.row_dot(d, targets.clone());
                let a = g.weighted_sum(ce, vec![0.2, 0.5, 0.3]);
                let b = g.weighted_sum(mse, vec![0.1, 0.1, 0.1]);
                g.add(a, b)
            },
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::ones((1, 1)));
        let b = g.leaf(Matrix::ones((1, 1)));
        let c = g.matmul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 1.0);
    }
}
