//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. A tape borrows the [`ParamStore`] it reads
//! parameters from; each parameter gets at most one node per tape, and its
//! gradient is reported by [`ParamId`].

use super::gemm::{matmul, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2D convolution over a `C × H × W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

type VjpFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar output whose gradient w.r.t. `input` was computed eagerly.
    ScalarGrad { input: Var, grad: Vec<f64> },
    /// Arbitrary differentiable map with a closure VJP `(upstream, input) -> grad`.
    Custom { input: Var, vjp: VjpFn },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot => *slot = Some(t),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Copies the `cols`-wide column block starting at `offset` out of an `n × stride` matrix.
fn take_block(src: &[f64], n: usize, stride: usize, offset: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * cols);
    for i in 0..n {
        out.extend_from_slice(&src[i * stride + offset..i * stride + offset + cols]);
    }
    out
}

fn put_block(dst: &mut [f64], n: usize, stride: usize, offset: usize, cols: usize, src: &[f64]) {
    for i in 0..n {
        dst[i * stride + offset..i * stride + offset + cols]
            .copy_from_slice(&src[i * cols..(i + 1) * cols]);
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(id), ..
            } => self.params.get(*id),
            Node { value, .. } => value.as_ref().expect("node value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x · w + b` with `x: n×k`, `w: k×m`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), k, "linear: input width {} vs weight rows {}", k, wv.rows());
        let m = wv.cols();
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), m, "linear: bias width");
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        matmul(n, k, m, xv.data(), wv.data(), &mut out);
        self.push(Op::Linear { x, w, b }, Tensor::matrix(n, m, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add: size mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(Op::Add(a, b), out)
    }

    /// Adds a length-`m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let m = xv.cols();
        assert_eq!(rv.len(), m, "add_row: width mismatch");
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(m) {
            chunk.iter_mut().zip(rv.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::from_vec(xv.shape(), data).unwrap();
        self.push(Op::AddRow { x, row }, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        self.push(Op::Scale(x, c), out)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(Op::Gelu(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    /// Row-wise layer normalization with affine parameters of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d, "layer_norm: gamma width");
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `n × 3d` holding queries, keys and values side by side; the
    /// result is the `n × d` concatenation of the head outputs.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let n = v.rows();
        assert_eq!(v.cols() % (3 * heads), 0, "attention: width not divisible");
        let d = v.cols() / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * n];
        for h in 0..heads {
            let q = take_block(v.data(), n, 3 * d, h * dh, dh);
            let k = take_block(v.data(), n, 3 * d, d + h * dh, dh);
            let vv = take_block(v.data(), n, 3 * d, 2 * d + h * dh, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            matmul_nt(n, dh, n, &q, &k, p);
            for row in p.chunks_exact_mut(n) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let mut o = vec![0.0; n * dh];
            matmul(n, n, dh, p, &vv, &mut o);
            put_block(&mut out, n, d, h * dh, dh, &o);
        }
        self.push(Op::Attention { qkv, heads, probs }, Tensor::matrix(n, d, out))
    }

    /// Max over consecutive blocks of `k` rows: `(G·k) × d → G × d`.
    ///
    /// Ties route the gradient to the first row of the block attaining the max.
    pub fn max_pool_rows(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        assert!(k > 0 && rows % k == 0, "max_pool_rows: rows not divisible by k");
        let groups = rows / k;
        let mut out = vec![f64::NEG_INFINITY; groups * d];
        let mut argmax = vec![0usize; groups * d];
        for g in 0..groups {
            for r in 0..k {
                let src = xv.row(g * k + r);
                for j in 0..d {
                    if src[j] > out[g * d + j] {
                        out[g * d + j] = src[j];
                        argmax[g * d + j] = g * k + r;
                    }
                }
            }
        }
        self.push(Op::MaxPool { x, argmax }, Tensor::matrix(groups, d, out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows: width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, cols, data))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::matrix(idx.len(), cols, data),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.push(Op::Reshape(x), out)
    }

    /// 2D convolution of a `C × H × W` input (any shape with matching size).
    ///
    /// Weights are `c_out × (c_in·k·k)`, bias has `c_out` entries; the output
    /// has shape `[c_out, out_h, out_w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), geom.c_in * geom.height * geom.width, "conv2d: input size");
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let patch = geom.patch();
        let cols = im2col(xv, &geom);
        let mut out = vec![0.0; geom.c_out * ho * wo];
        let bv = self.value(b).data();
        for (c, chunk) in out.chunks_exact_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bv[c]);
        }
        matmul(geom.c_out, patch, ho * wo, self.value(w).data(), &cols, &mut out);
        let out = Tensor::from_vec(&[geom.c_out, ho, wo], out).unwrap();
        self.push(Op::Conv2d { x, w, b, geom, cols }, out)
    }

    /// Mean over everything but the leading (channel) axis: `[C, ...] → 1 × C`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let per = xv.len() / c;
        let data = xv
            .data()
            .chunks_exact(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        self.push(Op::AvgPool(x), Tensor::matrix(1, c, data))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_vec(xv.shape(), data).unwrap();
        self.push(Op::L2Normalize { x, norms }, out)
    }

    /// `Σ wᵢ sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms
            .iter()
            .map(|(t, w)| w * self.value(*t).data()[0])
            .sum();
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(v))
    }

    /// Scalar node with an eagerly computed gradient w.r.t. `input`.
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(input).len(), "scalar_with_grad: gradient size");
        self.push(Op::ScalarGrad { input, grad }, Tensor::scalar(value))
    }

    /// Node computed outside the tape with a closure VJP `(upstream, input) -> grad`.
    pub fn custom(
        &mut self,
        input: Var,
        value: Tensor,
        vjp: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Var {
        self.push(
            Op::Custom {
                input,
                vjp: Box::new(vjp),
            },
            value,
        )
    }

    /// Accumulates gradients from `(node, cotangent)` seeds.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        for (v, t) in seeds {
            assert_eq!(t.len(), self.value(*v).len(), "seed size mismatch");
            acc(&mut grads, *v, t.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut pgrads);
            grads[i] = Some(g);
        }
        Gradients {
            vars: grads,
            params: pgrads,
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Option<Tensor>],
    ) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => match &mut pgrads[id.0] {
                Some(p) => p.add_assign(g),
                slot => *slot = Some(g.clone()),
            },
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                let mut dx = vec![0.0; n * k];
                matmul_nt(n, m, k, gd, wv.data(), &mut dx);
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                let mut dw = vec![0.0; k * m];
                matmul_tn(k, n, m, xv.data(), gd, &mut dw);
                acc(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for row in gd.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    let shape = self.value(*b).shape().to_vec();
                    acc(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                acc(grads, *a, Tensor::from_vec(&sa, gd.to_vec()).unwrap());
                acc(grads, *b, Tensor::from_vec(&sb, gd.to_vec()).unwrap());
            }
            Op::AddRow { x, row } => {
                let rv = self.value(*row);
                let m = rv.len();
                let mut dr = vec![0.0; m];
                for chunk in gd.chunks_exact(m) {
                    dr.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                }
                acc(grads, *x, g.clone());
                acc(grads, *row, Tensor::from_vec(rv.shape(), dr).unwrap());
            }
            Op::Scale(x, c) => acc(grads, *x, g.scaled(*c)),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(gd).map(|(v, g)| g * gelu_grad(*v)).collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                let d = gam.len();
                let n = rstd.len();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                        let dxh = gr[j] * gam.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam.data()[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                acc(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                acc(grads, *gamma, Tensor::from_vec(gam.shape(), dg).unwrap());
                let bs = self.value(*beta).shape().to_vec();
                acc(grads, *beta, Tensor::from_vec(&bs, db).unwrap());
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let n = v.rows();
                let d = v.cols() / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; n * 3 * d];
                for h in 0..*heads {
                    let q = take_block(v.data(), n, 3 * d, h * dh, dh);
                    let k = take_block(v.data(), n, 3 * d, d + h * dh, dh);
                    let vv = take_block(v.data(), n, 3 * d, 2 * d + h * dh, dh);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let dout = take_block(gd, n, d, h * dh, dh);
                    let mut dp = vec![0.0; n * n];
                    matmul_nt(n, dh, n, &dout, &vv, &mut dp);
                    let mut dv = vec![0.0; n * dh];
                    matmul_tn(n, n, dh, p, &dout, &mut dv);
                    // softmax backward, folded with the score scale
                    let mut ds = vec![0.0; n * n];
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dpr = &dp[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ds[r * n + c] = pr[c] * (dpr[c] - dot) * scale;
                        }
                    }
                    let mut dq = vec![0.0; n * dh];
                    matmul(n, n, dh, &ds, &k, &mut dq);
                    let mut dk = vec![0.0; n * dh];
                    matmul_tn(n, n, dh, &ds, &q, &mut dk);
                    put_block(&mut dqkv, n, 3 * d, h * dh, dh, &dq);
                    put_block(&mut dqkv, n, 3 * d, d + h * dh, dh, &dk);
                    put_block(&mut dqkv, n, 3 * d, 2 * d + h * dh, dh, &dv);
                }
                acc(grads, *qkv, Tensor::from_vec(v.shape(), dqkv).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src * d + o % d] += gd[o];
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    let t = Tensor::from_vec(pv.shape(), gd[offset..offset + len].to_vec()).unwrap();
                    acc(grads, *p, t);
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[i * cols + j] += gd[o * cols + j];
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(grads, *x, Tensor::from_vec(&s, gd.to_vec()).unwrap());
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let patch = geom.patch();
                let wv = self.value(*w);
                let mut dw = vec![0.0; geom.c_out * patch];
                matmul_nt(geom.c_out, ho * wo, patch, gd, cols, &mut dw);
                acc(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                let db: Vec<f64> = gd.chunks_exact(ho * wo).map(|c| c.iter().sum()).collect();
                let bs = self.value(*b).shape().to_vec();
                acc(grads, *b, Tensor::from_vec(&bs, db).unwrap());
                let mut dcols = vec![0.0; patch * ho * wo];
                matmul_tn(patch, geom.c_out, ho * wo, wv.data(), gd, &mut dcols);
                let dx = col2im(&dcols, geom);
                let xs = self.value(*x).shape().to_vec();
                acc(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
            }
            Op::AvgPool(x) => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let per = xv.len() / c;
                let mut dx = vec![0.0; xv.len()];
                for (ch, chunk) in dx.chunks_exact_mut(per).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = gd[ch] / per as f64);
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::L2Normalize { x, norms } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                acc(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
            }
            Op::WeightedSum(terms) => {
                for (t, w) in terms {
                    let s = self.value(*t).shape().to_vec();
                    acc(grads, *t, Tensor::from_vec(&s, vec![w * gd[0]]).unwrap());
                }
            }
            Op::ScalarGrad { input, grad } => {
                let s = self.value(*input).shape().to_vec();
                let data = grad.iter().map(|v| v * gd[0]).collect();
                acc(grads, *input, Tensor::from_vec(&s, data).unwrap());
            }
            Op::Custom { input, vjp } => {
                let iv = self.value(*input);
                let dx = vjp(gd, iv.data());
                acc(grads, *input, Tensor::from_vec(iv.shape(), dx).unwrap());
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![0.0; g.patch() * ho * wo];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * wo + ox] =
                            x[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut x = vec![0.0; g.c_in * g.height * g.width];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(Σ c ⊙ f(params))/dparams against central differences.
    fn check(params: ParamStore, build: impl Fn(&mut Tape) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (cot, grads) = {
            let mut tape = Tape::new(&params);
            let out = build(&mut tape);
            let shape = tape.value(out).shape().to_vec();
            let cot = rand_tensor(&mut rng, &shape);
            let g = tape.backward(&[(out, cot.clone())]).into_params();
            (cot, g)
        };
        let objective = |p: &ParamStore| {
            let mut tape = Tape::new(p);
            let out = build(&mut tape);
            tape.value(out)
                .data()
                .iter()
                .zip(cot.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for id in params.ids() {
            let analytic = grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
            for j in 0..params.get(id).len() {
                let mut plus = params.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = params.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{j}]: analytic {a} vs fd {fd}", params.name(id));
            }
        }
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_tensor(&mut rng, &[4, 3]), false);
        let w = ps.add("w", rand_tensor(&mut rng, &[3, 5]), true);
        let b = ps.add("b", rand_tensor(&mut rng, &[5]), false);
        let g = ps.add("g", rand_tensor(&mut rng, &[5]), false);
        let be = ps.add("be", rand_tensor(&mut rng, &[5]), false);
        check(ps, |t| {
            let (x, w, b, g, be) = (t.param(x), t.param(w), t.param(b), t.param(g), t.param(be));
            let y = t.linear(x, w, Some(b));
            let y = t.gelu(y);
            let y = t.layer_norm(y, g, be);
            let r = t.relu(y);
            t.add(r, y)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let qkv = ps.add("qkv", rand_tensor(&mut rng, &[5, 12]), false);
        check(ps, |t| {
            let v = t.param(qkv);
            t.attention(v, 2)
        });
    }

    #[test]
    fn pooling_gather_concat_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_tensor(&mut rng, &[6, 4]), false);
        let r = ps.add("r", rand_tensor(&mut rng, &[4]), false);
        check(ps, |t| {
            let (x, r) = (t.param(x), t.param(r));
            let p = t.max_pool_rows(x, 3);
            let g = t.gather_rows(x, &[5, 0, 5]);
            let c = t.concat_rows(&[p, g]);
            let c = t.add_row(c, r);
            let c = t.scale(c, 0.7);
            let n = t.l2_normalize_rows(c);
            t.reshape(n, &[20])
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeom {
            c_in: 2,
            height: 5,
            width: 6,
            c_out: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_tensor(&mut rng, &[2, 5, 6]), false);
        let w = ps.add("w", rand_tensor(&mut rng, &[3, 18]), true);
        let b = ps.add("b", rand_tensor(&mut rng, &[3]), false);
        check(ps, |t| {
            let (x, w, b) = (t.param(x), t.param(w), t.param(b));
            let y = t.conv2d(x, w, b, geom);
            let p = t.avg_pool(y);
            let y2 = t.reshape(y, &[9, 3]);
            let c = t.concat_rows(&[p, y2]);
            t.relu(c)
        });
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom {
            c_in: 1,
            height: 4,
            width: 4,
            c_out: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_tensor(&mut rng, &[1, 4, 4]), false);
        let w = ps.add("w", rand_tensor(&mut rng, &[1, 9]), true);
        let b = ps.add("b", Tensor::from_vec(&[1], vec![0.25]).unwrap(), false);
        let mut t = Tape::new(&ps);
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv2d(xv, wv, bv, geom);
        let xd = ps.get(x).data();
        let wd = ps.get(w).data();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.25;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            s += wd[ky * 3 + kx] * xd[iy as usize * 4 + ix as usize];
                        }
                    }
                }
                assert!((t.value(y).data()[oy * 4 + ox] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_get_a_single_node() {
        let mut ps = ParamStore::new();
        let p = ps.add("p", Tensor::scalar(2.0), false);
        let mut t = Tape::new(&ps);
        let a = t.param(p);
        let b = t.param(p);
        assert_eq!(a, b);
        let s = t.weighted_sum(&[(a, 3.0), (b, 4.0)]);
        let g = t.backward(&[(s, Tensor::scalar(1.0))]);
        assert_eq!(g.param(p).unwrap().data(), &[7.0]);
    }
}
