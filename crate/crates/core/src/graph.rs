//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A `Graph` records every operation; `backward` walks the tape in reverse
//! and accumulates gradients for leaves created with `requires_grad`.
//! Thread-parallelism is confined to independent output rows, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

// Work threshold (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Silu(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    BmmNT(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SoftmaxLast(NodeId),
    LayerNormLast {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    AddLast {
        x: NodeId,
        b: NodeId,
    },
    MulLast {
        x: NodeId,
        b: NodeId,
    },
    MulCol {
        x: NodeId,
        m: NodeId,
    },
    BroadcastRows {
        x: NodeId,
        rows: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(NodeId),
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    PoolCorr {
        x: NodeId,
        from: (usize, usize),
        to: (usize, usize),
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ks = S::of_f64(k);
        let v = self.value(a).scale(ks);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let ks = S::of_f64(k);
        let v = self.value(a).map(|x| x + ks);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, k), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid_op(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        mm(self.value(a).as_slice(), self.value(b).as_slice(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::Matmul(a, b), rg)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul_nt lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul_nt rhs must be 2-d");
        assert_eq!(sa[1], sb[1], "matmul_nt inner dims: {sa:?} x {sb:?}^T");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::zero(); m * n];
        mm_nt(self.value(a).as_slice(), self.value(b).as_slice(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNT(a, b), rg)
    }

    /// Batched `[g,m,k] x [g,k,n] -> [g,m,n]`
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        assert_eq!(sa[2], sb[1], "bmm inner dims");
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); g * m * n];
        {
            let av = self.value(a).as_slice();
            let bv = self.value(b).as_slice();
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
                mm(&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n], m, k, n, o);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[g, m, n], out), Op::Bmm(a, b), rg)
    }

    /// Batched `[g,m,k] x [g,n,k]^T -> [g,m,n]`
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm_nt lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm_nt rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm_nt batch dims");
        assert_eq!(sa[2], sb[2], "bmm_nt inner dims");
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![S::zero(); g * m * n];
        {
            let av = self.value(a).as_slice();
            let bv = self.value(b).as_slice();
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
                mm_nt(&av[i * m * k..(i + 1) * m * k], &bv[i * n * k..(i + 1) * n * k], m, k, n, o);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[g, m, n], out), Op::BmmNT(a, b), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = self.value(a).permuted(axes);
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        assert!(axis < rank, "concat axis out of range");
        let mut cat_dim = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat shape mismatch on axis {d}");
                }
            }
            cat_dim += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = cat_dim;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = self.value(p).as_slice();
            for o in 0..outer {
                let dst_start = (o * cat_dim + offset) * inner;
                let src_start = o * s_axis * inner;
                out[dst_start..dst_start + s_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + s_axis * inner]);
            }
            offset += s_axis;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Concat(parts.to_vec(), axis),
            rg,
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "slice axis out of range");
        assert!(start + len <= shape[axis], "slice out of bounds");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).as_slice();
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Slice { x, axis, start, len },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.value(a).as_slice().iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(
            Tensor::scalar(s / S::of_f64(n as f64)),
            Op::MeanAll(a),
            rg,
        )
    }

    /// Row-wise softmax over the last axis (numerically stabilized).
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().expect("softmax on 0-d tensor");
        let src = self.value(a).as_slice();
        let mut out = vec![S::zero(); src.len()];
        for (row_in, row_out) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mx = row_in.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut z = S::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / z;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, out), Op::SoftmaxLast(a), rg)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm_last(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("layer_norm on 0-d tensor");
        assert_eq!(self.shape(gamma), &[c], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[c], "layer_norm beta shape");
        let eps = S::of_f64(LN_EPS);
        let src = self.value(x).as_slice();
        let g = self.value(gamma).as_slice().to_vec();
        let b = self.value(beta).as_slice().to_vec();
        let mut out = vec![S::zero(); src.len()];
        let cf = S::of_f64(c as f64);
        for (row_in, row_out) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row_in.iter().fold(S::zero(), |a, &x| a + x) / cf;
            let var = row_in
                .iter()
                .fold(S::zero(), |a, &x| a + (x - mean) * (x - mean))
                / cf;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..c {
                row_out[j] = (row_in[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNormLast { x, gamma, beta },
            rg,
        )
    }

    /// Broadcast-add a `[c]` vector over the last axis.
    pub fn add_last(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(self.shape(b), &[c], "add_last bias shape");
        let bv = self.value(b).as_slice().to_vec();
        let src = self.value(x).as_slice();
        let mut out = vec![S::zero(); src.len()];
        for (row_in, row_out) in src.chunks(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                row_out[j] = row_in[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::from_vec(&shape, out), Op::AddLast { x, b }, rg)
    }

    /// Broadcast-multiply a `[c]` vector over the last axis.
    pub fn mul_last(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(self.shape(b), &[c], "mul_last shape");
        let bv = self.value(b).as_slice().to_vec();
        let src = self.value(x).as_slice();
        let mut out = vec![S::zero(); src.len()];
        for (row_in, row_out) in src.chunks(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                row_out[j] = row_in[j] * bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::from_vec(&shape, out), Op::MulLast { x, b }, rg)
    }

    /// Multiply each row of `x: [r,c]` by the matching entry of `m: [r]`.
    pub fn mul_col(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "mul_col expects 2-d input");
        let (r, c) = (shape[0], shape[1]);
        assert_eq!(self.shape(m), &[r], "mul_col mask shape");
        let mv = self.value(m).as_slice().to_vec();
        let src = self.value(x).as_slice();
        let mut out = vec![S::zero(); src.len()];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] * mv[i];
            }
        }
        let rg = self.rg(x) || self.rg(m);
        self.push(Tensor::from_vec(&shape, out), Op::MulCol { x, m }, rg)
    }

    /// Tile a `[c]` vector into `[rows, c]`.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 1, "broadcast_rows expects 1-d input");
        let c = s[0];
        let src = self.value(x).as_slice();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[rows, c], out),
            Op::BroadcastRows { x, rows },
            rg,
        )
    }

    /// 2-d convolution, NCHW layout, square kernel semantics from the weight shape.
    /// `x: [n,cin,h,w]`, `w: [cout,cin,kh,kw]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d bias shape");
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let l = oh * ow;
        let mut out = vec![S::zero(); n * cout * l];
        {
            let xv = self.value(x).as_slice();
            let wv = self.value(w).as_slice();
            let bv = self.value(b).as_slice();
            let run = |(bi, o): (usize, &mut [S])| {
                let mut col = vec![S::zero(); ckk * l];
                im2col(
                    &xv[bi * cin * h * wdt..(bi + 1) * cin * h * wdt],
                    cin,
                    h,
                    wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut col,
                );
                mm(wv, &col, cout, ckk, l, o);
                for c in 0..cout {
                    for p in 0..l {
                        o[c * l + p] += bv[c];
                    }
                }
            };
            if n * cout * ckk * l > PAR_THRESHOLD {
                out.par_chunks_mut(cout * l).enumerate().for_each(run);
            } else {
                out.chunks_mut(cout * l).enumerate().for_each(run);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out),
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        )
    }

    /// Nearest-neighbor x2 spatial upsampling, NCHW.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x input must be 4-d");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).as_slice();
        let mut out = vec![S::zero(); n * c * 4 * h * w];
        for img in 0..n * c {
            let sbase = img * h * w;
            let dbase = img * 4 * h * w;
            for i in 0..h {
                for j in 0..w {
                    let v = src[sbase + i * w + j];
                    let d0 = dbase + (2 * i) * 2 * w + 2 * j;
                    let d1 = dbase + (2 * i + 1) * 2 * w + 2 * j;
                    out[d0] = v;
                    out[d0 + 1] = v;
                    out[d1] = v;
                    out[d1 + 1] = v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            rg,
        )
    }

    /// Non-overlapping k x k average pooling, NCHW.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "avg_pool2d input must be 4-d");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(k > 0 && h % k == 0 && w % k == 0, "avg_pool2d size {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).as_slice();
        let inv = S::of_f64(1.0 / (k * k) as f64);
        let mut out = vec![S::zero(); n * c * oh * ow];
        for img in 0..n * c {
            let sbase = img * h * w;
            let dbase = img * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = S::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            acc += src[sbase + (oi * k + di) * w + oj * k + dj];
                        }
                    }
                    out[dbase + oi * ow + oj] = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::AvgPool2d { x, k },
            rg,
        )
    }

    /// Resample a correspondence matrix `[(h w), (h w)]` to `[(h' w'), (h' w')]`,
    /// average-pooling when shrinking and nearest-upsampling when growing,
    /// applied to both spatial index pairs.
    pub fn pool_corr(&mut self, x: NodeId, from: (usize, usize), to: (usize, usize)) -> NodeId {
        let (h, w) = from;
        let (h2, w2) = to;
        assert_eq!(self.shape(x), &[h * w, h * w], "pool_corr input shape");
        let v = pool_corr_forward(self.value(x).as_slice(), from, to);
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[h2 * w2, h2 * w2], v),
            Op::PoolCorr { x, from, to },
            rg,
        )
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads<S> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(S::one()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].clone() else { continue };
            self.accumulate(id, &gout, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, id: NodeId, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let add_to = |grads: &mut [Option<Tensor<S>>], target: NodeId, g: Tensor<S>| {
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.clone());
                }
                if self.rg(*b) {
                    add_to(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.clone());
                }
                if self.rg(*b) {
                    add_to(grads, *b, gout.scale(-S::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.mul(self.value(*b)));
                }
                if self.rg(*b) {
                    add_to(grads, *b, gout.mul(self.value(*a)));
                }
            }
            Op::Scale(a, k) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.scale(S::of_f64(*k)));
                }
            }
            Op::AddScalar(a, _) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.clone());
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let g = self.value(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (S::one() + x * (S::one() - s))
                    });
                    add_to(grads, *a, gout.mul(&g));
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = &self.nodes[id].value;
                    let g = y.map(|s| s * (S::one() - s));
                    add_to(grads, *a, gout.mul(&g));
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    // dA = dC . B^T
                    let mut da = vec![S::zero(); m * k];
                    mm_nt(gout.as_slice(), self.value(*b).as_slice(), m, n, k, &mut da);
                    add_to(grads, *a, Tensor::from_vec(&[m, k], da));
                }
                if self.rg(*b) {
                    // dB = A^T . dC
                    let mut db = vec![S::zero(); k * n];
                    mm_tn(self.value(*a).as_slice(), gout.as_slice(), m, k, n, &mut db);
                    add_to(grads, *b, Tensor::from_vec(&[k, n], db));
                }
            }
            Op::MatmulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.rg(*a) {
                    // dA = dC . B
                    let mut da = vec![S::zero(); m * k];
                    mm(gout.as_slice(), self.value(*b).as_slice(), m, n, k, &mut da);
                    add_to(grads, *a, Tensor::from_vec(&[m, k], da));
                }
                if self.rg(*b) {
                    // dB = dC^T . A
                    let mut db = vec![S::zero(); n * k];
                    mm_tn(gout.as_slice(), self.value(*a).as_slice(), m, n, k, &mut db);
                    add_to(grads, *b, Tensor::from_vec(&[n, k], db));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.rg(*a) {
                    let mut da = vec![S::zero(); g * m * k];
                    let bv = self.value(*b).as_slice();
                    let gv = gout.as_slice();
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, o)| {
                        mm_nt(&gv[i * m * n..(i + 1) * m * n], &bv[i * k * n..(i + 1) * k * n], m, n, k, o);
                    });
                    add_to(grads, *a, Tensor::from_vec(&[g, m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); g * k * n];
                    let av = self.value(*a).as_slice();
                    let gv = gout.as_slice();
                    db.par_chunks_mut(k * n).enumerate().for_each(|(i, o)| {
                        mm_tn(&av[i * m * k..(i + 1) * m * k], &gv[i * m * n..(i + 1) * m * n], m, k, n, o);
                    });
                    add_to(grads, *b, Tensor::from_vec(&[g, k, n], db));
                }
            }
            Op::BmmNT(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![S::zero(); g * m * k];
                    let bv = self.value(*b).as_slice();
                    let gv = gout.as_slice();
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, o)| {
                        mm(&gv[i * m * n..(i + 1) * m * n], &bv[i * n * k..(i + 1) * n * k], m, n, k, o);
                    });
                    add_to(grads, *a, Tensor::from_vec(&[g, m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); g * n * k];
                    let av = self.value(*a).as_slice();
                    let gv = gout.as_slice();
                    db.par_chunks_mut(n * k).enumerate().for_each(|(i, o)| {
                        mm_tn(&gv[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k], m, n, k, o);
                    });
                    add_to(grads, *b, Tensor::from_vec(&[g, n, k], db));
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    add_to(grads, *a, gout.reshaped(self.shape(*a)));
                }
            }
            Op::Permute(a, axes) => {
                if self.rg(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    add_to(grads, *a, gout.permuted(&inv));
                }
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let out_shape = self.shape(id).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let cat_dim = out_shape[axis];
                let gv = gout.as_slice();
                let mut offset = 0usize;
                for &p in parts {
                    let s_axis = self.shape(p)[axis];
                    if self.rg(p) {
                        let mut gp = vec![S::zero(); outer * s_axis * inner];
                        for o in 0..outer {
                            let src_start = (o * cat_dim + offset) * inner;
                            gp[o * s_axis * inner..(o + 1) * s_axis * inner]
                                .copy_from_slice(&gv[src_start..src_start + s_axis * inner]);
                        }
                        let mut shp = self.shape(p).to_vec();
                        shp[axis] = s_axis;
                        add_to(grads, p, Tensor::from_vec(&shp, gp));
                    }
                    offset += s_axis;
                }
            }
            Op::Slice { x, axis, start, len } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut gx = vec![S::zero(); shape.iter().product()];
                    let gv = gout.as_slice();
                    for o in 0..outer {
                        let dst_start = (o * shape[*axis] + start) * inner;
                        gx[dst_start..dst_start + len * inner]
                            .copy_from_slice(&gv[o * len * inner..(o + 1) * len * inner]);
                    }
                    add_to(grads, *x, Tensor::from_vec(&shape, gx));
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let g = gout.item();
                    add_to(grads, *a, Tensor::full(self.shape(*a), g));
                }
            }
            Op::MeanAll(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).numel();
                    let g = gout.item() / S::of_f64(n as f64);
                    add_to(grads, *a, Tensor::full(self.shape(*a), g));
                }
            }
            Op::SoftmaxLast(a) => {
                if self.rg(*a) {
                    let y = self.nodes[id].value.as_slice();
                    let gv = gout.as_slice();
                    let shape = self.shape(*a).to_vec();
                    let c = *shape.last().unwrap();
                    let mut gx = vec![S::zero(); y.len()];
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gv[r * c..(r + 1) * c];
                        let dot = yr
                            .iter()
                            .zip(gr.iter())
                            .fold(S::zero(), |acc, (&yy, &gg)| acc + yy * gg);
                        for j in 0..c {
                            gx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_to(grads, *a, Tensor::from_vec(&shape, gx));
                }
            }
            Op::LayerNormLast { x, gamma, beta } => {
                let shape = self.shape(*x).to_vec();
                let c = *shape.last().unwrap();
                let rows = shape.iter().product::<usize>() / c;
                let xv = self.value(*x).as_slice();
                let g = self.value(*gamma).as_slice();
                let gv = gout.as_slice();
                let eps = S::of_f64(LN_EPS);
                let cf = S::of_f64(c as f64);
                let mut gx = vec![S::zero(); xv.len()];
                let mut ggamma = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &gv[r * c..(r + 1) * c];
                    let mean = xr.iter().fold(S::zero(), |a, &v| a + v) / cf;
                    let var = xr.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / cf;
                    let inv = S::one() / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_gy = S::zero();
                    let mut sum_gy_xhat = S::zero();
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let gyj = gr[j] * g[j];
                        sum_gy += gyj;
                        sum_gy_xhat += gyj * xhat;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                    }
                    let inv_c = inv / cf;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let gyj = gr[j] * g[j];
                        gx[r * c + j] = inv_c * (cf * gyj - sum_gy - xhat * sum_gy_xhat);
                    }
                }
                if self.rg(*x) {
                    add_to(grads, *x, Tensor::from_vec(&shape, gx));
                }
                if self.rg(*gamma) {
                    add_to(grads, *gamma, Tensor::from_vec(&[c], ggamma));
                }
                if self.rg(*beta) {
                    add_to(grads, *beta, Tensor::from_vec(&[c], gbeta));
                }
            }
            Op::AddLast { x, b } => {
                let c = *self.shape(*b).first().unwrap();
                if self.rg(*x) {
                    add_to(grads, *x, gout.clone());
                }
                if self.rg(*b) {
                    let gv = gout.as_slice();
                    let mut gb = vec![S::zero(); c];
                    for row in gv.chunks(c) {
                        for j in 0..c {
                            gb[j] += row[j];
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[c], gb));
                }
            }
            Op::MulLast { x, b } => {
                let c = *self.shape(*b).first().unwrap();
                let bv = self.value(*b).as_slice();
                if self.rg(*x) {
                    let gv = gout.as_slice();
                    let mut gx = vec![S::zero(); gv.len()];
                    for (rin, rout) in gv.chunks(c).zip(gx.chunks_mut(c)) {
                        for j in 0..c {
                            rout[j] = rin[j] * bv[j];
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(self.shape(*x), gx));
                }
                if self.rg(*b) {
                    let gv = gout.as_slice();
                    let xv = self.value(*x).as_slice();
                    let mut gb = vec![S::zero(); c];
                    for (rg_, rx) in gv.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            gb[j] += rg_[j] * rx[j];
                        }
                    }
                    add_to(grads, *b, Tensor::from_vec(&[c], gb));
                }
            }
            Op::MulCol { x, m } => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mv = self.value(*m).as_slice();
                let gv = gout.as_slice();
                if self.rg(*x) {
                    let mut gx = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gv[i * c + j] * mv[i];
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&s, gx));
                }
                if self.rg(*m) {
                    let xv = self.value(*x).as_slice();
                    let mut gm = vec![S::zero(); r];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i] += gv[i * c + j] * xv[i * c + j];
                        }
                    }
                    add_to(grads, *m, Tensor::from_vec(&[r], gm));
                }
            }
            Op::BroadcastRows { x, rows } => {
                if self.rg(*x) {
                    let c = self.shape(*x)[0];
                    let gv = gout.as_slice();
                    let mut gx = vec![S::zero(); c];
                    for r in 0..*rows {
                        for j in 0..c {
                            gx[j] += gv[r * c + j];
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&[c], gx));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(id, *x, *w, *b, *stride, *pad, gout, grads, add_to);
            }
            Op::Upsample2x(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x).to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let gv = gout.as_slice();
                    let mut gx = vec![S::zero(); n * c * h * w];
                    for img in 0..n * c {
                        let dbase = img * h * w;
                        let sbase = img * 4 * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let s0 = sbase + (2 * i) * 2 * w + 2 * j;
                                let s1 = sbase + (2 * i + 1) * 2 * w + 2 * j;
                                gx[dbase + i * w + j] = gv[s0] + gv[s0 + 1] + gv[s1] + gv[s1 + 1];
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&s, gx));
                }
            }
            Op::AvgPool2d { x, k } => {
                if self.rg(*x) {
                    let s = self.shape(*x).to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let k = *k;
                    let (oh, ow) = (h / k, w / k);
                    let gv = gout.as_slice();
                    let inv = S::of_f64(1.0 / (k * k) as f64);
                    let mut gx = vec![S::zero(); n * c * h * w];
                    for img in 0..n * c {
                        let sbase = img * oh * ow;
                        let dbase = img * h * w;
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let g = gv[sbase + oi * ow + oj] * inv;
                                for di in 0..k {
                                    for dj in 0..k {
                                        gx[dbase + (oi * k + di) * w + oj * k + dj] += g;
                                    }
                                }
                            }
                        }
                    }
                    add_to(grads, *x, Tensor::from_vec(&s, gx));
                }
            }
            Op::PoolCorr { x, from, to } => {
                if self.rg(*x) {
                    let g = pool_corr_backward(gout.as_slice(), *from, *to);
                    add_to(grads, *x, Tensor::from_vec(self.shape(*x), g));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        out_id: NodeId,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        add_to: impl Fn(&mut [Option<Tensor<S>>], NodeId, Tensor<S>),
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let os = self.shape(out_id).to_vec();
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let ckk = cin * kh * kw;
        let l = oh * ow;
        let gv = gout.as_slice();
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();

        if self.rg(b) {
            let mut gb = vec![S::zero(); cout];
            for bi in 0..n {
                for c in 0..cout {
                    let base = (bi * cout + c) * l;
                    for p in 0..l {
                        gb[c] += gv[base + p];
                    }
                }
            }
            add_to(grads, b, Tensor::from_vec(&[cout], gb));
        }

        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if !need_x && !need_w {
            return;
        }

        // Per-image partials, reduced in batch order for determinism.
        let partials: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..n)
            .into_par_iter()
            .map(|bi| {
                let mut col = vec![S::zero(); ckk * l];
                im2col(
                    &xv[bi * cin * h * wdt..(bi + 1) * cin * h * wdt],
                    cin,
                    h,
                    wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut col,
                );
                let gslice = &gv[bi * cout * l..(bi + 1) * cout * l];
                let dw = if need_w {
                    let mut dwb = vec![S::zero(); cout * ckk];
                    mm_nt(gslice, &col, cout, l, ckk, &mut dwb);
                    Some(dwb)
                } else {
                    None
                };
                let dx = if need_x {
                    let mut dcol = vec![S::zero(); ckk * l];
                    mm_tn(wv, gslice, cout, ckk, l, &mut dcol);
                    let mut dxb = vec![S::zero(); cin * h * wdt];
                    col2im(&dcol, cin, h, wdt, kh, kw, stride, pad, &mut dxb);
                    Some(dxb)
                } else {
                    None
                };
                (dw, dx)
            })
            .collect();

        if need_w {
            let mut gw = vec![S::zero(); cout * ckk];
            for (dw, _) in &partials {
                let dw = dw.as_ref().unwrap();
                for (a, &d) in gw.iter_mut().zip(dw.iter()) {
                    *a += d;
                }
            }
            add_to(grads, w, Tensor::from_vec(&ws, gw));
        }
        if need_x {
            let mut gx = vec![S::zero(); n * cin * h * wdt];
            for (bi, (_, dx)) in partials.iter().enumerate() {
                let dx = dx.as_ref().unwrap();
                gx[bi * cin * h * wdt..(bi + 1) * cin * h * wdt].copy_from_slice(dx);
            }
            add_to(grads, x, Tensor::from_vec(&xs, gx));
        }
    }
}

pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;

#[inline(always)]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `out[m,n] += A[m,k] . B[k,n]` (out must be zeroed by caller).
pub fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, orow): (usize, &mut [S])| {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += ail * bv;
            }
        }
    };
    if m * k * n > PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out[m,n] = A[m,k] . B[n,k]^T`
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, orow): (usize, &mut [S])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += *av * *bv;
            }
            *o = acc;
        }
    };
    if m * k * n > PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out[m,n] = A[r,m]^T . B[r,n]` (contraction over the leading axis).
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], r: usize, m: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, orow): (usize, &mut [S])| {
        for row in 0..r {
            let av = a[row * m + i];
            if av == S::zero() {
                continue;
            }
            let brow = &b[row * n..(row + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if r * m * n > PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [S],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let l = oh * ow;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        for d in dst[oi * ow..(oi + 1) * ow].iter_mut() {
                            *d = S::zero();
                        }
                        continue;
                    }
                    let src_base = c * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if jj < 0 || jj >= w as isize {
                            S::zero()
                        } else {
                            x[src_base + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [S],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let l = oh * ow;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_base = c * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[dst_base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn pool_corr_forward<S: Scalar>(
    x: &[S],
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
) -> Vec<S> {
    let map_h = AxisMap::new(h, h2);
    let map_w = AxisMap::new(w, w2);
    let mut out = vec![S::zero(); h2 * w2 * h2 * w2];
    for qa in 0..h2 {
        for qb in 0..w2 {
            for ra in 0..h2 {
                for rb in 0..w2 {
                    let mut acc = S::zero();
                    let mut cnt = 0usize;
                    for ia in map_h.sources(qa) {
                        for ib in map_w.sources(qb) {
                            for ja in map_h.sources(ra) {
                                for jb in map_w.sources(rb) {
                                    acc += x[(ia * w + ib) * h * w + (ja * w + jb)];
                                    cnt += 1;
                                }
                            }
                        }
                    }
                    out[(qa * w2 + qb) * h2 * w2 + (ra * w2 + rb)] =
                        acc / S::of_f64(cnt as f64);
                }
            }
        }
    }
    out
}

fn pool_corr_backward<S: Scalar>(
    gout: &[S],
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
) -> Vec<S> {
    let map_h = AxisMap::new(h, h2);
    let map_w = AxisMap::new(w, w2);
    let mut gx = vec![S::zero(); h * w * h * w];
    for qa in 0..h2 {
        for qb in 0..w2 {
            for ra in 0..h2 {
                for rb in 0..w2 {
                    let mut cnt = 0usize;
                    for ia in map_h.sources(qa) {
                        for ib in map_w.sources(qb) {
                            for ja in map_h.sources(ra) {
                                for jb in map_w.sources(rb) {
                                    let _ = (ia, ib, ja, jb);
                                    cnt += 1;
                                }
                            }
                        }
                    }
                    let g = gout[(qa * w2 + qb) * h2 * w2 + (ra * w2 + rb)]
                        / S::of_f64(cnt as f64);
                    for ia in map_h.sources(qa) {
                        for ib in map_w.sources(qb) {
                            for ja in map_h.sources(ra) {
                                for jb in map_w.sources(rb) {
                                    gx[(ia * w + ib) * h * w + (ja * w + jb)] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Maps an output axis index to the input indices it covers (pooling) or
/// the single input index it replicates (upsampling).
struct AxisMap {
    input: usize,
    output: usize,
}

impl AxisMap {
    fn new(input: usize, output: usize) -> Self {
        let (big, small) = if input >= output {
            (input, output)
        } else {
            (output, input)
        };
        assert!(
            small > 0 && big % small == 0 && (big / small).is_power_of_two(),
            "pool_corr: incompatible axis sizes {input} -> {output}"
        );
        AxisMap { input, output }
    }

    fn sources(&self, out_idx: usize) -> std::ops::Range<usize> {
        if self.input >= self.output {
            let f = self.input / self.output;
            out_idx * f..(out_idx + 1) * f
        } else {
            let f = self.output / self.input;
            let src = out_idx / f;
            src..src + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v)
    }

    #[test]
    fn matmul_known_values() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor(&[2, 2], vec![1., 2., 3., 4.]), false);
        let b = g.leaf(tensor(&[2, 2], vec![5., 6., 7., 8.]), false);
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).as_slice(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_nt_matches_matmul_with_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor(&[2, 3], vec![1., 2., 3., 4., 5., 6.]), false);
        let b = g.leaf(tensor(&[4, 3], (0..12).map(|x| x as f64).collect()), false);
        let c1 = g.matmul_nt(a, b);
        let bt = g.permute(b, &[1, 0]);
        let c2 = g.matmul(a, bt);
        assert_eq!(g.value(c1).as_slice(), g.value(c2).as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor(&[2, 3], vec![0.1, 5.0, -2.0, 100.0, 100.0, 100.0]), false);
        let s = g.softmax_last(a);
        let v = g.value(s).as_slice();
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn backward_mul_chain() {
        // d/dx mean(x * x) = 2x/n
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[2], vec![3., -4.]), true);
        let y = g.mul(x, x);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        let gx = grads.get(x).unwrap().as_slice();
        assert!((gx[0] - 3.0).abs() < 1e-12);
        assert!((gx[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor(&[2, 2], vec![1., 2., 3., 4.]), true);
        let b = g.leaf(tensor(&[2, 3], vec![5., 6., 7., 8., 9., 10.]), true);
        let c = g.concat(&[a, b], 1);
        assert_eq!(g.shape(c), &[2, 5]);
        let back = g.slice(c, 1, 0, 2);
        assert_eq!(g.value(back).as_slice(), g.value(a).as_slice());
        let l = g.sum_all(c);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().as_slice(), &[1., 1., 1., 1.]);
        assert_eq!(grads.get(b).unwrap().as_slice(), &[1., 1., 1., 1., 1., 1.]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[1, 1, 3, 3], (1..=9).map(|x| x as f64).collect()), false);
        // 1x1 kernel with weight 2, bias 0.5
        let w = g.leaf(tensor(&[1, 1, 1, 1], vec![2.0]), false);
        let b = g.leaf(tensor(&[1], vec![0.5]), false);
        let y = g.conv2d(x, w, b, 1, 0);
        let v = g.value(y).as_slice();
        for i in 0..9 {
            assert!((v[i] - (2.0 * (i as f64 + 1.0) + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_brute_force_oracle() {
        // random-ish 2-channel conv vs naive quadruple loop
        let mut g = Graph::<f64>::new();
        let n = 2;
        let (cin, cout, h, w, k, stride, pad) = (2usize, 3usize, 5usize, 4usize, 3usize, 2usize, 1usize);
        let xv: Vec<f64> = (0..n * cin * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let wv: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 17 % 7) as f64 - 3.0) * 0.25).collect();
        let bv: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1).collect();
        let x = g.leaf(tensor(&[n, cin, h, w], xv.clone()), false);
        let wn = g.leaf(tensor(&[cout, cin, k, k], wv.clone()), false);
        let bn = g.leaf(tensor(&[cout], bv.clone()), false);
        let y = g.conv2d(x, wn, bn, stride, pad);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        assert_eq!(g.shape(y), &[n, cout, oh, ow]);
        let yv = g.value(y).as_slice();
        for bi in 0..n {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                        acc += xv[((bi * cin + ci) * h + ii as usize) * w + jj as usize]
                                            * wv[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        let got = yv[((bi * cout + co) * oh + oi) * ow + oj];
                        assert!((got - acc).abs() < 1e-10, "mismatch at {bi},{co},{oi},{oj}");
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_then_sum_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[1, 1, 2, 2], vec![1., 2., 3., 4.]), true);
        let y = g.upsample2x(x);
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let l = g.sum_all(y);
        assert!((g.value(l).item() - 40.0).abs() < 1e-12);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn pool_corr_identity_when_same_res() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[4, 4], (0..16).map(|x| x as f64).collect()), false);
        let y = g.pool_corr(x, (2, 2), (2, 2));
        assert_eq!(g.value(y).as_slice(), g.value(x).as_slice());
    }

    #[test]
    fn pool_corr_constant_preserved() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[16, 16], 3.25), false);
        let y = g.pool_corr(x, (4, 4), (2, 2));
        assert_eq!(g.shape(y), &[4, 4]);
        for &v in g.value(y).as_slice() {
            assert!((v - 3.25).abs() < 1e-12);
        }
        let up = g.pool_corr(x, (4, 4), (8, 8));
        assert_eq!(g.shape(up), &[64, 64]);
        for &v in g.value(up).as_slice() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_rows_backward_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[3], vec![1., 2., 3.]), true);
        let y = g.broadcast_rows(x, 4);
        assert_eq!(g.shape(y), &[4, 3]);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[4., 4., 4.]);
    }
}
