//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The graph is an append-only tape: every operation evaluates eagerly and
//! records enough context to push gradients back to its parents. Nodes are
//! created in topological order by construction, so the backward pass is a
//! single reverse sweep. Everything is sequential and f64, which keeps the
//! whole stack bit-reproducible for a fixed seed.
//!
//! Shape rules are enforced with assertions: graphs are built by this crate's
//! own layers, so a violation is a bug rather than a user error. Public
//! entry points validate their inputs before building a graph.

use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    /// Multiply by a single-element variable (learnable scalar scale).
    ScaleVar {
        x: Var,
        s: Var,
    },
    /// Per-channel scale along axis 1.
    ChScale {
        x: Var,
        s: Var,
    },
    /// Per-channel bias along axis 1.
    ChBias {
        x: Var,
        b: Var,
    },
    MatMul(Var, Var),
    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    BmmNN(Var, Var),
    /// Batched matmul with transposed rhs: [B,m,k] x [B,n,k] -> [B,m,n].
    BmmNT(Var, Var),
    /// Tile a [m,n] tensor into [B,m,n].
    RepeatBatch(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    /// Concatenate along axis 1.
    ConcatCh(Var, Var),
    /// Dense conv, stride 1: x [N,Ci,H,W], w [Co,Ci,kh,kw].
    Conv2d {
        x: Var,
        w: Var,
        pad: usize,
    },
    /// Depth-wise conv, stride 1: x [N,C,H,W], w [C,kh,kw].
    DwConv2d {
        x: Var,
        w: Var,
        pad: usize,
    },
    AvgPool2x(Var),
    UpsampleNearest2x(Var),
    /// Group normalization without affine terms; saves per-group statistics.
    GroupNorm {
        x: Var,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization across axis 1 per trailing position (token layer norm).
    ChanNorm {
        x: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    MeanAll(Var),
    /// Mean-reduced Huber loss of a residual tensor.
    HuberMean {
        r: Var,
        delta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], addressed by `Var`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    /// A tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that accumulates gradients (parameters, probed inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(v, Op::MulScalar(a, s), needs)
    }

    pub fn scale_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_var expects a [1] scale");
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv);
        let needs = self.needs(x) || self.needs(s);
        self.push(v, Op::ScaleVar { x, s }, needs)
    }

    /// Multiply by a per-channel vector along axis 1.
    pub fn ch_scale(&mut self, x: Var, s: Var) -> Var {
        let (outer, ch, inner) = ch_split(self.value(x).shape());
        assert_eq!(self.value(s).shape(), [ch], "channel scale length mismatch");
        let xs = self.value(x);
        let sv = self.value(s);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for c in 0..ch {
                let sc = sv.data()[c];
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    out[base + i] = xs.data()[base + i] * sc;
                }
            }
        }
        let v = Tensor::from_vec(xs.shape(), out);
        let needs = self.needs(x) || self.needs(s);
        self.push(v, Op::ChScale { x, s }, needs)
    }

    /// Add a per-channel vector along axis 1.
    pub fn ch_bias(&mut self, x: Var, b: Var) -> Var {
        let (outer, ch, inner) = ch_split(self.value(x).shape());
        assert_eq!(self.value(b).shape(), [ch], "channel bias length mismatch");
        let xs = self.value(x);
        let bv = self.value(b);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for c in 0..ch {
                let bc = bv.data()[c];
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    out[base + i] = xs.data()[base + i] + bc;
                }
            }
        }
        let v = Tensor::from_vec(xs.shape(), out);
        let needs = self.needs(x) || self.needs(b);
        self.push(v, Op::ChBias { x, b }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 2);
        assert_eq!(bv.rank(), 2);
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let v = Tensor::from_vec(&[m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 3);
        assert_eq!(bv.rank(), 3);
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs);
        assert_eq!(bv.shape()[1], k);
        let n = bv.shape()[2];
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let v = Tensor::from_vec(&[bs, m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::BmmNN(a, b), needs)
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 3);
        assert_eq!(bv.rank(), 3);
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs);
        assert_eq!(bv.shape()[2], k);
        let n = bv.shape()[1];
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * n * k..(i + 1) * n * k];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            for r in 0..m {
                for c in 0..n {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += ab[r * k + j] * bb[c * k + j];
                    }
                    ob[r * n + c] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[bs, m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::BmmNT(a, b), needs)
    }

    pub fn repeat_batch(&mut self, x: Var, batches: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(batches * m * n);
        for _ in 0..batches {
            out.extend_from_slice(xv.data());
        }
        let v = Tensor::from_vec(&[batches, m, n], out);
        let needs = self.needs(x);
        self.push(v, Op::RepeatBatch(x), needs)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on empty shape");
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * n + i] = e;
                sum += e;
            }
            for i in 0..n {
                out[r * n + i] /= sum;
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x);
        self.push(v, Op::Softmax(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshaped(shape);
        let needs = self.needs(x);
        self.push(v, Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = permute_tensor(self.value(x), perm);
        let needs = self.needs(x);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_ch(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), bv.rank());
        assert!(av.rank() >= 2);
        assert_eq!(av.shape()[0], bv.shape()[0]);
        assert_eq!(&av.shape()[2..], &bv.shape()[2..], "concat trailing dims");
        let outer = av.shape()[0];
        let (ca, cb) = (av.shape()[1], bv.shape()[1]);
        let inner: usize = av.shape()[2..].iter().product();
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let mut out = Vec::with_capacity(outer * (ca + cb) * inner);
        for o in 0..outer {
            out.extend_from_slice(&av.data()[o * ca * inner..(o + 1) * ca * inner]);
            out.extend_from_slice(&bv.data()[o * cb * inner..(o + 1) * cb * inner]);
        }
        let v = Tensor::from_vec(&shape, out);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCh(a, b), needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 4);
        assert_eq!(wv.rank(), 4);
        let (n, ci, h, ww) = dims4(xv.shape());
        let (co, ci2, kh, kw) = dims4(wv.shape());
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        let oh = h + 2 * pad + 1 - kh;
        let ow = ww + 2 * pad + 1 - kw;
        let mut out = vec![0.0; n * co * oh * ow];
        for in_ in 0..n {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= ww as isize {
                                        continue;
                                    }
                                    acc += xv.data()
                                        [((in_ * ci + ic) * h + iy as usize) * ww + ix as usize]
                                        * wv.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((in_ * co + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[n, co, oh, ow], out);
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::Conv2d { x, w, pad }, needs)
    }

    pub fn dw_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 4);
        assert_eq!(wv.rank(), 3);
        let (n, c, h, ww) = dims4(xv.shape());
        assert_eq!(wv.shape()[0], c, "depth-wise kernel count mismatch");
        let (kh, kw) = (wv.shape()[1], wv.shape()[2]);
        let oh = h + 2 * pad + 1 - kh;
        let ow = ww + 2 * pad + 1 - kw;
        let mut out = vec![0.0; n * c * oh * ow];
        for in_ in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += xv.data()
                                    [((in_ * c + ch) * h + iy as usize) * ww + ix as usize]
                                    * wv.data()[(ch * kh + ky) * kw + kx];
                            }
                        }
                        out[((in_ * c + ch) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out);
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::DwConv2d { x, w, pad }, needs)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += xv.data()[(i * h + 2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                    out[(i * oh + oy) * ow + ox] = acc * 0.25;
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out);
        let needs = self.needs(x);
        self.push(v, Op::AvgPool2x(x), needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv.shape());
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(i * oh + oy) * ow + ox] = xv.data()[(i * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out);
        let needs = self.needs(x);
        self.push(v, Op::UpsampleNearest2x(x), needs)
    }

    /// Group normalization over (C/groups, trailing dims) per leading index,
    /// without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert!(xv.rank() >= 2);
        let (outer, ch, inner) = ch_split(xv.shape());
        assert_eq!(ch % groups, 0, "channels not divisible by groups");
        let gs = ch / groups * inner;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(outer * groups);
        let mut inv_stds = Vec::with_capacity(outer * groups);
        for o in 0..outer {
            for g in 0..groups {
                let base = o * ch * inner + g * gs;
                let slice = &xv.data()[base..base + gs];
                let mean = slice.iter().sum::<f64>() / gs as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for (i, &v) in slice.iter().enumerate() {
                    out[base + i] = (v - mean) * inv_std;
                }
                means.push(mean);
                inv_stds.push(inv_std);
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x);
        self.push(
            v,
            Op::GroupNorm {
                x,
                groups,
                mean: means,
                inv_std: inv_stds,
            },
            needs,
        )
    }

    /// Normalization across axis 1 for each (leading, trailing) position.
    pub fn chan_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        assert!(xv.rank() >= 2);
        let (outer, ch, inner) = ch_split(xv.shape());
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(outer * inner);
        let mut inv_stds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut mean = 0.0;
                for c in 0..ch {
                    mean += xv.data()[(o * ch + c) * inner + i];
                }
                mean /= ch as f64;
                let mut var = 0.0;
                for c in 0..ch {
                    let d = xv.data()[(o * ch + c) * inner + i] - mean;
                    var += d * d;
                }
                var /= ch as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..ch {
                    let idx = (o * ch + c) * inner + i;
                    out[idx] = (xv.data()[idx] - mean) * inv_std;
                }
                means.push(mean);
                inv_stds.push(inv_std);
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let needs = self.needs(x);
        self.push(
            v,
            Op::ChanNorm {
                x,
                mean: means,
                inv_std: inv_stds,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let needs = self.needs(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(v, Op::Silu(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mean = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), needs)
    }

    /// Mean-reduced Huber loss of the residual `r`.
    pub fn huber_mean(&mut self, r: Var, delta: f64) -> Var {
        let rv = self.value(r);
        let n = rv.len() as f64;
        let sum: f64 = rv.data().iter().map(|&v| huber_elem(v, delta)).sum();
        let needs = self.needs(r);
        self.push(Tensor::scalar(sum / n), Op::HuberMean { r, delta }, needs)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.push_back(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing = existing.add(&g),
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn push_back(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(self.value(*b)));
                self.accumulate(grads, *b, g.mul(self.value(*a)));
            }
            Op::MulScalar(a, s) => {
                self.accumulate(grads, *a, g.scale(*s));
            }
            Op::ScaleVar { x, s } => {
                let sv = self.value(*s).item();
                self.accumulate(grads, *x, g.scale(sv));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::ChScale { x, s } => {
                let (outer, ch, inner) = ch_split(self.value(*x).shape());
                let sv = self.value(*s);
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            dx[base + i] = g.data()[base + i] * sv.data()[c];
                            ds[c] += g.data()[base + i] * xv.data()[base + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                self.accumulate(grads, *s, Tensor::from_vec(&[ch], ds));
            }
            Op::ChBias { x, b } => {
                let (outer, ch, inner) = ch_split(self.value(*x).shape());
                let mut db = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            db[c] += g.data()[base + i];
                        }
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, Tensor::from_vec(&[ch], db));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // da = g . b^T
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += g.data()[r * n + c] * bv.data()[j * n + c];
                        }
                        da[r * k + j] = acc;
                    }
                }
                // db = a^T . g
                let mut db = vec![0.0; k * n];
                for j in 0..k {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += av.data()[r * k + j] * g.data()[r * n + c];
                        }
                        db[j * n + c] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da));
                self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db));
            }
            Op::BmmNN(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gb = &g.data()[i * m * n..(i + 1) * m * n];
                    let ab = &av.data()[i * m * k..(i + 1) * m * k];
                    let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dab = &mut da[i * m * k..(i + 1) * m * k];
                    let dbb = &mut db[i * k * n..(i + 1) * k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += gb[r * n + c] * bb[j * n + c];
                            }
                            dab[r * k + j] = acc;
                        }
                    }
                    for j in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += ab[r * k + j] * gb[r * n + c];
                            }
                            dbb[j * n + c] = acc;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[bs, m, k], da));
                self.accumulate(grads, *b, Tensor::from_vec(&[bs, k, n], db));
            }
            Op::BmmNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * n * k];
                for i in 0..bs {
                    let gb = &g.data()[i * m * n..(i + 1) * m * n];
                    let ab = &av.data()[i * m * k..(i + 1) * m * k];
                    let bb = &bv.data()[i * n * k..(i + 1) * n * k];
                    let dab = &mut da[i * m * k..(i + 1) * m * k];
                    let dbb = &mut db[i * n * k..(i + 1) * n * k];
                    // da = g . b  ([m,n] x [n,k])
                    for r in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += gb[r * n + c] * bb[c * k + j];
                            }
                            dab[r * k + j] = acc;
                        }
                    }
                    // db = g^T . a  ([n,m] x [m,k])
                    for c in 0..n {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += gb[r * n + c] * ab[r * k + j];
                            }
                            dbb[c * k + j] = acc;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[bs, m, k], da));
                self.accumulate(grads, *b, Tensor::from_vec(&[bs, n, k], db));
            }
            Op::RepeatBatch(x) => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let bs = g.len() / (m * n);
                let mut dx = vec![0.0; m * n];
                for i in 0..bs {
                    for j in 0..m * n {
                        dx[j] += g.data()[i * m * n + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[m, n], dx));
            }
            Op::Softmax(x) => {
                let yv = &self.nodes[idx].value;
                let n = *yv.shape().last().unwrap();
                let rows = yv.len() / n;
                let mut dx = vec![0.0; yv.len()];
                for r in 0..rows {
                    let y = &yv.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dx[r * n + i] = y[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(yv.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(&shape));
            }
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::ConcatCh(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let outer = av.shape()[0];
                let (ca, cb) = (av.shape()[1], bv.shape()[1]);
                let inner: usize = av.shape()[2..].iter().product();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let row = (ca + cb) * inner;
                for o in 0..outer {
                    da[o * ca * inner..(o + 1) * ca * inner]
                        .copy_from_slice(&g.data()[o * row..o * row + ca * inner]);
                    db[o * cb * inner..(o + 1) * cb * inner]
                        .copy_from_slice(&g.data()[o * row + ca * inner..(o + 1) * row]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da));
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db));
            }
            Op::Conv2d { x, w, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, ci, h, ww) = dims4(xv.shape());
                let (co, _, kh, kw) = dims4(wv.shape());
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for in_ in 0..n {
                    for oc in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g.data()[((in_ * co + oc) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= ww as isize {
                                                continue;
                                            }
                                            let xi = ((in_ * ci + ic) * h + iy as usize) * ww
                                                + ix as usize;
                                            let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            dx[xi] += wv.data()[wi] * go;
                                            dw[wi] += xv.data()[xi] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw));
            }
            Op::DwConv2d { x, w, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, c, h, ww) = dims4(xv.shape());
                let (kh, kw) = (wv.shape()[1], wv.shape()[2]);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for in_ in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g.data()[((in_ * c + ch) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= ww as isize {
                                            continue;
                                        }
                                        let xi =
                                            ((in_ * c + ch) * h + iy as usize) * ww + ix as usize;
                                        let wi = (ch * kh + ky) * kw + kx;
                                        dx[xi] += wv.data()[wi] * go;
                                        dw[wi] += xv.data()[xi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw));
            }
            Op::AvgPool2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv.shape());
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xv.len()];
                for i in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(i * oh + oy) * ow + ox] * 0.25;
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    dx[(i * h + 2 * oy + dy) * w + 2 * ox + dxx] += go;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::UpsampleNearest2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv.shape());
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = vec![0.0; xv.len()];
                for i in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(i * h + oy / 2) * w + ox / 2] +=
                                g.data()[(i * oh + oy) * ow + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::GroupNorm {
                x,
                groups,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (outer, ch, inner) = ch_split(xv.shape());
                let gs = ch / groups * inner;
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for gi in 0..*groups {
                        let base = o * ch * inner + gi * gs;
                        let mu = mean[o * groups + gi];
                        let is = inv_std[o * groups + gi];
                        let xs = &xv.data()[base..base + gs];
                        let gsl = &g.data()[base..base + gs];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..gs {
                            let xhat = (xs[i] - mu) * is;
                            sum_g += gsl[i];
                            sum_gx += gsl[i] * xhat;
                        }
                        let m = gs as f64;
                        for i in 0..gs {
                            let xhat = (xs[i] - mu) * is;
                            dx[base + i] = is * (gsl[i] - sum_g / m - xhat * sum_gx / m);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::ChanNorm {
                x,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (outer, ch, inner) = ch_split(xv.shape());
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mu = mean[o * inner + i];
                        let is = inv_std[o * inner + i];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for c in 0..ch {
                            let idx2 = (o * ch + c) * inner + i;
                            let xhat = (xv.data()[idx2] - mu) * is;
                            sum_g += g.data()[idx2];
                            sum_gx += g.data()[idx2] * xhat;
                        }
                        let m = ch as f64;
                        for c in 0..ch {
                            let idx2 = (o * ch + c) * inner + i;
                            let xhat = (xv.data()[idx2] - mu) * is;
                            dx[idx2] = is * (g.data()[idx2] - sum_g / m - xhat * sum_gx / m);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).map(gelu_grad).mul(g);
                self.accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = self
                    .value(*x)
                    .map(|v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        s * (1.0 + v * (1.0 - s))
                    })
                    .mul(g);
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gv = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::HuberMean { r, delta } => {
                let rv = self.value(*r);
                let n = rv.len() as f64;
                let gv = g.item();
                let dr = rv.map(|v| gv * huber_grad_elem(v, *delta) / n);
                self.accumulate(grads, *r, dr);
            }
        }
    }
}

/// Element-wise Huber value.
pub fn huber_elem(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Element-wise Huber derivative.
pub fn huber_grad_elem(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4);
    (shape[0], shape[1], shape[2], shape[3])
}

/// Split a shape of rank >= 2 into (leading, channel-axis-1, trailing).
fn ch_split(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel ops need rank >= 2");
    (shape[0], shape[1], shape[2..].iter().product())
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        for j in 0..k {
            let av = a[r * k + j];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out[r * n + c] += av * b[j * n + c];
            }
        }
    }
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    assert_eq!(perm.len(), x.rank());
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = x.strides();
    let mut out = vec![0.0; x.len()];
    let mut out_strides = vec![1usize; out_shape.len()];
    for i in (0..out_shape.len().saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut idx = vec![0usize; out_shape.len()];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for (i, &s) in out_strides.iter().enumerate() {
            idx[i] = rem / s;
            rem %= s;
        }
        let mut src = 0;
        for (i, &p) in perm.iter().enumerate() {
            src += idx[i] * in_strides[p];
        }
        *slot = x.data()[src];
    }
    Tensor::from_vec(&out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central finite difference of a scalar-valued closure at one leaf input.
    fn finite_diff(
        build: &dyn Fn(&Tensor) -> f64,
        at: &Tensor,
        coord: usize,
        step: f64,
    ) -> f64 {
        let mut plus = at.clone();
        plus.data_mut()[coord] += step;
        let mut minus = at.clone();
        minus.data_mut()[coord] -= step;
        (build(&plus) - build(&minus)) / (2.0 * step)
    }

    fn check_input_grad(build: &dyn Fn(&mut Graph, Var) -> Var, shape: &[usize], seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        // Weight the output so the loss is never invariant in the input.
        let weights = std::cell::RefCell::new(None::<Tensor>);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = build(&mut g, xv);
            let mut w = weights.borrow_mut();
            let wt = w.get_or_insert_with(|| {
                let mut wrng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
                Tensor::randn(g.value(out).shape(), 1.0, &mut wrng)
            });
            let wv = g.constant(wt.clone());
            let weighted = g.mul(out, wv);
            let loss = g.mean_all(weighted);
            (g, xv, loss)
        };
        let loss_of = |x: &Tensor| {
            let (g, _, loss) = eval(x);
            g.value(loss).item()
        };
        let (g, xv, loss) = eval(&x0);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).expect("input grad");
        for coord in (0..x0.len()).step_by((x0.len() / 7).max(1)) {
            let fd = finite_diff(&loss_of, &x0, coord, 1e-5);
            let an = analytic.data()[coord];
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(1e-12);
            assert!(
                abs < 1e-7 || rel < 1e-5,
                "grad mismatch at {coord}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        check_input_grad(&|g, x| g.gelu(x), &[3, 4], 1);
        check_input_grad(&|g, x| g.silu(x), &[3, 4], 2);
        check_input_grad(&|g, x| g.softmax(x), &[3, 5], 3);
        check_input_grad(
            &|g, x| {
                let y = g.mul(x, x);
                g.mul_scalar(y, 0.5)
            },
            &[6],
            4,
        );
    }

    #[test]
    fn norm_grads() {
        check_input_grad(&|g, x| g.group_norm(x, 2, 1e-5), &[2, 4, 3, 3], 5);
        check_input_grad(&|g, x| g.chan_norm(x, 1e-5), &[2, 4, 3, 3], 6);
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let wc = w.clone();
        check_input_grad(
            &move |g, x| {
                let wv = g.constant(wc.clone());
                g.conv2d(x, wv, 1)
            },
            &[2, 2, 4, 4],
            8,
        );
        // Weight gradient for the dense conv.
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let eval = |wt: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(wt.clone());
            let y = g.conv2d(xv, wv, 1);
            let l = g.mean_all(y);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.conv2d(xv, wv, 1);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        let an = grads.get(wv).unwrap();
        for coord in [0, 5, 17, w.len() - 1] {
            let fd = finite_diff(&eval, &w, coord, 1e-5);
            assert!(
                (fd - an.data()[coord]).abs() < 1e-6,
                "conv dw mismatch: {fd} vs {}",
                an.data()[coord]
            );
        }
    }

    #[test]
    fn depthwise_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let w = Tensor::randn(&[3, 5, 5], 0.5, &mut rng);
        let wc = w.clone();
        check_input_grad(
            &move |g, x| {
                let wv = g.constant(wc.clone());
                g.dw_conv2d(x, wv, 2)
            },
            &[2, 3, 4, 4],
            10,
        );
    }

    #[test]
    fn matmul_and_attention_shape_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let bc = b.clone();
        check_input_grad(
            &move |g, x| {
                let bv = g.constant(bc.clone());
                g.matmul(x, bv)
            },
            &[2, 4],
            12,
        );
        let k = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let kc = k.clone();
        check_input_grad(
            &move |g, x| {
                let kv = g.constant(kc.clone());
                let scores = g.bmm_nt(x, kv);
                let probs = g.softmax(scores);
                g.bmm_nn(probs, kv)
            },
            &[2, 3, 4],
            13,
        );
    }

    #[test]
    fn structural_grads() {
        check_input_grad(&|g, x| g.avg_pool2x(x), &[1, 2, 4, 4], 14);
        check_input_grad(&|g, x| g.upsample_nearest2x(x), &[1, 2, 3, 3], 15);
        check_input_grad(&|g, x| g.permute(x, &[0, 2, 3, 1]), &[2, 3, 2, 2], 16);
        check_input_grad(
            &|g, x| {
                let y = g.reshape(x, &[2, 12]);
                g.softmax(y)
            },
            &[2, 3, 4],
            17,
        );
        check_input_grad(&|g, x| g.concat_ch(x, x), &[2, 3, 2, 2], 18);
        check_input_grad(&|g, x| g.repeat_batch(x, 3), &[2, 4], 19);
    }

    #[test]
    fn scale_and_bias_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let s = Tensor::randn(&[3], 1.0, &mut rng);
        let sc = s.clone();
        check_input_grad(
            &move |g, x| {
                let sv = g.constant(sc.clone());
                g.ch_scale(x, sv)
            },
            &[2, 3, 2, 2],
            21,
        );
        // Gradient w.r.t. the scale itself.
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let eval = |st: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let sv = g.leaf(st.clone());
            let y = g.ch_scale(xv, sv);
            let l = g.mean_all(y);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.leaf(s.clone());
        let y = g.ch_scale(xv, sv);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        let an = grads.get(sv).unwrap();
        for coord in 0..3 {
            let fd = finite_diff(&eval, &s, coord, 1e-5);
            assert!((fd - an.data()[coord]).abs() < 1e-7);
        }
    }

    #[test]
    fn huber_mean_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let r = Tensor::randn(&[10], 2.0, &mut rng);
        let eval = |rt: &Tensor| {
            let mut g = Graph::new();
            let rv = g.leaf(rt.clone());
            let l = g.huber_mean(rv, 1.0);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let rv = g.leaf(r.clone());
        let l = g.huber_mean(rv, 1.0);
        let grads = g.backward(l);
        let an = grads.get(rv).unwrap();
        for coord in 0..r.len() {
            if (r.data()[coord].abs() - 1.0).abs() < 1e-3 {
                continue; // kink of the piecewise loss
            }
            let fd = finite_diff(&eval, &r, coord, 1e-6);
            assert!(
                (fd - an.data()[coord]).abs() < 1e-6,
                "huber grad mismatch at {coord}"
            );
        }
    }

    #[test]
    fn scale_var_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let s0 = Tensor::scalar(0.7);
        let eval = |st: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let sv = g.leaf(st.clone());
            let y = g.scale_var(xv, sv);
            let l = g.mean_all(y);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.leaf(s0.clone());
        let y = g.scale_var(xv, sv);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        let fd = finite_diff(&eval, &s0, 0, 1e-6);
        assert!((fd - grads.get(sv).unwrap().item()).abs() < 1e-8);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
