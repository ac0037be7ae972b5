//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] owns every value computed during one forward pass. Ops append
//! nodes in creation order, so reverse creation order is a valid topological
//! order for the backward sweep. Handles ([`Var`]) are plain indices.

use super::gemm::gemm;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Deliberate backward-pass corruption, used to prove the gradient suite
/// catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv2dBackward,
}

/// Per-channel batch statistics from a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (`m / (m - 1)` correction), as used for running stats.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    RowNorm {
        x: Var,
        squared: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    PairwiseDist {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (shape `shape`) into the layout of `shape` permuted by `perm`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf tensor; gradients are retained after [`Graph::backward`] when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Run the reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        let fault = self.fault;
        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g, fault);
            grads[i] = Some(g);
        }
        Ok(())
    }

    // ----------------------------------------------------------------------
    // Convolution / normalization / pooling
    // ----------------------------------------------------------------------

    /// 2-D cross-correlation over `[B, Cin, H, W]` with a `[Cout, Cin, kh, kw]`
    /// kernel and optional `[Cout]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be >= 1".into());
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return shape_err(format!("conv2d input has {cin} channels but weight expects {wcin}"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let p = ho * wo;
        let k = cin * kh * kw;
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); bsz * cout * p];
        let mut col = if direct { Vec::new() } else { vec![T::zero(); k * p] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bsz {
                let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let colb: &[T] = if direct {
                    xb
                } else {
                    im2col(xb, (cin, h, wd), (kh, kw), stride, pad, (ho, wo), &mut col);
                    &col
                };
                gemm(cout, p, k, wv, false, colb, false, &mut out[bi * cout * p..(bi + 1) * cout * p], false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for bi in 0..bsz {
                    for co in 0..cout {
                        let s = (bi * cout + co) * p;
                        out[s..s + p].iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Batch normalization over the channel axis (axis 1) of a `[B, C, ...]`
    /// tensor. In train mode the batch statistics are returned so the caller
    /// can update its running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if !(eps > 0.0) {
            return Err(Error::Param(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err(format!("batch_norm expects [B, C, ...], got {xs:?}"));
        }
        let (outer, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return shape_err(format!(
                    "batch_norm {name} must be [{channels}], got {:?}",
                    self.shape(v)
                ));
            }
        }
        let m = outer * inner;
        let eps_t = T::lit(eps);
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(Error::Param(format!(
                        "batch_norm in train mode needs B*H*W >= 2, got {m}"
                    )));
                }
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let mf = T::lit(m as f64);
                for c in 0..channels {
                    let mut s = T::zero();
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        s += xv[base..base + inner].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut sq = T::zero();
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        for &v in &xv[base..base + inner] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = sq / mf;
                }
                let corr = T::lit(m as f64 / (m as f64 - 1.0));
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * corr).collect(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                let Some((rm, rv)) = running else {
                    return Err(Error::Usage("batch_norm in eval mode needs running statistics".into()));
                };
                if rm.len() != channels || rv.len() != channels {
                    return shape_err(format!(
                        "batch_norm running stats must have {channels} entries"
                    ));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let xh = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = gv[c] * xh + bv[c];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == NormMode::Train,
            outer,
            channels,
            inner,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Max pooling over `[B, C, H, W]` with a square window and no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("max_pool2d expects [B, C, H, W], got {xs:?}"));
        }
        if kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return shape_err(format!(
                "max_pool2d window {kernel} stride {stride} invalid for {xs:?}"
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Adaptive average pooling of `[B, C, H, W]` onto an `out_h x out_w`
    /// grid. Bin `i` covers `[floor(i*H/out_h), ceil((i+1)*H/out_h))`, which
    /// also makes the op a nearest-style upsampler when the grid is larger.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return shape_err(format!(
                "adaptive_avg_pool2d expects [B, C, H, W] and a positive grid, got {xs:?} -> {out_h}x{out_w}"
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = adaptive_bins(h, out_h);
        let cols = adaptive_bins(w, out_w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in 0..b * c {
            let base = plane * h * w;
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut s = T::zero();
                    for y in r0..r1 {
                        s += xv[base + y * w + c0..base + y * w + c1].iter().copied().sum::<T>();
                    }
                    out.push(s / T::lit(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let value = Tensor::new(vec![b, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool2d { x }, &[x]))
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let pooled = self.adaptive_avg_pool2d(x, 1, 1)?;
        let s = self.shape(pooled).to_vec();
        self.reshape(pooled, &[s[0], s[1]])
    }

    // ----------------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------------

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading batch dimension.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (batch, ar, ac, br, bc) = match (as_.len(), bs.len()) {
            (2, 2) => (1, as_[0], as_[1], bs[0], bs[1]),
            (3, 3) if as_[0] == bs[0] => (as_[0], as_[1], as_[2], bs[1], bs[2]),
            _ => {
                return shape_err(format!("matmul operands {as_:?} and {bs:?} are incompatible"));
            }
        };
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return shape_err(format!(
                "matmul inner dims differ: {as_:?}{} x {bs:?}{}",
                if trans_a { "^T" } else { "" },
                if trans_b { "^T" } else { "" }
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                n,
                k,
                &av[bi * m * k..(bi + 1) * m * k],
                trans_a,
                &bv[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let shape = if as_.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
            batch,
            m,
            n,
            k,
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// `x[M, K] · w[K, N] (+ bias[N])`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, false)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------------------
    // Elementwise
    // ----------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ (no implicit broadcasting)",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v + s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!(
                "mul_const: shapes {:?} and {:?} differ",
                self.shape(x),
                c.shape()
            ));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { x, c: c.data().to_vec() }, &[x]))
    }

    /// Adds a `[N]` vector to every row of a `[..., N]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().unwrap();
        if self.shape(bias) != [n] {
            return shape_err(format!(
                "add_bias: bias {:?} does not match trailing dim of {xs:?}",
                self.shape(bias)
            ));
        }
        let bv = self.value(bias).data();
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    // ----------------------------------------------------------------------
    // Layout
    // ----------------------------------------------------------------------

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors".into());
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err(format!(
                    "concat: trailing dims {:?} and {tail:?} differ",
                    &s[1..]
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return shape_err(format!("slice_rows {start}..{} out of range for {s:?}", start + len));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, offset: start * row }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute {perm:?} is not a permutation of rank {}", s.len()));
        }
        let (shape, data) = permute_data(self.value(x).data(), &s, perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    // ----------------------------------------------------------------------
    // Reductions and losses
    // ----------------------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!(
                "softmax_cross_entropy expects [B, K] logits for {} labels, got {s:?}",
                labels.len()
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, (row, prow)) in lv.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[labels[r]];
        }
        loss /= T::lit(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Euclidean norm (or squared norm) of each row of `[M, D]`, giving `[M]`.
    /// The gradient of the plain norm at a zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var, squared: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("row_norm expects [M, D], got {s:?}"));
        }
        let data = self
            .value(x)
            .rows()
            .map(|r| {
                let sq: T = r.iter().map(|&v| v * v).sum();
                if squared {
                    sq
                } else {
                    sq.sqrt()
                }
            })
            .collect();
        let value = Tensor::new(vec![s[0]], data)?;
        Ok(self.push(value, Op::RowNorm { x, squared }, &[x]))
    }

    /// Scale each row of `[M, D]` to unit L2 norm (`x / max(|x|, eps)`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("l2_normalize expects [M, D], got {s:?}"));
        }
        let eps = T::lit(eps);
        let t = self.value(x);
        let norms: Vec<T> = t
            .rows()
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let d = s[1];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / d].max(eps))
            .collect();
        let value = Tensor::new(s, data)?;
        Ok(self.push(value, Op::L2Normalize { x, norms, eps }, &[x]))
    }

    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.is_empty() {
            return shape_err(format!("gather_rows expects [P, D] and indices, got {s:?}"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Index(format!("gather_rows index {bad} >= {}", s[0])));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Per-group row mean: `out[g] = mean{x[r] : groups[r] == g}`.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != groups.len() {
            return shape_err(format!(
                "group_mean expects [M, D] with M = {} group labels, got {s:?}",
                groups.len()
            ));
        }
        let d = s[1];
        let mut counts = vec![0usize; num_groups];
        for &g in groups {
            if g >= num_groups {
                return Err(Error::Index(format!("group {g} >= {num_groups}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Usage(format!("group {empty} has no members")));
        }
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); num_groups * d];
        for (r, &g) in groups.iter().enumerate() {
            for j in 0..d {
                data[g * d + j] += xv[r * d + j];
            }
        }
        for g in 0..num_groups {
            let inv = T::one() / T::lit(counts[g] as f64);
            data[g * d..(g + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![num_groups, d], data)?;
        let op = Op::GroupMean {
            x,
            groups: groups.to_vec(),
            counts,
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Euclidean distances between the rows of `a[M, D]` and `b[N, D]`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return shape_err(format!("pairwise_dist operands {as_:?} and {bs:?} are incompatible"));
        }
        let (m, n, d) = (as_[0], bs[0], as_[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let s: T = (0..d)
                    .map(|k| {
                        let t = av[i * d + k] - bv[j * d + k];
                        t * t
                    })
                    .sum();
                data.push(s.sqrt());
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::PairwiseDist { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }
}

fn grad_buf<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
    fault: Option<Fault>,
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            let os = node.value.shape();
            let (ho, wo) = (os[2], os[3]);
            let p = ho * wo;
            let k = cin * kh * kw;
            let direct = kh == 1 && kw == 1 && *stride == 1 && *pad == 0;
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            if let Some(b) = b {
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for bi in 0..bsz {
                        for co in 0..cout {
                            let s = (bi * cout + co) * p;
                            gb[co] += g[s..s + p].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![T::zero(); if direct { 0 } else { k * p }];
            let mut dw = vec![T::zero(); if need_w { cout * k } else { 0 }];
            let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
            let mut dcol = vec![T::zero(); if need_x && !direct { k * p } else { 0 }];
            for bi in 0..bsz {
                let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if need_w {
                    let colb: &[T] = if direct {
                        xb
                    } else {
                        im2col(xb, (cin, h, wd), (kh, kw), *stride, *pad, (ho, wo), &mut col);
                        &col
                    };
                    gemm(cout, k, p, gb, false, colb, true, &mut dw, true);
                }
                if need_x {
                    let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    if direct {
                        gemm(k, p, cout, wv, true, gb, false, dxb, true);
                    } else {
                        gemm(k, p, cout, wv, true, gb, false, &mut dcol, false);
                        col2im(&dcol, (cin, h, wd), (kh, kw), *stride, *pad, (ho, wo), dxb);
                    }
                }
            }
            if fault == Some(Fault::Conv2dBackward) {
                let bump = T::lit(1.05);
                dw.iter_mut().for_each(|v| *v *= bump);
                dx.iter_mut().for_each(|v| *v *= bump);
            }
            if let Some(gw) = grad_buf(nodes, grads, *w) {
                add_into(gw, &dw);
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, &dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            outer,
            channels,
            inner,
        } => {
            let (outer, channels, inner) = (*outer, *channels, *inner);
            let gv = nodes[gamma.0].value.data();
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for idx in base..base + inner {
                        sum_g[c] += g[idx];
                        sum_gx[c] += g[idx] * xhat[idx];
                    }
                }
            }
            if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                add_into(gg, &sum_gx);
            }
            if let Some(gb) = grad_buf(nodes, grads, *beta) {
                add_into(gb, &sum_g);
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let m = T::lit((outer * inner) as f64);
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        let scale = gv[c] * inv_std[c];
                        for idx in base..base + inner {
                            gx[idx] += if *train {
                                scale * (g[idx] - sum_g[c] / m - xhat[idx] * sum_gx[c] / m)
                            } else {
                                scale * g[idx]
                            };
                        }
                    }
                }
            }
        }
        Op::Relu { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
        }
        Op::AdaptiveAvgPool2d { x } => {
            let xs = nodes[x.0].value.shape();
            let os = node.value.shape();
            let (h, w, oh, ow) = (xs[2], xs[3], os[2], os[3]);
            let rows = adaptive_bins(h, oh);
            let cols = adaptive_bins(w, ow);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for plane in 0..xs[0] * xs[1] {
                    let base = plane * h * w;
                    let mut o = plane * oh * ow;
                    for &(r0, r1) in &rows {
                        for &(c0, c1) in &cols {
                            let share = g[o] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                            for y in r0..r1 {
                                for v in &mut gx[base + y * w + c0..base + y * w + c1] {
                                    *v += share;
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
            batch,
            m,
            n,
            k,
        } => {
            let (m, n, k) = (*m, *n, *k);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for bi in 0..*batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if !trans_a {
                        // dA[m,k] = dC · op(B)^T
                        gemm(m, k, n, gb, false, bb, !trans_b, dst, true);
                    } else {
                        // dA[k,m] = op(B) · dC^T
                        gemm(k, m, n, bb, *trans_b, gb, true, dst, true);
                    }
                }
            }
            if let Some(gbv) = grad_buf(nodes, grads, *b) {
                for bi in 0..*batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gbv[bi * k * n..(bi + 1) * k * n];
                    if !trans_b {
                        // dB[k,n] = op(A)^T · dC
                        gemm(k, n, m, ab, !trans_a, gb, false, dst, true);
                    } else {
                        // dB[n,k] = dC^T · op(A)
                        gemm(n, k, m, gb, true, ab, *trans_a, dst, true);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::MulConst { x, c } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, &v), &cv) in gx.iter_mut().zip(g).zip(c) {
                    *d += v * cv;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = grad_buf(nodes, grads, *p) {
                    add_into(gp, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::Slice { x, offset } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(&mut gx[*offset..*offset + g.len()], g);
            }
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, back) = permute_data(g, node.value.shape(), &inv);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, &back);
            }
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((dst, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[logits.0].value.shape()[1];
            let scale = g[0] / T::lit(labels.len() as f64);
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::RowNorm { x, squared } => {
            let xv = nodes[x.0].value.data();
            let d = nodes[x.0].value.shape()[1];
            let norms = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, (&gi, &nr)) in g.iter().zip(norms).enumerate() {
                    let factor = if *squared {
                        T::lit(2.0) * gi
                    } else if nr > T::zero() {
                        gi / nr
                    } else {
                        T::zero()
                    };
                    for j in 0..d {
                        gx[r * d + j] += factor * xv[r * d + j];
                    }
                }
            }
        }
        Op::L2Normalize { x, norms, eps } => {
            let y = node.value.data();
            let d = node.value.shape()[1];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &nr) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if nr > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * dot) / nr;
                        }
                    } else {
                        for (o, &gi) in dst.iter_mut().zip(gr) {
                            *o += gi / *eps;
                        }
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let d = node.value.shape()[1];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::GroupMean { x, groups, counts } => {
            let d = node.value.shape()[1];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &grp) in groups.iter().enumerate() {
                    let inv = T::one() / T::lit(counts[grp] as f64);
                    for j in 0..d {
                        gx[r * d + j] += g[grp * d + j] * inv;
                    }
                }
            }
        }
        Op::PairwiseDist { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let (m, d) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[0];
            let dist = node.value.data();
            let mut da = vec![T::zero(); m * d];
            let mut db = vec![T::zero(); n * d];
            for i in 0..m {
                for j in 0..n {
                    let dij = dist[i * n + j];
                    if dij <= T::zero() {
                        continue;
                    }
                    let f = g[i * n + j] / dij;
                    for k in 0..d {
                        let t = f * (av[i * d + k] - bv[j * d + k]);
                        da[i * d + k] += t;
                        db[j * d + k] -= t;
                    }
                }
            }
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, &da);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                add_into(gb, &db);
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}
