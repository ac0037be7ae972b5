//! Parameterized building blocks and the forward binding context.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::{BufferId, ParamId, ParamStore};
use crate::tensor::{BatchStats, Graph, NormMode, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Stable per-name seed so a parameter's initial value does not depend on
/// which other parameters exist.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Registers parameters in a store with deterministic initialization.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder { store, seed }
    }

    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)));
        self.store.add_param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add_param(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<BufferId> {
        self.store.add_buffer(name, Tensor::full(shape, T::lit(value)))
    }
}

/// Graph-side view of a parameter store for one forward pass. Parameters
/// become graph leaves the first time they are used; explicit bindings let
/// callers substitute their own leaves (e.g. for gradient checking).
pub struct Forward<'a, T> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    vars: HashMap<ParamId, Var>,
    stats: Vec<(BatchNorm, BatchStats<T>)>,
    pub mode: NormMode,
    track: bool,
}

/// What a forward pass touched: parameter leaves and fresh batch statistics.
pub struct Binding<T> {
    pub vars: HashMap<ParamId, Var>,
    pub stats: Vec<(BatchNorm, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// `track` marks auto-bound parameters as requiring gradients.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: NormMode, track: bool) -> Self {
        Forward {
            graph,
            store,
            vars: HashMap::new(),
            stats: Vec::new(),
            mode,
            track,
        }
    }

    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars.insert(id, var);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let v = self.graph.leaf(self.store.param(id).value.clone(), self.track);
        self.vars.insert(id, v);
        v
    }

    pub fn finish(self) -> Binding<T> {
        Binding {
            vars: self.vars,
            stats: self.stats,
        }
    }
}

impl<T: Scalar> Binding<T> {
    /// Copy graph gradients of bound parameters into the store.
    pub fn write_grads(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &self.vars {
            if let Some(g) = graph.grad(v) {
                let p = store.param_mut(id);
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec())?);
            }
        }
        Ok(())
    }

    /// Exponential running-statistics update with momentum 0.1.
    pub fn update_running_stats(&self, store: &mut ParamStore<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (bn, s) in &self.stats {
            for (r, &b) in store.buffer_mut(bn.mean).value.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.buffer_mut(bn.var).value.data_mut().iter_mut().zip(&s.var_unbiased) {
                *r = keep * *r + m * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, prefix: &str, channels: usize) -> Result<Self> {
        Self::with_gamma(b, prefix, channels, 1.0)
    }

    pub fn with_gamma<T: Scalar>(b: &mut Builder<T>, prefix: &str, channels: usize, gamma: f64) -> Result<Self> {
        Ok(BatchNorm {
            gamma: b.constant(&format!("{prefix}.weight"), &[channels], gamma)?,
            beta: b.constant(&format!("{prefix}.bias"), &[channels], 0.0)?,
            mean: b.buffer(&format!("{prefix}.running_mean"), &[channels], 0.0)?,
            var: b.buffer(&format!("{prefix}.running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let gamma = fw.p(self.gamma);
        let beta = fw.p(self.beta);
        let running = (
            fw.store.buffer(self.mean).value.data(),
            fw.store.buffer(self.var).value.data(),
        );
        let (y, stats) = fw.graph.batch_norm(x, gamma, beta, fw.mode, Some(running), BN_EPS)?;
        if let Some(s) = stats {
            fw.stats.push((*self, s));
        }
        Ok(y)
    }
}

/// Convolution, optional batch norm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BatchNorm>,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub bn: bool,
    pub relu: bool,
    /// Initial norm scale; `0` starts the block at zero output.
    pub bn_gamma: f64,
}

impl ConvBn {
    pub fn new<T: Scalar>(b: &mut Builder<T>, prefix: &str, s: ConvSpec) -> Result<Self> {
        let k = s.kernel;
        Ok(ConvBn {
            weight: b.kaiming(&format!("{prefix}.conv.weight"), &[s.cout, s.cin, k, k], s.cin * k * k, 1.0)?,
            bias: if s.bias {
                Some(b.constant(&format!("{prefix}.conv.bias"), &[s.cout], 0.0)?)
            } else {
                None
            },
            bn: if s.bn {
                Some(BatchNorm::with_gamma(b, &format!("{prefix}.bn"), s.cout, s.bn_gamma)?)
            } else {
                None
            },
            stride: s.stride,
            pad: k / 2,
            relu: s.relu,
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = fw.p(self.weight);
        let b = self.bias.map(|id| fw.p(id));
        let mut y = fw.graph.conv2d(x, w, b, self.stride, self.pad)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(fw, y)?;
        }
        if self.relu {
            y = fw.graph.relu(y);
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(bn) = &self.bn {
            v.extend([bn.gamma, bn.beta]);
        }
        v
    }
}

/// Weights of a multi-head attention unit followed by a one-hidden-layer MLP
/// with residual add. Linear weights are stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct MhaOutput {
    /// `[B, N, d]`.
    pub out: Var,
    /// Attention weights `[B * heads, N, N]`, rows sum to one.
    pub attn: Var,
}

fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.linear(flat, w, Some(b))?;
    let n = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], n])
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

/// Scaled dot-product attention over `[B, N, d]` queries, keys and values.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    w: &MhaVars,
) -> Result<MhaOutput> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(Error::Shape(format!(
            "attention expects equal [B, N, d] inputs, got {:?}, {:?}, {:?}",
            s,
            g.shape(k),
            g.shape(v)
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("attention dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qh = project(g, q, w.wq, w.bq)?;
    let qh = split_heads(g, qh, heads)?;
    let kh = project(g, k, w.wk, w.bk)?;
    let kh = split_heads(g, kh, heads)?;
    let vh = project(g, v, w.wv, w.bv)?;
    let vh = split_heads(g, vh, heads)?;
    let scores = g.matmul(qh, kh, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, vh, false, false)?;
    let ctx = g.reshape(ctx, &[b, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let y = project(g, ctx, w.wo, w.bo)?;
    let hidden = project(g, y, w.w1, w.b1)?;
    let hidden = g.relu(hidden);
    let mlp = project(g, hidden, w.w2, w.b2)?;
    let out = g.add(y, mlp)?;
    Ok(MhaOutput { out, attn })
}

#[derive(Clone, Copy, Debug)]
pub struct Mha {
    pub heads: usize,
    ids: [ParamId; 12],
}

impl Mha {
    pub fn new<T: Scalar>(b: &mut Builder<T>, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("attention dim {dim} is not divisible by {heads} heads")));
        }
        let hidden = 2 * dim;
        let mut lin = |name: &str, i: usize, o: usize| -> Result<[ParamId; 2]> {
            Ok([
                b.kaiming(&format!("{prefix}.{name}.weight"), &[i, o], i, 1.0)?,
                b.constant(&format!("{prefix}.{name}.bias"), &[o], 0.0)?,
            ])
        };
        let [wq, bq] = lin("attn.q", dim, dim)?;
        let [wk, bk] = lin("attn.k", dim, dim)?;
        let [wv, bv] = lin("attn.v", dim, dim)?;
        let [wo, bo] = lin("attn.out", dim, dim)?;
        let [w1, b1] = lin("mlp.fc1", dim, hidden)?;
        let [w2, b2] = lin("mlp.fc2", hidden, dim)?;
        Ok(Mha {
            heads,
            ids: [wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2],
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn vars<T: Scalar>(&self, fw: &mut Forward<T>) -> MhaVars {
        let v = self.ids.map(|id| fw.p(id));
        MhaVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            w1: v[8],
            b1: v[9],
            w2: v[10],
            b2: v[11],
        }
    }
}

/// Attention block mixing a shallow map `G` into a deep map `F`:
/// queries and keys come from `G`, values from `alpha * G + (1 - alpha) * F`
/// after reduction, with an inner residual of the reduced `F` and an outer
/// residual of `F` itself.
#[derive(Clone, Debug)]
pub struct Alb {
    pub q: ConvBn,
    pub k: ConvBn,
    pub vg: ConvBn,
    pub vf: ConvBn,
    pub attn: Mha,
    pub out: ConvBn,
    pub grid: (usize, usize),
    pub mix_alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AlbSpec {
    pub deep_channels: usize,
    pub shallow_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub mix_alpha: f64,
}

pub struct AlbOutput {
    pub out: Var,
    pub attn: Var,
}

impl Alb {
    pub fn new<T: Scalar>(b: &mut Builder<T>, prefix: &str, s: AlbSpec) -> Result<Self> {
        let reduce = |cin| ConvSpec {
            cin,
            cout: s.dim,
            kernel: 1,
            stride: 1,
            bias: false,
            bn: true,
            relu: false,
            bn_gamma: 1.0,
        };
        Ok(Alb {
            q: ConvBn::new(b, &format!("{prefix}.q"), reduce(s.shallow_channels))?,
            k: ConvBn::new(b, &format!("{prefix}.k"), reduce(s.shallow_channels))?,
            vg: ConvBn::new(b, &format!("{prefix}.vg"), reduce(s.shallow_channels))?,
            vf: ConvBn::new(b, &format!("{prefix}.vf"), reduce(s.deep_channels))?,
            attn: Mha::new(b, prefix, s.dim, s.heads)?,
            out: ConvBn::new(
                b,
                &format!("{prefix}.out"),
                ConvSpec {
                    cin: s.dim,
                    cout: s.deep_channels,
                    kernel: 1,
                    stride: 1,
                    bias: false,
                    bn: true,
                    relu: false,
                    bn_gamma: 0.0,
                },
            )?,
            grid: s.grid,
            mix_alpha: s.mix_alpha,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for c in [&self.q, &self.k, &self.vg, &self.vf, &self.out] {
            v.extend(c.params());
        }
        v.extend_from_slice(self.attn.params());
        v
    }

    fn tokens<T: Scalar>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let (gh, gw) = self.grid;
        let pooled = fw.graph.adaptive_avg_pool2d(x, gh, gw)?;
        let s = fw.graph.shape(pooled).to_vec();
        let flat = fw.graph.reshape(pooled, &[s[0], s[1], gh * gw])?;
        fw.graph.permute(flat, &[0, 2, 1])
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<T>, f: Var, g: Var) -> Result<AlbOutput> {
        let fs = fw.graph.shape(f).to_vec();
        let gs = fw.graph.shape(g).to_vec();
        if fs.len() != 4 || gs.len() != 4 || fs[0] != gs[0] {
            return Err(Error::Shape(format!("ALB inputs must share the batch dim, got {fs:?} and {gs:?}")));
        }
        let q = self.q.forward(fw, g)?;
        let q = self.tokens(fw, q)?;
        let k = self.k.forward(fw, g)?;
        let k = self.tokens(fw, k)?;
        let vg = self.vg.forward(fw, g)?;
        let vg = self.tokens(fw, vg)?;
        let vf = self.vf.forward(fw, f)?;
        let vf = self.tokens(fw, vf)?;
        let a = fw.graph.scale(vg, self.mix_alpha);
        let b = fw.graph.scale(vf, 1.0 - self.mix_alpha);
        let v = fw.graph.add(a, b)?;
        let w = self.attn.vars(fw);
        let att = multi_head_attention(fw.graph, q, k, v, self.attn.heads, &w)?;
        let y = fw.graph.add(att.out, vf)?;
        let (gh, gw) = self.grid;
        let d = fw.graph.shape(y)[2];
        let y = fw.graph.permute(y, &[0, 2, 1])?;
        let y = fw.graph.reshape(y, &[fs[0], d, gh, gw])?;
        let y = fw.graph.adaptive_avg_pool2d(y, fs[2], fs[3])?;
        let y = self.out.forward(fw, y)?;
        let out = fw.graph.add(y, f)?;
        Ok(AlbOutput { out, attn: att.attn })
    }
}
