//! The quadruple-stream network: four stems, shared backbone stages, the
//! multi-scale attention block chain (MIMB), and the pooling/BN-neck head.

pub mod layers;

use crate::augment::StreamBatch;
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Graph, NormMode, Scalar, Tensor, Var};

pub use layers::{
    multi_head_attention, Alb, AlbOutput, AlbSpec, BatchNorm, Binding, Builder, ConvBn, ConvSpec, Forward, Mha,
    MhaOutput, MhaVars,
};

/// How the four streams map to stems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QfeMode {
    /// One stem per stream.
    #[default]
    Quad,
    /// The two visible streams share a stem, as do the two infrared streams.
    Dual,
}

/// Which retained stage output each ALB receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InjectionOrder {
    /// ALB `k` gets `G_(k mod 4)`: shallowest first.
    #[default]
    Forward,
    /// ALB `k` gets `G_(3 - k mod 4)`.
    Reverse,
}

macro_rules! str_enum {
    ($t:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($s); })+
                unreachable!()
            }
        }
    };
}

str_enum!(QfeMode, "qfe mode", "quad" => QfeMode::Quad, "dual" => QfeMode::Dual);
str_enum!(InjectionOrder, "injection order", "forward" => InjectionOrder::Forward, "reverse" => InjectionOrder::Reverse);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stem width followed by the four shared stage widths.
    pub stage_channels: Vec<usize>,
    /// Stem pooling stride followed by the four shared stage strides.
    pub stage_strides: Vec<usize>,
    /// Number of ALBs; 0 leaves the stage-3 output untouched.
    pub num_alb: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub token_grid: (usize, usize),
    pub fusion_alpha: f64,
    pub alb_mix_alpha: f64,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub qfe: QfeMode,
    /// When off, every ALB receives `G_3`.
    pub multiscale: bool,
    pub injection_order: InjectionOrder,
    pub final_stage: bool,
    /// When off, the ALB chain is skipped even if its parameters exist.
    pub mimb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![8, 16, 32, 64, 64],
            stage_strides: vec![2, 2, 2, 2, 1],
            num_alb: 4,
            attn_dim: 16,
            attn_heads: 2,
            token_grid: (6, 3),
            fusion_alpha: 0.5,
            alb_mix_alpha: 0.1,
            num_classes: 32,
            embed_dim: 64,
            qfe: QfeMode::Quad,
            multiscale: true,
            injection_order: InjectionOrder::Forward,
            final_stage: true,
            mimb: true,
        }
    }
}

impl ModelConfig {
    /// Width of the pooled feature the head sees.
    pub fn feature_channels(&self) -> usize {
        if self.final_stage {
            self.stage_channels[4]
        } else {
            self.stage_channels[3]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return bad(format!("stage_channels needs 5 positive entries, got {:?}", self.stage_channels));
        }
        if self.stage_strides.len() != 5 || self.stage_strides.contains(&0) {
            return bad(format!("stage_strides needs 5 positive entries, got {:?}", self.stage_strides));
        }
        if self.num_alb > 5 {
            return bad(format!("num_alb must be in 0..=5, got {}", self.num_alb));
        }
        for (name, v) in [("fusion_alpha", self.fusion_alpha), ("alb_mix_alpha", self.alb_mix_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.attn_dim == 0 || self.attn_heads == 0 || self.attn_dim % self.attn_heads != 0 {
            return bad(format!(
                "attn_dim {} must be a positive multiple of attn_heads {}",
                self.attn_dim, self.attn_heads
            ));
        }
        if self.token_grid.0 == 0 || self.token_grid.1 == 0 {
            return bad("token_grid must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.embed_dim != self.feature_channels() {
            return bad(format!(
                "embed_dim {} must equal the final feature width {}",
                self.embed_dim,
                self.feature_channels()
            ));
        }
        Ok(())
    }

    /// Retained stage index fed to ALB `k`.
    pub fn injection_source(&self, k: usize) -> usize {
        if !self.multiscale {
            return 3;
        }
        match self.injection_order {
            InjectionOrder::Forward => k % 4,
            InjectionOrder::Reverse => 3 - k % 4,
        }
    }
}

pub const STREAM_NAMES: [&str; 4] = ["vg", "vc", "tg", "tc"];

#[derive(Clone, Debug)]
struct Layout {
    stems: Vec<ConvBn>,
    stem_pool: usize,
    stages: Vec<ConvBn>,
    albs: Vec<Alb>,
    neck: BatchNorm,
    classifier: ParamId,
}

/// Four stream input tensors `[B, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct StreamInputs<T> {
    pub streams: [Tensor<T>; 4],
}

impl<T: Scalar> StreamInputs<T> {
    pub fn from_batch(b: &StreamBatch) -> Self {
        StreamInputs {
            streams: [b.x_vg.cast(), b.x_vc.cast(), b.x_tg.cast(), b.x_tc.cast()],
        }
    }
}

/// Retained stage outputs `G_0..G_3` and the final feature map.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub g: Vec<Var>,
    pub f_final: Var,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// L2-normalized embeddings of all `4B` rows in `vg, vc, tg, tc` order.
    pub embeddings: Var,
    /// Per-stream slices of `embeddings`.
    pub streams: [Var; 4],
    pub logits: Var,
    pub stages: StageOutputs,
    /// Attention maps of each ALB, in chain order.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    layout: Layout,
    training: bool,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let ch = &cfg.stage_channels;
        let stem_spec = ConvSpec {
            cin: 3,
            cout: ch[0],
            kernel: 3,
            stride: 1,
            bias: true,
            bn: true,
            relu: true,
            bn_gamma: 1.0,
        };
        let stem_names: &[&str] = match cfg.qfe {
            QfeMode::Quad => &STREAM_NAMES,
            QfeMode::Dual => &["v", "t"],
        };
        let stems = stem_names
            .iter()
            .map(|n| ConvBn::new(&mut b, &format!("stem.{n}"), stem_spec))
            .collect::<Result<Vec<_>>>()?;
        let stages = (1..5)
            .filter(|&i| i < 4 || cfg.final_stage)
            .map(|i| {
                ConvBn::new(
                    &mut b,
                    &format!("stage{i}"),
                    ConvSpec {
                        cin: ch[i - 1],
                        cout: ch[i],
                        kernel: 3,
                        stride: cfg.stage_strides[i],
                        bias: false,
                        bn: true,
                        relu: true,
                        bn_gamma: 1.0,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let albs = (0..cfg.num_alb)
            .map(|k| {
                Alb::new(
                    &mut b,
                    &format!("mimb.alb{k}"),
                    AlbSpec {
                        deep_channels: ch[3],
                        shallow_channels: ch[cfg.injection_source(k)],
                        dim: cfg.attn_dim,
                        heads: cfg.attn_heads,
                        grid: cfg.token_grid,
                        mix_alpha: cfg.alb_mix_alpha,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let feat = cfg.feature_channels();
        let neck = BatchNorm::new(&mut b, "neck.bn", feat)?;
        let classifier = b.kaiming("classifier.weight", &[feat, cfg.num_classes], feat, 0.01)?;
        let layout = Layout {
            stems,
            stem_pool: cfg.stage_strides[0],
            stages,
            albs,
            neck,
            classifier,
        };
        let model = Model {
            cfg,
            store,
            layout,
            training: true,
        };
        model.assert_stems_unshared();
        Ok(model)
    }

    fn assert_stems_unshared(&self) {
        if self.cfg.qfe == QfeMode::Quad {
            let mut ids: Vec<ParamId> = self.layout.stems.iter().flat_map(|s| s.params()).collect();
            let n = ids.len();
            ids.sort_by_key(|p| p.0);
            ids.dedup();
            assert_eq!(ids.len(), n, "quad stems must not share parameters");
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            training: self.training,
        }
    }

    /// Parameter ids of stem `s` (quad: one per stream; dual: visible, infrared).
    pub fn stem_params(&self, s: usize) -> Vec<ParamId> {
        self.layout.stems[s].params()
    }

    pub fn alb(&self, k: usize) -> &Alb {
        &self.layout.albs[k]
    }

    fn stem_for(&self, stream: usize) -> &ConvBn {
        match self.cfg.qfe {
            QfeMode::Quad => &self.layout.stems[stream],
            QfeMode::Dual => &self.layout.stems[stream / 2],
        }
    }

    fn stem(&self, fw: &mut Forward<T>, stream: usize, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("stream inputs must be [B, 3, H, W], got {s:?}")));
        }
        let y = self.stem_for(stream).forward(fw, x)?;
        fw.graph.max_pool2d(y, self.layout.stem_pool, self.layout.stem_pool)
    }

    /// Four stem outputs, one per stream, in `vg, vc, tg, tc` order. In dual
    /// mode paired streams run through their shared stem together.
    pub fn qfe_forward(&self, fw: &mut Forward<T>, x: [Var; 4]) -> Result<[Var; 4]> {
        match self.cfg.qfe {
            QfeMode::Quad => {
                let mut out = x;
                for (s, o) in out.iter_mut().enumerate() {
                    *o = self.stem(fw, s, x[s])?;
                }
                Ok(out)
            }
            QfeMode::Dual => {
                let mut out = x;
                for pair in [0, 2] {
                    let b = fw.graph.shape(x[pair])[0];
                    let both = fw.graph.concat(&[x[pair], x[pair + 1]])?;
                    let y = self.stem(fw, pair, both)?;
                    out[pair] = fw.graph.slice_rows(y, 0, b)?;
                    out[pair + 1] = fw.graph.slice_rows(y, b, b)?;
                }
                Ok(out)
            }
        }
    }

    /// `alpha * g + (1 - alpha) * c`.
    pub fn fuse_streams(fw: &mut Forward<T>, g: Var, c: Var, alpha: f64) -> Result<Var> {
        if fw.graph.shape(g) != fw.graph.shape(c) {
            return Err(Error::Shape(format!(
                "fuse_streams shapes differ: {:?} vs {:?}",
                fw.graph.shape(g),
                fw.graph.shape(c)
            )));
        }
        let a = fw.graph.scale(g, alpha);
        let b = fw.graph.scale(c, 1.0 - alpha);
        fw.graph.add(a, b)
    }

    /// ALB chain starting from `F_0 = G_3`.
    pub fn mimb_forward(&self, fw: &mut Forward<T>, g: &[Var], attention: &mut Vec<Var>) -> Result<Var> {
        if g.len() < 4 {
            return Err(Error::Shape(format!("MIMB needs G_0..G_3, got {} stage outputs", g.len())));
        }
        let mut f = g[3];
        if !self.cfg.mimb {
            return Ok(f);
        }
        for (k, alb) in self.layout.albs.iter().enumerate() {
            let out = alb.forward(fw, f, g[self.cfg.injection_source(k)])?;
            attention.push(out.attn);
            f = out.out;
        }
        Ok(f)
    }

    /// Shared stages, MIMB and the optional final stage, starting at `G_0`.
    pub fn backbone(&self, fw: &mut Forward<T>, g0: Var, attention: &mut Vec<Var>) -> Result<StageOutputs> {
        let mut g = vec![g0];
        for stage in &self.layout.stages[..3] {
            let next = stage.forward(fw, *g.last().unwrap())?;
            g.push(next);
        }
        let mut f = self.mimb_forward(fw, &g, attention)?;
        if self.cfg.final_stage {
            f = self.layout.stages[3].forward(fw, f)?;
        }
        Ok(StageOutputs { g, f_final: f })
    }

    /// Pooled feature through the BN neck, `[N, C]`.
    pub fn head(&self, fw: &mut Forward<T>, f: Var) -> Result<Var> {
        let pooled = fw.graph.global_avg_pool(f)?;
        self.layout.neck.forward(fw, pooled)
    }

    /// The training path with an explicit norm mode. Train-mode norms use
    /// batch statistics over all `4B` rows.
    pub fn forward_streams(&self, fw: &mut Forward<T>, x: [Var; 4]) -> Result<TrainOutput> {
        let b = fw.graph.shape(x[0])[0];
        for v in &x[1..] {
            if fw.graph.shape(*v) != fw.graph.shape(x[0]) {
                return Err(Error::Shape("the four stream inputs must share one shape".into()));
            }
        }
        let stems = self.qfe_forward(fw, x)?;
        let g0 = fw.graph.concat(&stems)?;
        let mut attention = Vec::new();
        let stages = self.backbone(fw, g0, &mut attention)?;
        let pooled = fw.graph.global_avg_pool(stages.f_final)?;
        let neck = self.layout.neck.forward(fw, pooled)?;
        let w = fw.p(self.layout.classifier);
        let logits = fw.graph.linear(neck, w, None)?;
        let embeddings = fw.graph.l2_normalize(neck, 1e-12)?;
        let mut streams = [embeddings; 4];
        for (s, v) in streams.iter_mut().enumerate() {
            *v = fw.graph.slice_rows(embeddings, s * b, b)?;
        }
        Ok(TrainOutput {
            embeddings,
            streams,
            logits,
            stages,
            attention,
        })
    }

    /// Training forward pass with batch statistics.
    pub fn forward_train(&self, fw: &mut Forward<T>, inputs: &StreamInputs<T>) -> Result<TrainOutput> {
        if !self.training {
            return Err(Error::Usage("forward_train called on a model in eval mode".into()));
        }
        if fw.mode != NormMode::Train {
            return Err(Error::Usage("forward_train needs a train-mode forward context".into()));
        }
        let x = inputs.streams.clone().map(|t| fw.graph.constant(t));
        self.forward_streams(fw, x)
    }

    /// Eval embeddings for one modality: `g` and `c` are the deterministic
    /// `[N, 3, H, W]` views; the two stem outputs are fused before the
    /// shared stages. Rows are L2-normalized.
    pub fn forward_eval(&self, g: &Tensor<T>, c: &Tensor<T>, infrared: bool) -> Result<Tensor<T>> {
        if self.training {
            return Err(Error::Usage("forward_eval called on a model in train mode".into()));
        }
        if g.shape() != c.shape() {
            return Err(Error::Shape(format!("eval views differ: {:?} vs {:?}", g.shape(), c.shape())));
        }
        let mut graph = Graph::new();
        let mut fw = Forward::new(&mut graph, &self.store, NormMode::Eval, false);
        let xg = fw.graph.constant(g.clone());
        let xc = fw.graph.constant(c.clone());
        let (sg, sc) = if infrared { (2, 3) } else { (0, 1) };
        let gg = self.stem(&mut fw, sg, xg)?;
        let gc = self.stem(&mut fw, sc, xc)?;
        let fused = Self::fuse_streams(&mut fw, gg, gc, self.cfg.fusion_alpha)?;
        let stages = self.backbone(&mut fw, fused, &mut Vec::new())?;
        let neck = self.head(&mut fw, stages.f_final)?;
        let emb = fw.graph.l2_normalize(neck, 1e-12)?;
        Ok(graph.value(emb).clone())
    }
}
