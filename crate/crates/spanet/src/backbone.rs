//! Four-stage SPANetV2 backbones built from SPAM, SepConv, and attention
//! mixers.
//!
//! A model is a stem (7x7 stride-4 convolution, post-norm), four stages of
//! residual blocks joined by 3x3 stride-2 downsamplers (pre-norm), and a
//! classifier head (global average pool, norm, zero-initialized linear).
//! Each block is the usual two-branch layout:
//!
//! ```text
//! y = res_scale .* x + branch_scale .* mixer(norm1(x))
//! z = res_scale .* y + branch_scale .* mlp(norm2(y))
//! ```
//!
//! where `res_scale` weights the identity path (learnable, default on in the
//! last two stages) and `branch_scale` weights the function path (an ablation
//! switch, off by default; initialized to 1e-5 when enabled via
//! `layer_scale_stages` and to 1.0 via `branch_scale_stages`).
//!
//! Everything is plain `f64`, deterministic from the config seed, and
//! reproducible: parameter initialization draws from named substreams, so it
//! does not depend on construction order. `backward_logits` implements the
//! full hand-derived reverse pass for finite-difference verification.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::conv_support::correlate2d;
use crate::rng::SeedStream;
use crate::spam::{
    channel_linear, depthwise_conv, spam_backward, spam_forward, SpamParams, SrfMode,
};
use crate::tensor::{
    gelu, gelu_prime, softmax_rows, softmax_rows_backward, spatial_norm_affine,
    spatial_norm_backward, FeatureMap, NORM_EPS,
};
use crate::{Error, Result};

/// Downsampling convolution geometry per stage (stem first).
pub const DOWNSAMPLE_KERNELS: [usize; 4] = [7, 3, 3, 3];
pub const DOWNSAMPLE_STRIDES: [usize; 4] = [4, 2, 2, 2];
pub const DOWNSAMPLE_PADDINGS: [usize; 4] = [2, 1, 1, 1];

/// Channel-MLP expansion ratio.
pub const MLP_RATIO: usize = 4;
/// SepConv pointwise expansion ratio and depthwise kernel size.
pub const SEPCONV_RATIO: usize = 2;
pub const SEPCONV_KERNEL: usize = 7;
/// Multi-head attention head width (falls back to one head when narrower).
pub const ATTENTION_HEAD_DIM: usize = 32;
/// Initial value for function-branch gains enabled via `layer_scale_stages`.
pub const LAYER_SCALE_INIT: f64 = 1e-5;

/// Token mixer choices per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Spam,
    SepConv,
    Attention,
    MixAttention,
}

fn default_res_scale_stages() -> Vec<usize> {
    vec![3, 4]
}

fn default_srf_mode() -> SrfMode {
    SrfMode::Depthwise
}

fn default_input_size() -> usize {
    224
}

fn default_num_classes() -> usize {
    1000
}

fn default_kernels() -> [usize; 4] {
    DOWNSAMPLE_KERNELS
}

fn default_strides() -> [usize; 4] {
    DOWNSAMPLE_STRIDES
}

fn default_paddings() -> [usize; 4] {
    DOWNSAMPLE_PADDINGS
}

/// Architecture description. Serializes to/from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Embedding width per stage.
    pub dims: [usize; 4],
    /// Residual blocks per stage.
    pub blocks: [usize; 4],
    /// Token mixer per stage.
    pub mixers: [MixerKind; 4],
    /// 1-based stages whose identity paths carry learnable gains (init 1.0).
    #[serde(default = "default_res_scale_stages")]
    pub res_scale_stages: Vec<usize>,
    /// 1-based stages whose function branches carry gains initialized to
    /// 1e-5 (ablation switch; empty by default).
    #[serde(default)]
    pub layer_scale_stages: Vec<usize>,
    /// 1-based stages whose function branches carry gains initialized to 1.0
    /// (ablation switch; empty by default).
    #[serde(default)]
    pub branch_scale_stages: Vec<usize>,
    /// Enable bias vectors on norms, linears, and convolutions.
    #[serde(default)]
    pub biases: bool,
    /// Spectral-mask mode for SPAM mixers.
    #[serde(default = "default_srf_mode")]
    pub srf_mode: SrfMode,
    /// Seed for deterministic initialization.
    pub seed: u64,
    /// Side length of the (square) input image; SPAM masks are sized from it.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Classifier output width.
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Downsampling geometry (stem first). Fixed by the architecture;
    /// configurable only so that files can state it explicitly.
    #[serde(default = "default_kernels")]
    pub downsample_kernels: [usize; 4],
    #[serde(default = "default_strides")]
    pub downsample_strides: [usize; 4],
    #[serde(default = "default_paddings")]
    pub downsample_paddings: [usize; 4],
}

impl StageConfig {
    fn base(dims: [usize; 4], blocks: [usize; 4], mixers: [MixerKind; 4], seed: u64) -> Self {
        Self {
            dims,
            blocks,
            mixers,
            res_scale_stages: default_res_scale_stages(),
            layer_scale_stages: Vec::new(),
            branch_scale_stages: Vec::new(),
            biases: false,
            srf_mode: SrfMode::Depthwise,
            seed,
            input_size: default_input_size(),
            num_classes: default_num_classes(),
            downsample_kernels: DOWNSAMPLE_KERNELS,
            downsample_strides: DOWNSAMPLE_STRIDES,
            downsample_paddings: DOWNSAMPLE_PADDINGS,
        }
    }

    /// S18 scale, SPAM in every stage.
    pub fn s18_pure(seed: u64) -> Self {
        Self::base(
            [64, 128, 320, 512],
            [3, 3, 9, 3],
            [MixerKind::Spam; 4],
            seed,
        )
    }

    /// S18 scale, hybrid mixer layout.
    pub fn s18_hybrid(seed: u64) -> Self {
        Self::base(
            [64, 128, 320, 512],
            [3, 3, 9, 3],
            [
                MixerKind::Spam,
                MixerKind::Spam,
                MixerKind::MixAttention,
                MixerKind::Attention,
            ],
            seed,
        )
    }

    /// Desk-scale model for tests: one block per stage, 64x64 inputs.
    pub fn toy_pure(seed: u64) -> Self {
        let mut c = Self::base([8, 16, 32, 64], [1, 1, 1, 1], [MixerKind::Spam; 4], seed);
        c.input_size = 64;
        c.num_classes = 10;
        c
    }

    /// Desk-scale hybrid: exercises every mixer kind.
    pub fn toy_hybrid(seed: u64) -> Self {
        let mut c = Self::base(
            [8, 16, 32, 64],
            [1, 1, 1, 1],
            [
                MixerKind::Spam,
                MixerKind::SepConv,
                MixerKind::MixAttention,
                MixerKind::Attention,
            ],
            seed,
        );
        c.input_size = 64;
        c.num_classes = 10;
        c
    }

    /// Spatial resolution of stage `s` (0-based) feature maps.
    pub fn stage_resolution(&self, s: usize) -> usize {
        self.input_size / 4 / (1 << s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.downsample_kernels != DOWNSAMPLE_KERNELS
            || self.downsample_strides != DOWNSAMPLE_STRIDES
            || self.downsample_paddings != DOWNSAMPLE_PADDINGS
        {
            return bad(format!(
                "downsample geometry is fixed at kernels {DOWNSAMPLE_KERNELS:?}, strides {DOWNSAMPLE_STRIDES:?}, paddings {DOWNSAMPLE_PADDINGS:?}"
            ));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        for (s, (&d, &b)) in self.dims.iter().zip(&self.blocks).enumerate() {
            if d == 0 || b == 0 {
                return bad(format!("stage {} has dim {d}, blocks {b}", s + 1));
            }
            if self.mixers[s] == MixerKind::Spam && d % 4 != 0 {
                return bad(format!(
                    "stage {} uses SPAM but dim {d} is not divisible by 4",
                    s + 1
                ));
            }
            if matches!(self.mixers[s], MixerKind::Attention) && d >= ATTENTION_HEAD_DIM && d % ATTENTION_HEAD_DIM != 0 {
                return bad(format!(
                    "stage {} attention dim {d} not divisible by head width {ATTENTION_HEAD_DIM}",
                    s + 1
                ));
            }
        }
        for set in [
            &self.res_scale_stages,
            &self.layer_scale_stages,
            &self.branch_scale_stages,
        ] {
            if set.iter().any(|&s| s == 0 || s > 4) {
                return bad(format!("stage sets use 1-based stages 1..=4, got {set:?}"));
            }
        }
        for s in 1..=4 {
            if self.layer_scale_stages.contains(&s) && self.branch_scale_stages.contains(&s) {
                return bad(format!(
                    "stage {s} enables both layer-scale and branch-scale gains"
                ));
            }
        }
        Ok(())
    }

    fn has_res_scale(&self, stage: usize) -> bool {
        self.res_scale_stages.contains(&(stage + 1))
    }

    /// Function-branch gain init for a 0-based stage, if enabled.
    fn branch_gain_init(&self, stage: usize) -> Option<f64> {
        if self.layer_scale_stages.contains(&(stage + 1)) {
            Some(LAYER_SCALE_INIT)
        } else if self.branch_scale_stages.contains(&(stage + 1)) {
            Some(1.0)
        } else {
            None
        }
    }

    fn attention_heads(&self, stage: usize) -> usize {
        let d = self.dims[stage];
        if d < ATTENTION_HEAD_DIM {
            1
        } else {
            d / ATTENTION_HEAD_DIM
        }
    }
}

/// Gain (+ optional bias) for a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gain: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl NormLayer {
    fn new(d: usize, biases: bool) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: biases.then(|| vec![0.0; d]),
        }
    }
}

/// A full (cross-channel) 2D convolution with stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `weights[((o*in_ch + i)*k + r)*k + t]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvLayer {
    fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        biases: bool,
        stream: &SeedStream,
    ) -> Self {
        let std = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let mut s = stream.split("weight");
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weights: s
                .normal_vec(out_ch * in_ch * kernel * kernel)
                .iter()
                .map(|v| v * std)
                .collect(),
            bias: biases.then(|| vec![0.0; out_ch]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (d, h, w) = x.dims();
        if d != self.in_ch {
            return Err(Error::ShapeError(format!(
                "conv expects {} input channels, got {d}",
                self.in_ch
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::ShapeError(format!(
                "{h}x{w} input too small for kernel {}",
                self.kernel
            )));
        }
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let mut out = FeatureMap::zeros(self.out_ch, ho, wo);
        for o in 0..self.out_ch {
            let acc = out.channel_mut(o);
            for i in 0..self.in_ch {
                let kslice = &self.weights[(o * self.in_ch + i) * k * k..(o * self.in_ch + i + 1) * k * k];
                let (y, _, _) = correlate2d(x.channel(i), h, w, kslice, k, self.stride, self.pad);
                for (a, b) in acc.iter_mut().zip(&y) {
                    *a += b;
                }
            }
            if let Some(b) = &self.bias {
                for v in acc.iter_mut() {
                    *v += b[o];
                }
            }
        }
        Ok(out)
    }

    /// Gradients given input and upstream: `(d_input, d_weights, d_bias)`.
    fn backward(&self, x: &FeatureMap, upstream: &FeatureMap) -> (FeatureMap, Vec<f64>, Option<Vec<f64>>) {
        let (_, h, w) = x.dims();
        let (_, ho, wo) = upstream.dims();
        let k = self.kernel;
        let mut dx = FeatureMap::zeros(self.in_ch, h, w);
        let mut dw = vec![0.0; self.weights.len()];
        let mut db = self.bias.as_ref().map(|_| vec![0.0; self.out_ch]);
        for o in 0..self.out_ch {
            let g = upstream.channel(o);
            if let Some(db) = &mut db {
                db[o] = g.iter().sum();
            }
            for i in 0..self.in_ch
            {
                let kbase = (o * self.in_ch + i) * k * k;
                let xin = x.channel(i);
                let dxi = dx.channel_mut(i);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for r in 0..k {
                            let yy = (oy * self.stride + r) as isize - self.pad as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for t in 0..k {
                                let xx = (ox * self.stride + t) as isize - self.pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let pix = yy as usize * w + xx as usize;
                                dw[kbase + r * k + t] += gv * xin[pix];
                                dxi[pix] += gv * self.weights[kbase + r * k + t];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

/// Multi-head self-attention weights (tokens are feature-map pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMixer {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Option<Vec<f64>>,
    pub bk: Option<Vec<f64>>,
    pub bv: Option<Vec<f64>>,
    pub bo: Option<Vec<f64>>,
}

/// MixAttention: single-head attention and a depthwise 7x7 convolution share
/// one value projection; their sum passes through an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MixAttentionMixer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    /// Depthwise 7x7 bank, `dw[c*49 ..]`.
    pub dw: Vec<f64>,
    pub bq: Option<Vec<f64>>,
    pub bk: Option<Vec<f64>>,
    pub bv: Option<Vec<f64>>,
    pub bdw: Option<Vec<f64>>,
    pub bo: Option<Vec<f64>>,
}

/// SepConv: pointwise expand (ratio 2), GELU, depthwise 7x7, pointwise project.
#[derive(Debug, Clone, PartialEq)]
pub struct SepConvMixer {
    pub pw1: Array2<f64>,
    pub b1: Option<Vec<f64>>,
    /// Depthwise 7x7 bank over the expanded channels.
    pub dw: Vec<f64>,
    pub bdw: Option<Vec<f64>>,
    pub pw2: Array2<f64>,
    pub b2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Spam(SpamParams),
    SepConv(SepConvMixer),
    Attention(AttentionMixer),
    MixAttention(MixAttentionMixer),
}

/// One residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: NormLayer,
    pub mixer: Mixer,
    pub norm2: NormLayer,
    pub mlp_fc1: Array2<f64>,
    pub mlp_b1: Option<Vec<f64>>,
    pub mlp_fc2: Array2<f64>,
    pub mlp_b2: Option<Vec<f64>>,
    /// Identity-path gains (res-scale), shared init 1.0.
    pub res1: Option<Vec<f64>>,
    pub res2: Option<Vec<f64>>,
    /// Function-path gains (layer-/branch-scale ablations).
    pub branch1: Option<Vec<f64>>,
    pub branch2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub norm: NormLayer,
    pub conv: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Stage 1 is fed by the stem; later stages carry a pre-norm downsampler.
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

/// A built model: immutable parameters plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: StageConfig,
    pub stem: ConvLayer,
    pub stem_norm: NormLayer,
    pub stages: Vec<Stage>,
    pub head_norm: NormLayer,
    /// Classifier weights, `num_classes x dims[3]`, zero-initialized.
    pub fc: Array2<f64>,
    pub fc_bias: Option<Vec<f64>>,
}

fn linear_init(stream: &SeedStream, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let std = 1.0 / (cols as f64).sqrt();
    let mut s = stream.split(name);
    Array2::from_shape_vec(
        (rows, cols),
        s.normal_vec(rows * cols).iter().map(|v| v * std).collect(),
    )
    .expect("sized here")
}

fn depthwise_init(stream: &SeedStream, name: &str, channels: usize, k: usize) -> Vec<f64> {
    let std = 1.0 / k as f64;
    let mut s = stream.split(name);
    s.normal_vec(channels * k * k).iter().map(|v| v * std).collect()
}

/// Build a model with deterministic, seed-derived initialization.
pub fn build_model(config: &StageConfig) -> Result<Model> {
    config.validate()?;
    let root = SeedStream::new(config.seed);
    let biases = config.biases;
    let bias = |n: usize| biases.then(|| vec![0.0; n]);

    let stem_stream = root.split("stem.conv");
    let stem = ConvLayer::random(
        3,
        config.dims[0],
        DOWNSAMPLE_KERNELS[0],
        DOWNSAMPLE_STRIDES[0],
        DOWNSAMPLE_PADDINGS[0],
        biases,
        &stem_stream,
    );

    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let d = config.dims[s];
        let res = config.stage_resolution(s);
        let downsample = (s > 0).then(|| Downsample {
            norm: NormLayer::new(config.dims[s - 1], biases),
            conv: ConvLayer::random(
                config.dims[s - 1],
                d,
                DOWNSAMPLE_KERNELS[s],
                DOWNSAMPLE_STRIDES[s],
                DOWNSAMPLE_PADDINGS[s],
                biases,
                &root.split(&format!("stage{s}.downsample.conv")),
            ),
        });
        let mut blocks = Vec::with_capacity(config.blocks[s]);
        for b in 0..config.blocks[s] {
            let prefix = format!("stage{s}.block{b}");
            let scoped = root.split(&prefix);
            let mixer = match config.mixers[s] {
                MixerKind::Spam => Mixer::Spam(SpamParams::random(
                    d,
                    res,
                    res,
                    config.srf_mode,
                    biases,
                    &scoped.split("mixer.spam"),
                )?),
                MixerKind::SepConv => {
                    let mid = SEPCONV_RATIO * d;
                    Mixer::SepConv(SepConvMixer {
                        pw1: linear_init(&scoped, "mixer.sep.pw1", mid, d),
                        b1: bias(mid),
                        dw: depthwise_init(&scoped, "mixer.sep.dw", mid, SEPCONV_KERNEL),
                        bdw: bias(mid),
                        pw2: linear_init(&scoped, "mixer.sep.pw2", d, mid),
                        b2: bias(d),
                    })
                }
                MixerKind::Attention => Mixer::Attention(AttentionMixer {
                    heads: config.attention_heads(s),
                    wq: linear_init(&scoped, "mixer.attn.wq", d, d),
                    wk: linear_init(&scoped, "mixer.attn.wk", d, d),
                    wv: linear_init(&scoped, "mixer.attn.wv", d, d),
                    wo: linear_init(&scoped, "mixer.attn.wo", d, d),
                    bq: bias(d),
                    bk: bias(d),
                    bv: bias(d),
                    bo: bias(d),
                }),
                MixerKind::MixAttention => Mixer::MixAttention(MixAttentionMixer {
                    wq: linear_init(&scoped, "mixer.mixattn.wq", d, d),
                    wk: linear_init(&scoped, "mixer.mixattn.wk", d, d),
                    wv: linear_init(&scoped, "mixer.mixattn.wv", d, d),
                    wo: linear_init(&scoped, "mixer.mixattn.wo", d, d),
                    dw: depthwise_init(&scoped, "mixer.mixattn.dw", d, SEPCONV_KERNEL),
                    bq: bias(d),
                    bk: bias(d),
                    bv: bias(d),
                    bdw: bias(d),
                    bo: bias(d),
                }),
            };
            let gains = |init: f64, on: bool| on.then(|| vec![init; d]);
            blocks.push(Block {
                norm1: NormLayer::new(d, biases),
                mixer,
                norm2: NormLayer::new(d, biases),
                mlp_fc1: linear_init(&scoped, "mlp.fc1", MLP_RATIO * d, d),
                mlp_b1: bias(MLP_RATIO * d),
                mlp_fc2: linear_init(&scoped, "mlp.fc2", d, MLP_RATIO * d),
                mlp_b2: bias(d),
                res1: gains(1.0, config.has_res_scale(s)),
                res2: gains(1.0, config.has_res_scale(s)),
                branch1: config.branch_gain_init(s).and_then(|v| gains(v, true)),
                branch2: config.branch_gain_init(s).and_then(|v| gains(v, true)),
            });
        }
        stages.push(Stage { downsample, blocks });
    }

    Ok(Model {
        config: config.clone(),
        stem,
        stem_norm: NormLayer::new(config.dims[0], biases),
        stages,
        head_norm: NormLayer::new(config.dims[3], biases),
        fc: Array2::zeros((config.num_classes, config.dims[3])),
        fc_bias: bias(config.num_classes),
    })
}

/// Every named parameter slot of a config with its element count, in the
/// same order [`Model::visit`] walks them. Pure: no tensors materialize.
pub fn layout(config: &StageConfig) -> Result<Vec<(String, usize)>> {
    config.validate()?;
    let biases = config.biases;
    let mut out: Vec<(String, usize)> = Vec::new();
    let norm = |prefix: &str, d: usize, out: &mut Vec<(String, usize)>| {
        out.push((format!("{prefix}.gain"), d));
        if biases {
            out.push((format!("{prefix}.bias"), d));
        }
    };

    out.push((
        "stem.conv.weight".into(),
        config.dims[0] * 3 * DOWNSAMPLE_KERNELS[0] * DOWNSAMPLE_KERNELS[0],
    ));
    if biases {
        out.push(("stem.conv.bias".into(), config.dims[0]));
    }
    norm("stem.norm", config.dims[0], &mut out);

    for s in 0..4 {
        let d = config.dims[s];
        let res = config.stage_resolution(s);
        if s > 0 {
            norm(&format!("stage{s}.downsample.norm"), config.dims[s - 1], &mut out);
            out.push((
                format!("stage{s}.downsample.conv.weight"),
                d * config.dims[s - 1] * DOWNSAMPLE_KERNELS[s] * DOWNSAMPLE_KERNELS[s],
            ));
            if biases {
                out.push((format!("stage{s}.downsample.conv.bias"), d));
            }
        }
        for b in 0..config.blocks[s] {
            let p = format!("stage{s}.block{b}");
            norm(&format!("{p}.norm1"), d, &mut out);
            match config.mixers[s] {
                MixerKind::Spam => {
                    // Mirror SpamParams::visit order via a throwaway list.
                    let dh = d / 4;
                    let mask_planes = match config.srf_mode {
                        SrfMode::Depthwise => dh,
                        SrfMode::Single => 1,
                    };
                    let mp = format!("{p}.mixer.spam");
                    out.push((format!("{mp}.in_linear"), d * d));
                    if biases {
                        out.push((format!("{mp}.in_linear.bias"), d));
                    }
                    out.push((format!("{mp}.value_linear"), d * d));
                    if biases {
                        out.push((format!("{mp}.value_linear.bias"), d));
                    }
                    for (i, m) in crate::spam::KERNEL_SIZES.iter().enumerate() {
                        out.push((format!("{mp}.head{i}.kernel"), dh * m * m));
                        out.push((format!("{mp}.head{i}.mask"), mask_planes * res * res));
                        out.push((format!("{mp}.head{i}.exp"), 2 * dh * dh));
                        if biases {
                            out.push((format!("{mp}.head{i}.exp.bias"), 2 * dh));
                        }
                    }
                    out.push((format!("{mp}.norm.gain"), 2 * d));
                    out.push((format!("{mp}.proj"), d * 2 * d));
                    if biases {
                        out.push((format!("{mp}.proj.bias"), d));
                    }
                    out.push((format!("{mp}.out_linear"), d * d));
                    if biases {
                        out.push((format!("{mp}.out_linear.bias"), d));
                    }
                }
                MixerKind::SepConv => {
                    let mid = SEPCONV_RATIO * d;
                    out.push((format!("{p}.mixer.sep.pw1.weight"), mid * d));
                    if biases {
                        out.push((format!("{p}.mixer.sep.pw1.bias"), mid));
                    }
                    out.push((format!("{p}.mixer.sep.dw.weight"), mid * SEPCONV_KERNEL * SEPCONV_KERNEL));
                    if biases {
                        out.push((format!("{p}.mixer.sep.dw.bias"), mid));
                    }
                    out.push((format!("{p}.mixer.sep.pw2.weight"), d * mid));
                    if biases {
                        out.push((format!("{p}.mixer.sep.pw2.bias"), d));
                    }
                }
                MixerKind::Attention => {
                    for n in ["wq", "wk", "wv", "wo"] {
                        out.push((format!("{p}.mixer.attn.{n}.weight"), d * d));
                        if biases {
                            out.push((format!("{p}.mixer.attn.{n}.bias"), d));
                        }
                    }
                }
                MixerKind::MixAttention => {
                    for n in ["wq", "wk", "wv"] {
                        out.push((format!("{p}.mixer.mixattn.{n}.weight"), d * d));
                        if biases {
                            out.push((format!("{p}.mixer.mixattn.{n}.bias"), d));
                        }
                    }
                    out.push((format!("{p}.mixer.mixattn.dw.weight"), d * SEPCONV_KERNEL * SEPCONV_KERNEL));
                    if biases {
                        out.push((format!("{p}.mixer.mixattn.dw.bias"), d));
                    }
                    out.push((format!("{p}.mixer.mixattn.wo.weight"), d * d));
                    if biases {
                        out.push((format!("{p}.mixer.mixattn.wo.bias"), d));
                    }
                }
            }
            norm(&format!("{p}.norm2"), d, &mut out);
            out.push((format!("{p}.mlp.fc1.weight"), MLP_RATIO * d * d));
            if biases {
                out.push((format!("{p}.mlp.fc1.bias"), MLP_RATIO * d));
            }
            out.push((format!("{p}.mlp.fc2.weight"), d * MLP_RATIO * d));
            if biases {
                out.push((format!("{p}.mlp.fc2.bias"), d));
            }
            if config.has_res_scale(s) {
                out.push((format!("{p}.res_scale1"), d));
                out.push((format!("{p}.res_scale2"), d));
            }
            if config.branch_gain_init(s).is_some() {
                out.push((format!("{p}.branch_scale1"), d));
                out.push((format!("{p}.branch_scale2"), d));
            }
        }
    }

    norm("head.norm", config.dims[3], &mut out);
    out.push(("head.fc.weight".into(), config.num_classes * config.dims[3]));
    if biases {
        out.push(("head.fc.bias".into(), config.num_classes));
    }
    Ok(out)
}

/// Total scalar parameter count: a pure function of the config.
pub fn count_params(config: &StageConfig) -> Result<usize> {
    Ok(layout(config)?.iter().map(|(_, n)| n).sum())
}

fn flat(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("row-major weights")
}

fn flat_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("row-major weights")
}

impl Model {
    /// Walk every parameter tensor, flattened, in [`layout`] order.
    pub fn visit<F: FnMut(&str, &[f64])>(&self, f: &mut F) {
        let norm = |name: &str, n: &NormLayer, f: &mut F| {
            f(&format!("{name}.gain"), &n.gain);
            if let Some(b) = &n.bias {
                f(&format!("{name}.bias"), b);
            }
        };
        f("stem.conv.weight", &self.stem.weights);
        if let Some(b) = &self.stem.bias {
            f("stem.conv.bias", b);
        }
        norm("stem.norm", &self.stem_norm, f);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                norm(&format!("stage{s}.downsample.norm"), &ds.norm, f);
                f(&format!("stage{s}.downsample.conv.weight"), &ds.conv.weights);
                if let Some(b) = &ds.conv.bias {
                    f(&format!("stage{s}.downsample.conv.bias"), b);
                }
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{s}.block{b}");
                norm(&format!("{p}.norm1"), &block.norm1, f);
                match &block.mixer {
                    Mixer::Spam(sp) => {
                        sp.visit(&mut |n, sl| f(&format!("{p}.mixer.spam.{n}"), sl));
                    }
                    Mixer::SepConv(sc) => {
                        f(&format!("{p}.mixer.sep.pw1.weight"), flat(&sc.pw1));
                        if let Some(b) = &sc.b1 {
                            f(&format!("{p}.mixer.sep.pw1.bias"), b);
                        }
                        f(&format!("{p}.mixer.sep.dw.weight"), &sc.dw);
                        if let Some(b) = &sc.bdw {
                            f(&format!("{p}.mixer.sep.dw.bias"), b);
                        }
                        f(&format!("{p}.mixer.sep.pw2.weight"), flat(&sc.pw2));
                        if let Some(b) = &sc.b2 {
                            f(&format!("{p}.mixer.sep.pw2.bias"), b);
                        }
                    }
                    Mixer::Attention(at) => {
                        let pairs: [(&str, &Array2<f64>, &Option<Vec<f64>>); 4] = [
                            ("wq", &at.wq, &at.bq),
                            ("wk", &at.wk, &at.bk),
                            ("wv", &at.wv, &at.bv),
                            ("wo", &at.wo, &at.bo),
                        ];
                        for (n, w, bo) in pairs {
                            f(&format!("{p}.mixer.attn.{n}.weight"), flat(w));
                            if let Some(b) = bo {
                                f(&format!("{p}.mixer.attn.{n}.bias"), b);
                            }
                        }
                    }
                    Mixer::MixAttention(mx) => {
                        let pairs: [(&str, &Array2<f64>, &Option<Vec<f64>>); 3] = [
                            ("wq", &mx.wq, &mx.bq),
                            ("wk", &mx.wk, &mx.bk),
                            ("wv", &mx.wv, &mx.bv),
                        ];
                        for (n, w, bo) in pairs {
                            f(&format!("{p}.mixer.mixattn.{n}.weight"), flat(w));
                            if let Some(b) = bo {
                                f(&format!("{p}.mixer.mixattn.{n}.bias"), b);
                            }
                        }
                        f(&format!("{p}.mixer.mixattn.dw.weight"), &mx.dw);
                        if let Some(b) = &mx.bdw {
                            f(&format!("{p}.mixer.mixattn.dw.bias"), b);
                        }
                        f(&format!("{p}.mixer.mixattn.wo.weight"), flat(&mx.wo));
                        if let Some(b) = &mx.bo {
                            f(&format!("{p}.mixer.mixattn.wo.bias"), b);
                        }
                    }
                }
                norm(&format!("{p}.norm2"), &block.norm2, f);
                f(&format!("{p}.mlp.fc1.weight"), flat(&block.mlp_fc1));
                if let Some(b) = &block.mlp_b1 {
                    f(&format!("{p}.mlp.fc1.bias"), b);
                }
                f(&format!("{p}.mlp.fc2.weight"), flat(&block.mlp_fc2));
                if let Some(b) = &block.mlp_b2 {
                    f(&format!("{p}.mlp.fc2.bias"), b);
                }
                if let Some(r) = &block.res1 {
                    f(&format!("{p}.res_scale1"), r);
                }
                if let Some(r) = &block.res2 {
                    f(&format!("{p}.res_scale2"), r);
                }
                if let Some(r) = &block.branch1 {
                    f(&format!("{p}.branch_scale1"), r);
                }
                if let Some(r) = &block.branch2 {
                    f(&format!("{p}.branch_scale2"), r);
                }
            }
        }
        norm("head.norm", &self.head_norm, f);
        f("head.fc.weight", flat(&self.fc));
        if let Some(b) = &self.fc_bias {
            f("head.fc.bias", b);
        }
    }

    /// Mutable variant of [`Self::visit`], same names and order.
    pub fn visit_mut<F: FnMut(&str, &mut [f64])>(&mut self, f: &mut F) {
        let norm = |name: &str, n: &mut NormLayer, f: &mut F| {
            f(&format!("{name}.gain"), &mut n.gain);
            if let Some(b) = &mut n.bias {
                f(&format!("{name}.bias"), b);
            }
        };
        f("stem.conv.weight", &mut self.stem.weights);
        if let Some(b) = &mut self.stem.bias {
            f("stem.conv.bias", b);
        }
        norm("stem.norm", &mut self.stem_norm, f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if let Some(ds) = &mut stage.downsample {
                norm(&format!("stage{s}.downsample.norm"), &mut ds.norm, f);
                f(&format!("stage{s}.downsample.conv.weight"), &mut ds.conv.weights);
                if let Some(b) = &mut ds.conv.bias {
                    f(&format!("stage{s}.downsample.conv.bias"), b);
                }
            }
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stage{s}.block{b}");
                norm(&format!("{p}.norm1"), &mut block.norm1, f);
                match &mut block.mixer {
                    Mixer::Spam(sp) => {
                        sp.visit_mut(&mut |n, sl| f(&format!("{p}.mixer.spam.{n}"), sl));
                    }
                    Mixer::SepConv(sc) => {
                        f(&format!("{p}.mixer.sep.pw1.weight"), flat_mut(&mut sc.pw1));
                        if let Some(b) = &mut sc.b1 {
                            f(&format!("{p}.mixer.sep.pw1.bias"), b);
                        }
                        f(&format!("{p}.mixer.sep.dw.weight"), &mut sc.dw);
                        if let Some(b) = &mut sc.bdw {
                            f(&format!("{p}.mixer.sep.dw.bias"), b);
                        }
                        f(&format!("{p}.mixer.sep.pw2.weight"), flat_mut(&mut sc.pw2));
                        if let Some(b) = &mut sc.b2 {
                            f(&format!("{p}.mixer.sep.pw2.bias"), b);
                        }
                    }
                    Mixer::Attention(at) => {
                        f(&format!("{p}.mixer.attn.wq.weight"), flat_mut(&mut at.wq));
                        if let Some(b) = &mut at.bq {
                            f(&format!("{p}.mixer.attn.wq.bias"), b);
                        }
                        f(&format!("{p}.mixer.attn.wk.weight"), flat_mut(&mut at.wk));
                        if let Some(b) = &mut at.bk {
                            f(&format!("{p}.mixer.attn.wk.bias"), b);
                        }
                        f(&format!("{p}.mixer.attn.wv.weight"), flat_mut(&mut at.wv));
                        if let Some(b) = &mut at.bv {
                            f(&format!("{p}.mixer.attn.wv.bias"), b);
                        }
                        f(&format!("{p}.mixer.attn.wo.weight"), flat_mut(&mut at.wo));
                        if let Some(b) = &mut at.bo {
                            f(&format!("{p}.mixer.attn.wo.bias"), b);
                        }
                    }
                    Mixer::MixAttention(mx) => {
                        f(&format!("{p}.mixer.mixattn.wq.weight"), flat_mut(&mut mx.wq));
                        if let Some(b) = &mut mx.bq {
                            f(&format!("{p}.mixer.mixattn.wq.bias"), b);
                        }
                        f(&format!("{p}.mixer.mixattn.wk.weight"), flat_mut(&mut mx.wk));
                        if let Some(b) = &mut mx.bk {
                            f(&format!("{p}.mixer.mixattn.wk.bias"), b);
                        }
                        f(&format!("{p}.mixer.mixattn.wv.weight"), flat_mut(&mut mx.wv));
                        if let Some(b) = &mut mx.bv {
                            f(&format!("{p}.mixer.mixattn.wv.bias"), b);
                        }
                        f(&format!("{p}.mixer.mixattn.dw.weight"), &mut mx.dw);
                        if let Some(b) = &mut mx.bdw {
                            f(&format!("{p}.mixer.mixattn.dw.bias"), b);
                        }
                        f(&format!("{p}.mixer.mixattn.wo.weight"), flat_mut(&mut mx.wo));
                        if let Some(b) = &mut mx.bo {
                            f(&format!("{p}.mixer.mixattn.wo.bias"), b);
                        }
                    }
                }
                norm(&format!("{p}.norm2"), &mut block.norm2, f);
                f(&format!("{p}.mlp.fc1.weight"), flat_mut(&mut block.mlp_fc1));
                if let Some(b) = &mut block.mlp_b1 {
                    f(&format!("{p}.mlp.fc1.bias"), b);
                }
                f(&format!("{p}.mlp.fc2.weight"), flat_mut(&mut block.mlp_fc2));
                if let Some(b) = &mut block.mlp_b2 {
                    f(&format!("{p}.mlp.fc2.bias"), b);
                }
                if let Some(r) = &mut block.res1 {
                    f(&format!("{p}.res_scale1"), r);
                }
                if let Some(r) = &mut block.res2 {
                    f(&format!("{p}.res_scale2"), r);
                }
                if let Some(r) = &mut block.branch1 {
                    f(&format!("{p}.branch_scale1"), r);
                }
                if let Some(r) = &mut block.branch2 {
                    f(&format!("{p}.branch_scale2"), r);
                }
            }
        }
        norm("head.norm", &mut self.head_norm, f);
        f("head.fc.weight", flat_mut(&mut self.fc));
        if let Some(b) = &mut self.fc_bias {
            f("head.fc.bias", b);
        }
    }

    /// Same structure, all parameters zero: a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        m.visit_mut(&mut |_, s| s.fill(0.0));
        m
    }
}

fn norm_forward(x: &FeatureMap, n: &NormLayer) -> Result<FeatureMap> {
    spatial_norm_affine(x, &n.gain, n.bias.as_deref(), NORM_EPS)
}

/// Per-channel scale: `y[c, :] = s[c] * x[c, :]`.
fn scale_channels(x: &FeatureMap, s: &[f64]) -> FeatureMap {
    let mut y = x.clone();
    for c in 0..x.channels() {
        let sv = s[c];
        for v in y.channel_mut(c) {
            *v *= sv;
        }
    }
    y
}

fn add_maps(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut y = a.clone();
    for (v, w) in y.data_mut().iter_mut().zip(b.data()) {
        *v += w;
    }
    y
}

/// Per-channel sums of `g .* x`: the gradient of a channel gain.
fn gain_grad(g: &FeatureMap, x: &FeatureMap) -> Vec<f64> {
    (0..g.channels())
        .map(|c| {
            g.channel(c)
                .iter()
                .zip(x.channel(c))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn add_bias(x: &mut FeatureMap, bias: Option<&[f64]>) {
    if let Some(b) = bias {
        for c in 0..x.channels() {
            let bv = b[c];
            for v in x.channel_mut(c) {
                *v += bv;
            }
        }
    }
}

fn bias_grad(g: &FeatureMap) -> Vec<f64> {
    (0..g.channels()).map(|c| g.channel(c).iter().sum()).collect()
}

/// SepConv forward: expand, GELU, depthwise 7x7, project.
pub fn sep_conv_mixer(x: &FeatureMap, p: &SepConvMixer) -> Result<FeatureMap> {
    let mid = channel_linear(&p.pw1, p.b1.as_deref(), x)?;
    let mut act = mid;
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let mut conv = depthwise_conv(&act, &p.dw, SEPCONV_KERNEL)?;
    add_bias(&mut conv, p.bdw.as_deref());
    channel_linear(&p.pw2, p.b2.as_deref(), &conv)
}

fn sep_conv_backward(
    x: &FeatureMap,
    p: &SepConvMixer,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, SepConvMixer)> {
    let mid = channel_linear(&p.pw1, p.b1.as_deref(), x)?;
    let mut act = mid.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let mut conv = depthwise_conv(&act, &p.dw, SEPCONV_KERNEL)?;
    add_bias(&mut conv, p.bdw.as_deref());

    let pw2 = linear_backward_map(&p.pw2, &conv, upstream, p.b2.is_some());
    let bdw = p.bdw.as_ref().map(|_| bias_grad(&pw2.input));
    let (mut d_act, ddw) = depthwise_backward_map(&act, &p.dw, SEPCONV_KERNEL, &pw2.input);
    for (g, &pre) in d_act.data_mut().iter_mut().zip(mid.data()) {
        *g *= gelu_prime(pre);
    }
    let pw1 = linear_backward_map(&p.pw1, x, &d_act, p.b1.is_some());
    Ok((
        pw1.input,
        SepConvMixer {
            pw1: pw1.w,
            b1: pw1.bias,
            dw: ddw,
            bdw,
            pw2: pw2.w,
            b2: pw2.bias,
        },
    ))
}

struct MapLinearGrads {
    w: Array2<f64>,
    bias: Option<Vec<f64>>,
    input: FeatureMap,
}

fn linear_backward_map(
    w: &Array2<f64>,
    x: &FeatureMap,
    upstream: &FeatureMap,
    has_bias: bool,
) -> MapLinearGrads {
    let xm = x.as_matrix();
    let gm = upstream.as_matrix();
    MapLinearGrads {
        w: gm.dot(&xm.t()),
        bias: has_bias.then(|| bias_grad(upstream)),
        input: FeatureMap::from_matrix(&w.t().dot(&gm), x.height(), x.width())
            .expect("shape preserved"),
    }
}

fn depthwise_backward_map(
    x: &FeatureMap,
    kernels: &[f64],
    m: usize,
    upstream: &FeatureMap,
) -> (FeatureMap, Vec<f64>) {
    let (d, h, w) = x.dims();
    let pad = (m - 1) / 2;
    let mut dx = FeatureMap::zeros(d, h, w);
    let mut dk = vec![0.0; kernels.len()];
    for c in 0..d {
        let k = &kernels[c * m * m..(c + 1) * m * m];
        let flipped: Vec<f64> = (0..m * m)
            .map(|z| k[(m - 1 - z / m) * m + (m - 1 - z % m)])
            .collect();
        let g = upstream.channel(c);
        let (dxc, _, _) = correlate2d(g, h, w, &flipped, m, 1, pad);
        dx.channel_mut(c).copy_from_slice(&dxc);
        let xin = x.channel(c);
        let dkc = &mut dk[c * m * m..(c + 1) * m * m];
        for (a, &gv) in g.iter().enumerate() {
            let (y, xc) = (a / w, a % w);
            for r in 0..m {
                let yy = y as isize + r as isize - pad as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for t in 0..m {
                    let xx = xc as isize + t as isize - pad as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    dkc[r * m + t] += gv * xin[yy as usize * w + xx as usize];
                }
            }
        }
    }
    (dx, dk)
}

/// Multi-head attention over pixels-as-tokens. `x` is `D x H x W`; queries,
/// keys, and values are per-pixel channel vectors.
pub fn attention_mixer(x: &FeatureMap, p: &AttentionMixer) -> Result<FeatureMap> {
    let (out, _) = attention_trace(x, p)?;
    Ok(out)
}

struct AttentionCache {
    m: Array2<f64>,       // D x HW input tokens
    q: Array2<f64>,       // D x HW
    k: Array2<f64>,
    v: Array2<f64>,
    a: Vec<Array2<f64>>,  // per head, HW x HW row-stochastic
    o: Array2<f64>,       // D x HW concatenated head outputs
}

fn project(w: &Array2<f64>, b: Option<&[f64]>, m: &Array2<f64>) -> Array2<f64> {
    let mut y = w.dot(m);
    if let Some(b) = b {
        for (mut row, &bv) in y.rows_mut().into_iter().zip(b) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    y
}

fn attention_trace(x: &FeatureMap, p: &AttentionMixer) -> Result<(FeatureMap, AttentionCache)> {
    let (d, h, w) = x.dims();
    if p.wq.dim() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "attention weights are {:?}, input has {d} channels",
            p.wq.dim()
        )));
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{d} channels cannot split into {} heads",
            p.heads
        )));
    }
    let m = x.as_matrix();
    let q = project(&p.wq, p.bq.as_deref(), &m);
    let k = project(&p.wk, p.bk.as_deref(), &m);
    let v = project(&p.wv, p.bv.as_deref(), &m);
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((d, h * w));
    let mut attn = Vec::with_capacity(p.heads);
    for hd in 0..p.heads {
        let rows = s![hd * dh..(hd + 1) * dh, ..];
        let qh = q.slice(rows);
        let kh = k.slice(rows);
        let vh = v.slice(rows);
        let scores = qh.t().dot(&kh).mapv(|s| s * scale);
        let a = softmax_rows(&scores);
        let oh = vh.dot(&a.t());
        o.slice_mut(rows).assign(&oh);
        attn.push(a);
    }
    let y = project(&p.wo, p.bo.as_deref(), &o);
    Ok((
        FeatureMap::from_matrix(&y, h, w)?,
        AttentionCache { m, q, k, v, a: attn, o },
    ))
}

fn attention_backward(
    x: &FeatureMap,
    p: &AttentionMixer,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, AttentionMixer)> {
    let (d, h, w) = x.dims();
    let (_, cache) = attention_trace(x, p)?;
    let gy = upstream.as_matrix();

    let dwo = gy.dot(&cache.o.t());
    let dbo = p.bo.as_ref().map(|_| gy.rows().into_iter().map(|r| r.sum()).collect());
    let do_ = p.wo.t().dot(&gy);

    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((d, h * w));
    let mut dk = Array2::zeros((d, h * w));
    let mut dv = Array2::zeros((d, h * w));
    for hd in 0..p.heads {
        let rows = s![hd * dh..(hd + 1) * dh, ..];
        let qh = cache.q.slice(rows);
        let kh = cache.k.slice(rows);
        let vh = cache.v.slice(rows);
        let a = &cache.a[hd];
        let doh = do_.slice(rows);
        let da = doh.t().dot(&vh);
        let dvh = doh.dot(a);
        let ds = softmax_rows_backward(a, &da).mapv(|v| v * scale);
        let dqh = kh.dot(&ds.t());
        let dkh = qh.dot(&ds);
        dq.slice_mut(rows).assign(&dqh);
        dk.slice_mut(rows).assign(&dkh);
        dv.slice_mut(rows).assign(&dvh);
    }

    let row_sums = |g: &Array2<f64>| g.rows().into_iter().map(|r| r.sum()).collect::<Vec<f64>>();
    let grads = AttentionMixer {
        heads: p.heads,
        wq: dq.dot(&cache.m.t()),
        wk: dk.dot(&cache.m.t()),
        wv: dv.dot(&cache.m.t()),
        wo: dwo,
        bq: p.bq.as_ref().map(|_| row_sums(&dq)),
        bk: p.bk.as_ref().map(|_| row_sums(&dk)),
        bv: p.bv.as_ref().map(|_| row_sums(&dv)),
        bo: dbo,
    };
    let dm = p.wq.t().dot(&dq) + p.wk.t().dot(&dk) + p.wv.t().dot(&dv);
    Ok((FeatureMap::from_matrix(&dm, h, w)?, grads))
}

/// MixAttention forward: `wo(E(V) + depthwise7x7(V))` with a single-head
/// attention map `E` and `V = wv(x)` shared by both branches.
pub fn mix_attention_mixer(x: &FeatureMap, p: &MixAttentionMixer) -> Result<FeatureMap> {
    let (_, h, w) = x.dims();
    let m = x.as_matrix();
    let q = project(&p.wq, p.bq.as_deref(), &m);
    let k = project(&p.wk, p.bk.as_deref(), &m);
    let v = project(&p.wv, p.bv.as_deref(), &m);
    let d = v.nrows();
    let scale = 1.0 / (d as f64).sqrt();
    let a = softmax_rows(&q.t().dot(&k).mapv(|s| s * scale));
    let attn_out = v.dot(&a.t());
    let vmap = FeatureMap::from_matrix(&v, h, w)?;
    let mut conv = depthwise_conv(&vmap, &p.dw, SEPCONV_KERNEL)?;
    add_bias(&mut conv, p.bdw.as_deref());
    let sum = attn_out + conv.as_matrix();
    let y = project(&p.wo, p.bo.as_deref(), &sum);
    FeatureMap::from_matrix(&y, h, w)
}

fn mix_attention_backward(
    x: &FeatureMap,
    p: &MixAttentionMixer,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, MixAttentionMixer)> {
    let (d, h, w) = x.dims();
    let m = x.as_matrix();
    let q = project(&p.wq, p.bq.as_deref(), &m);
    let k = project(&p.wk, p.bk.as_deref(), &m);
    let v = project(&p.wv, p.bv.as_deref(), &m);
    let scale = 1.0 / (d as f64).sqrt();
    let a = softmax_rows(&q.t().dot(&k).mapv(|s| s * scale));
    let attn_out = v.dot(&a.t());
    let vmap = FeatureMap::from_matrix(&v, h, w)?;
    let mut conv = depthwise_conv(&vmap, &p.dw, SEPCONV_KERNEL)?;
    add_bias(&mut conv, p.bdw.as_deref());
    let sum = attn_out + conv.as_matrix();

    let gy = upstream.as_matrix();
    let dwo = gy.dot(&sum.t());
    let dbo = p.bo.as_ref().map(|_| gy.rows().into_iter().map(|r| r.sum()).collect());
    let dsum = p.wo.t().dot(&gy);

    // Attention branch.
    let da = dsum.t().dot(&v);
    let mut dv = dsum.dot(&a);
    let ds = softmax_rows_backward(&a, &da).mapv(|s| s * scale);
    let dq = k.dot(&ds.t());
    let dk = q.dot(&ds);

    // Convolution branch.
    let dsum_map = FeatureMap::from_matrix(&dsum, h, w)?;
    let bdw = p.bdw.as_ref().map(|_| bias_grad(&dsum_map));
    let (dv_conv, ddw) = depthwise_backward_map(&vmap, &p.dw, SEPCONV_KERNEL, &dsum_map);
    dv += &dv_conv.as_matrix();

    let row_sums = |g: &Array2<f64>| g.rows().into_iter().map(|r| r.sum()).collect::<Vec<f64>>();
    let grads = MixAttentionMixer {
        wq: dq.dot(&m.t()),
        wk: dk.dot(&m.t()),
        wv: dv.dot(&m.t()),
        wo: dwo,
        dw: ddw,
        bq: p.bq.as_ref().map(|_| row_sums(&dq)),
        bk: p.bk.as_ref().map(|_| row_sums(&dk)),
        bv: p.bv.as_ref().map(|_| row_sums(&dv)),
        bdw,
        bo: dbo,
    };
    let dm = p.wq.t().dot(&dq) + p.wk.t().dot(&dk) + p.wv.t().dot(&dv);
    Ok((FeatureMap::from_matrix(&dm, h, w)?, grads))
}

fn mixer_forward(mixer: &Mixer, x: &FeatureMap) -> Result<FeatureMap> {
    match mixer {
        Mixer::Spam(p) => spam_forward(x, p),
        Mixer::SepConv(p) => sep_conv_mixer(x, p),
        Mixer::Attention(p) => attention_mixer(x, p),
        Mixer::MixAttention(p) => mix_attention_mixer(x, p),
    }
}

fn mixer_backward(mixer: &Mixer, x: &FeatureMap, upstream: &FeatureMap) -> Result<(FeatureMap, Mixer)> {
    match mixer {
        Mixer::Spam(p) => {
            let g = spam_backward(x, p, upstream)?;
            Ok((g.input, Mixer::Spam(g.params)))
        }
        Mixer::SepConv(p) => {
            let (dx, g) = sep_conv_backward(x, p, upstream)?;
            Ok((dx, Mixer::SepConv(g)))
        }
        Mixer::Attention(p) => {
            let (dx, g) = attention_backward(x, p, upstream)?;
            Ok((dx, Mixer::Attention(g)))
        }
        Mixer::MixAttention(p) => {
            let (dx, g) = mix_attention_backward(x, p, upstream)?;
            Ok((dx, Mixer::MixAttention(g)))
        }
    }
}

fn block_forward(block: &Block, x: &FeatureMap) -> Result<FeatureMap> {
    let n1 = norm_forward(x, &block.norm1)?;
    let mo = mixer_forward(&block.mixer, &n1)?;
    let fx = match &block.branch1 {
        Some(s) => scale_channels(&mo, s),
        None => mo,
    };
    let idx = match &block.res1 {
        Some(s) => scale_channels(x, s),
        None => x.clone(),
    };
    let y = add_maps(&idx, &fx);

    let n2 = norm_forward(&y, &block.norm2)?;
    let u = channel_linear(&block.mlp_fc1, block.mlp_b1.as_deref(), &n2)?;
    let mut act = u.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let ml = channel_linear(&block.mlp_fc2, block.mlp_b2.as_deref(), &act)?;
    let fy = match &block.branch2 {
        Some(s) => scale_channels(&ml, s),
        None => ml,
    };
    let idy = match &block.res2 {
        Some(s) => scale_channels(&y, s),
        None => y.clone(),
    };
    Ok(add_maps(&idy, &fy))
}

/// Block backward: recomputes the forward internals from the block input.
/// Returns the input gradient and a gradient-valued copy of the block.
fn block_backward(block: &Block, x: &FeatureMap, dz: &FeatureMap) -> Result<(FeatureMap, Block)> {
    // Recompute forward.
    let n1 = norm_forward(x, &block.norm1)?;
    let mo = mixer_forward(&block.mixer, &n1)?;
    let fx = match &block.branch1 {
        Some(s) => scale_channels(&mo, s),
        None => mo.clone(),
    };
    let idx = match &block.res1 {
        Some(s) => scale_channels(x, s),
        None => x.clone(),
    };
    let y = add_maps(&idx, &fx);
    let n2 = norm_forward(&y, &block.norm2)?;
    let u = channel_linear(&block.mlp_fc1, block.mlp_b1.as_deref(), &n2)?;
    let mut act = u.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let ml = channel_linear(&block.mlp_fc2, block.mlp_b2.as_deref(), &act)?;

    let mut grads = block.clone();
    // Zero the gradient holder.
    {
        let g = &mut grads;
        let zero_arr = |a: &mut Array2<f64>| a.fill(0.0);
        let zero_opt = |o: &mut Option<Vec<f64>>| {
            if let Some(v) = o {
                v.fill(0.0)
            }
        };
        g.norm1.gain.fill(0.0);
        zero_opt(&mut g.norm1.bias);
        g.norm2.gain.fill(0.0);
        zero_opt(&mut g.norm2.bias);
        zero_arr(&mut g.mlp_fc1);
        zero_opt(&mut g.mlp_b1);
        zero_arr(&mut g.mlp_fc2);
        zero_opt(&mut g.mlp_b2);
        zero_opt(&mut g.res1);
        zero_opt(&mut g.res2);
        zero_opt(&mut g.branch1);
        zero_opt(&mut g.branch2);
    }

    // Second residual: z = res2 .* y + branch2 .* mlp(norm2(y)).
    let mut dy = match &block.res2 {
        Some(s) => {
            grads.res2 = Some(gain_grad(dz, &y));
            scale_channels(dz, s)
        }
        None => dz.clone(),
    };
    let g_ml = match &block.branch2 {
        Some(s) => {
            grads.branch2 = Some(gain_grad(dz, &ml));
            scale_channels(dz, s)
        }
        None => dz.clone(),
    };
    let fc2 = linear_backward_map(&block.mlp_fc2, &act, &g_ml, block.mlp_b2.is_some());
    grads.mlp_fc2 = fc2.w;
    grads.mlp_b2 = fc2.bias;
    let mut da = fc2.input;
    for (g, &pre) in da.data_mut().iter_mut().zip(u.data()) {
        *g *= gelu_prime(pre);
    }
    let fc1 = linear_backward_map(&block.mlp_fc1, &n2, &da, block.mlp_b1.is_some());
    grads.mlp_fc1 = fc1.w;
    grads.mlp_b1 = fc1.bias;
    let n2g = spatial_norm_backward(
        &y,
        &block.norm2.gain,
        block.norm2.bias.is_some(),
        NORM_EPS,
        &fc1.input,
    )?;
    grads.norm2.gain = n2g.gain;
    grads.norm2.bias = n2g.bias;
    dy = add_maps(&dy, &n2g.input);

    // First residual: y = res1 .* x + branch1 .* mixer(norm1(x)).
    let mut dx = match &block.res1 {
        Some(s) => {
            grads.res1 = Some(gain_grad(&dy, x));
            scale_channels(&dy, s)
        }
        None => dy.clone(),
    };
    let g_mx = match &block.branch1 {
        Some(s) => {
            grads.branch1 = Some(gain_grad(&dy, &mo));
            scale_channels(&dy, s)
        }
        None => dy.clone(),
    };
    let (dn1, mixer_grads) = mixer_backward(&block.mixer, &n1, &g_mx)?;
    grads.mixer = mixer_grads;
    let n1g = spatial_norm_backward(
        x,
        &block.norm1.gain,
        block.norm1.bias.is_some(),
        NORM_EPS,
        &dn1,
    )?;
    grads.norm1.gain = n1g.gain;
    grads.norm1.bias = n1g.bias;
    dx = add_maps(&dx, &n1g.input);
    Ok((dx, grads))
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final feature map of each of the four stages.
    pub stage_features: Vec<FeatureMap>,
    /// Global-average-pooled, normalized feature vector (logits-ready).
    pub pooled: Vec<f64>,
    /// Classifier output.
    pub logits: Vec<f64>,
}

fn vector_norm(x: &[f64], n: &NormLayer) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    if var < NORM_EPS {
        return match &n.bias {
            Some(b) => b.clone(),
            None => vec![0.0; d],
        };
    }
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let xh = (v - mean) * inv;
            n.gain[i] * xh + n.bias.as_ref().map_or(0.0, |b| b[i])
        })
        .collect()
}

struct VectorNormGrads {
    input: Vec<f64>,
    gain: Vec<f64>,
    bias: Option<Vec<f64>>,
}

fn vector_norm_backward(x: &[f64], n: &NormLayer, g: &[f64]) -> VectorNormGrads {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let bias = n.bias.as_ref().map(|_| g.to_vec());
    if var < NORM_EPS {
        return VectorNormGrads {
            input: vec![0.0; d],
            gain: vec![0.0; d],
            bias,
        };
    }
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    let xh: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
    let h: Vec<f64> = g.iter().zip(&n.gain).map(|(gv, gn)| gv * gn).collect();
    let mh = h.iter().sum::<f64>() / d as f64;
    let mhx = h.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    VectorNormGrads {
        input: (0..d).map(|i| inv * (h[i] - mh - xh[i] * mhx)).collect(),
        gain: g.iter().zip(&xh).map(|(a, b)| a * b).collect(),
        bias,
    }
}

impl Model {
    /// Run the backbone on a `3 x S x S` image (`S` = config input size).
    pub fn forward(&self, image: &FeatureMap) -> Result<ForwardOutput> {
        let s = self.config.input_size;
        if image.dims() != (3, s, s) {
            return Err(Error::ShapeError(format!(
                "model expects a 3x{s}x{s} image, got {:?}",
                image.dims()
            )));
        }
        let mut x = self.stem.forward(image)?;
        x = norm_forward(&x, &self.stem_norm)?;
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = norm_forward(&x, &ds.norm)?;
                x = ds.conv.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block_forward(block, &x)?;
            }
            features.push(x.clone());
        }
        let (d, h, w) = x.dims();
        let hw = (h * w) as f64;
        let gap: Vec<f64> = (0..d).map(|c| x.channel(c).iter().sum::<f64>() / hw).collect();
        let pooled = vector_norm(&gap, &self.head_norm);
        let mut logits: Vec<f64> = self
            .fc
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&pooled).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = &self.fc_bias {
            for (l, bv) in logits.iter_mut().zip(b) {
                *l += bv;
            }
        }
        Ok(ForwardOutput {
            stage_features: features,
            pooled,
            logits,
        })
    }

    /// Gradients of `sum(upstream .* logits)` with respect to every
    /// parameter, as a model-shaped container pairing with [`Self::visit`].
    pub fn backward_logits(&self, image: &FeatureMap, upstream: &[f64]) -> Result<Model> {
        if upstream.len() != self.config.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "upstream has {} entries for {} classes",
                upstream.len(),
                self.config.num_classes
            )));
        }
        // Forward, caching block inputs.
        let mut x = self.stem.forward(image)?;
        let stem_out = x.clone();
        x = norm_forward(&x, &self.stem_norm)?;
        let mut stage_inputs: Vec<Vec<FeatureMap>> = Vec::with_capacity(4);
        let mut ds_inputs: Vec<Option<FeatureMap>> = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                ds_inputs.push(Some(x.clone()));
                x = norm_forward(&x, &ds.norm)?;
                x = ds.conv.forward(&x)?;
            } else {
                ds_inputs.push(None);
            }
            let mut inputs = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                inputs.push(x.clone());
                x = block_forward(block, &x)?;
            }
            stage_inputs.push(inputs);
        }
        let (d, h, w) = x.dims();
        let hw = (h * w) as f64;
        let gap: Vec<f64> = (0..d).map(|c| x.channel(c).iter().sum::<f64>() / hw).collect();
        let pooled = vector_norm(&gap, &self.head_norm);

        let mut grads = self.zeros_like();

        // Head: logits = fc * pooled (+ bias).
        for o in 0..self.config.num_classes {
            for i in 0..d {
                grads.fc[[o, i]] = upstream[o] * pooled[i];
            }
        }
        if let Some(b) = &mut grads.fc_bias {
            b.copy_from_slice(upstream);
        }
        let dpooled: Vec<f64> = (0..d)
            .map(|i| (0..self.config.num_classes).map(|o| upstream[o] * self.fc[[o, i]]).sum())
            .collect();
        let hn = vector_norm_backward(&gap, &self.head_norm, &dpooled);
        grads.head_norm.gain = hn.gain;
        grads.head_norm.bias = hn.bias;
        let mut dx = FeatureMap::zeros(d, h, w);
        for c in 0..d {
            let g = hn.input[c] / hw;
            dx.channel_mut(c).fill(g);
        }

        // Stages in reverse.
        for s in (0..4).rev() {
            for (b, block) in self.stages[s].blocks.iter().enumerate().rev() {
                let (dxi, bg) = block_backward(block, &stage_inputs[s][b], &dx)?;
                dx = dxi;
                grads.stages[s].blocks[b] = bg;
            }
            if let Some(ds) = &self.stages[s].downsample {
                let ds_in = ds_inputs[s].as_ref().expect("downsample input cached");
                let normed = norm_forward(ds_in, &ds.norm)?;
                let (d_normed, dwt, dbias) = ds.conv.backward(&normed, &dx);
                let g = grads.stages[s].downsample.as_mut().expect("same structure");
                g.conv.weights = dwt;
                g.conv.bias = dbias;
                let ng = spatial_norm_backward(
                    ds_in,
                    &ds.norm.gain,
                    ds.norm.bias.is_some(),
                    NORM_EPS,
                    &d_normed,
                )?;
                g.norm.gain = ng.gain;
                g.norm.bias = ng.bias;
                dx = ng.input;
            }
        }

        // Stem: conv then post-norm.
        let sg = spatial_norm_backward(
            &stem_out,
            &self.stem_norm.gain,
            self.stem_norm.bias.is_some(),
            NORM_EPS,
            &dx,
        )?;
        grads.stem_norm.gain = sg.gain;
        grads.stem_norm.bias = sg.bias;
        let (_, dwt, dbias) = self.stem.backward(image, &sg.input);
        grads.stem.weights = dwt;
        grads.stem.bias = dbias;
        Ok(grads)
    }
}

/// Central-difference check of `samples` randomly chosen scalar parameters
/// against [`Model::backward_logits`], for the loss `sum(upstream .* logits)`.
/// Coordinates are drawn with a seeded stream, so the same seed checks the
/// same coordinates. Each tiny gradient is compared with an absolute floor of
/// 1e-6 in the denominator, since single-coordinate differences of an O(1)
/// loss cannot resolve below the f64 roundoff floor.
pub fn coordinate_gradcheck(
    model: &Model,
    image: &FeatureMap,
    upstream: &[f64],
    samples: usize,
    seed: u64,
) -> Result<crate::gradcheck::GradReport> {
    use crate::gradcheck::{GradEntry, GradReport, FD_STEP, FD_TOL};
    let analytic = model.backward_logits(image, upstream)?;
    let mut slots: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |n, s| slots.push((n.to_string(), s.len())));
    let mut pick = SeedStream::new(seed);
    let mut entries = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (name, len) = pick.choose(&slots).clone();
        let coord = pick.below(len);
        let mut a_val = f64::NAN;
        analytic.visit(&mut |n, s| {
            if n == name {
                a_val = s[coord];
            }
        });
        let mut base = f64::NAN;
        model.visit(&mut |n, s| {
            if n == name {
                base = s[coord];
            }
        });
        let eval = |v: f64| -> Result<f64> {
            let mut m = model.clone();
            m.visit_mut(&mut |n, s| {
                if n == name {
                    s[coord] = v;
                }
            });
            let out = m.forward(image)?;
            Ok(out.logits.iter().zip(upstream).map(|(a, b)| a * b).sum())
        };
        let fd = (eval(base + FD_STEP)? - eval(base - FD_STEP)?) / (2.0 * FD_STEP);
        let rel = (a_val - fd).abs() / fd.abs().max(a_val.abs()).max(1e-6);
        entries.push(GradEntry {
            name: format!("{name}[{coord}]"),
            checks: 1,
            rel_error: rel,
            analytic_norm: a_val.abs(),
            fd_norm: fd.abs(),
        });
    }
    Ok(GradReport::from_entries(entries, FD_TOL))
}
