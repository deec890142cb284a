//! The SPAM token mixer: a value path modulated by a spectral context path.
//!
//! Forward dataflow for a `D x H x W` input `X`:
//!
//! ```text
//! V = GELU(value_linear(X))                         (value path)
//! X' = in_linear(X), split into 4 heads of D/4
//! head_i = Exp_i(SRF(DepthwiseConv_{m_i}(X'_i)))    m = [3,5,7,9]
//! C = proj(GELU(spatial_norm(concat(heads))))       (context path)
//! SPAM(X) = out_linear(V .* C)
//! ```
//!
//! SRF filters each channel in the 2D-DFT domain through a learned sigmoid
//! mask: `SRF(x) = Re(idft2(sigmoid(M) .* dft2(x)))`. Because the learned
//! mask need not be Hermitian-symmetric, the inverse transform is complex in
//! general; the real part is taken and the discarded imaginary magnitude is
//! reported as a diagnostic. `spam_backward` implements the full hand-derived
//! chain rule, including the DFT adjoints behind the real-part projection.
//!
//! "Linear" layers act pointwise over spatial positions (1x1 convolution
//! semantics). All of them are bias-free unless biases are switched on at
//! construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conv_support::correlate2d;
use crate::rng::SeedStream;
use crate::tensor::{
    dft2, dft2_complex, gelu, gelu_prime, sigmoid, spatial_norm, spatial_norm_backward,
    FeatureMap, NORM_EPS,
};
use crate::{Error, Result};

/// Per-head depthwise kernel sizes, smallest to largest.
pub const KERNEL_SIZES: [usize; 4] = [3, 5, 7, 9];
/// Number of gate heads; the channel width must divide evenly by this.
pub const HEAD_COUNT: usize = 4;

/// Whether each head channel has its own spectral mask or all channels of a
/// head share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrfMode {
    Depthwise,
    Single,
}

/// Learned spectral mask logits. The effective mask is `sigmoid(logits)`,
/// entrywise in `(0, 1)`. Depthwise masks hold one `H x W` plane per channel;
/// single-mode masks hold one shared plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfMask {
    pub mode: SrfMode,
    pub logits: FeatureMap,
}

impl SrfMask {
    pub fn zeros(mode: SrfMode, channels: usize, h: usize, w: usize) -> Self {
        let planes = match mode {
            SrfMode::Depthwise => channels,
            SrfMode::Single => 1,
        };
        Self {
            mode,
            logits: FeatureMap::zeros(planes, h, w),
        }
    }

    /// Logit plane applied to channel `c`.
    fn plane(&self, c: usize) -> &[f64] {
        match self.mode {
            SrfMode::Depthwise => self.logits.channel(c),
            SrfMode::Single => self.logits.channel(0),
        }
    }
}

/// One spectral-adaptive gate head.
#[derive(Debug, Clone, PartialEq)]
pub struct SpamHead {
    pub kernel_size: usize,
    /// Depthwise kernels, channel-major: `kernels[c*m*m + r*m + t]`.
    pub kernels: Vec<f64>,
    pub mask: SrfMask,
    /// Channel-doubling linear, `2*d_h x d_h`.
    pub exp: Array2<f64>,
    pub exp_bias: Option<Vec<f64>>,
}

/// All SPAM parameters. Masks are sized to a fixed `H x W`, so one parameter
/// set serves exactly one spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpamParams {
    pub dim: usize,
    pub in_linear: Array2<f64>,
    pub in_bias: Option<Vec<f64>>,
    pub value_linear: Array2<f64>,
    pub value_bias: Option<Vec<f64>>,
    pub heads: Vec<SpamHead>,
    pub norm_gain: Vec<f64>,
    pub proj: Array2<f64>,
    pub proj_bias: Option<Vec<f64>>,
    pub out_linear: Array2<f64>,
    pub out_bias: Option<Vec<f64>>,
}

impl SpamParams {
    /// Randomly initialized parameters for a `d`-channel mixer at spatial
    /// resolution `h x w`. Linear and kernel weights draw fan-in-scaled
    /// normals from named substreams; mask logits start at 0 (mask 0.5
    /// everywhere); the norm gain starts at 1; biases (when enabled) at 0.
    pub fn random(
        d: usize,
        h: usize,
        w: usize,
        mode: SrfMode,
        biases: bool,
        stream: &SeedStream,
    ) -> Result<Self> {
        if d % HEAD_COUNT != 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "SPAM needs a channel width divisible by {HEAD_COUNT}, got {d}"
            )));
        }
        let dh = d / HEAD_COUNT;
        let linear = |name: &str, rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            let mut s = stream.split(name);
            let vals: Vec<f64> = s.normal_vec(rows * cols).iter().map(|v| v * std).collect();
            Array2::from_shape_vec((rows, cols), vals).expect("sized here")
        };
        let bias = |n: usize| biases.then(|| vec![0.0; n]);
        let heads = KERNEL_SIZES
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut ks = stream.split(&format!("head{i}.kernel"));
                let std = 1.0 / m as f64;
                SpamHead {
                    kernel_size: m,
                    kernels: ks.normal_vec(dh * m * m).iter().map(|v| v * std).collect(),
                    mask: SrfMask::zeros(mode, dh, h, w),
                    exp: linear(&format!("head{i}.exp"), 2 * dh, dh),
                    exp_bias: bias(2 * dh),
                }
            })
            .collect();
        Ok(Self {
            dim: d,
            in_linear: linear("in_linear", d, d),
            in_bias: bias(d),
            value_linear: linear("value_linear", d, d),
            value_bias: bias(d),
            heads,
            norm_gain: vec![1.0; 2 * d],
            proj: linear("proj", d, 2 * d),
            proj_bias: bias(d),
            out_linear: linear("out_linear", d, d),
            out_bias: bias(d),
        })
    }

    /// Same structure, every value zero: a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, slice| slice.fill(0.0));
        out
    }

    pub fn head_dim(&self) -> usize {
        self.dim / HEAD_COUNT
    }

    pub fn srf_mode(&self) -> SrfMode {
        self.heads[0].mask.mode
    }

    /// Spatial resolution the masks are sized for.
    pub fn mask_resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.heads[0].mask.logits.dims();
        (h, w)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let d = self.dim;
        if d % HEAD_COUNT != 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "channel width {d} not divisible by {HEAD_COUNT}"
            )));
        }
        let dh = d / HEAD_COUNT;
        if self.heads.len() != HEAD_COUNT {
            return Err(Error::InvalidConfig(format!(
                "expected {HEAD_COUNT} heads, found {}",
                self.heads.len()
            )));
        }
        let square = |name: &str, m: &Array2<f64>, rows: usize, cols: usize| {
            if m.dim() != (rows, cols) {
                Err(Error::DimensionMismatch(format!(
                    "{name} should be {rows}x{cols}, is {:?}",
                    m.dim()
                )))
            } else {
                Ok(())
            }
        };
        square("in_linear", &self.in_linear, d, d)?;
        square("value_linear", &self.value_linear, d, d)?;
        square("proj", &self.proj, d, 2 * d)?;
        square("out_linear", &self.out_linear, d, d)?;
        if self.norm_gain.len() != 2 * d {
            return Err(Error::DimensionMismatch(format!(
                "norm gain has {} entries for width {}",
                self.norm_gain.len(),
                2 * d
            )));
        }
        for (i, (head, &m)) in self.heads.iter().zip(&KERNEL_SIZES).enumerate() {
            if head.kernel_size != m {
                return Err(Error::InvalidConfig(format!(
                    "head {i} kernel size {} (expected {m})",
                    head.kernel_size
                )));
            }
            if head.kernels.len() != dh * m * m {
                return Err(Error::DimensionMismatch(format!(
                    "head {i} kernel bank has {} weights, needs {}",
                    head.kernels.len(),
                    dh * m * m
                )));
            }
            square(&format!("head{i}.exp"), &head.exp, 2 * dh, dh)?;
            let (planes, mh, mw) = head.mask.logits.dims();
            let want = match head.mask.mode {
                SrfMode::Depthwise => dh,
                SrfMode::Single => 1,
            };
            if planes != want || mh != h || mw != w {
                return Err(Error::DimensionMismatch(format!(
                    "head {i} mask is {planes}x{mh}x{mw}, needs {want}x{h}x{w}"
                )));
            }
        }
        Ok(())
    }

    /// Total scalar parameter count for this configuration, computed without
    /// building anything.
    pub fn param_count(d: usize, h: usize, w: usize, mode: SrfMode, biases: bool) -> usize {
        let dh = d / HEAD_COUNT;
        let mask_planes = match mode {
            SrfMode::Depthwise => dh,
            SrfMode::Single => 1,
        };
        let mut n = 0;
        n += d * d * 3; // in, value, out
        n += d * 2 * d; // proj
        n += 2 * d; // norm gain
        for m in KERNEL_SIZES {
            n += dh * m * m; // kernels
            n += mask_planes * h * w; // mask logits
            n += 2 * dh * dh; // exp
        }
        if biases {
            n += 4 * d; // in, value, proj, out
            n += HEAD_COUNT * 2 * dh; // exp biases
        }
        n
    }

    /// Walk every parameter tensor in a fixed order, flattened.
    pub fn visit<F: FnMut(&str, &[f64])>(&self, f: &mut F) {
        f("in_linear", flat(&self.in_linear));
        if let Some(b) = &self.in_bias {
            f("in_linear.bias", b);
        }
        f("value_linear", flat(&self.value_linear));
        if let Some(b) = &self.value_bias {
            f("value_linear.bias", b);
        }
        for (i, head) in self.heads.iter().enumerate() {
            f(&format!("head{i}.kernel"), &head.kernels);
            f(&format!("head{i}.mask"), head.mask.logits.data());
            f(&format!("head{i}.exp"), flat(&head.exp));
            if let Some(b) = &head.exp_bias {
                f(&format!("head{i}.exp.bias"), b);
            }
        }
        f("norm.gain", &self.norm_gain);
        f("proj", flat(&self.proj));
        if let Some(b) = &self.proj_bias {
            f("proj.bias", b);
        }
        f("out_linear", flat(&self.out_linear));
        if let Some(b) = &self.out_bias {
            f("out_linear.bias", b);
        }
    }

    /// Mutable variant of [`Self::visit`], same order and names.
    pub fn visit_mut<F: FnMut(&str, &mut [f64])>(&mut self, f: &mut F) {
        f("in_linear", flat_mut(&mut self.in_linear));
        if let Some(b) = &mut self.in_bias {
            f("in_linear.bias", b);
        }
        f("value_linear", flat_mut(&mut self.value_linear));
        if let Some(b) = &mut self.value_bias {
            f("value_linear.bias", b);
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.kernel"), &mut head.kernels);
            f(&format!("head{i}.mask"), head.mask.logits.data_mut());
            f(&format!("head{i}.exp"), flat_mut(&mut head.exp));
            if let Some(b) = &mut head.exp_bias {
                f(&format!("head{i}.exp.bias"), b);
            }
        }
        f("norm.gain", &mut self.norm_gain);
        f("proj", flat_mut(&mut self.proj));
        if let Some(b) = &mut self.proj_bias {
            f("proj.bias", b);
        }
        f("out_linear", flat_mut(&mut self.out_linear));
        if let Some(b) = &mut self.out_bias {
            f("out_linear.bias", b);
        }
    }
}

fn flat(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("weights are stored row-major")
}

fn flat_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("weights are stored row-major")
}

/// Pointwise channel mix: `y[:, p] = W x[:, p] (+ b)` at every pixel `p`.
pub fn channel_linear(
    w: &Array2<f64>,
    bias: Option<&[f64]>,
    x: &FeatureMap,
) -> Result<FeatureMap> {
    let (d, h, wd) = x.dims();
    if w.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "linear expects {} input channels, map has {}",
            w.ncols(),
            d
        )));
    }
    let mut y = w.dot(&x.as_matrix());
    if let Some(b) = bias {
        if b.len() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "bias has {} entries for {} outputs",
                b.len(),
                w.nrows()
            )));
        }
        for (mut row, &bv) in y.rows_mut().into_iter().zip(b) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    FeatureMap::from_matrix(&y, h, wd)
}

struct LinearGrads {
    w: Array2<f64>,
    bias: Option<Vec<f64>>,
    input: FeatureMap,
}

/// Gradients of [`channel_linear`]: `dW = G X^T`, `db = G 1`, `dX = W^T G`.
fn channel_linear_backward(
    w: &Array2<f64>,
    x: &FeatureMap,
    upstream: &FeatureMap,
    has_bias: bool,
) -> LinearGrads {
    let xm = x.as_matrix();
    let gm = upstream.as_matrix();
    let dw = gm.dot(&xm.t());
    let bias = has_bias.then(|| gm.rows().into_iter().map(|r| r.sum()).collect());
    let dx = w.t().dot(&gm);
    LinearGrads {
        w: dw,
        bias,
        input: FeatureMap::from_matrix(&dx, x.height(), x.width()).expect("shape preserved"),
    }
}

/// Value path: `GELU(value_linear(X))`.
pub fn value_projection(x: &FeatureMap, params: &SpamParams) -> Result<FeatureMap> {
    let mut v = channel_linear(&params.value_linear, params.value_bias.as_deref(), x)?;
    for e in v.data_mut() {
        *e = gelu(*e);
    }
    Ok(v)
}

/// Depthwise stride-1 same-padding correlation: channel `c` of `x` with
/// kernel `kernels[c*m*m ..]`.
pub fn depthwise_conv(x: &FeatureMap, kernels: &[f64], m: usize) -> Result<FeatureMap> {
    let (d, h, w) = x.dims();
    if kernels.len() != d * m * m {
        return Err(Error::DimensionMismatch(format!(
            "depthwise bank has {} weights for {} channels of {m}x{m}",
            kernels.len(),
            d
        )));
    }
    let pad = (m - 1) / 2;
    let mut out = FeatureMap::zeros(d, h, w);
    for c in 0..d {
        let (y, _, _) = correlate2d(x.channel(c), h, w, &kernels[c * m * m..(c + 1) * m * m], m, 1, pad);
        out.channel_mut(c).copy_from_slice(&y);
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv`]: input gradient is the correlation of the
/// upstream with the 180-degree-rotated kernel; kernel gradients correlate
/// upstream against the input taps.
fn depthwise_conv_backward(
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
            let (y, xcol) = (a / w, a % w);
            for r in 0..m {
                let yy = y as isize + r as isize - pad as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for t in 0..m {
                    let xx = xcol as isize + t as isize - pad as isize;
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

/// SRF output plus the largest imaginary magnitude discarded by the real-part
/// projection (zero only when the effective mask is Hermitian-symmetric).
#[derive(Debug, Clone)]
pub struct SrfOutput {
    pub output: FeatureMap,
    pub imag_residual: f64,
}

/// Spectral filter: `Re(idft2(sigmoid(M) .* dft2(x)))`, per channel.
pub fn srf(x: &FeatureMap, mask: &SrfMask) -> Result<SrfOutput> {
    let (d, h, w) = x.dims();
    let (planes, mh, mw) = mask.logits.dims();
    let want = match mask.mode {
        SrfMode::Depthwise => d,
        SrfMode::Single => 1,
    };
    if planes != want || mh != h || mw != w {
        return Err(Error::DimensionMismatch(format!(
            "mask is {planes}x{mh}x{mw}, input needs {want}x{h}x{w}"
        )));
    }
    let n = h * w;
    let mut out = FeatureMap::zeros(d, h, w);
    let mut residual = 0.0f64;
    for c in 0..d {
        let logits = mask.plane(c);
        let s = dft2(x.channel(c), h, w);
        let mut t = s;
        for i in 0..n {
            let psi = sigmoid(logits[i]);
            t.re[i] *= psi;
            t.im[i] *= psi;
        }
        let inv = crate::tensor::idft2(&t);
        out.channel_mut(c).copy_from_slice(&inv.re);
        for &im in &inv.im {
            residual = residual.max(im.abs());
        }
    }
    Ok(SrfOutput {
        output: out,
        imag_residual: residual,
    })
}

/// Gradients of [`srf`] with respect to the input and the mask logits.
///
/// With `s = dft2(x)`, `psi = sigmoid(M)`, `t = psi .* s`, and output
/// `y = Re(idft2(t))`, the adjoints are:
/// `dt = dft2(g) / HW` (upstream embedded as a real plane),
/// `dpsi = Re(dt .* conj(s))`, `dM = dpsi .* psi .* (1 - psi)`,
/// `ds = psi .* dt`, and `dx = Re(HW * idft2(ds))`, which is the plain
/// inverse-twiddle transform without the `1/HW` factor.
fn srf_backward(x: &FeatureMap, mask: &SrfMask, upstream: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let (d, h, w) = x.dims();
    let n = h * w;
    let mut dx = FeatureMap::zeros(d, h, w);
    let (planes, _, _) = mask.logits.dims();
    let mut dlogits = FeatureMap::zeros(planes, h, w);
    for c in 0..d {
        let logits = mask.plane(c);
        let s = dft2(x.channel(c), h, w);
        let dt = {
            let mut f = dft2(upstream.channel(c), h, w);
            let scale = 1.0 / n as f64;
            for v in f.re.iter_mut().chain(f.im.iter_mut()) {
                *v *= scale;
            }
            f
        };
        let mut ds_re = vec![0.0; n];
        let mut ds_im = vec![0.0; n];
        let target = match mask.mode {
            SrfMode::Depthwise => c,
            SrfMode::Single => 0,
        };
        let dl = dlogits.channel_mut(target);
        for i in 0..n {
            let psi = sigmoid(logits[i]);
            let dpsi = dt.re[i] * s.re[i] + dt.im[i] * s.im[i];
            dl[i] += dpsi * psi * (1.0 - psi);
            ds_re[i] = psi * dt.re[i];
            ds_im[i] = psi * dt.im[i];
        }
        let full = dft2_complex(&ds_re, &ds_im, h, w, true);
        dx.channel_mut(c).copy_from_slice(&full.re);
    }
    (dx, dlogits)
}

/// One gate head: depthwise conv, spectral filter, channel-doubling linear.
pub fn sag_head(x_head: &FeatureMap, head: &SpamHead) -> Result<FeatureMap> {
    let conv = depthwise_conv(x_head, &head.kernels, head.kernel_size)?;
    let filtered = srf(&conv, &head.mask)?;
    channel_linear(&head.exp, head.exp_bias.as_deref(), &filtered.output)
}

struct SpamTrace {
    value_pre: FeatureMap,
    value: FeatureMap,
    ctx_in: FeatureMap,
    head_conv: Vec<FeatureMap>,
    head_srf: Vec<FeatureMap>,
    concat: FeatureMap,
    normed: FeatureMap,
    act: FeatureMap,
    context: FeatureMap,
    modulated: FeatureMap,
}

fn head_slice(x: &FeatureMap, start: usize, count: usize) -> FeatureMap {
    let (_, h, w) = x.dims();
    let n = h * w;
    FeatureMap::new(
        count,
        h,
        w,
        x.data()[start * n..(start + count) * n].to_vec(),
    )
    .expect("slice of a valid map")
}

fn forward_trace(x: &FeatureMap, params: &SpamParams) -> Result<(FeatureMap, SpamTrace)> {
    let (d, h, w) = x.dims();
    if d != params.dim {
        return Err(Error::DimensionMismatch(format!(
            "input has {d} channels, parameters expect {}",
            params.dim
        )));
    }
    params.validate(h, w)?;
    let dh = params.head_dim();

    let value_pre = channel_linear(&params.value_linear, params.value_bias.as_deref(), x)?;
    let mut value = value_pre.clone();
    for e in value.data_mut() {
        *e = gelu(*e);
    }

    let ctx_in = channel_linear(&params.in_linear, params.in_bias.as_deref(), x)?;
    let mut head_conv = Vec::with_capacity(HEAD_COUNT);
    let mut head_srf = Vec::with_capacity(HEAD_COUNT);
    let mut concat = FeatureMap::zeros(2 * d, h, w);
    let n = h * w;
    for (i, head) in params.heads.iter().enumerate() {
        let xh = head_slice(&ctx_in, i * dh, dh);
        let conv = depthwise_conv(&xh, &head.kernels, head.kernel_size)?;
        let filtered = srf(&conv, &head.mask)?;
        let expanded = channel_linear(&head.exp, head.exp_bias.as_deref(), &filtered.output)?;
        let base = i * 2 * dh;
        concat.data_mut()[base * n..(base + 2 * dh) * n].copy_from_slice(expanded.data());
        head_conv.push(conv);
        head_srf.push(filtered.output);
    }

    let normed = spatial_norm(&concat, &params.norm_gain, NORM_EPS)?;
    let mut act = normed.clone();
    for e in act.data_mut() {
        *e = gelu(*e);
    }
    let context = channel_linear(&params.proj, params.proj_bias.as_deref(), &act)?;

    let mut modulated = FeatureMap::zeros(d, h, w);
    for ((o, &v), &c) in modulated
        .data_mut()
        .iter_mut()
        .zip(value.data())
        .zip(context.data())
    {
        *o = v * c;
    }
    let out = channel_linear(&params.out_linear, params.out_bias.as_deref(), &modulated)?;
    Ok((
        out,
        SpamTrace {
            value_pre,
            value,
            ctx_in,
            head_conv,
            head_srf,
            concat,
            normed,
            act,
            context,
            modulated,
        },
    ))
}

/// Context path alone: `proj(GELU(spatial_norm(concat(heads(in_linear(X))))))`.
pub fn context_aggregation(x: &FeatureMap, params: &SpamParams) -> Result<FeatureMap> {
    let (_, trace) = forward_trace(x, params)?;
    Ok(trace.context)
}

/// Full mixer forward pass; output shape equals input shape.
pub fn spam_forward(x: &FeatureMap, params: &SpamParams) -> Result<FeatureMap> {
    forward_trace(x, params).map(|(out, _)| out)
}

/// Gradients of a scalar loss with respect to the input and every parameter,
/// given `upstream = dL/d spam_forward(x)`. The parameter gradients reuse the
/// [`SpamParams`] layout, so they pair 1:1 with [`SpamParams::visit`].
#[derive(Debug, Clone)]
pub struct SpamGradients {
    pub input: FeatureMap,
    pub params: SpamParams,
}

pub fn spam_backward(
    x: &FeatureMap,
    params: &SpamParams,
    upstream: &FeatureMap,
) -> Result<SpamGradients> {
    let (d, h, w) = x.dims();
    if upstream.dims() != (d, h, w) {
        return Err(Error::DimensionMismatch(
            "upstream gradient shape differs from input".into(),
        ));
    }
    let (_, trace) = forward_trace(x, params)?;
    let dh = params.head_dim();
    let n = h * w;
    let mut grads = params.zeros_like();

    // out = out_linear(modulated)
    let out_grads = channel_linear_backward(
        &params.out_linear,
        &trace.modulated,
        upstream,
        params.out_bias.is_some(),
    );
    grads.out_linear = out_grads.w;
    grads.out_bias = out_grads.bias;
    let d_mod = out_grads.input;

    // modulated = value .* context
    let mut d_value = FeatureMap::zeros(d, h, w);
    let mut d_context = FeatureMap::zeros(d, h, w);
    for i in 0..d * n {
        d_value.data_mut()[i] = d_mod.data()[i] * trace.context.data()[i];
        d_context.data_mut()[i] = d_mod.data()[i] * trace.value.data()[i];
    }

    // value = gelu(value_linear(x))
    let mut d_value_pre = d_value;
    for (g, &pre) in d_value_pre.data_mut().iter_mut().zip(trace.value_pre.data()) {
        *g *= gelu_prime(pre);
    }
    let value_grads = channel_linear_backward(
        &params.value_linear,
        x,
        &d_value_pre,
        params.value_bias.is_some(),
    );
    grads.value_linear = value_grads.w;
    grads.value_bias = value_grads.bias;
    let mut d_input = value_grads.input;

    // context = proj(act), act = gelu(normed)
    let proj_grads =
        channel_linear_backward(&params.proj, &trace.act, &d_context, params.proj_bias.is_some());
    grads.proj = proj_grads.w;
    grads.proj_bias = proj_grads.bias;
    let mut d_normed = proj_grads.input;
    for (g, &pre) in d_normed.data_mut().iter_mut().zip(trace.normed.data()) {
        *g *= gelu_prime(pre);
    }

    // normed = spatial_norm(concat)
    let norm_grads =
        spatial_norm_backward(&trace.concat, &params.norm_gain, false, NORM_EPS, &d_normed)?;
    grads.norm_gain = norm_grads.gain;
    let d_concat = norm_grads.input;

    // heads
    let mut d_ctx_in = FeatureMap::zeros(d, h, w);
    for (i, head) in params.heads.iter().enumerate() {
        let d_expanded = head_slice(&d_concat, i * 2 * dh, 2 * dh);
        let exp_grads = channel_linear_backward(
            &head.exp,
            &trace.head_srf[i],
            &d_expanded,
            head.exp_bias.is_some(),
        );
        let (d_conv, d_logits) = srf_backward(&trace.head_conv[i], &head.mask, &exp_grads.input);
        let xh = head_slice(&trace.ctx_in, i * dh, dh);
        let (d_xh, d_kernels) =
            depthwise_conv_backward(&xh, &head.kernels, head.kernel_size, &d_conv);
        let gh = &mut grads.heads[i];
        gh.exp = exp_grads.w;
        gh.exp_bias = exp_grads.bias;
        gh.mask.logits = d_logits;
        gh.kernels = d_kernels;
        d_ctx_in.data_mut()[i * dh * n..(i + 1) * dh * n].copy_from_slice(d_xh.data());
    }

    // ctx_in = in_linear(x)
    let in_grads =
        channel_linear_backward(&params.in_linear, x, &d_ctx_in, params.in_bias.is_some());
    grads.in_linear = in_grads.w;
    grads.in_bias = in_grads.bias;
    for (a, b) in d_input.data_mut().iter_mut().zip(in_grads.input.data()) {
        *a += b;
    }

    Ok(SpamGradients {
        input: d_input,
        params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv_support::{ConvSupport, KernelSpec};
    use crate::gradcheck::{check_tensor, finite_diff, relative_error, FD_STEP};

    fn identity(d: usize) -> Array2<f64> {
        Array2::eye(d)
    }

    fn random_map(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = SeedStream::new(seed);
        FeatureMap::new(d, h, w, rng.normal_vec(d * h * w)).unwrap()
    }

    /// Random params with mask logits drawn in [-3, 3] so the gate is away
    /// from its saturation plateaus.
    fn random_params(d: usize, h: usize, w: usize, mode: SrfMode, biases: bool, seed: u64) -> SpamParams {
        let stream = SeedStream::new(seed);
        let mut p = SpamParams::random(d, h, w, mode, biases, &stream).unwrap();
        let mut ms = stream.split("masks");
        for head in &mut p.heads {
            for v in head.mask.logits.data_mut() {
                *v = ms.uniform_in(-3.0, 3.0);
            }
        }
        if biases {
            let mut bs = stream.split("biases");
            p.visit_mut(&mut |name, slice| {
                if name.ends_with(".bias") {
                    for v in slice {
                        *v = 0.1 * bs.normal();
                    }
                }
            });
        }
        p
    }

    #[test]
    fn value_projection_identity_weights() {
        let x = random_map(4, 3, 3, 1);
        let stream = SeedStream::new(2);
        let mut p = SpamParams::random(4, 3, 3, SrfMode::Depthwise, false, &stream).unwrap();
        p.value_linear = identity(4);
        let v = value_projection(&x, &p).unwrap();
        for (o, &i) in v.data().iter().zip(x.data()) {
            assert!((o - gelu(i)).abs() < 1e-15);
        }
        let zeros = FeatureMap::zeros(4, 3, 3);
        let v0 = value_projection(&zeros, &p).unwrap();
        assert!(v0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_projection_matches_looped_matvec() {
        let (d, h, w) = (4, 3, 3);
        let x = random_map(d, h, w, 3);
        let p = random_params(d, h, w, SrfMode::Depthwise, false, 4);
        let v = value_projection(&x, &p).unwrap();
        for o in 0..d {
            for px in 0..h * w {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += p.value_linear[[o, i]] * x.channel(i)[px];
                }
                assert!((v.channel(o)[px] - gelu(acc)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn srf_saturated_mask_passes_input_through() {
        let x = random_map(3, 4, 4, 5);
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, 3, 4, 4);
        mask.logits.data_mut().fill(20.0);
        let out = srf(&x, &mask).unwrap();
        for (o, &i) in out.output.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-6);
        }
        assert!(out.imag_residual < 1e-6);
    }

    #[test]
    fn srf_uniform_mask_scales_by_its_value() {
        let x = random_map(2, 5, 3, 6);
        for c in [0.25f64, 0.5, 0.9] {
            let logit = (c / (1.0 - c)).ln();
            let mut mask = SrfMask::zeros(SrfMode::Single, 2, 5, 3);
            mask.logits.data_mut().fill(logit);
            let out = srf(&x, &mask).unwrap();
            for (o, &i) in out.output.data().iter().zip(x.data()) {
                assert!((o - c * i).abs() < 1e-10, "c={c}");
            }
            // A uniform (constant) mask is Hermitian-symmetric.
            assert!(out.imag_residual < 1e-9);
        }
    }

    #[test]
    fn srf_zeroed_dc_bin_removes_the_mean() {
        let x = random_map(2, 4, 4, 7);
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, 2, 4, 4);
        mask.logits.data_mut().fill(40.0);
        for c in 0..2 {
            mask.logits.channel_mut(c)[0] = -40.0;
        }
        let out = srf(&x, &mask).unwrap();
        for c in 0..2 {
            let mean: f64 = out.output.channel(c).iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            // Everything except the mean survives.
            let in_mean: f64 = x.channel(c).iter().sum::<f64>() / 16.0;
            for (o, &i) in out.output.channel(c).iter().zip(x.channel(c)) {
                assert!((o - (i - in_mean)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn srf_random_mask_reports_imag_residual() {
        let x = random_map(2, 4, 4, 8);
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, 2, 4, 4);
        let mut rng = SeedStream::new(9);
        for v in mask.logits.data_mut() {
            *v = rng.uniform_in(-3.0, 3.0);
        }
        let out = srf(&x, &mask).unwrap();
        assert!(out.imag_residual.is_finite());
        assert!(out.imag_residual > 1e-9, "generic mask should be non-Hermitian");
    }

    #[test]
    fn sag_head_identity_composition_duplicates_input() {
        let dh = 2;
        let (h, w) = (4, 3);
        let x = random_map(dh, h, w, 10);
        let m = 3;
        let mut kernels = vec![0.0; dh * m * m];
        for c in 0..dh {
            kernels[c * m * m + 4] = 1.0;
        }
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, dh, h, w);
        mask.logits.data_mut().fill(40.0);
        let mut exp = Array2::zeros((2 * dh, dh));
        for i in 0..dh {
            exp[[i, i]] = 1.0;
            exp[[dh + i, i]] = 1.0;
        }
        let head = SpamHead {
            kernel_size: m,
            kernels,
            mask,
            exp,
            exp_bias: None,
        };
        let out = sag_head(&x, &head).unwrap();
        assert_eq!(out.dims(), (2 * dh, h, w));
        for c in 0..dh {
            for (a, b) in out.channel(c).iter().zip(x.channel(c)) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in out.channel(dh + c).iter().zip(x.channel(c)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sag_head_zero_kernels_give_zero() {
        let dh = 2;
        let x = random_map(dh, 4, 4, 11);
        let head = SpamHead {
            kernel_size: 5,
            kernels: vec![0.0; dh * 25],
            mask: SrfMask::zeros(SrfMode::Depthwise, dh, 4, 4),
            exp: Array2::from_shape_fn((2 * dh, dh), |(i, j)| (i + j) as f64),
            exp_bias: None,
        };
        let out = sag_head(&x, &head).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn sag_head_matches_staged_oracle() {
        let dh = 2;
        let (h, w) = (4, 4);
        let x = random_map(dh, h, w, 12);
        let p = random_params(4 * dh, h, w, SrfMode::Depthwise, false, 13);
        let head = &p.heads[1]; // m = 5
        let out = sag_head(&x, head).unwrap();

        // Stage 1 via the sparse-operator route.
        let m = head.kernel_size;
        let mut conv = FeatureMap::zeros(dh, h, w);
        for c in 0..dh {
            let ks = KernelSpec::new(m, head.kernels[c * m * m..(c + 1) * m * m].to_vec()).unwrap();
            let op = ConvSupport::build(ks, h, w).unwrap();
            let y = op.apply(x.channel(c)).unwrap();
            conv.channel_mut(c).copy_from_slice(&y);
        }
        // Stage 2: srf; stage 3: explicit matvec.
        let filtered = srf(&conv, &head.mask).unwrap();
        for o in 0..2 * dh {
            for px in 0..h * w {
                let mut acc = 0.0;
                for i in 0..dh {
                    acc += head.exp[[o, i]] * filtered.output.channel(i)[px];
                }
                assert!((out.channel(o)[px] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn depthwise_conv_agrees_with_support_operator() {
        let (d, h, w) = (3, 5, 4);
        let x = random_map(d, h, w, 14);
        let mut rng = SeedStream::new(15);
        let m = 7;
        let kernels = rng.normal_vec(d * m * m);
        let direct = depthwise_conv(&x, &kernels, m).unwrap();
        for c in 0..d {
            let ks = KernelSpec::new(m, kernels[c * m * m..(c + 1) * m * m].to_vec()).unwrap();
            let op = ConvSupport::build(ks, h, w).unwrap();
            let y = op.apply(x.channel(c)).unwrap();
            for (a, b) in direct.channel(c).iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_aggregation_of_zero_weights_is_zero() {
        let (d, h, w) = (8, 4, 4);
        let x = random_map(d, h, w, 16);
        let mut p = random_params(d, h, w, SrfMode::Depthwise, false, 17);
        p.visit_mut(&mut |name, slice| {
            if name != "norm.gain" {
                slice.fill(0.0);
            }
        });
        let c = context_aggregation(&x, &p).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let out = spam_forward(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spam_forward_zero_input_is_zero() {
        let p = random_params(8, 4, 4, SrfMode::Depthwise, false, 18);
        let out = spam_forward(&FeatureMap::zeros(8, 4, 4), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spam_forward_composes_value_and_context() {
        let (d, h, w) = (8, 4, 4);
        let x = random_map(d, h, w, 19);
        let p = random_params(d, h, w, SrfMode::Depthwise, false, 20);
        let out = spam_forward(&x, &p).unwrap();
        let v = value_projection(&x, &p).unwrap();
        let c = context_aggregation(&x, &p).unwrap();
        let mut modulated = FeatureMap::zeros(d, h, w);
        for i in 0..d * h * w {
            modulated.data_mut()[i] = v.data()[i] * c.data()[i];
        }
        let expect = channel_linear(&p.out_linear, None, &modulated).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_unit_context_reduces_to_value_path() {
        // in_linear = 0 makes the context trunk zero; with biases on, setting
        // only proj's bias to 1 pins C(X) = 1, so SPAM = out_linear(V).
        let (d, h, w) = (4, 3, 3);
        let x = random_map(d, h, w, 21);
        let mut p = random_params(d, h, w, SrfMode::Depthwise, true, 22);
        p.visit_mut(&mut |name, slice| {
            if name == "in_linear" || name.ends_with(".bias") {
                slice.fill(0.0);
            }
        });
        p.proj_bias = Some(vec![1.0; d]);
        let c = context_aggregation(&x, &p).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let out = spam_forward(&x, &p).unwrap();
        let v = value_projection(&x, &p).unwrap();
        let expect = channel_linear(&p.out_linear, p.out_bias.as_deref(), &v).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_preserved_across_widths_and_sizes() {
        for d in [4, 8, 16] {
            for (h, w) in [(4, 4), (8, 8), (16, 16), (4, 8)] {
                let x = random_map(d, h, w, 23);
                let p = random_params(d, h, w, SrfMode::Depthwise, false, 24);
                let out = spam_forward(&x, &p).unwrap();
                assert_eq!(out.dims(), (d, h, w));
            }
        }
    }

    #[test]
    fn mismatched_mask_resolution_is_rejected() {
        let p = random_params(4, 4, 4, SrfMode::Depthwise, false, 25);
        let x = FeatureMap::zeros(4, 8, 8);
        assert!(spam_forward(&x, &p).is_err());
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let (d, h, w) = (4, 4, 4);
        let x = random_map(d, h, w, 26);
        let p = random_params(d, h, w, SrfMode::Depthwise, true, 27);
        let grads = spam_backward(&x, &p, &FeatureMap::zeros(d, h, w)).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        grads.params.visit(&mut |name, slice| {
            assert!(slice.iter().all(|&v| v == 0.0), "{name} not zero");
        });
    }

    #[test]
    fn out_linear_gradient_is_an_outer_product_on_single_pixel() {
        let (d, h, w) = (4, 1, 1);
        let x = random_map(d, h, w, 28);
        let p = random_params(d, h, w, SrfMode::Depthwise, false, 29);
        let g = random_map(d, h, w, 30);
        let grads = spam_backward(&x, &p, &g).unwrap();
        let v = value_projection(&x, &p).unwrap();
        let c = context_aggregation(&x, &p).unwrap();
        for o in 0..d {
            for i in 0..d {
                let want = g.data()[o] * v.data()[i] * c.data()[i];
                assert!((grads.params.out_linear[[o, i]] - want).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of every tensor (and the input) for one
    /// configuration.
    fn fd_check(mode: SrfMode, biases: bool, seed: u64) {
        let (d, h, w) = (4, 4, 4);
        let x = random_map(d, h, w, seed);
        let p = random_params(d, h, w, mode, biases, seed + 1);
        let r = random_map(d, h, w, seed + 2);
        let loss = |xx: &FeatureMap, pp: &SpamParams| -> crate::Result<f64> {
            let out = spam_forward(xx, pp)?;
            Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
        };
        let analytic = spam_backward(&x, &p, &r).unwrap();

        let mut names = Vec::new();
        p.visit(&mut |name, _| names.push(name.to_string()));
        for name in &names {
            let mut current = Vec::new();
            p.visit(&mut |n, s| {
                if n == name {
                    current = s.to_vec();
                }
            });
            let mut grad = Vec::new();
            analytic.params.visit(&mut |n, s| {
                if n == name {
                    grad = s.to_vec();
                }
            });
            let entry = check_tensor(name, &current, &grad, FD_STEP, |vals| {
                let mut pp = p.clone();
                pp.visit_mut(&mut |n, s| {
                    if n == name {
                        s.copy_from_slice(vals);
                    }
                });
                loss(&x, &pp)
            })
            .unwrap();
            assert!(
                entry.rel_error <= 1e-4,
                "{name}: rel error {}",
                entry.rel_error
            );
        }
        let fd_input = finite_diff(
            |vals| {
                let xx = FeatureMap::new(d, h, w, vals.to_vec())?;
                loss(&xx, &p)
            },
            x.data(),
            FD_STEP,
        )
        .unwrap();
        let rel = relative_error(analytic.input.data(), &fd_input);
        assert!(rel <= 1e-4, "input: rel error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences_depthwise() {
        fd_check(SrfMode::Depthwise, false, 40);
    }

    #[test]
    fn gradients_match_finite_differences_single_mask_with_biases() {
        fd_check(SrfMode::Single, true, 50);
    }

    #[test]
    fn param_count_matches_materialized_sizes() {
        for (mode, biases) in [
            (SrfMode::Depthwise, false),
            (SrfMode::Depthwise, true),
            (SrfMode::Single, false),
            (SrfMode::Single, true),
        ] {
            let (d, h, w) = (8, 4, 6);
            let stream = SeedStream::new(60);
            let p = SpamParams::random(d, h, w, mode, biases, &stream).unwrap();
            let mut total = 0;
            p.visit(&mut |_, s| total += s.len());
            assert_eq!(total, SpamParams::param_count(d, h, w, mode, biases));
        }
    }

    #[test]
    fn visit_and_visit_mut_agree_on_names() {
        let stream = SeedStream::new(61);
        let mut p = SpamParams::random(8, 4, 4, SrfMode::Depthwise, true, &stream).unwrap();
        let mut names_a = Vec::new();
        p.visit(&mut |n, _| names_a.push(n.to_string()));
        let mut names_b = Vec::new();
        p.visit_mut(&mut |n, _| names_b.push(n.to_string()));
        assert_eq!(names_a, names_b);
        assert!(names_a.contains(&"head2.mask".to_string()));
        assert!(names_a.contains(&"norm.gain".to_string()));
    }

    #[test]
    fn rejects_indivisible_width() {
        let stream = SeedStream::new(62);
        assert!(SpamParams::random(6, 4, 4, SrfMode::Depthwise, false, &stream).is_err());
    }
}
