//! Elementary numerics: channel-major feature maps, complex spectra,
//! nonlinearities, global normalization, and the 2D discrete Fourier
//! transform.
//!
//! Conventions, fixed here and relied on everywhere else:
//!
//! * `FeatureMap` stores `D x H x W` in channel-major order: entry
//!   `(c, y, x)` lives at `c*H*W + y*W + x`.
//! * `dft2` is the unnormalized forward transform; `idft2` carries the whole
//!   `1/(H*W)` factor. Both are computed as separable row/column direct
//!   transforms with exact integer twiddle indexing, which keeps round-trip
//!   error near machine precision at the sizes used here (H, W <= 64).
//! * GELU uses the exact error-function form, not the tanh approximation.

use ndarray::Array2;

use crate::{Error, Result};

/// Dense real tensor of shape `D x H x W` (channels, rows, cols).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Vec<f64>,
    d: usize,
    h: usize,
    w: usize,
}

impl FeatureMap {
    pub fn new(d: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeError(format!(
                "feature map dims must be >= 1, got {d}x{h}x{w}"
            )));
        }
        if data.len() != d * h * w {
            return Err(Error::DimensionMismatch(format!(
                "feature map {d}x{h}x{w} needs {} values, got {}",
                d * h * w,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeError(
                "feature map contains non-finite entries".into(),
            ));
        }
        Ok(Self { data, d, h, w })
    }

    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; d * h * w],
            d,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// View as a `D x HW` matrix: row `c` is channel `c` flattened row-major.
    /// Tokens (pixels) are the columns.
    pub fn as_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.d, self.h * self.w), self.data.clone())
            .expect("dims validated at construction")
    }

    /// Inverse of [`Self::as_matrix`].
    pub fn from_matrix(m: &Array2<f64>, h: usize, w: usize) -> Result<Self> {
        if m.ncols() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} columns, patch {}x{} needs {}",
                m.ncols(),
                h,
                w,
                h * w
            )));
        }
        Self::new(m.nrows(), h, w, m.iter().copied().collect())
    }
}

/// Complex tensor stored as separate real and imaginary planes, same layout
/// as [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMap {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    d: usize,
    h: usize,
    w: usize,
}

impl ComplexMap {
    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Self {
            re: vec![0.0; d * h * w],
            im: vec![0.0; d * h * w],
            d,
            h,
            w,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }
}

/// Exact-erf GELU: `x * Phi(x)` with the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu(v)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of row-wise softmax: given `y = softmax(z)` and upstream `g`,
/// returns `dL/dz = y .* (g - sum(g .* y))` per row.
pub fn softmax_rows_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(y.raw_dim());
    for ((mut orow, yrow), grow) in out.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// Default epsilon for [`spatial_norm`].
pub const NORM_EPS: f64 = 1e-6;

/// Group-size-1 normalization: mean and variance are taken jointly over all
/// channel and spatial positions, then each channel is scaled by its gain
/// (and shifted by an optional per-channel bias).
///
/// If the variance is below `eps` the map is treated as constant and the
/// centered output is exactly zero (plus bias), which keeps the all-zero
/// parameter case well defined.
pub fn spatial_norm(x: &FeatureMap, gain: &[f64], eps: f64) -> Result<FeatureMap> {
    spatial_norm_affine(x, gain, None, eps)
}

pub fn spatial_norm_affine(
    x: &FeatureMap,
    gain: &[f64],
    bias: Option<&[f64]>,
    eps: f64,
) -> Result<FeatureMap> {
    let (d, h, w) = x.dims();
    if gain.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "gain has {} entries for {} channels",
            gain.len(),
            d
        )));
    }
    if let Some(b) = bias {
        if b.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "bias has {} entries for {} channels",
                b.len(),
                d
            )));
        }
    }
    let (mean, var) = mean_var(x.data());
    let n = h * w;
    let mut out = FeatureMap::zeros(d, h, w);
    if var < eps {
        if let Some(b) = bias {
            for c in 0..d {
                out.channel_mut(c).fill(b[c]);
            }
        }
        return Ok(out);
    }
    let inv = 1.0 / (var + eps).sqrt();
    for c in 0..d {
        let g = gain[c];
        let b = bias.map_or(0.0, |b| b[c]);
        let src = &x.data()[c * n..(c + 1) * n];
        let dst = out.channel_mut(c);
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = g * (v - mean) * inv + b;
        }
    }
    Ok(out)
}

/// Gradients of [`spatial_norm_affine`] with respect to the input, gain, and
/// (when present) bias.
pub struct SpatialNormGrads {
    pub input: FeatureMap,
    pub gain: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn spatial_norm_backward(
    x: &FeatureMap,
    gain: &[f64],
    has_bias: bool,
    eps: f64,
    upstream: &FeatureMap,
) -> Result<SpatialNormGrads> {
    let (d, h, w) = x.dims();
    if upstream.dims() != x.dims() {
        return Err(Error::DimensionMismatch(
            "upstream gradient shape differs from input".into(),
        ));
    }
    let n = h * w;
    let total = (d * n) as f64;
    let (mean, var) = mean_var(x.data());
    let d_bias = has_bias.then(|| {
        (0..d)
            .map(|c| upstream.channel(c).iter().sum())
            .collect::<Vec<f64>>()
    });
    if var < eps {
        // Constant input: the centered branch emitted exact zeros, so neither
        // the input nor the gain received any sensitivity.
        return Ok(SpatialNormGrads {
            input: FeatureMap::zeros(d, h, w),
            gain: vec![0.0; d],
            bias: d_bias,
        });
    }
    let inv = 1.0 / (var + eps).sqrt();
    // xhat = (x - mean) * inv; y = gain .* xhat (+ bias)
    // h = gain .* g; dx = inv * (h - mean(h) - xhat * mean(h .* xhat))
    let mut d_gain = vec![0.0; d];
    let mut h_sum = 0.0;
    let mut hx_sum = 0.0;
    for c in 0..d {
        let g = gain[c];
        let src = &x.data()[c * n..(c + 1) * n];
        let up = upstream.channel(c);
        for (&xv, &gv) in src.iter().zip(up) {
            let xhat = (xv - mean) * inv;
            let hv = g * gv;
            d_gain[c] += gv * xhat;
            h_sum += hv;
            hx_sum += hv * xhat;
        }
    }
    let h_mean = h_sum / total;
    let hx_mean = hx_sum / total;
    let mut d_input = FeatureMap::zeros(d, h, w);
    for c in 0..d {
        let g = gain[c];
        let src = &x.data()[c * n..(c + 1) * n];
        let up = upstream.channel(c);
        let dst = d_input.channel_mut(c);
        for ((o, &xv), &gv) in dst.iter_mut().zip(src).zip(up) {
            let xhat = (xv - mean) * inv;
            *o = inv * (g * gv - h_mean - xhat * hx_mean);
        }
    }
    Ok(SpatialNormGrads {
        input: d_input,
        gain: d_gain,
        bias: d_bias,
    })
}

fn mean_var(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// One complex plane of an `H x W` spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl Spectrum {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            re: vec![0.0; h * w],
            im: vec![0.0; h * w],
            h,
            w,
        }
    }
}

/// Unnormalized forward 2D DFT of a real `H x W` channel:
/// `X[u,v] = sum_{y,x} x[y,x] * exp(-2*pi*i*(u*y/H + v*x/W))`.
pub fn dft2(x: &[f64], h: usize, w: usize) -> Spectrum {
    debug_assert_eq!(x.len(), h * w);
    let zeros = vec![0.0; h * w];
    dft2_complex(x, &zeros, h, w, false)
}

/// Inverse 2D DFT carrying the `1/(H*W)` factor; returns a complex result
/// because a non-Hermitian spectrum (e.g. after an arbitrary real mask) has a
/// complex inverse image.
pub fn idft2(s: &Spectrum) -> Spectrum {
    let mut out = dft2_complex(&s.re, &s.im, s.h, s.w, true);
    let scale = 1.0 / (s.h * s.w) as f64;
    for v in out.re.iter_mut().chain(out.im.iter_mut()) {
        *v *= scale;
    }
    out
}

/// Separable direct DFT over complex input. `inverse` flips the twiddle sign
/// only; normalization is the caller's business.
pub fn dft2_complex(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> Spectrum {
    debug_assert_eq!(re.len(), h * w);
    debug_assert_eq!(im.len(), h * w);
    let mut mid = Spectrum::zeros(h, w);
    let (cos_w, sin_w) = twiddles(w, inverse);
    for row in 0..h {
        let base = row * w;
        for v in 0..w {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for x in 0..w {
                let idx = (v * x) % w;
                let (c, s) = (cos_w[idx], sin_w[idx]);
                let (xr, xi) = (re[base + x], im[base + x]);
                acc_re += xr * c - xi * s;
                acc_im += xr * s + xi * c;
            }
            mid.re[base + v] = acc_re;
            mid.im[base + v] = acc_im;
        }
    }
    let mut out = Spectrum::zeros(h, w);
    let (cos_h, sin_h) = twiddles(h, inverse);
    for col in 0..w {
        for u in 0..h {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for y in 0..h {
                let idx = (u * y) % h;
                let (c, s) = (cos_h[idx], sin_h[idx]);
                let (xr, xi) = (mid.re[y * w + col], mid.im[y * w + col]);
                acc_re += xr * c - xi * s;
                acc_im += xr * s + xi * c;
            }
            out.re[u * w + col] = acc_re;
            out.im[u * w + col] = acc_im;
        }
    }
    out
}

/// `exp(sign * 2*pi*i*j/len)` for `j = 0..len`, as (cos, sin) tables.
fn twiddles(len: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let step = sign * 2.0 * std::f64::consts::PI / len as f64;
    (0..len)
        .map(|j| {
            let ang = step * j as f64;
            (ang.cos(), ang.sin())
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Identity limit for large inputs.
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        // High-precision oracle values for the exact erf form.
        assert!((gelu(1.0) - 0.84134474606854294859).abs() < 1e-15);
        assert!((gelu(0.5) - 0.34573123063700655182).abs() < 1e-15);
        assert!((gelu(2.0) - 1.9544997361036415856).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.15865525393145705141).abs() < 1e-15);
    }

    #[test]
    fn gelu_prime_matches_difference_quotient() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = array![[0.0, 0.0, 0.0, 0.0]];
        let e = softmax_rows(&s);
        for v in e.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let a = softmax_rows(&array![[5.0, 5.0 + 0.3]]);
        let b = softmax_rows(&array![[0.0, 0.3]]);
        assert!((a[[0, 0]] - b[[0, 0]]).abs() < 1e-15);
        assert!((a[[0, 1]] - b[[0, 1]]).abs() < 1e-15);
    }

    #[test]
    fn softmax_oracle_row() {
        // exp/sum of [1,2,3] computed in extended precision.
        let e = softmax_rows(&array![[1.0, 2.0, 3.0]]);
        let expect = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        for (got, want) in e.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_norm_hand_example() {
        // 2 channels x 1 x 2: [1,3 | 5,7]; mean 4, population variance 5.
        let x = FeatureMap::new(2, 1, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = spatial_norm(&x, &[1.0, 1.0], NORM_EPS).unwrap();
        let expect = [
            -1.3416406523358152925,
            -0.44721355077860509749,
            0.44721355077860509749,
            1.3416406523358152925,
        ];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn spatial_norm_constant_is_zero() {
        let x = FeatureMap::new(3, 2, 2, vec![4.2; 12]).unwrap();
        let out = spatial_norm(&x, &[1.0, 1.0, 1.0], NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_norm_standardizes() {
        let mut rng = SeedStream::new(11);
        let data: Vec<f64> = (0..4 * 6 * 6).map(|_| 2.0 * rng.normal() + 3.0).collect();
        let x = FeatureMap::new(4, 6, 6, data).unwrap();
        let out = spatial_norm(&x, &[1.0; 4], NORM_EPS).unwrap();
        let (mean, var) = mean_var(out.data());
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn spatial_norm_backward_matches_finite_differences() {
        let mut rng = SeedStream::new(5);
        let x = FeatureMap::new(2, 3, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let gain: Vec<f64> = (0..2).map(|_| 1.0 + 0.1 * rng.normal()).collect();
        let up = FeatureMap::new(2, 3, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let grads = spatial_norm_backward(&x, &gain, false, NORM_EPS, &up).unwrap();
        let loss = |xd: &[f64], gd: &[f64]| -> f64 {
            let xm = FeatureMap::new(2, 3, 3, xd.to_vec()).unwrap();
            let y = spatial_norm(&xm, gd, NORM_EPS).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..18 {
            let mut lo = x.data().to_vec();
            let mut hi = lo.clone();
            lo[i] -= h;
            hi[i] += h;
            let fd = (loss(&hi, &gain) - loss(&lo, &gain)) / (2.0 * h);
            assert!(
                (grads.input.data()[i] - fd).abs() < 1e-7,
                "input grad {i}: {} vs {}",
                grads.input.data()[i],
                fd
            );
        }
        for c in 0..2 {
            let mut lo = gain.clone();
            let mut hi = gain.clone();
            lo[c] -= h;
            hi[c] += h;
            let fd = (loss(x.data(), &hi) - loss(x.data(), &lo)) / (2.0 * h);
            assert!((grads.gain[c] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn dft_constant_input() {
        let h = 4;
        let w = 5;
        let x = vec![2.5; h * w];
        let s = dft2(&x, h, w);
        assert!((s.re[0] - 2.5 * (h * w) as f64).abs() < 1e-10);
        for i in 1..h * w {
            assert!(s.re[i].abs() < 1e-10 && s.im[i].abs() < 1e-10);
        }
    }

    #[test]
    fn dft_round_trip_16x16() {
        let mut rng = SeedStream::new(3);
        let x: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let back = idft2(&dft2(&x, 16, 16));
        for (a, b) in x.iter().zip(&back.re) {
            assert!((a - b).abs() < 1e-10);
        }
        for v in &back.im {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn dft_parseval() {
        let mut rng = SeedStream::new(9);
        let (h, w) = (8, 12);
        let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let s = dft2(&x, h, w);
        let spatial: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = s
            .re
            .iter()
            .zip(&s.im)
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            / (h * w) as f64;
        assert!((spatial - spectral).abs() / spatial < 1e-9);
    }

    #[test]
    fn dft_hermitian_symmetry_on_real_input() {
        let mut rng = SeedStream::new(4);
        let (h, w) = (6, 4);
        let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let s = dft2(&x, h, w);
        for u in 0..h {
            for v in 0..w {
                let (uu, vv) = ((h - u) % h, (w - v) % w);
                assert!((s.re[u * w + v] - s.re[uu * w + vv]).abs() < 1e-10);
                assert!((s.im[u * w + v] + s.im[uu * w + vv]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn feature_map_rejects_bad_shapes() {
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 2..24)) {
            let n = vals.len();
            let s = Array2::from_shape_vec((1, n), vals).unwrap();
            let e = softmax_rows(&s);
            let sum: f64 = e.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(e.iter().all(|&v| v > 0.0 && v < 1.0 + 1e-12));
        }

        #[test]
        fn sigmoid_monotone(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid(lo) <= sigmoid(hi));
            // Strict bounds hold until exp(-|a|) underflows past one ulp,
            // well outside this range.
            prop_assert!(sigmoid(a) > 0.0 && sigmoid(a) < 1.0);
        }

        #[test]
        fn dft_round_trip_random_sizes(h in 1usize..9, w in 1usize..9, seed in 0u64..500) {
            let mut rng = SeedStream::new(seed);
            let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
            let back = idft2(&dft2(&x, h, w));
            for (a, b) in x.iter().zip(&back.re) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
