//! Scaled dot-product self-attention, its support-matrix reformulation, and
//! the MixAttention token mixer.
//!
//! The key algebraic fact used by the profiler: once `E = softmax(QK^T /
//! sqrt(d_h))` is formed, attention applies the *same* row-stochastic matrix
//! `E` to every projected value channel. Attention is therefore a (signal
//! dependent) support operator over the complete patch graph, directly
//! comparable to the convolution operators in [`crate::conv_support`].

use ndarray::Array2;

use crate::conv_support::correlate2d;
use crate::tensor::{softmax_rows, FeatureMap};
use crate::{Error, Result};

/// Projection weights for one attention head. Features live in columns: an
/// input patch is `X: D x HW`, tokens are columns, and `Q = X^T W_q`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        if w_q.dim() != w_k.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query and key projections disagree: {:?} vs {:?}",
                w_q.dim(),
                w_k.dim()
            )));
        }
        if w_v.nrows() != w_q.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "value projection expects {} input features, got {}",
                w_q.nrows(),
                w_v.nrows()
            )));
        }
        if w_q.ncols() == 0 {
            return Err(Error::InvalidConfig("head width must be >= 1".into()));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads: 1,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.ncols()
    }
}

/// `E = softmax(Q K^T / sqrt(d_h))` with row-max stabilization. `Q` and `K`
/// are `HW x d_h`; rows of `E` sum to 1 and every entry is in `(0, 1]`.
pub fn attention_matrix(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if q.nrows() != k.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} tokens, key has {}",
            q.nrows(),
            k.nrows()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|v| v * scale);
    Ok(softmax_rows(&logits))
}

/// The attention operator for an input patch: `E` built from `Q = X^T W_q`,
/// `K = X^T W_k`.
pub fn attention_support_matrix(x: &Array2<f64>, params: &AttentionParams) -> Result<Array2<f64>> {
    if x.nrows() != params.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} features, projections expect {}",
            x.nrows(),
            params.feature_dim()
        )));
    }
    let q = x.t().dot(&params.w_q);
    let k = x.t().dot(&params.w_k);
    attention_matrix(&q, &k)
}

/// Attention in one shot: `E (X^T W_v)`, output `HW x d_h`.
pub fn attention_direct(x: &Array2<f64>, params: &AttentionParams) -> Result<Array2<f64>> {
    let e = attention_support_matrix(x, params)?;
    Ok(e.dot(&x.t().dot(&params.w_v)))
}

/// Attention evaluated channel-by-channel through its support form: for each
/// value column `w_v^(i)`, apply the support operator to the projected signal
/// `X^T w_v^(i)`. Algebraically identical to [`attention_direct`]; kept as an
/// explicitly looped second route so the two can cross-check each other.
pub fn attention_as_support(x: &Array2<f64>, params: &AttentionParams) -> Result<Array2<f64>> {
    let e = attention_support_matrix(x, params)?;
    let n = x.ncols();
    let d = x.nrows();
    let d_out = params.w_v.ncols();
    let mut out = Array2::zeros((n, d_out));
    for i in 0..d_out {
        // Projected channel signal s = X^T w_v^(i).
        let mut s = vec![0.0; n];
        for (tok, sv) in s.iter_mut().enumerate() {
            let mut acc = 0.0;
            for f in 0..d {
                acc += x[[f, tok]] * params.w_v[[f, i]];
            }
            *sv = acc;
        }
        for a in 0..n {
            let mut acc = 0.0;
            for (b, sv) in s.iter().enumerate() {
                acc += e[[a, b]] * sv;
            }
            out[[a, i]] = acc;
        }
    }
    Ok(out)
}

/// MixAttention parameters: full-width value projection plus a per-channel
/// 7x7 depthwise kernel bank (`dw[c*49 ..]` row-major).
#[derive(Debug, Clone)]
pub struct MixAttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub dw: Vec<f64>,
    pub m: usize,
}

pub const MIX_ATTENTION_KERNEL: usize = 7;

impl MixAttentionParams {
    pub fn new(
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        dw: Vec<f64>,
    ) -> Result<Self> {
        let d = w_v.nrows();
        if w_v.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "MixAttention value projection must be square, got {}x{}",
                d,
                w_v.ncols()
            )));
        }
        if w_q.nrows() != d || w_k.nrows() != d || w_q.ncols() != w_k.ncols() {
            return Err(Error::DimensionMismatch(
                "query/key projections do not match the feature width".into(),
            ));
        }
        let m = MIX_ATTENTION_KERNEL;
        if dw.len() != d * m * m {
            return Err(Error::DimensionMismatch(format!(
                "depthwise bank needs {} weights for {} channels, got {}",
                d * m * m,
                d,
                dw.len()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            dw,
            m,
        })
    }
}

/// MixAttention: `E(V) + depthwise_conv(V)` where `V = X^T W_v` is shared by
/// both branches (the convolution branch reads `V` reshaped to `D x H x W`).
/// Output has the input's `D x H x W` shape.
pub fn mix_attention(x: &FeatureMap, params: &MixAttentionParams) -> Result<FeatureMap> {
    let (d, h, w) = x.dims();
    if d != params.w_v.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels, projections expect {}",
            d,
            params.w_v.nrows()
        )));
    }
    let n = h * w;
    let xm = x.as_matrix();
    let v = xm.t().dot(&params.w_v); // HW x D
    let q = xm.t().dot(&params.w_q);
    let k = xm.t().dot(&params.w_k);
    let e = attention_matrix(&q, &k)?;
    let ev = e.dot(&v);

    let m = params.m;
    let pad = (m - 1) / 2;
    let mut out = FeatureMap::zeros(d, h, w);
    for c in 0..d {
        let plane: Vec<f64> = (0..n).map(|t| v[[t, c]]).collect();
        let (conv, _, _) = correlate2d(&plane, h, w, &params.dw[c * m * m..(c + 1) * m * m], m, 1, pad);
        let dst = out.channel_mut(c);
        for t in 0..n {
            dst[t] = ev[[t, c]] + conv[t];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Tiny integer LCG shared with the extended-precision oracle script so
    /// both sides build identical inputs from literal recurrences.
    fn lcg_vals(n: usize, seed: u64) -> Vec<f64> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x = (1103515245u64.wrapping_mul(x).wrapping_add(12345)) % (1 << 31);
                (x % 2000) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    fn mat(rows: usize, cols: usize, vals: Vec<f64>) -> Array2<f64> {
        Array2::from_shape_vec((rows, cols), vals).unwrap()
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let q = Array2::zeros((6, 3));
        let mut rng = SeedStream::new(3);
        let k = mat(6, 3, rng.normal_vec(18));
        let e = attention_matrix(&q, &k).unwrap();
        for v in e.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let q = mat(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let k = mat(1, 4, vec![1.0, 0.0, -2.0, 0.25]);
        let e = attention_matrix(&q, &k).unwrap();
        assert_eq!(e.dim(), (1, 1));
        assert_eq!(e[[0, 0]], 1.0);
    }

    #[test]
    fn four_token_matrix_matches_extended_precision_oracle() {
        let q = mat(4, 2, lcg_vals(8, 1));
        let k = mat(4, 2, lcg_vals(8, 2));
        let e = attention_matrix(&q, &k).unwrap();
        let expect = [
            [
                0.217680881223022182456,
                0.187375838994895521353,
                0.281241837124613674245,
                0.313701442657468621947,
            ],
            [
                0.24848302708968679442,
                0.387838953202508995625,
                0.173095273752462890673,
                0.190582745955341319283,
            ],
            [
                0.251490627048786612705,
                0.186686270268795652304,
                0.299756063045257799501,
                0.26206703963715993549,
            ],
            [
                0.273564389619160882333,
                0.123967228931506381739,
                0.376624354078134818534,
                0.225844027371197917394,
            ],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((e[[i, j]] - expect[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn sixteen_token_row_matches_extended_precision_oracle() {
        let q = mat(16, 2, lcg_vals(32, 3));
        let k = mat(16, 2, lcg_vals(32, 4));
        let e = attention_matrix(&q, &k).unwrap();
        let row0 = [
            0.0937406802803460623237,
            0.0537198854939205514591,
            0.0857003549677524291797,
            0.0620366118780845059758,
            0.0733734516676143326392,
            0.0680548016245506766114,
            0.0416512285387876708363,
            0.0497765000927552981764,
            0.0464538835403435476195,
            0.0530446766441985354152,
            0.0515489604662534189549,
            0.0929124878666230297881,
            0.0576387750502194372274,
            0.0533308083712964722188,
            0.0401957217320906719124,
            0.0768211717851633596621,
        ];
        for (j, want) in row0.iter().enumerate() {
            assert!((e[[0, j]] - want).abs() < 1e-15, "col {j}");
        }
        for i in 0..16 {
            let sum: f64 = e.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    fn random_params(d: usize, dh: usize, seed: u64) -> AttentionParams {
        let rng = SeedStream::new(seed);
        AttentionParams::new(
            mat(d, dh, rng.split("q").normal_vec(d * dh)),
            mat(d, dh, rng.split("k").normal_vec(d * dh)),
            mat(d, dh, rng.split("v").normal_vec(d * dh)),
        )
        .unwrap()
    }

    #[test]
    fn support_form_equals_direct_form() {
        let mut rng = SeedStream::new(17);
        let (d, n, dh) = (8, 16, 4);
        let params = random_params(d, dh, 99);
        let x = mat(d, n, rng.normal_vec(d * n));
        let direct = attention_direct(&x, &params).unwrap();
        let support = attention_as_support(&x, &params).unwrap();
        for (a, b) in direct.iter().zip(support.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_value_column_collapses_the_sum() {
        let mut rng = SeedStream::new(23);
        let params = random_params(5, 1, 7);
        let x = mat(5, 9, rng.normal_vec(45));
        let direct = attention_direct(&x, &params).unwrap();
        let support = attention_as_support(&x, &params).unwrap();
        assert_eq!(direct.ncols(), 1);
        for (a, b) in direct.iter().zip(support.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = SeedStream::new(29);
        let mut params = random_params(4, 3, 11);
        params.w_v = Array2::zeros((4, 3));
        let x = mat(4, 6, rng.normal_vec(24));
        let out = attention_as_support(&x, &params).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_tokens_conjugates_the_matrix() {
        let mut rng = SeedStream::new(31);
        let (d, n) = (6, 8);
        let params = random_params(d, 4, 13);
        let x = mat(d, n, rng.normal_vec(d * n));
        let e = attention_support_matrix(&x, &params).unwrap();
        // A fixed-point-free permutation of the 8 tokens.
        let perm = [3usize, 5, 0, 7, 1, 6, 2, 4];
        let mut xp = Array2::zeros((d, n));
        for tok in 0..n {
            for f in 0..d {
                xp[[f, perm[tok]]] = x[[f, tok]];
            }
        }
        let ep = attention_support_matrix(&xp, &params).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((ep[[perm[i], perm[j]]] - e[[i, j]]).abs() < 1e-10);
            }
        }
    }

    fn random_mix_params(d: usize, dh: usize, seed: u64) -> MixAttentionParams {
        let rng = SeedStream::new(seed);
        MixAttentionParams::new(
            mat(d, dh, rng.split("q").normal_vec(d * dh)),
            mat(d, dh, rng.split("k").normal_vec(d * dh)),
            mat(d, d, rng.split("v").normal_vec(d * d)),
            rng.split("dw").normal_vec(d * 49),
        )
        .unwrap()
    }

    #[test]
    fn mix_attention_with_zero_kernels_is_plain_attention() {
        let mut rng = SeedStream::new(37);
        let (d, h, w) = (3, 3, 4);
        let mut params = random_mix_params(d, 2, 41);
        params.dw = vec![0.0; d * 49];
        let x = FeatureMap::new(d, h, w, rng.normal_vec(d * h * w)).unwrap();
        let out = mix_attention(&x, &params).unwrap();
        let attn = AttentionParams::new(
            params.w_q.clone(),
            params.w_k.clone(),
            params.w_v.clone(),
        )
        .unwrap();
        let plain = attention_direct(&x.as_matrix(), &attn).unwrap();
        for c in 0..d {
            for t in 0..h * w {
                assert!((out.channel(c)[t] - plain[[t, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_attention_identity_kernel_zero_queries_closed_form() {
        // Zero queries -> attention branch averages V over tokens; an
        // identity depthwise kernel passes V through. Output = mean(V) + V.
        let mut rng = SeedStream::new(43);
        let (d, h, w) = (2, 2, 3);
        let n = h * w;
        let mut params = random_mix_params(d, 2, 47);
        params.w_q = Array2::zeros((d, 2));
        params.dw = vec![0.0; d * 49];
        for c in 0..d {
            params.dw[c * 49 + 24] = 1.0; // center of a 7x7
        }
        let x = FeatureMap::new(d, h, w, rng.normal_vec(d * n)).unwrap();
        let v = x.as_matrix().t().dot(&params.w_v);
        let out = mix_attention(&x, &params).unwrap();
        for c in 0..d {
            let mean: f64 = (0..n).map(|t| v[[t, c]]).sum::<f64>() / n as f64;
            for t in 0..n {
                assert!((out.channel(c)[t] - (mean + v[[t, c]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_attention_sums_independent_branches() {
        let mut rng = SeedStream::new(53);
        let (d, h, w) = (4, 4, 4);
        let n = h * w;
        let params = random_mix_params(d, 3, 59);
        let x = FeatureMap::new(d, h, w, rng.normal_vec(d * n)).unwrap();
        let out = mix_attention(&x, &params).unwrap();

        // Branch 1 via the generic attention path.
        let attn = AttentionParams::new(
            params.w_q.clone(),
            params.w_k.clone(),
            params.w_v.clone(),
        )
        .unwrap();
        let ev = attention_direct(&x.as_matrix(), &attn).unwrap();
        // Branch 2 via the sparse operator form of each depthwise kernel.
        let v = x.as_matrix().t().dot(&params.w_v);
        for c in 0..d {
            let kernel =
                crate::conv_support::KernelSpec::new(7, params.dw[c * 49..(c + 1) * 49].to_vec())
                    .unwrap();
            let op = crate::conv_support::ConvSupport::build(kernel, h, w).unwrap();
            let plane: Vec<f64> = (0..n).map(|t| v[[t, c]]).collect();
            let conv = op.apply(&plane).unwrap();
            for t in 0..n {
                let want = ev[[t, c]] + conv[t];
                assert!((out.channel(c)[t] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let q = Array2::<f64>::zeros((4, 2));
        let k = Array2::<f64>::zeros((4, 3));
        assert!(attention_matrix(&q, &k).is_err());
        let params = random_params(6, 2, 61);
        let x = Array2::<f64>::zeros((5, 4));
        assert!(attention_direct(&x, &params).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn attention_matrix_is_row_stochastic(n in 1usize..12, dh in 1usize..5, seed in 0u64..1000) {
            let rng = SeedStream::new(seed);
            let q = mat(n, dh, rng.split("q").normal_vec(n * dh));
            let k = mat(n, dh, rng.split("k").normal_vec(n * dh));
            let e = attention_matrix(&q, &k).unwrap();
            for i in 0..n {
                let sum: f64 = e.row(i).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            prop_assert!(e.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
