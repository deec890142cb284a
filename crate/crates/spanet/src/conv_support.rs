//! Convolution as an explicit linear operator on flattened patches.
//!
//! A stride-1, zero-padded `m x m` cross-correlation on an `H x W` patch is a
//! linear map on `R^{HW}`. Writing `z = r*m + t` for the kernel tap at row
//! offset `r` and column offset `t`, the map decomposes as
//! `C = sum_z k_z B_z`, where `B_z` is the 0/1 shift operator that reads the
//! input pixel `(y + r - p, x + t - p)` when it lies inside the patch
//! (`p = (m-1)/2`). The profiler conjugates this `C` with a graph Fourier
//! basis; the sparse row form keeps that cheap for `N` up to a few thousand.

use ndarray::Array2;
use std::collections::BTreeMap;

use crate::{Error, Result};

/// An odd `m x m` kernel stored row-major (`weights[r*m + t]`).
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub m: usize,
    pub weights: Vec<f64>,
}

impl KernelSpec {
    pub fn new(m: usize, weights: Vec<f64>) -> Result<Self> {
        if m == 0 || m % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd and positive, got {m}"
            )));
        }
        if weights.len() != m * m {
            return Err(Error::DimensionMismatch(format!(
                "kernel size {m} needs {} weights, got {}",
                m * m,
                weights.len()
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidConfig("kernel weights must be finite".into()));
        }
        Ok(Self { m, weights })
    }

    pub fn padding(&self) -> usize {
        (self.m - 1) / 2
    }
}

/// Column index read by tap `z` of an `m x m` kernel at output pixel `a`, or
/// `None` when the tap falls outside the zero-padded patch. This is row `a`
/// of the shift operator `B_z`.
pub fn shift_operator_column(z: usize, m: usize, h: usize, w: usize, a: usize) -> Option<usize> {
    let p = ((m - 1) / 2) as isize;
    let r = (z / m) as isize;
    let t = (z % m) as isize;
    let y = (a / w) as isize;
    let x = (a % w) as isize;
    let yy = y + r - p;
    let xx = x + t - p;
    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
        Some(yy as usize * w + xx as usize)
    } else {
        None
    }
}

/// The operator `C = sum_z k_z B_z` in sparse row form: `rows[a]` lists the
/// `(column, weight)` pairs of row `a`, columns ascending.
#[derive(Debug, Clone)]
pub struct ConvSupport {
    pub height: usize,
    pub width: usize,
    pub kernel: KernelSpec,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl ConvSupport {
    pub fn build(kernel: KernelSpec, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch dimensions must be positive, got {h}x{w}"
            )));
        }
        let n = h * w;
        let m = kernel.m;
        let mut rows = Vec::with_capacity(n);
        for a in 0..n {
            // Distinct taps can hit the same column only for m > min(h, w)
            // style overlaps; accumulate through a map to stay correct there.
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (z, &kw) in kernel.weights.iter().enumerate() {
                if let Some(b) = shift_operator_column(z, m, h, w, a) {
                    *acc.entry(b).or_insert(0.0) += kw;
                }
            }
            rows.push(acc.into_iter().collect());
        }
        Ok(Self {
            height: h,
            width: w,
            kernel,
            rows,
        })
    }

    pub fn node_count(&self) -> usize {
        self.height * self.width
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut c = Array2::zeros((n, n));
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, v) in row {
                c[[a, b]] = v;
            }
        }
        c
    }

    /// Apply the operator to a flattened signal.
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let n = self.node_count();
        if signal.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "signal has {} entries for a {}x{} patch",
                signal.len(),
                self.height,
                self.width
            )));
        }
        let mut out = vec![0.0; n];
        for (a, row) in self.rows.iter().enumerate() {
            out[a] = row.iter().map(|&(b, v)| v * signal[b]).sum();
        }
        Ok(out)
    }

    /// Trace of the dense operator, summed without materializing it.
    pub fn trace(&self) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(a, row)| {
                row.iter()
                    .filter(|&&(b, _)| b == a)
                    .map(|&(_, v)| v)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Stride-1 zero-padded cross-correlation computed directly from the sliding
/// window, bypassing the operator form. Output size equals input size.
pub fn direct_conv(signal: &[f64], h: usize, w: usize, kernel: &KernelSpec) -> Result<Vec<f64>> {
    if signal.len() != h * w {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} entries for a {h}x{w} patch",
            signal.len()
        )));
    }
    Ok(correlate2d(signal, h, w, &kernel.weights, kernel.m, 1, kernel.padding()).0)
}

/// Zero-padded 2D cross-correlation with arbitrary stride; returns the output
/// plane and its dimensions. `out[v,u] = sum_{r,t} k[r,t] x[v*s + r - p, u*s + t - p]`.
pub fn correlate2d(
    x: &[f64],
    h: usize,
    w: usize,
    weights: &[f64],
    m: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let h_out = (h + 2 * pad - m) / stride + 1;
    let w_out = (w + 2 * pad - m) / stride + 1;
    let mut out = vec![0.0; h_out * w_out];
    for v in 0..h_out {
        for u in 0..w_out {
            let mut acc = 0.0;
            for r in 0..m {
                let yy = (v * stride + r) as isize - pad as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for t in 0..m {
                    let xx = (u * stride + t) as isize - pad as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += weights[r * m + t] * x[yy as usize * w + xx as usize];
                }
            }
            out[v * w_out + u] = acc;
        }
    }
    (out, h_out, w_out)
}
