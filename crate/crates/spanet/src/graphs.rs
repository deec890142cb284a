//! Patch graphs, normalized Laplacians, and their spectral bases.
//!
//! A flattened `H x W` patch is a graph on `N = H*W` nodes. Convolutional
//! mixers induce a grid graph whose connectivity is the Chebyshev ball of
//! radius `floor((m-1)/2)` (the "eight neighbors" of a 3x3 kernel,
//! generalized), without periodic wraparound; attention induces the complete
//! graph. The normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}` of either
//! graph is symmetric with spectrum inside `[0, 2]`, and its eigenbasis is
//! the graph Fourier basis used by the profiler.

use ndarray::Array2;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// Grid graph with kernel-size-`m` connectivity.
    Grid { m: usize },
    /// Fully connected graph (self-attention's support pattern).
    Complete,
}

/// A patch graph: binary symmetric adjacency with zero diagonal.
#[derive(Debug, Clone)]
pub struct PatchGraph {
    pub kind: GraphKind,
    pub height: usize,
    pub width: usize,
    pub adjacency: Array2<f64>,
}

impl PatchGraph {
    /// Grid graph on an `h x w` patch: nodes `(y,x)` and `(y',x')` are
    /// adjacent iff `max(|y-y'|, |x-x'|) <= floor((m-1)/2)` and distinct.
    /// No self-loops, no wraparound; boundary nodes have fewer neighbors.
    pub fn grid(h: usize, w: usize, m: usize) -> Result<Self> {
        if h == 0 || w == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid graph needs h, w, m >= 1, got {h}x{w}, m={m}"
            )));
        }
        let rad = (m - 1) / 2;
        let n = h * w;
        let mut a = Array2::zeros((n, n));
        for y in 0..h {
            for x in 0..w {
                let node = y * w + x;
                let y_lo = y.saturating_sub(rad);
                let y_hi = (y + rad).min(h - 1);
                let x_lo = x.saturating_sub(rad);
                let x_hi = (x + rad).min(w - 1);
                for yy in y_lo..=y_hi {
                    for xx in x_lo..=x_hi {
                        let other = yy * w + xx;
                        if other != node {
                            a[[node, other]] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(Self {
            kind: GraphKind::Grid { m },
            height: h,
            width: w,
            adjacency: a,
        })
    }

    /// Complete graph on the nodes of an `h x w` patch.
    pub fn complete(h: usize, w: usize) -> Result<Self> {
        if h * w < 2 {
            return Err(Error::InvalidConfig(
                "complete graph needs at least 2 nodes".into(),
            ));
        }
        let n = h * w;
        let mut a = Array2::from_elem((n, n), 1.0);
        for i in 0..n {
            a[[i, i]] = 0.0;
        }
        Ok(Self {
            kind: GraphKind::Complete,
            height: h,
            width: w,
            adjacency: a,
        })
    }

    pub fn node_count(&self) -> usize {
        self.height * self.width
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`. Rejects graphs with isolated nodes, whose
/// degree normalization is undefined.
pub fn normalized_laplacian(g: &PatchGraph) -> Result<Array2<f64>> {
    let n = g.node_count();
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = g.adjacency.row(i).sum();
        if deg <= 0.0 {
            return Err(Error::IsolatedNode { node: i });
        }
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let off = -inv_sqrt_deg[i] * g.adjacency[[i, j]] * inv_sqrt_deg[j];
            l[[i, j]] = if i == j { 1.0 + off } else { off };
        }
    }
    Ok(l)
}

/// Eigenpairs of a symmetric matrix: eigenvalues ascending, orthonormal
/// eigenvector columns, each column's sign fixed so its largest-magnitude
/// entry is positive.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    /// Column `n` is the eigenvector of `eigenvalues[n]`.
    pub vectors: Array2<f64>,
}

impl SpectralBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Max-abs residual of `U^T U - I`.
    pub fn orthonormality_residual(&self) -> f64 {
        let n = self.len();
        let gram = self.vectors.t().dot(&self.vectors);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - target).abs());
            }
        }
        worst
    }

    /// Max-abs residual of `L - U diag(lambda) U^T` against the given matrix.
    pub fn reconstruction_residual(&self, l: &Array2<f64>) -> f64 {
        let n = self.len();
        let mut scaled = self.vectors.clone();
        for (mut col, &lam) in scaled.columns_mut().into_iter().zip(&self.eigenvalues) {
            col.mapv_inplace(|v| v * lam);
        }
        let rebuilt = scaled.dot(&self.vectors.t());
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((rebuilt[[i, j]] - l[[i, j]]).abs());
            }
        }
        worst
    }
}

/// Off-diagonal Frobenius tolerance at which a Jacobi sweep stops.
pub const JACOBI_TOL: f64 = 1e-12;
/// Maximum number of cyclic Jacobi sweeps before reporting non-convergence.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps rotate every off-diagonal pair in a fixed row-major order until the
/// off-diagonal Frobenius norm drops to [`JACOBI_TOL`]. Quadratic convergence
/// makes the 100-sweep budget generous for the `N <= 1024` matrices used here.
pub fn eigendecompose(l: &Array2<f64>) -> Result<SpectralBasis> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "eigendecompose needs a square matrix, got {}x{}",
            n,
            l.ncols()
        )));
    }
    let mut sym_residual: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sym_residual = sym_residual.max((l[[i, j]] - l[[j, i]]).abs());
        }
    }
    if sym_residual > 1e-12 {
        return Err(Error::DimensionMismatch(format!(
            "matrix is not symmetric (max asymmetry {sym_residual:.3e})"
        )));
    }

    let mut a = l.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let mut converged = false;
    let mut residual = off_diagonal_frobenius(&a);
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        if residual <= JACOBI_TOL {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[p, i]] = a[[i, p]];
                    a[[i, q]] = s * aip + c * aiq;
                    a[[q, i]] = a[[i, q]];
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
        sweeps += 1;
        residual = off_diagonal_frobenius(&a);
    }
    if !converged && residual > JACOBI_TOL {
        return Err(Error::NoConvergence { sweeps, residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry positive (first index on
        // ties), so repeated runs and different solvers line up.
        let mut best = 0;
        let mut best_abs = 0.0;
        for i in 0..n {
            let mag = v[[i, src]].abs();
            if mag > best_abs {
                best_abs = mag;
                best = i;
            }
        }
        let flip = if v[[best, src]] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, dst]] = flip * v[[i, src]];
        }
    }
    Ok(SpectralBasis {
        eigenvalues,
        vectors,
    })
}

fn off_diagonal_frobenius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

/// Graph Fourier transform: `U^T h`.
pub fn gft(basis: &SpectralBasis, signal: &[f64]) -> Result<Vec<f64>> {
    let n = basis.len();
    if signal.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} entries for a basis of {}",
            signal.len(),
            n
        )));
    }
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        *o = basis
            .vectors
            .column(k)
            .iter()
            .zip(signal)
            .map(|(u, s)| u * s)
            .sum();
    }
    Ok(out)
}

/// Inverse graph Fourier transform: `U h_hat`.
pub fn igft(basis: &SpectralBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    let n = basis.len();
    if coeffs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have {} entries for a basis of {}",
            coeffs.len(),
            n
        )));
    }
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        *o = basis
            .vectors
            .row(i)
            .iter()
            .zip(coeffs)
            .map(|(u, c)| u * c)
            .sum();
    }
    Ok(out)
}
