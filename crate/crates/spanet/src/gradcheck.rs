//! Central-difference gradient verification.
//!
//! [`finite_diff`] numerically differentiates a scalar loss with respect to a
//! flat parameter vector; [`relative_error`] compares the result against an
//! analytic gradient in the scale-free norm `|ga - gfd| / max(|gfd|, eps)`.
//! [`GradReport`] packages per-tensor outcomes for the CLI and the test
//! suites.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default perturbation step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error tolerance for accepting an analytic gradient.
pub const FD_TOL: f64 = 1e-4;

/// Central-difference gradient of `loss` at `at`, one coordinate at a time:
/// `(loss(x + h e_i) - loss(x - h e_i)) / 2h`.
///
/// The loss is evaluated twice at the base point first; any disagreement
/// means the closure is not deterministic and the finite differences would be
/// meaningless, so that is reported as an error rather than a gradient.
pub fn finite_diff<F>(mut loss: F, at: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let base1 = loss(at)?;
    let base2 = loss(at)?;
    if base1 != base2 || !base1.is_finite() {
        return Err(Error::NonDeterministicLoss {
            delta: (base1 - base2).abs(),
        });
    }
    let mut point = at.to_vec();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = loss(&point)?;
        point[i] = orig - step;
        let minus = loss(&point)?;
        point[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `||analytic - fd||_2 / max(||fd||_2, 1e-12)`.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), fd.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, f) in analytic.iter().zip(fd) {
        diff += (a - f) * (a - f);
        norm += f * f;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Outcome of checking one named tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    /// Number of scalar coordinates differenced.
    pub checks: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
}

/// Aggregate over every checked tensor of one instance (or several).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn from_entries(entries: Vec<GradEntry>, tolerance: f64) -> Self {
        let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
        let passed = !entries.is_empty() && max_rel_error <= tolerance;
        Self {
            entries,
            tolerance,
            max_rel_error,
            passed,
        }
    }

    /// First entry over tolerance, if any: the natural failure message.
    pub fn worst_failure(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_error > self.tolerance)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Difference one named tensor of a larger model: `loss_at(values)` must
/// rebuild the model with the tensor replaced and return the scalar loss.
pub fn check_tensor<F>(
    name: &str,
    current: &[f64],
    analytic: &[f64],
    step: f64,
    loss_at: F,
) -> Result<GradEntry>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if current.len() != analytic.len() {
        return Err(Error::DimensionMismatch(format!(
            "tensor {name}: {} values but {} gradient entries",
            current.len(),
            analytic.len()
        )));
    }
    let fd = finite_diff(loss_at, current, step)?;
    Ok(GradEntry {
        name: name.to_string(),
        checks: current.len(),
        rel_error: relative_error(analytic, &fd),
        analytic_norm: l2(analytic),
        fd_norm: l2(&fd),
    })
}
