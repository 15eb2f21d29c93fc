//! Log-Gaussian random field: squared-exponential covariance on mesh nodes,
//! its eigendecomposition, and the truncated Karhunen-Loeve parameterization
//! `log t = mu_t + sigma_t * Psi Pi^{1/2} lambda`.

use alloc::format;
use alloc::vec::Vec;

use crate::eigen::{symmetric_eigen_descending, SymEigen};
use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Squared-exponential kernel configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub lengthscale: f64,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) {
            return Err(Error::Contract(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }
}

/// `exp(-1/2 sum_j ((x_j - y_j) / l)^2)`.
pub fn kernel_eval(x: &[f64], y: &[f64], lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) {
        return Err(Error::Contract(format!(
            "kernel_eval: lengthscale must be positive, got {lengthscale}"
        )));
    }
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel_eval: point dims {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let mut q = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = (a - b) / lengthscale;
        q += d * d;
    }
    Ok(math::exp(-0.5 * q))
}

/// Dense covariance over mesh nodes; exactly symmetric with unit diagonal.
pub fn build_covariance(nodes: &[[f64; 2]], lengthscale: f64) -> Result<Tensor> {
    if nodes.is_empty() {
        return Err(Error::Contract("build_covariance: no nodes".into()));
    }
    let n = nodes.len();
    let mut c = Tensor::zeros(n, n);
    for i in 0..n {
        c.data[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = kernel_eval(&nodes[i], &nodes[j], lengthscale)?;
            c.data[i * n + j] = v;
            c.data[j * n + i] = v;
        }
    }
    Ok(c)
}

/// Re-export of the shared symmetric eigendecomposition with the ordering
/// contract (descending eigenvalues, orthonormal columns).
pub fn eigendecompose_descending(c: &Tensor) -> Result<SymEigen> {
    symmetric_eigen_descending(c)
}

/// How many leading modes a truncation retains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    ModeCount(usize),
    /// Smallest mode count whose eigenvalue mass reaches this fraction.
    EnergyTarget(f64),
}

/// Truncated KL basis of the log-transmissivity field.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    /// `n_nodes x n_modes`, orthonormal columns.
    pub modes: Tensor,
    /// Retained eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Mean of the log-transmissivity at every node.
    pub mean: Vec<f64>,
    /// Marginal standard deviation of the log field.
    pub marginal_std: f64,
    /// Retained eigenvalue mass over the total.
    pub captured_fraction: f64,
}

impl KlBasis {
    pub fn n_nodes(&self) -> usize {
        self.modes.rows
    }

    pub fn n_modes(&self) -> usize {
        self.modes.cols
    }
}

/// Negative round-off eigenvalues below this magnitude are clamped to zero.
const EIGENVALUE_CLAMP: f64 = -1e-10;

/// Retains the leading modes of an eigendecomposition as a [`KlBasis`].
pub fn truncate_basis(
    eigen: &SymEigen,
    truncation: Truncation,
    mean: Vec<f64>,
    marginal_std: f64,
) -> Result<KlBasis> {
    let n = eigen.eigenvalues.len();
    if mean.len() != n {
        return Err(Error::Shape(format!(
            "truncate_basis: mean has {} entries for {} nodes",
            mean.len(),
            n
        )));
    }
    if !(marginal_std > 0.0) {
        return Err(Error::Contract("marginal_std must be positive".into()));
    }
    for &v in &eigen.eigenvalues {
        if v < EIGENVALUE_CLAMP && v < -1e-8 * eigen.eigenvalues[0].max(1.0) {
            return Err(Error::Contract(format!(
                "truncate_basis: significantly negative eigenvalue {v}"
            )));
        }
    }
    let clamped: Vec<f64> = eigen.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("truncate_basis: zero total variance".into()));
    }
    let n_modes = match truncation {
        Truncation::ModeCount(m) => {
            if m == 0 || m > n {
                return Err(Error::Contract(format!(
                    "truncate_basis: mode count {m} outside 1..={n}"
                )));
            }
            m
        }
        Truncation::EnergyTarget(target) => {
            if !(target > 0.0 && target < 1.0) {
                return Err(Error::Contract(format!(
                    "truncate_basis: energy target {target} outside (0,1)"
                )));
            }
            let mut acc = 0.0;
            let mut m = n;
            for (i, &v) in clamped.iter().enumerate() {
                acc += v;
                if acc / total >= target {
                    m = i + 1;
                    break;
                }
            }
            m
        }
    };
    let retained: f64 = clamped[..n_modes].iter().sum();
    let mut modes = Tensor::zeros(n, n_modes);
    for r in 0..n {
        for c in 0..n_modes {
            modes.data[r * n_modes + c] = eigen.eigenvectors.at(r, c);
        }
    }
    Ok(KlBasis {
        modes,
        eigenvalues: clamped[..n_modes].to_vec(),
        mean,
        marginal_std,
        captured_fraction: retained / total,
    })
}

/// Evaluates the KL expansion: returns `(log_t, t)` with `t = exp(log_t)`.
pub fn sample_log_field(basis: &KlBasis, lambda: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if lambda.len() != basis.n_modes() {
        return Err(Error::Shape(format!(
            "sample_log_field: lambda has {} entries for {} modes",
            lambda.len(),
            basis.n_modes()
        )));
    }
    let n = basis.n_nodes();
    let m = basis.n_modes();
    let mut log_t = basis.mean.clone();
    let scaled: Vec<f64> = lambda
        .iter()
        .zip(basis.eigenvalues.iter())
        .map(|(&l, &pi)| basis.marginal_std * math::sqrt(pi) * l)
        .collect();
    for r in 0..n {
        let row = &basis.modes.data[r * m..(r + 1) * m];
        let mut acc = 0.0;
        for (psi, s) in row.iter().zip(scaled.iter()) {
            acc += psi * s;
        }
        log_t[r] += acc;
    }
    let t: Vec<f64> = log_t.iter().map(|&v| math::exp(v)).collect();
    Ok((log_t, t))
}
