//! Posterior evaluation metrics: relative field reconstruction error, PCA
//! projections of latent means, and rank statistics.

use neural_mcmc_core::eigen::symmetric_eigen_descending;
use neural_mcmc_core::tensor::Tensor;
use neural_mcmc_core::{Error as CoreError, Result as CoreResult};

/// `||t_true - t_pred||_2 / ||t_true||_2`.
pub fn relative_error(t_true: &[f64], t_pred: &[f64]) -> CoreResult<f64> {
    if t_true.len() != t_pred.len() {
        return Err(CoreError::Shape(format!(
            "relative_error: {} vs {} entries",
            t_true.len(),
            t_pred.len()
        )));
    }
    let norm: f64 = t_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CoreError::Contract("relative_error: zero reference field".into()));
    }
    let diff: f64 = t_true
        .iter()
        .zip(t_pred.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

pub struct PcaResult {
    /// `n x components` projected coordinates (zero mean per component).
    pub coords: Tensor,
    /// Covariance eigenvalues of the retained components, descending.
    pub explained_variance: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

/// Principal component projection of row vectors.
pub fn pca_project(data: &Tensor, components: usize) -> CoreResult<PcaResult> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(CoreError::Contract("pca_project: need at least 2 rows".into()));
    }
    if components == 0 || components > d {
        return Err(CoreError::Contract(format!(
            "pca_project: components {components} outside 1..={d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(r).iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(d, d);
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov.data[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / (n as f64 - 1.0);
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    let eig = symmetric_eigen_descending(&cov)?;
    let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut coords = Tensor::zeros(n, components);
    for r in 0..n {
        let row = data.row(r);
        for c in 0..components {
            let mut acc = 0.0;
            for j in 0..d {
                acc += (row[j] - mean[j]) * eig.eigenvectors.at(j, c);
            }
            coords.data[r * components + c] = acc;
        }
    }
    Ok(PcaResult {
        coords,
        explained_variance: eig.eigenvalues[..components].to_vec(),
        total_variance,
    })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> CoreResult<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CoreError::Contract("spearman: need two equal-length series".into()));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> CoreResult<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::Contract("pearson: zero-variance series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Median of a sample (averages the middle pair on even counts).
pub fn median(values: &[f64]) -> CoreResult<f64> {
    if values.is_empty() {
        return Err(CoreError::Contract("median: empty".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
