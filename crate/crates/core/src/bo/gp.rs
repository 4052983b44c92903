//! Gaussian-process regression with a squared-exponential kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal variance used when the observations carry no spread.
pub const MIN_SIGNAL_VARIANCE: f64 = 1e-6;
/// Largest diagonal jitter (relative to the signal variance) tried before
/// giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Length scale shared by every dimension (fraction of the unit cube).
    pub length_scale: f64,
    pub noise_variance: f64,
    /// Fixed `κ_0`; `None` re-estimates it as the variance of the observations.
    pub signal_variance: Option<f64>,
    /// Fixed prior mean; `None` uses the mean of the observations.
    pub prior_mean: Option<f64>,
    /// Candidate length scales ranked by log marginal likelihood. Empty keeps
    /// `length_scale`.
    pub length_scale_grid: Vec<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            length_scale: 0.2,
            noise_variance: 1e-6,
            signal_variance: None,
            prior_mean: None,
            length_scale_grid: Vec::new(),
        }
    }
}

impl GpConfig {
    pub fn with_grid_refinement(mut self) -> Self {
        self.length_scale_grid = vec![0.1, 0.2, 0.4];
        self
    }
}

/// `κ_0 · exp(-Σ ((a_i - b_i)/ℓ_i)² / 2)`
pub fn se_kernel(a: &[f64], b: &[f64], length_scales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    signal_variance * (-0.5 * r2).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub prior_mean: f64,
    /// Diagonal jitter that was needed on top of the noise.
    pub jitter: f64,
    /// Lower Cholesky factor of `K + (noise + jitter) I`, row-major.
    chol: Vec<f64>,
    /// `(K + σ²I)⁻¹ (y - μ_0)`
    weights: Vec<f64>,
}

/// In-place lower Cholesky factorization; `None` if not positive definite.
fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Some(a)
}

/// Solves `L x = b` for lower-triangular `L`.
fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves `Lᵀ x = b`.
fn backward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn fit_with_scale(inputs: &[Vec<f64>], outputs: &[f64], cfg: &GpConfig, length_scale: f64) -> Result<GpModel> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Gp("at least one observation is required".into()));
    }
    if outputs.len() != n {
        return Err(Error::Gp(format!("{n} inputs but {} outputs", outputs.len())));
    }
    let dim = inputs[0].len();
    if inputs.iter().any(|x| x.len() != dim) {
        return Err(Error::Gp("inputs have inconsistent dimension".into()));
    }
    if outputs.iter().any(|y| !y.is_finite()) || inputs.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Gp("observations must be finite".into()));
    }
    if !(length_scale > 0.0 && cfg.noise_variance >= 0.0) {
        return Err(Error::Gp("length scale must be positive and noise non-negative".into()));
    }
    let mean = outputs.iter().sum::<f64>() / n as f64;
    let prior_mean = cfg.prior_mean.unwrap_or(mean);
    let signal_variance = match cfg.signal_variance {
        Some(v) if v > 0.0 => v,
        Some(v) => return Err(Error::Gp(format!("signal variance {v} must be positive"))),
        None => {
            let var = outputs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
            var.max(MIN_SIGNAL_VARIANCE)
        }
    };
    let length_scales = vec![length_scale; dim];
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = se_kernel(&inputs[i], &inputs[j], &length_scales, signal_variance);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut a = k.clone();
        for i in 0..n {
            a[i * n + i] += cfg.noise_variance + jitter;
        }
        if let Some(l) = cholesky(a, n) {
            break l;
        }
        jitter = if jitter == 0.0 { 1e-12 * signal_variance } else { jitter * 10.0 };
        if jitter > MAX_JITTER * signal_variance * (1.0 + 1e-9) {
            return Err(Error::Gp(format!(
                "covariance matrix of {n} observations is not positive definite even with jitter {:.1e}",
                MAX_JITTER * signal_variance
            )));
        }
        log::debug!("gp: escalating jitter to {jitter:.1e}");
    };
    let centered: Vec<f64> = outputs.iter().map(|y| y - prior_mean).collect();
    let weights = backward_sub(&chol, n, &forward_sub(&chol, n, &centered));
    Ok(GpModel {
        inputs: inputs.to_vec(),
        outputs: outputs.to_vec(),
        length_scales,
        signal_variance,
        noise_variance: cfg.noise_variance,
        prior_mean,
        jitter,
        chol,
        weights,
    })
}

/// Conditions the GP on `(inputs, outputs)`. With a length-scale grid, the
/// candidate with the highest log marginal likelihood wins (first on ties).
pub fn gp_fit(inputs: &[Vec<f64>], outputs: &[f64], cfg: &GpConfig) -> Result<GpModel> {
    if cfg.length_scale_grid.is_empty() {
        return fit_with_scale(inputs, outputs, cfg, cfg.length_scale);
    }
    let mut best: Option<(f64, GpModel)> = None;
    for &ls in &cfg.length_scale_grid {
        let model = fit_with_scale(inputs, outputs, cfg, ls)?;
        let lml = model.log_marginal_likelihood();
        if best.as_ref().map_or(true, |(b, _)| lml > *b) {
            best = Some((lml, model));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        se_kernel(a, b, &self.length_scales, self.signal_variance)
    }

    /// Posterior mean and standard deviation of the latent function at `g`.
    pub fn posterior(&self, g: &[f64]) -> (f64, f64) {
        let n = self.len();
        let ks: Vec<f64> = self.inputs.iter().map(|x| self.kernel(g, x)).collect();
        let mean = self.prior_mean + ks.iter().zip(&self.weights).map(|(k, w)| k * w).sum::<f64>();
        let v = forward_sub(&self.chol, n, &ks);
        let var = self.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0).sqrt())
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let fit: f64 = self
            .outputs
            .iter()
            .zip(&self.weights)
            .map(|(y, w)| (y - self.prior_mean) * w)
            .sum();
        let log_det: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}
