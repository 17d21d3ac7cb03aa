//! Domain-level statistics of per-sample gradients.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{FishrError, Result};
use crate::nn::{GradientMoments, PerSampleGrads};

/// Largest subset for which the full `p × p` covariance is materialized.
pub const MAX_COV_DIM: usize = 10_000;

/// Column mean of `G`.
pub fn grad_mean(g: &PerSampleGrads) -> Result<Vec<f64>> {
    let n = g.n();
    if n == 0 {
        return Err(FishrError::DegenerateSample("mean of zero gradients".into()));
    }
    Ok((0..g.p())
        .map(|j| g.matrix.col_as_slice(j).iter().sum::<f64>() / n as f64)
        .collect())
}

/// Unbiased per-coordinate variance, two-pass: `1/(n−1) Σ_i (g_i − ḡ)²`.
pub fn variance_centered(g: &PerSampleGrads) -> Result<Vec<f64>> {
    let n = g.n();
    if n < 2 {
        return Err(FishrError::DegenerateSample(format!(
            "centered variance needs at least 2 samples, got {n}"
        )));
    }
    let mean = grad_mean(g)?;
    Ok((0..g.p())
        .map(|j| {
            let m = mean[j];
            g.matrix
                .col_as_slice(j)
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect())
}

/// Normalized empirical-Fisher diagonal: `(1/n) Σ_i g_i²`.
pub fn variance_uncentered(g: &PerSampleGrads) -> Result<Vec<f64>> {
    let n = g.n();
    if n == 0 {
        return Err(FishrError::DegenerateSample("second moment of zero gradients".into()));
    }
    Ok((0..g.p())
        .map(|j| g.matrix.col_as_slice(j).iter().map(|x| x * x).sum::<f64>() / n as f64)
        .collect())
}

/// `C = 1/(n−1) (GᵀG − (1/n)(1ᵀG)ᵀ(1ᵀG))`, computed from centered columns.
pub fn covariance_full(g: &PerSampleGrads) -> Result<Mat<f64>> {
    let (n, p) = (g.n(), g.p());
    if p > MAX_COV_DIM {
        return Err(FishrError::Capacity(format!(
            "full covariance over {p} coordinates exceeds the {MAX_COV_DIM} limit"
        )));
    }
    if n < 2 {
        return Err(FishrError::DegenerateSample(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let mean = grad_mean(g)?;
    let centered = Mat::from_fn(n, p, |i, j| g.matrix[(i, j)] - mean[j]);
    let mut cov = crate::linalg::mm(centered.transpose(), centered.as_ref());
    let scale = 1.0 / (n - 1) as f64;
    for j in 0..p {
        for i in 0..p {
            cov[(i, j)] *= scale;
        }
    }
    // exact symmetry
    for j in 0..p {
        for i in j + 1..p {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(cov)
}

/// Per-domain gradient statistics.
#[derive(Clone, Debug)]
pub struct GradStats {
    pub mean: Vec<f64>,
    pub var_centered: Vec<f64>,
    pub var_uncentered: Vec<f64>,
    pub cov: Option<Mat<f64>>,
    pub n: usize,
}

impl GradStats {
    pub fn from_grads(g: &PerSampleGrads, with_cov: bool) -> Result<Self> {
        Ok(Self {
            mean: grad_mean(g)?,
            var_centered: variance_centered(g)?,
            var_uncentered: variance_uncentered(g)?,
            cov: if with_cov { Some(covariance_full(g)?) } else { None },
            n: g.n(),
        })
    }

    /// Statistics from raw moments. The centered variance uses
    /// `(Σg² − n ḡ²)/(n−1)`, clamped at zero against rounding.
    pub fn from_moments(m: &GradientMoments) -> Result<Self> {
        let n = m.n;
        if n < 2 {
            return Err(FishrError::DegenerateSample(format!(
                "centered variance needs at least 2 samples, got {n}"
            )));
        }
        let nf = n as f64;
        let var_centered = m
            .sum_sq
            .iter()
            .zip(&m.mean)
            .map(|(s, g)| ((s - nf * g * g) / (nf - 1.0)).max(0.0))
            .collect();
        let var_uncentered = m.sum_sq.iter().map(|s| s / nf).collect();
        Ok(Self {
            mean: m.mean.clone(),
            var_centered,
            var_uncentered,
            cov: None,
            n,
        })
    }

    pub fn variance(&self, centered: bool) -> &[f64] {
        if centered {
            &self.var_centered
        } else {
            &self.var_uncentered
        }
    }
}

/// Exponential moving average of a domain's gradient variance:
/// `v̄ᵗ = γ v̄ᵗ⁻¹ + (1−γ) vᵗ`, matched as `v̄ᵗ / (1−γ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub smoothed: Vec<f64>,
    pub gamma: f64,
    pub steps: u64,
}

impl EmaState {
    pub fn new(dim: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            smoothed: vec![0.0; dim],
            gamma,
            steps: 0,
        })
    }

    /// Constant part of the matched value, `γ v̄ᵗ⁻¹ / (1−γ)`. It carries no
    /// gradient: only the fresh `vᵗ` is differentiated, with unit weight.
    pub fn carry(&self) -> Vec<f64> {
        let c = self.gamma / (1.0 - self.gamma);
        self.smoothed.iter().map(|s| c * s).collect()
    }

    /// Folds in `v_e` and returns the matched value `v̄ᵗ / (1−γ)`.
    pub fn update(&mut self, v_e: &[f64]) -> Result<Vec<f64>> {
        if v_e.len() != self.smoothed.len() {
            return Err(FishrError::Dimension(format!(
                "ema of dimension {} fed a vector of length {}",
                self.smoothed.len(),
                v_e.len()
            )));
        }
        let g = self.gamma;
        for (s, &v) in self.smoothed.iter_mut().zip(v_e) {
            *s = g * *s + (1.0 - g) * v;
        }
        self.steps += 1;
        Ok(self.smoothed.iter().map(|s| s / (1.0 - g)).collect())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(FishrError::Config(format!("EMA coefficient {gamma} must lie in [0, 1)")));
    }
    Ok(())
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(mut state: EmaState, v_e: &[f64], gamma: f64) -> Result<(EmaState, Vec<f64>)> {
    check_gamma(gamma)?;
    state.gamma = gamma;
    let matched = state.update(v_e)?;
    Ok((state, matched))
}
