//! Four static features: `f1` is invariant, `f2` and `f3` are spurious with a
//! domain-dependent mean that flips sign at test time, `f4` is pure noise.
//! With `s = 2y − 1`:
//!
//! ```text
//! f1 = s·mu_inv + sd_inv·ε
//! f2, f3 = s·mu_e + sd_spur·ε   (independent draws)
//! f4 = sd_noise·ε
//! ```

use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DomainSplit;
use crate::error::{FishrError, Result};
use crate::nn::DomainBatch;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearToySpec {
    pub n_per_domain: usize,
    #[serde(default)]
    pub seed: u64,
    pub mu_inv: f64,
    pub sd_inv: f64,
    /// spurious mean per training domain
    pub mu_spur: Vec<f64>,
    pub mu_spur_test: f64,
    pub sd_spur: f64,
    pub sd_noise: f64,
}

impl Default for LinearToySpec {
    /// Constants picked by the calibration sweep (`fishr calibrate`).
    fn default() -> Self {
        Self {
            n_per_domain: 1000,
            seed: 0,
            mu_inv: 1.0,
            sd_inv: 0.6,
            mu_spur: vec![0.3, 0.0],
            mu_spur_test: -0.8,
            sd_spur: 0.25,
            sd_noise: 1.0,
        }
    }
}

impl LinearToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_domain < 2 {
            return Err(FishrError::Config("n_per_domain must be ≥ 2".into()));
        }
        if self.mu_spur.is_empty() {
            return Err(FishrError::Config("need at least one training domain".into()));
        }
        let all = [self.mu_inv, self.sd_inv, self.mu_spur_test, self.sd_spur, self.sd_noise];
        if all.iter().chain(&self.mu_spur).any(|v| !v.is_finite()) {
            return Err(FishrError::Config("linear toy constants must be finite".into()));
        }
        if self.sd_inv < 0.0 || self.sd_spur < 0.0 || self.sd_noise < 0.0 {
            return Err(FishrError::Config("standard deviations must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub fn make_linear_toy(spec: &LinearToySpec) -> Result<DomainSplit> {
    spec.validate()?;
    let mut means = spec.mu_spur.clone();
    means.push(spec.mu_spur_test);
    let k = spec.mu_spur.len();
    let mut domains: Vec<DomainBatch> = means
        .iter()
        .enumerate()
        .map(|(e, &mu)| {
            let mut rng = rng_for(spec.seed, &format!("linear/domain{e}"));
            let n = spec.n_per_domain;
            let mut inputs = Mat::zeros(n, 4);
            let mut targets = Vec::with_capacity(n);
            for i in 0..n {
                let y = rng.gen_bool(0.5);
                let s = if y { 1.0 } else { -1.0 };
                let mut z = || rng.sample::<f64, _>(StandardNormal);
                inputs[(i, 0)] = s * spec.mu_inv + spec.sd_inv * z();
                inputs[(i, 1)] = s * mu + spec.sd_spur * z();
                inputs[(i, 2)] = s * mu + spec.sd_spur * z();
                inputs[(i, 3)] = spec.sd_noise * z();
                targets.push(y as u8 as f64);
            }
            let id = if e < k { format!("train{e}") } else { "test".to_string() };
            DomainBatch::new(id, inputs, targets)
        })
        .collect::<Result<_>>()?;
    let test = domains.pop().expect("test domain");
    Ok(DomainSplit { train: domains, test })
}
