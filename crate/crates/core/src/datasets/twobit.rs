//! Two-feature proxy of Colored MNIST: one "shape" bit standing in for the
//! digit class and one "color" bit, drawn with the same causal law.

use faer::Mat;
use rand::Rng;

use super::cmnist::{domain_name, ColoredMnistSpec};
use super::DomainSplit;
use crate::error::{FishrError, Result};
use crate::nn::DomainBatch;
use crate::rng::rng_for;

/// `n` samples per domain; `spec.downsample` and `spec.grayscale` are ignored.
pub fn make_two_bit_cmnist(n: usize, spec: &ColoredMnistSpec) -> Result<DomainSplit> {
    spec.validate()?;
    if n == 0 {
        return Err(FishrError::Config("two-bit domains need n ≥ 1".into()));
    }
    let mut noises = spec.train_noise.clone();
    noises.push(spec.test_noise);
    let mut domains: Vec<DomainBatch> = noises
        .iter()
        .enumerate()
        .map(|(e, &noise)| {
            let mut rng = rng_for(spec.seed, &format!("twobit/domain{e}"));
            let mut inputs = Mat::zeros(n, 2);
            let mut targets = Vec::with_capacity(n);
            for i in 0..n {
                let shape = rng.gen_bool(0.5) as u8;
                let y = shape ^ rng.gen_bool(spec.label_flip) as u8;
                let color = y ^ rng.gen_bool(noise) as u8;
                inputs[(i, 0)] = shape as f64;
                inputs[(i, 1)] = color as f64;
                targets.push(y as f64);
            }
            DomainBatch::new(domain_name(noise), inputs, targets)
        })
        .collect::<Result<_>>()?;
    let test = domains.pop().expect("test domain");
    Ok(DomainSplit { train: domains, test })
}
