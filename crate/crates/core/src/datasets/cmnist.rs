//! Colored MNIST following the IRM reference recipe.
//!
//! The first 50 000 training images are shuffled and dealt round-robin to the
//! training domains; images 50 000..60 000 form the test domain. Each image is
//! subsampled to 14×14 (every other row and column), its digit collapsed to
//! `y = 1{digit ≥ 5}`, the label flipped with probability `label_flip`, and
//! a color drawn as `y XOR Bernoulli(noise_e)`. The image occupies the color's
//! channel; the other channel is zero.

use faer::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::idx::Mnist;
use crate::error::{FishrError, Result};
use crate::nn::DomainBatch;
use crate::rng::rng_for;

pub const TRAIN_POOL: usize = 50_000;
pub const TEST_END: usize = 60_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColoredMnistSpec {
    /// color-flip probability for each training domain
    #[serde(default = "default_train_noise")]
    pub train_noise: Vec<f64>,
    #[serde(default = "default_test_noise")]
    pub test_noise: f64,
    #[serde(default = "default_label_flip")]
    pub label_flip: f64,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    /// sum the two channels, leaving a 196-dim color-blind input
    #[serde(default)]
    pub grayscale: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_noise() -> Vec<f64> {
    vec![0.1, 0.2]
}
fn default_test_noise() -> f64 {
    0.9
}
fn default_label_flip() -> f64 {
    0.25
}
fn default_downsample() -> usize {
    2
}

impl Default for ColoredMnistSpec {
    fn default() -> Self {
        Self {
            train_noise: default_train_noise(),
            test_noise: default_test_noise(),
            label_flip: default_label_flip(),
            downsample: default_downsample(),
            grayscale: false,
            seed: 0,
        }
    }
}

impl ColoredMnistSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = self.train_noise.iter().chain([&self.test_noise, &self.label_flip]);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(FishrError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.train_noise.is_empty() {
            return Err(FishrError::Config("need at least one training domain".into()));
        }
        if self.downsample == 0 {
            return Err(FishrError::Config("downsample must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Domain name from its color-label agreement, e.g. noise 0.1 → `env90`.
pub fn domain_name(noise: f64) -> String {
    format!("env{:.0}", (1.0 - noise) * 100.0)
}

/// Colored MNIST train and test domains plus, per domain, the underlying
/// digit-derived label before flipping (the "shape").
#[derive(Clone, Debug)]
pub struct ColoredMnist {
    pub train: Vec<DomainBatch>,
    pub test: DomainBatch,
    pub shape_labels: Vec<Vec<f64>>,
    pub colors: Vec<Vec<f64>>,
    /// source image indices per domain, train domains first
    pub source_indices: Vec<Vec<usize>>,
}

pub fn make_colored_mnist(mnist: &Mnist, spec: &ColoredMnistSpec) -> Result<ColoredMnist> {
    spec.validate()?;
    if mnist.len() < TEST_END {
        return Err(FishrError::Input(format!(
            "Colored MNIST needs the {TEST_END}-image training split, got {}",
            mnist.len()
        )));
    }
    let mut pool: Vec<usize> = (0..TRAIN_POOL).collect();
    pool.shuffle(&mut rng_for(spec.seed, "cmnist/shuffle"));
    let k = spec.train_noise.len();
    let mut groups: Vec<Vec<usize>> = (0..k)
        .map(|e| pool.iter().skip(e).step_by(k).copied().collect())
        .collect();
    groups.push((TRAIN_POOL..TEST_END).collect());

    let mut noises = spec.train_noise.clone();
    noises.push(spec.test_noise);
    let mut out = ColoredMnist {
        train: Vec::with_capacity(k),
        test: DomainBatch::new("pending", Mat::zeros(1, 1), vec![0.0])?,
        shape_labels: Vec::new(),
        colors: Vec::new(),
        source_indices: groups.clone(),
    };
    for (e, (idx, &noise)) in groups.iter().zip(&noises).enumerate() {
        let mut rng = rng_for(spec.seed, &format!("cmnist/domain{e}"));
        let (batch, shape, colors) = build_domain(mnist, idx, noise, spec, &mut rng)?;
        out.shape_labels.push(shape);
        out.colors.push(colors);
        if e < k {
            out.train.push(batch);
        } else {
            out.test = batch;
        }
    }
    Ok(out)
}

fn build_domain(
    mnist: &Mnist,
    idx: &[usize],
    noise: f64,
    spec: &ColoredMnistSpec,
    rng: &mut impl Rng,
) -> Result<(DomainBatch, Vec<f64>, Vec<f64>)> {
    let s = spec.downsample;
    let rows: Vec<usize> = (0..mnist.rows).step_by(s).collect();
    let cols: Vec<usize> = (0..mnist.cols).step_by(s).collect();
    let plane = rows.len() * cols.len();
    let dim = if spec.grayscale { plane } else { 2 * plane };

    let mut shape = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    let mut colors = Vec::with_capacity(idx.len());
    for &i in idx {
        let digit_label = (mnist.labels[i] >= 5) as u8;
        let y = digit_label ^ rng.gen_bool(spec.label_flip) as u8;
        let c = y ^ rng.gen_bool(noise) as u8;
        shape.push(digit_label as f64);
        targets.push(y as f64);
        colors.push(c as f64);
    }
    let mut inputs = Mat::<f64>::zeros(idx.len(), dim);
    for (r, &i) in idx.iter().enumerate() {
        let img = mnist.image(i);
        let offset = if spec.grayscale { 0 } else { colors[r] as usize * plane };
        for (a, &row) in rows.iter().enumerate() {
            for (b, &col) in cols.iter().enumerate() {
                inputs[(r, offset + a * cols.len() + b)] = img[row * mnist.cols + col] as f64 / 255.0;
            }
        }
    }
    Ok((DomainBatch::new(domain_name(noise), inputs, targets)?, shape, colors))
}

/// Sums the two color channels of a Colored MNIST batch (the color-blind
/// input seen by the grayscale model).
pub fn to_grayscale(batch: &DomainBatch) -> Result<DomainBatch> {
    let d = batch.dim();
    if d % 2 != 0 {
        return Err(FishrError::Dimension(format!("expected two channels, got {d} features")));
    }
    let plane = d / 2;
    let inputs = Mat::from_fn(batch.len(), plane, |i, j| batch.inputs[(i, j)] + batch.inputs[(i, j + plane)]);
    DomainBatch::new(batch.domain_id.clone(), inputs, batch.targets.clone())
}
