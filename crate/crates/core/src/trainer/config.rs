use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::{ColoredMnistSpec, LinearToySpec};
use crate::error::{FishrError, Result};
use crate::nn::AdamConfig;
use crate::penalties::PenaltySpec;
use crate::rng::fnv1a64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Linear {
        spec: LinearToySpec,
    },
    Twobit {
        n: usize,
        #[serde(default)]
        spec: ColoredMnistSpec,
    },
    /// Built from the raw IDX files in `mnist_dir`.
    Cmnist {
        mnist_dir: PathBuf,
        #[serde(default)]
        spec: ColoredMnistSpec,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// ignored when `depth = 1`
    pub hidden: usize,
    /// number of linear layers; 1 is logistic regression
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// coefficient of `‖θ‖²` in the objective (rescaled with it once λ > 1)
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
        }
    }
}

/// One training run. `epochs` counts optimizer steps; with full-domain
/// batches (the default) each step is one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub penalty: PenaltySpec,
    pub epochs: u64,
    /// per-domain minibatch size; `None` means the whole domain
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// record metrics every this many steps (and always at the last step)
    #[serde(default = "eval_every")]
    pub eval_every: u64,
}

fn eval_every() -> u64 {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(FishrError::Config("epochs must be ≥ 1".into()));
        }
        if self.eval_every < 1 {
            return Err(FishrError::Config("eval_every must be ≥ 1".into()));
        }
        if self.model.depth < 1 || (self.model.depth > 1 && self.model.hidden < 1) {
            return Err(FishrError::Config("model needs depth ≥ 1 and hidden ≥ 1".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.l2 >= 0.0) {
            return Err(FishrError::Config("lr must be > 0 and l2 ≥ 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(FishrError::Config("batch_size must be ≥ 1".into()));
        }
        self.penalty.validate()?;
        match &self.dataset {
            DatasetConfig::Linear { spec } => spec.validate(),
            DatasetConfig::Twobit { spec, .. } | DatasetConfig::Cmnist { spec, .. } => spec.validate(),
        }
    }

    /// Parses a JSON config, naming the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| FishrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable identifier of the run: hash of the canonical JSON.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalties::PenaltyKind;

    fn sample() -> TrainConfig {
        TrainConfig {
            name: "t".into(),
            dataset: DatasetConfig::Linear { spec: LinearToySpec::default() },
            model: ModelConfig { hidden: 0, depth: 1 },
            optim: OptimConfig { lr: 0.01, l2: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            penalty: PenaltySpec::new(PenaltyKind::Fishr, 10.0, 5),
            epochs: 3,
            batch_size: None,
            seed: 0,
            eval_every: 1,
        }
    }

    #[test]
    fn json_round_trip_and_digest() {
        let c = sample();
        let text = serde_json::to_string(&c).unwrap();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let other = TrainConfig { seed: 1, ..c };
        assert_ne!(other.digest(), sample().digest());
    }

    #[test]
    fn unknown_field_is_named() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v["optim"]["learning_rate"] = serde_json::json!(0.1);
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(&err, FishrError::Config(m) if m.contains("learning_rate")), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let c = TrainConfig { epochs: 0, ..sample() };
        assert!(c.validate().is_err());
        let mut c = sample();
        c.penalty.lambda = f64::NAN;
        assert!(c.validate().is_err());
    }
}
