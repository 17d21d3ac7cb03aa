use faer::{Mat, MatRef};

use super::params::ParamSet;
use crate::error::{FishrError, Result};
use crate::linalg::mm;

/// Per-domain data: `inputs` is `n × d`, `targets` holds 0/1 labels.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub inputs: Mat<f64>,
    pub targets: Vec<f64>,
    pub domain_id: String,
}

impl DomainBatch {
    pub fn new(domain_id: impl Into<String>, inputs: Mat<f64>, targets: Vec<f64>) -> Result<Self> {
        let batch = Self {
            inputs,
            targets,
            domain_id: domain_id.into(),
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(FishrError::Input(format!("domain `{}` is empty", self.domain_id)));
        }
        if self.inputs.nrows() != self.targets.len() {
            return Err(FishrError::Dimension(format!(
                "domain `{}`: {} input rows but {} targets",
                self.domain_id,
                self.inputs.nrows(),
                self.targets.len()
            )));
        }
        check_targets(&self.targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }
}

pub(crate) fn check_targets(targets: &[f64]) -> Result<()> {
    match targets.iter().position(|&y| y != 0.0 && y != 1.0) {
        Some(i) => Err(FishrError::Input(format!(
            "target {} at index {i} is not in {{0, 1}}",
            targets[i]
        ))),
        None => Ok(()),
    }
}

/// Activations retained for backpropagation.
///
/// `hidden[l]` is the post-ReLU output of layer `l` (so there are `depth − 1`
/// of them); `logits` is the output of the final layer.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub hidden: Vec<Mat<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// Input of layer `l`.
    pub fn layer_input<'a>(&'a self, inputs: MatRef<'a, f64>, l: usize) -> MatRef<'a, f64> {
        if l == 0 {
            inputs
        } else {
            self.hidden[l - 1].as_ref()
        }
    }
}

fn affine(params_in: MatRef<'_, f64>, weight: &Mat<f64>, bias: &[f64]) -> Mat<f64> {
    let mut out = mm(params_in, weight.transpose());
    for (j, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            for x in out.col_as_slice_mut(j) {
                *x += b;
            }
        }
    }
    out
}

pub fn forward_cached(params: &ParamSet, inputs: MatRef<'_, f64>) -> Result<ForwardCache> {
    if inputs.ncols() != params.d_in() {
        return Err(FishrError::Dimension(format!(
            "input width {} != network input width {}",
            inputs.ncols(),
            params.d_in()
        )));
    }
    let depth = params.depth();
    let mut hidden: Vec<Mat<f64>> = Vec::with_capacity(depth - 1);
    let mut logits = Vec::new();
    for (l, layer) in params.layers().iter().enumerate() {
        let x = if l == 0 { inputs } else { hidden[l - 1].as_ref() };
        let mut a = affine(x, &layer.weight, &layer.bias);
        if l + 1 == depth {
            logits = a.col_as_slice(0).to_vec();
        } else {
            for j in 0..a.ncols() {
                for v in a.col_as_slice_mut(j) {
                    *v = v.max(0.0);
                }
            }
            hidden.push(a);
        }
    }
    Ok(ForwardCache { hidden, logits })
}

/// One logit per input row.
pub fn forward(params: &ParamSet, inputs: MatRef<'_, f64>) -> Result<Vec<f64>> {
    forward_cached(params, inputs).map(|c| c.logits)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy with logits: `softplus(z) − y·z`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Per-sample negative log-likelihood of a Bernoulli model parameterized by logits.
pub fn nll_loss(logits: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != targets.len() {
        return Err(FishrError::Dimension(format!(
            "{} logits but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    check_targets(targets)?;
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Fraction of samples where `1{z > 0}` equals the target.
pub fn accuracy(logits: &[f64], targets: &[f64]) -> f64 {
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    hits as f64 / logits.len().max(1) as f64
}
