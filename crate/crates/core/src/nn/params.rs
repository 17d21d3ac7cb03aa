use std::ops::Range;

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FishrError, Result};
use crate::rng::rng_for;

/// One affine layer: `weight` is `out × in`, `bias` has length `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Mat<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weight: Mat::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.fan_out() * (self.fan_in() + 1)
    }
}

/// Parameter subsets. The flat layout stores layers in order, so `Features`
/// is always a prefix and `Classifier` a suffix of the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// every parameter
    All,
    /// the final linear layer
    Classifier,
    /// every layer except the final one
    Features,
}

impl Subset {
    /// Indices of the layers that belong to the subset.
    pub fn layer_range(self, depth: usize) -> Range<usize> {
        match self {
            Subset::All => 0..depth,
            Subset::Classifier => depth - 1..depth,
            Subset::Features => 0..depth - 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Classifier => "classifier",
            Subset::Features => "features",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = FishrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "theta" => Ok(Subset::All),
            "classifier" | "omega" => Ok(Subset::Classifier),
            "features" | "phi" => Ok(Subset::Features),
            other => Err(FishrError::Config(format!("unknown subset `{other}`"))),
        }
    }
}

/// Architecture of a ReLU MLP with a single output logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpShape {
    pub d_in: usize,
    pub hidden: usize,
    /// number of linear layers; 1 is plain logistic regression
    pub depth: usize,
}

impl MlpShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(FishrError::Config("d_in must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(FishrError::Config("depth must be at least 1".into()));
        }
        if self.depth > 1 && self.hidden == 0 {
            return Err(FishrError::Config("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.d_in } else { self.hidden };
                let fan_out = if l + 1 == self.depth { 1 } else { self.hidden };
                (fan_out, fan_in)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * (i + 1)).sum()
    }
}

/// Network parameters θ = (φ, ω).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FishrError::Config("a network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(FishrError::Dimension(format!(
                    "layer {l}: bias length {} != fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if l > 0 && layers[l - 1].fan_out() != layer.fan_in() {
                return Err(FishrError::Dimension(format!(
                    "layer {l}: fan_in {} != previous fan_out {}",
                    layer.fan_in(),
                    layers[l - 1].fan_out()
                )));
            }
        }
        if layers.last().map(Layer::fan_out) != Some(1) {
            return Err(FishrError::Dimension("the output layer must produce one logit".into()));
        }
        Ok(Self { layers })
    }

    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        Self::new(
            shape
                .layer_dims()
                .into_iter()
                .map(|(o, i)| Layer::zeros(o, i))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            d_in: self.d_in(),
            hidden: if self.depth() > 1 { self.layers[0].fan_out() } else { 0 },
            depth: self.depth(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Flat offset of each layer's first parameter.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        offsets
    }

    /// Flat index range covered by a subset.
    pub fn subset_range(&self, subset: Subset) -> Range<usize> {
        let layers = subset.layer_range(self.depth());
        let offsets = self.layer_offsets();
        let start = offsets.get(layers.start).copied().unwrap_or(self.num_params());
        let end = offsets.get(layers.end).copied().unwrap_or(self.num_params());
        start..end
    }

    /// Flat view: per layer, the weight in row-major order followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for o in 0..layer.fan_out() {
                for i in 0..layer.fan_in() {
                    flat.push(layer.weight[(o, i)]);
                }
            }
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(FishrError::Dimension(format!(
                "flat vector has length {}, network has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
            for o in 0..fan_out {
                for i in 0..fan_in {
                    layer.weight[(o, i)] = it.next().unwrap_or_default();
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    pub fn from_flat(shape: MlpShape, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        params.set_flat(flat)?;
        Ok(params)
    }

    /// Σ θ² over every parameter, biases included.
    pub fn squared_norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum()
    }
}

/// Fan-in scaled uniform initialization: weights ~ U(−1/√fan_in, 1/√fan_in),
/// biases zero.
pub fn init_mlp(shape: MlpShape, seed: u64) -> Result<ParamSet> {
    shape.validate()?;
    let mut rng = rng_for(seed, "init_mlp");
    let layers = shape
        .layer_dims()
        .into_iter()
        .map(|(fan_out, fan_in)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            // row-major draw order keeps the stream independent of storage layout
            let draws: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Layer {
                weight: Mat::from_fn(fan_out, fan_in, |o, i| draws[o * fan_in + i]),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    ParamSet::new(layers)
}
