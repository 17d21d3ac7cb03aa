//! Small ReLU MLPs with a single binary logit: parameters, forward pass,
//! per-sample backpropagation and Adam.

pub mod adam;
pub mod backprop;
pub mod forward;
pub mod params;

pub use adam::{AdamConfig, AdamState};
pub use backprop::{
    accumulate_objective_gradient, backprop_deltas, batch_gradient, gradient_moments,
    per_sample_grads, residuals, DomainAdjoint, DomainPass, GradAdjoint, GradientMoments,
    PerSampleGrads,
};
pub use forward::{
    accuracy, bce_with_logit, forward, forward_cached, mean, nll_loss, sigmoid, softplus,
    DomainBatch, ForwardCache,
};
pub use params::{init_mlp, Layer, MlpShape, ParamSet, Subset};
