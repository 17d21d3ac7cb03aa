//! Invariance penalties and the composite training objective.
//!
//! Every penalty is averaged over domains so that its scale does not grow
//! with `|E|`:
//!
//! | kind     | value                                   |
//! |----------|-----------------------------------------|
//! | Fishr    | `(1/|E|) Σ_e ‖v_e − v̄‖²` on gradient variances |
//! | V-REx    | `(1/|E|) Σ_e (R_e − R̄)²` (population variance of risks) |
//! | IGA      | `(1/|E|) Σ_e ‖g_e − ḡ‖²` on gradient means |
//! | Fish-dot | `−mean_{a<b} g_a · g_b`                  |
//! | IRMv1    | `(1/|E|) Σ_e (∂_w R_e(w·z)|_{w=1})²`      |
//!
//! For two domains these reduce to `¼‖v_A − v_B‖²`, `¼(R_A − R_B)²`,
//! `¼‖g_A − g_B‖²`, `−g_A·g_B` and `½(d_A² + d_B²)` respectively.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{FishrError, Result};
use crate::hessian::{classifier_diagnostics, ClassifierDiagnostics};
use crate::nn::{
    accumulate_objective_gradient, accuracy, backprop_deltas, forward_cached, gradient_moments, mean,
    nll_loss, per_sample_grads, residuals, sigmoid, DomainAdjoint, DomainBatch, DomainPass,
    GradAdjoint, ParamSet, Subset,
};
use crate::stats::{covariance_full, grad_mean, variance_uncentered, EmaState, GradStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    None,
    Fishr,
    Vrex,
    Iga,
    FishDot,
    Irmv1,
}

impl PenaltyKind {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "erm",
            PenaltyKind::Fishr => "fishr",
            PenaltyKind::Vrex => "vrex",
            PenaltyKind::Iga => "iga",
            PenaltyKind::FishDot => "fishdot",
            PenaltyKind::Irmv1 => "irmv1",
        }
    }

    fn uses_grad_stats(self) -> bool {
        matches!(self, PenaltyKind::Fishr | PenaltyKind::Iga | PenaltyKind::FishDot)
    }
}

/// Which penalty, how strong, and when it switches on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    #[serde(default)]
    pub warmup_iters: u64,
    #[serde(default = "default_true")]
    pub centered: bool,
    #[serde(default)]
    pub use_full_cov: bool,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_subset")]
    pub subset: Subset,
}

fn default_true() -> bool {
    true
}

fn default_subset() -> Subset {
    Subset::Classifier
}

impl PenaltySpec {
    pub fn erm() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            warmup_iters: 0,
            centered: true,
            use_full_cov: false,
            gamma: 0.0,
            subset: Subset::Classifier,
        }
    }

    pub fn new(kind: PenaltyKind, lambda: f64, warmup_iters: u64) -> Self {
        Self {
            kind,
            lambda,
            warmup_iters,
            ..Self::erm()
        }
    }

    pub fn with_subset(mut self, subset: Subset) -> Self {
        self.subset = subset;
        self
    }

    pub fn centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(FishrError::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FishrError::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.use_full_cov && self.kind != PenaltyKind::Fishr {
            return Err(FishrError::Config("use_full_cov only applies to Fishr".into()));
        }
        Ok(())
    }

    /// Effective penalty weight at `step`: 1 during warmup, `lambda` afterwards.
    /// A zero `lambda` disables the penalty at every step.
    pub fn lambda_at(&self, step: u64) -> f64 {
        if self.kind == PenaltyKind::None || self.lambda == 0.0 {
            0.0
        } else if step < self.warmup_iters {
            1.0
        } else {
            self.lambda
        }
    }
}

fn need_two(count: usize, what: &str) -> Result<()> {
    if count < 2 {
        return Err(FishrError::Config(format!("{what} needs at least 2 domains, got {count}")));
    }
    Ok(())
}

fn check_equal_lengths(vs: &[Vec<f64>]) -> Result<usize> {
    let p = vs[0].len();
    if vs.iter().any(|v| v.len() != p) {
        return Err(FishrError::Dimension("per-domain vectors differ in length".into()));
    }
    Ok(p)
}

fn cross_domain_mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let p = vs[0].len();
    let k = vs.len() as f64;
    (0..p).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / k).collect()
}

/// `(1/|E|) Σ_e ‖x_e − x̄‖²` and its adjoints `(2/|E|)(x_e − x̄)`.
/// The mean's own dependence cancels because `Σ_e (x_e − x̄) = 0`.
fn mean_sq_distance(vs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let k = vs.len() as f64;
    let center = cross_domain_mean(vs);
    let mut value = 0.0;
    let adjoints = vs
        .iter()
        .map(|v| {
            v.iter()
                .zip(&center)
                .map(|(x, c)| {
                    value += (x - c) * (x - c);
                    2.0 / k * (x - c)
                })
                .collect()
        })
        .collect();
    (value / k, adjoints)
}

/// Fishr: mean squared Euclidean distance of each domain's gradient variance
/// to the cross-domain mean variance.
pub fn fishr_penalty(variances: &[Vec<f64>]) -> Result<f64> {
    need_two(variances.len(), "fishr penalty")?;
    check_equal_lengths(variances)?;
    Ok(mean_sq_distance(variances).0)
}

/// V-REx generalized to any number of domains as the population variance of risks.
pub fn vrex_penalty(risks: &[f64]) -> Result<f64> {
    need_two(risks.len(), "V-REx penalty")?;
    let m = mean(risks);
    Ok(risks.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / risks.len() as f64)
}

/// IGA: mean squared distance of gradient means to their cross-domain mean.
pub fn iga_penalty(means: &[Vec<f64>]) -> Result<f64> {
    need_two(means.len(), "IGA penalty")?;
    check_equal_lengths(means)?;
    Ok(mean_sq_distance(means).0)
}

/// Negative mean pairwise dot product of gradient means.
pub fn fish_dot_penalty(means: &[Vec<f64>]) -> Result<f64> {
    need_two(means.len(), "Fish-dot penalty")?;
    check_equal_lengths(means)?;
    Ok(fish_dot_with_adjoints(means).0)
}

fn fish_dot_with_adjoints(means: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let k = means.len();
    let pairs = (k * (k - 1) / 2) as f64;
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            total += crate::linalg::dot(&means[a], &means[b]);
        }
    }
    let p = means[0].len();
    let adjoints = (0..k)
        .map(|e| {
            (0..p)
                .map(|j| -(0..k).filter(|&b| b != e).map(|b| means[b][j]).sum::<f64>() / pairs)
                .collect()
        })
        .collect();
    (-total / pairs, adjoints)
}

/// `∂/∂w R_e(w·z)` at `w = 1`: `(1/n) Σ_i (σ(z_i) − y_i) z_i`.
pub fn irmv1_inner(logits: &[f64], targets: &[f64]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - y) * z)
        .sum::<f64>()
        / logits.len() as f64
}

/// IRMv1 surrogate averaged over domains.
pub fn irmv1_penalty(params: &ParamSet, batches: &[DomainBatch]) -> Result<f64> {
    let mut acc = 0.0;
    for b in batches {
        let cache = forward_cached(params, b.inputs.as_ref())?;
        let d = irmv1_inner(&cache.logits, &b.targets);
        acc += d * d;
    }
    Ok(acc / batches.len() as f64)
}

/// Per-domain EMA state carried across training steps.
#[derive(Clone, Debug, Default)]
pub struct PenaltyState {
    pub ema: Vec<EmaState>,
}

/// Value and gradient of the training objective at one step.
#[derive(Clone, Debug)]
pub struct Objective {
    /// `(ERM + λ_t·penalty) / scale`
    pub value: f64,
    pub erm: f64,
    pub penalty: f64,
    pub lambda_t: f64,
    /// divisor applied to the whole objective (λ_t when λ_t > 1, else 1)
    pub scale: f64,
    pub risks: Vec<f64>,
    /// per-domain statistics over the penalty subset (gradient-based penalties only)
    pub stats: Vec<GradStats>,
    pub accuracies: Vec<f64>,
    /// classifier-layer variance and Hessian diagonal per domain, when requested
    pub diagnostics: Vec<ClassifierDiagnostics>,
    pub grad: Vec<f64>,
}

/// Objective without EMA history (equivalently, the first EMA step).
pub fn total_loss(params: &ParamSet, batches: &[DomainBatch], spec: &PenaltySpec, step: u64) -> Result<Objective> {
    total_loss_with_state(params, batches, spec, step, &mut PenaltyState::default())
}

/// `(1/|E|) Σ_e R_e + λ_t·penalty`, divided by `λ_t` once `λ_t > 1`, with its
/// full gradient. For Fishr, IGA and Fish-dot the gradient includes the
/// second-order term through the per-sample gradients.
pub fn total_loss_with_state(
    params: &ParamSet,
    batches: &[DomainBatch],
    spec: &PenaltySpec,
    step: u64,
    state: &mut PenaltyState,
) -> Result<Objective> {
    objective(params, batches, spec, step, state, false)
}

/// [`total_loss_with_state`], optionally also reading classifier diagnostics
/// off the same forward passes.
pub fn objective(
    params: &ParamSet,
    batches: &[DomainBatch],
    spec: &PenaltySpec,
    step: u64,
    state: &mut PenaltyState,
    diagnostics: bool,
) -> Result<Objective> {
    spec.validate()?;
    if batches.is_empty() {
        return Err(FishrError::Config("no training domains".into()));
    }
    if spec.kind != PenaltyKind::None {
        need_two(batches.len(), spec.kind.name())?;
    }
    for b in batches {
        b.validate()?;
    }
    let k = batches.len() as f64;
    let lambda_t = spec.lambda_at(step);
    let scale = if lambda_t > 1.0 { lambda_t } else { 1.0 };

    let subset = spec.subset;
    let lowest = subset.layer_range(params.depth()).start;
    let second_order = spec.kind.uses_grad_stats();

    // forward (and backward when the penalty reads per-sample gradients)
    let mut passes = Vec::with_capacity(batches.len());
    let mut risks = Vec::with_capacity(batches.len());
    for b in batches {
        let cache = forward_cached(params, b.inputs.as_ref())?;
        let losses = nll_loss(&cache.logits, &b.targets)?;
        risks.push(mean(&losses));
        let res = residuals(&cache.logits, &b.targets);
        let deltas = if second_order {
            let mut d = backprop_deltas(params, &cache, &res);
            for m in d.iter_mut().take(lowest) {
                *m = Mat::zeros(0, 0);
            }
            d
        } else {
            Vec::new()
        };
        passes.push(DomainPass {
            cache,
            residuals: res,
            deltas,
        });
    }
    let erm = risks.iter().sum::<f64>() / k;

    let mut outputs: Vec<Vec<f64>> = passes
        .iter()
        .map(|p| {
            let n = p.n() as f64;
            p.residuals.iter().map(|e| e / (k * n * scale)).collect()
        })
        .collect();
    let mut grad_adjoints: Vec<Option<GradAdjoint>> = vec![None; batches.len()];
    let mut stats = Vec::new();
    let coef = lambda_t / scale;

    let penalty = match spec.kind {
        PenaltyKind::None => 0.0,
        PenaltyKind::Vrex => {
            let r_bar = erm;
            for (e, p) in passes.iter().enumerate() {
                let d = 2.0 / k * (risks[e] - r_bar);
                let n = p.n() as f64;
                for (o, r) in outputs[e].iter_mut().zip(&p.residuals) {
                    *o += coef * d * r / n;
                }
            }
            vrex_penalty(&risks)?
        }
        PenaltyKind::Irmv1 => {
            let mut value = 0.0;
            for (e, (p, b)) in passes.iter().zip(batches).enumerate() {
                let d = irmv1_inner(&p.cache.logits, &b.targets);
                value += d * d;
                let n = p.n() as f64;
                for (i, o) in outputs[e].iter_mut().enumerate() {
                    let z = p.cache.logits[i];
                    let s = sigmoid(z);
                    *o += coef * (2.0 / k) * d * (s * (1.0 - s) * z + p.residuals[i]) / n;
                }
            }
            value / k
        }
        PenaltyKind::Iga | PenaltyKind::FishDot => {
            for (p, b) in passes.iter().zip(batches) {
                let m = gradient_moments(params, b.inputs.as_ref(), p, subset);
                stats.push(GradStats::from_moments(&m)?);
            }
            let means: Vec<Vec<f64>> = stats.iter().map(|s| s.mean.clone()).collect();
            let (value, adj) = if spec.kind == PenaltyKind::Iga {
                mean_sq_distance(&means)
            } else {
                fish_dot_with_adjoints(&means)
            };
            for (e, p) in passes.iter().enumerate() {
                let n = p.n() as f64;
                let v: Vec<f64> = adj[e].iter().map(|a| coef * a / n).collect();
                grad_adjoints[e] = Some(GradAdjoint::Diagonal {
                    alpha: 0.0,
                    u: vec![0.0; v.len()],
                    v,
                });
            }
            value
        }
        PenaltyKind::Fishr if spec.use_full_cov => {
            let mut grads = Vec::with_capacity(batches.len());
            let mut matched = Vec::with_capacity(batches.len());
            for (e, b) in batches.iter().enumerate() {
                let g = per_sample_grads(params, b, subset)?;
                let m = if spec.centered {
                    covariance_full(&g)?
                } else {
                    let n = g.n() as f64;
                    let mut f = crate::linalg::mm(g.matrix.transpose(), g.matrix.as_ref());
                    for j in 0..f.ncols() {
                        f.col_as_slice_mut(j).iter_mut().for_each(|x| *x /= n);
                    }
                    f
                };
                let flat: Vec<f64> = (0..m.ncols()).flat_map(|j| m.col_as_slice(j).to_vec()).collect();
                matched.push(ema_matched(state, e, batches.len(), &flat, spec.gamma)?);
                stats.push(GradStats {
                    mean: grad_mean(&g)?,
                    var_centered: crate::stats::variance_centered(&g)?,
                    var_uncentered: variance_uncentered(&g)?,
                    cov: Some(m),
                    n: g.n(),
                });
                grads.push(g);
            }
            let (value, adj) = mean_sq_distance(&matched);
            for (e, g) in grads.iter().enumerate() {
                let (n, p) = (g.n(), g.p());
                let u = Mat::from_fn(p, p, |i, j| coef * adj[e][j * p + i]);
                let mean = &stats[e].mean;
                // ∂⟨U, C⟩/∂g_i = (U + Uᵀ)(g_i − ḡ)/(n−1); uncentered: (U + Uᵀ) g_i / n
                let (shift, denom) = if spec.centered {
                    (mean.clone(), (n - 1) as f64)
                } else {
                    (vec![0.0; p], n as f64)
                };
                let centered = Mat::from_fn(n, p, |i, j| g.matrix[(i, j)] - shift[j]);
                let sym = Mat::from_fn(p, p, |i, j| u[(i, j)] + u[(j, i)]);
                let mut dense = crate::linalg::mm(centered.as_ref(), sym.transpose());
                for j in 0..p {
                    dense.col_as_slice_mut(j).iter_mut().for_each(|x| *x /= denom);
                }
                grad_adjoints[e] = Some(GradAdjoint::Dense(dense));
            }
            value
        }
        PenaltyKind::Fishr => {
            let mut matched = Vec::with_capacity(batches.len());
            for (e, (p, b)) in passes.iter().zip(batches).enumerate() {
                let m = gradient_moments(params, b.inputs.as_ref(), p, subset);
                let s = GradStats::from_moments(&m)?;
                matched.push(ema_matched(state, e, batches.len(), s.variance(spec.centered), spec.gamma)?);
                stats.push(s);
            }
            let (value, adj) = mean_sq_distance(&matched);
            for (e, p) in passes.iter().enumerate() {
                let n = p.n() as f64;
                let u: Vec<f64> = adj[e].iter().map(|a| coef * a).collect();
                grad_adjoints[e] = Some(if spec.centered {
                    let alpha = 2.0 / (n - 1.0);
                    let v = u.iter().zip(&stats[e].mean).map(|(a, g)| -alpha * a * g).collect();
                    GradAdjoint::Diagonal { alpha, u, v }
                } else {
                    let v = vec![0.0; u.len()];
                    GradAdjoint::Diagonal { alpha: 2.0 / n, u, v }
                });
            }
            value
        }
    };

    let accuracies = passes
        .iter()
        .zip(batches)
        .map(|(p, b)| accuracy(&p.cache.logits, &b.targets))
        .collect();
    let diagnostics = if diagnostics {
        passes
            .iter()
            .zip(batches)
            .map(|(p, b)| classifier_diagnostics(params, b.inputs.as_ref(), &p.cache, &b.targets))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grad = vec![0.0; params.num_params()];
    for (e, (p, b)) in passes.iter().zip(batches).enumerate() {
        let adjoint = DomainAdjoint {
            output: std::mem::take(&mut outputs[e]),
            grads: grad_adjoints[e].take().map(|ga| (subset, ga)),
        };
        let needs_pass = adjoint.grads.is_some();
        accumulate_objective_gradient(
            params,
            b.inputs.as_ref(),
            &p.cache,
            needs_pass.then_some(p),
            &adjoint,
            &mut grad,
        )?;
    }

    let value = if lambda_t == 0.0 {
        erm
    } else {
        (erm + lambda_t * penalty) / scale
    };
    Ok(Objective {
        value,
        erm,
        penalty,
        lambda_t,
        scale,
        risks,
        stats,
        accuracies,
        diagnostics,
        grad,
    })
}

/// Matched value for domain `e`: fresh statistic plus the detached EMA carry.
fn ema_matched(state: &mut PenaltyState, e: usize, domains: usize, fresh: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if state.ema.len() != domains || state.ema.iter().any(|s| s.smoothed.len() != fresh.len() || s.gamma != gamma) {
        state.ema = (0..domains)
            .map(|_| EmaState::new(fresh.len(), gamma))
            .collect::<Result<_>>()?;
    }
    let carry = state.ema[e].carry();
    state.ema[e].update(fresh)?;
    Ok(carry.iter().zip(fresh).map(|(c, f)| c + f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fishr_examples() {
        assert_eq!(fishr_penalty(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(fishr_penalty(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.5);
        assert!(matches!(fishr_penalty(&[vec![1.0]]), Err(FishrError::Config(_))));
        assert!(fishr_penalty(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn fishr_three_domains_literal() {
        let vs = vec![vec![0.3, 1.2, -0.5], vec![2.0, 0.1, 0.0], vec![-1.0, 0.4, 0.9]];
        let mut center = [0.0f64; 3];
        for v in &vs {
            for j in 0..3 {
                center[j] += v[j] / 3.0;
            }
        }
        let mut lit = 0.0;
        for v in &vs {
            let d: f64 = (0..3).map(|j| (v[j] - center[j]).powi(2)).sum();
            lit += d / 3.0;
        }
        assert!((fishr_penalty(&vs).unwrap() - lit).abs() < 1e-14);
    }

    #[test]
    fn vrex_examples() {
        assert_eq!(vrex_penalty(&[0.4, 0.4]).unwrap(), 0.0);
        assert_eq!(vrex_penalty(&[0.0, 2.0]).unwrap(), 1.0);
        let r = [0.2, 0.9, 0.4];
        let m = (0.2 + 0.9 + 0.4) / 3.0;
        let direct = ((0.2f64 - m).powi(2) + (0.9f64 - m).powi(2) + (0.4f64 - m).powi(2)) / 3.0;
        assert!((vrex_penalty(&r).unwrap() - direct).abs() < 1e-15);
        assert!(vrex_penalty(&[1.0]).is_err());
    }

    #[test]
    fn iga_examples() {
        assert_eq!(iga_penalty(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(iga_penalty(&[vec![2.0], vec![0.0]]).unwrap(), 1.0);
        let a = vec![0.3, -1.2, 2.0];
        let b = vec![1.1, 0.4, -0.7];
        let quarter_sq: f64 = 0.25 * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        assert!((iga_penalty(&[a, b]).unwrap() - quarter_sq).abs() < 1e-14);
    }

    #[test]
    fn fish_dot_examples() {
        assert_eq!(fish_dot_penalty(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(fish_dot_penalty(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), -2.0);
        assert!(fish_dot_penalty(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap() > 0.0);
        assert!(fish_dot_penalty(&[vec![1.0]]).is_err());
    }

    #[test]
    fn irm_inner_single_sample() {
        let z = 0.8;
        let y = 1.0;
        let expected = (sigmoid(z) - y) * z;
        assert!((irmv1_inner(&[z], &[y]) - expected).abs() < 1e-15);
        // finite differences on the logit scale w
        let risk = |w: f64| crate::nn::bce_with_logit(w * z, y);
        let h = 1e-5;
        let fd = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
        assert!((fd - expected).abs() < 1e-6);
    }

    #[test]
    fn lambda_schedule() {
        let spec = PenaltySpec::new(PenaltyKind::Fishr, 91257.18613115903, 190);
        assert_eq!(spec.lambda_at(0), 1.0);
        assert_eq!(spec.lambda_at(189), 1.0);
        assert_eq!(spec.lambda_at(190), 91257.18613115903);
        let off = PenaltySpec::new(PenaltyKind::Fishr, 0.0, 190);
        assert_eq!(off.lambda_at(5), 0.0);
        assert_eq!(PenaltySpec::erm().lambda_at(1000), 0.0);
    }

    #[test]
    fn spec_validation() {
        let mut s = PenaltySpec::new(PenaltyKind::Fishr, -1.0, 0);
        assert!(s.validate().is_err());
        s.lambda = 1.0;
        s.gamma = 1.0;
        assert!(s.validate().is_err());
        s.gamma = 0.5;
        assert!(s.validate().is_ok());
    }

    fn toy_domains(seed: u64) -> Vec<DomainBatch> {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(seed, "penalty-toy");
        (0..3)
            .map(|e| {
                let n = 6 + e;
                let inputs = Mat::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
                let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
                DomainBatch::new(format!("d{e}"), inputs, targets).unwrap()
            })
            .collect()
    }

    fn check_gradient(spec: &PenaltySpec, step: u64) {
        use crate::nn::{init_mlp, MlpShape};
        use rand::Rng;
        // jitter so no pre-activation sits exactly on a ReLU kink
        let init = init_mlp(MlpShape { d_in: 3, hidden: 5, depth: 3 }, 21).unwrap();
        let mut rng = crate::rng::rng_for(22, "jitter");
        let flat: Vec<f64> = init.to_flat().iter().map(|t| t + rng.gen_range(-0.3..0.3)).collect();
        let params = ParamSet::from_flat(init.shape(), &flat).unwrap();
        let batches = toy_domains(4);
        let obj = total_loss(&params, &batches, spec, step).unwrap();
        let theta = params.to_flat();
        let h = 1e-5;
        for j in 0..theta.len() {
            let eval = |d: f64| {
                let mut t = theta.clone();
                t[j] += d;
                let q = ParamSet::from_flat(params.shape(), &t).unwrap();
                total_loss(&q, &batches, spec, step).unwrap().value
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = obj.grad[j];
            assert!(
                (fd - an).abs() <= 1e-4 * (fd.abs().max(an.abs())) + 1e-7,
                "{:?} coord {j}: analytic {an} vs fd {fd}",
                spec.kind
            );
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        for kind in [
            PenaltyKind::None,
            PenaltyKind::Fishr,
            PenaltyKind::Vrex,
            PenaltyKind::Iga,
            PenaltyKind::FishDot,
            PenaltyKind::Irmv1,
        ] {
            for subset in [Subset::All, Subset::Classifier, Subset::Features] {
                // warmup phase (λ_t = 1) and rescaled phase (λ_t = 30)
                let spec = PenaltySpec::new(kind, 30.0, 2).with_subset(subset);
                check_gradient(&spec, 0);
                check_gradient(&spec, 5);
            }
        }
    }

    #[test]
    fn fishr_variants_match_finite_differences() {
        let base = PenaltySpec::new(PenaltyKind::Fishr, 7.0, 0);
        check_gradient(&base.clone().centered(false), 0);
        for subset in [Subset::Classifier, Subset::All] {
            let mut full = base.clone().with_subset(subset);
            full.use_full_cov = true;
            check_gradient(&full, 0);
            check_gradient(&full.clone().centered(false), 0);
        }
    }

    #[test]
    fn full_covariance_diagonal_equals_diagonal_route_value() {
        use crate::nn::{init_mlp, MlpShape};
        let params = init_mlp(MlpShape { d_in: 3, hidden: 5, depth: 3 }, 2).unwrap();
        let batches = toy_domains(9);
        let diag = total_loss(&params, &batches, &PenaltySpec::new(PenaltyKind::Fishr, 1.0, 0), 0).unwrap();
        let vs: Vec<Vec<f64>> = diag.stats.iter().map(|s| s.var_centered.clone()).collect();
        assert!((fishr_penalty(&vs).unwrap() - diag.penalty).abs() < 1e-15);
        assert!((diag.value - (diag.erm + diag.penalty)).abs() < 1e-15);
    }

    #[test]
    fn ema_matches_first_step_then_smooths() {
        use crate::nn::{init_mlp, MlpShape};
        let params = init_mlp(MlpShape { d_in: 3, hidden: 5, depth: 2 }, 5).unwrap();
        let batches = toy_domains(3);
        let mut spec = PenaltySpec::new(PenaltyKind::Fishr, 1.0, 0);
        spec.gamma = 0.9;
        let mut state = PenaltyState::default();
        let first = total_loss_with_state(&params, &batches, &spec, 0, &mut state).unwrap();
        let plain = total_loss(&params, &batches, &spec, 0).unwrap();
        assert!((first.penalty - plain.penalty).abs() < 1e-15);
        // same parameters again: v̄ = (1−γ)v·(1+γ), matched = v̄/(1−γ) = (1+γ)v
        let second = total_loss_with_state(&params, &batches, &spec, 1, &mut state).unwrap();
        assert!((second.penalty - 1.9f64.powi(2) * plain.penalty).abs() < 1e-12 * plain.penalty.max(1e-300));
    }

    #[test]
    fn zero_lambda_is_plain_erm() {
        use crate::nn::{init_mlp, MlpShape};
        let params = init_mlp(MlpShape { d_in: 3, hidden: 5, depth: 3 }, 8).unwrap();
        let batches = toy_domains(1);
        let erm = total_loss(&params, &batches, &PenaltySpec::erm(), 0).unwrap();
        let off = total_loss(&params, &batches, &PenaltySpec::new(PenaltyKind::Fishr, 0.0, 0), 10).unwrap();
        assert_eq!(erm.value, off.value);
        assert_eq!(erm.grad, off.grad);
    }
}
