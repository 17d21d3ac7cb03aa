//! Hessian diagonals, empirical-Fisher diagonals and invariance reports.
//!
//! Three routes to `Diag(H)` of the batch-mean loss:
//! - [`hessian_diag_fd`]: central second differences of an arbitrary closure;
//! - [`mlp_hessian_diag_fd`]: the same differences for an MLP, but perturbing one
//!   weight only re-propagates the samples it can reach, so every weight of a
//!   Colored MNIST network is affordable;
//! - [`hessian_diag_exact`]: closed form. A ReLU network is piecewise linear in
//!   any single weight, so `∂²ℓ/∂θ_j² = σ'(z)(∂z/∂θ_j)²` almost everywhere.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{FishrError, Result};
use crate::linalg::{add_row_major, col_sums, cosine, mm, squared};
use crate::nn::{
    backprop_deltas, bce_with_logit, forward_cached, gradient_moments, mean, nll_loss, sigmoid,
    DomainBatch, DomainPass, ForwardCache, ParamSet, PerSampleGrads, Subset,
};
use crate::stats::{variance_uncentered, GradStats};

/// Step used for coordinate `θ_i`.
pub fn fd_step(theta_i: f64) -> f64 {
    1e-3 * (1.0 + theta_i.abs())
}

/// `(L(θ + h e_i) − 2L(θ) + L(θ − h e_i)) / h²` for each `i` in `coords`.
pub fn hessian_diag_fd<F>(theta: &[f64], coords: std::ops::Range<usize>, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FishrError::Numeric(format!("loss evaluated to {v}")))
        }
    };
    let base = finite(loss(theta)?)?;
    let mut work = theta.to_vec();
    coords
        .map(|i| {
            let h = fd_step(theta[i]);
            work[i] = theta[i] + h;
            let up = finite(loss(&work)?)?;
            work[i] = theta[i] - h;
            let down = finite(loss(&work)?)?;
            work[i] = theta[i];
            Ok((up - 2.0 * base + down) / (h * h))
        })
        .collect()
}

/// Empirical-Fisher diagonal `(1/n) GᵀG`.
pub fn fim_diag(g: &PerSampleGrads) -> Result<Vec<f64>> {
    variance_uncentered(g)
}

/// `Diag(H)` of the batch-mean loss over `subset`, from `σ'(z_i)` and the
/// per-sample output Jacobian.
pub fn hessian_diag_exact(params: &ParamSet, batch: &DomainBatch, subset: Subset) -> Result<Vec<f64>> {
    batch.validate()?;
    let cache = forward_cached(params, batch.inputs.as_ref())?;
    let curvature: Vec<f64> = cache.logits.iter().map(|&z| sigmoid(z) * (1.0 - sigmoid(z))).collect();
    let ones = vec![1.0; batch.len()];
    let jac = backprop_deltas(params, &cache, &ones);
    let n = batch.len();
    let range = params.subset_range(subset);
    let offsets = params.layer_offsets();
    let mut out = vec![0.0; range.len()];
    for l in subset.layer_range(params.depth()) {
        let layer = &params.layers()[l];
        let fan_in = layer.fan_in();
        let x = cache.layer_input(batch.inputs.as_ref(), l);
        let base = offsets[l] - range.start;
        let w_end = base + layer.fan_out() * fan_in;
        let weighted = Mat::from_fn(n, layer.fan_out(), |i, o| curvature[i] * jac[l][(i, o)] * jac[l][(i, o)]);
        let w = mm(weighted.transpose(), squared(x).as_ref());
        add_row_major(&mut out[base..w_end], &w);
        for (o, s) in col_sums(&weighted).into_iter().enumerate() {
            out[w_end + o] = s;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(out)
}

/// Finite-difference `Diag(H)` of the batch-mean loss over `subset`, one
/// coordinate at a time with `h_i = 1e-3(1 + |θ_i|)`.
///
/// Only samples whose layer input is nonzero at the perturbed weight are
/// re-propagated, and only through the layers above it; loss changes are
/// accumulated per sample so the large constant `L(θ)` never enters the
/// second difference.
pub fn mlp_hessian_diag_fd(params: &ParamSet, batch: &DomainBatch, subset: Subset) -> Result<Vec<f64>> {
    let coords: Vec<usize> = params.subset_range(subset).collect();
    mlp_hessian_diag_fd_at(params, batch, &coords)
}

/// [`mlp_hessian_diag_fd`] restricted to the given flat parameter indices,
/// returned in the same order. Used to estimate full-network similarities
/// from a coordinate sample when the full diagonal is too expensive.
pub fn mlp_hessian_diag_fd_at(params: &ParamSet, batch: &DomainBatch, coords: &[usize]) -> Result<Vec<f64>> {
    batch.validate()?;
    let p = params.num_params();
    if let Some(&bad) = coords.iter().find(|&&c| c >= p) {
        return Err(FishrError::Input(format!("coordinate {bad} out of range for {p} parameters")));
    }
    let cache = forward_cached(params, batch.inputs.as_ref())?;
    let pre = preactivations(params, batch.inputs.as_ref(), &cache);
    let n = batch.len();
    let offsets = params.layer_offsets();
    let base_loss = nll_loss(&cache.logits, &batch.targets)?;
    let mut prop = Propagator::new(params, &pre, &cache);
    let all: Vec<usize> = (0..n).collect();
    // per-layer lists of samples with a nonzero entry in each input column
    let mut support: Vec<Option<Vec<Vec<usize>>>> = vec![None; params.depth()];

    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let l = offsets.iter().rposition(|&off| off <= c).unwrap_or(0);
        let layer = &params.layers()[l];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let x = cache.layer_input(batch.inputs.as_ref(), l);
        let sup = support[l].get_or_insert_with(|| {
            (0..fan_in).map(|k| (0..n).filter(|&i| x[(i, k)] != 0.0).collect()).collect()
        });
        let idx = c - offsets[l];
        let (o, k) = if idx < fan_out * fan_in {
            (idx / fan_in, idx % fan_in)
        } else {
            (idx - fan_out * fan_in, fan_in)
        };
        let (theta, rows) = if k < fan_in {
            (layer.weight[(o, k)], &sup[k])
        } else {
            (layer.bias[o], &all)
        };
        let h = fd_step(theta);
        let mut acc = 0.0;
        for &i in rows.iter() {
            let xi = if k < fan_in { x[(i, k)] } else { 1.0 };
            let z = cache.logits[i];
            let y = batch.targets[i];
            let zp = prop.logit_after(l, o, i, h * xi);
            let zm = prop.logit_after(l, o, i, -h * xi);
            if zp != z || zm != z {
                acc += (bce_with_logit(zp, y) - base_loss[i]) + (bce_with_logit(zm, y) - base_loss[i]);
            }
        }
        let v = acc / (n as f64 * h * h);
        if !v.is_finite() {
            return Err(FishrError::Numeric(format!("non-finite curvature at coordinate {c}")));
        }
        out.push(v);
    }
    Ok(out)
}

fn preactivations(params: &ParamSet, inputs: MatRef<'_, f64>, cache: &ForwardCache) -> Vec<Mat<f64>> {
    params
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut a = mm(cache.layer_input(inputs, l), layer.weight.transpose());
            for (o, &b) in layer.bias.iter().enumerate() {
                a.col_as_slice_mut(o).iter_mut().for_each(|v| *v += b);
            }
            a
        })
        .collect()
}

/// Pushes a change of one pre-activation of one sample up to the logit.
struct Propagator<'a> {
    params: &'a ParamSet,
    pre: &'a [Mat<f64>],
    cache: &'a ForwardCache,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

impl<'a> Propagator<'a> {
    fn new(params: &'a ParamSet, pre: &'a [Mat<f64>], cache: &'a ForwardCache) -> Self {
        let width = params.layers().iter().map(|l| l.fan_out()).max().unwrap_or(1);
        Self {
            params,
            pre,
            cache,
            buf_a: vec![0.0; width],
            buf_b: vec![0.0; width],
        }
    }

    fn logit_after(&mut self, l: usize, o: usize, i: usize, delta: f64) -> f64 {
        let depth = self.params.depth();
        let z = self.cache.logits[i];
        if l + 1 == depth {
            return z + delta;
        }
        let h_old = self.cache.hidden[l][(i, o)];
        let dh = (self.pre[l][(i, o)] + delta).max(0.0) - h_old;
        if dh == 0.0 {
            return z;
        }
        // layer l+1 pre-activation change from a single unit
        let next = &self.params.layers()[l + 1];
        let mut width = next.fan_out();
        for (r, d) in self.buf_a.iter_mut().take(width).enumerate() {
            *d = next.weight[(r, o)] * dh;
        }
        for m in l + 1..depth {
            if m + 1 == depth {
                return z + self.buf_a[0];
            }
            // ReLU then the following affine map, on the change vector
            for r in 0..width {
                let a = self.pre[m][(i, r)];
                self.buf_a[r] = (a + self.buf_a[r]).max(0.0) - self.cache.hidden[m][(i, r)];
            }
            let up = &self.params.layers()[m + 1];
            let out_w = up.fan_out();
            for q in 0..out_w {
                let mut s = 0.0;
                for r in 0..width {
                    let d = self.buf_a[r];
                    if d != 0.0 {
                        s += up.weight[(q, r)] * d;
                    }
                }
                self.buf_b[q] = s;
            }
            std::mem::swap(&mut self.buf_a, &mut self.buf_b);
            width = out_w;
        }
        unreachable!("loop returns at the output layer")
    }
}

/// Classifier-layer quantities read straight off a forward pass: the
/// centered per-sample gradient variance and the exact Hessian diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierDiagnostics {
    pub var: Vec<f64>,
    pub hess: Vec<f64>,
}

pub fn classifier_diagnostics(
    params: &ParamSet,
    inputs: MatRef<'_, f64>,
    cache: &ForwardCache,
    targets: &[f64],
) -> Result<ClassifierDiagnostics> {
    let n = targets.len();
    if n < 2 {
        return Err(FishrError::DegenerateSample("classifier variance needs n ≥ 2".into()));
    }
    let h = cache.layer_input(inputs, params.depth() - 1);
    let d = h.ncols();
    let mut sum = vec![0.0; d + 1];
    let mut sum_sq = vec![0.0; d + 1];
    let mut hess = vec![0.0; d + 1];
    for i in 0..n {
        let s = sigmoid(cache.logits[i]);
        let e = s - targets[i];
        let c = s * (1.0 - s);
        for k in 0..d {
            let x = h[(i, k)];
            if x != 0.0 {
                sum[k] += e * x;
                sum_sq[k] += e * e * x * x;
                hess[k] += c * x * x;
            }
        }
        sum[d] += e;
        sum_sq[d] += e * e;
        hess[d] += c;
    }
    let nf = n as f64;
    let var = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| ((q - s * s / nf) / (nf - 1.0)).max(0.0))
        .collect();
    hess.iter_mut().for_each(|v| *v /= nf);
    Ok(ClassifierDiagnostics { var, hess })
}

/// How `Diag(H)` is obtained for a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianMethod {
    Exact,
    FiniteDiff,
}

impl HessianMethod {
    pub fn name(self) -> &'static str {
        match self {
            HessianMethod::Exact => "exact",
            HessianMethod::FiniteDiff => "finitediff",
        }
    }
}

/// Agreement between the empirical FIM diagonal and the finite-difference
/// Hessian diagonal on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxySimilarity {
    pub domain_id: String,
    /// over every classifier weight
    pub cosine_classifier: f64,
    /// over a uniform sample of all weights
    pub cosine_all: f64,
    pub sampled_coords: usize,
    /// FIM against the analytic (almost-everywhere) Hessian diagonal, every weight
    pub cosine_all_exact: f64,
    /// FD against analytic diagonal on the sampled coordinates; low values
    /// mean the FD steps cross ReLU kinks
    pub cosine_fd_exact: f64,
}

/// Cosines between `fim_diag` and the FD Hessian diagonal: exact on the
/// classifier layer, estimated from `n_coords` uniformly drawn coordinates
/// for the whole network (all of them when `n_coords >= p`).
pub fn fim_hessian_similarity(
    params: &ParamSet,
    batch: &DomainBatch,
    n_coords: usize,
    seed: u64,
) -> Result<ProxySimilarity> {
    let pass = DomainPass::run(params, batch)?;
    let fim = |subset| -> Result<Vec<f64>> {
        let m = gradient_moments(params, batch.inputs.as_ref(), &pass, subset);
        Ok(GradStats::from_moments(&m)?.var_uncentered)
    };
    let cls = cosine(&fim(Subset::Classifier)?, &mlp_hessian_diag_fd(params, batch, Subset::Classifier)?);

    let p = params.num_params();
    let mut coords: Vec<usize> = if n_coords >= p {
        (0..p).collect()
    } else {
        let mut rng = crate::rng::rng_for(seed, "fd-coords");
        rand::seq::index::sample(&mut rng, p, n_coords).into_vec()
    };
    coords.sort_unstable();
    let fim_all = fim(Subset::All)?;
    let fim_s: Vec<f64> = coords.iter().map(|&c| fim_all[c]).collect();
    let hess_s = mlp_hessian_diag_fd_at(params, batch, &coords)?;
    let exact = hessian_diag_exact(params, batch, Subset::All)?;
    let exact_s: Vec<f64> = coords.iter().map(|&c| exact[c]).collect();
    Ok(ProxySimilarity {
        domain_id: batch.domain_id.clone(),
        cosine_classifier: cls,
        cosine_all: cosine(&fim_s, &hess_s),
        sampled_coords: coords.len(),
        cosine_all_exact: cosine(&fim_all, &exact),
        cosine_fd_exact: cosine(&hess_s, &exact_s),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: String,
    pub risk: f64,
    pub accuracy: f64,
    pub cosine_var_hess: f64,
    pub cosine_fim_hess: f64,
    pub var_norm: f64,
    pub hess_norm: f64,
}

/// Cross-domain gaps at fixed parameters; with more than two domains each gap
/// is the mean over unordered pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub subset: Subset,
    pub method: HessianMethod,
    /// `‖Var(G_A) − Var(G_B)‖²`
    pub var_gap: f64,
    /// `|R_A − R_B|²`
    pub risk_gap: f64,
    /// `‖Diag(H_A) − Diag(H_B)‖²`
    pub hess_gap: f64,
    pub domains: Vec<DomainReport>,
}

/// Mean over unordered pairs of `‖a − b‖²`.
pub fn mean_pair_gap(vs: &[Vec<f64>]) -> f64 {
    let k = vs.len();
    if k < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            acc += vs[a].iter().zip(&vs[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    acc / (k * (k - 1) / 2) as f64
}

pub fn invariance_report(
    params: &ParamSet,
    batches: &[DomainBatch],
    subset: Subset,
    method: HessianMethod,
) -> Result<InvarianceReport> {
    if batches.is_empty() {
        return Err(FishrError::Input("no domains".into()));
    }
    let mut vars = Vec::new();
    let mut hessians = Vec::new();
    let mut risks = Vec::new();
    let mut domains = Vec::new();
    for b in batches {
        let pass = DomainPass::run(params, b)?;
        let stats = GradStats::from_moments(&gradient_moments(params, b.inputs.as_ref(), &pass, subset))?;
        let hess = match method {
            HessianMethod::Exact => hessian_diag_exact(params, b, subset)?,
            HessianMethod::FiniteDiff => mlp_hessian_diag_fd(params, b, subset)?,
        };
        let risk = mean(&nll_loss(&pass.cache.logits, &b.targets)?);
        domains.push(DomainReport {
            domain_id: b.domain_id.clone(),
            risk,
            accuracy: crate::nn::accuracy(&pass.cache.logits, &b.targets),
            cosine_var_hess: cosine(&stats.var_centered, &hess),
            cosine_fim_hess: cosine(&stats.var_uncentered, &hess),
            var_norm: crate::linalg::norm_sq(&stats.var_centered).sqrt(),
            hess_norm: crate::linalg::norm_sq(&hess).sqrt(),
        });
        risks.push(vec![risk]);
        vars.push(stats.var_centered);
        hessians.push(hess);
    }
    Ok(InvarianceReport {
        subset,
        method,
        var_gap: mean_pair_gap(&vars),
        risk_gap: mean_pair_gap(&risks),
        hess_gap: mean_pair_gap(&hessians),
        domains,
    })
}

impl InvarianceReport {
    pub fn csv_header() -> &'static str {
        "subset,method,var_gap,risk_gap,hess_gap,domain_id,risk,accuracy,cosine_var_hess,cosine_fim_hess"
    }

    /// One CSV row per domain, gaps repeated.
    pub fn csv_rows(&self) -> Vec<String> {
        self.domains
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    self.subset.name(),
                    self.method.name(),
                    self.var_gap,
                    self.risk_gap,
                    self.hess_gap,
                    d.domain_id,
                    d.risk,
                    d.accuracy,
                    d.cosine_var_hess,
                    d.cosine_fim_hess
                )
            })
            .collect()
    }
}
