//! Per-sample backpropagation and reverse-mode differentiation through it.
//!
//! For a ReLU MLP with one output logit `z`, the gradient of the per-sample
//! loss with respect to layer `l` factorizes as `g_i[W_l] = δ_l,i ⊗ h_{l−1,i}`
//! and `g_i[b_l] = δ_l,i`, where `δ_l` is the loss derivative at the layer's
//! pre-activation and `h_{l−1}` is the layer input. Everything here exploits
//! that factorization: per-domain gradient moments are matrix products of
//! `δ` and `h`, and objectives that depend on the per-sample gradients are
//! differentiated by pushing adjoints back through the backward recursion
//! `δ_{l−1} = (δ_l W_l) ∘ 1{h_{l−1} > 0}` and then through the forward pass.
//! ReLU has zero curvature almost everywhere, so the masks carry no gradient.

use faer::{Mat, MatRef};

use super::forward::{forward_cached, sigmoid, DomainBatch, ForwardCache};
use super::params::{ParamSet, Subset};
use crate::error::{FishrError, Result};
use crate::linalg::{
    add_row_major, col_sq_sums, col_sums, from_row_major, hadamard_in_place, mm, mm_acc,
    relu_mask_in_place, squared,
};

/// Rows are per-sample loss gradients restricted to `subset`, in flat order.
#[derive(Clone, Debug)]
pub struct PerSampleGrads {
    pub matrix: Mat<f64>,
    pub subset: Subset,
}

impl PerSampleGrads {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn p(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.p()).map(|j| self.matrix[(i, j)]).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], subset: Subset) -> Result<Self> {
        let p = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != p) {
            return Err(FishrError::Dimension("ragged gradient rows".into()));
        }
        Ok(Self {
            matrix: Mat::from_fn(rows.len(), p, |i, j| rows[i][j]),
            subset,
        })
    }
}

/// `σ(z_i) − y_i`, the derivative of the per-sample loss at the logit.
pub fn residuals(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| sigmoid(z) - y)
        .collect()
}

/// Backpropagates per-sample output derivatives to every pre-activation.
/// `deltas[l]` is `n × fan_out(l)`.
pub fn backprop_deltas(params: &ParamSet, cache: &ForwardCache, output_grad: &[f64]) -> Vec<Mat<f64>> {
    let depth = params.depth();
    let n = output_grad.len();
    let mut deltas: Vec<Mat<f64>> = Vec::with_capacity(depth);
    deltas.push(Mat::from_fn(n, 1, |i, _| output_grad[i]));
    for l in (1..depth).rev() {
        let upper = deltas.last().expect("nonempty");
        let mut d = mm(upper.as_ref(), params.layers()[l].weight.as_ref());
        relu_mask_in_place(&mut d, &cache.hidden[l - 1]);
        deltas.push(d);
    }
    deltas.reverse();
    deltas
}

/// Forward pass plus per-sample loss deltas for one domain.
pub struct DomainPass {
    pub cache: ForwardCache,
    pub residuals: Vec<f64>,
    pub deltas: Vec<Mat<f64>>,
}

impl DomainPass {
    pub fn run(params: &ParamSet, batch: &DomainBatch) -> Result<Self> {
        batch.validate()?;
        let cache = forward_cached(params, batch.inputs.as_ref())?;
        let residuals = residuals(&cache.logits, &batch.targets);
        let deltas = backprop_deltas(params, &cache, &residuals);
        Ok(Self {
            cache,
            residuals,
            deltas,
        })
    }

    pub fn n(&self) -> usize {
        self.residuals.len()
    }
}

/// Materializes the `n × p_subset` per-sample gradient matrix.
pub fn per_sample_grads(params: &ParamSet, batch: &DomainBatch, subset: Subset) -> Result<PerSampleGrads> {
    let pass = DomainPass::run(params, batch)?;
    let n = pass.n();
    let range = params.subset_range(subset);
    let offsets = params.layer_offsets();
    let mut matrix = Mat::zeros(n, range.len());
    for l in subset.layer_range(params.depth()) {
        let layer = &params.layers()[l];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let x = pass.cache.layer_input(batch.inputs.as_ref(), l);
        let delta = &pass.deltas[l];
        let base = offsets[l] - range.start;
        for o in 0..fan_out {
            let d = delta.col_as_slice(o);
            for k in 0..fan_in {
                let col = base + o * fan_in + k;
                for i in 0..n {
                    matrix[(i, col)] = d[i] * x[(i, k)];
                }
            }
            let col = base + fan_out * fan_in + o;
            for i in 0..n {
                matrix[(i, col)] = d[i];
            }
        }
    }
    Ok(PerSampleGrads { matrix, subset })
}

/// Gradient of the batch-mean loss with respect to every parameter.
pub fn batch_gradient(params: &ParamSet, batch: &DomainBatch) -> Result<Vec<f64>> {
    let cache = forward_cached(params, batch.inputs.as_ref())?;
    let n = batch.len() as f64;
    let output: Vec<f64> = residuals(&cache.logits, &batch.targets)
        .into_iter()
        .map(|e| e / n)
        .collect();
    let mut grad = vec![0.0; params.num_params()];
    let adjoint = DomainAdjoint::first_order(output);
    accumulate_objective_gradient(params, batch.inputs.as_ref(), &cache, None, &adjoint, &mut grad)?;
    Ok(grad)
}

/// First and second raw moments of the per-sample gradients over a subset,
/// computed from the layer factorization without materializing `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMoments {
    /// `(1/n) Σ_i g_i`
    pub mean: Vec<f64>,
    /// `Σ_i g_i²` (elementwise)
    pub sum_sq: Vec<f64>,
    pub n: usize,
}

pub fn gradient_moments(
    params: &ParamSet,
    inputs: MatRef<'_, f64>,
    pass: &DomainPass,
    subset: Subset,
) -> GradientMoments {
    let n = pass.n();
    let range = params.subset_range(subset);
    let offsets = params.layer_offsets();
    let mut mean = vec![0.0; range.len()];
    let mut sum_sq = vec![0.0; range.len()];
    for l in subset.layer_range(params.depth()) {
        let layer = &params.layers()[l];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let x = pass.cache.layer_input(inputs, l);
        let delta = &pass.deltas[l];
        let base = offsets[l] - range.start;
        let w_end = base + fan_out * fan_in;

        let first = mm(delta.transpose(), x);
        add_row_major(&mut mean[base..w_end], &first);
        let second = mm(squared(delta.as_ref()).transpose(), squared(x).as_ref());
        add_row_major(&mut sum_sq[base..w_end], &second);
        let b_mean = col_sums(delta);
        let b_sq = col_sq_sums(delta);
        for o in 0..fan_out {
            mean[w_end + o] = b_mean[o];
            sum_sq[w_end + o] = b_sq[o];
        }
    }
    let inv_n = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv_n);
    GradientMoments { mean, sum_sq, n }
}

/// Adjoint of a scalar objective with respect to one domain's per-sample
/// gradients `g_i` (restricted to a subset).
#[derive(Clone, Debug)]
pub enum GradAdjoint {
    /// `∂J/∂g_i = alpha · u ∘ g_i + v` for every sample `i`. Covers every
    /// statistic built from per-coordinate first and second moments.
    Diagonal { alpha: f64, u: Vec<f64>, v: Vec<f64> },
    /// Explicit `n × p_subset` adjoint rows.
    Dense(Mat<f64>),
}

/// Everything a domain contributes to the objective gradient.
#[derive(Clone, Debug)]
pub struct DomainAdjoint {
    /// `∂J/∂z_i` through the logits directly
    pub output: Vec<f64>,
    /// `∂J/∂g_i` through the per-sample gradients, if the objective uses them
    pub grads: Option<(Subset, GradAdjoint)>,
}

impl DomainAdjoint {
    pub fn first_order(output: Vec<f64>) -> Self {
        Self { output, grads: None }
    }
}

/// Adds `∇_θ J` into `grad` for one domain, where `J` depends on the logits
/// and optionally on the per-sample gradients. `pass` must be supplied when
/// the adjoint has a gradient part.
pub fn accumulate_objective_gradient(
    params: &ParamSet,
    inputs: MatRef<'_, f64>,
    cache: &ForwardCache,
    pass: Option<&DomainPass>,
    adjoint: &DomainAdjoint,
    grad: &mut [f64],
) -> Result<()> {
    let depth = params.depth();
    let n = cache.logits.len();
    if adjoint.output.len() != n {
        return Err(FishrError::Dimension(format!(
            "output adjoint has length {}, batch has {n} samples",
            adjoint.output.len()
        )));
    }
    if grad.len() != params.num_params() {
        return Err(FishrError::Dimension("gradient buffer has the wrong length".into()));
    }
    let offsets = params.layer_offsets();
    let layers = params.layers();

    // Adjoints of the hidden activations h_l collected from the gradient part.
    let mut h_bar: Vec<Option<Mat<f64>>> = vec![None; depth.saturating_sub(1)];
    let mut z_bar: Vec<f64> = adjoint.output.clone();

    if let Some((subset, ga)) = &adjoint.grads {
        let pass = pass.ok_or_else(|| {
            FishrError::Config("per-sample gradient adjoint needs the backward pass".into())
        })?;
        let range = params.subset_range(*subset);
        let expected = range.len();
        match ga {
            GradAdjoint::Diagonal { u, v, .. } if u.len() != expected || v.len() != expected => {
                return Err(FishrError::Dimension("diagonal adjoint length mismatch".into()));
            }
            GradAdjoint::Dense(m) if m.nrows() != n || m.ncols() != expected => {
                return Err(FishrError::Dimension("dense adjoint shape mismatch".into()));
            }
            _ => {}
        }

        // Adjoints of the deltas.
        let mut d_bar: Vec<Option<Mat<f64>>> = vec![None; depth];
        for l in subset.layer_range(depth) {
            let layer = &layers[l];
            let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
            let x = cache.layer_input(inputs, l);
            let delta = &pass.deltas[l];
            let base = offsets[l] - range.start;
            let w_end = base + fan_out * fan_in;
            let (db, hb) = match ga {
                GradAdjoint::Diagonal { alpha, u, v } => diagonal_layer_adjoint(
                    *alpha,
                    &u[base..w_end],
                    &u[w_end..w_end + fan_out],
                    &v[base..w_end],
                    &v[w_end..w_end + fan_out],
                    delta,
                    x,
                    l > 0,
                ),
                GradAdjoint::Dense(a) => dense_layer_adjoint(a, base, fan_out, fan_in, delta, x, l > 0),
            };
            d_bar[l] = Some(db);
            if let Some(hb) = hb {
                add_opt(&mut h_bar[l - 1], hb);
            }
        }

        // Reverse through δ_{l} = (δ_{l+1} W_{l+1}) ∘ mask_l, lowest layer first.
        for l in 0..depth - 1 {
            if let Some(mut m) = d_bar[l].take() {
                relu_mask_in_place(&mut m, &cache.hidden[l]);
                let upper = &pass.deltas[l + 1];
                let w_grad = mm(upper.transpose(), m.as_ref());
                let (fo, fi) = (layers[l + 1].fan_out(), layers[l + 1].fan_in());
                add_row_major(&mut grad[offsets[l + 1]..offsets[l + 1] + fo * fi], &w_grad);
                let up = mm(m.as_ref(), layers[l + 1].weight.transpose());
                add_opt(&mut d_bar[l + 1], up);
            }
        }
        // δ_L = σ(z) − y
        if let Some(top) = d_bar[depth - 1].take() {
            let t = top.col_as_slice(0);
            for i in 0..n {
                let s = sigmoid(cache.logits[i]);
                z_bar[i] += t[i] * s * (1.0 - s);
            }
        }
    }

    // Reverse through the forward pass.
    let mut a_bar = Mat::from_fn(n, 1, |i, _| z_bar[i]);
    for l in (0..depth).rev() {
        let layer = &layers[l];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        let x = cache.layer_input(inputs, l);
        let w_grad = mm(a_bar.transpose(), x);
        add_row_major(&mut grad[offsets[l]..offsets[l] + fan_out * fan_in], &w_grad);
        let b_grad = col_sums(&a_bar);
        for (g, b) in grad[offsets[l] + fan_out * fan_in..offsets[l] + layer.num_params()]
            .iter_mut()
            .zip(b_grad)
        {
            *g += b;
        }
        if l > 0 {
            let mut below = mm(a_bar.as_ref(), layer.weight.as_ref());
            if let Some(hb) = h_bar[l - 1].take() {
                for j in 0..below.ncols() {
                    for (x, y) in below.col_as_slice_mut(j).iter_mut().zip(hb.col_as_slice(j)) {
                        *x += y;
                    }
                }
            }
            relu_mask_in_place(&mut below, &cache.hidden[l - 1]);
            a_bar = below;
        }
    }
    Ok(())
}

fn add_opt(slot: &mut Option<Mat<f64>>, m: Mat<f64>) {
    match slot {
        Some(existing) => {
            for j in 0..m.ncols() {
                for (x, y) in existing.col_as_slice_mut(j).iter_mut().zip(m.col_as_slice(j)) {
                    *x += y;
                }
            }
        }
        None => *slot = Some(m),
    }
}

/// Adjoints of `δ` (and of the layer input, when it is an activation) for
/// `S = Σ_i ⟨alpha·u∘g_i + v, g_i⟩` restricted to one layer, i.e.
/// `S = Σ_i [alpha (δ_i²)ᵀ U (x_i²) + δ_iᵀ V x_i + alpha Σ_o u_b,o δ_io² + v_bᵀ δ_i]`.
/// (The adjoint is treated as constant, so this is the chain-rule contraction.)
#[allow(clippy::too_many_arguments)]
fn diagonal_layer_adjoint(
    alpha: f64,
    u_w: &[f64],
    u_b: &[f64],
    v_w: &[f64],
    v_b: &[f64],
    delta: &Mat<f64>,
    x: MatRef<'_, f64>,
    input_is_activation: bool,
) -> (Mat<f64>, Option<Mat<f64>>) {
    let n = delta.nrows();
    let fan_out = delta.ncols();
    let fan_in = x.ncols();
    let has_u = alpha != 0.0 && (u_w.iter().any(|&a| a != 0.0) || u_b.iter().any(|&a| a != 0.0));
    let has_v = v_w.iter().any(|&a| a != 0.0) || v_b.iter().any(|&a| a != 0.0);

    let mut d_bar = Mat::zeros(n, fan_out);
    let mut h_bar = input_is_activation.then(|| Mat::<f64>::zeros(n, fan_in));
    let x_sq = has_u.then(|| squared(x));
    if has_u {
        let u = from_row_major(fan_out, fan_in, u_w);
        let x_sq = x_sq.as_ref().expect("computed");
        // α δ ∘ (x² Uᵀ + 1 u_bᵀ)
        let mut t = mm(x_sq.as_ref(), u.transpose());
        for (o, &ub) in u_b.iter().enumerate() {
            for val in t.col_as_slice_mut(o) {
                *val += ub;
            }
        }
        hadamard_in_place(&mut t, delta);
        mm_acc_scaled(&mut d_bar, &t, alpha);
        if let Some(hb) = h_bar.as_mut() {
            // α x ∘ (δ² U)
            let mut s = mm(squared(delta.as_ref()).as_ref(), u.as_ref());
            for j in 0..fan_in {
                for (val, &xv) in s.col_as_slice_mut(j).iter_mut().zip(x.col(j).iter()) {
                    *val *= xv;
                }
            }
            mm_acc_scaled(hb, &s, alpha);
        }
    }
    if has_v {
        let v = from_row_major(fan_out, fan_in, v_w);
        mm_acc(&mut d_bar, x, v.transpose(), 1.0);
        for (o, &vb) in v_b.iter().enumerate() {
            if vb != 0.0 {
                for val in d_bar.col_as_slice_mut(o) {
                    *val += vb;
                }
            }
        }
        if let Some(hb) = h_bar.as_mut() {
            mm_acc(hb, delta.as_ref(), v.as_ref(), 1.0);
        }
    }
    (d_bar, h_bar)
}

fn mm_acc_scaled(dst: &mut Mat<f64>, src: &Mat<f64>, scale: f64) {
    for j in 0..dst.ncols() {
        for (d, s) in dst.col_as_slice_mut(j).iter_mut().zip(src.col_as_slice(j)) {
            *d += scale * s;
        }
    }
}

fn dense_layer_adjoint(
    a: &Mat<f64>,
    base: usize,
    fan_out: usize,
    fan_in: usize,
    delta: &Mat<f64>,
    x: MatRef<'_, f64>,
    input_is_activation: bool,
) -> (Mat<f64>, Option<Mat<f64>>) {
    let n = delta.nrows();
    let mut d_bar = Mat::zeros(n, fan_out);
    let mut h_bar = input_is_activation.then(|| Mat::<f64>::zeros(n, fan_in));
    let w_end = base + fan_out * fan_in;
    for i in 0..n {
        for o in 0..fan_out {
            let mut acc = a[(i, w_end + o)];
            for k in 0..fan_in {
                acc += a[(i, base + o * fan_in + k)] * x[(i, k)];
            }
            d_bar[(i, o)] = acc;
            if let Some(hb) = h_bar.as_mut() {
                let d = delta[(i, o)];
                for k in 0..fan_in {
                    hb[(i, k)] += a[(i, base + o * fan_in + k)] * d;
                }
            }
        }
    }
    (d_bar, h_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::forward::{bce_with_logit, forward};
    use crate::nn::params::{init_mlp, MlpShape};
    use crate::rng::rng_for;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> DomainBatch {
        let mut rng = rng_for(seed, "batch");
        let inputs = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let targets = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        DomainBatch::new("t", inputs, targets).unwrap()
    }

    fn sample_loss(params: &ParamSet, batch: &DomainBatch, i: usize) -> f64 {
        let x = Mat::from_fn(1, batch.dim(), |_, j| batch.inputs[(i, j)]);
        let z = forward(params, x.as_ref()).unwrap()[0];
        bce_with_logit(z, batch.targets[i])
    }

    #[test]
    fn logistic_rows_match_closed_form() {
        let params = init_mlp(MlpShape { d_in: 3, hidden: 0, depth: 1 }, 5).unwrap();
        let batch = random_batch(6, 3, 1);
        let g = per_sample_grads(&params, &batch, Subset::All).unwrap();
        let z = forward(&params, batch.inputs.as_ref()).unwrap();
        for i in 0..6 {
            let e = sigmoid(z[i]) - batch.targets[i];
            for k in 0..3 {
                assert!((g.matrix[(i, k)] - e * batch.inputs[(i, k)]).abs() < 1e-15);
            }
            assert!((g.matrix[(i, 3)] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn single_sample_equals_batch_gradient() {
        let params = init_mlp(MlpShape { d_in: 4, hidden: 5, depth: 3 }, 2).unwrap();
        let batch = random_batch(1, 4, 3);
        let g = per_sample_grads(&params, &batch, Subset::All).unwrap();
        let b = batch_gradient(&params, &batch).unwrap();
        assert_eq!(g.n(), 1);
        for (x, y) in g.row(0).iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_match_finite_differences() {
        let params = init_mlp(MlpShape { d_in: 3, hidden: 6, depth: 3 }, 9).unwrap();
        let batch = random_batch(4, 3, 4);
        let g = per_sample_grads(&params, &batch, Subset::All).unwrap();
        let flat = params.to_flat();
        let h = 1e-4;
        for i in 0..batch.len() {
            for j in 0..flat.len() {
                let mut p = params.clone();
                let mut f = flat.clone();
                f[j] += h;
                p.set_flat(&f).unwrap();
                let up = sample_loss(&p, &batch, i);
                f[j] -= 2.0 * h;
                p.set_flat(&f).unwrap();
                let down = sample_loss(&p, &batch, i);
                let fd = (up - down) / (2.0 * h);
                let an = g.matrix[(i, j)];
                assert!(
                    (fd - an).abs() <= 1e-5 * an.abs().max(1e-3),
                    "sample {i} coord {j}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn subsets_concatenate_to_all() {
        let params = init_mlp(MlpShape { d_in: 3, hidden: 4, depth: 3 }, 1).unwrap();
        let batch = random_batch(5, 3, 2);
        let all = per_sample_grads(&params, &batch, Subset::All).unwrap();
        let feat = per_sample_grads(&params, &batch, Subset::Features).unwrap();
        let cls = per_sample_grads(&params, &batch, Subset::Classifier).unwrap();
        assert_eq!(feat.p() + cls.p(), all.p());
        for i in 0..5 {
            let mut row = feat.row(i);
            row.extend(cls.row(i));
            assert_eq!(row, all.row(i));
        }
    }

    #[test]
    fn moments_match_materialized_rows() {
        let params = init_mlp(MlpShape { d_in: 3, hidden: 4, depth: 3 }, 7).unwrap();
        let batch = random_batch(9, 3, 8);
        let pass = DomainPass::run(&params, &batch).unwrap();
        for subset in [Subset::All, Subset::Classifier, Subset::Features] {
            let g = per_sample_grads(&params, &batch, subset).unwrap();
            let m = gradient_moments(&params, batch.inputs.as_ref(), &pass, subset);
            for j in 0..g.p() {
                let col: Vec<f64> = (0..g.n()).map(|i| g.matrix[(i, j)]).collect();
                let mean = col.iter().sum::<f64>() / 9.0;
                let sq: f64 = col.iter().map(|x| x * x).sum();
                assert!((m.mean[j] - mean).abs() < 1e-14);
                assert!((m.sum_sq[j] - sq).abs() < 1e-13);
            }
        }
    }

    /// J(θ) = Σ_i ⟨alpha·u∘g_i + v, g_i⟩ / 2-style objectives are checked by
    /// comparing the diagonal and dense routes, then the dense route against
    /// finite differences of Σ_i c_i·g_i(θ) (a linear functional of G).
    #[test]
    fn diagonal_and_dense_adjoints_agree() {
        let params = init_mlp(MlpShape { d_in: 3, hidden: 4, depth: 3 }, 3).unwrap();
        let batch = random_batch(7, 3, 5);
        let pass = DomainPass::run(&params, &batch).unwrap();
        let p = params.num_params();
        let mut rng = rng_for(11, "adj");
        let u: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let alpha = 0.7;
        let g = per_sample_grads(&params, &batch, Subset::All).unwrap();
        let dense = Mat::from_fn(7, p, |i, j| alpha * u[j] * g.matrix[(i, j)] + v[j]);
        let zero_out = vec![0.0; 7];
        let mut a = vec![0.0; p];
        let mut b = vec![0.0; p];
        let diag_adj = DomainAdjoint {
            output: zero_out.clone(),
            grads: Some((Subset::All, GradAdjoint::Diagonal { alpha, u, v })),
        };
        let dense_adj = DomainAdjoint {
            output: zero_out,
            grads: Some((Subset::All, GradAdjoint::Dense(dense))),
        };
        accumulate_objective_gradient(&params, batch.inputs.as_ref(), &pass.cache, Some(&pass), &diag_adj, &mut a).unwrap();
        accumulate_objective_gradient(&params, batch.inputs.as_ref(), &pass.cache, Some(&pass), &dense_adj, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn dense_adjoint_matches_finite_differences_of_linear_functional() {
        let params = init_mlp(MlpShape { d_in: 2, hidden: 3, depth: 3 }, 13).unwrap();
        let batch = random_batch(5, 2, 6);
        let p = params.num_params();
        let mut rng = rng_for(12, "coef");
        let c = Mat::from_fn(5, p, |_, _| rng.gen_range(-1.0..1.0));
        let functional = |q: &ParamSet| -> f64 {
            let g = per_sample_grads(q, &batch, Subset::All).unwrap();
            (0..5)
                .map(|i| (0..p).map(|j| c[(i, j)] * g.matrix[(i, j)]).sum::<f64>())
                .sum()
        };
        let pass = DomainPass::run(&params, &batch).unwrap();
        let adj = DomainAdjoint {
            output: vec![0.0; 5],
            grads: Some((Subset::All, GradAdjoint::Dense(c.clone()))),
        };
        let mut grad = vec![0.0; p];
        accumulate_objective_gradient(&params, batch.inputs.as_ref(), &pass.cache, Some(&pass), &adj, &mut grad).unwrap();
        let flat = params.to_flat();
        let h = 1e-5;
        for j in 0..p {
            let mut q = params.clone();
            let mut f = flat.clone();
            f[j] += h;
            q.set_flat(&f).unwrap();
            let up = functional(&q);
            f[j] -= 2.0 * h;
            q.set_flat(&f).unwrap();
            let down = functional(&q);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {j}: fd {fd} analytic {}", grad[j]);
        }
    }
}
