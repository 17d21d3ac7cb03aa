//! Inconsistency scores on quadratic-bowl landscapes.
//!
//! Each domain's risk around a shared optimum θ* is `R_e(θ) = r_e + ½ θᵀH_eθ`
//! (θ measured from θ*). For a pair (A, B), `R(A,B) = r_B − r_A`,
//! `H^ε(A,B) = max {½θᵀH_Bθ : ½θᵀH_Aθ ≤ ε}` and the inconsistency
//! `I^ε(A,B) = max |R_B(θ) − r_A|` over the same sublevel set. When ε is small
//! enough for every negative-gap pair, the largest inconsistency equals the
//! largest `R + H^ε`; [`check_proposition`] verifies that equality.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Mat, Par, Side};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FishrError, Result};
use crate::rng::rng_for;

const SYM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticDomain {
    h: Mat<f64>,
    r_star: f64,
    /// ascending
    eigenvalues: Vec<f64>,
}

impl QuadraticDomain {
    pub fn new(h: Mat<f64>, r_star: f64) -> Result<Self> {
        let n = h.nrows();
        if n == 0 || h.ncols() != n {
            return Err(FishrError::Dimension(format!("Hessian must be square, got {}×{}", n, h.ncols())));
        }
        for i in 0..n {
            for j in 0..i {
                let scale = h[(i, j)].abs().max(h[(j, i)].abs()).max(1.0);
                if (h[(i, j)] - h[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(FishrError::Input(format!("Hessian not symmetric at ({i}, {j})")));
                }
            }
        }
        let mut eigenvalues = h
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| FishrError::Decomposition(format!("{e:?}")))?;
        eigenvalues.sort_by(f64::total_cmp);
        if !(eigenvalues[0] > 0.0) {
            return Err(FishrError::Decomposition(format!(
                "Hessian not positive definite (smallest eigenvalue {})",
                eigenvalues[0]
            )));
        }
        Ok(Self { h, r_star, eigenvalues })
    }

    pub fn diagonal(diag: &[f64], r_star: f64) -> Result<Self> {
        Self::new(Mat::from_fn(diag.len(), diag.len(), |i, j| if i == j { diag[i] } else { 0.0 }), r_star)
    }

    pub fn h(&self) -> &Mat<f64> {
        &self.h
    }

    pub fn r_star(&self) -> f64 {
        self.r_star
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// λ_h (smallest) first.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.h[(i, j)] == 0.0))
    }

    /// Scales the Hessian by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(Mat::from_fn(self.dim(), self.dim(), |i, j| c * self.h[(i, j)]), self.r_star)
    }

    fn quad(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += x[i] * self.h[(i, j)] * x[j];
            }
        }
        0.5 * acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeSet {
    pub domains: Vec<QuadraticDomain>,
    pub eps: f64,
}

impl LandscapeSet {
    pub fn new(domains: Vec<QuadraticDomain>, eps: f64) -> Result<Self> {
        if domains.is_empty() {
            return Err(FishrError::Input("a landscape needs at least one domain".into()));
        }
        let h = domains[0].dim();
        if domains.iter().any(|d| d.dim() != h) {
            return Err(FishrError::Dimension("domains differ in dimension".into()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(FishrError::Config(format!("ε must be positive and finite, got {eps}")));
        }
        Ok(Self { domains, eps })
    }
}

pub fn risk_gap(a: &QuadraticDomain, b: &QuadraticDomain) -> f64 {
    b.r_star - a.r_star
}

fn check_pair(a: &QuadraticDomain, b: &QuadraticDomain) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(FishrError::Dimension(format!("domain dimensions {} and {} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// `ε·λ_max(L⁻¹ H_B L⁻ᵀ)` with `H_A = LLᵀ`.
pub fn h_eps(a: &QuadraticDomain, b: &QuadraticDomain, eps: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(eps > 0.0) {
        return Err(FishrError::Config(format!("ε must be positive, got {eps}")));
    }
    let llt = a
        .h
        .llt(Side::Lower)
        .map_err(|e| FishrError::Decomposition(format!("Cholesky of H_A failed: {e:?}")))?;
    let l = llt.L();
    let mut x = b.h.clone();
    solve_lower_triangular_in_place(l, x.as_mut(), Par::Seq);
    // L⁻¹ H_B L⁻ᵀ = L⁻¹ (L⁻¹ H_B)ᵀ since H_B is symmetric
    let mut m = x.transpose().to_owned();
    solve_lower_triangular_in_place(l, m.as_mut(), Par::Seq);
    let n = m.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let ev = sym
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| FishrError::Decomposition(format!("{e:?}")))?;
    Ok(eps * ev.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Independent oracle: best ratio over the coordinate axes plus `n_dirs`
/// random unit directions.
pub fn h_eps_bruteforce(a: &QuadraticDomain, b: &QuadraticDomain, eps: f64, n_dirs: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.dim();
    let mut best = f64::NEG_INFINITY;
    let mut d = vec![0.0; n];
    for k in 0..n {
        d.iter_mut().for_each(|v| *v = 0.0);
        d[k] = 1.0;
        best = best.max(eps * b.quad(&d) / a.quad(&d));
    }
    let mut rng = rng_for(seed, "h_eps_bruteforce");
    for _ in 0..n_dirs {
        for v in d.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        best = best.max(eps * b.quad(&d) / a.quad(&d));
    }
    Ok(best)
}

/// `max(|R|, |R + H^ε|)`: the quadratic term ranges over `[0, H^ε]`.
pub fn inconsistency_from(risk_gap: f64, h_eps: f64) -> f64 {
    risk_gap.abs().max((risk_gap + h_eps).abs())
}

pub fn inconsistency_pair(a: &QuadraticDomain, b: &QuadraticDomain, eps: f64) -> Result<f64> {
    Ok(inconsistency_from(risk_gap(a, b), h_eps(a, b, eps)?))
}

/// Grid maximization of `|R_B(θ) − r_A|` over the 2-D ellipse
/// `½θᵀH_Aθ ≤ ε`, parametrized through the Cholesky factor of `H_A`.
pub fn inconsistency_grid_2d(a: &QuadraticDomain, b: &QuadraticDomain, eps: f64, steps: usize) -> Result<f64> {
    check_pair(a, b)?;
    if a.dim() != 2 {
        return Err(FishrError::Dimension("grid oracle is two-dimensional".into()));
    }
    let llt = a
        .h
        .llt(Side::Lower)
        .map_err(|e| FishrError::Decomposition(format!("{e:?}")))?;
    let l = llt.L();
    let radius = (2.0 * eps).sqrt();
    let mut best: f64 = 0.0;
    for ri in 0..=steps {
        let rho = radius * ri as f64 / steps as f64;
        for ti in 0..4 * steps {
            let t = std::f64::consts::TAU * ti as f64 / (4 * steps) as f64;
            // θ = L⁻ᵀ u with ‖u‖ = ρ gives ½θᵀH_Aθ = ½ρ²
            let u = [rho * t.cos(), rho * t.sin()];
            let th1 = u[1] / l[(1, 1)];
            let th0 = (u[0] - l[(1, 0)] * th1) / l[(0, 0)];
            let v = b.r_star + b.quad(&[th0, th1]) - a.r_star;
            best = best.max(v.abs());
        }
    }
    Ok(best)
}

/// Largest admissible ε for a pair with negative risk gap:
/// `−R(A,B)·λ_h^A / λ_1^B`.
pub fn eps_bound(a: &QuadraticDomain, b: &QuadraticDomain) -> Result<f64> {
    check_pair(a, b)?;
    let r = risk_gap(a, b);
    if r >= 0.0 {
        return Err(FishrError::NotApplicable(format!("the ε bound needs R(A,B) < 0, got {r}")));
    }
    Ok(-r * a.lambda_min() / b.lambda_max())
}

/// `ε·max_i max(λ_i^B/λ_i^A, λ_i^A/λ_i^B)` for diagonal Hessians.
pub fn taylor_diag_bound(a: &QuadraticDomain, b: &QuadraticDomain, eps: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !a.is_diagonal() || !b.is_diagonal() {
        return Err(FishrError::Input("the Taylor bound needs diagonal Hessians".into()));
    }
    let worst = (0..a.dim())
        .map(|i| {
            let (la, lb) = (a.h[(i, i)], b.h[(i, i)]);
            (lb / la).max(la / lb)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(eps * worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub a: usize,
    pub b: usize,
    pub risk_gap: f64,
    pub h_eps: f64,
    pub inconsistency: f64,
    /// R + H^ε
    pub sum: f64,
    pub argmax_inconsistency: bool,
    pub argmax_sum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub eps: f64,
    /// smallest ε bound over negative-gap pairs (None when no gap is negative)
    pub tightest_bound: Option<f64>,
    pub admissible: bool,
    /// max over pairs of I^ε
    pub max_inconsistency: f64,
    /// max over pairs of R + H^ε
    pub max_sum: f64,
    pub equal: bool,
    pub argmax_inconsistency: (usize, usize),
    pub argmax_sum: (usize, usize),
    pub include_diagonal: bool,
    pub pairs: Vec<PairRow>,
}

pub const EQUALITY_RTOL: f64 = 1e-9;

/// Smallest ε bound over ordered pairs with negative risk gap.
pub fn tightest_eps_bound(domains: &[QuadraticDomain]) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for a in domains {
        for b in domains {
            if risk_gap(a, b) < 0.0 {
                let e = eps_bound(a, b)?;
                best = Some(best.map_or(e, |x| x.min(e)));
            }
        }
    }
    Ok(best)
}

/// Both sides of the max-pair decomposition over ordered pairs.
pub fn check_proposition(landscape: &LandscapeSet, include_diagonal: bool) -> Result<PropositionReport> {
    let eps = landscape.eps;
    let ds = &landscape.domains;
    let tightest = tightest_eps_bound(ds)?;
    let admissible = tightest.is_none_or(|t| eps <= t);
    let mut pairs = Vec::new();
    for (i, a) in ds.iter().enumerate() {
        for (j, b) in ds.iter().enumerate() {
            if i == j && !include_diagonal {
                continue;
            }
            let r = risk_gap(a, b);
            let h = h_eps(a, b, eps)?;
            pairs.push(PairRow {
                a: i,
                b: j,
                risk_gap: r,
                h_eps: h,
                inconsistency: inconsistency_from(r, h),
                sum: r + h,
                argmax_inconsistency: false,
                argmax_sum: false,
            });
        }
    }
    if pairs.is_empty() {
        return Err(FishrError::Input("need two domains or include_diagonal".into()));
    }
    let argmax = |f: fn(&PairRow) -> f64| {
        let mut k = 0;
        for (idx, p) in pairs.iter().enumerate() {
            if f(p) > f(&pairs[k]) {
                k = idx;
            }
        }
        k
    };
    let ki = argmax(|p| p.inconsistency);
    let ks = argmax(|p| p.sum);
    pairs[ki].argmax_inconsistency = true;
    pairs[ks].argmax_sum = true;
    let lhs = pairs[ki].inconsistency;
    let rhs = pairs[ks].sum;
    Ok(PropositionReport {
        eps,
        tightest_bound: tightest,
        admissible,
        max_inconsistency: lhs,
        max_sum: rhs,
        equal: (lhs - rhs).abs() <= EQUALITY_RTOL * lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE),
        argmax_inconsistency: (pairs[ki].a, pairs[ki].b),
        argmax_sum: (pairs[ks].a, pairs[ks].b),
        include_diagonal,
        pairs,
    })
}

/// `QΛQᵀ` with Q from the QR of a Gaussian matrix and Λ log-uniform in
/// `[10⁻², 10²]`.
pub fn random_pd(h: usize, rng: &mut impl Rng) -> Mat<f64> {
    let g = Mat::from_fn(h, h, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().compute_Q();
    let lambda: Vec<f64> = (0..h).map(|_| 10f64.powf(rng.gen_range(-2.0..=2.0))).collect();
    let mut m = Mat::from_fn(h, h, |i, j| (0..h).map(|k| q[(i, k)] * lambda[k] * q[(j, k)]).sum::<f64>());
    for i in 0..h {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    m
}

/// Random landscape with risks `r_e ~ U(0, 1)` and ε set to `margin` times
/// the tightest admissible bound.
pub fn random_landscape(h: usize, num_domains: usize, seed: u64, margin: f64) -> Result<LandscapeSet> {
    let mut rng = rng_for(seed, "landscape");
    let domains = (0..num_domains)
        .map(|_| QuadraticDomain::new(random_pd(h, &mut rng), rng.gen_range(0.0..1.0)))
        .collect::<Result<Vec<_>>>()?;
    let eps = margin * tightest_eps_bound(&domains)?.unwrap_or(1.0);
    LandscapeSet::new(domains, eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub eps_margin: f64,
    pub include_diagonal: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps_margin: 0.9, include_diagonal: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub dims: usize,
    pub num_domains: usize,
    pub landscapes: usize,
    pub equal: usize,
    pub inadmissible: usize,
    /// seeds of inadmissible landscapes where the equality failed
    pub counterexamples: Vec<u64>,
    pub reports: Vec<(u64, PropositionReport)>,
}

impl CheckSummary {
    pub fn csv(&self) -> String {
        let mut out = String::from("seed,eps,tightest_bound,admissible,max_inconsistency,max_sum,equal,argmax_inconsistency,argmax_sum\n");
        for (seed, r) in &self.reports {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}-{},{}-{}\n",
                seed,
                r.eps,
                r.tightest_bound.map(|t| t.to_string()).unwrap_or_default(),
                r.admissible,
                r.max_inconsistency,
                r.max_sum,
                r.equal,
                r.argmax_inconsistency.0,
                r.argmax_inconsistency.1,
                r.argmax_sum.0,
                r.argmax_sum.1
            ));
        }
        out
    }
}

/// Checks landscapes `first_seed..first_seed + count`.
pub fn check_many(dims: usize, num_domains: usize, first_seed: u64, count: u64, opts: &CheckOptions) -> Result<CheckSummary> {
    if dims == 0 || num_domains < 2 {
        return Err(FishrError::Config("need dims ≥ 1 and at least two domains".into()));
    }
    if !(opts.eps_margin > 0.0) {
        return Err(FishrError::Config("eps margin must be positive".into()));
    }
    let mut summary = CheckSummary {
        dims,
        num_domains,
        landscapes: 0,
        equal: 0,
        inadmissible: 0,
        counterexamples: Vec::new(),
        reports: Vec::new(),
    };
    for seed in first_seed..first_seed + count {
        let land = random_landscape(dims, num_domains, seed, opts.eps_margin)?;
        let rep = check_proposition(&land, opts.include_diagonal)?;
        summary.landscapes += 1;
        summary.equal += rep.equal as usize;
        if !rep.admissible {
            summary.inadmissible += 1;
            if !rep.equal {
                summary.counterexamples.push(seed);
            }
        }
        summary.reports.push((seed, rep));
    }
    Ok(summary)
}
