//! Parameter learning for the skewed mixtures: EM with a gradient M-step
//! on the mean and the Cholesky factor of the inverse covariance, plus the
//! classical Gaussian-mixture EM used for the baseline and initialization.
//!
//! The M-step gradients are exact derivatives of the grid-approximated
//! upper bound, because the occupancy expectations they contain come from
//! the same quadrature grid used everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::SkewField;
use crate::error::{Error, Result};
use crate::grid::QuadratureGrid;
use crate::linalg::{Mat2, Vec2};
use crate::mixture::{
    gaussian_pdf, ComponentMoments, MixtureParams, NormalizerCache, SnComponent, SnmmDensity,
};
use crate::scalar::{cast, Scalar};

/// Posterior component-membership probabilities, one row per sample.
#[derive(Clone, Debug)]
pub struct Responsibilities<S> {
    data: Vec<S>,
    n_samples: usize,
    n_components: usize,
}

impl<S: Scalar> Responsibilities<S> {
    /// Validated constructor: entries in `[0, 1]`, rows summing to 1
    /// within 1e-10.
    pub fn new(data: Vec<S>, n_samples: usize, n_components: usize) -> Result<Self> {
        if data.len() != n_samples * n_components {
            return Err(Error::InvalidParameter(
                "responsibility matrix has the wrong size".into(),
            ));
        }
        let r = Responsibilities {
            data,
            n_samples,
            n_components,
        };
        let tol = cast::<S>(1e-10);
        for n in 0..n_samples {
            let row = r.row(n);
            let total: S = row.iter().copied().sum();
            if (total - S::one()).abs() > tol {
                return Err(Error::InvalidParameter(format!(
                    "responsibility row {n} sums to {total}"
                )));
            }
            if row.iter().any(|g| *g < S::zero() || *g > S::one() + tol) {
                return Err(Error::InvalidParameter(format!(
                    "responsibility row {n} leaves [0, 1]"
                )));
            }
        }
        Ok(r)
    }

    /// Unvalidated constructor for diagnostics and numerical checks.
    pub fn from_matrix_unchecked(data: Vec<S>, n_samples: usize, n_components: usize) -> Self {
        Responsibilities {
            data,
            n_samples,
            n_components,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize) -> S {
        self.data[n * self.n_components + i]
    }

    pub fn row(&self, n: usize) -> &[S] {
        &self.data[n * self.n_components..(n + 1) * self.n_components]
    }

    /// Sum of column `i` (the effective sample count of component `i`).
    pub fn column_sum(&self, i: usize) -> S {
        let mut acc = S::zero();
        for n in 0..self.n_samples {
            acc += self.get(n, i);
        }
        acc
    }

    /// Responsibility-weighted sample mean of component `i`.
    pub fn weighted_mean(&self, i: usize, data: &[Vec2<S>]) -> Vec2<S> {
        let mut acc = Vec2::zero();
        for (n, x) in data.iter().enumerate() {
            acc += *x * self.get(n, i);
        }
        acc / self.column_sum(i)
    }

    /// Responsibility-weighted scatter of component `i` about `center`.
    pub fn weighted_scatter(&self, i: usize, data: &[Vec2<S>], center: Vec2<S>) -> Mat2<S> {
        let mut acc = Mat2::zero();
        for (n, x) in data.iter().enumerate() {
            let d = *x - center;
            acc = acc.add_mat(d.outer(d).scale(self.get(n, i)));
        }
        acc.scale(self.column_sum(i).recip())
    }
}

/// Learner configuration. The iteration limits and learning rates follow
/// the double-loop scheme; none of the defaults come from published values.
#[derive(Clone, Copy, Debug)]
pub struct LearnConfig<S> {
    pub n_components: usize,
    /// Outer EM iterations (L1).
    pub outer_iters: usize,
    /// Gradient steps per component per outer iteration (L2).
    pub inner_iters: usize,
    /// Learning rate for the mean.
    pub rate_mu: S,
    /// Learning rate for the Cholesky factor of the inverse covariance.
    pub rate_chol: S,
    pub seed: u64,
    pub grid_dx: S,
    pub grid_dy: S,
    /// Independent GMM initializations tried before the skewed fit.
    pub gmm_restarts: usize,
}

impl<S: Scalar> LearnConfig<S> {
    pub fn new(n_components: usize, seed: u64) -> Self {
        LearnConfig {
            n_components,
            outer_iters: 100,
            inner_iters: 10,
            rate_mu: cast(1e-2),
            rate_chol: cast(1e-3),
            seed,
            grid_dx: cast(0.1),
            grid_dy: cast(0.1),
            gmm_restarts: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_components == 0 || self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidConfig(
                "component count and iteration limits must be at least 1".into(),
            ));
        }
        if self.rate_mu <= S::zero() || self.rate_chol <= S::zero() {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum mixture weight after the floor, covariance eigenvalue floor,
/// early-stopping controls, and the per-iteration monotonicity tolerance.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const COV_EIGEN_FLOOR: f64 = 1e-4;
const EARLY_STOP_TOL: f64 = 1e-6;
const EARLY_STOP_PATIENCE: usize = 5;
const MONOTONE_TOL: f64 = 1e-3;
const MAX_HALVINGS: usize = 10;

/// Negative log-likelihood of `data` under the skewed mixture.
pub fn nll<S: Scalar>(
    data: &[Vec2<S>],
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let eval = SnmmDensity::new(params, field, grid)?;
    nll_with(data, &eval)
}

fn nll_with<S: Scalar>(data: &[Vec2<S>], eval: &SnmmDensity<S>) -> Result<S> {
    let mut acc = S::zero();
    for (index, x) in data.iter().enumerate() {
        let p = eval.pdf(*x);
        if p <= S::zero() {
            return Err(Error::ZeroDensitySample { index });
        }
        acc -= p.ln();
    }
    Ok(acc)
}

/// E-step: posterior membership of every sample under the current params.
pub fn e_step<S: Scalar>(
    data: &[Vec2<S>],
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<Responsibilities<S>> {
    let eval = SnmmDensity::new(params, field, grid)?;
    e_step_with(data, &eval)
}

fn e_step_with<S: Scalar>(
    data: &[Vec2<S>],
    eval: &SnmmDensity<S>,
) -> Result<Responsibilities<S>> {
    let k = eval.params().len();
    let mut out = Vec::with_capacity(data.len() * k);
    for (index, x) in data.iter().enumerate() {
        let mut row = Vec::with_capacity(k);
        let mut total = S::zero();
        for (i, w) in eval.params().weights().iter().enumerate() {
            let v = *w * eval.component_pdf(i, *x);
            total += v;
            row.push(v);
        }
        if total <= S::zero() {
            return Err(Error::ZeroDensitySample { index });
        }
        for v in row {
            out.push(v / total);
        }
    }
    Responsibilities::new(out, data.len(), k)
}

/// Weight update: column means of the responsibilities, floored at
/// `WEIGHT_FLOOR` and renormalized so every weight stays strictly positive.
pub fn weight_update<S: Scalar>(gamma: &Responsibilities<S>) -> Vec<S> {
    let n = S::from_usize(gamma.n_samples()).unwrap();
    let floor = cast::<S>(WEIGHT_FLOOR);
    let mut weights: Vec<S> = (0..gamma.n_components())
        .map(|i| (gamma.column_sum(i) / n).max(floor))
        .collect();
    let total: S = weights.iter().copied().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Gradient of the EM upper bound with respect to the mean of component
/// `i`: `G_i Sigma_i^{-1} (E[X Q]/E[Q] - mu_hat_i)`.
pub fn grad_mu<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
) -> Result<Vec2<S>> {
    let cache = NormalizerCache::new();
    grad_mu_cached(i, gamma, params, field, grid, data, &cache)
}

fn grad_mu_cached<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
    cache: &NormalizerCache<S>,
) -> Result<Vec2<S>> {
    let comp = params.component(i);
    let m = blocked_checked(cache.moments(comp, field, grid), i)?;
    let g_sum = gamma.column_sum(i);
    let mu_hat = gamma.weighted_mean(i, data);
    let bias = m.first / m.mass - mu_hat;
    Ok(comp.inv_sigma().mul_vec(bias) * g_sum)
}

/// Gradient of the EM upper bound with respect to the lower-triangular
/// factor `L_i` of `Sigma_i^{-1} = L_i L_i^T`, upper entry zeroed:
/// `-G_i { E[(X-mu)(X-mu)^T Q]/E[Q] - scatter_i(mu_i) } L_i`.
pub fn grad_chol<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
) -> Result<Mat2<S>> {
    let cache = NormalizerCache::new();
    grad_chol_cached(i, gamma, params, field, grid, data, &cache)
}

fn grad_chol_cached<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
    cache: &NormalizerCache<S>,
) -> Result<Mat2<S>> {
    let comp = params.component(i);
    let m = blocked_checked(cache.moments(comp, field, grid), i)?;
    let g_sum = gamma.column_sum(i);
    let scatter = gamma.weighted_scatter(i, data, comp.mu());
    let mismatch = m.second.scale(m.mass.recip()).sub_mat(scatter);
    let l = inverse_cholesky(comp)?;
    let mut grad = mismatch.mul_mat(l).scale(-g_sum);
    grad.m01 = S::zero();
    Ok(grad)
}

fn blocked_checked<S: Scalar>(m: ComponentMoments<S>, i: usize) -> Result<ComponentMoments<S>> {
    if m.mass <= cast(1e-6) {
        Err(Error::ComponentBlocked { component: i })
    } else {
        Ok(m)
    }
}

/// Lower Cholesky factor of the component's inverse covariance.
pub fn inverse_cholesky<S: Scalar>(comp: &SnComponent<S>) -> Result<Mat2<S>> {
    comp.inv_sigma()
        .cholesky_lower()
        .ok_or_else(|| Error::InvalidParameter("inverse covariance not SPD".into()))
}

/// EM upper bound `J~(Gamma, Theta)`; equals the NLL when `Gamma` comes
/// from the E-step at the same parameters, and upper-bounds it otherwise.
pub fn upper_bound<S: Scalar>(
    data: &[Vec2<S>],
    gamma: &Responsibilities<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let eval = SnmmDensity::new(params, field, grid)?;
    let mut acc = S::zero();
    for (n, x) in data.iter().enumerate() {
        for (i, w) in params.weights().iter().enumerate() {
            let g = gamma.get(n, i);
            if g <= S::zero() {
                continue;
            }
            let joint = *w * eval.component_pdf(i, *x);
            if joint <= S::zero() {
                return Err(Error::ZeroDensitySample { index: n });
            }
            acc += g * (g.ln() - joint.ln());
        }
    }
    Ok(acc)
}

/// The part of the upper bound that depends on component `i` only:
/// `-sum_n gamma_{n,i} ln phi_i(x_n) + G_i ln Z_i` (constants dropped).
fn component_partial_objective<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    comp: &SnComponent<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
    cache: &NormalizerCache<S>,
) -> Result<S> {
    let m = blocked_checked(cache.moments(comp, field, grid), i)?;
    let mut acc = S::zero();
    for (n, x) in data.iter().enumerate() {
        let g = gamma.get(n, i);
        if g > S::zero() {
            let phi = gaussian_pdf(*x, comp);
            if phi <= S::zero() {
                return Err(Error::ZeroDensitySample { index: n });
            }
            acc -= g * phi.ln();
        }
    }
    Ok(acc + gamma.column_sum(i) * m.mass.ln())
}

/// Result of a skewed-mixture fit: final parameters plus the NLL recorded
/// after every outer iteration.
#[derive(Clone, Debug)]
pub struct SnmmFit<S> {
    pub params: MixtureParams<S>,
    pub nll_trace: Vec<S>,
}

/// Fit a skewed mixture to `data` with the double-loop EM/gradient scheme,
/// initialized from the best of several Gaussian-mixture EM runs.
pub fn fit_snmm<S: Scalar>(
    data: &[Vec2<S>],
    config: &LearnConfig<S>,
    field: &SkewField<S>,
) -> Result<SnmmFit<S>> {
    config.validate()?;
    if data.len() < config.n_components {
        return Err(Error::InvalidConfig(format!(
            "need at least {} samples, got {}",
            config.n_components,
            data.len()
        )));
    }
    let init = best_gmm_init(data, config)?;
    fit_snmm_from(data, &init, config, field)
}

/// Like [`fit_snmm`] but warm-started from explicit parameters.
pub fn fit_snmm_from<S: Scalar>(
    data: &[Vec2<S>],
    init: &MixtureParams<S>,
    config: &LearnConfig<S>,
    field: &SkewField<S>,
) -> Result<SnmmFit<S>> {
    config.validate()?;
    if init.len() != config.n_components {
        return Err(Error::InvalidConfig(format!(
            "initialization has {} components, config wants {}",
            init.len(),
            config.n_components
        )));
    }
    let grid = QuadratureGrid::build(field.workspace(), config.grid_dx, config.grid_dy, field)?;
    let mut params = init.clone();
    let cache = NormalizerCache::new();

    let mut trace: Vec<S> = Vec::with_capacity(config.outer_iters);
    let mut stall = 0usize;
    for _outer in 0..config.outer_iters {
        let eval = SnmmDensity::new_cached(&params, field, &grid, &cache)?;
        let gamma = e_step_with(data, &eval)?;
        let weights = weight_update(&gamma);
        params = MixtureParams::new(weights, params.components().to_vec())?;

        for i in 0..config.n_components {
            inner_gradient_loop(i, &gamma, &mut params, field, &grid, data, config, &cache)?;
        }

        let eval = SnmmDensity::new_cached(&params, field, &grid, &cache)?;
        let value = nll_with(data, &eval)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                trace: trace.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            });
        }
        if let Some(prev) = trace.last().copied() {
            if value > prev + cast(MONOTONE_TOL) {
                return Err(Error::Diverged {
                    trace: trace.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                });
            }
            if prev - value < cast(EARLY_STOP_TOL) {
                stall += 1;
            } else {
                stall = 0;
            }
        }
        trace.push(value);
        if stall >= EARLY_STOP_PATIENCE {
            break;
        }
    }
    Ok(SnmmFit {
        params,
        nll_trace: trace,
    })
}

/// One component's inner gradient descent: step the mean and the inverse
/// Cholesky factor, halving the rates (at most 10 times) whenever a step
/// would increase the component objective; a step that cannot improve ends
/// the loop.
#[allow(clippy::too_many_arguments)]
fn inner_gradient_loop<S: Scalar>(
    i: usize,
    gamma: &Responsibilities<S>,
    params: &mut MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    data: &[Vec2<S>],
    config: &LearnConfig<S>,
    cache: &NormalizerCache<S>,
) -> Result<()> {
    for _inner in 0..config.inner_iters {
        let comp = *params.component(i);
        let base = component_partial_objective(i, gamma, &comp, field, grid, data, cache)?;
        let g_mu = grad_mu_cached(i, gamma, params, field, grid, data, cache)?;
        let g_l = grad_chol_cached(i, gamma, params, field, grid, data, cache)?;
        if g_mu.norm() + g_l.norm() < cast(1e-12) {
            break;
        }
        let l = inverse_cholesky(&comp)?;
        let mut rate_mu = config.rate_mu;
        let mut rate_l = config.rate_chol;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            if let Some(cand) = candidate_component(&comp, l, g_mu, g_l, rate_mu, rate_l) {
                let value =
                    component_partial_objective(i, gamma, &cand, field, grid, data, cache);
                if let Ok(value) = value {
                    if value <= base {
                        accepted = Some(cand);
                        break;
                    }
                }
            }
            rate_mu = rate_mu * cast(0.5);
            rate_l = rate_l * cast(0.5);
        }
        match accepted {
            Some(cand) => *params = params.with_component(i, cand),
            None => break,
        }
    }
    Ok(())
}

/// Build the stepped component; `None` when the step leaves the SPD cone.
fn candidate_component<S: Scalar>(
    comp: &SnComponent<S>,
    l: Mat2<S>,
    g_mu: Vec2<S>,
    g_l: Mat2<S>,
    rate_mu: S,
    rate_l: S,
) -> Option<SnComponent<S>> {
    let mu = comp.mu() - g_mu * rate_mu;
    let stepped = l.sub_mat(g_l.scale(rate_l));
    if stepped.m00 <= S::zero() || stepped.m11 <= S::zero() {
        return None;
    }
    let precision = stepped.mul_mat(stepped.transpose());
    let sigma = precision
        .inverse()?
        .symmetrize()
        .floor_eigenvalues(cast(COV_EIGEN_FLOOR));
    SnComponent::new(mu, sigma).ok()
}

fn best_gmm_init<S: Scalar>(data: &[Vec2<S>], config: &LearnConfig<S>) -> Result<MixtureParams<S>> {
    let mut best: Option<(S, MixtureParams<S>)> = None;
    for r in 0..config.gmm_restarts.max(1) {
        let params = fit_gmm(data, config.n_components, config.seed.wrapping_add(r as u64))?;
        let value = gaussian_mixture_nll(data, &params)?;
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            best = Some((value, params));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// NLL of `data` under a plain Gaussian mixture (no skewing function).
pub fn gaussian_mixture_nll<S: Scalar>(data: &[Vec2<S>], params: &MixtureParams<S>) -> Result<S> {
    let mut acc = S::zero();
    for (index, x) in data.iter().enumerate() {
        let mut p = S::zero();
        for (i, w) in params.weights().iter().enumerate() {
            p += *w * gaussian_pdf(*x, params.component(i));
        }
        if p <= S::zero() {
            return Err(Error::ZeroDensitySample { index });
        }
        acc -= p.ln();
    }
    Ok(acc)
}

/// Classical Gaussian-mixture EM with k-means++-style seeding, covariance
/// eigenvalue flooring, and empty-cluster reseeding. Deterministic given
/// the seed.
pub fn fit_gmm<S: Scalar>(data: &[Vec2<S>], n_components: usize, seed: u64) -> Result<MixtureParams<S>> {
    if n_components == 0 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    if data.len() < n_components {
        return Err(Error::InvalidConfig(format!(
            "need at least {} samples, got {}",
            n_components,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = kmeans_pp_seeds(data, n_components, &mut rng);
    let base_cov = sample_covariance(data).floor_eigenvalues(cast(COV_EIGEN_FLOOR));
    let covs = vec![base_cov; n_components];
    let weights = vec![S::one() / S::from_usize(n_components).unwrap(); n_components];
    gmm_em(data, means, covs, weights)
}

/// Gaussian-mixture EM from an explicit initialization (warm start).
pub fn refine_gmm<S: Scalar>(data: &[Vec2<S>], init: &MixtureParams<S>) -> Result<MixtureParams<S>> {
    let means = init.components().iter().map(|c| c.mu()).collect();
    let covs = init.components().iter().map(|c| c.sigma()).collect();
    gmm_em(data, means, covs, init.weights().to_vec())
}

fn gmm_em<S: Scalar>(
    data: &[Vec2<S>],
    mut means: Vec<Vec2<S>>,
    mut covs: Vec<Mat2<S>>,
    mut weights: Vec<S>,
) -> Result<MixtureParams<S>> {
    let n_components = means.len();
    let n = data.len();
    let n_s = S::from_usize(n).unwrap();
    let base_cov = sample_covariance(data).floor_eigenvalues(cast(COV_EIGEN_FLOOR));
    let mut prev_nll = S::infinity();
    for _iter in 0..300 {
        let comps: Vec<SnComponent<S>> = means
            .iter()
            .zip(&covs)
            .map(|(m, c)| SnComponent::new(*m, *c))
            .collect::<Result<_>>()?;

        // E-step.
        let mut gamma = vec![S::zero(); n * n_components];
        let mut nll_acc = S::zero();
        for (idx, x) in data.iter().enumerate() {
            let mut total = S::zero();
            for i in 0..n_components {
                let v = weights[i] * gaussian_pdf(*x, &comps[i]);
                gamma[idx * n_components + i] = v;
                total += v;
            }
            if total <= S::zero() {
                return Err(Error::ZeroDensitySample { index: idx });
            }
            for i in 0..n_components {
                gamma[idx * n_components + i] /= total;
            }
            nll_acc -= total.ln();
        }

        // M-step with empty-cluster reseeding.
        for i in 0..n_components {
            let g_sum: S = (0..n).map(|idx| gamma[idx * n_components + i]).sum();
            if g_sum < cast(1e-8) {
                means[i] = farthest_point(data, &means);
                covs[i] = base_cov;
                weights[i] = S::one() / n_s;
                continue;
            }
            let mut mean = Vec2::zero();
            for (idx, x) in data.iter().enumerate() {
                mean += *x * gamma[idx * n_components + i];
            }
            mean = mean / g_sum;
            let mut scatter = Mat2::zero();
            for (idx, x) in data.iter().enumerate() {
                let d = *x - mean;
                scatter = scatter.add_mat(d.outer(d).scale(gamma[idx * n_components + i]));
            }
            means[i] = mean;
            covs[i] = scatter
                .scale(g_sum.recip())
                .symmetrize()
                .floor_eigenvalues(cast(COV_EIGEN_FLOOR));
            weights[i] = (g_sum / n_s).max(cast(WEIGHT_FLOOR));
        }
        let total: S = weights.iter().copied().sum();
        for w in &mut weights {
            *w /= total;
        }

        if (prev_nll - nll_acc).abs() < cast::<S>(1e-9) * (S::one() + nll_acc.abs()) {
            break;
        }
        prev_nll = nll_acc;
    }

    let comps: Vec<SnComponent<S>> = means
        .iter()
        .zip(&covs)
        .map(|(m, c)| SnComponent::new(*m, *c))
        .collect::<Result<_>>()?;
    MixtureParams::new(weights, comps)
}

fn kmeans_pp_seeds<S: Scalar, R: Rng>(data: &[Vec2<S>], k: usize, rng: &mut R) -> Vec<Vec2<S>> {
    let mut means = Vec::with_capacity(k);
    means.push(data[rng.random_range(0..data.len())]);
    while means.len() < k {
        let d2: Vec<S> = data
            .iter()
            .map(|x| {
                means
                    .iter()
                    .map(|m| (*x - *m).norm_sq())
                    .fold(S::infinity(), S::min)
            })
            .collect();
        let total: S = d2.iter().copied().sum();
        if total <= S::zero() {
            means.push(data[rng.random_range(0..data.len())]);
            continue;
        }
        let mut target = S::unit_uniform(rng) * total;
        let mut chosen = data.len() - 1;
        for (idx, w) in d2.iter().enumerate() {
            target = target - *w;
            if target <= S::zero() {
                chosen = idx;
                break;
            }
        }
        means.push(data[chosen]);
    }
    means
}

fn farthest_point<S: Scalar>(data: &[Vec2<S>], means: &[Vec2<S>]) -> Vec2<S> {
    let mut best = (S::neg_infinity(), data[0]);
    for x in data {
        let d = means
            .iter()
            .map(|m| (*x - *m).norm_sq())
            .fold(S::infinity(), S::min);
        if d > best.0 {
            best = (d, *x);
        }
    }
    best.1
}

fn sample_covariance<S: Scalar>(data: &[Vec2<S>]) -> Mat2<S> {
    let n = S::from_usize(data.len()).unwrap();
    let mean = data.iter().fold(Vec2::zero(), |acc, x| acc + *x) / n;
    let mut scatter = Mat2::zero();
    for x in data {
        let d = *x - mean;
        scatter = scatter.add_mat(d.outer(d));
    }
    scatter.scale(n.recip()).symmetrize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Obstacle, Workspace};
    use crate::mixture::sample;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn comp(mu: (f64, f64), s: (f64, f64, f64)) -> SnComponent<f64> {
        SnComponent::new(Vec2::new(mu.0, mu.1), Mat2::symmetric(s.0, s.1, s.2)).unwrap()
    }

    fn free_scene(dx: f64) -> (SkewField<f64>, QuadratureGrid<f64>) {
        let ws = Workspace::standard();
        let field = SkewField::free(ws);
        let grid = QuadratureGrid::build(&ws, dx, dx, &field).unwrap();
        (field, grid)
    }

    fn two_mode_scene(dx: f64) -> (SkewField<f64>, QuadratureGrid<f64>) {
        let ws = Workspace::standard();
        let field =
            SkewField::new(ws, vec![Obstacle::rectangle(7.0, 11.0, 9.0, 10.0)]).unwrap();
        let grid = QuadratureGrid::build(&ws, dx, dx, &field).unwrap();
        (field, grid)
    }

    fn exp_a_truth() -> MixtureParams<f64> {
        MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                comp((9.0, 12.0), (1.0, 0.3, 0.7)),
                comp((9.0, 7.0), (1.0, -0.3, 0.7)),
            ],
        )
        .unwrap()
    }

    fn exp_a_data() -> (SkewField<f64>, QuadratureGrid<f64>, Vec<Vec2<f64>>) {
        let (field, grid) = two_mode_scene(0.1);
        let data = sample(&exp_a_truth(), &field, &grid, 300, 2024).unwrap();
        (field, grid, data)
    }

    #[test]
    fn nll_single_sample_at_mode() {
        let (field, grid) = free_scene(0.1);
        let c = comp((10.0, 10.0), (1.0, 0.3, 0.7));
        let params = MixtureParams::single(c);
        let v = nll(&[Vec2::new(10.0, 10.0)], &params, &field, &grid).unwrap();
        assert_relative_eq!(v, -(1.0 / (TAU * 0.61f64.sqrt())).ln(), epsilon = 1e-12);
    }

    #[test]
    fn nll_prefers_truth_over_shifted_params() {
        let (field, grid, data) = exp_a_data();
        let truth = exp_a_truth();
        let shifted = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                comp((11.0, 14.0), (1.0, 0.3, 0.7)),
                comp((11.0, 9.0), (1.0, -0.3, 0.7)),
            ],
        )
        .unwrap();
        let at_truth = nll(&data, &truth, &field, &grid).unwrap();
        let at_shifted = nll(&data, &shifted, &field, &grid).unwrap();
        assert!(at_truth < at_shifted);
    }

    #[test]
    fn nll_is_additive_over_duplicated_data() {
        let (field, grid, data) = exp_a_data();
        let truth = exp_a_truth();
        let single = nll(&data, &truth, &field, &grid).unwrap();
        let mut doubled = data.clone();
        doubled.extend_from_slice(&data);
        let twice = nll(&doubled, &truth, &field, &grid).unwrap();
        assert_relative_eq!(twice, 2.0 * single, epsilon = 1e-9);
    }

    #[test]
    fn nll_zero_density_reports_index() {
        let (field, grid) = two_mode_scene(0.1);
        let truth = exp_a_truth();
        let data = vec![Vec2::new(9.0, 12.0), Vec2::new(9.0, 9.5)];
        match nll(&data, &truth, &field, &grid) {
            Err(Error::ZeroDensitySample { index }) => assert_eq!(index, 1),
            other => panic!("expected zero-density error, got {other:?}"),
        }
    }

    #[test]
    fn e_step_single_component_is_all_ones() {
        let (field, grid) = free_scene(0.1);
        let params = MixtureParams::single(comp((4.0, 4.0), (1.0, 0.0, 1.0)));
        let data = vec![Vec2::new(3.0, 3.0), Vec2::new(5.0, 5.0)];
        let gamma = e_step(&data, &params, &field, &grid).unwrap();
        for n in 0..2 {
            assert_eq!(gamma.get(n, 0), 1.0);
        }
    }

    #[test]
    fn e_step_symmetric_sample_splits_evenly() {
        let (field, grid) = free_scene(0.1);
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![comp((8.0, 10.0), (1.0, 0.0, 1.0)), comp((12.0, 10.0), (1.0, 0.0, 1.0))],
        )
        .unwrap();
        let gamma = e_step(&[Vec2::new(10.0, 10.0)], &params, &field, &grid).unwrap();
        assert_relative_eq!(gamma.get(0, 0), 0.5, epsilon = 1e-12);
        assert_relative_eq!(gamma.get(0, 1), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn e_step_matches_independent_reimplementation() {
        // Independent oracle: normalizers from a raw quadrature loop and
        // densities assembled by hand.
        let (field, grid, data) = exp_a_data();
        let truth = exp_a_truth();
        let gamma = e_step(&data[..10], &truth, &field, &grid).unwrap();

        let mut normalizers = Vec::new();
        for c in truth.components() {
            let mut z = 0.0;
            for j in 0..grid.len() {
                let p = grid.point(j);
                if field.is_free_unchecked(p) {
                    z += gaussian_pdf(p, c);
                }
            }
            normalizers.push(z * grid.cell_area());
        }
        for (n, x) in data[..10].iter().enumerate() {
            let raw: Vec<f64> = truth
                .components()
                .iter()
                .zip(&normalizers)
                .zip(truth.weights())
                .map(|((c, z), w)| w * gaussian_pdf(*x, c) / z)
                .collect();
            let total: f64 = raw.iter().sum();
            for i in 0..2 {
                assert!(
                    (gamma.get(n, i) - raw[i] / total).abs() < 1e-8,
                    "sample {n} component {i}"
                );
            }
        }
    }

    #[test]
    fn weight_update_matches_column_means() {
        let mut raw = Vec::new();
        let mut rng_state = 88u64;
        let n = 40;
        for _ in 0..n {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let u = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
            raw.push(u);
            raw.push(1.0 - u);
        }
        let gamma = Responsibilities::new(raw.clone(), n, 2).unwrap();
        let w = weight_update(&gamma);
        let mean0: f64 = (0..n).map(|r| raw[2 * r]).sum::<f64>() / n as f64;
        assert_relative_eq!(w[0], mean0, epsilon = 1e-12);
        assert_relative_eq!(w[0] + w[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weight_update_applies_floor() {
        let gamma = Responsibilities::new(vec![1.0, 0.0, 1.0, 0.0], 2, 2).unwrap();
        let w = weight_update(&gamma);
        assert!(w[1] > 0.0 && w[1] <= 2.0 * WEIGHT_FLOOR);
        assert_relative_eq!(w[0] + w[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn grad_mu_vanishes_at_gaussian_mle() {
        let (field, grid, data) = exp_a_data();
        let n = data.len();
        let gamma =
            Responsibilities::new(vec![1.0; n], n, 1).unwrap();
        let mean = gamma.weighted_mean(0, &data);
        let params = MixtureParams::single(
            SnComponent::new(mean, Mat2::symmetric(1.0, 0.2, 0.8)).unwrap(),
        );
        let free = SkewField::free(*field.workspace());
        let g = grad_mu(0, &gamma, &params, &free, &grid, &data).unwrap();
        assert!(g.norm() < 1e-6, "gradient at MLE: {g:?}");
    }

    #[test]
    fn grad_chol_vanishes_at_gaussian_mle() {
        let (_, grid, data) = exp_a_data();
        let n = data.len();
        let gamma = Responsibilities::new(vec![1.0; n], n, 1).unwrap();
        let mean = gamma.weighted_mean(0, &data);
        let scatter = gamma.weighted_scatter(0, &data, mean);
        let params = MixtureParams::single(SnComponent::new(mean, scatter).unwrap());
        let free = SkewField::free(Workspace::standard());
        let g = grad_chol(0, &gamma, &params, &free, &grid, &data).unwrap();
        assert!(g.norm() < 1e-5, "gradient at MLE: {g:?}");
    }

    /// Central finite differences of the quadrature upper bound.
    fn fd_grads(
        i: usize,
        gamma: &Responsibilities<f64>,
        params: &MixtureParams<f64>,
        field: &SkewField<f64>,
        grid: &QuadratureGrid<f64>,
        data: &[Vec2<f64>],
    ) -> (Vec2<f64>, Mat2<f64>) {
        let h = 1e-4;
        let comp = *params.component(i);
        let eval_mu = |mu: Vec2<f64>| {
            let cand = SnComponent::new(mu, comp.sigma()).unwrap();
            upper_bound(data, gamma, &params.with_component(i, cand), field, grid).unwrap()
        };
        let g_mu = Vec2::new(
            (eval_mu(comp.mu() + Vec2::new(h, 0.0)) - eval_mu(comp.mu() - Vec2::new(h, 0.0)))
                / (2.0 * h),
            (eval_mu(comp.mu() + Vec2::new(0.0, h)) - eval_mu(comp.mu() - Vec2::new(0.0, h)))
                / (2.0 * h),
        );
        let l = inverse_cholesky(&comp).unwrap();
        let eval_l = |l_cand: Mat2<f64>| {
            let sigma = l_cand
                .mul_mat(l_cand.transpose())
                .inverse()
                .unwrap()
                .symmetrize();
            let cand = SnComponent::new(comp.mu(), sigma).unwrap();
            upper_bound(data, gamma, &params.with_component(i, cand), field, grid).unwrap()
        };
        let mut g_l = Mat2::zero();
        for (r, c) in [(0, 0), (1, 0), (1, 1)] {
            let mut plus = l;
            let mut minus = l;
            match (r, c) {
                (0, 0) => {
                    plus.m00 += h;
                    minus.m00 -= h;
                }
                (1, 0) => {
                    plus.m10 += h;
                    minus.m10 -= h;
                }
                _ => {
                    plus.m11 += h;
                    minus.m11 -= h;
                }
            }
            let d = (eval_l(plus) - eval_l(minus)) / (2.0 * h);
            match (r, c) {
                (0, 0) => g_l.m00 = d,
                (1, 0) => g_l.m10 = d,
                _ => g_l.m11 = d,
            }
        }
        (g_mu, g_l)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (field, grid, data) = exp_a_data();
        let truth = exp_a_truth();
        let gamma = e_step(&data, &truth, &field, &grid).unwrap();
        // Slightly off-truth parameters so the gradients are non-trivial.
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![
                comp((8.6, 11.5), (1.2, 0.2, 0.8)),
                comp((9.4, 7.4), (0.9, -0.2, 0.9)),
            ],
        )
        .unwrap();
        for i in 0..2 {
            let a_mu = grad_mu(i, &gamma, &params, &field, &grid, &data).unwrap();
            let a_l = grad_chol(i, &gamma, &params, &field, &grid, &data).unwrap();
            let (f_mu, f_l) = fd_grads(i, &gamma, &params, &field, &grid, &data);
            let rel_mu = (a_mu - f_mu).norm() / f_mu.norm().max(1e-12);
            let rel_l = a_l.sub_mat(f_l).norm() / f_l.norm().max(1e-12);
            assert!(rel_mu < 1e-5, "component {i}: mu rel err {rel_mu}");
            assert!(rel_l < 1e-5, "component {i}: L rel err {rel_l}");
        }
    }

    #[test]
    fn gradient_scales_linearly_with_responsibilities() {
        let (field, grid, data) = exp_a_data();
        let params = exp_a_truth();
        let gamma = e_step(&data, &params, &field, &grid).unwrap();
        let n = data.len();
        let scaled = Responsibilities::from_matrix_unchecked(
            (0..n * 2)
                .map(|j| gamma.get(j / 2, j % 2) * 0.25)
                .collect(),
            n,
            2,
        );
        let g_full = grad_mu(0, &gamma, &params, &field, &grid, &data).unwrap();
        let g_quarter = grad_mu(0, &scaled, &params, &field, &grid, &data).unwrap();
        assert_relative_eq!(g_quarter.x, 0.25 * g_full.x, epsilon = 1e-10);
        assert_relative_eq!(g_quarter.y, 0.25 * g_full.y, epsilon = 1e-10);
    }

    #[test]
    fn grad_chol_sign_flips_with_moment_mismatch() {
        // With Q = 1 the bracket is Sigma - scatter; swapping Sigma around
        // the scatter flips the gradient sign.
        let (_, grid, data) = exp_a_data();
        let free = SkewField::free(Workspace::standard());
        let n = data.len();
        let gamma = Responsibilities::new(vec![1.0; n], n, 1).unwrap();
        let mean = gamma.weighted_mean(0, &data);
        let scatter = gamma.weighted_scatter(0, &data, mean);
        let wide = scatter.scale(1.5);
        let narrow = scatter.scale(0.75);
        let g_wide = grad_chol(
            0,
            &gamma,
            &MixtureParams::single(SnComponent::new(mean, wide).unwrap()),
            &free,
            &grid,
            &data,
        )
        .unwrap();
        let g_narrow = grad_chol(
            0,
            &gamma,
            &MixtureParams::single(SnComponent::new(mean, narrow).unwrap()),
            &free,
            &grid,
            &data,
        )
        .unwrap();
        assert!(g_wide.m00 * g_narrow.m00 < 0.0);
    }

    #[test]
    fn fit_gmm_single_component_is_sample_mle() {
        let (field, grid) = free_scene(0.5);
        let params = MixtureParams::single(comp((10.0, 9.0), (1.3, 0.4, 0.9)));
        let data = sample(&params, &field, &grid, 500, 3).unwrap();
        let fit = fit_gmm(&data, 1, 9).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().fold(Vec2::zero(), |a, x| a + *x) / n;
        let mut scatter = Mat2::zero();
        for x in &data {
            let d = *x - mean;
            scatter = scatter.add_mat(d.outer(d));
        }
        scatter = scatter.scale(1.0 / n);
        assert_relative_eq!(fit.component(0).mu().x, mean.x, epsilon = 1e-9);
        assert_relative_eq!(fit.component(0).mu().y, mean.y, epsilon = 1e-9);
        assert_relative_eq!(fit.component(0).sigma().m00, scatter.m00, epsilon = 1e-6);
        assert_relative_eq!(fit.component(0).sigma().m10, scatter.m10, epsilon = 1e-6);
    }

    #[test]
    fn fit_gmm_recovers_separated_clusters() {
        let (field, grid) = free_scene(0.5);
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![comp((5.0, 5.0), (0.4, 0.0, 0.4)), comp((15.0, 15.0), (0.4, 0.0, 0.4))],
        )
        .unwrap();
        let data = sample(&params, &field, &grid, 600, 17).unwrap();
        let fit = fit_gmm(&data, 2, 23).unwrap();
        let mut mus: Vec<Vec2<f64>> = fit.components().iter().map(|c| c.mu()).collect();
        mus.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        assert!((mus[0] - Vec2::new(5.0, 5.0)).norm() < 0.1);
        assert!((mus[1] - Vec2::new(15.0, 15.0)).norm() < 0.1);
    }

    #[test]
    fn gmm_nll_never_worse_with_more_components() {
        let (_, _, data) = exp_a_data();
        let best_nll = |k: usize| {
            (0..3)
                .map(|r| {
                    let p = fit_gmm(&data, k, 31 + r).unwrap();
                    gaussian_mixture_nll(&data, &p).unwrap()
                })
                .fold(f64::INFINITY, f64::min)
        };
        assert!(best_nll(2) <= best_nll(1) + 1e-6);
    }

    #[test]
    fn fit_snmm_free_space_recovers_gaussian_mle() {
        let (field, grid) = free_scene(0.5);
        let truth = MixtureParams::single(comp((10.0, 9.0), (1.0, 0.2, 0.8)));
        let data = sample(&truth, &field, &grid, 400, 5).unwrap();
        let mut cfg = LearnConfig::<f64>::new(1, 77);
        cfg.outer_iters = 60;
        cfg.inner_iters = 40;
        cfg.grid_dx = 0.5;
        cfg.grid_dy = 0.5;
        let fit = fit_snmm(&data, &cfg, &field).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().fold(Vec2::zero(), |a, x| a + *x) / n;
        let mut scatter = Mat2::zero();
        for x in &data {
            let d = *x - mean;
            scatter = scatter.add_mat(d.outer(d));
        }
        scatter = scatter.scale(1.0 / n);
        let c = fit.params.component(0);
        assert!((c.mu() - mean).norm() < 1e-3, "mean off by {:?}", c.mu() - mean);
        assert!(c.sigma().sub_mat(scatter).norm() < 1e-3);
    }

    #[test]
    fn fit_snmm_nll_trace_is_monotone_within_tolerance() {
        let (field, _, data) = exp_a_data();
        let mut cfg = LearnConfig::<f64>::new(2, 1234);
        cfg.outer_iters = 25;
        let fit = fit_snmm(&data, &cfg, &field).unwrap();
        for w in fit.nll_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "trace increased: {} -> {}", w[0], w[1]);
        }
        // Weights stay on the simplex with the floor.
        let total: f64 = fit.params.weights().iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        for w in fit.params.weights() {
            assert!(*w >= WEIGHT_FLOOR * 0.5);
        }
        for c in fit.params.components() {
            assert!(c.sigma().is_spd(1e-9));
        }
    }

    #[test]
    fn fit_snmm_beats_gmm_nll_on_obstructed_data() {
        let (field, grid, data) = exp_a_data();
        let mut cfg = LearnConfig::<f64>::new(2, 1234);
        cfg.outer_iters = 40;
        let fit = fit_snmm(&data, &cfg, &field).unwrap();
        let snmm_nll = nll(&data, &fit.params, &field, &grid).unwrap();
        let gmm = fit_gmm(&data, 2, 1234).unwrap();
        let gmm_nll = gaussian_mixture_nll(&data, &gmm).unwrap();
        assert!(
            snmm_nll < gmm_nll,
            "skewed fit {snmm_nll} should beat plain GMM {gmm_nll}"
        );
    }
}
