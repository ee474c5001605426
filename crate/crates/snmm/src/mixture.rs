//! Occupancy-skewed normal mixtures: density evaluation, sampling, and the
//! integral functionals (normalizers, L2 distance, Cauchy-Schwarz
//! divergence) everything downstream is built on.
//!
//! A component's skewed density is `phi(x | mu, Sigma) Q(x) / Z` with
//! `Z = E_phi[Q]` taken over the workspace. When the obstacle list is empty
//! the normalizer is set to 1 analytically, so the family reduces to plain
//! Gaussians exactly.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::SkewField;
use crate::error::{Error, Result};
use crate::grid::{DensityField, QuadratureGrid};
use crate::linalg::{Mat2, Vec2};
use crate::scalar::{cast, Scalar};

/// Symmetry tolerance and minimum usable free-space mass.
const SYMMETRY_TOL: f64 = 1e-12;
const BLOCKED_FLOOR: f64 = 1e-6;
/// Rejection-sampling feasibility floor and retry budget.
const SAMPLE_MASS_FLOOR: f64 = 1e-3;
const MAX_REJECTIONS: usize = 100_000;

/// One mixture component: mean and SPD covariance, with derived quantities
/// precomputed at construction.
#[derive(Clone, Copy, Debug)]
pub struct SnComponent<S> {
    mu: Vec2<S>,
    sigma: Mat2<S>,
    inv_sigma: Mat2<S>,
    /// 1 / (2 pi sqrt(det Sigma)).
    norm_const: S,
    /// Lower Cholesky factor of Sigma (for sampling).
    chol: Mat2<S>,
}

impl<S: Scalar> SnComponent<S> {
    pub fn new(mu: Vec2<S>, sigma: Mat2<S>) -> Result<Self> {
        if sigma.asymmetry() > cast(SYMMETRY_TOL) {
            return Err(Error::InvalidParameter(format!(
                "covariance not symmetric (asymmetry {})",
                sigma.asymmetry()
            )));
        }
        let sigma = sigma.symmetrize();
        let (lo, _) = sigma.eigenvalues_sym();
        if lo <= S::zero() {
            return Err(Error::InvalidParameter(
                "covariance is not positive definite".into(),
            ));
        }
        let inv_sigma = sigma
            .inverse()
            .ok_or_else(|| Error::InvalidParameter("covariance is singular".into()))?;
        let det = sigma.det();
        let norm_const = (cast::<S>(TAU) * det.sqrt()).recip();
        let chol = sigma
            .cholesky_lower()
            .ok_or_else(|| Error::InvalidParameter("covariance has no Cholesky factor".into()))?;
        Ok(SnComponent {
            mu,
            sigma,
            inv_sigma,
            norm_const,
            chol,
        })
    }

    pub fn mu(&self) -> Vec2<S> {
        self.mu
    }

    pub fn sigma(&self) -> Mat2<S> {
        self.sigma
    }

    pub fn inv_sigma(&self) -> Mat2<S> {
        self.inv_sigma
    }

    /// Draw from the (unskewed) Gaussian.
    pub fn draw_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2<S> {
        let z = Vec2::new(S::std_normal(rng), S::std_normal(rng));
        self.mu + self.chol.mul_vec(z)
    }
}

/// Bivariate normal density of `comp` at `x`.
#[inline]
pub fn gaussian_pdf<S: Scalar>(x: Vec2<S>, comp: &SnComponent<S>) -> S {
    let d = x - comp.mu;
    let quad = d.dot(comp.inv_sigma.mul_vec(d));
    comp.norm_const * (-quad * cast::<S>(0.5)).exp()
}

/// Mixture weights plus components.
#[derive(Clone, Debug)]
pub struct MixtureParams<S> {
    weights: Vec<S>,
    components: Vec<SnComponent<S>>,
}

impl<S: Scalar> MixtureParams<S> {
    pub fn new(weights: Vec<S>, components: Vec<SnComponent<S>>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::InvalidParameter(
                "weights and components must be non-empty and equal length".into(),
            ));
        }
        let total: S = weights.iter().copied().sum();
        if (total - S::one()).abs() > cast(SYMMETRY_TOL) {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        if weights.iter().any(|w| *w <= S::zero()) {
            return Err(Error::InvalidParameter(
                "every mixture weight must be positive".into(),
            ));
        }
        Ok(MixtureParams {
            weights,
            components,
        })
    }

    pub fn single(component: SnComponent<S>) -> Self {
        MixtureParams {
            weights: vec![S::one()],
            components: vec![component],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn components(&self) -> &[SnComponent<S>] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &SnComponent<S> {
        &self.components[i]
    }

    /// Replace component `i`, keeping weights.
    pub fn with_component(&self, i: usize, component: SnComponent<S>) -> Self {
        let mut components = self.components.clone();
        components[i] = component;
        MixtureParams {
            weights: self.weights.clone(),
            components,
        }
    }
}

/// Raw occupancy-weighted Gaussian moments over the grid:
/// `mass = E[Q]`, `first = E[X Q]`, `second = E[(X-mu)(X-mu)^T Q]`,
/// all under the component's Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct ComponentMoments<S> {
    pub mass: S,
    pub first: Vec2<S>,
    pub second: Mat2<S>,
}

/// Compute the occupancy-weighted moments of one component.
///
/// With no obstacles the moments are analytic (`mass = 1`, `first = mu`,
/// `second = Sigma`); otherwise they are midpoint sums over the grid, which
/// keeps them exactly consistent with every other quadrature in the crate.
pub fn component_moments<S: Scalar>(
    comp: &SnComponent<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> ComponentMoments<S> {
    if field.is_unobstructed() {
        return ComponentMoments {
            mass: S::one(),
            first: comp.mu,
            second: comp.sigma,
        };
    }
    let mut mass = S::zero();
    let mut first = Vec2::zero();
    let mut second = Mat2::zero();
    for j in 0..grid.len() {
        if grid.q(j) > S::zero() {
            let p = grid.point(j);
            let w = gaussian_pdf(p, comp);
            mass += w;
            first += p * w;
            let d = p - comp.mu;
            second = second.add_mat(d.outer(d).scale(w));
        }
    }
    let area = grid.cell_area();
    ComponentMoments {
        mass: mass * area,
        first: first * area,
        second: second.scale(area),
    }
}

/// Shared cache of component moments keyed by the exact parameter bits.
///
/// Any parameter movement produces a new key, so entries are never stale;
/// readers take a shared lock, writers an exclusive one.
#[derive(Debug, Default)]
pub struct NormalizerCache<S> {
    map: RwLock<HashMap<[u64; 6], ComponentMoments<S>>>,
}

const CACHE_CAPACITY: usize = 200_000;

impl<S: Scalar> NormalizerCache<S> {
    pub fn new() -> Self {
        NormalizerCache {
            map: RwLock::new(HashMap::new()),
        }
    }

    fn key(comp: &SnComponent<S>) -> [u64; 6] {
        let b = |v: S| v.to_f64().unwrap_or(f64::NAN).to_bits();
        [
            b(comp.mu.x),
            b(comp.mu.y),
            b(comp.sigma.m00),
            b(comp.sigma.m01),
            b(comp.sigma.m10),
            b(comp.sigma.m11),
        ]
    }

    /// Fetch or compute the moments of `comp` on `(field, grid)`.
    pub fn moments(
        &self,
        comp: &SnComponent<S>,
        field: &SkewField<S>,
        grid: &QuadratureGrid<S>,
    ) -> ComponentMoments<S> {
        let key = Self::key(comp);
        if let Some(m) = self.map.read().expect("cache lock poisoned").get(&key) {
            return *m;
        }
        let m = component_moments(comp, field, grid);
        let mut map = self.map.write().expect("cache lock poisoned");
        if map.len() >= CACHE_CAPACITY {
            map.clear();
        }
        map.insert(key, m);
        m
    }
}

/// Free-space probability mass `E_phi[Q]` of one component, in `(0, 1]`.
///
/// Analytically 1 when there are no obstacles. Errors with
/// `ComponentBlocked` when the mass falls to or below 1e-6.
pub fn skew_normalizer<S: Scalar>(
    comp: &SnComponent<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let mass = component_moments(comp, field, grid).mass;
    check_mass(mass, 0)
}

fn check_mass<S: Scalar>(mass: S, component: usize) -> Result<S> {
    if mass <= cast(BLOCKED_FLOOR) {
        Err(Error::ComponentBlocked { component })
    } else {
        Ok(mass)
    }
}

/// Skewed component density at `x`.
pub fn brfsn_pdf<S: Scalar>(
    x: Vec2<S>,
    comp: &SnComponent<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    if field.is_unobstructed() {
        return Ok(gaussian_pdf(x, comp));
    }
    let z = skew_normalizer(comp, field, grid)?;
    if !field.workspace().contains(x) || !field.is_free_unchecked(x) {
        return Ok(S::zero());
    }
    Ok(gaussian_pdf(x, comp) / z)
}

/// Mixture density at `x`.
pub fn snmm_pdf<S: Scalar>(
    x: Vec2<S>,
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let eval = SnmmDensity::new(params, field, grid)?;
    Ok(eval.pdf(x))
}

/// Mixture evaluator with per-component normalizers resolved once.
pub struct SnmmDensity<'a, S> {
    params: &'a MixtureParams<S>,
    field: &'a SkewField<S>,
    normalizers: Vec<S>,
}

impl<'a, S: Scalar> SnmmDensity<'a, S> {
    pub fn new(
        params: &'a MixtureParams<S>,
        field: &'a SkewField<S>,
        grid: &QuadratureGrid<S>,
    ) -> Result<Self> {
        let mut normalizers = Vec::with_capacity(params.len());
        for (i, comp) in params.components().iter().enumerate() {
            let mass = component_moments(comp, field, grid).mass;
            normalizers.push(check_mass(mass, i)?);
        }
        Ok(SnmmDensity {
            params,
            field,
            normalizers,
        })
    }

    /// Like `new` but consulting (and filling) a moments cache.
    pub fn new_cached(
        params: &'a MixtureParams<S>,
        field: &'a SkewField<S>,
        grid: &QuadratureGrid<S>,
        cache: &NormalizerCache<S>,
    ) -> Result<Self> {
        let mut normalizers = Vec::with_capacity(params.len());
        for (i, comp) in params.components().iter().enumerate() {
            let mass = cache.moments(comp, field, grid).mass;
            normalizers.push(check_mass(mass, i)?);
        }
        Ok(SnmmDensity {
            params,
            field,
            normalizers,
        })
    }

    pub fn normalizers(&self) -> &[S] {
        &self.normalizers
    }

    pub fn params(&self) -> &MixtureParams<S> {
        self.params
    }

    /// Skewed density of component `i` at `x`.
    pub fn component_pdf(&self, i: usize, x: Vec2<S>) -> S {
        let comp = self.params.component(i);
        if self.field.is_unobstructed() {
            return gaussian_pdf(x, comp);
        }
        if !self.field.workspace().contains(x) || !self.field.is_free_unchecked(x) {
            return S::zero();
        }
        gaussian_pdf(x, comp) / self.normalizers[i]
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: Vec2<S>) -> S {
        if !self.field.is_unobstructed()
            && (!self.field.workspace().contains(x) || !self.field.is_free_unchecked(x))
        {
            return S::zero();
        }
        let mut acc = S::zero();
        for (i, w) in self.params.weights().iter().enumerate() {
            acc += *w * gaussian_pdf(x, self.params.component(i))
                / if self.field.is_unobstructed() {
                    S::one()
                } else {
                    self.normalizers[i]
                };
        }
        acc
    }

    /// Mixture density sampled on the grid.
    pub fn density_field(&self, grid: &QuadratureGrid<S>) -> DensityField<S> {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.len() {
            let p = grid.point(j);
            if !self.field.is_unobstructed() && grid.q(j) == S::zero() {
                values.push(S::zero());
                continue;
            }
            let mut acc = S::zero();
            for (i, w) in self.params.weights().iter().enumerate() {
                let z = if self.field.is_unobstructed() {
                    S::one()
                } else {
                    self.normalizers[i]
                };
                acc += *w * gaussian_pdf(p, self.params.component(i)) / z;
            }
            values.push(acc);
        }
        DensityField::new(grid.shape(), values).expect("values sized to grid")
    }

    /// Single skewed component sampled on the grid (unit weight).
    pub fn component_field(&self, i: usize, grid: &QuadratureGrid<S>) -> DensityField<S> {
        let comp = self.params.component(i);
        let z = if self.field.is_unobstructed() {
            S::one()
        } else {
            self.normalizers[i]
        };
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.len() {
            if !self.field.is_unobstructed() && grid.q(j) == S::zero() {
                values.push(S::zero());
            } else {
                values.push(gaussian_pdf(grid.point(j), comp) / z);
            }
        }
        DensityField::new(grid.shape(), values).expect("values sized to grid")
    }
}

/// Rejection-sample `count` points from the mixture.
///
/// Each point picks its component from the weights, then redraws the
/// Gaussian until the draw lands in free space (component kept fixed so the
/// weights stay those of the normalized mixture). Deterministic given the
/// seed.
pub fn sample<S: Scalar>(
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec2<S>>> {
    for (i, comp) in params.components().iter().enumerate() {
        let mass = component_moments(comp, field, grid).mass;
        if mass <= cast(SAMPLE_MASS_FLOOR) {
            return Err(Error::ComponentBlocked { component: i });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let u = S::unit_uniform(&mut rng);
        let mut acc = S::zero();
        let mut index = params.len() - 1;
        for (i, w) in params.weights().iter().enumerate() {
            acc += *w;
            if u < acc {
                index = i;
                break;
            }
        }
        let comp = params.component(index);
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let x = comp.draw_gaussian(&mut rng);
            let free = if field.is_unobstructed() {
                true
            } else {
                field.workspace().contains(x) && field.is_free_unchecked(x)
            };
            if free {
                accepted = Some(x);
                break;
            }
        }
        match accepted {
            Some(x) => points.push(x),
            None => return Err(Error::ComponentBlocked { component: index }),
        }
    }
    Ok(points)
}

/// Squared functional L2 distance between two fields on the same grid.
pub fn l2_distance_sq<S: Scalar>(p: &DensityField<S>, q: &DensityField<S>) -> Result<S> {
    if p.shape() != q.shape() {
        return Err(Error::GridMismatch);
    }
    let mut acc = S::zero();
    for (a, b) in p.values().iter().zip(q.values()) {
        let d = *a - *b;
        acc += d * d;
    }
    Ok(acc * p.shape().cell_area())
}

/// Grid inner product of two fields.
pub fn inner_product<S: Scalar>(p: &DensityField<S>, q: &DensityField<S>) -> Result<S> {
    if p.shape() != q.shape() {
        return Err(Error::GridMismatch);
    }
    let mut acc = S::zero();
    for (a, b) in p.values().iter().zip(q.values()) {
        acc += *a * *b;
    }
    Ok(acc * p.shape().cell_area())
}

/// Cauchy-Schwarz divergence between two fields on the same grid.
///
/// Non-negative by the Cauchy-Schwarz inequality on the grid inner product;
/// returns `+inf` when the fields do not overlap numerically.
pub fn cs_divergence<S: Scalar>(f1: &DensityField<S>, f2: &DensityField<S>) -> Result<S> {
    let ip11 = inner_product(f1, f1)?;
    let ip22 = inner_product(f2, f2)?;
    if ip11 <= S::zero() || ip22 <= S::zero() {
        return Err(Error::InvalidParameter(
            "CS divergence needs positive self-energies".into(),
        ));
    }
    let ip12 = inner_product(f1, f2)?;
    if ip12 <= S::zero() {
        return Ok(S::infinity());
    }
    Ok(-(ip12 / (ip11 * ip22).sqrt()).ln())
}
