//! Macroscopic distribution planning: a time-indexed sequence of mixture
//! parameters from the fitted initial distribution to the goal component,
//! produced either by displacement interpolation along the Gaussian
//! transport geodesic or by gradient descent on a potential.
//!
//! The potential-field planners descend
//! `U = gamma_SN * U_SN + gamma_CS * U_CS` (plus a gated repulsive term in
//! the Gaussian baseline mode) over the component means and the Cholesky
//! factors of the inverse covariances. Parameter gradients are central
//! finite differences of the quadrature potentials, so they are exactly the
//! gradients of what the trace reports.

use crate::env::SkewField;
use crate::error::{Error, Result};
use crate::grid::{DensityField, QuadratureGrid};
use crate::linalg::{Mat2, Vec2};
use crate::mixture::{
    cs_divergence, gaussian_pdf, l2_distance_sq, MixtureParams, SnComponent, SnmmDensity,
};
use crate::scalar::{cast, Scalar};

/// Desired terminal distribution: a single skewed-normal component.
#[derive(Clone, Copy, Debug)]
pub struct GoalSpec<S> {
    pub component: SnComponent<S>,
}

impl<S: Scalar> GoalSpec<S> {
    pub fn new(component: SnComponent<S>) -> Self {
        GoalSpec { component }
    }

    /// Check the goal keeps usable free-space mass on the scene.
    pub fn validate_on(&self, field: &SkewField<S>, grid: &QuadratureGrid<S>) -> Result<()> {
        let mass = crate::mixture::skew_normalizer(&self.component, field, grid)?;
        if mass <= cast(1e-3) {
            return Err(Error::InvalidParameter(format!(
                "goal free-space mass {mass} too small"
            )));
        }
        Ok(())
    }
}

/// Which planner produced a trajectory; the microscopic layer uses this to
/// rebuild target densities with the same semantics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannerKind {
    Di,
    SnmmApf,
    GmmApf,
}

impl PlannerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Di => "snmm-di",
            PlannerKind::SnmmApf => "snmm-apf",
            PlannerKind::GmmApf => "gmm-apf",
        }
    }
}

/// One plan frame: normalized time plus the mixture parameters.
#[derive(Clone, Debug)]
pub struct PlanFrame<S> {
    pub s: S,
    pub params: MixtureParams<S>,
}

/// A macroscopic plan from the initial distribution to the goal.
#[derive(Clone, Debug)]
pub struct PlanTrajectory<S> {
    pub frames: Vec<PlanFrame<S>>,
    pub kind: PlannerKind,
    pub success: bool,
    /// Total potential after every accepted step (empty for DI).
    pub potential_trace: Vec<S>,
    /// Optimization iterations run (DI: interpolation steps).
    pub steps: usize,
}

/// Potential-field planner configuration.
#[derive(Clone, Copy, Debug)]
pub struct ApfConfig<S> {
    pub gamma_sn: S,
    pub gamma_cs: S,
    pub max_steps: usize,
    /// Descent rate for component means.
    pub rate_mu: S,
    /// Descent rate for the inverse-covariance Cholesky factors.
    pub rate_chol: S,
    /// When positive: stop after `stall_patience` consecutive steps whose
    /// potential decrease stays below this threshold. Zero disables the
    /// stall exit so a stuck optimization runs its full budget.
    pub convergence_threshold: S,
    pub stall_patience: usize,
    /// Repulsive weight (Gaussian baseline mode only).
    pub gamma_rep: S,
    /// Tolerated probability mass over occupied space before the repulsive
    /// term switches on.
    pub eta: S,
}

impl<S: Scalar> Default for ApfConfig<S> {
    fn default() -> Self {
        ApfConfig {
            gamma_sn: S::one(),
            gamma_cs: cast(0.2),
            max_steps: 3000,
            rate_mu: cast(0.1),
            rate_chol: cast(0.01),
            convergence_threshold: S::zero(),
            stall_patience: 50,
            gamma_rep: S::one(),
            eta: cast(0.05),
        }
    }
}

impl<S: Scalar> ApfConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_sn < S::zero() || self.gamma_cs < S::zero() {
            return Err(Error::InvalidConfig("potential weights must be >= 0".into()));
        }
        if self.gamma_sn == S::zero() && self.gamma_cs == S::zero() {
            return Err(Error::InvalidConfig(
                "at least one potential weight must be positive".into(),
            ));
        }
        if self.eta < S::zero() || self.eta > S::one() {
            return Err(Error::InvalidConfig("eta must lie in [0, 1]".into()));
        }
        if self.rate_mu <= S::zero() || self.rate_chol <= S::zero() || self.max_steps == 0 {
            return Err(Error::InvalidConfig(
                "descent rates must be positive and max_steps at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Planner density semantics: the skewed mixture or the plain Gaussian
/// baseline (skewing function treated as identically 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannerMode {
    Snmm,
    Gmm,
}

/// Displacement interpolation between every initial component and the goal
/// along the Gaussian optimal-transport geodesic, on `steps + 1` uniformly
/// spaced normalized times. Weights stay fixed.
pub fn plan_di<S: Scalar>(
    initial: &MixtureParams<S>,
    goal: &GoalSpec<S>,
    steps: usize,
) -> Result<PlanTrajectory<S>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("need at least one interpolation step".into()));
    }
    let mut frames = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let s = cast::<S>(k as f64 / steps as f64);
        let mut comps = Vec::with_capacity(initial.len());
        for comp in initial.components() {
            comps.push(interpolate_component(comp, &goal.component, s)?);
        }
        frames.push(PlanFrame {
            s,
            params: MixtureParams::new(initial.weights().to_vec(), comps)?,
        });
    }
    Ok(PlanTrajectory {
        frames,
        kind: PlannerKind::Di,
        success: true,
        potential_trace: Vec::new(),
        steps,
    })
}

/// One point of the Gaussian transport geodesic:
/// `mu(s) = (1-s) mu_0 + s mu_f`,
/// `Sigma(s) = S0^{-1/2} [(1-s) S0 + s (S0^{1/2} Sf S0^{1/2})^{1/2}]^2 S0^{-1/2}`.
fn interpolate_component<S: Scalar>(
    from: &SnComponent<S>,
    to: &SnComponent<S>,
    s: S,
) -> Result<SnComponent<S>> {
    let one_minus = S::one() - s;
    let mu = from.mu() * one_minus + to.mu() * s;
    let s0 = from.sigma();
    let root = s0
        .sqrt_spd()
        .ok_or_else(|| Error::InvalidParameter("initial covariance not SPD".into()))?;
    let inv_root = root
        .inverse()
        .ok_or_else(|| Error::InvalidParameter("initial covariance singular".into()))?;
    let middle = root
        .mul_mat(to.sigma())
        .mul_mat(root)
        .symmetrize()
        .sqrt_spd()
        .ok_or_else(|| Error::InvalidParameter("goal covariance not SPD".into()))?;
    let blend = s0.scale(one_minus).add_mat(middle.scale(s));
    let sigma = inv_root
        .mul_mat(blend.mul_mat(blend))
        .mul_mat(inv_root)
        .symmetrize();
    SnComponent::new(mu, sigma)
}

/// Log-L2 attraction potential `0.5 ln || mixture - goal ||^2`; negative
/// infinity signals an exact match (converged).
pub fn potential_sn<S: Scalar>(
    params: &MixtureParams<S>,
    goal: &GoalSpec<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let current = SnmmDensity::new(params, field, grid)?.density_field(grid);
    let goal_params = MixtureParams::single(goal.component);
    let goal_field = SnmmDensity::new(&goal_params, field, grid)?.density_field(grid);
    let d2 = l2_distance_sq(&current, &goal_field)?;
    Ok(if d2 <= S::zero() {
        S::neg_infinity()
    } else {
        d2.ln() * cast(0.5)
    })
}

/// Weighted per-component Cauchy-Schwarz divergence to the goal.
pub fn potential_cs<S: Scalar>(
    params: &MixtureParams<S>,
    goal: &GoalSpec<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<S> {
    let eval = SnmmDensity::new(params, field, grid)?;
    let goal_params = MixtureParams::single(goal.component);
    let goal_field = SnmmDensity::new(&goal_params, field, grid)?.density_field(grid);
    let mut acc = S::zero();
    for (i, w) in params.weights().iter().enumerate() {
        let f_i = eval.component_field(i, grid);
        acc += *w * cs_divergence(&f_i, &goal_field)?;
    }
    Ok(acc)
}

/// Probability mass of the plain Gaussian mixture over occupied space:
/// `integral of phi(x) (1 - Q(x))`. Zero exactly when the scene is free.
pub fn repulsive_potential<S: Scalar>(
    params: &MixtureParams<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> S {
    if field.is_unobstructed() {
        return S::zero();
    }
    let mut acc = S::zero();
    for j in 0..grid.len() {
        if grid.q(j) == S::zero() {
            let p = grid.point(j);
            let mut v = S::zero();
            for (i, w) in params.weights().iter().enumerate() {
                v += *w * gaussian_pdf(p, params.component(i));
            }
            acc += v;
        }
    }
    acc * grid.cell_area()
}

/// Finite-difference step for the potential gradients (means in meters,
/// Cholesky entries dimensionless).
const FD_STEP: f64 = 1e-4;
const MAX_HALVINGS: usize = 10;
/// Accepted steps may not raise the potential beyond this.
const ASCENT_TOL: f64 = 1e-9;
/// Success threshold: L2 error energy at most this fraction of the goal
/// self-energy.
const SUCCESS_ENERGY_FRACTION: f64 = 0.01;
/// Planner covariance eigenvalue band. The log-scale potentials reward
/// inflating a component into a near-flat sheet (it erases the mixture's
/// self-energy without transporting mass), which is a plateau the descent
/// cannot leave; projecting the step onto this band keeps the components
/// distribution-sized.
const PLAN_EIG_FLOOR: f64 = 1e-4;
const PLAN_EIG_CAP: f64 = 1.44;
/// Per-step trust caps. The covariance gradient can run two orders of
/// magnitude hotter than the mean gradient; capping each block separately
/// keeps one shared line-search scale usable. The mean cap also bounds the
/// frame-to-frame displacement to what the microscopic layer can track.
const MU_STEP_CAP: f64 = 0.012;
const CHOL_STEP_CAP: f64 = 0.02;

/// Gradient-descent planner over the component means and inverse-covariance
/// Cholesky factors. Every accepted step becomes one plan frame; the run
/// succeeds when `U_SN` falls to the goal-energy threshold.
pub fn plan_apf<S: Scalar>(
    initial: &MixtureParams<S>,
    goal: &GoalSpec<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    cfg: &ApfConfig<S>,
    mode: PlannerMode,
) -> Result<PlanTrajectory<S>> {
    cfg.validate()?;
    let goal_ctx = GoalContext::new(goal, field, grid, mode)?;
    let mut state = ApfState::new(initial.clone(), &goal_ctx, field, grid, cfg, mode)?;
    let mut frames = vec![PlanFrame {
        s: S::zero(),
        params: initial.clone(),
    }];
    let mut trace = vec![state.total_potential()];
    let mut success = false;
    let mut steps = 0usize;
    let mut stall = 0usize;
    // Warm-started line-search scale: begin each step where the previous
    // one succeeded (doubled, capped at the configured rates).
    let mut warm_scale = S::one();

    for _ in 0..cfg.max_steps {
        if state.u_sn <= state.success_threshold {
            success = true;
            break;
        }
        steps += 1;
        let base_potential = state.total_potential();
        let gradients = state.all_gradients();
        let mut accepted = false;
        let mut rate_scale = warm_scale;
        for _ in 0..=MAX_HALVINGS {
            let candidate = state.stepped_params(&gradients, rate_scale);
            if let Some(candidate) = candidate {
                if let Ok(next) = ApfState::new(candidate, &goal_ctx, field, grid, cfg, mode) {
                    if next.total_potential() <= base_potential + cast(ASCENT_TOL) {
                        let decrease = base_potential - next.total_potential();
                        state = next;
                        frames.push(PlanFrame {
                            s: S::zero(),
                            params: state.params.clone(),
                        });
                        trace.push(state.total_potential());
                        accepted = true;
                        warm_scale = (rate_scale + rate_scale).min(S::one());
                        if cfg.convergence_threshold > S::zero() {
                            if decrease < cfg.convergence_threshold {
                                stall += 1;
                            } else {
                                stall = 0;
                            }
                        }
                        break;
                    }
                }
            }
            rate_scale = rate_scale * cast(0.5);
        }
        if !accepted {
            warm_scale = (warm_scale * cast(0.5)).max(cast(1e-12));
            if cfg.convergence_threshold > S::zero() {
                stall += 1;
            }
        }
        if cfg.convergence_threshold > S::zero() && stall >= cfg.stall_patience {
            break;
        }
    }
    if !success {
        success = state.u_sn <= state.success_threshold;
    }

    // Normalize frame times to [0, 1].
    if frames.len() == 1 {
        frames.push(frames[0].clone());
    }
    let last = frames.len() - 1;
    for (k, frame) in frames.iter_mut().enumerate() {
        frame.s = cast::<S>(k as f64 / last as f64);
    }
    Ok(PlanTrajectory {
        frames,
        kind: match mode {
            PlannerMode::Snmm => PlannerKind::SnmmApf,
            PlannerMode::Gmm => PlannerKind::GmmApf,
        },
        success,
        potential_trace: trace,
        steps,
    })
}

/// Gradients of the total potential for one component.
struct ComponentGradient<S> {
    mu: Vec2<S>,
    chol: Mat2<S>,
}

/// Goal field under the planner semantics, computed once per plan.
struct GoalContext<S> {
    values: Vec<S>,
    self_energy: S,
    success_threshold: S,
}

impl<S: Scalar> GoalContext<S> {
    fn new(
        goal: &GoalSpec<S>,
        field: &SkewField<S>,
        grid: &QuadratureGrid<S>,
        mode: PlannerMode,
    ) -> Result<Self> {
        let values = match mode {
            PlannerMode::Snmm => {
                let goal_params = MixtureParams::single(goal.component);
                SnmmDensity::new(&goal_params, field, grid)?
                    .density_field(grid)
                    .values()
                    .to_vec()
            }
            PlannerMode::Gmm => (0..grid.len())
                .map(|j| gaussian_pdf(grid.point(j), &goal.component))
                .collect(),
        };
        let self_energy = dot(&values, &values) * grid.cell_area();
        if self_energy <= S::zero() {
            return Err(Error::InvalidParameter("goal field has no energy".into()));
        }
        let success_threshold =
            (self_energy * cast(SUCCESS_ENERGY_FRACTION)).ln() * cast(0.5);
        Ok(GoalContext {
            values,
            self_energy,
            success_threshold,
        })
    }
}

/// Potential evaluation state: per-component fields on the grid plus the
/// derived inner products, rebuilt incrementally during finite differences.
struct ApfState<'a, S> {
    params: MixtureParams<S>,
    field: &'a SkewField<S>,
    grid: &'a QuadratureGrid<S>,
    cfg: &'a ApfConfig<S>,
    mode: PlannerMode,
    /// Per-component density values on the grid (mode semantics).
    comp_values: Vec<Vec<S>>,
    /// Mixture density values.
    mix: Vec<S>,
    goal_values: Vec<S>,
    goal_self: S,
    success_threshold: S,
    u_sn: S,
    /// Per-component CS divergence to the goal.
    comp_cs: Vec<S>,
    /// Mass over occupied space (Gaussian baseline mode).
    u_rep: S,
}

impl<'a, S: Scalar> ApfState<'a, S> {
    fn new(
        params: MixtureParams<S>,
        goal: &GoalContext<S>,
        field: &'a SkewField<S>,
        grid: &'a QuadratureGrid<S>,
        cfg: &'a ApfConfig<S>,
        mode: PlannerMode,
    ) -> Result<Self> {
        let goal_values = goal.values.clone();
        let goal_self = goal.self_energy;
        let success_threshold = goal.success_threshold;
        let mut comp_values = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            comp_values.push(component_values(params.component(i), field, grid, mode, i)?);
        }
        let mut mix = vec![S::zero(); grid.len()];
        for (i, w) in params.weights().iter().enumerate() {
            for (m, v) in mix.iter_mut().zip(&comp_values[i]) {
                *m += *w * *v;
            }
        }
        let mut state = ApfState {
            params,
            field,
            grid,
            cfg,
            mode,
            comp_values,
            mix,
            goal_values,
            goal_self,
            success_threshold,
            u_sn: S::zero(),
            comp_cs: Vec::new(),
            u_rep: S::zero(),
        };
        state.refresh_potentials()?;
        Ok(state)
    }

    fn refresh_potentials(&mut self) -> Result<()> {
        let area = self.grid.cell_area();
        let mut d2 = S::zero();
        for (m, g) in self.mix.iter().zip(&self.goal_values) {
            let e = *m - *g;
            d2 += e * e;
        }
        d2 = d2 * area;
        self.u_sn = if d2 <= S::zero() {
            S::neg_infinity()
        } else {
            d2.ln() * cast(0.5)
        };
        self.comp_cs = (0..self.params.len())
            .map(|i| {
                let f = &self.comp_values[i];
                let self_e = dot(f, f) * area;
                let cross = dot(f, &self.goal_values) * area;
                cs_from_products(cross, self_e, self.goal_self)
            })
            .collect();
        self.u_rep = if self.mode == PlannerMode::Gmm {
            let mut acc = S::zero();
            for j in 0..self.grid.len() {
                if self.grid.q(j) == S::zero() {
                    acc += self.mix[j];
                }
            }
            acc * area
        } else {
            S::zero()
        };
        Ok(())
    }

    fn u_cs(&self) -> S {
        self.params
            .weights()
            .iter()
            .zip(&self.comp_cs)
            .map(|(w, d)| *w * *d)
            .sum()
    }

    /// Gated repulsive barrier: zero at or below the tolerance, and above
    /// it `gamma_rep * ln(u_rep / eta)`. Inside the active set this has the
    /// same gradient as the raw `ln` barrier (the offset is constant), but
    /// it meets the gate continuously, so a monotone line search can leave
    /// the repulsion zone.
    fn repulsive_term(&self, u_rep: S) -> S {
        if self.mode == PlannerMode::Gmm && u_rep > self.cfg.eta {
            self.cfg.gamma_rep * (u_rep / self.cfg.eta).ln()
        } else {
            S::zero()
        }
    }

    fn total_potential(&self) -> S {
        self.cfg.gamma_sn * self.u_sn + self.cfg.gamma_cs * self.u_cs()
            + self.repulsive_term(self.u_rep)
    }

    /// Total potential when component `i` is replaced by `cand`; the other
    /// components keep their cached fields and divergences.
    fn potential_with_component(&self, i: usize, cand: &SnComponent<S>) -> Result<S> {
        let area = self.grid.cell_area();
        let values = component_values(cand, self.field, self.grid, self.mode, i)?;
        let w_i = self.params.weights()[i];
        let old = &self.comp_values[i];
        let mut d2 = S::zero();
        let mut self_e = S::zero();
        let mut cross = S::zero();
        let mut rep = S::zero();
        let track_rep = self.mode == PlannerMode::Gmm && !self.field.is_unobstructed();
        for j in 0..values.len() {
            let f = values[j];
            let m = self.mix[j] + w_i * (f - old[j]);
            let e = m - self.goal_values[j];
            d2 += e * e;
            self_e += f * f;
            cross += f * self.goal_values[j];
            if track_rep && self.grid.q(j) == S::zero() {
                rep += m;
            }
        }
        d2 = d2 * area;
        let u_sn = if d2 <= S::zero() {
            S::neg_infinity()
        } else {
            d2.ln() * cast(0.5)
        };
        let cs_i = cs_from_products(cross * area, self_e * area, self.goal_self);
        let mut u_cs = S::zero();
        for (k, w) in self.params.weights().iter().enumerate() {
            u_cs += *w * if k == i { cs_i } else { self.comp_cs[k] };
        }
        Ok(self.cfg.gamma_sn * u_sn + self.cfg.gamma_cs * u_cs + self.repulsive_term(rep * area))
    }

    /// Central finite differences of the total potential for component `i`.
    ///
    /// The repulsive term is gated by the indicator at the base point, so
    /// below tolerance it contributes exactly zero to the gradient.
    fn gradient(&self, i: usize) -> Result<ComponentGradient<S>> {
        let comp = *self.params.component(i);
        let h = cast::<S>(FD_STEP);
        let two_h = h + h;
        let mut mu = Vec2::zero();
        for axis in 0..2 {
            let delta = if axis == 0 {
                Vec2::new(h, S::zero())
            } else {
                Vec2::new(S::zero(), h)
            };
            let plus = SnComponent::new(comp.mu() + delta, comp.sigma())?;
            let minus = SnComponent::new(comp.mu() - delta, comp.sigma())?;
            let d = (self.potential_with_component(i, &plus)?
                - self.potential_with_component(i, &minus)?)
                / two_h;
            if axis == 0 {
                mu.x = d;
            } else {
                mu.y = d;
            }
        }
        let l = comp
            .inv_sigma()
            .cholesky_lower()
            .ok_or_else(|| Error::InvalidParameter("inverse covariance not SPD".into()))?;
        let mut chol = Mat2::zero();
        for entry in 0..3 {
            let mut plus = l;
            let mut minus = l;
            match entry {
                0 => {
                    plus.m00 += h;
                    minus.m00 -= h;
                }
                1 => {
                    plus.m10 += h;
                    minus.m10 -= h;
                }
                _ => {
                    plus.m11 += h;
                    minus.m11 -= h;
                }
            }
            let d = (self.potential_with_component(i, &component_from_chol(comp.mu(), plus)?)?
                - self.potential_with_component(i, &component_from_chol(comp.mu(), minus)?)?)
                / two_h;
            match entry {
                0 => chol.m00 = d,
                1 => chol.m10 = d,
                _ => chol.m11 = d,
            }
        }
        Ok(ComponentGradient { mu, chol })
    }

    fn all_gradients(&self) -> Vec<ComponentGradient<S>> {
        (0..self.params.len())
            .map(|i| {
                self.gradient(i).unwrap_or(ComponentGradient {
                    mu: Vec2::zero(),
                    chol: Mat2::zero(),
                })
            })
            .collect()
    }

    /// All components stepped against their gradients at `scale` times the
    /// configured rates, projected onto the planner eigenvalue band;
    /// `None` when a step leaves the SPD cone.
    fn stepped_params(
        &self,
        gradients: &[ComponentGradient<S>],
        scale: S,
    ) -> Option<MixtureParams<S>> {
        let mut comps = Vec::with_capacity(self.params.len());
        for (i, g) in gradients.iter().enumerate() {
            let comp = self.params.component(i);
            let mu_step = (g.mu * self.cfg.rate_mu).clamp_norm(cast(MU_STEP_CAP)) * scale;
            let mu = comp.mu() - mu_step;
            let l = comp.inv_sigma().cholesky_lower()?;
            let mut l_step = g.chol.scale(self.cfg.rate_chol);
            let l_norm = l_step.norm();
            if l_norm > cast(CHOL_STEP_CAP) {
                l_step = l_step.scale(cast::<S>(CHOL_STEP_CAP) / l_norm);
            }
            let stepped = l.sub_mat(l_step.scale(scale));
            if stepped.m00 <= S::zero() || stepped.m11 <= S::zero() {
                return None;
            }
            let sigma = stepped
                .mul_mat(stepped.transpose())
                .inverse()?
                .symmetrize();
            let (lo, hi) = sigma.eigenvalues_sym();
            let sigma = if lo < cast(PLAN_EIG_FLOOR) || hi > cast(PLAN_EIG_CAP) {
                let ((l0, l1), r) = sigma.eigen_sym();
                let clamp =
                    |v: S| v.max(cast(PLAN_EIG_FLOOR)).min(cast(PLAN_EIG_CAP));
                r.mul_mat(Mat2::diagonal(clamp(l0), clamp(l1)))
                    .mul_mat(r.transpose())
                    .symmetrize()
            } else {
                sigma
            };
            comps.push(SnComponent::new(mu, sigma).ok()?);
        }
        MixtureParams::new(self.params.weights().to_vec(), comps).ok()
    }
}

fn component_from_chol<S: Scalar>(mu: Vec2<S>, l: Mat2<S>) -> Result<SnComponent<S>> {
    let sigma = l
        .mul_mat(l.transpose())
        .inverse()
        .ok_or_else(|| Error::InvalidParameter("Cholesky factor singular".into()))?
        .symmetrize();
    SnComponent::new(mu, sigma)
}

/// Density values of one component on the grid under the mode semantics.
fn component_values<S: Scalar>(
    comp: &SnComponent<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    mode: PlannerMode,
    index: usize,
) -> Result<Vec<S>> {
    match mode {
        PlannerMode::Gmm => Ok((0..grid.len())
            .map(|j| gaussian_pdf(grid.point(j), comp))
            .collect()),
        PlannerMode::Snmm => {
            if field.is_unobstructed() {
                return Ok((0..grid.len())
                    .map(|j| gaussian_pdf(grid.point(j), comp))
                    .collect());
            }
            let mut raw = Vec::with_capacity(grid.len());
            let mut mass = S::zero();
            for j in 0..grid.len() {
                if grid.q(j) > S::zero() {
                    let v = gaussian_pdf(grid.point(j), comp);
                    mass += v;
                    raw.push(v);
                } else {
                    raw.push(S::zero());
                }
            }
            mass = mass * grid.cell_area();
            if mass <= cast(1e-6) {
                return Err(Error::ComponentBlocked { component: index });
            }
            for v in &mut raw {
                *v = *v / mass;
            }
            Ok(raw)
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn cs_from_products<S: Scalar>(cross: S, self_a: S, self_b: S) -> S {
    if cross <= S::zero() {
        S::infinity()
    } else {
        -(cross / (self_a * self_b).sqrt()).ln()
    }
}

/// Goal density field under the planner semantics (used by the simulator
/// to build per-frame targets consistently with the plan).
pub fn frame_density<S: Scalar>(
    params: &MixtureParams<S>,
    kind: PlannerKind,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<DensityField<S>> {
    match kind {
        PlannerKind::GmmApf => {
            let values = (0..grid.len())
                .map(|j| {
                    let p = grid.point(j);
                    params
                        .weights()
                        .iter()
                        .enumerate()
                        .map(|(i, w)| *w * gaussian_pdf(p, params.component(i)))
                        .sum()
                })
                .collect();
            DensityField::new(grid.shape(), values)
        }
        _ => Ok(SnmmDensity::new(params, field, grid)?.density_field(grid)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Obstacle, Workspace};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn comp(mu: (f64, f64), s: (f64, f64, f64)) -> SnComponent<f64> {
        SnComponent::new(Vec2::new(mu.0, mu.1), Mat2::symmetric(s.0, s.1, s.2)).unwrap()
    }

    fn free_scene(dx: f64) -> (SkewField<f64>, QuadratureGrid<f64>) {
        let ws = Workspace::standard();
        let field = SkewField::free(ws);
        let grid = QuadratureGrid::build(&ws, dx, dx, &field).unwrap();
        (field, grid)
    }

    fn obstructed_scene(dx: f64) -> (SkewField<f64>, QuadratureGrid<f64>) {
        let ws = Workspace::standard();
        let field = SkewField::new(
            ws,
            vec![
                Obstacle::Circle {
                    center: Vec2::new(10.0, 11.0),
                    radius: 1.0,
                },
                Obstacle::Circle {
                    center: Vec2::new(9.0, 7.5),
                    radius: 0.8,
                },
            ],
        )
        .unwrap();
        let grid = QuadratureGrid::build(&ws, dx, dx, &field).unwrap();
        (field, grid)
    }

    fn two_component_params() -> MixtureParams<f64> {
        MixtureParams::new(
            vec![0.6, 0.4],
            vec![comp((6.0, 12.0), (1.0, 0.2, 0.8)), comp((6.5, 8.0), (0.9, -0.1, 1.1))],
        )
        .unwrap()
    }

    #[test]
    fn di_endpoints_are_exact() {
        let initial = two_component_params();
        let goal = GoalSpec::new(comp((14.0, 10.0), (1.5, 0.3, 1.2)));
        let plan = plan_di(&initial, &goal, 10).unwrap();
        assert_eq!(plan.frames.len(), 11);
        assert_eq!(plan.frames[0].s, 0.0);
        assert_eq!(plan.frames[10].s, 1.0);
        for i in 0..2 {
            let first = plan.frames[0].params.component(i);
            let last = plan.frames[10].params.component(i);
            assert!((first.mu() - initial.component(i).mu()).norm() < 1e-10);
            assert!(first.sigma().sub_mat(initial.component(i).sigma()).norm() < 1e-10);
            assert!((last.mu() - goal.component.mu()).norm() < 1e-10);
            assert!(last.sigma().sub_mat(goal.component.sigma()).norm() < 1e-10);
        }
    }

    #[test]
    fn di_equal_covariances_are_a_fixed_point() {
        let sigma = (1.0, 0.25, 0.9);
        let initial = MixtureParams::single(comp((4.0, 4.0), sigma));
        let goal = GoalSpec::new(comp((16.0, 16.0), sigma));
        let plan = plan_di(&initial, &goal, 8).unwrap();
        for frame in &plan.frames {
            let s = frame.params.component(0).sigma();
            assert!(s.sub_mat(Mat2::symmetric(sigma.0, sigma.1, sigma.2)).norm() < 1e-10);
        }
    }

    #[test]
    fn di_isotropic_midpoint_closed_form() {
        // I -> 4I: the geodesic scalar is ((1-s) + 2s)^2 = 2.25 at s = 1/2.
        let initial = MixtureParams::single(comp((5.0, 5.0), (1.0, 0.0, 1.0)));
        let goal = GoalSpec::new(comp((15.0, 15.0), (4.0, 0.0, 4.0)));
        let plan = plan_di(&initial, &goal, 2).unwrap();
        let mid = plan.frames[1].params.component(0).sigma();
        assert!(mid.sub_mat(Mat2::scaled_identity(2.25)).norm() < 1e-10);
    }

    #[test]
    fn di_mean_path_commutes_with_time_reversal() {
        let initial = two_component_params();
        let goal = GoalSpec::new(comp((14.0, 10.0), (1.5, 0.3, 1.2)));
        let forward = plan_di(&initial, &goal, 6).unwrap();
        // Reverse: from a single-component mixture at the goal, back toward
        // each initial component in turn.
        for i in 0..initial.len() {
            let back_initial = MixtureParams::single(goal.component);
            let back_goal = GoalSpec::new(*initial.component(i));
            let backward = plan_di(&back_initial, &back_goal, 6).unwrap();
            for k in 0..=6 {
                let fwd = forward.frames[k].params.component(i).mu();
                let bwd = backward.frames[6 - k].params.component(0).mu();
                assert!((fwd - bwd).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn potential_sn_negative_infinite_at_goal() {
        let (field, grid) = free_scene(0.1);
        let goal = GoalSpec::new(comp((10.0, 10.0), (1.0, 0.0, 1.0)));
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![goal.component, goal.component],
        )
        .unwrap();
        let u = potential_sn(&params, &goal, &field, &grid).unwrap();
        assert_eq!(u, f64::NEG_INFINITY);
    }

    #[test]
    fn potential_sn_grows_with_separation() {
        let (field, grid) = free_scene(0.1);
        let goal = GoalSpec::new(comp((8.0, 10.0), (1.0, 0.0, 1.0)));
        let near = MixtureParams::single(comp((9.0, 10.0), (1.0, 0.0, 1.0)));
        let far = MixtureParams::single(comp((13.0, 10.0), (1.0, 0.0, 1.0)));
        let u_near = potential_sn(&near, &goal, &field, &grid).unwrap();
        let u_far = potential_sn(&far, &goal, &field, &grid).unwrap();
        assert!(u_far > u_near);
    }

    #[test]
    fn potential_sn_invariant_under_relabeling() {
        let (field, grid) = free_scene(0.1);
        let goal = GoalSpec::new(comp((12.0, 12.0), (1.0, 0.0, 1.0)));
        let a = two_component_params();
        let b = MixtureParams::new(
            vec![0.4, 0.6],
            vec![*a.component(1), *a.component(0)],
        )
        .unwrap();
        assert_relative_eq!(
            potential_sn(&a, &goal, &field, &grid).unwrap(),
            potential_sn(&b, &goal, &field, &grid).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn potential_cs_zero_at_goal_and_weight_linear() {
        let (field, grid) = free_scene(0.1);
        let goal = GoalSpec::new(comp((10.0, 10.0), (1.0, 0.0, 1.0)));
        let at_goal = MixtureParams::new(
            vec![0.5, 0.5],
            vec![goal.component, goal.component],
        )
        .unwrap();
        let u = potential_cs(&at_goal, &goal, &field, &grid).unwrap();
        assert!(u.abs() < 1e-9);

        // Per-component divergences weight linearly.
        let c0 = comp((7.0, 10.0), (1.0, 0.0, 1.0));
        let c1 = comp((13.0, 10.0), (1.0, 0.0, 1.0));
        let p1 = MixtureParams::new(vec![0.25, 0.75], vec![c0, c1]).unwrap();
        let p2 = MixtureParams::new(vec![0.5, 0.5], vec![c0, c1]).unwrap();
        let d0 = potential_cs(&MixtureParams::single(c0), &goal, &field, &grid).unwrap();
        let d1 = potential_cs(&MixtureParams::single(c1), &goal, &field, &grid).unwrap();
        assert_relative_eq!(
            potential_cs(&p1, &goal, &field, &grid).unwrap(),
            0.25 * d0 + 0.75 * d1,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            potential_cs(&p2, &goal, &field, &grid).unwrap(),
            0.5 * d0 + 0.5 * d1,
            epsilon = 1e-9
        );
    }

    #[test]
    fn repulsive_potential_zero_when_free_and_near_one_when_covered() {
        let (free_field, free_grid) = free_scene(0.1);
        let params = MixtureParams::single(comp((10.0, 10.0), (0.25, 0.0, 0.25)));
        assert_eq!(repulsive_potential(&params, &free_field, &free_grid), 0.0);

        // Obstacle swallowing nearly all the density's mass.
        let ws = Workspace::standard();
        let field = SkewField::new(
            ws,
            vec![Obstacle::Circle {
                center: Vec2::new(10.0, 10.0),
                radius: 5.0,
            }],
        )
        .unwrap();
        let grid = QuadratureGrid::build(&ws, 0.1, 0.1, &field).unwrap();
        let rep = repulsive_potential(&params, &field, &grid);
        assert!(rep > 0.99 && rep <= 1.01, "mass over obstacle: {rep}");
    }

    #[test]
    fn repulsive_potential_matches_fine_grid_oracle() {
        let ws = Workspace::standard();
        let field =
            SkewField::new(ws, vec![Obstacle::rectangle(7.0, 11.0, 9.0, 10.0)]).unwrap();
        let grid = QuadratureGrid::build(&ws, 0.1, 0.1, &field).unwrap();
        let params = MixtureParams::single(comp((9.0, 12.0), (1.0, 0.3, 0.7)));
        let rep = repulsive_potential(&params, &field, &grid);

        // Independent fine lattice at h = 0.02.
        let h = 0.02;
        let n = (20.0 / h) as usize;
        let mut oracle = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let p = Vec2::new((ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h);
                if !field.is_free_unchecked(p) {
                    oracle += gaussian_pdf(p, params.component(0));
                }
            }
        }
        oracle *= h * h;
        assert!((rep - oracle).abs() < 1e-3, "grid {rep} vs oracle {oracle}");
    }

    #[test]
    fn apf_terminates_immediately_at_goal() {
        let (field, grid) = free_scene(0.1);
        let goal = GoalSpec::new(comp((10.0, 10.0), (1.0, 0.0, 1.0)));
        let initial = MixtureParams::new(
            vec![0.5, 0.5],
            vec![goal.component, goal.component],
        )
        .unwrap();
        let cfg = ApfConfig::default();
        let plan = plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Snmm).unwrap();
        assert!(plan.success);
        assert!(plan.steps <= 1);
        assert_eq!(plan.frames.first().unwrap().s, 0.0);
        assert_eq!(plan.frames.last().unwrap().s, 1.0);
    }

    #[test]
    fn apf_modes_agree_without_obstacles() {
        // With no obstacles the repulsive mass is zero and both modes
        // descend the identical potential.
        let (field, grid) = free_scene(0.2);
        let goal = GoalSpec::new(comp((12.0, 10.0), (1.0, 0.0, 1.0)));
        let initial = MixtureParams::single(comp((8.0, 10.0), (1.0, 0.0, 1.0)));
        let mut cfg = ApfConfig::default();
        cfg.max_steps = 40;
        let snmm = plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Snmm).unwrap();
        let gmm = plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Gmm).unwrap();
        assert_eq!(snmm.frames.len(), gmm.frames.len());
        for (a, b) in snmm.frames.iter().zip(&gmm.frames) {
            let da = a.params.component(0).mu() - b.params.component(0).mu();
            assert!(da.norm() < 1e-12);
        }
        for (a, b) in snmm.potential_trace.iter().zip(&gmm.potential_trace) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn apf_potential_trace_is_monotone() {
        let (field, grid) = obstructed_scene(0.2);
        let goal = GoalSpec::new(comp((15.0, 10.0), (1.2, 0.0, 1.2)));
        let initial = two_component_params();
        let mut cfg = ApfConfig::default();
        cfg.max_steps = 60;
        let plan = plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Snmm).unwrap();
        for w in plan.potential_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace rose {} -> {}", w[0], w[1]);
        }
        assert!(plan.frames.len() >= 2);
        for frame in &plan.frames {
            for c in frame.params.components() {
                assert!(c.sigma().is_spd(1e-9));
            }
        }
    }

    #[test]
    fn apf_internal_gradients_match_public_potentials() {
        // The incremental finite-difference path must equal finite
        // differences taken over the public potential functions.
        let (field, grid) = obstructed_scene(0.2);
        let goal = GoalSpec::new(comp((15.0, 10.0), (1.2, 0.1, 1.2)));
        let params = two_component_params();
        let cfg = ApfConfig::default();
        let goal_ctx = GoalContext::new(&goal, &field, &grid, PlannerMode::Snmm).unwrap();
        let state =
            ApfState::new(params.clone(), &goal_ctx, &field, &grid, &cfg, PlannerMode::Snmm)
                .unwrap();
        let h = FD_STEP;
        for i in 0..params.len() {
            let g = state.gradient(i).unwrap();
            let public = |p: &MixtureParams<f64>| {
                cfg.gamma_sn * potential_sn(p, &goal, &field, &grid).unwrap()
                    + cfg.gamma_cs * potential_cs(p, &goal, &field, &grid).unwrap()
            };
            for axis in 0..2 {
                let delta = if axis == 0 {
                    Vec2::new(h, 0.0)
                } else {
                    Vec2::new(0.0, h)
                };
                let c = params.component(i);
                let plus = params.with_component(
                    i,
                    SnComponent::new(c.mu() + delta, c.sigma()).unwrap(),
                );
                let minus = params.with_component(
                    i,
                    SnComponent::new(c.mu() - delta, c.sigma()).unwrap(),
                );
                let fd = (public(&plus) - public(&minus)) / (2.0 * h);
                let got = if axis == 0 { g.mu.x } else { g.mu.y };
                let rel = (got - fd).abs() / fd.abs().max(1e-12);
                assert!(rel < 1e-4, "component {i} axis {axis}: rel {rel}");
            }
        }
    }

    #[test]
    fn gmm_mode_descends_out_of_repulsion() {
        // A Gaussian sitting on an obstacle sheds occupied-space mass.
        let ws = Workspace::standard();
        let field = SkewField::new(
            ws,
            vec![Obstacle::Circle {
                center: Vec2::new(10.0, 10.0),
                radius: 1.5,
            }],
        )
        .unwrap();
        let grid = QuadratureGrid::build(&ws, 0.2, 0.2, &field).unwrap();
        let goal = GoalSpec::new(comp((16.0, 10.0), (1.0, 0.0, 1.0)));
        let initial = MixtureParams::single(comp((9.0, 10.0), (1.0, 0.0, 1.0)));
        let rep0 = repulsive_potential(&initial, &field, &grid);
        assert!(rep0 > 0.05);
        let mut cfg = ApfConfig::default();
        cfg.max_steps = 400;
        let plan = plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Gmm).unwrap();
        let rep_end = repulsive_potential(&plan.frames.last().unwrap().params, &field, &grid);
        assert!(rep_end < rep0, "repulsion {rep0} -> {rep_end}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        /// DI keeps every interpolated covariance SPD and hits both
        /// endpoint identities for random SPD endpoints.
        #[test]
        fn di_random_endpoints_stay_spd(
            a0 in 0.3f64..3.0, r0 in -0.8f64..0.8, c0 in 0.3f64..3.0,
            a1 in 0.3f64..3.0, r1 in -0.8f64..0.8, c1 in 0.3f64..3.0,
        ) {
            let s0 = Mat2::symmetric(a0, r0 * (a0 * c0).sqrt(), c0);
            let s1 = Mat2::symmetric(a1, r1 * (a1 * c1).sqrt(), c1);
            let initial = MixtureParams::single(
                SnComponent::new(Vec2::new(5.0, 5.0), s0).unwrap(),
            );
            let goal = GoalSpec::new(SnComponent::new(Vec2::new(15.0, 12.0), s1).unwrap());
            let plan = plan_di(&initial, &goal, 12).unwrap();
            for frame in &plan.frames {
                prop_assert!(frame.params.component(0).sigma().is_spd(1e-9));
            }
            let last = plan.frames.last().unwrap().params.component(0).sigma();
            prop_assert!(last.sub_mat(s1).norm() < 1e-9);
        }
    }
}
