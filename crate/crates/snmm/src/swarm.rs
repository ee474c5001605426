//! Microscopic swarm control: agents descend a weighted combination of an
//! attraction potential (squared L2 mismatch between the empirical kernel
//! density and the planned target density) and a collision-avoidance
//! potential against obstacles and other agents.
//!
//! Stepping is synchronous over a frozen snapshot, free of randomness, and
//! accumulates in fixed order, so episodes are bit-reproducible.

use std::collections::HashMap;

use crate::env::SkewField;
use crate::error::{Error, Result};
use crate::grid::{DensityField, QuadratureGrid};
use crate::linalg::Vec2;
use crate::plan::{frame_density, PlanTrajectory};
use crate::scalar::{cast, Scalar};

/// Kernel support radius in bandwidths (beyond this the kernel is dropped).
const KERNEL_RADIUS_BW: f64 = 6.0;
/// Clearance at or below which the avoidance force is capped and logged.
const NEAR_COLLISION_CLEARANCE: f64 = 1e-6;
/// Cap applied to the avoidance force magnitude in that regime.
const FORCE_CAP: f64 = 1e9;
/// Inter-agent distance counted as a contact by the safety metrics.
const CONTACT_DISTANCE: f64 = 1e-3;

/// One agent: current position, visited positions, accumulated path length.
#[derive(Clone, Debug)]
pub struct AgentState<S> {
    pub position: Vec2<S>,
    pub trajectory: Vec<Vec2<S>>,
    pub path_length: S,
}

impl<S: Scalar> AgentState<S> {
    pub fn at(position: Vec2<S>) -> Self {
        AgentState {
            position,
            trajectory: vec![position],
            path_length: S::zero(),
        }
    }
}

/// KDE bandwidth selection.
#[derive(Clone, Copy, Debug)]
pub enum BandwidthRule<S> {
    Fixed(S),
    /// `sigma_hat * N^(-1/6)` from the current positions, floored so the
    /// kernel stays resolvable on the grid.
    Silverman,
}

impl<S: Scalar> BandwidthRule<S> {
    pub fn resolve(&self, positions: &[Vec2<S>], grid_step: S) -> S {
        match self {
            BandwidthRule::Fixed(h) => *h,
            BandwidthRule::Silverman => {
                let n = S::from_usize(positions.len().max(1)).unwrap();
                let mean = positions.iter().fold(Vec2::zero(), |a, p| a + *p) / n;
                let mut var = S::zero();
                for p in positions {
                    var += (*p - mean).norm_sq();
                }
                let sigma = (var / (n + n)).sqrt();
                let h = sigma * n.powf(cast(-1.0 / 6.0));
                h.max(grid_step * cast(1.5))
            }
        }
    }
}

/// Microscopic controller configuration.
#[derive(Clone, Copy, Debug)]
pub struct ControlConfig<S> {
    pub gamma_att: S,
    pub gamma_ca: S,
    /// Avoidance tolerance distance: the repulsion switches on below it.
    pub rho0: S,
    pub bandwidth: BandwidthRule<S>,
    pub dt: S,
    pub v_max: S,
    pub steps_per_frame: usize,
    /// Extra steps on the final frame so the swarm settles before scoring.
    pub settle_steps: usize,
    /// Episode succeeds when the final KDE-to-target L2 error energy is at
    /// most this fraction of the target self-energy.
    pub goal_energy_fraction: S,
}

impl<S: Scalar> Default for ControlConfig<S> {
    fn default() -> Self {
        ControlConfig {
            gamma_att: cast(2000.0),
            gamma_ca: cast(1e-2),
            rho0: cast(0.2),
            bandwidth: BandwidthRule::Silverman,
            dt: cast(0.05),
            v_max: S::one(),
            steps_per_frame: 1,
            settle_steps: 200,
            goal_energy_fraction: cast(0.5),
        }
    }
}

impl<S: Scalar> ControlConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_att <= S::zero()
            || self.gamma_ca < S::zero()
            || self.rho0 <= S::zero()
            || self.dt <= S::zero()
            || self.v_max <= S::zero()
            || self.steps_per_frame == 0
        {
            return Err(Error::InvalidConfig(
                "control gains, tolerances, dt, v_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen view of the swarm at one step: positions, the raw kernel sums,
/// and the grid-normalized KDE field.
#[derive(Clone, Debug)]
pub struct SwarmSnapshot<S> {
    pub positions: Vec<Vec2<S>>,
    pub bandwidth: S,
    /// Raw kernel-sum values at grid points (before normalization).
    raw: Vec<S>,
    /// Quadrature mass of `raw`.
    raw_mass: S,
    kde: DensityField<S>,
}

impl<S: Scalar> SwarmSnapshot<S> {
    pub fn build(
        positions: &[Vec2<S>],
        bandwidth: S,
        grid: &QuadratureGrid<S>,
    ) -> Result<Self> {
        if positions.is_empty() || bandwidth <= S::zero() {
            return Err(Error::InvalidConfig(
                "need at least one agent and a positive bandwidth".into(),
            ));
        }
        let shape = grid.shape();
        let mut raw = vec![S::zero(); shape.len()];
        let norm = (S::from_usize(positions.len()).unwrap()
            * cast::<S>(std::f64::consts::TAU)
            * bandwidth
            * bandwidth)
            .recip();
        let radius = bandwidth * cast(KERNEL_RADIUS_BW);
        let inv_2h2 = (bandwidth * bandwidth * cast::<S>(2.0)).recip();
        for p in positions {
            for_cells_within(grid, *p, radius, |j, d2| {
                raw[j] += norm * (-d2 * inv_2h2).exp();
            });
        }
        let raw_mass = raw.iter().copied().sum::<S>() * shape.cell_area();
        if raw_mass <= S::zero() {
            return Err(Error::InvalidConfig(
                "kernel density vanishes on the grid".into(),
            ));
        }
        let values = raw.iter().map(|v| *v / raw_mass).collect();
        Ok(SwarmSnapshot {
            positions: positions.to_vec(),
            bandwidth,
            raw,
            raw_mass,
            kde: DensityField::new(shape, values)?,
        })
    }

    pub fn kde(&self) -> &DensityField<S> {
        &self.kde
    }
}

/// Kernel density estimate of the agents, normalized on the grid.
pub fn kde<S: Scalar>(
    positions: &[Vec2<S>],
    bandwidth: S,
    grid: &QuadratureGrid<S>,
) -> Result<DensityField<S>> {
    Ok(SwarmSnapshot::build(positions, bandwidth, grid)?.kde)
}

/// Visit grid cells within `radius` of `center` (row-major), passing the
/// flat index and the squared distance.
fn for_cells_within<S: Scalar, F: FnMut(usize, S)>(
    grid: &QuadratureGrid<S>,
    center: Vec2<S>,
    radius: S,
    mut f: F,
) {
    let shape = grid.shape();
    let half = cast::<S>(0.5);
    let fx = ((center.x - radius - shape.x0) / shape.dx - half).floor();
    let fy = ((center.y - radius - shape.y0) / shape.dy - half).floor();
    let cx = ((center.x + radius - shape.x0) / shape.dx).ceil();
    let cy = ((center.y + radius - shape.y0) / shape.dy).ceil();
    let ix_lo = fx.max(S::zero()).to_usize().unwrap_or(0);
    let iy_lo = fy.max(S::zero()).to_usize().unwrap_or(0);
    let ix_hi = cx.to_usize().unwrap_or(0).min(shape.nx.saturating_sub(1));
    let iy_hi = cy.to_usize().unwrap_or(0).min(shape.ny.saturating_sub(1));
    let r2 = radius * radius;
    for iy in iy_lo..=iy_hi {
        for ix in ix_lo..=ix_hi {
            let j = iy * shape.nx + ix;
            let d2 = (grid.point(j) - center).norm_sq();
            if d2 <= r2 {
                f(j, d2);
            }
        }
    }
}

/// Precomputed per-step quantities for the attraction force: the KDE-target
/// mismatch and the scalars of the normalization correction.
pub struct AttractionSolver<'a, S> {
    snapshot: &'a SwarmSnapshot<S>,
    grid: &'a QuadratureGrid<S>,
    /// `kde - target` at every grid point.
    mismatch: Vec<S>,
    /// `sum_j mismatch_j * raw_j`.
    mismatch_dot_raw: S,
}

impl<'a, S: Scalar> AttractionSolver<'a, S> {
    pub fn new(
        snapshot: &'a SwarmSnapshot<S>,
        target: &DensityField<S>,
        grid: &'a QuadratureGrid<S>,
    ) -> Result<Self> {
        if target.shape() != snapshot.kde.shape() || target.shape() != grid.shape() {
            return Err(Error::GridMismatch);
        }
        let mismatch: Vec<S> = snapshot
            .kde
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| *a - *b)
            .collect();
        let mut mismatch_dot_raw = S::zero();
        for (e, w) in mismatch.iter().zip(&snapshot.raw) {
            mismatch_dot_raw += *e * *w;
        }
        Ok(AttractionSolver {
            snapshot,
            grid,
            mismatch,
            mismatch_dot_raw,
        })
    }

    /// `-dU_att/dx` for an agent at `x`, including the derivative of the
    /// grid normalization, so it is the exact gradient of the quadrature
    /// attraction potential.
    pub fn force(&self, x: Vec2<S>) -> Vec2<S> {
        let h = self.snapshot.bandwidth;
        let n = S::from_usize(self.snapshot.positions.len()).unwrap();
        let kernel_norm = (n * cast::<S>(std::f64::consts::TAU) * h * h).recip();
        let inv_h2 = (h * h).recip();
        let inv_2h2 = inv_h2 * cast::<S>(0.5);
        let radius = h * cast(KERNEL_RADIUS_BW);
        let mut weighted = Vec2::zero();
        let mut unweighted = Vec2::zero();
        for_cells_within(self.grid, x, radius, |j, d2| {
            let k = kernel_norm * (-d2 * inv_2h2).exp();
            let dir = (self.grid.point(j) - x) * (k * inv_h2);
            weighted += dir * self.mismatch[j];
            unweighted += dir;
        });
        let area = self.grid.cell_area();
        let mass = self.snapshot.raw_mass;
        let correction = unweighted * (self.mismatch_dot_raw * area / mass);
        (weighted - correction) * (-(area + area) / mass)
    }
}

/// Attraction force on a single agent (one-off evaluation; the episode
/// loop uses the shared [`AttractionSolver`]).
pub fn attractive_force<S: Scalar>(
    agent: Vec2<S>,
    snapshot: &SwarmSnapshot<S>,
    target: &DensityField<S>,
    grid: &QuadratureGrid<S>,
) -> Result<Vec2<S>> {
    Ok(AttractionSolver::new(snapshot, target, grid)?.force(agent))
}

/// `(1/rho - 1/rho0)^2` gated below `rho0`, and its derivative.
fn avoidance_term<S: Scalar>(rho: S, rho0: S) -> S {
    if rho <= rho0 {
        let d = rho.recip() - rho0.recip();
        d * d
    } else {
        S::zero()
    }
}

fn avoidance_term_derivative<S: Scalar>(rho: S, rho0: S) -> S {
    if rho <= rho0 {
        let d = rho.recip() - rho0.recip();
        -(d + d) / (rho * rho)
    } else {
        S::zero()
    }
}

/// Collision-avoidance potential value for one agent's clearance.
pub fn avoidance_potential_term<S: Scalar>(rho: S, rho0: S) -> S {
    avoidance_term(rho, rho0)
}

/// Nearest entity to agent `index`: signed clearance and its gradient, plus
/// the index of the nearest agent if an agent is the nearest entity.
fn nearest_entity<S: Scalar>(
    index: usize,
    positions: &[Vec2<S>],
    field: &SkewField<S>,
) -> (S, Vec2<S>, Option<usize>) {
    let x = positions[index];
    let (mut best, mut grad) = field.clearance_and_gradient_unchecked(x);
    let mut agent = None;
    for (m, other) in positions.iter().enumerate() {
        if m == index {
            continue;
        }
        let d = x - *other;
        let dist = d.norm();
        if dist < best {
            best = dist;
            grad = if dist > S::zero() {
                d / dist
            } else {
                Vec2::new(S::one(), S::zero())
            };
            agent = Some(m);
        }
    }
    (best, grad, agent)
}

/// `-dU_ca/dx` for agent `index`: its own clearance term plus the terms of
/// agents whose nearest entity is this agent. Exactly zero when every
/// relevant clearance exceeds `rho0`.
pub fn avoidance_force<S: Scalar>(
    index: usize,
    positions: &[Vec2<S>],
    field: &SkewField<S>,
    cfg: &ControlConfig<S>,
) -> Vec2<S> {
    let mut grad_u = Vec2::zero();
    let (rho, grad, _) = nearest_entity(index, positions, field);
    grad_u += grad * avoidance_term_derivative(rho, cfg.rho0);
    for m in 0..positions.len() {
        if m == index {
            continue;
        }
        let (rho_m, _, nearest) = nearest_entity(m, positions, field);
        if nearest == Some(index) && rho_m <= cfg.rho0 && rho_m > S::zero() {
            let toward_self = (positions[index] - positions[m]) / rho_m;
            grad_u += toward_self * avoidance_term_derivative(rho_m, cfg.rho0);
        }
    }
    cap_force(-grad_u, rho)
}

fn cap_force<S: Scalar>(force: Vec2<S>, rho: S) -> Vec2<S> {
    if rho <= cast(NEAR_COLLISION_CLEARANCE) {
        force.clamp_norm(cast(FORCE_CAP))
    } else {
        force
    }
}

/// Uniform spatial hash with cell size `rho0`: a 3x3 block around a cell
/// covers every point within `rho0`.
struct SpatialHash<S> {
    cell: S,
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl<S: Scalar> SpatialHash<S> {
    fn build(positions: &[Vec2<S>], cell: S) -> Self {
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            map.entry(Self::key(*p, cell)).or_default().push(i);
        }
        SpatialHash { cell, map }
    }

    fn key(p: Vec2<S>, cell: S) -> (i64, i64) {
        (
            (p.x / cell).floor().to_i64().unwrap_or(0),
            (p.y / cell).floor().to_i64().unwrap_or(0),
        )
    }

    /// Visit agents in the 3x3 neighborhood of `p`, in index order within
    /// each cell (cells scanned in fixed row-major order).
    fn visit_neighbors<F: FnMut(usize)>(&self, p: Vec2<S>, mut f: F) {
        let (kx, ky) = Self::key(p, self.cell);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(bucket) = self.map.get(&(kx + dx, ky + dy)) {
                    for &i in bucket {
                        f(i);
                    }
                }
            }
        }
    }
}

/// Events accumulated while stepping.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepEvents {
    /// Steps where an agent ended inside an obstacle.
    pub collisions: usize,
    /// Steps where an agent's clearance fell to the capped regime.
    pub near_collisions: usize,
    /// Steps where an agent had to be clamped to the workspace.
    pub out_of_bounds: usize,
    /// Smallest inter-agent distance observed (within the hash horizon).
    pub min_pair_distance: f64,
    /// Largest per-step displacement relative to `v_max * dt`.
    pub max_step_ratio: f64,
}

impl StepEvents {
    fn new() -> Self {
        StepEvents {
            min_pair_distance: f64::INFINITY,
            ..Default::default()
        }
    }

    fn merge(&mut self, other: &StepEvents) {
        self.collisions += other.collisions;
        self.near_collisions += other.near_collisions;
        self.out_of_bounds += other.out_of_bounds;
        self.min_pair_distance = self.min_pair_distance.min(other.min_pair_distance);
        self.max_step_ratio = self.max_step_ratio.max(other.max_step_ratio);
    }
}

/// Advance the swarm `steps_per_frame` synchronous steps toward `target`.
pub fn step_swarm<S: Scalar>(
    agents: &mut [AgentState<S>],
    target: &DensityField<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    cfg: &ControlConfig<S>,
) -> Result<StepEvents> {
    cfg.validate()?;
    let mut events = StepEvents::new();
    for _ in 0..cfg.steps_per_frame {
        let step = single_step(agents, target, field, grid, cfg)?;
        events.merge(&step);
    }
    Ok(events)
}

fn single_step<S: Scalar>(
    agents: &mut [AgentState<S>],
    target: &DensityField<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    cfg: &ControlConfig<S>,
) -> Result<StepEvents> {
    let positions: Vec<Vec2<S>> = agents.iter().map(|a| a.position).collect();
    let h = cfg
        .bandwidth
        .resolve(&positions, grid.shape().dx.max(grid.shape().dy));
    let snapshot = SwarmSnapshot::build(&positions, h, grid)?;
    let attraction = AttractionSolver::new(&snapshot, target, grid)?;
    let hash = SpatialHash::build(&positions, cfg.rho0);

    // Clearance, gradient, and nearest-agent bookkeeping for everyone,
    // using the hash for the agent side.
    let mut clearances = Vec::with_capacity(positions.len());
    let mut events = StepEvents::new();
    for (i, p) in positions.iter().enumerate() {
        let (mut rho, mut grad) = field.clearance_and_gradient_unchecked(*p);
        let mut nearest: Option<usize> = None;
        hash.visit_neighbors(*p, |m| {
            if m != i {
                let d = *p - positions[m];
                let dist = d.norm();
                events.min_pair_distance = events.min_pair_distance.min(dist.to_f64().unwrap_or(f64::INFINITY));
                if dist < rho {
                    rho = dist;
                    grad = if dist > S::zero() {
                        d / dist
                    } else {
                        Vec2::new(S::one(), S::zero())
                    };
                    nearest = Some(m);
                }
            }
        });
        clearances.push((rho, grad, nearest));
    }

    // Avoidance gradients: own term plus back-reaction from agents whose
    // nearest entity is this one.
    let mut grad_u: Vec<Vec2<S>> = clearances
        .iter()
        .map(|(rho, grad, _)| *grad * avoidance_term_derivative(*rho, cfg.rho0))
        .collect();
    for (m, (rho_m, _, nearest)) in clearances.iter().enumerate() {
        if let Some(i) = nearest {
            if *rho_m <= cfg.rho0 && *rho_m > S::zero() {
                let toward = (positions[*i] - positions[m]) / *rho_m;
                grad_u[*i] += toward * avoidance_term_derivative(*rho_m, cfg.rho0);
            }
        }
    }

    let v_cap = cfg.v_max * cfg.dt;
    let mut new_positions = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        let f_att = attraction.force(*p);
        let f_ca = cap_force(-grad_u[i], clearances[i].0);
        if clearances[i].0 <= cast(NEAR_COLLISION_CLEARANCE) {
            events.near_collisions += 1;
        }
        let control = (f_att * cfg.gamma_att + f_ca * cfg.gamma_ca).clamp_norm(cfg.v_max);
        let mut next = *p + control * cfg.dt;
        if !field.workspace().contains(next) {
            next = field.workspace().clamp(next);
            events.out_of_bounds += 1;
        }
        let moved = (next - *p).norm();
        let ratio = (moved / v_cap).to_f64().unwrap_or(f64::NAN);
        events.max_step_ratio = events.max_step_ratio.max(ratio);
        new_positions.push(next);
    }

    for (agent, next) in agents.iter_mut().zip(new_positions) {
        agent.path_length += (next - agent.position).norm();
        agent.position = next;
        agent.trajectory.push(next);
        if !field.is_free_unchecked(next) {
            events.collisions += 1;
        }
    }
    Ok(events)
}

/// Outcome of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult<S> {
    pub trajectories: Vec<Vec<Vec2<S>>>,
    pub lengths: Vec<S>,
    pub length_mean: S,
    pub length_std: S,
    pub events: StepEvents,
    /// Squared L2 distance between the final KDE and the final target.
    pub final_l2_sq: S,
    /// Self-energy of the final target field.
    pub target_energy: S,
    pub frames_run: usize,
    pub steps_run: usize,
    pub success: bool,
}

/// Drive the swarm through every plan frame, then let it settle on the
/// final target. Success requires a collision-free episode that ends with
/// the KDE close to the final target in L2 energy.
pub fn run_episode<S: Scalar>(
    initial: &[Vec2<S>],
    plan: &PlanTrajectory<S>,
    field: &SkewField<S>,
    grid: &QuadratureGrid<S>,
    cfg: &ControlConfig<S>,
) -> Result<EpisodeResult<S>> {
    cfg.validate()?;
    if plan.frames.is_empty() {
        return Err(Error::InvalidConfig("plan has no frames".into()));
    }
    let mut agents: Vec<AgentState<S>> = initial.iter().map(|p| AgentState::at(*p)).collect();
    let mut events = StepEvents::new();
    let mut steps_run = 0usize;
    let mut last_target: Option<DensityField<S>> = None;
    for frame in &plan.frames {
        let target = frame_density(&frame.params, plan.kind, field, grid)?;
        let step = step_swarm(&mut agents, &target, field, grid, cfg)?;
        events.merge(&step);
        steps_run += cfg.steps_per_frame;
        last_target = Some(target);
    }
    let target = last_target.expect("at least one frame");
    if cfg.settle_steps > 0 {
        let mut settle_cfg = *cfg;
        settle_cfg.steps_per_frame = cfg.settle_steps;
        let step = step_swarm(&mut agents, &target, field, grid, &settle_cfg)?;
        events.merge(&step);
        steps_run += cfg.settle_steps;
    }

    let positions: Vec<Vec2<S>> = agents.iter().map(|a| a.position).collect();
    let h = cfg
        .bandwidth
        .resolve(&positions, grid.shape().dx.max(grid.shape().dy));
    let final_kde = kde(&positions, h, grid)?;
    let final_l2_sq = crate::mixture::l2_distance_sq(&final_kde, &target)?;
    let target_energy = crate::mixture::inner_product(&target, &target)?;

    let lengths: Vec<S> = agents.iter().map(|a| a.path_length).collect();
    let n = S::from_usize(lengths.len()).unwrap();
    let mean = lengths.iter().copied().sum::<S>() / n;
    let var = lengths
        .iter()
        .map(|l| (*l - mean) * (*l - mean))
        .sum::<S>()
        / n;
    let collision_free = events.collisions == 0
        && events.min_pair_distance >= CONTACT_DISTANCE;
    let success =
        collision_free && final_l2_sq <= cfg.goal_energy_fraction * target_energy;
    Ok(EpisodeResult {
        trajectories: agents.into_iter().map(|a| a.trajectory).collect(),
        lengths,
        length_mean: mean,
        length_std: var.sqrt(),
        events,
        final_l2_sq,
        target_energy,
        frames_run: plan.frames.len(),
        steps_run,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Obstacle, Workspace};
    use crate::linalg::Mat2;
    use crate::mixture::{sample, MixtureParams, SnComponent, SnmmDensity};
    use crate::plan::{plan_di, GoalSpec};
    use approx::assert_relative_eq;

    fn comp(mu: (f64, f64), s: (f64, f64, f64)) -> SnComponent<f64> {
        SnComponent::new(Vec2::new(mu.0, mu.1), Mat2::symmetric(s.0, s.1, s.2)).unwrap()
    }

    fn free_scene(dx: f64) -> (SkewField<f64>, QuadratureGrid<f64>) {
        let ws = Workspace::standard();
        let field = SkewField::free(ws);
        let grid = QuadratureGrid::build(&ws, dx, dx, &field).unwrap();
        (field, grid)
    }

    fn target_field(
        params: &MixtureParams<f64>,
        field: &SkewField<f64>,
        grid: &QuadratureGrid<f64>,
    ) -> DensityField<f64> {
        SnmmDensity::new(params, field, grid).unwrap().density_field(grid)
    }

    #[test]
    fn kde_peaks_at_single_agent() {
        let (_, grid) = free_scene(0.1);
        let c = Vec2::new(7.3, 11.1);
        let f = kde(&[c], 0.5, &grid).unwrap();
        let peak = grid.point(f.argmax());
        assert!((peak - c).norm() <= 0.08);
        assert_relative_eq!(f.mass(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn kde_is_translation_equivariant() {
        let (_, grid) = free_scene(0.1);
        let pts = [Vec2::new(6.0, 6.0), Vec2::new(6.5, 6.4), Vec2::new(5.8, 6.9)];
        let shift = Vec2::new(4.0, 3.0);
        let shifted: Vec<Vec2<f64>> = pts.iter().map(|p| *p + shift).collect();
        let f0 = kde(&pts, 0.5, &grid).unwrap();
        let f1 = kde(&shifted, 0.5, &grid).unwrap();
        let p0 = grid.point(f0.argmax());
        let p1 = grid.point(f1.argmax());
        assert!((p1 - (p0 + shift)).norm() < 1e-9);
    }

    #[test]
    fn kde_of_gaussian_sample_tracks_truth() {
        let (field, grid) = free_scene(0.1);
        let truth = MixtureParams::single(comp((10.0, 10.0), (1.0, 0.0, 1.0)));
        let pts = sample(&truth, &field, &grid, 300, 9).unwrap();
        let h = BandwidthRule::Silverman.resolve(&pts, 0.1);
        let est = kde(&pts, h, &grid).unwrap();
        let truth_field = target_field(&truth, &field, &grid);
        let shifted = MixtureParams::single(comp((12.0, 10.0), (1.0, 0.0, 1.0)));
        let shifted_field = target_field(&shifted, &field, &grid);
        let err_truth = crate::mixture::l2_distance_sq(&est, &truth_field).unwrap();
        let err_shifted = crate::mixture::l2_distance_sq(&est, &shifted_field).unwrap();
        assert!(err_truth < err_shifted);
    }

    #[test]
    fn attraction_vanishes_when_kde_matches_target() {
        // Make the target exactly the KDE of the current swarm.
        let (_, grid) = free_scene(0.1);
        let pts = [
            Vec2::new(9.0, 9.0),
            Vec2::new(10.5, 10.0),
            Vec2::new(9.5, 11.0),
            Vec2::new(10.2, 9.4),
        ];
        let snapshot = SwarmSnapshot::build(&pts, 0.6, &grid).unwrap();
        let target = snapshot.kde().clone();
        for p in pts {
            let f = attractive_force(p, &snapshot, &target, &grid).unwrap();
            assert!(f.norm() < 1e-8, "residual force {f:?}");
        }
    }

    #[test]
    fn attraction_points_toward_distant_target() {
        let (field, grid) = free_scene(0.1);
        let agent = Vec2::new(5.0, 10.0);
        let snapshot = SwarmSnapshot::build(&[agent], 0.6, &grid).unwrap();
        let goal_mu = Vec2::new(12.0, 10.0);
        let target = target_field(
            &MixtureParams::single(comp((12.0, 10.0), (1.0, 0.0, 1.0))),
            &field,
            &grid,
        );
        let f = attractive_force(agent, &snapshot, &target, &grid).unwrap();
        assert!(f.dot(goal_mu - agent) > 0.0, "force {f:?} points away");
    }

    #[test]
    fn attraction_matches_finite_differences_of_quadrature_potential() {
        let (field, grid) = free_scene(0.1);
        let pts = [
            Vec2::new(8.0, 9.0),
            Vec2::new(9.2, 10.4),
            Vec2::new(10.1, 8.8),
            Vec2::new(9.0, 9.8),
            Vec2::new(8.6, 10.9),
        ];
        let h = 0.5;
        let target = target_field(
            &MixtureParams::single(comp((10.0, 10.0), (1.2, 0.2, 0.9))),
            &field,
            &grid,
        );
        let u_att = |positions: &[Vec2<f64>]| {
            let est = kde(positions, h, &grid).unwrap();
            crate::mixture::l2_distance_sq(&est, &target).unwrap()
        };
        let snapshot = SwarmSnapshot::build(&pts, h, &grid).unwrap();
        let eps = 1e-5;
        for n in 0..pts.len() {
            let force = attractive_force(pts[n], &snapshot, &target, &grid).unwrap();
            for axis in 0..2 {
                let mut plus = pts.to_vec();
                let mut minus = pts.to_vec();
                if axis == 0 {
                    plus[n].x += eps;
                    minus[n].x -= eps;
                } else {
                    plus[n].y += eps;
                    minus[n].y -= eps;
                }
                let fd = -(u_att(&plus) - u_att(&minus)) / (2.0 * eps);
                let got = if axis == 0 { force.x } else { force.y };
                let rel = (got - fd).abs() / fd.abs().max(1e-12);
                assert!(rel < 1e-4, "agent {n} axis {axis}: rel err {rel}");
            }
        }
    }

    #[test]
    fn avoidance_zero_beyond_tolerance() {
        let (field, _) = free_scene(0.5);
        let cfg = ControlConfig::default();
        let positions = [Vec2::new(5.0, 5.0), Vec2::new(10.0, 10.0)];
        let f = avoidance_force(0, &positions, &field, &cfg);
        assert_eq!(f, Vec2::zero());
    }

    #[test]
    fn avoidance_is_pairwise_opposite() {
        let (field, _) = free_scene(0.5);
        let cfg = ControlConfig::<f64>::default();
        let d = cfg.rho0 / 2.0;
        let positions = [Vec2::new(10.0, 10.0), Vec2::new(10.0 + d, 10.0)];
        let f0 = avoidance_force(0, &positions, &field, &cfg);
        let f1 = avoidance_force(1, &positions, &field, &cfg);
        assert_relative_eq!(f0.x, -f1.x, epsilon = 1e-12);
        assert_relative_eq!(f0.y, -f1.y, epsilon = 1e-12);
        assert!(f0.x < 0.0 && f1.x > 0.0, "forces must separate the pair");
        // Potential value at rho0/2 from the closed form.
        assert_relative_eq!(
            avoidance_potential_term(d, cfg.rho0),
            1.0 / (cfg.rho0 * cfg.rho0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn avoidance_matches_finite_differences_of_potential() {
        let ws = Workspace::standard();
        let field = SkewField::new(
            ws,
            vec![Obstacle::Circle {
                center: Vec2::new(10.0, 10.0),
                radius: 1.0,
            }],
        )
        .unwrap();
        let cfg = ControlConfig::<f64>::default();
        // One agent near the obstacle, one pair within tolerance.
        let positions = vec![
            Vec2::new(11.12, 10.0),
            Vec2::new(13.0, 10.0),
            Vec2::new(13.11, 10.06),
        ];
        let u_ca = |pos: &[Vec2<f64>]| {
            let mut acc = 0.0;
            for i in 0..pos.len() {
                let (rho, _, _) = nearest_entity(i, pos, &field);
                acc += avoidance_term(rho, cfg.rho0);
            }
            acc
        };
        let eps = 1e-7;
        for n in 0..positions.len() {
            let force = avoidance_force(n, &positions, &field, &cfg);
            for axis in 0..2 {
                let mut plus = positions.clone();
                let mut minus = positions.clone();
                if axis == 0 {
                    plus[n].x += eps;
                    minus[n].x -= eps;
                } else {
                    plus[n].y += eps;
                    minus[n].y -= eps;
                }
                let fd = -(u_ca(&plus) - u_ca(&minus)) / (2.0 * eps);
                let got = if axis == 0 { force.x } else { force.y };
                assert!(
                    (got - fd).abs() / fd.abs().max(1e-9) < 1e-4,
                    "agent {n} axis {axis}: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn step_speed_bound_and_length_accounting() {
        // Track a short sequence of overlapping targets, the way the
        // episode loop feeds plan frames.
        let (field, grid) = free_scene(0.1);
        let start = sample(
            &MixtureParams::single(comp((6.0, 10.0), (0.8, 0.0, 0.8))),
            &field,
            &grid,
            40,
            3,
        )
        .unwrap();
        let mut agents: Vec<AgentState<f64>> = start.iter().map(|p| AgentState::at(*p)).collect();
        let cfg = ControlConfig::default();
        let mut events = StepEvents::new();
        for k in 0..90 {
            let cx = 6.0 + 2.0 * (k as f64 + 1.0) / 90.0;
            let target = target_field(
                &MixtureParams::single(comp((cx, 10.0), (0.8, 0.0, 0.8))),
                &field,
                &grid,
            );
            events.merge(&step_swarm(&mut agents, &target, &field, &grid, &cfg).unwrap());
        }
        assert!(events.max_step_ratio <= 1.0 + 1e-12);
        for agent in &agents {
            let recomputed: f64 = agent
                .trajectory
                .windows(2)
                .map(|w| (w[1] - w[0]).norm())
                .sum();
            assert!((recomputed - agent.path_length).abs() < 1e-9);
        }
        // The swarm follows the moving target.
        let mean_x: f64 =
            agents.iter().map(|a| a.position.x).sum::<f64>() / agents.len() as f64;
        assert!(mean_x > 7.2, "swarm failed to track: mean x {mean_x}");
    }

    #[test]
    fn equilibrated_swarm_barely_moves() {
        // A sparse swarm whose KDE is exactly the target and whose
        // clearances all exceed rho0 must sit still.
        let (field, grid) = free_scene(0.1);
        let mut start = Vec::new();
        for iy in 0..4 {
            for ix in 0..4 {
                start.push(Vec2::new(7.0 + 2.0 * ix as f64, 7.0 + 2.0 * iy as f64));
            }
        }
        let cfg = ControlConfig::<f64>::default();
        let h = cfg.bandwidth.resolve(&start, 0.1);
        let target = kde(&start, h, &grid).unwrap();
        let mut agents: Vec<AgentState<f64>> = start.iter().map(|p| AgentState::at(*p)).collect();
        let events = step_swarm(&mut agents, &target, &field, &grid, &cfg).unwrap();
        let mean_step: f64 = agents
            .iter()
            .map(|a| {
                let t = &a.trajectory;
                (t[t.len() - 1] - t[t.len() - 2]).norm()
            })
            .sum::<f64>()
            / agents.len() as f64;
        let cap = cfg.v_max * cfg.dt;
        assert!(
            mean_step < cap * 1e-2,
            "mean step {mean_step} vs cap {cap} (expected equilibrium)"
        );
        assert_eq!(events.collisions, 0);
    }

    #[test]
    fn stepping_is_deterministic() {
        let (field, grid) = free_scene(0.1);
        let truth = MixtureParams::single(comp((12.0, 12.0), (1.0, 0.0, 1.0)));
        let target = target_field(&truth, &field, &grid);
        let start = sample(
            &MixtureParams::single(comp((8.0, 8.0), (1.0, 0.0, 1.0))),
            &field,
            &grid,
            30,
            4,
        )
        .unwrap();
        let run = || {
            let mut agents: Vec<AgentState<f64>> =
                start.iter().map(|p| AgentState::at(*p)).collect();
            let cfg = ControlConfig::default();
            for _ in 0..20 {
                step_swarm(&mut agents, &target, &field, &grid, &cfg).unwrap();
            }
            agents
                .iter()
                .map(|a| (a.position.x.to_bits(), a.position.y.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trivial_episode_succeeds_with_short_paths() {
        let (field, grid) = free_scene(0.1);
        let params = MixtureParams::single(comp((10.0, 10.0), (1.2, 0.0, 1.2)));
        let goal = GoalSpec::new(*params.component(0));
        let plan = plan_di(&params, &goal, 3).unwrap();
        let start = sample(&params, &field, &grid, 120, 15).unwrap();
        let mut cfg = ControlConfig::default();
        cfg.settle_steps = 50;
        let episode = run_episode(&start, &plan, &field, &grid, &cfg).unwrap();
        assert!(episode.success, "l2 {} vs energy {}", episode.final_l2_sq, episode.target_energy);
        assert!(episode.length_mean < 1.5, "mean length {}", episode.length_mean);
        assert_eq!(episode.events.collisions, 0);
    }
}
