//! Reproducible experiment driver: scenario generation, the model-selection
//! sweep (skewed fit vs the two Gaussian baselines), and the end-to-end
//! forest pipelines with their metric tables.
//!
//! Everything here is concrete `f64` and fully seeded; identical configs
//! and seeds produce byte-identical metric artifacts. Wall-clock timings go
//! to a separate file so the metric CSVs stay deterministic.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::SkewField;
use crate::error::{Error, Result};
use crate::io::{
    self, ComponentConfig, EnvConfig, GoalConfig, GridConfig, MixtureConfig, ObstacleConfig,
    RunManifest, WorkspaceConfig,
};
use crate::learn::{
    fit_gmm, fit_snmm, gaussian_mixture_nll, nll, refine_gmm, LearnConfig, SnmmFit,
};
use crate::linalg::Vec2;
use crate::mixture::{sample, MixtureParams};
use crate::plan::{plan_apf, plan_di, ApfConfig, PlanTrajectory, PlannerKind, PlannerMode};
use crate::swarm::{run_episode, BandwidthRule, ControlConfig, EpisodeResult};

/// Seeds for every stochastic stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Seeds {
    /// Sample generation (training data / initial agents).
    pub data: u64,
    /// Parameter learning (initialization restarts).
    pub learn: u64,
}

/// Learner settings in the scenario schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LearnSettings {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub rate_mu: f64,
    pub rate_chol: f64,
    pub gmm_restarts: usize,
}

impl Default for LearnSettings {
    fn default() -> Self {
        let d = LearnConfig::<f64>::new(1, 0);
        LearnSettings {
            outer_iters: d.outer_iters,
            inner_iters: d.inner_iters,
            rate_mu: d.rate_mu,
            rate_chol: d.rate_chol,
            gmm_restarts: d.gmm_restarts,
        }
    }
}

impl LearnSettings {
    pub fn to_config(self, n_components: usize, seed: u64, grid: GridConfig) -> LearnConfig<f64> {
        let mut cfg = LearnConfig::new(n_components, seed);
        cfg.outer_iters = self.outer_iters;
        cfg.inner_iters = self.inner_iters;
        cfg.rate_mu = self.rate_mu;
        cfg.rate_chol = self.rate_chol;
        cfg.gmm_restarts = self.gmm_restarts;
        cfg.grid_dx = grid.dx;
        cfg.grid_dy = grid.dy;
        cfg
    }
}

/// Potential-field planner settings in the scenario schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ApfSettings {
    pub gamma_sn: f64,
    pub gamma_cs: f64,
    pub max_steps: usize,
    pub rate_mu: f64,
    pub rate_chol: f64,
    pub gamma_rep: f64,
    pub eta: f64,
}

impl Default for ApfSettings {
    fn default() -> Self {
        let d = ApfConfig::<f64>::default();
        ApfSettings {
            gamma_sn: d.gamma_sn,
            gamma_cs: d.gamma_cs,
            max_steps: d.max_steps,
            rate_mu: d.rate_mu,
            rate_chol: d.rate_chol,
            gamma_rep: d.gamma_rep,
            eta: d.eta,
        }
    }
}

impl ApfSettings {
    pub fn to_config(self) -> ApfConfig<f64> {
        let mut cfg = ApfConfig::default();
        cfg.gamma_sn = self.gamma_sn;
        cfg.gamma_cs = self.gamma_cs;
        cfg.max_steps = self.max_steps;
        cfg.rate_mu = self.rate_mu;
        cfg.rate_chol = self.rate_chol;
        cfg.gamma_rep = self.gamma_rep;
        cfg.eta = self.eta;
        cfg
    }
}

/// Microscopic controller settings in the scenario schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ControlSettings {
    pub gamma_att: f64,
    pub gamma_ca: f64,
    pub rho0: f64,
    pub dt: f64,
    pub v_max: f64,
    pub steps_per_frame: usize,
    pub settle_steps: usize,
    pub goal_energy_fraction: f64,
    /// Fixed KDE bandwidth; data-driven when absent.
    pub bandwidth: Option<f64>,
}

impl Default for ControlSettings {
    fn default() -> Self {
        let d = ControlConfig::<f64>::default();
        ControlSettings {
            gamma_att: d.gamma_att,
            gamma_ca: d.gamma_ca,
            rho0: d.rho0,
            dt: d.dt,
            v_max: d.v_max,
            steps_per_frame: d.steps_per_frame,
            settle_steps: d.settle_steps,
            goal_energy_fraction: d.goal_energy_fraction,
            bandwidth: None,
        }
    }
}

impl ControlSettings {
    pub fn to_config(self) -> ControlConfig<f64> {
        let mut cfg = ControlConfig::default();
        cfg.gamma_att = self.gamma_att;
        cfg.gamma_ca = self.gamma_ca;
        cfg.rho0 = self.rho0;
        cfg.dt = self.dt;
        cfg.v_max = self.v_max;
        cfg.steps_per_frame = self.steps_per_frame;
        cfg.settle_steps = self.settle_steps;
        cfg.goal_energy_fraction = self.goal_energy_fraction;
        cfg.bandwidth = match self.bandwidth {
            Some(h) => BandwidthRule::Fixed(h),
            None => BandwidthRule::Silverman,
        };
        cfg
    }
}

/// A complete scenario: environment, distributions, agent counts, seeds,
/// and stage settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub env: EnvConfig,
    /// Generating distribution: ground truth (model-selection scenario) or
    /// the initial swarm distribution (forest scenarios).
    pub truth: MixtureConfig,
    #[serde(default)]
    pub goal: Option<GoalConfig>,
    #[serde(default = "default_n_agents")]
    pub n_agents: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_nc_sweep")]
    pub nc_sweep: Vec<usize>,
    pub seeds: Seeds,
    #[serde(default)]
    pub learn: LearnSettings,
    #[serde(default)]
    pub apf: ApfSettings,
    #[serde(default = "default_di_steps")]
    pub di_steps: usize,
    #[serde(default)]
    pub control: ControlSettings,
}

fn default_n_agents() -> usize {
    100
}

fn default_n_samples() -> usize {
    300
}

fn default_nc_sweep() -> Vec<usize> {
    vec![1, 2, 3, 4, 5]
}

fn default_di_steps() -> usize {
    800
}

/// The two-mode scene with one rectangular obstacle between the modes,
/// plus its 2-component generating distribution.
pub fn gen_exp_a(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "exp-a".into(),
        env: EnvConfig {
            workspace: WorkspaceConfig::standard(),
            obstacles: vec![ObstacleConfig::ConvexPolygon {
                vertices: vec![[7.0, 9.0], [11.0, 9.0], [11.0, 10.0], [7.0, 10.0]],
            }],
            grid: GridConfig::default(),
        },
        truth: MixtureConfig {
            weights: vec![0.5, 0.5],
            components: vec![
                ComponentConfig {
                    mu: [9.0, 12.0],
                    sigma: [[1.0, 0.3], [0.3, 0.7]],
                },
                ComponentConfig {
                    mu: [9.0, 7.0],
                    sigma: [[1.0, -0.3], [-0.3, 0.7]],
                },
            ],
        },
        goal: None,
        n_agents: 0,
        n_samples: 300,
        nc_sweep: default_nc_sweep(),
        seeds: Seeds {
            data: seed,
            learn: seed.wrapping_add(1000),
        },
        learn: LearnSettings::default(),
        apf: ApfSettings::default(),
        di_steps: default_di_steps(),
        control: ControlSettings::default(),
    }
}

/// Forest scenario variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForestVariant {
    I,
    II,
}

impl ForestVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ForestVariant::I => "forest-i",
            ForestVariant::II => "forest-ii",
        }
    }
}

const FOREST_I_RADIUS: f64 = 0.5;
const FOREST_II_RADIUS: f64 = 0.35;
/// Keep trees clear of the start/goal supports by this much.
const SUPPORT_CLEARANCE: f64 = 3.0;
const PLACEMENT_BUDGET: usize = 10_000;

fn forest_truth() -> MixtureConfig {
    MixtureConfig {
        weights: vec![0.5, 0.5],
        components: vec![
            ComponentConfig {
                mu: [3.0, 13.0],
                sigma: [[0.8, 0.0], [0.0, 0.8]],
            },
            ComponentConfig {
                mu: [3.0, 7.0],
                sigma: [[0.8, 0.0], [0.0, 0.8]],
            },
        ],
    }
}

fn forest_goal() -> GoalConfig {
    GoalConfig {
        mu: [17.0, 10.0],
        sigma: [[1.0, 0.0], [0.0, 1.0]],
    }
}

/// Generate a forest scenario. Variant I deploys 14 large trees on a
/// jittered two-column layout spanning the corridor; variant II scatters 50
/// smaller trees at random, rejecting placements that crowd each other or
/// the start/goal supports.
pub fn gen_forest(variant: ForestVariant, seed: u64) -> Result<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = forest_truth();
    let goal = forest_goal();
    let mut supports: Vec<Vec2<f64>> = truth
        .components
        .iter()
        .map(|c| Vec2::new(c.mu[0], c.mu[1]))
        .collect();
    supports.push(Vec2::new(goal.mu[0], goal.mu[1]));

    let obstacles = match variant {
        // Simple forest: 14 trees on a staggered three-column lattice with
        // seeded jitter, leaving wide weaving passages.
        ForestVariant::I => {
            let slots: [(f64, f64); 14] = [
                (6.5, 2.0),
                (6.5, 6.0),
                (6.5, 10.0),
                (6.5, 14.0),
                (6.5, 18.0),
                (9.5, 4.0),
                (9.5, 8.0),
                (9.5, 12.0),
                (9.5, 16.0),
                (12.5, 2.0),
                (12.5, 6.0),
                (12.5, 10.0),
                (12.5, 14.0),
                (12.5, 18.0),
            ];
            let mut trees = Vec::with_capacity(slots.len());
            for (sx, sy) in slots {
                let mut placed = None;
                for _ in 0..PLACEMENT_BUDGET {
                    let c = Vec2::new(
                        sx + rng.random_range(-0.4..0.4),
                        sy + rng.random_range(-0.4..0.4),
                    );
                    let clear = supports
                        .iter()
                        .all(|s| (c - *s).norm() > SUPPORT_CLEARANCE + FOREST_I_RADIUS);
                    if clear {
                        placed = Some(c);
                        break;
                    }
                }
                let c = placed.ok_or(Error::PlacementInfeasible {
                    attempts: PLACEMENT_BUDGET,
                })?;
                trees.push(ObstacleConfig::Circle {
                    center: [c.x, c.y],
                    radius: FOREST_I_RADIUS,
                });
            }
            trees
        }
        // Cluttered forest: 50 smaller trees jittered off a dense staggered
        // three-column band. Uniform density matters here: sparse random
        // scatters leave low-coverage lanes wide enough for an unskewed
        // Gaussian to slip through.
        ForestVariant::II => {
            let columns = [(9.0f64, 17usize, 0.0f64), (10.25, 17, 0.56), (11.5, 16, 0.0)];
            let mut trees = Vec::with_capacity(50);
            for (cx, rows, offset) in columns {
                let pitch = 18.4 / rows as f64;
                for row in 0..rows {
                    let base_y = 0.8 + offset + pitch * (row as f64 + 0.5);
                    let mut placed = None;
                    for _ in 0..PLACEMENT_BUDGET {
                        let c = Vec2::new(
                            cx + rng.random_range(-0.12..0.12),
                            base_y + rng.random_range(-0.15..0.15),
                        );
                        let clear = supports
                            .iter()
                            .all(|s| (c - *s).norm() > SUPPORT_CLEARANCE + FOREST_II_RADIUS);
                        if clear {
                            placed = Some(c);
                            break;
                        }
                    }
                    let c = placed.ok_or(Error::PlacementInfeasible {
                        attempts: PLACEMENT_BUDGET,
                    })?;
                    trees.push(ObstacleConfig::Circle {
                        center: [c.x, c.y],
                        radius: FOREST_II_RADIUS,
                    });
                }
            }
            trees
        }
    };

    let config = ScenarioConfig {
        name: variant.name().into(),
        env: EnvConfig {
            workspace: WorkspaceConfig::standard(),
            obstacles,
            grid: GridConfig::default(),
        },
        truth,
        goal: Some(goal),
        n_agents: default_n_agents(),
        n_samples: 0,
        nc_sweep: vec![2],
        seeds: Seeds {
            data: seed.wrapping_add(17),
            learn: seed.wrapping_add(1000),
        },
        learn: LearnSettings::default(),
        apf: ApfSettings::default(),
        di_steps: default_di_steps(),
        control: ControlSettings::default(),
    };
    verify_support_freedom(&config)?;
    Ok(config)
}

/// At least 90 % of each start/goal support disc (two standard deviations)
/// must stay free.
fn verify_support_freedom(config: &ScenarioConfig) -> Result<()> {
    let (field, _) = config.env.build()?;
    let mut checks: Vec<(Vec2<f64>, f64)> = config
        .truth
        .components
        .iter()
        .map(|c| {
            (
                Vec2::new(c.mu[0], c.mu[1]),
                2.0 * c.sigma[0][0].max(c.sigma[1][1]).sqrt(),
            )
        })
        .collect();
    if let Some(goal) = &config.goal {
        checks.push((
            Vec2::new(goal.mu[0], goal.mu[1]),
            2.0 * goal.sigma[0][0].max(goal.sigma[1][1]).sqrt(),
        ));
    }
    for (center, radius) in checks {
        let mut total = 0usize;
        let mut free = 0usize;
        let steps = 40;
        for iy in 0..steps {
            for ix in 0..steps {
                let p = Vec2::new(
                    center.x - radius + 2.0 * radius * (ix as f64 + 0.5) / steps as f64,
                    center.y - radius + 2.0 * radius * (iy as f64 + 0.5) / steps as f64,
                );
                if (p - center).norm() > radius || !field.workspace().contains(p) {
                    continue;
                }
                total += 1;
                if field.is_free_unchecked(p) {
                    free += 1;
                }
            }
        }
        if total == 0 || (free as f64) < 0.9 * total as f64 {
            return Err(Error::PlacementInfeasible {
                attempts: PLACEMENT_BUDGET,
            });
        }
    }
    Ok(())
}

/// One cell of the model-selection table.
#[derive(Clone, Debug, Serialize)]
pub struct NllRow {
    pub approach: String,
    pub n_components: usize,
    pub nll: f64,
}

/// Model-selection outcome: data, per-cell negative log-likelihoods, and
/// the fitted parameters.
pub struct ExpAOutcome {
    pub data: Vec<Vec2<f64>>,
    pub rows: Vec<NllRow>,
    pub snmm_fits: Vec<(usize, SnmmFit<f64>)>,
    pub gmm_fits: Vec<(usize, MixtureParams<f64>)>,
}

impl ExpAOutcome {
    pub fn nll_of(&self, approach: &str, n_components: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.approach == approach && r.n_components == n_components)
            .map(|r| r.nll)
    }
}

/// Split the heaviest component in two along its principal axis (warm-start
/// candidate that reproduces the parent's density exactly).
fn split_heaviest(params: &MixtureParams<f64>) -> Result<MixtureParams<f64>> {
    let mut heaviest = 0;
    for (i, w) in params.weights().iter().enumerate() {
        if *w > params.weights()[heaviest] {
            heaviest = i;
        }
    }
    let comp = params.component(heaviest);
    let ((_, l_max), rot) = comp.sigma().eigen_sym();
    let axis = Vec2::new(rot.m01, rot.m11);
    let offset = axis * (0.5 * l_max.sqrt());
    let mut weights = Vec::new();
    let mut comps = Vec::new();
    for (i, w) in params.weights().iter().enumerate() {
        if i == heaviest {
            weights.push(*w / 2.0);
            comps.push(crate::mixture::SnComponent::new(
                comp.mu() + offset,
                comp.sigma(),
            )?);
            weights.push(*w / 2.0);
            comps.push(crate::mixture::SnComponent::new(
                comp.mu() - offset,
                comp.sigma(),
            )?);
        } else {
            weights.push(*w);
            comps.push(*params.component(i));
        }
    }
    MixtureParams::new(weights, comps)
}

/// Best-of Gaussian-mixture fit: seeded restarts plus a nested warm start
/// split off the previous component count's winner (which guarantees the
/// NLL is non-increasing in the component count).
fn best_gmm(
    data: &[Vec2<f64>],
    n_components: usize,
    seed: u64,
    restarts: usize,
    previous: Option<&MixtureParams<f64>>,
) -> Result<MixtureParams<f64>> {
    let mut best: Option<(f64, MixtureParams<f64>)> = None;
    let mut consider = |params: MixtureParams<f64>| -> Result<()> {
        let value = gaussian_mixture_nll(data, &params)?;
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            best = Some((value, params));
        }
        Ok(())
    };
    for r in 0..restarts.max(1) {
        consider(fit_gmm(data, n_components, seed.wrapping_add(r as u64))?)?;
    }
    if let Some(prev) = previous {
        if prev.len() + 1 == n_components {
            consider(refine_gmm(data, &split_heaviest(prev)?)?)?;
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Run the model-selection sweep: for every component count fit the skewed
/// mixture (double-loop learner), the plain Gaussian mixture, and evaluate
/// the Gaussian parameters under the skewed density.
pub fn run_exp_a(config: &ScenarioConfig, out_dir: Option<&Path>) -> Result<ExpAOutcome> {
    let (field, grid) = config.env.build()?;
    let truth = config.truth.build()?;
    let data = sample(&truth, &field, &grid, config.n_samples, config.seeds.data)?;

    let mut rows = Vec::new();
    let mut snmm_fits = Vec::new();
    let mut gmm_fits = Vec::new();
    let mut previous_gmm: Option<MixtureParams<f64>> = None;
    for &nc in &config.nc_sweep {
        let gmm = best_gmm(
            &data,
            nc,
            config
                .seeds
                .learn
                .wrapping_add(100 * nc as u64),
            config.learn.gmm_restarts,
            previous_gmm.as_ref(),
        )?;
        rows.push(NllRow {
            approach: "gmm".into(),
            n_components: nc,
            nll: gaussian_mixture_nll(&data, &gmm)?,
        });
        rows.push(NllRow {
            approach: "snmm-gmm".into(),
            n_components: nc,
            nll: nll(&data, &gmm, &field, &grid)?,
        });

        let learn_cfg = config.learn.to_config(
            nc,
            config.seeds.learn.wrapping_add(nc as u64),
            config.env.grid,
        );
        let fit = fit_snmm(&data, &learn_cfg, &field)?;
        rows.push(NllRow {
            approach: "snmm".into(),
            n_components: nc,
            nll: nll(&data, &fit.params, &field, &grid)?,
        });
        snmm_fits.push((nc, fit));
        gmm_fits.push((nc, gmm.clone()));
        previous_gmm = Some(gmm);
    }
    rows.sort_by(|a, b| {
        a.approach
            .cmp(&b.approach)
            .then(a.n_components.cmp(&b.n_components))
    });

    if let Some(dir) = out_dir {
        let mut manifest = RunManifest::new(
            "experiment exp-a",
            vec![config.seeds.data, config.seeds.learn],
            config,
        )?;
        let samples_path = dir.join("samples.csv");
        io::write_samples_csv(&samples_path, &data)?;
        manifest.record(&samples_path);
        let table_path = dir.join("nll_table.csv");
        io::write_text(&table_path, &nll_table_csv(&rows))?;
        manifest.record(&table_path);
        let raster_path = dir.join("occupancy.txt");
        io::write_text(&raster_path, &io::occupancy_raster(&grid))?;
        manifest.record(&raster_path);
        for (nc, fit) in &snmm_fits {
            let params_path = dir.join(format!("snmm_params_nc{nc}.json"));
            io::write_json(&params_path, &MixtureConfig::from_params(&fit.params))?;
            manifest.record(&params_path);
            let trace_path = dir.join(format!("snmm_trace_nc{nc}.csv"));
            io::write_trace_csv(&trace_path, "nll", &fit.nll_trace)?;
            manifest.record(&trace_path);
        }
        for (nc, gmm) in &gmm_fits {
            let params_path = dir.join(format!("gmm_params_nc{nc}.json"));
            io::write_json(&params_path, &MixtureConfig::from_params(gmm))?;
            manifest.record(&params_path);
        }
        let manifest_path = dir.join("manifest.json");
        manifest.write(&manifest_path)?;
    }
    Ok(ExpAOutcome {
        data,
        rows,
        snmm_fits,
        gmm_fits,
    })
}

pub fn nll_table_csv(rows: &[NllRow]) -> String {
    let mut out = String::from("approach,n_components,nll\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.approach, r.n_components, r.nll);
    }
    out
}

/// One results-table row (the wall time lives in a separate artifact so
/// metric files stay byte-reproducible).
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub scenario: String,
    pub approach: PlannerKind,
    pub steps: usize,
    pub planning_secs: f64,
    pub length_mean: f64,
    pub length_std: f64,
    pub success: bool,
}

/// Forest pipeline outcome for one approach.
pub struct ApproachOutcome {
    pub row: ResultRow,
    pub plan: PlanTrajectory<f64>,
    pub episode: EpisodeResult<f64>,
}

pub struct ForestOutcome {
    pub initial_agents: Vec<Vec2<f64>>,
    pub outcomes: Vec<ApproachOutcome>,
}

impl ForestOutcome {
    pub fn outcome(&self, kind: PlannerKind) -> Option<&ApproachOutcome> {
        self.outcomes.iter().find(|o| o.row.approach == kind)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("scenario,approach,steps,length_mean,length_std,success\n");
        for o in &self.outcomes {
            let r = &o.row;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.scenario,
                r.approach.as_str(),
                r.steps,
                r.length_mean,
                r.length_std,
                if r.success { "yes" } else { "no" }
            );
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("scenario,approach,planning_secs\n");
        for o in &self.outcomes {
            let _ = writeln!(
                out,
                "{},{},{}",
                o.row.scenario,
                o.row.approach.as_str(),
                o.row.planning_secs
            );
        }
        out
    }
}

/// Run the full macroscopic-to-microscopic pipeline on a forest scenario
/// for the requested approaches (fit, plan, simulate, tabulate).
pub fn run_forest(
    config: &ScenarioConfig,
    approaches: &[PlannerKind],
    out_dir: Option<&Path>,
) -> Result<ForestOutcome> {
    let (field, grid) = config.env.build()?;
    let truth = config.truth.build()?;
    let goal = config
        .goal
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("forest scenario needs a goal".into()))?
        .build()?;
    goal.validate_on(&field, &grid)?;
    let agents = sample(&truth, &field, &grid, config.n_agents, config.seeds.data)?;

    let learn_cfg = config
        .learn
        .to_config(2, config.seeds.learn, config.env.grid);
    let control_cfg = config.control.to_config();
    let apf_cfg = config.apf.to_config();

    // Fits are shared across approaches of the same family.
    let mut snmm_fit: Option<MixtureParams<f64>> = None;
    let mut gmm_fit: Option<MixtureParams<f64>> = None;
    let mut outcomes = Vec::new();
    for &kind in approaches {
        let (plan, planning_secs) = match kind {
            PlannerKind::Di => {
                let params = fit_for_snmm(&agents, &learn_cfg, &field, &mut snmm_fit)?;
                let start = Instant::now();
                let plan = plan_di(&params, &goal, config.di_steps)?;
                (plan, start.elapsed().as_secs_f64())
            }
            PlannerKind::SnmmApf => {
                let params = fit_for_snmm(&agents, &learn_cfg, &field, &mut snmm_fit)?;
                let start = Instant::now();
                let plan = plan_apf(&params, &goal, &field, &grid, &apf_cfg, PlannerMode::Snmm)?;
                (plan, start.elapsed().as_secs_f64())
            }
            PlannerKind::GmmApf => {
                let params = fit_for_gmm(&agents, &learn_cfg, &mut gmm_fit)?;
                let start = Instant::now();
                let plan = plan_apf(&params, &goal, &field, &grid, &apf_cfg, PlannerMode::Gmm)?;
                (plan, start.elapsed().as_secs_f64())
            }
        };
        let episode = run_episode(&agents, &plan, &field, &grid, &control_cfg)?;
        let row = ResultRow {
            scenario: config.name.clone(),
            approach: kind,
            steps: plan.steps,
            planning_secs,
            length_mean: episode.length_mean,
            length_std: episode.length_std,
            success: plan.success && episode.success,
        };
        outcomes.push(ApproachOutcome {
            row,
            plan,
            episode,
        });
    }
    let outcome = ForestOutcome {
        initial_agents: agents,
        outcomes,
    };

    if let Some(dir) = out_dir {
        let mut manifest = RunManifest::new(
            &format!("experiment {}", config.name),
            vec![config.seeds.data, config.seeds.learn],
            config,
        )?;
        let metrics_path = dir.join("metrics.csv");
        io::write_text(&metrics_path, &outcome.metrics_csv())?;
        manifest.record(&metrics_path);
        let timings_path = dir.join("timings.csv");
        io::write_text(&timings_path, &outcome.timings_csv())?;
        manifest.record(&timings_path);
        let agents_path = dir.join("initial_agents.csv");
        io::write_samples_csv(&agents_path, &outcome.initial_agents)?;
        manifest.record(&agents_path);
        let raster_path = dir.join("occupancy.txt");
        io::write_text(&raster_path, &io::occupancy_raster(&grid))?;
        manifest.record(&raster_path);
        for o in &outcome.outcomes {
            let tag = o.row.approach.as_str();
            let plan_path = dir.join(format!("plan_{tag}.traj"));
            io::write_trajectory(&plan_path, &o.plan)?;
            manifest.record(&plan_path);
            if !o.plan.potential_trace.is_empty() {
                let trace_path = dir.join(format!("potential_{tag}.csv"));
                io::write_trace_csv(&trace_path, "potential", &o.plan.potential_trace)?;
                manifest.record(&trace_path);
            }
            let traj_path = dir.join(format!("trajectories_{tag}.csv"));
            io::write_agent_trajectories_csv(&traj_path, &o.episode.trajectories)?;
            manifest.record(&traj_path);
        }
        let manifest_path = dir.join("manifest.json");
        manifest.write(&manifest_path)?;
    }
    Ok(outcome)
}

fn fit_for_snmm(
    agents: &[Vec2<f64>],
    learn_cfg: &LearnConfig<f64>,
    field: &SkewField<f64>,
    cache: &mut Option<MixtureParams<f64>>,
) -> Result<MixtureParams<f64>> {
    if cache.is_none() {
        *cache = Some(fit_snmm(agents, learn_cfg, field)?.params);
    }
    Ok(cache.clone().expect("just filled"))
}

fn fit_for_gmm(
    agents: &[Vec2<f64>],
    learn_cfg: &LearnConfig<f64>,
    cache: &mut Option<MixtureParams<f64>>,
) -> Result<MixtureParams<f64>> {
    if cache.is_none() {
        *cache = Some(best_gmm(
            agents,
            learn_cfg.n_components,
            learn_cfg.seed,
            learn_cfg.gmm_restarts,
            None,
        )?);
    }
    Ok(cache.clone().expect("just filled"))
}

/// Mean positions matched to ground truth under the best component
/// permutation (two components: identity or swap).
pub fn mean_error_best_permutation(
    fitted: &MixtureParams<f64>,
    truth: &MixtureParams<f64>,
) -> f64 {
    assert_eq!(fitted.len(), truth.len());
    let k = fitted.len();
    let mut indices: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permute(&mut indices, 0, &mut |perm| {
        let worst = (0..k)
            .map(|i| (fitted.component(i).mu() - truth.component(perm[i]).mu()).norm())
            .fold(0.0f64, f64::max);
        best = best.min(worst);
    });
    best
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_a_scenario_builds_and_samples_free() {
        let cfg = gen_exp_a(7);
        let (field, grid) = cfg.env.build().unwrap();
        let truth = cfg.truth.build().unwrap();
        let data = sample(&truth, &field, &grid, 300, cfg.seeds.data).unwrap();
        assert_eq!(data.len(), 300);
        for p in &data {
            assert_eq!(field.occupancy(*p).unwrap(), 1.0);
        }
        // Mixture proportions within the binomial three-sigma band.
        let upper = data.iter().filter(|p| p.y > 9.5).count() as f64 / 300.0;
        assert!((upper - 0.5).abs() < 0.09, "upper fraction {upper}");
        // Component-1 points (upper mode) have their mean near (9, 12).
        let upper_pts: Vec<&Vec2<f64>> = data.iter().filter(|p| p.y > 9.5).collect();
        let mean = upper_pts
            .iter()
            .fold(Vec2::zero(), |a, p| a + **p)
            / upper_pts.len() as f64;
        assert!(
            (mean - Vec2::new(9.0, 12.0)).norm() < 0.25,
            "upper mean {mean:?}"
        );
    }

    #[test]
    fn forest_scenarios_have_the_advertised_tree_counts() {
        let f1 = gen_forest(ForestVariant::I, 42).unwrap();
        assert_eq!(f1.env.obstacles.len(), 14);
        let f2 = gen_forest(ForestVariant::II, 42).unwrap();
        assert_eq!(f2.env.obstacles.len(), 50);
        for o in &f2.env.obstacles {
            match o {
                ObstacleConfig::Circle { radius, .. } => {
                    assert!(*radius < FOREST_I_RADIUS);
                }
                _ => panic!("forest obstacles must be circles"),
            }
        }
        // All initial agents in free space.
        let (field, grid) = f2.env.build().unwrap();
        let truth = f2.truth.build().unwrap();
        let agents = sample(&truth, &field, &grid, 100, f2.seeds.data).unwrap();
        for a in &agents {
            assert_eq!(field.occupancy(*a).unwrap(), 1.0);
        }
    }

    #[test]
    fn forest_generation_is_deterministic() {
        let a = gen_forest(ForestVariant::II, 9).unwrap();
        let b = gen_forest(ForestVariant::II, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_heaviest_preserves_density() {
        let params = MixtureConfig {
            weights: vec![0.7, 0.3],
            components: vec![
                ComponentConfig {
                    mu: [5.0, 5.0],
                    sigma: [[1.0, 0.2], [0.2, 0.8]],
                },
                ComponentConfig {
                    mu: [15.0, 15.0],
                    sigma: [[0.5, 0.0], [0.0, 0.5]],
                },
            ],
        }
        .build()
        .unwrap();
        let split = split_heaviest(&params).unwrap();
        assert_eq!(split.len(), 3);
        let total: f64 = split.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_error_uses_best_permutation() {
        let truth = forest_truth().build().unwrap();
        // Same components listed in swapped order: zero error.
        let swapped = MixtureParams::new(
            vec![0.5, 0.5],
            vec![*truth.component(1), *truth.component(0)],
        )
        .unwrap();
        assert!(mean_error_best_permutation(&swapped, &truth) < 1e-12);
    }
}
