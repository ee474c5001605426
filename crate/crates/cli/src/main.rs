//! Batch CLI: `learn` fits mixtures to sample data, `plan` produces a
//! distribution trajectory, `simulate` drives a swarm along a plan, and
//! `experiment` reproduces the bundled scenarios end to end.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use snmm::experiment::{
    gen_exp_a, gen_forest, run_exp_a, run_forest, ForestVariant, ScenarioConfig,
};
use snmm::io;
use snmm::learn::{fit_gmm, fit_snmm, gaussian_mixture_nll, nll, LearnConfig};
use snmm::mixture::{sample, MixtureParams};
use snmm::plan::{plan_apf, plan_di, ApfConfig, PlannerKind, PlannerMode};
use snmm::swarm::{run_episode, BandwidthRule, ControlConfig};

#[derive(Parser)]
#[command(
    name = "snmm",
    about = "Occupancy-skewed normal mixtures: learning, distribution planning, swarm simulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Quadrature grid spacing override (meters).
    #[arg(long)]
    grid_dx: Option<f64>,
    /// Master seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Fit skewed and Gaussian mixtures to sample data over a component sweep.
    Learn {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample CSV (x,y per row).
        #[arg(long)]
        data: PathBuf,
        /// Environment JSON (workspace, obstacles, grid).
        #[arg(long)]
        env: PathBuf,
        /// Component counts to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        nc: Vec<usize>,
        /// Outer EM iterations.
        #[arg(long, default_value_t = 100)]
        outer_iters: usize,
        /// Inner gradient steps per component.
        #[arg(long, default_value_t = 10)]
        inner_iters: usize,
    },
    /// Plan a distribution trajectory from fitted parameters to a goal.
    Plan {
        #[command(flatten)]
        common: CommonArgs,
        /// Initial mixture parameters JSON.
        #[arg(long)]
        initial: PathBuf,
        /// Goal component JSON (mu, sigma).
        #[arg(long)]
        goal: PathBuf,
        /// Environment JSON.
        #[arg(long)]
        env: PathBuf,
        #[arg(long, value_enum)]
        planner: PlannerArg,
        /// Interpolation steps (displacement-interpolation planner).
        #[arg(long, default_value_t = 800)]
        di_steps: usize,
        /// Maximum optimization steps (potential-field planners).
        #[arg(long, default_value_t = 3000)]
        max_steps: usize,
        /// Attraction-potential weight.
        #[arg(long, default_value_t = 1.0)]
        gamma_sn: f64,
        /// Divergence-potential weight.
        #[arg(long, default_value_t = 1.0)]
        gamma_cs: f64,
        /// Repulsive weight (Gaussian baseline planner).
        #[arg(long, default_value_t = 1.0)]
        gamma_rep: f64,
        /// Repulsion tolerance threshold.
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Drive a swarm along a planned trajectory.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Plan trajectory file.
        #[arg(long)]
        plan: PathBuf,
        /// Environment JSON.
        #[arg(long)]
        env: PathBuf,
        /// Initial agent positions CSV; sampled from --agent-params when absent.
        #[arg(long)]
        agents: Option<PathBuf>,
        /// Mixture JSON to sample initial agents from.
        #[arg(long)]
        agent_params: Option<PathBuf>,
        /// Number of agents when sampling.
        #[arg(long, default_value_t = 100)]
        n_agents: usize,
        /// Emit per-frame KDE rasters.
        #[arg(long)]
        kde_rasters: bool,
        /// Attraction gain.
        #[arg(long, default_value_t = 2000.0)]
        gamma_att: f64,
        /// Collision-avoidance gain.
        #[arg(long, default_value_t = 0.01)]
        gamma_ca: f64,
    },
    /// Reproduce a bundled scenario end to end.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(value_enum)]
        which: ExperimentArg,
        /// Scenario JSON overriding the generated default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run at the full 300-agent scale.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Di,
    SnmmApf,
    GmmApf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    ExpA,
    ForestI,
    ForestIi,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Learn {
            common,
            data,
            env,
            nc,
            outer_iters,
            inner_iters,
        } => learn_command(common, data, env, nc, outer_iters, inner_iters),
        Command::Plan {
            common,
            initial,
            goal,
            env,
            planner,
            di_steps,
            max_steps,
            gamma_sn,
            gamma_cs,
            gamma_rep,
            eta,
        } => plan_command(
            common, initial, goal, env, planner, di_steps, max_steps, gamma_sn, gamma_cs,
            gamma_rep, eta,
        ),
        Command::Simulate {
            common,
            plan,
            env,
            agents,
            agent_params,
            n_agents,
            kde_rasters,
            gamma_att,
            gamma_ca,
        } => simulate_command(
            common,
            plan,
            env,
            agents,
            agent_params,
            n_agents,
            kde_rasters,
            gamma_att,
            gamma_ca,
        ),
        Command::Experiment {
            common,
            which,
            config,
            full,
        } => experiment_command(common, which, config, full),
    }
}

fn load_env(path: &Path, grid_dx: Option<f64>) -> anyhow::Result<io::EnvConfig> {
    let mut cfg: io::EnvConfig = io::read_json(path)
        .with_context(|| format!("loading environment {}", path.display()))?;
    if let Some(dx) = grid_dx {
        cfg.grid.dx = dx;
        cfg.grid.dy = dx;
    }
    Ok(cfg)
}

fn learn_command(
    common: CommonArgs,
    data_path: PathBuf,
    env_path: PathBuf,
    nc_sweep: Vec<usize>,
    outer_iters: usize,
    inner_iters: usize,
) -> anyhow::Result<()> {
    let env = load_env(&env_path, common.grid_dx)?;
    let (field, grid) = env.build()?;
    let data = io::read_samples_csv(&data_path)?;
    let mut manifest = io::RunManifest::new("learn", vec![common.seed], &env)?;
    let mut rows = Vec::new();
    for &nc in &nc_sweep {
        let mut cfg = LearnConfig::<f64>::new(nc, common.seed.wrapping_add(nc as u64));
        cfg.outer_iters = outer_iters;
        cfg.inner_iters = inner_iters;
        cfg.grid_dx = env.grid.dx;
        cfg.grid_dy = env.grid.dy;
        let fit = fit_snmm(&data, &cfg, &field)?;
        let snmm_nll = nll(&data, &fit.params, &field, &grid)?;
        let gmm = fit_gmm(&data, nc, common.seed.wrapping_add(nc as u64))?;
        rows.push(snmm::experiment::NllRow {
            approach: "snmm".into(),
            n_components: nc,
            nll: snmm_nll,
        });
        rows.push(snmm::experiment::NllRow {
            approach: "gmm".into(),
            n_components: nc,
            nll: gaussian_mixture_nll(&data, &gmm)?,
        });
        rows.push(snmm::experiment::NllRow {
            approach: "snmm-gmm".into(),
            n_components: nc,
            nll: nll(&data, &gmm, &field, &grid)?,
        });
        let params_path = common.out.join(format!("snmm_params_nc{nc}.json"));
        io::write_json(&params_path, &io::MixtureConfig::from_params(&fit.params))?;
        manifest.record(&params_path);
        let trace_path = common.out.join(format!("snmm_trace_nc{nc}.csv"));
        io::write_trace_csv(&trace_path, "nll", &fit.nll_trace)?;
        manifest.record(&trace_path);
        println!("fitted nc={nc}: skewed nll {snmm_nll:.3}");
    }
    let table_path = common.out.join("nll_table.csv");
    io::write_text(&table_path, &snmm::experiment::nll_table_csv(&rows))?;
    manifest.record(&table_path);
    manifest.write(&common.out.join("manifest.json"))?;
    println!("wrote {}", table_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn plan_command(
    common: CommonArgs,
    initial_path: PathBuf,
    goal_path: PathBuf,
    env_path: PathBuf,
    planner: PlannerArg,
    di_steps: usize,
    max_steps: usize,
    gamma_sn: f64,
    gamma_cs: f64,
    gamma_rep: f64,
    eta: f64,
) -> anyhow::Result<()> {
    let env = load_env(&env_path, common.grid_dx)?;
    let (field, grid) = env.build()?;
    let initial: io::MixtureConfig = io::read_json(&initial_path)?;
    let initial = initial.build()?;
    let goal_cfg: io::GoalConfig = io::read_json(&goal_path)?;
    let goal = goal_cfg.build()?;
    goal.validate_on(&field, &grid)?;

    let mut cfg = ApfConfig::<f64>::default();
    cfg.max_steps = max_steps;
    cfg.gamma_sn = gamma_sn;
    cfg.gamma_cs = gamma_cs;
    cfg.gamma_rep = gamma_rep;
    cfg.eta = eta;
    let plan = match planner {
        PlannerArg::Di => plan_di(&initial, &goal, di_steps)?,
        PlannerArg::SnmmApf => plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Snmm)?,
        PlannerArg::GmmApf => plan_apf(&initial, &goal, &field, &grid, &cfg, PlannerMode::Gmm)?,
    };

    let mut manifest = io::RunManifest::new("plan", vec![common.seed], &env)?;
    let traj_path = common.out.join(format!("plan_{}.traj", plan.kind.as_str()));
    io::write_trajectory(&traj_path, &plan)?;
    manifest.record(&traj_path);
    if !plan.potential_trace.is_empty() {
        let trace_path = common
            .out
            .join(format!("potential_{}.csv", plan.kind.as_str()));
        io::write_trace_csv(&trace_path, "potential", &plan.potential_trace)?;
        manifest.record(&trace_path);
    }
    manifest.write(&common.out.join("manifest.json"))?;
    println!(
        "planner {} finished: steps {} success {}",
        plan.kind.as_str(),
        plan.steps,
        plan.success
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_command(
    common: CommonArgs,
    plan_path: PathBuf,
    env_path: PathBuf,
    agents_path: Option<PathBuf>,
    agent_params: Option<PathBuf>,
    n_agents: usize,
    kde_rasters: bool,
    gamma_att: f64,
    gamma_ca: f64,
) -> anyhow::Result<()> {
    let env = load_env(&env_path, common.grid_dx)?;
    let (field, grid) = env.build()?;
    let plan = io::read_trajectory(&plan_path)?;
    let initial = match (agents_path, agent_params) {
        (Some(path), _) => io::read_samples_csv(&path)?,
        (None, Some(params_path)) => {
            let params: io::MixtureConfig = io::read_json(&params_path)?;
            let params: MixtureParams<f64> = params.build()?;
            sample(&params, &field, &grid, n_agents, common.seed)?
        }
        (None, None) => bail!("need --agents or --agent-params"),
    };

    let mut cfg = ControlConfig::<f64>::default();
    cfg.gamma_att = gamma_att;
    cfg.gamma_ca = gamma_ca;
    let episode = run_episode(&initial, &plan, &field, &grid, &cfg)?;

    let mut manifest = io::RunManifest::new("simulate", vec![common.seed], &env)?;
    let traj_path = common.out.join("trajectories.csv");
    io::write_agent_trajectories_csv(&traj_path, &episode.trajectories)?;
    manifest.record(&traj_path);
    let metrics_path = common.out.join("episode.csv");
    let metrics = format!(
        "length_mean,length_std,collisions,near_collisions,out_of_bounds,final_l2_sq,target_energy,success\n{},{},{},{},{},{},{},{}\n",
        episode.length_mean,
        episode.length_std,
        episode.events.collisions,
        episode.events.near_collisions,
        episode.events.out_of_bounds,
        episode.final_l2_sq,
        episode.target_energy,
        if episode.success { "yes" } else { "no" }
    );
    io::write_text(&metrics_path, &metrics)?;
    manifest.record(&metrics_path);
    if kde_rasters {
        let positions: Vec<_> = episode
            .trajectories
            .iter()
            .map(|t| *t.last().expect("non-empty trajectory"))
            .collect();
        let h = BandwidthRule::Silverman.resolve(&positions, grid.shape().dx);
        let final_kde = snmm::swarm::kde(&positions, h, &grid)?;
        let raster_path = common.out.join("kde_final.txt");
        io::write_density_raster(&raster_path, &final_kde)?;
        manifest.record(&raster_path);
    }
    manifest.write(&common.out.join("manifest.json"))?;
    println!(
        "episode: mean length {:.2} m, success {}",
        episode.length_mean, episode.success
    );
    Ok(())
}

fn experiment_command(
    common: CommonArgs,
    which: ExperimentArg,
    config_path: Option<PathBuf>,
    full: bool,
) -> anyhow::Result<()> {
    let mut config: ScenarioConfig = match (&config_path, which) {
        (Some(path), _) => io::read_json(path)?,
        (None, ExperimentArg::ExpA) => gen_exp_a(common.seed),
        (None, ExperimentArg::ForestI) => gen_forest(ForestVariant::I, common.seed)?,
        (None, ExperimentArg::ForestIi) => gen_forest(ForestVariant::II, common.seed)?,
    };
    if let Some(dx) = common.grid_dx {
        config.env.grid.dx = dx;
        config.env.grid.dy = dx;
    }
    if full {
        config.n_agents = 300;
        config.n_samples = config.n_samples.max(300);
    }
    let out = common.out.join(&config.name);
    let scenario_path = out.join("scenario.json");
    io::write_json(&scenario_path, &config)?;
    match which {
        ExperimentArg::ExpA => {
            let outcome = run_exp_a(&config, Some(&out))?;
            println!("approach,n_components,nll");
            for row in &outcome.rows {
                println!("{},{},{:.3}", row.approach, row.n_components, row.nll);
            }
        }
        ExperimentArg::ForestI | ExperimentArg::ForestIi => {
            let outcome = run_forest(
                &config,
                &[PlannerKind::Di, PlannerKind::SnmmApf, PlannerKind::GmmApf],
                Some(&out),
            )?;
            print!("{}", outcome.metrics_csv());
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
