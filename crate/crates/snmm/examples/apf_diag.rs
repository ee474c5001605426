// scratch: APF descent diagnostics
use snmm::experiment::{gen_forest, ForestVariant};
use snmm::learn::{fit_snmm, LearnConfig};
use snmm::mixture::sample;
use snmm::plan::{plan_apf, ApfConfig, PlannerMode};

fn main() {
    let cfg = gen_forest(ForestVariant::I, 42).unwrap();
    let (field, grid) = cfg.env.build().unwrap();
    let truth = cfg.truth.build().unwrap();
    let goal = cfg.goal.as_ref().unwrap().build().unwrap();
    let agents = sample(&truth, &field, &grid, 100, cfg.seeds.data).unwrap();
    let mut lc = LearnConfig::<f64>::new(2, cfg.seeds.learn);
    lc.outer_iters = 60;
    let fit = fit_snmm(&agents, &lc, &field).unwrap();
    println!("fitted means: {:?} {:?}", fit.params.component(0).mu(), fit.params.component(1).mu());

    for (rm, rc, gcs) in [(0.05, 0.005, 1.0), (0.1, 0.01, 1.0), (0.2, 0.02, 1.0), (0.1, 0.01, 3.0)] {
        let mut pc = ApfConfig::<f64>::default();
        pc.rate_mu = rm; pc.rate_chol = rc; pc.gamma_cs = gcs;
        pc.max_steps = 3000;
        let plan = plan_apf(&fit.params, &goal, &field, &grid, &pc, PlannerMode::Snmm).unwrap();
        let last = plan.frames.last().unwrap();
        let c0 = last.params.component(0);
        let c1 = last.params.component(1);
        let tr = &plan.potential_trace;
        println!(
            "rm={rm} rc={rc} gcs={gcs}: steps={} frames={} success={} U: {:.2} -> {:.2}  mu0=({:.1},{:.1}) mu1=({:.1},{:.1}) sig0_eigs={:?}",
            plan.steps, plan.frames.len(), plan.success,
            tr.first().unwrap(), tr.last().unwrap(),
            c0.mu().x, c0.mu().y, c1.mu().x, c1.mu().y,
            c0.sigma().eigenvalues_sym(),
        );
    }
}
