// scratch: repulsive-mass profile along the gmm-apf plan
use snmm::experiment::{gen_forest, ForestVariant};
use snmm::learn::fit_gmm;
use snmm::mixture::sample;
use snmm::plan::{plan_apf, repulsive_potential, ApfConfig, PlannerMode};

fn main() {
    let cfg = gen_forest(ForestVariant::II, 42).unwrap();
    let (field, grid) = cfg.env.build().unwrap();
    let truth = cfg.truth.build().unwrap();
    let goal = cfg.goal.as_ref().unwrap().build().unwrap();
    let agents = sample(&truth, &field, &grid, 100, cfg.seeds.data).unwrap();
    let gmm_fit = fit_gmm(&agents, 2, cfg.seeds.learn).unwrap();
    let pc = ApfConfig::<f64>::default();
    let plan = plan_apf(&gmm_fit, &goal, &field, &grid, &pc, PlannerMode::Gmm).unwrap();
    println!("steps={} success={} frames={}", plan.steps, plan.success, plan.frames.len());
    let n = plan.frames.len();
    for k in (0..n).step_by((n / 14).max(1)) {
        let f = &plan.frames[k];
        let rep = repulsive_potential(&f.params, &field, &grid);
        let c0 = f.params.component(0);
        let c1 = f.params.component(1);
        println!(
            "frame {k:5}: u_rep={rep:.4} mu0=({:.1},{:.1}) mu1=({:.1},{:.1}) eig0={:.2}/{:.2}",
            c0.mu().x, c0.mu().y, c1.mu().x, c1.mu().y,
            c0.sigma().eigenvalues_sym().0, c0.sigma().eigenvalues_sym().1,
        );
    }
}
