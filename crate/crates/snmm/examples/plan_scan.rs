// scratch: planner-only scan over forest variants
use snmm::experiment::{gen_forest, ForestVariant};
use snmm::learn::{fit_gmm, fit_snmm, LearnConfig};
use snmm::mixture::sample;
use snmm::plan::{plan_apf, ApfConfig, PlannerMode};
use std::time::Instant;

fn main() {
    for variant in [ForestVariant::I, ForestVariant::II] {
        let cfg = gen_forest(variant, 42).unwrap();
        let (field, grid) = cfg.env.build().unwrap();
        let truth = cfg.truth.build().unwrap();
        let goal = cfg.goal.as_ref().unwrap().build().unwrap();
        let agents = sample(&truth, &field, &grid, 100, cfg.seeds.data).unwrap();
        let mut lc = LearnConfig::<f64>::new(2, cfg.seeds.learn);
        lc.outer_iters = 60;
        let snmm_fit = fit_snmm(&agents, &lc, &field).unwrap();
        let gmm_fit = fit_gmm(&agents, 2, cfg.seeds.learn).unwrap();
        let pc = ApfConfig::<f64>::default();
        let t0 = Instant::now();
        let ps = plan_apf(&snmm_fit.params, &goal, &field, &grid, &pc, PlannerMode::Snmm).unwrap();
        let t1 = Instant::now();
        let pg = plan_apf(&gmm_fit, &goal, &field, &grid, &pc, PlannerMode::Gmm).unwrap();
        let t2 = Instant::now();
        println!(
            "{}: snmm-apf steps={} ok={} ({:.1}s) | gmm-apf steps={} ok={} ({:.1}s)",
            cfg.name, ps.steps, ps.success, (t1-t0).as_secs_f64(), pg.steps, pg.success, (t2-t1).as_secs_f64()
        );
    }
}
