// scratch: gamma_cs window scan
use snmm::experiment::{gen_forest, ForestVariant};
use snmm::learn::{fit_gmm, fit_snmm, LearnConfig};
use snmm::mixture::sample;
use snmm::plan::{plan_apf, ApfConfig, PlannerMode};

fn main() {
    for gcs in [0.2, 0.25, 0.3] {
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
            let mut pc = ApfConfig::<f64>::default();
            pc.gamma_cs = gcs;
            let ps = plan_apf(&snmm_fit.params, &goal, &field, &grid, &pc, PlannerMode::Snmm).unwrap();
            let pg = plan_apf(&gmm_fit, &goal, &field, &grid, &pc, PlannerMode::Gmm).unwrap();
            println!(
                "gcs={gcs} {}: snmm steps={} ok={} | gmm steps={} ok={}",
                cfg.name, ps.steps, ps.success, pg.steps, pg.success
            );
        }
    }
}
