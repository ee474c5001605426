// scratch: end-to-end forest pipeline diagnostics
use snmm::experiment::{gen_forest, run_forest, ForestVariant};
use snmm::plan::PlannerKind;
use std::time::Instant;

fn main() {
    for variant in [ForestVariant::I, ForestVariant::II] {
        let cfg = gen_forest(variant, 42).unwrap();
        println!("=== {} ({} trees) ===", cfg.name, cfg.env.obstacles.len());
        let t0 = Instant::now();
        let out = run_forest(
            &cfg,
            &[PlannerKind::Di, PlannerKind::SnmmApf, PlannerKind::GmmApf],
            None,
        )
        .unwrap();
        for o in &out.outcomes {
            println!(
                "{:9} steps={:5} plan_ok={:5} ep_ok={:5} time={:7.2}s len={:6.2}±{:5.2} l2/E={:.3} coll={} near={} oob={} minpair={:.4}",
                o.row.approach.as_str(),
                o.row.steps,
                o.plan.success,
                o.episode.success,
                o.row.planning_secs,
                o.row.length_mean,
                o.row.length_std,
                o.episode.final_l2_sq / o.episode.target_energy,
                o.episode.events.collisions,
                o.episode.events.near_collisions,
                o.episode.events.out_of_bounds,
                o.episode.events.min_pair_distance,
            );
        }
        println!("total {:.1?}s", t0.elapsed());
    }
}
