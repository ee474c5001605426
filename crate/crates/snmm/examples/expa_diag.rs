// scratch: model-selection sweep diagnostics
use snmm::experiment::{gen_exp_a, mean_error_best_permutation, run_exp_a};
use std::time::Instant;

fn main() {
    let cfg = gen_exp_a(42);
    let t0 = Instant::now();
    let out = run_exp_a(&cfg, None).unwrap();
    println!("sweep took {:.1}s", t0.elapsed().as_secs_f64());
    for row in &out.rows {
        println!("{:9} nc={} nll={:.3}", row.approach, row.n_components, row.nll);
    }
    let truth = cfg.truth.build().unwrap();
    let fit2 = &out.snmm_fits.iter().find(|(nc, _)| *nc == 2).unwrap().1;
    println!("mean recovery error (nc=2): {:.4} m", mean_error_best_permutation(&fit2.params, &truth));
    for (i, c) in fit2.params.components().iter().enumerate() {
        println!("  comp {i}: w={:.3} mu=({:.3},{:.3})", fit2.params.weights()[i], c.mu().x, c.mu().y);
    }
}
