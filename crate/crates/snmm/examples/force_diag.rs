// scratch: decompose the x-gradient at the wall face
use snmm::experiment::{gen_forest, ForestVariant};
use snmm::linalg::{Mat2, Vec2};
use snmm::mixture::{MixtureParams, SnComponent};
use snmm::plan::{potential_cs, potential_sn, repulsive_potential, GoalSpec};

fn main() {
    let cfg = gen_forest(ForestVariant::II, 42).unwrap();
    let (field, grid) = cfg.env.build().unwrap();
    let goal = cfg.goal.as_ref().unwrap().build().unwrap();
    let free = snmm::env::SkewField::free(*field.workspace());
    let grid_free = snmm::grid::QuadratureGrid::build(field.workspace(), 0.1, 0.1, &free).unwrap();

    // A GMM mid-approach: both components at the wall face.
    let mk = |x0: f64| MixtureParams::new(
        vec![0.5, 0.5],
        vec![
            SnComponent::new(Vec2::new(x0, 11.9), Mat2::symmetric(1.3, 0.0, 1.3)).unwrap(),
            SnComponent::new(Vec2::new(x0, 8.1), Mat2::symmetric(1.3, 0.0, 1.3)).unwrap(),
        ],
    ).unwrap();
    let h = 1e-4;
    for x0 in [6.5, 7.0, 7.5, 8.0] {
        let params = mk(x0);
        let rep = repulsive_potential(&params, &field, &grid);
        // d/dx0 of each term (moving both components together).
        let d = |f: &dyn Fn(&MixtureParams<f64>) -> f64| {
            (f(&mk(x0 + h)) - f(&mk(x0 - h))) / (2.0 * h)
        };
        let d_sn = d(&|p| potential_sn(p, &goal, &free, &grid_free).unwrap());
        let d_cs = d(&|p| potential_cs(p, &goal, &free, &grid_free).unwrap());
        let d_rep = d(&|p| {
            let u = repulsive_potential(p, &field, &grid);
            if u > 0.05 { (u / 0.05).ln() } else { 0.0 }
        });
        println!(
            "x0={x0}: u_rep={rep:.4} | dU_SN/dx={d_sn:+.3} dU_CS/dx={d_cs:+.3} d(rep)/dx={d_rep:+.3} | total (gsn=1,gcs=0.5,grep=1): {:+.3}",
            d_sn + 0.5 * d_cs + d_rep
        );
    }
}
