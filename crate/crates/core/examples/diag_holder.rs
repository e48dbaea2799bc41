// quick diagnostic: dump holder bins for the certified states
use paroc_core::field::Field;
use paroc_core::kkt::{classify_active_sets, default_tol_act};
use paroc_core::mesh::{assemble_elliptic, build_mesh};
use paroc_core::optimize::{solve_augmented_lagrangian, OptimizeParams};
use paroc_core::problem::make_example_cubic;
use paroc_core::regularity::holder_estimate;

fn main() {
    for nx in [16usize, 32] {
        let spec = make_example_cubic(0.1, 1.0, 0.1, 0.3, 1.2).unwrap();
        let mesh = build_mesh(2, 1.0, 1.0, nx, nx, 1.0, 32).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::zeros(&mesh);
        let sol = solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh).unwrap();
        let sets = classify_active_sets(&sol.u, &sol.y, &spec, &mesh, default_tol_act(&spec)).unwrap();
        println!("nx={nx} lower={} mixed={}", sets.count_active(&sets.mask_a), sets.count_active(&sets.mask_mixed));
        for (name, f) in [("y", &sol.y), ("phi", &sol.phi)] {
            let est = holder_estimate(f, &mesh, 40_000, 7, true, None).unwrap();
            println!("  {name}: alpha={:.3} bins:", est.alpha);
            for (d, m) in &est.bins {
                println!("    d={:.4} inc={:.4e} (log-slope next)", d, m);
            }
        }
    }
}
