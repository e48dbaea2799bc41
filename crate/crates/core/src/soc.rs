//! Second-order condition checks: the Lagrangian quadratic form on sampled
//! critical directions, its minimum normalized value over the cone, and an
//! empirical quadratic-growth test.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::kkt::ActiveSets;
use crate::mesh::{EllipticOperator, Mesh};
use crate::optimize::{project_box, Solution};
use crate::pde::{field_f_prime, solve_linearized, solve_state};
use crate::problem::{eval_objective, ProblemSpec};

/// A direction in the critical cone: control part `v` and its linearized
/// state response `z` (zero initial data).
#[derive(Clone, Debug)]
pub struct CriticalDirection {
    pub v: Field,
    pub z: Field,
    /// Sign condition on the box-active sets was enforced by construction.
    pub enforced_box_signs: bool,
    /// The mixed tangent condition needed the corrective clamp.
    pub corrected_mixed: bool,
    /// Value of the first-order integral at acceptance.
    pub first_order_value: f64,
}

/// Distribution summary of the quadratic form over accepted samples.
#[derive(Clone, Debug, Serialize)]
pub struct SocReport {
    pub n_requested: usize,
    pub n_accepted: usize,
    pub min_value: f64,
    pub median_value: f64,
    pub soc_margin: f64,
    pub pass: bool,
    pub low_confidence: bool,
    /// Per-sample normalized values (for CSV export).
    pub values: Vec<f64>,
}

/// Quadratic form of the Lagrangian Hessian at `(y, u, phi, e)` evaluated on
/// a direction `(z, v)`:
/// `int L_yy z^2 + 2 L_yu z v + L_uu v^2 + e g_yy z^2 + phi f''(y) z^2`.
pub fn quadratic_form(
    spec: &ProblemSpec,
    y: &Field,
    u: &Field,
    phi: &Field,
    e: &Field,
    dir: &CriticalDirection,
    mesh: &Mesh,
) -> f64 {
    let w = mesh.node_weight() * mesh.dt;
    let mut total = 0.0;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let yv = y.at(level, k);
            let uv = u.at(level, k);
            let zv = dir.z.at(level, k);
            let vv = dir.v.at(level, k);
            total += (spec.l_yy)(x, yc, t, yv, uv) * zv * zv
                + 2.0 * (spec.l_yu)(x, yc, t, yv, uv) * zv * vv
                + (spec.l_uu)(x, yc, t, yv, uv) * vv * vv
                + e.at(level, k) * (spec.g_yy)(x, yc, t, yv) * zv * zv
                + phi.at(level, k) * (spec.f_second)(yv) * zv * zv;
        }
    }
    total * w
}

/// First-order integral `int (L_y z + L_u v)`.
pub fn first_order_integral(
    spec: &ProblemSpec,
    y: &Field,
    u: &Field,
    dir_z: &Field,
    dir_v: &Field,
    mesh: &Mesh,
) -> f64 {
    let w = mesh.node_weight() * mesh.dt;
    let mut total = 0.0;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let yv = y.at(level, k);
            let uv = u.at(level, k);
            total += (spec.l_y)(x, yc, t, yv, uv) * dir_z.at(level, k)
                + (spec.l_u)(x, yc, t, yv, uv) * dir_v.at(level, k);
        }
    }
    total * w
}

/// Tolerance for the first-order and tangent-cone checks, relative to the
/// direction size.
const SOC_TOL: f64 = 1e-7;
/// A multiplier above this magnitude marks its constraint strongly active.
const STRONG_MULTIPLIER: f64 = 1e-7;

/// First-order acceptance threshold: the integral can only be certified to
/// the accuracy of the candidate's stationarity system, so the floor scales
/// with the reported residuals.
fn c1_tolerance(sol: &Solution) -> f64 {
    SOC_TOL.max(50.0 * (sol.report.stationarity + sol.report.adjoint_residual))
}

/// Draw one random critical direction: random `v`, sign handling on the
/// box-active sets (movement blocked where the box multiplier is strongly
/// nonzero, reflected otherwise), linearized response `z`, corrective clamp
/// for the mixed tangent condition (equality where the mixed multiplier is
/// strongly positive), then the first-order filter.
pub fn sample_critical_direction(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    sol: &Solution,
    sets: &ActiveSets,
    mesh: &Mesh,
    rng: &mut ChaCha8Rng,
) -> Result<CriticalDirection> {
    let n = mesh.n_nodes();
    let zero_init = vec![0.0; n];
    let c = field_f_prime(spec, &sol.y, mesh);

    let mut v = Field::zeros(mesh);
    for level in 1..mesh.n_levels() {
        for k in 0..n {
            let idx = sets.idx(level, k);
            let raw: f64 = rng.gen_range(-1.0..1.0);
            let val = if sets.mask_a[idx] {
                if sol.e_hat.at(level, k).abs() > STRONG_MULTIPLIER {
                    0.0
                } else {
                    raw.abs()
                }
            } else if sets.mask_b[idx] {
                if sol.e_hat.at(level, k).abs() > STRONG_MULTIPLIER {
                    0.0
                } else {
                    -raw.abs()
                }
            } else {
                raw
            };
            v.set(level, k, val);
        }
    }
    v.mirror_level0();

    let mut z = solve_linearized(spec, op, &c, &v, &zero_init, mesh)?;
    let mut corrected = false;

    // Mixed tangent condition g_y z + eps v <= 0 on the active set; strongly
    // active nodes are pinned to equality.
    for _ in 0..2 {
        let mut changed = false;
        for level in 1..mesh.n_levels() {
            let t = mesh.time(level);
            for k in 0..n {
                let idx = sets.idx(level, k);
                if !sets.mask_mixed[idx] {
                    continue;
                }
                let (x, yc) = mesh.node_coord(k);
                let gy = (spec.g_y)(x, yc, t, sol.y.at(level, k));
                let bound = -gy * z.at(level, k) / spec.eps;
                let strongly = sol.e.at(level, k) > STRONG_MULTIPLIER;
                let current = v.at(level, k);
                let target = if strongly { bound } else { current.min(bound) };
                if (target - current).abs() > 1e-15 {
                    v.set(level, k, target);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        corrected = true;
        v.mirror_level0();
        z = solve_linearized(spec, op, &c, &v, &zero_init, mesh)?;
    }
    // Residual violations after the bounded correction: zero those nodes.
    let mut zeroed = false;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = sets.idx(level, k);
            if !sets.mask_mixed[idx] {
                continue;
            }
            let (x, yc) = mesh.node_coord(k);
            let gy = (spec.g_y)(x, yc, t, sol.y.at(level, k));
            if gy * z.at(level, k) + spec.eps * v.at(level, k) > SOC_TOL {
                v.set(level, k, 0.0);
                zeroed = true;
            }
        }
    }
    if zeroed {
        v.mirror_level0();
        z = solve_linearized(spec, op, &c, &v, &zero_init, mesh)?;
        corrected = true;
    }

    // Normalize by the control norm.
    let vnorm = v.norm_l2(mesh);
    if vnorm < 1e-14 {
        return Err(CoreError::SamplingExhausted {
            rejected: 1,
            attempts: 1,
        });
    }
    v.scale(1.0 / vnorm);
    z.scale(1.0 / vnorm);

    let size = (z.norm_l2(mesh).powi(2) + 1.0).sqrt();
    let first_order = first_order_integral(spec, &sol.y, &sol.u, &z, &v, mesh);
    if first_order > c1_tolerance(sol) * size {
        return Err(CoreError::SamplingExhausted {
            rejected: 1,
            attempts: 1,
        });
    }

    Ok(CriticalDirection {
        v,
        z,
        enforced_box_signs: true,
        corrected_mixed: corrected,
        first_order_value: first_order,
    })
}

/// Re-verify an accepted direction independently of the sampler: nodewise
/// tangent conditions, the linearized equation residual, and the
/// first-order integral.
pub fn verify_direction(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    sol: &Solution,
    sets: &ActiveSets,
    dir: &CriticalDirection,
    mesh: &Mesh,
) -> Result<()> {
    let n = mesh.n_nodes();
    let dt = mesh.dt;
    let scale = 1.0 + dir.v.norm_inf_active();
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = sets.idx(level, k);
            let vv = dir.v.at(level, k);
            if sets.mask_a[idx] && vv < -SOC_TOL * scale {
                return Err(CoreError::invalid("c3", format!("v < 0 on the lower set: {vv}")));
            }
            if sets.mask_b[idx] && vv > SOC_TOL * scale {
                return Err(CoreError::invalid("c3", format!("v > 0 on the upper set: {vv}")));
            }
            if sets.mask_mixed[idx] {
                let (x, yc) = mesh.node_coord(k);
                let gy = (spec.g_y)(x, yc, t, sol.y.at(level, k));
                let val = gy * dir.z.at(level, k) + spec.eps * vv;
                if val > 10.0 * SOC_TOL * scale {
                    return Err(CoreError::invalid("c4", format!("tangent violated: {val}")));
                }
            }
        }
    }
    // Linearized equation residual (density).
    let mut buf = vec![0.0; n];
    for level in 1..mesh.n_levels() {
        op.apply(dir.z.level(level), &mut buf);
        for k in 0..n {
            let fp = (spec.f_prime)(sol.y.at(level, k));
            let r = dir.z.at(level, k) * (1.0 + dt * fp) + dt * buf[k]
                - dir.z.at(level - 1, k)
                - dt * dir.v.at(level, k);
            if (r / dt).abs() > 1e-8 * scale {
                return Err(CoreError::invalid(
                    "c2",
                    format!("linearized equation residual {:.3e}", r / dt),
                ));
            }
        }
    }
    let fo = first_order_integral(spec, &sol.y, &sol.u, &dir.z, &dir.v, mesh);
    let size = (dir.z.norm_l2(mesh).powi(2) + dir.v.norm_l2(mesh).powi(2)).sqrt();
    if fo > c1_tolerance(sol) * (1.0 + size) {
        return Err(CoreError::invalid("c1", format!("first-order value {fo:.3e}")));
    }
    Ok(())
}

/// Minimum and distribution of the normalized quadratic form over sampled
/// critical directions. `pass` requires the minimum to reach `soc_margin`;
/// fewer than half the requested samples accepted marks the report
/// low-confidence.
#[allow(clippy::too_many_arguments)]
pub fn min_rayleigh(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    sol: &Solution,
    sets: &ActiveSets,
    n_samples: usize,
    seed: u64,
    soc_margin: f64,
    mesh: &Mesh,
) -> Result<SocReport> {
    if n_samples < 10 {
        return Err(CoreError::invalid("n_samples", "need at least 10 samples"));
    }
    let mut values = Vec::with_capacity(n_samples);
    let mut attempts = 0usize;
    let max_attempts = 10 * n_samples;
    let mut sample_index = 0u64;
    while values.len() < n_samples && attempts < max_attempts {
        attempts += 1;
        // Per-sample stream keeps runs reproducible regardless of rejections.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample_index);
        sample_index += 1;
        match sample_critical_direction(spec, op, sol, sets, mesh, &mut rng) {
            Ok(dir) => {
                // v is normalized, so the form value is already normalized.
                values.push(quadratic_form(spec, &sol.y, &sol.u, &sol.phi, &sol.e, &dir, mesh));
            }
            Err(CoreError::SamplingExhausted { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    if values.is_empty() {
        return Err(CoreError::SamplingExhausted {
            rejected: attempts,
            attempts,
        });
    }
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_value = sorted[0];
    let median_value = sorted[sorted.len() / 2];
    let low_confidence = values.len() < n_samples / 2;
    Ok(SocReport {
        n_requested: n_samples,
        n_accepted: values.len(),
        min_value,
        median_value,
        soc_margin,
        pass: min_value >= soc_margin && !low_confidence,
        low_confidence,
        values,
    })
}

/// Quadratic-growth estimate around a solution.
#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub kappa: f64,
    pub n_feasible: usize,
    pub n_tried: usize,
    pub radius: f64,
    pub pass: bool,
    /// All perturbations at this radius were mixed-infeasible.
    pub all_infeasible: bool,
    pub ratios: Vec<f64>,
}

/// Sample random box-projected perturbations of the control, keep the
/// mixed-feasible ones, and estimate `kappa` as the minimum of
/// `(J(u) - J(u_bar)) / ||u - u_bar||^2`.
pub fn growth_test(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    sol: &Solution,
    n_perturb: usize,
    radius: f64,
    seed: u64,
    mesh: &Mesh,
) -> Result<GrowthReport> {
    if !(radius > 0.0) {
        return Err(CoreError::invalid("radius", "must be positive"));
    }
    let j_base = eval_objective(spec, &sol.y, &sol.u, mesh)?;
    let mut ratios = Vec::new();
    for sample in 0..n_perturb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample as u64);
        let mut delta = Field::zeros(mesh);
        for level in 1..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                delta.set(level, k, radius * rng.gen_range(-1.0..1.0));
            }
        }
        let u = project_box(&sol.u.axpy(1.0, &delta), spec.lower, spec.upper);
        let du = u.axpy(-1.0, &sol.u);
        let dist2 = du.inner_l2(&du, mesh);
        if dist2 < 1e-28 {
            continue; // projection collapsed the perturbation
        }
        let (y, _) = solve_state(spec, op, &u, mesh)?;
        // Mixed feasibility filter.
        let mut feasible = true;
        'outer: for level in 1..mesh.n_levels() {
            let t = mesh.time(level);
            for k in 0..mesh.n_nodes() {
                let (x, yc) = mesh.node_coord(k);
                if (spec.g)(x, yc, t, y.at(level, k)) + spec.eps * u.at(level, k) > 0.0 {
                    feasible = false;
                    break 'outer;
                }
            }
        }
        if !feasible {
            continue;
        }
        let j = eval_objective(spec, &y, &u, mesh)?;
        ratios.push((j - j_base) / dist2);
    }
    let all_infeasible = ratios.is_empty();
    let kappa = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(GrowthReport {
        kappa: if all_infeasible { f64::NAN } else { kappa },
        n_feasible: ratios.len(),
        n_tried: n_perturb,
        radius,
        pass: !all_infeasible && kappa > 0.0,
        all_infeasible,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::classify_active_sets;
    use crate::mesh::{assemble_elliptic, build_mesh};
    use crate::optimize::{solve_augmented_lagrangian, OptimizeParams};
    use crate::problem::{make_convex_quadratic, make_example_cubic};

    fn direction(v: Field, z: Field) -> CriticalDirection {
        CriticalDirection {
            v,
            z,
            enforced_box_signs: false,
            corrected_mixed: false,
            first_order_value: 0.0,
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 3).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let zero = Field::zeros(&mesh);
        let dir = direction(Field::zeros(&mesh), Field::zeros(&mesh));
        let q = quadratic_form(&spec, &zero, &zero, &zero, &zero, &dir, &mesh);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn positive_definite_cost_gives_norms() {
        // L = 1/2 (y^2 + u^2): form = ||z||^2 + ||v||^2.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 3).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let zero = Field::zeros(&mesh);
        let v = Field::from_fn(&mesh, |x, _, t| x + t);
        let z = Field::from_fn(&mesh, |x, _, t| x * t);
        let expect = z.norm_l2(&mesh).powi(2) + v.norm_l2(&mesh).powi(2);
        let q = quadratic_form(&spec, &zero, &zero, &zero, &zero, &direction(v, z), &mesh);
        assert!((q - expect).abs() < 1e-12);
        assert!(q > 0.0);
    }

    #[test]
    fn form_is_homogeneous_of_degree_two() {
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.7, 0.2, 0.25).unwrap();
        let y = Field::from_fn(&mesh, |x, _, t| 0.3 * x * (1.0 - x) * (1.0 + t));
        let u = Field::constant(&mesh, 0.4);
        let phi = Field::from_fn(&mesh, |x, _, t| 0.1 * (x - t));
        let e = Field::constant(&mesh, 0.2);
        let v = Field::from_fn(&mesh, |x, _, t| (x + 2.0 * t).sin());
        let z = Field::from_fn(&mesh, |x, _, t| (2.0 * x - t).cos());
        let q1 = quadratic_form(&spec, &y, &u, &phi, &e, &direction(v.clone(), z.clone()), &mesh);
        for &t in &[2.0, 3.0, -1.0] {
            let mut vs = v.clone();
            vs.scale(t);
            let mut zs = z.clone();
            zs.scale(t);
            let qt = quadratic_form(&spec, &y, &u, &phi, &e, &direction(vs, zs), &mesh);
            assert!(
                (qt - t * t * q1).abs() <= 1e-10 * (1.0 + q1.abs()),
                "t = {t}: {qt} vs {}",
                t * t * q1
            );
        }
    }

    #[test]
    fn form_satisfies_polarization() {
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.7, 0.2, 0.25).unwrap();
        let y = Field::from_fn(&mesh, |x, _, t| 0.3 * x * (1.0 - x) * (1.0 + t));
        let u = Field::constant(&mesh, 0.4);
        let phi = Field::from_fn(&mesh, |x, _, t| 0.1 * (x - t));
        let e = Field::constant(&mesh, 0.2);
        let v1 = Field::from_fn(&mesh, |x, _, t| (x + 2.0 * t).sin());
        let z1 = Field::from_fn(&mesh, |x, _, t| (2.0 * x - t).cos());
        let v2 = Field::from_fn(&mesh, |x, _, t| x * t);
        let z2 = Field::from_fn(&mesh, |x, _, t| 1.0 - x * t);
        let q = |va: &Field, za: &Field| {
            quadratic_form(&spec, &y, &u, &phi, &e, &direction(va.clone(), za.clone()), &mesh)
        };
        let sum = q(&v1.axpy(1.0, &v2), &z1.axpy(1.0, &z2))
            + q(&v1.axpy(-1.0, &v2), &z1.axpy(-1.0, &z2));
        let twice = 2.0 * q(&v1, &z1) + 2.0 * q(&v2, &z2);
        assert!((sum - twice).abs() <= 1e-9 * (1.0 + twice.abs()));
    }

    #[test]
    fn pure_control_cost_normalizes_to_one() {
        // L = 1/2 u^2 only: every accepted sample has value exactly 1.
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let mut spec = make_convex_quadratic(0.0, 1.0, 0.0, -10.0, 0.0, 1.0, -5.0, 5.0).unwrap();
        spec.l = std::sync::Arc::new(|_, _, _, _, u| 0.5 * u * u);
        spec.l_y = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        spec.l_yy = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::constant(&mesh, 0.0);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        let sets = classify_active_sets(&sol.u, &sol.y, &spec, &mesh, 1e-8).unwrap();
        let report = min_rayleigh(&spec, &op, &sol, &sets, 20, 3, 0.0, &mesh).unwrap();
        for v in &report.values {
            assert!((v - 1.0).abs() < 1e-9, "value {v}");
        }
    }

    #[test]
    fn sampler_respects_lower_bound_signs() {
        // Weakly active lower bound everywhere: v >= 0 nodewise.
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.0, -10.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        // Hand-built "solution" at u = a with zero multipliers (weakly
        // active KKT point of the cost with y_d = 0 and u free to rise).
        let u = Field::constant(&mesh, 0.0);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let zero = Field::zeros(&mesh);
        let sol = Solution {
            u: u.clone(),
            y: y.clone(),
            phi: zero.clone(),
            e: zero.clone(),
            e_hat: zero.clone(),
            objective: 0.0,
            report: fake_report(),
            history: Vec::new(),
            inner_history: Vec::new(),
            certified: true,
        };
        let sets = classify_active_sets(&u, &y, &spec, &mesh, 1e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut found = 0;
        for stream in 0..20u64 {
            rng.set_stream(stream);
            if let Ok(dir) = sample_critical_direction(&spec, &op, &sol, &sets, &mesh, &mut rng) {
                found += 1;
                for level in 1..mesh.n_levels() {
                    for k in 0..mesh.n_nodes() {
                        assert!(dir.v.at(level, k) >= -1e-12);
                    }
                }
            }
        }
        assert!(found > 0, "no directions accepted");
    }

    fn fake_report() -> crate::kkt::KktReport {
        crate::kkt::KktReport {
            stationarity: 0.0,
            adjoint_residual: 0.0,
            state_residual: 0.0,
            complementarity: 0.0,
            e_min: 0.0,
            ehat_sign_violation: 0.0,
            mixed_feasibility: 0.0,
            box_violation: 0.0,
            separation_gamma: 0.0,
            h4_prime_margin: 0.0,
            degenerate_overlap: 0,
            kkt_tol: 1e-6,
            certified: true,
        }
    }

    #[test]
    fn accepted_directions_reverify() {
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.4, -0.45, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::constant(&mesh, 0.2);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        let sets = classify_active_sets(&sol.u, &sol.y, &spec, &mesh, 1e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for stream in 0..30u64 {
            rng.set_stream(stream);
            if let Ok(dir) = sample_critical_direction(&spec, &op, &sol, &sets, &mesh, &mut rng) {
                verify_direction(&spec, &op, &sol, &sets, &dir, &mesh).unwrap();
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn indefinite_cost_detected() {
        let mesh = build_mesh(1, 1.0, 0.0, 6, 0, 1.0, 4).unwrap();
        let mut spec = make_convex_quadratic(0.0, 1.0, 0.0, -10.0, 0.0, 1.0, -5.0, 5.0).unwrap();
        // Negate the control curvature on purpose.
        spec.l = std::sync::Arc::new(|_, _, _, _, u| -0.5 * u * u);
        spec.l_u = std::sync::Arc::new(|_, _, _, _, u| -u);
        spec.l_uu = std::sync::Arc::new(|_, _, _, _, _| -1.0);
        spec.l_y = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        spec.l_yy = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.1);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let zero = Field::zeros(&mesh);
        let sol = Solution {
            u: u.clone(),
            y: y.clone(),
            phi: zero.clone(),
            e: zero.clone(),
            e_hat: zero.clone(),
            objective: 0.0,
            report: fake_report(),
            history: Vec::new(),
            inner_history: Vec::new(),
            certified: true,
        };
        let sets = classify_active_sets(&u, &y, &spec, &mesh, 1e-8).unwrap();
        let report = min_rayleigh(&spec, &op, &sol, &sets, 20, 7, 0.0, &mesh).unwrap();
        assert!(report.min_value < 0.0, "min {}", report.min_value);
        assert!(!report.pass);
    }

    #[test]
    fn growth_zero_perturbation_guarded() {
        // Radius so small every projected perturbation collapses: with the
        // control pinned at both bounds... instead verify the dist2 guard by
        // an interior solution and radius 0 rejection.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 3).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.3, -10.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::constant(&mesh, 0.5);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        assert!(growth_test(&spec, &op, &sol, 5, 0.0, 1, &mesh).is_err());
        let rep = growth_test(&spec, &op, &sol, 30, 1e-2, 1, &mesh).unwrap();
        assert!(rep.n_feasible > 0);
        assert!(rep.pass, "kappa = {}", rep.kappa);
    }
}
