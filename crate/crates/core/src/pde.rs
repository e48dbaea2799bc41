//! Implicit-Euler solvers for the state, linearized and adjoint equations.
//!
//! Each time step of the state equation solves
//! `(I + dt A) y^n + dt f(y^n) = y^{n-1} + dt u^n` by damped Newton; the
//! systems are SPD because `f' >= 0` only adds to the diagonal. The adjoint
//! solver is the exact transpose of the linearized scheme (the step matrices
//! are symmetric), so reduced gradients of the discrete objective are exact
//! up to solver tolerances.

use std::time::Instant;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::linalg::{conjugate_gradient, norm_inf};
use crate::mesh::{EllipticOperator, Mesh};
use crate::problem::ProblemSpec;

/// Solver tolerances. The Newton tolerance applies to the max norm of the
/// step residual and is scaled by `dt` (the step equation carries a factor
/// `dt` relative to the equation density).
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub max_halvings: usize,
    pub lin_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_tol: 1e-11,
            newton_max_iters: 50,
            max_halvings: 30,
            lin_tol: 1e-13,
        }
    }
}

/// Per-solve diagnostics.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PdeSolveDiagnostics {
    pub newton_iters: Vec<usize>,
    pub max_residuals: Vec<f64>,
    pub linear_iters: Vec<usize>,
    /// Wall time in seconds; excluded from persisted reports so identical
    /// runs stay byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn step_tolerance(opts: &SolverOptions, mesh: &Mesh, rhs_scale: f64) -> f64 {
    // Floor: the inner CG solves leave O(lin_tol * ||rhs||) in the Newton
    // residual, so asking for less would spin the line search.
    (opts.newton_tol * mesh.dt).max(30.0 * opts.lin_tol * (1.0 + rhs_scale))
}

/// Solve the semilinear state equation for a given control.
///
/// `y(.,0)` is the initial datum sampled on the nodes; each step starts
/// Newton from the previous level (see [`solve_state_with`] to override).
pub fn solve_state(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    mesh: &Mesh,
) -> Result<(Field, PdeSolveDiagnostics)> {
    solve_state_with(spec, op, u, mesh, &SolverOptions::default(), false)
}

/// State solve with explicit options. When `newton_from_zero` is set, Newton
/// starts each step from zero instead of the previous level (used by the
/// uniqueness surrogate test).
pub fn solve_state_with(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    mesh: &Mesh,
    opts: &SolverOptions,
    newton_from_zero: bool,
) -> Result<(Field, PdeSolveDiagnostics)> {
    u.require_match(mesh, "u")?;
    u.require_finite("u")?;
    let start = Instant::now();
    let n = mesh.n_nodes();
    let dt = mesh.dt;

    let y0 = spec.sample_initial(mesh)?;
    let mut y = Field::zeros(mesh);
    y.set_level(0, &y0);

    let mut diag = PdeSolveDiagnostics::default();
    let mut prev = y0;

    for step in 1..=mesh.nt {
        let rhs: Vec<f64> = (0..n).map(|k| prev[k] + dt * u.at(step, k)).collect();
        let tol = step_tolerance(opts, mesh, norm_inf(&rhs));
        let mut yn = if newton_from_zero { vec![0.0; n] } else { prev.clone() };

        let residual = |yv: &[f64], out: &mut [f64]| -> Result<()> {
            op.apply(yv, out);
            for k in 0..n {
                let fv = (spec.f)(yv[k]);
                if !fv.is_finite() {
                    return Err(CoreError::NonFinite {
                        what: "f(y)",
                        node: k,
                        level: step,
                    });
                }
                out[k] = yv[k] + dt * out[k] + dt * fv - rhs[k];
            }
            Ok(())
        };

        let mut res = vec![0.0; n];
        residual(&yn, &mut res)?;
        let mut res_norm = norm_inf(&res);
        let mut iters = 0;
        let mut lin_total = 0;

        while res_norm > tol {
            if iters >= opts.newton_max_iters {
                return Err(CoreError::NewtonDiverged {
                    step,
                    residual: res_norm,
                    iters,
                });
            }
            // Jacobian: I + dt A + dt diag(f'(y)); SPD since f' >= 0.
            let fp: Vec<f64> = yn.iter().map(|v| (spec.f_prime)(*v)).collect();
            let apply = |v: &[f64], out: &mut [f64]| {
                op.apply(v, out);
                for k in 0..n {
                    out[k] = v[k] + dt * out[k] + dt * fp[k] * v[k];
                }
            };
            let precond: Vec<f64> = (0..n).map(|k| 1.0 + dt * op.diag()[k] + dt * fp[k]).collect();
            let neg_res: Vec<f64> = res.iter().map(|r| -r).collect();
            let mut delta = vec![0.0; n];
            lin_total += conjugate_gradient(&apply, &neg_res, &mut delta, &precond, opts.lin_tol, 20 * n)
                .map_err(|e| match e {
                    CoreError::LinearBreakdown { curvature, min_diag, .. } => {
                        CoreError::LinearBreakdown { step, curvature, min_diag }
                    }
                    other => other,
                })?;

            // Damped update: halve until the residual decreases.
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial: Vec<f64> = (0..n).map(|k| yn[k] + s * delta[k]).collect();
                let mut trial_res = vec![0.0; n];
                residual(&trial, &mut trial_res)?;
                let trial_norm = norm_inf(&trial_res);
                if trial_norm < res_norm || trial_norm <= tol {
                    yn = trial;
                    res = trial_res;
                    res_norm = trial_norm;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                return Err(CoreError::NewtonDiverged {
                    step,
                    residual: res_norm,
                    iters,
                });
            }
            iters += 1;
        }

        diag.newton_iters.push(iters);
        diag.max_residuals.push(res_norm);
        diag.linear_iters.push(lin_total);
        y.set_level(step, &yn);
        prev = yn;
    }

    diag.wall_seconds = start.elapsed().as_secs_f64();
    Ok((y, diag))
}

/// Solve the linear equation `y_t + A y + c(x,t) y = rhs`, `y(0) = init`,
/// by implicit Euler. `c` plays `f'(y_bar)` (or `f'(y_bar) + alpha` in the
/// Robinson construction) and is evaluated at the new time level.
pub fn solve_linearized(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    c: &Field,
    rhs: &Field,
    init: &[f64],
    mesh: &Mesh,
) -> Result<Field> {
    let _ = spec;
    c.require_match(mesh, "c")?;
    rhs.require_match(mesh, "rhs")?;
    c.require_finite("c")?;
    let n = mesh.n_nodes();
    if init.len() != n {
        return Err(CoreError::DimensionMismatch(format!(
            "init has {} entries, mesh wants {n}",
            init.len()
        )));
    }
    let opts = SolverOptions::default();
    let dt = mesh.dt;
    let mut y = Field::zeros(mesh);
    y.set_level(0, init);
    let mut prev = init.to_vec();

    for step in 1..=mesh.nt {
        let cl = c.level(step);
        let b: Vec<f64> = (0..n).map(|k| prev[k] + dt * rhs.at(step, k)).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            op.apply(v, out);
            for k in 0..n {
                out[k] = v[k] + dt * out[k] + dt * cl[k] * v[k];
            }
        };
        let precond: Vec<f64> = (0..n).map(|k| 1.0 + dt * op.diag()[k] + dt * cl[k]).collect();
        let mut x = prev.clone();
        conjugate_gradient(&apply, &b, &mut x, &precond, opts.lin_tol, 20 * n).map_err(
            |e| match e {
                CoreError::LinearBreakdown { curvature, min_diag, .. } => {
                    CoreError::LinearBreakdown { step, curvature, min_diag }
                }
                other => other,
            },
        )?;
        y.set_level(step, &x);
        prev = x;
    }
    Ok(y)
}

/// Solve the adjoint equation backward in time:
/// `-phi_t + A phi + f'(y_bar) phi = -L_y - e g_y`, `phi(.,T) = 0`.
///
/// This is the exact transpose of the implicit-Euler linearized scheme: for
/// `n = nt..1`, `(I + dt A + dt f'(y^n)) phi^n = phi^{n+1} + dt s^n` with the
/// ghost value `phi^{nt+1} = 0` carrying the terminal condition. Level 0 is
/// filled by one extra backward step for reporting.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    y_bar: &Field,
    e: &Field,
    mesh: &Mesh,
) -> Result<Field> {
    let source = adjoint_source(spec, y_bar, e, mesh)?;
    let c = field_f_prime(spec, y_bar, mesh);
    solve_backward(op, &c, &source, mesh)
}

/// Source `-L_y[x,t] - e g_y[x,t]` evaluated along a state/control pair.
/// `L_y` needs the control; the caller passes it via [`adjoint_source_with_u`]
/// when the running cost couples `y` and `u`; this variant evaluates `L_y` at
/// `u = 0`, which is exact for costs with `L_yu = 0`.
fn adjoint_source(spec: &ProblemSpec, y_bar: &Field, e: &Field, mesh: &Mesh) -> Result<Field> {
    adjoint_source_with_u(spec, y_bar, None, e, mesh)
}

pub fn adjoint_source_with_u(
    spec: &ProblemSpec,
    y_bar: &Field,
    u_bar: Option<&Field>,
    e: &Field,
    mesh: &Mesh,
) -> Result<Field> {
    y_bar.require_match(mesh, "y_bar")?;
    e.require_match(mesh, "e")?;
    let mut s = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let yv = y_bar.at(level, k);
            let uv = u_bar.map(|u| u.at(level, k)).unwrap_or(0.0);
            let v = -(spec.l_y)(x, yc, t, yv, uv) - e.at(level, k) * (spec.g_y)(x, yc, t, yv);
            s.set(level, k, v);
        }
    }
    Ok(s)
}

pub fn field_f_prime(spec: &ProblemSpec, y_bar: &Field, mesh: &Mesh) -> Field {
    let mut c = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        for k in 0..mesh.n_nodes() {
            c.set(level, k, (spec.f_prime)(y_bar.at(level, k)));
        }
    }
    c
}

/// Backward sweep shared by the adjoint variants: for `n = nt..0`,
/// `(I + dt A + dt c^n) phi^n = phi^{n+1} + dt source^n`, ghost
/// `phi^{nt+1} = 0`.
pub fn solve_backward(
    op: &EllipticOperator,
    c: &Field,
    source: &Field,
    mesh: &Mesh,
) -> Result<Field> {
    let opts = SolverOptions::default();
    let n = mesh.n_nodes();
    let dt = mesh.dt;
    let mut phi = Field::zeros(mesh);
    let mut next = vec![0.0; n];

    for step in (0..=mesh.nt).rev() {
        let cl = c.level(step);
        let b: Vec<f64> = (0..n).map(|k| next[k] + dt * source.at(step, k)).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            op.apply(v, out);
            for k in 0..n {
                out[k] = v[k] + dt * out[k] + dt * cl[k] * v[k];
            }
        };
        let precond: Vec<f64> = (0..n).map(|k| 1.0 + dt * op.diag()[k] + dt * cl[k]).collect();
        let mut x = next.clone();
        conjugate_gradient(&apply, &b, &mut x, &precond, opts.lin_tol, 20 * n).map_err(
            |e| match e {
                CoreError::LinearBreakdown { curvature, min_diag, .. } => {
                    CoreError::LinearBreakdown { step, curvature, min_diag }
                }
                other => other,
            },
        )?;
        phi.set_level(step, &x);
        next = x;
    }
    Ok(phi)
}

/// Discrete analogues of the a-priori estimates: the ratio
/// `||y||_inf / (||u||_{L^p(0,T;L2)} + ||y0||_inf)` (with `p = 4`) and the
/// time-derivative ratio
/// `||dy/dt||_{L2(0,T;L2)} / (||u||_{L2} + ||y0||_inf + ||y0||_{H1})`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AprioriRatios {
    pub sup_ratio: f64,
    pub time_derivative_ratio: f64,
}

pub fn apriori_check(y: &Field, u: &Field, y0: &[f64], mesh: &Mesh) -> Result<AprioriRatios> {
    y.require_match(mesh, "y")?;
    u.require_match(mesh, "u")?;
    let n = mesh.n_nodes();
    let w = mesh.node_weight();
    let p = 4.0;

    let y_sup = y.norm_inf();
    let y0_sup = y0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    // ||u||_{L^p(0,T;L2)}.
    let mut up = 0.0;
    for level in 1..mesh.n_levels() {
        let l2: f64 = u.level(level).iter().map(|v| v * v).sum::<f64>() * w;
        up += mesh.dt * l2.sqrt().powf(p);
    }
    let u_lp = up.powf(1.0 / p);

    let denom_sup = u_lp + y0_sup;
    let sup_ratio = if y_sup == 0.0 {
        0.0
    } else {
        y_sup / denom_sup.max(f64::MIN_POSITIVE)
    };

    // ||dy/dt|| by difference quotients.
    let mut dy2 = 0.0;
    for level in 1..mesh.n_levels() {
        let mut l2 = 0.0;
        for k in 0..n {
            let d = (y.at(level, k) - y.at(level - 1, k)) / mesh.dt;
            l2 += d * d;
        }
        dy2 += mesh.dt * l2 * w;
    }
    let dy_l2 = dy2.sqrt();

    let u_l2 = u.norm_l2(mesh);
    // Discrete H1 norm of y0 (forward differences, zero boundary).
    let mut grad2 = 0.0;
    if mesh.dim == 1 {
        for k in 0..=n {
            let a = if k == 0 { 0.0 } else { y0[k - 1] };
            let b = if k == n { 0.0 } else { y0[k] };
            grad2 += ((b - a) / mesh.hx).powi(2) * mesh.hx;
        }
    } else {
        for iy in 0..mesh.ny {
            for ix in 0..=mesh.nx {
                let a = if ix == 0 { 0.0 } else { y0[mesh.flat_index(ix - 1, iy)] };
                let b = if ix == mesh.nx { 0.0 } else { y0[mesh.flat_index(ix, iy)] };
                grad2 += ((b - a) / mesh.hx).powi(2) * w;
            }
        }
        for ix in 0..mesh.nx {
            for iy in 0..=mesh.ny {
                let a = if iy == 0 { 0.0 } else { y0[mesh.flat_index(ix, iy - 1)] };
                let b = if iy == mesh.ny { 0.0 } else { y0[mesh.flat_index(ix, iy)] };
                grad2 += ((b - a) / mesh.hy).powi(2) * w;
            }
        }
    }
    let y0_l2: f64 = y0.iter().map(|v| v * v).sum::<f64>() * w;
    let y0_h1 = (grad2 + y0_l2).sqrt();

    let denom_dt = u_l2 + y0_sup + y0_h1;
    let time_derivative_ratio = if dy_l2 == 0.0 {
        0.0
    } else {
        dy_l2 / denom_dt.max(f64::MIN_POSITIVE)
    };

    Ok(AprioriRatios {
        sup_ratio,
        time_derivative_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_elliptic, build_mesh};
    use crate::problem::{eval_objective, make_convex_quadratic, make_example_cubic, ProblemSpec};
    use std::sync::Arc;

    fn heat_spec() -> ProblemSpec {
        // f = 0 via the convex catalog with c = 0.
        make_convex_quadratic(0.0, 1.0, 0.0, -1.0, 0.0, 1.0, -10.0, 10.0).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_state() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let spec = heat_spec();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::zeros(&mesh);
        let (y, diag) = solve_state(&spec, &op, &u, &mesh).unwrap();
        assert_eq!(y.norm_inf(), 0.0);
        assert!(diag.newton_iters.iter().all(|&i| i == 0));
    }

    #[test]
    fn matches_heat_kernel() {
        // y0 = sin(pi x), u = 0, f = 0: y = exp(-pi^2 t) sin(pi x).
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for &(nx, nt) in &[(31usize, 256usize), (63, 1024)] {
            let mesh = build_mesh(1, 1.0, 0.0, nx, 0, 1.0, nt).unwrap();
            let mut spec = heat_spec();
            spec.y0 = Arc::new(move |x, _, _| (pi * x).sin());
            let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
            let u = Field::zeros(&mesh);
            let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
            let mut err = 0.0_f64;
            for level in 0..mesh.n_levels() {
                let t = mesh.time(level);
                for k in 0..mesh.n_nodes() {
                    let (x, _) = mesh.node_coord(k);
                    let exact = (-pi * pi * t).exp() * (pi * x).sin();
                    err = err.max((y.at(level, k) - exact).abs());
                }
            }
            errs.push(err);
        }
        assert!(errs[0] < 1e-2, "coarse error {}", errs[0]);
        // dt-dominated: halving h and quartering dt should divide the error by ~4.
        assert!(errs[0] / errs[1] > 3.0, "errors {errs:?}");
    }

    #[test]
    fn cubic_state_stays_nonnegative() {
        let mesh = build_mesh(2, 1.0, 1.0, 8, 8, 1.0, 16).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.3, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.5);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        assert!(y.min() >= -1e-12, "min y = {}", y.min());
    }

    #[test]
    fn linearized_zero_data() {
        let mesh = build_mesh(1, 1.0, 0.0, 9, 0, 1.0, 4).unwrap();
        let spec = heat_spec();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let c = Field::constant(&mesh, 0.5);
        let rhs = Field::zeros(&mesh);
        let z = solve_linearized(&spec, &op, &c, &rhs, &vec![0.0; 9], &mesh).unwrap();
        assert_eq!(z.norm_inf(), 0.0);
    }

    #[test]
    fn linearized_with_zero_c_equals_state_solve() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let mut spec = heat_spec();
        let pi = std::f64::consts::PI;
        spec.y0 = Arc::new(move |x, _, _| (pi * x).sin());
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::from_fn(&mesh, |x, _, t| x * (1.0 - x) * (1.0 + t));
        let (y_state, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let c = Field::zeros(&mesh);
        let init = spec.sample_initial(&mesh).unwrap();
        let y_lin = solve_linearized(&spec, &op, &c, &u, &init, &mesh).unwrap();
        for level in 0..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                assert!((y_state.at(level, k) - y_lin.at(level, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearized_is_tangent_of_state_map() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 16).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.4);
        let v = Field::from_fn(&mesh, |x, _, t| (3.0 * x + t).sin());
        let (y_u, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let c = field_f_prime(&spec, &y_u, &mesh);
        let z = solve_linearized(&spec, &op, &c, &v, &vec![0.0; 15], &mesh).unwrap();

        let defect = |s: f64| -> f64 {
            let us = u.axpy(s, &v);
            let (ys, _) = solve_state(&spec, &op, &us, &mesh).unwrap();
            let lin = y_u.axpy(s, &z);
            ys.axpy(-1.0, &lin).norm_inf()
        };
        let d1 = defect(1e-2);
        let d2 = defect(5e-3);
        // O(s^2): halving s divides the defect by ~4.
        assert!(d1 / d2 > 3.3, "defects {d1:.3e} {d2:.3e}");
    }

    #[test]
    fn adjoint_zero_sources() {
        let mesh = build_mesh(1, 1.0, 0.0, 9, 0, 1.0, 4).unwrap();
        let mut spec = heat_spec();
        spec.l_y = Arc::new(|_, _, _, _, _| 0.0);
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let y = Field::zeros(&mesh);
        let e = Field::zeros(&mesh);
        let phi = solve_adjoint(&spec, &op, &y, &e, &mesh).unwrap();
        assert_eq!(phi.norm_inf(), 0.0);
    }

    #[test]
    fn adjoint_equals_time_reversed_forward_solve() {
        let mesh = build_mesh(1, 1.0, 0.0, 11, 0, 1.0, 7).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.3, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.3);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let e = Field::from_fn(&mesh, |x, _, t| 0.2 * x * t);
        let phi = solve_adjoint(&spec, &op, &y, &e, &mesh).unwrap();

        // Forward solve with reversed coefficient and source, then flip.
        let c = field_f_prime(&spec, &y, &mesh);
        let src = adjoint_source_with_u(&spec, &y, None, &e, &mesh).unwrap();
        let nt = mesh.nt;
        let mut c_rev = Field::zeros(&mesh);
        let mut s_rev = Field::zeros(&mesh);
        for level in 0..=nt {
            for k in 0..mesh.n_nodes() {
                // Forward level m corresponds to backward level nt + 1 - m.
                let bw = (nt + 1).saturating_sub(level).min(nt);
                c_rev.set(level, k, c.at(bw, k));
                s_rev.set(level, k, src.at(bw, k));
            }
        }
        let psi = solve_linearized(&spec, &op, &c_rev, &s_rev, &vec![0.0; 11], &mesh).unwrap();
        for m in 1..=nt {
            for k in 0..mesh.n_nodes() {
                let diff = (psi.at(m, k) - phi.at(nt + 1 - m, k)).abs();
                assert!(diff < 1e-12, "level {m} node {k}: diff {diff:.3e}");
            }
        }
    }

    #[test]
    fn reduced_gradient_matches_finite_differences() {
        // J(u) = int L(y(u), u); gradient density L_u - phi, e = 0.
        let mesh = build_mesh(1, 1.0, 0.0, 12, 0, 1.0, 12).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.5, 0.2, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.4);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let e = Field::zeros(&mesh);
        let src = adjoint_source_with_u(&spec, &y, Some(&u), &e, &mesh).unwrap();
        let c = field_f_prime(&spec, &y, &mesh);
        let phi = solve_backward(&op, &c, &src, &mesh).unwrap();

        let mut grad = Field::zeros(&mesh);
        for level in 1..mesh.n_levels() {
            let t = mesh.time(level);
            for k in 0..mesh.n_nodes() {
                let (x, yc) = mesh.node_coord(k);
                grad.set(
                    level,
                    k,
                    (spec.l_u)(x, yc, t, y.at(level, k), u.at(level, k)) - phi.at(level, k),
                );
            }
        }

        let v = Field::from_fn(&mesh, |x, _, t| (7.0 * x - 2.0 * t).cos());
        let s = 1e-5;
        let j = |uu: &Field| -> f64 {
            let (yy, _) = solve_state(&spec, &op, uu, &mesh).unwrap();
            eval_objective(&spec, &yy, uu, &mesh).unwrap()
        };
        let fd = (j(&u.axpy(s, &v)) - j(&u.axpy(-s, &v))) / (2.0 * s);
        let directional = grad.inner_l2(&v, &mesh);
        assert!(
            (fd - directional).abs() <= 1e-7 * (1.0 + fd.abs()),
            "fd {fd:.10e} vs adjoint {directional:.10e}"
        );
    }

    #[test]
    fn comparison_principle_for_ordered_controls() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 10).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u2 = Field::from_fn(&mesh, |x, _, _| 0.2 + 0.1 * x);
        let u1 = u2.map(|v| v + 0.3);
        let (y1, _) = solve_state(&spec, &op, &u1, &mesh).unwrap();
        let (y2, _) = solve_state(&spec, &op, &u2, &mesh).unwrap();
        let gap = y1.axpy(-1.0, &y2).min();
        assert!(gap >= -1e-12, "ordering violated by {gap:.3e}");
    }

    #[test]
    fn newton_initial_guess_does_not_change_solution() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.7);
        let opts = SolverOptions::default();
        let (y_a, _) = solve_state_with(&spec, &op, &u, &mesh, &opts, false).unwrap();
        let (y_b, _) = solve_state_with(&spec, &op, &u, &mesh, &opts, true).unwrap();
        assert!(y_a.axpy(-1.0, &y_b).norm_inf() < 1e-10);
    }

    #[test]
    fn apriori_ratios_zero_and_bounded() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let y0 = vec![0.0; 15];
        let zero = Field::zeros(&mesh);
        let ratios = apriori_check(&zero, &zero, &y0, &mesh).unwrap();
        assert_eq!(ratios.sup_ratio, 0.0);
        assert_eq!(ratios.time_derivative_ratio, 0.0);

        // Scaling sweep: ratios stay within 20% across control scalings.
        let mut sups = Vec::new();
        for &scale in &[1.0, 2.0, 5.0, 10.0] {
            let u = Field::constant(&mesh, 0.1 * scale);
            let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
            let r = apriori_check(&y, &u, &y0, &mesh).unwrap();
            sups.push(r.sup_ratio);
        }
        let max = sups.iter().cloned().fold(0.0_f64, f64::max);
        let min = sups.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.2, "ratios {sups:?}");
    }

    #[test]
    fn apriori_stable_under_refinement() {
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let mut ratios = Vec::new();
        for &(nx, nt) in &[(15usize, 16usize), (31, 32)] {
            let mesh = build_mesh(1, 1.0, 0.0, nx, 0, 1.0, nt).unwrap();
            let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
            let u = Field::from_fn(&mesh, |x, _, t| 0.5 + 0.3 * (2.0 * x + t).sin());
            let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
            let y0 = spec.sample_initial(&mesh).unwrap();
            ratios.push(apriori_check(&y, &u, &y0, &mesh).unwrap());
        }
        let rel = (ratios[0].sup_ratio - ratios[1].sup_ratio).abs() / ratios[1].sup_ratio;
        assert!(rel < 0.10, "sup ratios {ratios:?}");
    }

    #[test]
    fn manufactured_solution_convergence_orders() {
        // y* = t^2 sin(pi x) with the cubic nonlinearity; forcing from the
        // continuous equation. (A profile linear in t would be integrated
        // exactly by implicit Euler and hide the temporal order.)
        let pi = std::f64::consts::PI;
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.0).unwrap();
        let exact = move |x: f64, t: f64| t * t * (pi * x).sin();
        let forcing = move |x: f64, t: f64| {
            let s = (pi * x).sin();
            let y = t * t * s;
            2.0 * t * s + pi * pi * t * t * s + (y * y * y + y)
        };
        let run = |nx: usize, nt: usize| -> f64 {
            let mesh = build_mesh(1, 1.0, 0.0, nx, 0, 1.0, nt).unwrap();
            let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
            let mut spec_run = spec.clone();
            spec_run.y0 = Arc::new(|_, _, _| 0.0);
            let u = Field::from_fn(&mesh, |x, _, t| forcing(x, t));
            let (y, _) = solve_state(&spec_run, &op, &u, &mesh).unwrap();
            let mut err = 0.0_f64;
            for level in 0..mesh.n_levels() {
                let t = mesh.time(level);
                for k in 0..mesh.n_nodes() {
                    let (x, _) = mesh.node_coord(k);
                    err = err.max((y.at(level, k) - exact(x, t)).abs());
                }
            }
            err
        };
        // Spatial order with dt ~ h^2.
        let es: Vec<f64> = [(7usize, 8usize), (15, 32), (31, 128)]
            .iter()
            .map(|&(nx, nt)| run(nx, nt))
            .collect();
        let p_space = (es[0] / es[2]).log2() / ((31.0_f64 + 1.0) / 8.0).log2();
        assert!(p_space >= 1.9, "spatial order {p_space:.2}, errors {es:?}");
        // Temporal order with fine space grid.
        let et: Vec<f64> = [8usize, 16, 32].iter().map(|&nt| run(255, nt)).collect();
        let p_time = (et[0] / et[2]).log2() / 4.0_f64.log2();
        assert!(p_time >= 0.9, "temporal order {p_time:.2}, errors {et:?}");
    }
}
