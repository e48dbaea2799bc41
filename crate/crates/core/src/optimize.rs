//! Candidate optimal pairs by an augmented Lagrangian on the mixed
//! constraint with projected-gradient inner iterations on the box, plus a
//! dense brute-force oracle for tiny convex instances.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::kkt::{
    classify_active_sets, default_tol_act, kkt_residuals, solve_adjoint_coupled, KktReport,
};
use crate::mesh::{EllipticOperator, Mesh};
use crate::pde::{adjoint_source_with_u, field_f_prime, solve_backward, solve_state};
use crate::problem::{eval_objective, ProblemSpec};
use crate::qp::solve_qp;

/// Augmented-Lagrangian and projected-gradient parameters.
#[derive(Clone, Debug)]
pub struct OptimizeParams {
    /// Initial penalty on the mixed constraint.
    pub penalty0: f64,
    /// Penalty growth factor applied when feasibility stalls.
    pub penalty_growth: f64,
    /// Feasibility must improve by at least this factor per outer iteration
    /// to keep the penalty fixed.
    pub feasibility_improvement: f64,
    pub penalty_max: f64,
    /// Damping on multiplier updates (1 = undamped).
    pub multiplier_damping: f64,
    /// Inner stop: max-norm of the unit-step projected gradient.
    pub grad_tol: f64,
    /// Outer stop: mixed-constraint violation.
    pub feas_tol: f64,
    /// Certification tolerance for the final KKT report.
    pub kkt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Armijo slope fraction.
    pub armijo_sigma: f64,
    /// Backtracking factor.
    pub backtrack: f64,
    /// Active-set classification tolerance; defaults to `1e-8 (b-a)`.
    pub tol_act: Option<f64>,
    /// Record per-step line-search data (for diagnosis and invariants).
    pub record_inner: bool,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams {
            penalty0: 1.0,
            penalty_growth: 10.0,
            feasibility_improvement: 4.0,
            penalty_max: 1e12,
            multiplier_damping: 1.0,
            grad_tol: 3e-7,
            feas_tol: 1e-9,
            kkt_tol: 1e-6,
            max_outer: 40,
            max_inner: 2000,
            armijo_sigma: 1e-4,
            backtrack: 0.5,
            tol_act: None,
            record_inner: false,
        }
    }
}

/// One outer iteration of the history (serialized to `history.csv`).
#[derive(Clone, Debug, Serialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub inner_iters: usize,
    pub objective: f64,
    pub feasibility: f64,
    pub stationarity: f64,
    pub penalty: f64,
}

/// Accepted inner line-search step (only with `record_inner`).
#[derive(Clone, Debug)]
pub struct InnerRecord {
    pub step: f64,
    pub decrease: f64,
    pub projected_gradient_norm2: f64,
}

/// Candidate locally optimal pair with multipliers and diagnostics.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: Field,
    pub y: Field,
    pub phi: Field,
    pub e: Field,
    pub e_hat: Field,
    pub objective: f64,
    pub report: KktReport,
    pub history: Vec<OuterRecord>,
    pub inner_history: Vec<InnerRecord>,
    pub certified: bool,
}

/// Nodewise clamp onto `[a, b]`; idempotent and nonexpansive.
pub fn project_box(u: &Field, a: f64, b: f64) -> Field {
    u.map(|v| v.clamp(a, b))
}

/// Gradient of the `e`-augmented reduced objective
/// `J(S(u), u) + int e (g(S(u)) + eps u)`:
/// one state solve and one adjoint solve; the returned field is the
/// nodewise density `L_u - phi_e + eps e`.
pub fn reduced_gradient(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    e: &Field,
    mesh: &Mesh,
) -> Result<Field> {
    let (grad, _, _, _) = reduced_gradient_full(spec, op, u, e, mesh)?;
    Ok(grad)
}

/// As [`reduced_gradient`] but also returns the state, costate and the
/// augmented objective value.
pub fn reduced_gradient_full(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    e: &Field,
    mesh: &Mesh,
) -> Result<(Field, Field, Field, f64)> {
    let (y, _) = solve_state(spec, op, u, mesh).map_err(|err| err.in_stage("state solve"))?;
    let source = adjoint_source_with_u(spec, &y, Some(u), e, mesh)?;
    let c = field_f_prime(spec, &y, mesh);
    let phi = solve_backward(op, &c, &source, mesh).map_err(|err| err.in_stage("adjoint solve"))?;

    let mut grad = Field::zeros(mesh);
    let mut augmented = eval_objective(spec, &y, u, mesh)?;
    let w = mesh.node_weight() * mesh.dt;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let uv = u.at(level, k);
            let yv = y.at(level, k);
            let ev = e.at(level, k);
            grad.set(
                level,
                k,
                (spec.l_u)(x, yc, t, yv, uv) - phi.at(level, k) + spec.eps * ev,
            );
            augmented += w * ev * ((spec.g)(x, yc, t, yv) + spec.eps * uv);
        }
    }
    grad.mirror_level0();
    Ok((grad, y, phi, augmented))
}

/// Mixed-constraint value `g(x,t,y) + eps u` as a field.
fn mixed_value(spec: &ProblemSpec, y: &Field, u: &Field, mesh: &Mesh) -> Field {
    let mut g = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            g.set(
                level,
                k,
                (spec.g)(x, yc, t, y.at(level, k)) + spec.eps * u.at(level, k),
            );
        }
    }
    g
}

fn feasibility_violation(gval: &Field) -> f64 {
    let n = gval.n_nodes();
    gval.data()[n..]
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
        .max(0.0)
}

struct PenaltyEval {
    value: f64,
    y: Field,
}

/// Augmented objective with the shifted quadratic penalty
/// `J + sum w/(2c) (max(0, e + c G)^2 - e^2)`.
fn penalty_objective(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    e: &Field,
    c_pen: f64,
    mesh: &Mesh,
) -> Result<PenaltyEval> {
    let (y, _) = solve_state(spec, op, u, mesh)?;
    let mut value = eval_objective(spec, &y, u, mesh)?;
    let w = mesh.node_weight() * mesh.dt;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let g = (spec.g)(x, yc, t, y.at(level, k)) + spec.eps * u.at(level, k);
            let shifted = (e.at(level, k) + c_pen * g).max(0.0);
            value += w * (shifted * shifted - e.at(level, k) * e.at(level, k)) / (2.0 * c_pen);
        }
    }
    Ok(PenaltyEval { value, y })
}

/// Effective multiplier of the shifted penalty, `max(0, e + c G)`.
fn effective_multiplier(e: &Field, gval: &Field, c_pen: f64) -> Field {
    let mut out = e.clone();
    for (o, g) in out.data_mut().iter_mut().zip(gval.data()) {
        *o = (*o + c_pen * g).max(0.0);
    }
    out
}

/// Gradient density of the penalty objective at `(u, y)` with `y = S(u)`
/// already known: one adjoint solve with the effective multiplier.
fn penalty_gradient_given_state(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u: &Field,
    y: &Field,
    e: &Field,
    c_pen: f64,
    mesh: &Mesh,
) -> Result<Field> {
    let gval = mixed_value(spec, y, u, mesh);
    let e_eff = effective_multiplier(e, &gval, c_pen);
    let source = adjoint_source_with_u(spec, y, Some(u), &e_eff, mesh)?;
    let c = field_f_prime(spec, y, mesh);
    let phi = solve_backward(op, &c, &source, mesh)?;
    let mut grad = Field::zeros(mesh);
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            grad.set(
                level,
                k,
                (spec.l_u)(x, yc, t, y.at(level, k), u.at(level, k)) - phi.at(level, k)
                    + spec.eps * e_eff.at(level, k),
            );
        }
    }
    grad.mirror_level0();
    Ok(grad)
}

/// Solve the control problem by an augmented Lagrangian on the mixed
/// constraint. Inner iterations are projected gradient steps with a
/// Barzilai-Borwein trial step and monotone Armijo backtracking; the box is
/// handled by exact projection. Returns the best iterate flagged
/// non-certified when budgets are exhausted.
pub fn solve_augmented_lagrangian(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u_init: &Field,
    params: &OptimizeParams,
    mesh: &Mesh,
) -> Result<Solution> {
    validate_params(params)?;
    let (a, b) = (spec.lower, spec.upper);
    let tol_act = params.tol_act.unwrap_or_else(|| default_tol_act(spec));
    let mut u = project_box(u_init, a, b);
    u.mirror_level0();
    let mut e = Field::zeros(mesh);
    let mut c_pen = params.penalty0;
    let mut history: Vec<OuterRecord> = Vec::new();
    let mut inner_history: Vec<InnerRecord> = Vec::new();
    let mut prev_feas = f64::INFINITY;
    let mut best: Option<Solution> = None;

    for outer in 0..params.max_outer {
        // Inner loop tolerance tightens as feasibility improves.
        let inner_tol = if prev_feas.is_finite() {
            (0.1 * prev_feas).clamp(params.grad_tol, 1e-3)
        } else {
            1e-3_f64.max(params.grad_tol)
        };

        let mut retries = 0;
        let mut inner_iters = 0;

        // Solve the penalized subproblem; if the new iterate is less
        // feasible than the last recorded one, grow the penalty and re-solve
        // so the recorded violations never increase.
        let (y, gval, feas) = loop {
            let mut step = 1.0;
            let mut prev_u: Option<Field> = None;
            let mut prev_grad: Option<Field> = None;

            let first = penalty_objective(spec, op, &u, &e, c_pen, mesh)?;
            let mut la_value = first.value;
            let mut y = first.y;
            let mut grad = penalty_gradient_given_state(spec, op, &u, &y, &e, c_pen, mesh)?;

            loop {
                // Unit-step projected gradient as the stationarity measure.
                let trial_unit = project_box(&u.axpy(-1.0, &grad), a, b);
                let pg_inf = trial_unit.axpy(-1.0, &u).norm_inf_active();
                if pg_inf <= inner_tol || inner_iters >= params.max_inner {
                    break;
                }
                inner_iters += 1;

                // Barzilai-Borwein trial step from the last accepted move.
                if let (Some(pu), Some(pg)) = (&prev_u, &prev_grad) {
                    let du = u.axpy(-1.0, pu);
                    let dg = grad.axpy(-1.0, pg);
                    let sy = du.inner_l2(&dg, mesh);
                    let ss = du.inner_l2(&du, mesh);
                    if sy > 1e-300 {
                        step = (ss / sy).clamp(1e-8, 1e8);
                    }
                }

                let mut s = step;
                let mut accepted = false;
                for _ in 0..60 {
                    let trial = project_box(&u.axpy(-s, &grad), a, b);
                    let move_norm2 = {
                        let d = trial.axpy(-1.0, &u);
                        d.inner_l2(&d, mesh)
                    };
                    if move_norm2 == 0.0 {
                        break;
                    }
                    let eval = penalty_objective(spec, op, &trial, &e, c_pen, mesh)?;
                    // Projected Armijo: decrease >= sigma * s * ||g_s||^2
                    // with g_s = (u - trial)/s, i.e. sigma * move^2 / s.
                    if eval.value <= la_value - params.armijo_sigma * move_norm2 / s {
                        if params.record_inner {
                            inner_history.push(InnerRecord {
                                step: s,
                                decrease: la_value - eval.value,
                                projected_gradient_norm2: move_norm2 / (s * s),
                            });
                        }
                        prev_u = Some(u.clone());
                        prev_grad = Some(grad.clone());
                        u = trial;
                        y = eval.y;
                        la_value = eval.value;
                        accepted = true;
                        break;
                    }
                    s *= params.backtrack;
                }
                if !accepted {
                    break; // line search exhausted: gradient noise level
                }
                grad = penalty_gradient_given_state(spec, op, &u, &y, &e, c_pen, mesh)?;
            }

            let gval = mixed_value(spec, &y, &u, mesh);
            let feas = feasibility_violation(&gval);
            if feas <= prev_feas + 1e-12
                || retries >= 6
                || c_pen >= params.penalty_max
                || inner_iters >= params.max_inner
            {
                break (y, gval, feas);
            }
            retries += 1;
            c_pen = (c_pen * params.penalty_growth).min(params.penalty_max);
        };

        // Multiplier update (damped projection of the shifted estimate).
        let e_shifted = effective_multiplier(&e, &gval, c_pen);
        let mut e_new = e.clone();
        e_new.scale(1.0 - params.multiplier_damping);
        e_new.axpy_mut(params.multiplier_damping, &e_shifted);

        // Certification attempt at the current iterate.
        let sets = classify_active_sets(&u, &y, spec, mesh, tol_act)?;
        let (phi, e_rec, ehat_rec) = solve_adjoint_coupled(spec, op, &y, &u, &sets, mesh)?;
        let report = kkt_residuals(
            spec, op, &y, &u, &phi, &e_rec, &ehat_rec, &sets, mesh, params.kkt_tol,
        )?;
        let objective = eval_objective(spec, &y, &u, mesh)?;
        history.push(OuterRecord {
            outer,
            inner_iters,
            objective,
            feasibility: feas,
            stationarity: report.stationarity,
            penalty: c_pen,
        });

        let candidate = Solution {
            u: u.clone(),
            y: y.clone(),
            phi,
            e: e_rec,
            e_hat: ehat_rec,
            objective,
            certified: report.certified,
            report,
            history: history.clone(),
            inner_history: inner_history.clone(),
        };
        let better = match &best {
            None => true,
            Some(prev) => candidate.report.worst_residual() < prev.report.worst_residual(),
        };
        if better {
            best = Some(candidate.clone());
        }
        if candidate.certified && feas <= params.feas_tol.max(params.kkt_tol) {
            return Ok(candidate);
        }

        // Penalty schedule: grow when feasibility stalls.
        if feas > prev_feas / params.feasibility_improvement {
            c_pen = (c_pen * params.penalty_growth).min(params.penalty_max);
        }
        prev_feas = prev_feas.min(feas.max(1e-18));
        e = e_new;
    }

    let mut out = best.expect("at least one outer iteration ran");
    out.certified = false;
    out.history = history;
    out.inner_history = inner_history;
    Ok(out)
}

fn validate_params(p: &OptimizeParams) -> Result<()> {
    if !(p.penalty0 > 0.0) {
        return Err(CoreError::invalid("penalty0", "must be positive"));
    }
    if !(p.penalty_growth > 1.0) {
        return Err(CoreError::invalid("penalty_growth", "must exceed 1"));
    }
    for (name, v) in [
        ("grad_tol", p.grad_tol),
        ("feas_tol", p.feas_tol),
        ("kkt_tol", p.kkt_tol),
        ("armijo_sigma", p.armijo_sigma),
    ] {
        if !(v > 0.0) {
            return Err(CoreError::invalid(name, "must be positive"));
        }
    }
    if !(p.backtrack > 0.0 && p.backtrack < 1.0) {
        return Err(CoreError::invalid("backtrack", "must lie in (0,1)"));
    }
    Ok(())
}

/// Dense affine model of the discrete state map on a tiny mesh:
/// `Y = F + S U` where `Y` stacks levels `1..=nt` (node-major per level) and
/// `U` stacks the controls of the same levels.
pub struct DenseStateMap {
    pub s: DMatrix<f64>,
    pub f: DVector<f64>,
    pub n_nodes: usize,
    pub nt: usize,
}

/// Build the dense state operator for a linear nonlinearity `f(y) = c y`
/// by LU-factored forward substitution of the implicit-Euler steps.
pub fn dense_state_map(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    mesh: &Mesh,
) -> Result<DenseStateMap> {
    let n = mesh.n_nodes();
    let nt = mesh.nt;
    let dim = n * nt;
    if dim > 400 {
        return Err(CoreError::invalid(
            "mesh",
            format!("dense state map is limited to tiny grids (requested {dim} unknowns)"),
        ));
    }
    let c_lin = (spec.f_prime)(0.0);
    if ((spec.f_prime)(1.0) - c_lin).abs() > 1e-12 || ((spec.f)(1.0) - c_lin).abs() > 1e-12 {
        return Err(CoreError::NonConvexSpec(
            "dense state map requires a linear nonlinearity".into(),
        ));
    }
    let dt = mesh.dt;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for (j, v) in op.row(i) {
            m[(i, j)] += dt * v;
        }
        m[(i, i)] += 1.0 + dt * c_lin;
    }
    let lu = m.lu();

    // Free response from the initial datum.
    let y0 = spec.sample_initial(mesh)?;
    let mut f = DVector::zeros(dim);
    let mut prev = DVector::from_vec(y0);
    for lev in 0..nt {
        let next = lu
            .solve(&prev)
            .ok_or_else(|| CoreError::NonConvexSpec("singular step matrix".into()))?;
        f.rows_mut(lev * n, n).copy_from(&next);
        prev = next;
    }

    // Columns of S: response to a unit control at (lev0, node j).
    let mut s = DMatrix::zeros(dim, dim);
    for lev0 in 0..nt {
        for j in 0..n {
            let col = lev0 * n + j;
            let mut rhs = DVector::zeros(n);
            rhs[j] = dt;
            let mut state = lu
                .solve(&rhs)
                .ok_or_else(|| CoreError::NonConvexSpec("singular step matrix".into()))?;
            s.view_mut((lev0 * n, col), (n, 1)).copy_from(&state);
            for lev in (lev0 + 1)..nt {
                state = lu.solve(&state).unwrap();
                s.view_mut((lev * n, col), (n, 1)).copy_from(&state);
            }
        }
    }
    Ok(DenseStateMap { s, f, n_nodes: n, nt })
}

/// Quadratic model coefficients of `L` sampled nodewise (valid for costs
/// that are exactly quadratic in `(y, u)`).
pub struct QuadraticCost {
    pub qy: DVector<f64>,
    pub qu: DVector<f64>,
    pub qyu: DVector<f64>,
    pub gy: DVector<f64>,
    pub gu: DVector<f64>,
}

pub fn sample_quadratic_cost(spec: &ProblemSpec, mesh: &Mesh) -> Result<QuadraticCost> {
    let n = mesh.n_nodes();
    let nt = mesh.nt;
    let dim = n * nt;
    let mut qy = DVector::zeros(dim);
    let mut qu = DVector::zeros(dim);
    let mut qyu = DVector::zeros(dim);
    let mut gy = DVector::zeros(dim);
    let mut gu = DVector::zeros(dim);
    for lev in 0..nt {
        let t = mesh.time(lev + 1);
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            let i = lev * n + k;
            qy[i] = (spec.l_yy)(x, yc, t, 0.0, 0.0);
            qu[i] = (spec.l_uu)(x, yc, t, 0.0, 0.0);
            qyu[i] = (spec.l_yu)(x, yc, t, 0.0, 0.0);
            gy[i] = (spec.l_y)(x, yc, t, 0.0, 0.0);
            gu[i] = (spec.l_u)(x, yc, t, 0.0, 0.0);
            // Verify the quadratic model reproduces L away from the origin.
            let (yv, uv) = (0.7, -0.3);
            let model = (spec.l)(x, yc, t, 0.0, 0.0)
                + gy[i] * yv
                + gu[i] * uv
                + 0.5 * qy[i] * yv * yv
                + qyu[i] * yv * uv
                + 0.5 * qu[i] * uv * uv;
            if ((spec.l)(x, yc, t, yv, uv) - model).abs() > 1e-9 {
                return Err(CoreError::NonConvexSpec(
                    "running cost is not quadratic in (y, u)".into(),
                ));
            }
            if qu[i] <= 0.0 || qy[i] < 0.0 {
                return Err(CoreError::NonConvexSpec(
                    "running cost is not strongly convex in u".into(),
                ));
            }
        }
    }
    Ok(QuadraticCost { qy, qu, qyu, gy, gu })
}

/// Oracle output: exact discrete solution and multipliers of the convex
/// instance, computed with dense linear algebra independent of the
/// iterative solvers.
pub struct OracleSolution {
    pub u: Field,
    pub y: Field,
    pub phi: Field,
    pub e: Field,
    pub e_hat: Field,
    pub objective: f64,
    pub qp_residual: f64,
}

/// Assemble the fully discretized problem as a dense strictly convex QP and
/// solve it exactly. Requires linear `f`, affine-in-`y` mixed constraint and
/// a quadratic cost; rejects anything else.
pub fn brute_force_oracle(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    mesh: &Mesh,
) -> Result<OracleSolution> {
    if !spec.convex_structure {
        return Err(CoreError::NonConvexSpec(
            "oracle requires a convex catalog instance".into(),
        ));
    }
    let map = dense_state_map(spec, op, mesh)?;
    let cost = sample_quadratic_cost(spec, mesh)?;
    let n = map.n_nodes;
    let nt = map.nt;
    let dim = n * nt;
    let wt = mesh.node_weight() * mesh.dt;

    // Affine mixed constraint g(x,t,y) = g0 + g1 y sampled nodewise.
    let mut g0 = DVector::zeros(dim);
    let mut g1 = DVector::zeros(dim);
    for lev in 0..nt {
        let t = mesh.time(lev + 1);
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            let i = lev * n + k;
            g0[i] = (spec.g)(x, yc, t, 0.0);
            g1[i] = (spec.g_y)(x, yc, t, 0.0);
            let affine_check = (spec.g)(x, yc, t, 2.0) - (g0[i] + 2.0 * g1[i]);
            if affine_check.abs() > 1e-10 {
                return Err(CoreError::NonConvexSpec(
                    "mixed constraint is not affine in y".into(),
                ));
            }
        }
    }

    // Objective in coefficient space (all terms carry the weight wt):
    // J(U) = 1/2 U'HU + q'U + const with Y = F + S U.
    let s = &map.s;
    let qy_s = {
        // diag(qy) * S
        let mut m = s.clone();
        for r in 0..dim {
            for c2 in 0..dim {
                m[(r, c2)] *= cost.qy[r];
            }
        }
        m
    };
    let mut h = s.transpose() * qy_s;
    for r in 0..dim {
        // S' diag(qyu) + diag(qyu) S and diag(qu).
        for c2 in 0..dim {
            h[(r, c2)] += s[(c2, r)] * cost.qyu[c2] + cost.qyu[r] * s[(r, c2)];
        }
        h[(r, r)] += cost.qu[r];
    }
    h.scale_mut(wt);
    // Symmetrize against rounding.
    let ht = h.transpose();
    h = (h + ht) * 0.5;

    let qy_f = DVector::from_fn(dim, |i, _| cost.qy[i] * map.f[i] + cost.gy[i]);
    let mut q = s.transpose() * qy_f;
    for i in 0..dim {
        q[i] += cost.gu[i] + cost.qyu[i] * map.f[i];
    }
    q.scale_mut(wt);

    // Constraints: u <= b, -u <= -a, (diag(g1) S + eps I) u <= -g0 - g1 F.
    let m_rows = 3 * dim;
    let mut cmat = DMatrix::zeros(m_rows, dim);
    let mut dvec = DVector::zeros(m_rows);
    for i in 0..dim {
        cmat[(i, i)] = 1.0;
        dvec[i] = spec.upper;
        cmat[(dim + i, i)] = -1.0;
        dvec[dim + i] = -spec.lower;
        for j in 0..dim {
            cmat[(2 * dim + i, j)] = g1[i] * s[(i, j)];
        }
        cmat[(2 * dim + i, i)] += spec.eps;
        dvec[2 * dim + i] = -g0[i] - g1[i] * map.f[i];
    }

    let qp = solve_qp(&h, &q, &cmat, &dvec, 1e-12)?;

    // Unstack into fields; multiplier densities divide out the weight.
    let mut u = Field::zeros(mesh);
    let mut e = Field::zeros(mesh);
    let mut e_hat = Field::zeros(mesh);
    let yvec = &map.f + s * &qp.x;
    let mut y = Field::zeros(mesh);
    let y0 = spec.sample_initial(mesh)?;
    y.set_level(0, &y0);
    for lev in 0..nt {
        for k in 0..n {
            let i = lev * n + k;
            u.set(lev + 1, k, qp.x[i]);
            y.set(lev + 1, k, yvec[i]);
            e.set(lev + 1, k, qp.multipliers[2 * dim + i] / wt);
            e_hat.set(
                lev + 1,
                k,
                (qp.multipliers[i] - qp.multipliers[dim + i]) / wt,
            );
        }
    }
    u.mirror_level0();
    e.mirror_level0();
    e_hat.mirror_level0();

    // Costate by the dense backward recursion with source -L_y - e g_y.
    let dt = mesh.dt;
    let c_lin = (spec.f_prime)(0.0);
    let mut mstep = DMatrix::zeros(n, n);
    for i in 0..n {
        for (j, v) in op.row(i) {
            mstep[(i, j)] += dt * v;
        }
        mstep[(i, i)] += 1.0 + dt * c_lin;
    }
    let lu = mstep.lu();
    let mut phi = Field::zeros(mesh);
    let mut next = DVector::zeros(n);
    for lev in (0..=nt).rev() {
        let t = mesh.time(lev);
        let mut rhs = next.clone();
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            let yv = y.at(lev, k);
            let src = -(spec.l_y)(x, yc, t, yv, u.at(lev, k))
                - e.at(lev, k) * (spec.g_y)(x, yc, t, yv);
            rhs[k] += dt * src;
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| CoreError::NonConvexSpec("singular step matrix".into()))?;
        for k in 0..n {
            phi.set(lev, k, sol[k]);
        }
        next = sol;
    }

    let objective = eval_objective(spec, &y, &u, mesh)?;
    Ok(OracleSolution {
        u,
        y,
        phi,
        e,
        e_hat,
        objective,
        qp_residual: qp.kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_elliptic, build_mesh};
    use crate::problem::{make_convex_quadratic, make_example_cubic};

    #[test]
    fn projection_properties() {
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 2).unwrap();
        let inside = Field::constant(&mesh, 0.4);
        assert_eq!(project_box(&inside, 0.0, 1.0), inside);
        let above = Field::constant(&mesh, 2.0);
        assert_eq!(project_box(&above, 0.0, 1.0), Field::constant(&mesh, 1.0));
        // Nearest point nodewise.
        let u = Field::from_fn(&mesh, |x, _, t| 3.0 * (x - t));
        let p = project_box(&u, -0.5, 0.5);
        for level in 0..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                let v = u.at(level, k);
                let best = v.clamp(-0.5, 0.5);
                assert_eq!(p.at(level, k), best);
            }
        }
    }

    #[test]
    fn reduced_gradient_identity_cost() {
        // L = 1/2 u^2, f = 0, L_y = 0, e = 0: phi = 0 and gradient = u.
        let mesh = build_mesh(1, 1.0, 0.0, 7, 0, 1.0, 3).unwrap();
        let mut spec = make_convex_quadratic(0.0, 1.0, 0.0, -1.0, 0.0, 1.0, -2.0, 2.0).unwrap();
        spec.l = std::sync::Arc::new(|_, _, _, _, u| 0.5 * u * u);
        spec.l_y = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        spec.l_yy = std::sync::Arc::new(|_, _, _, _, _| 0.0);
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::from_fn(&mesh, |x, _, t| x - 0.3 * t);
        let e = Field::zeros(&mesh);
        let g = reduced_gradient(&spec, &op, &u, &e, &mesh).unwrap();
        for level in 1..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                assert!((g.at(level, k) - u.at(level, k)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_multiplier() {
        let mesh = build_mesh(1, 1.0, 0.0, 9, 0, 1.0, 8).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.7, 0.2, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.4);
        let e = Field::from_fn(&mesh, |x, _, t| 0.3 * (1.0 + x * t));
        let (grad, _, _, j0) = reduced_gradient_full(&spec, &op, &u, &e, &mesh).unwrap();
        let v = Field::from_fn(&mesh, |x, _, t| (5.0 * x + t).sin());
        let s = 1e-5;
        let jp = reduced_gradient_full(&spec, &op, &u.axpy(s, &v), &e, &mesh)
            .unwrap()
            .3;
        let jm = reduced_gradient_full(&spec, &op, &u.axpy(-s, &v), &e, &mesh)
            .unwrap()
            .3;
        let fd = (jp - jm) / (2.0 * s);
        let lin = grad.inner_l2(&v, &mesh);
        assert!(
            (fd - lin).abs() <= 1e-6 * (1.0 + fd.abs()),
            "fd {fd:.8e} vs adjoint {lin:.8e}, j0 {j0:.4}"
        );
    }

    #[test]
    fn oracle_rejects_nonconvex() {
        let mesh = build_mesh(1, 1.0, 0.0, 4, 0, 1.0, 2).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        assert!(matches!(
            brute_force_oracle(&spec, &op, &mesh),
            Err(CoreError::NonConvexSpec(_))
        ));
    }

    #[test]
    fn oracle_unconstrained_interior_stationarity() {
        // Huge box, inactive mixed constraint: the oracle control satisfies
        // the dense stationarity system to solver precision.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 4).unwrap();
        let spec =
            make_convex_quadratic(0.5, 1.0, 0.4, -50.0, 0.0, 1.0, -100.0, 100.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let oracle = brute_force_oracle(&spec, &op, &mesh).unwrap();
        assert!(oracle.qp_residual < 1e-10);
        assert_eq!(oracle.e.norm_inf(), 0.0);
        assert_eq!(oracle.e_hat.norm_inf(), 0.0);
        // Stationarity density L_u - phi must vanish on active levels.
        for level in 1..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                let lu = 1.0 * oracle.u.at(level, k);
                let r = lu - oracle.phi.at(level, k);
                assert!(r.abs() < 1e-8, "residual {r:.3e} at ({level},{k})");
            }
        }
    }

    #[test]
    fn oracle_lower_bound_instance_has_negative_ehat() {
        // Target pushes the control below a = 0, so u = a and ehat <= 0.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 4).unwrap();
        let spec =
            make_convex_quadratic(0.0, 0.05, -0.8, -50.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let oracle = brute_force_oracle(&spec, &op, &mesh).unwrap();
        assert!(oracle.u.norm_inf_active() < 1e-10, "u should sit at a = 0");
        let mut saw_negative = false;
        for level in 1..mesh.n_levels() {
            for k in 0..mesh.n_nodes() {
                assert!(oracle.e_hat.at(level, k) <= 1e-10);
                if oracle.e_hat.at(level, k) < -1e-8 {
                    saw_negative = true;
                }
            }
        }
        assert!(saw_negative, "expected strictly active lower bound somewhere");
    }

    #[test]
    fn oracle_mixed_active_instance_has_positive_e() {
        // g = -0.2 (state-independent), eps = 1: constraint u <= 0.2 while
        // the target asks for more; e > 0 on the active region.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 4).unwrap();
        let spec = make_convex_quadratic(0.0, 0.05, 0.9, -0.2, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let oracle = brute_force_oracle(&spec, &op, &mesh).unwrap();
        let umax = oracle.u.max();
        assert!(umax <= 0.2 + 1e-9, "u must respect the mixed bound, max {umax}");
        assert!(oracle.e.max() > 1e-6, "expected an active mixed multiplier");
    }

    #[test]
    fn augmented_lagrangian_matches_oracle_on_inactive_instance() {
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 6).unwrap();
        let spec = make_convex_quadratic(0.0, 1.0, 0.3, -10.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let oracle = brute_force_oracle(&spec, &op, &mesh).unwrap();
        let u0 = Field::constant(&mesh, 0.5);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        assert!(sol.certified, "report: {:?}", sol.report);
        let du = sol.u.axpy(-1.0, &oracle.u).norm_inf_active();
        assert!(du <= 1e-6, "control gap {du:.3e}");
        let de = sol.e.axpy(-1.0, &oracle.e).norm_inf_active();
        let dh = sol.e_hat.axpy(-1.0, &oracle.e_hat).norm_inf_active();
        assert!(de <= 1e-5 && dh <= 1e-5, "multiplier gaps {de:.3e} {dh:.3e}");
    }

    #[test]
    fn inactive_constraints_leave_multipliers_zero() {
        // g = -1 never active, large lambda keeps u interior.
        let mesh = build_mesh(1, 1.0, 0.0, 5, 0, 1.0, 4).unwrap();
        let spec = make_convex_quadratic(0.0, 10.0, 0.3, -1.0, 0.0, 1.0, -1.0, 1.0).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::constant(&mesh, 0.0);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        assert!(sol.certified);
        assert!(sol.e.norm_inf_active() < 1e-10);
        assert!(sol.e_hat.norm_inf_active() < 1e-10);
        // Stationarity L_u = phi at the certified tolerance.
        assert!(sol.report.stationarity < 1e-6);
        let interior = sol.u.norm_inf_active();
        assert!(interior < 1.0 - 1e-6, "control must stay interior");
    }

    #[test]
    fn armijo_decrease_invariant() {
        let mesh = build_mesh(1, 1.0, 0.0, 7, 0, 1.0, 6).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.1, 0.3, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u0 = Field::constant(&mesh, 0.0);
        let params = OptimizeParams {
            record_inner: true,
            max_outer: 6,
            ..OptimizeParams::default()
        };
        let sol = solve_augmented_lagrangian(&spec, &op, &u0, &params, &mesh).unwrap();
        assert!(!sol.inner_history.is_empty());
        for rec in &sol.inner_history {
            let required = 1e-4 * rec.step * rec.projected_gradient_norm2;
            assert!(
                rec.decrease >= required - 1e-12,
                "Armijo violated: decrease {:.3e} < {:.3e}",
                rec.decrease,
                required
            );
        }
    }

    #[test]
    fn feasibility_nonincreasing_across_outer_iterations() {
        let mesh = build_mesh(1, 1.0, 0.0, 7, 0, 1.0, 6).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 0.05, 0.4, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        // Midpoint start is mixed-infeasible here.
        let u0 = Field::constant(&mesh, 0.5);
        let sol =
            solve_augmented_lagrangian(&spec, &op, &u0, &OptimizeParams::default(), &mesh)
                .unwrap();
        let feas: Vec<f64> = sol.history.iter().map(|h| h.feasibility).collect();
        for w in feas.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "feasibility increased: {feas:?}");
        }
    }
}
