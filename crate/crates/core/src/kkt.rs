//! First-order optimality machinery: active-set classification, separation
//! margins, Lagrange-multiplier recovery from the stationarity system,
//! residual reports and the constructive Robinson constraint qualification
//! check.
//!
//! Conventions: the costate solves
//! `-phi_t + A phi + f'(y)phi = -L_y - e g_y`, `phi(.,T) = 0`, and the
//! stationarity condition reads `L_u - phi + eps e + ehat = 0`. The mixed
//! multiplier `e` is nonnegative with `e (g + eps u) = 0`; the box
//! multiplier `ehat` is `<= 0` where `u = a`, `>= 0` where `u = b` and `0`
//! strictly inside.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::Field;
use crate::mesh::{EllipticOperator, Mesh};
use crate::pde::{field_f_prime, solve_backward, solve_linearized};
use crate::problem::ProblemSpec;

/// Default classification tolerance relative to the box width.
pub fn default_tol_act(spec: &ProblemSpec) -> f64 {
    1e-8 * (spec.upper - spec.lower)
}

/// Boolean masks over all node/level pairs (`level * n_nodes + node`).
#[derive(Clone, Debug)]
pub struct ActiveSets {
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
    pub mask_ab: Vec<bool>,
    /// Mixed constraint active: `|g + eps u| <= tol_act`.
    pub mask_mixed: Vec<bool>,
    pub tol_act: f64,
    n_nodes: usize,
}

impl ActiveSets {
    #[inline]
    pub fn idx(&self, level: usize, node: usize) -> usize {
        level * self.n_nodes + node
    }

    /// Number of active-level entries (levels `1..=nt`) in a mask.
    pub fn count_active(&self, mask: &[bool]) -> usize {
        mask[self.n_nodes..].iter().filter(|&&m| m).count()
    }

    /// Nodes where both the upper box bound and the mixed constraint are
    /// active (the degenerate overlap the recovery rule has to arbitrate).
    pub fn degenerate_overlap(&self) -> usize {
        self.mask_b
            .iter()
            .zip(&self.mask_mixed)
            .skip(self.n_nodes)
            .filter(|(b, m)| **b && **m)
            .count()
    }
}

/// Classify nodes into `{u = a}`, `{u = b}`, `{a < u < b}` and
/// `{g + eps u = 0}` with tolerance `tol_act`.
pub fn classify_active_sets(
    u: &Field,
    y: &Field,
    spec: &ProblemSpec,
    mesh: &Mesh,
    tol_act: f64,
) -> Result<ActiveSets> {
    u.require_match(mesh, "u")?;
    y.require_match(mesh, "y")?;
    let n = mesh.n_nodes();
    let total = n * mesh.n_levels();
    let mut mask_a = vec![false; total];
    let mut mask_b = vec![false; total];
    let mut mask_ab = vec![false; total];
    let mut mask_mixed = vec![false; total];
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = level * n + k;
            let uv = u.at(level, k);
            if (uv - spec.lower).abs() <= tol_act {
                mask_a[idx] = true;
            } else if (uv - spec.upper).abs() <= tol_act {
                mask_b[idx] = true;
            } else {
                mask_ab[idx] = true;
            }
            let (x, yc) = mesh.node_coord(k);
            let gval = (spec.g)(x, yc, t, y.at(level, k)) + spec.eps * uv;
            if gval.abs() <= tol_act {
                mask_mixed[idx] = true;
            }
        }
    }
    Ok(ActiveSets {
        mask_a,
        mask_b,
        mask_ab,
        mask_mixed,
        tol_act,
        n_nodes: n,
    })
}

/// Separation margins. `gamma` is the uniform margin of
/// `a - u + eps u + g <= -gamma`; positive means the separation condition
/// holds. `h4_prime` is the margin of `g + eps b < 0` on `{u = b}`
/// (`+inf` when that set is empty).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeparationMargins {
    pub gamma: f64,
    pub h4_prime: f64,
}

pub fn check_separation(
    spec: &ProblemSpec,
    y: &Field,
    u: &Field,
    mesh: &Mesh,
) -> Result<SeparationMargins> {
    u.require_match(mesh, "u")?;
    y.require_match(mesh, "y")?;
    let tol_act = default_tol_act(spec);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_b = f64::NEG_INFINITY;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let uv = u.at(level, k);
            let g = (spec.g)(x, yc, t, y.at(level, k));
            worst = worst.max(spec.lower - uv + spec.eps * uv + g);
            if (uv - spec.upper).abs() <= tol_act {
                worst_b = worst_b.max(g + spec.eps * spec.upper);
            }
        }
    }
    Ok(SeparationMargins {
        gamma: -worst,
        h4_prime: if worst_b == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            -worst_b
        },
    })
}

/// Split `zeta = phi - L_u` into `eps e + ehat` by region:
/// on `{g + eps u = 0}` with `a < u < b`: `e = zeta/eps`, `ehat = 0`;
/// on `{u = a}`: `e = 0`, `ehat = zeta`;
/// on `{u = b}` off the mixed set: `e = 0`, `ehat = zeta`;
/// strictly inside with the mixed constraint inactive: `e = ehat = 0`
/// (any leftover `zeta` is a stationarity residual);
/// on the degenerate overlap `{u = b} ∩ {g + eps u = 0}`: the nonnegative
/// part of `zeta` goes to `e`, the remainder to `ehat`.
pub fn recover_multipliers(
    spec: &ProblemSpec,
    y: &Field,
    u: &Field,
    phi: &Field,
    sets: &ActiveSets,
    mesh: &Mesh,
) -> Result<(Field, Field)> {
    phi.require_match(mesh, "phi")?;
    let n = mesh.n_nodes();
    let mut e = Field::zeros(mesh);
    let mut ehat = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = level * n + k;
            let (x, yc) = mesh.node_coord(k);
            let zeta =
                phi.at(level, k) - (spec.l_u)(x, yc, t, y.at(level, k), u.at(level, k));
            if sets.mask_a[idx] {
                ehat.set(level, k, zeta);
            } else if sets.mask_b[idx] {
                if sets.mask_mixed[idx] {
                    let ev = zeta.max(0.0) / spec.eps;
                    e.set(level, k, ev);
                    ehat.set(level, k, zeta - spec.eps * ev);
                } else {
                    ehat.set(level, k, zeta);
                }
            } else if sets.mask_mixed[idx] {
                e.set(level, k, zeta / spec.eps);
            }
        }
    }
    Ok((e, ehat))
}

/// First-order residual report (Theorem-style checks). All entries are
/// nonnegative except the signed margins `e_min`, `separation_gamma` and
/// `h4_prime_margin`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KktReport {
    /// `max |L_u - phi + eps e + ehat|` over levels `1..=nt`.
    pub stationarity: f64,
    /// Re-substitution residual of the discrete adjoint equation (density).
    pub adjoint_residual: f64,
    /// Re-substitution residual of the discrete state equation (density).
    pub state_residual: f64,
    /// `max |e (g + eps u)|`.
    pub complementarity: f64,
    /// `min e` (nonnegative up to tolerance at a KKT point).
    pub e_min: f64,
    /// Sign violations of `ehat`: positive part on `{u=a}`, negative part on
    /// `{u=b}`, magnitude strictly inside the box.
    pub ehat_sign_violation: f64,
    /// `max(0, max(g + eps u))`.
    pub mixed_feasibility: f64,
    /// `max(0, u - b, a - u)`.
    pub box_violation: f64,
    pub separation_gamma: f64,
    pub h4_prime_margin: f64,
    /// Node/level pairs where both `u = b` and the mixed constraint are
    /// active; the recovery rule is a convention there.
    pub degenerate_overlap: usize,
    pub kkt_tol: f64,
    pub certified: bool,
}

impl KktReport {
    pub fn worst_residual(&self) -> f64 {
        self.stationarity
            .max(self.adjoint_residual)
            .max(self.state_residual)
            .max(self.complementarity)
            .max((-self.e_min).max(0.0))
            .max(self.ehat_sign_violation)
            .max(self.mixed_feasibility)
            .max(self.box_violation)
    }
}

/// Populate the residual report for a candidate point with multipliers.
#[allow(clippy::too_many_arguments)]
pub fn kkt_residuals(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    y: &Field,
    u: &Field,
    phi: &Field,
    e: &Field,
    ehat: &Field,
    sets: &ActiveSets,
    mesh: &Mesh,
    kkt_tol: f64,
) -> Result<KktReport> {
    let n = mesh.n_nodes();
    let dt = mesh.dt;

    let mut stationarity = 0.0_f64;
    let mut complementarity = 0.0_f64;
    let mut e_min = f64::INFINITY;
    let mut ehat_sign = 0.0_f64;
    let mut mixed_feas = 0.0_f64;
    let mut box_viol = 0.0_f64;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = level * n + k;
            let (x, yc) = mesh.node_coord(k);
            let uv = u.at(level, k);
            let yv = y.at(level, k);
            let ev = e.at(level, k);
            let hv = ehat.at(level, k);
            let lu = (spec.l_u)(x, yc, t, yv, uv);
            stationarity =
                stationarity.max((lu - phi.at(level, k) + spec.eps * ev + hv).abs());
            let g = (spec.g)(x, yc, t, yv) + spec.eps * uv;
            complementarity = complementarity.max((ev * g).abs());
            e_min = e_min.min(ev);
            mixed_feas = mixed_feas.max(g);
            box_viol = box_viol.max(uv - spec.upper).max(spec.lower - uv);
            if sets.mask_a[idx] {
                ehat_sign = ehat_sign.max(hv);
            } else if sets.mask_b[idx] {
                ehat_sign = ehat_sign.max(-hv);
            } else {
                ehat_sign = ehat_sign.max(hv.abs());
            }
        }
    }
    mixed_feas = mixed_feas.max(0.0);
    box_viol = box_viol.max(0.0);

    // Adjoint re-substitution: (I + dt A + dt f'(y^n)) phi^n - phi^{n+1}
    // - dt (-L_y - e g_y)^n, scaled back to equation density by 1/dt.
    let mut adjoint_residual = 0.0_f64;
    let mut buf = vec![0.0; n];
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        op.apply(phi.level(level), &mut buf);
        let mut worst = 0.0_f64;
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            let yv = y.at(level, k);
            let src = -(spec.l_y)(x, yc, t, yv, u.at(level, k))
                - e.at(level, k) * (spec.g_y)(x, yc, t, yv);
            let next = if level == mesh.nt { 0.0 } else { phi.at(level + 1, k) };
            let r = phi.at(level, k) * (1.0 + dt * (spec.f_prime)(yv)) + dt * buf[k]
                - next
                - dt * src;
            worst = worst.max(r.abs());
        }
        adjoint_residual = adjoint_residual.max(worst / dt);
    }

    // State re-substitution.
    let mut state_residual = 0.0_f64;
    for level in 1..mesh.n_levels() {
        op.apply(y.level(level), &mut buf);
        let mut worst = 0.0_f64;
        for k in 0..n {
            let yv = y.at(level, k);
            let r = yv + dt * buf[k] + dt * (spec.f)(yv)
                - y.at(level - 1, k)
                - dt * u.at(level, k);
            worst = worst.max(r.abs());
        }
        state_residual = state_residual.max(worst / dt);
    }

    let margins = check_separation(spec, y, u, mesh)?;
    let certified = stationarity <= kkt_tol
        && adjoint_residual <= kkt_tol
        && state_residual <= kkt_tol
        && complementarity <= kkt_tol
        && e_min >= -kkt_tol
        && ehat_sign <= kkt_tol
        && mixed_feas <= kkt_tol
        && box_viol <= kkt_tol;

    Ok(KktReport {
        stationarity,
        adjoint_residual,
        state_residual,
        complementarity,
        e_min: if e_min == f64::INFINITY { 0.0 } else { e_min },
        ehat_sign_violation: ehat_sign,
        mixed_feasibility: mixed_feas,
        box_violation: box_viol,
        separation_gamma: margins.gamma,
        h4_prime_margin: if margins.h4_prime.is_finite() {
            margins.h4_prime
        } else {
            f64::MAX
        },
        degenerate_overlap: sets.degenerate_overlap(),
        kkt_tol,
        certified,
    })
}

/// Solve the adjoint equation with the mixed multiplier eliminated through
/// the stationarity relation: on nodes where the mixed constraint is active
/// (and the box is not), `e = (phi - L_u)/eps`, which moves a nonnegative
/// `g_y/eps` term to the left-hand side (sign guaranteed by the H4 sign
/// condition). Returns `phi` together with the recovered `(e, ehat)`.
pub fn solve_adjoint_coupled(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    y: &Field,
    u: &Field,
    sets: &ActiveSets,
    mesh: &Mesh,
) -> Result<(Field, Field, Field)> {
    let n = mesh.n_nodes();
    let mut c = field_f_prime(spec, y, mesh);
    let mut source = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let idx = level * n + k;
            let (x, yc) = mesh.node_coord(k);
            let yv = y.at(level, k);
            let mut s = -(spec.l_y)(x, yc, t, yv, u.at(level, k));
            let coupled = sets.mask_mixed[idx] && !sets.mask_a[idx] && !sets.mask_b[idx];
            if coupled {
                let gy = (spec.g_y)(x, yc, t, yv);
                c.set(level, k, c.at(level, k) + gy / spec.eps);
                s += gy / spec.eps * (spec.l_u)(x, yc, t, yv, u.at(level, k));
            }
            source.set(level, k, s);
        }
    }
    let phi = solve_backward(op, &c, &source, mesh)?;
    let (e, ehat) = recover_multipliers(spec, y, u, &phi, sets, mesh)?;
    Ok((phi, e, ehat))
}

/// Outcome of the constructive Robinson constraint-qualification check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobinsonReport {
    pub rho: f64,
    /// Measured interiority margin; the qualification holds when positive.
    pub delta: f64,
    /// Estimated Lipschitz factor `||u_rho - u||_inf / rho`.
    pub c2_estimate: f64,
    pub success: bool,
    /// 1-based index of the violated target inequality when `delta <= 0`.
    pub failed_inequality: Option<u8>,
    pub worst_node: Option<(usize, usize)>,
    pub note: String,
}

/// Run the explicit interior-point construction behind the Robinson
/// constraint qualification at a feasible pair `(y, u)`:
/// shift the control by `-rho` along a correction built from the linearized
/// equation with coefficient `f'(y) + g_y/eps`, lift it off the lower bound
/// on `{u = a}` and on the thin layer above it, and measure the margin
/// `delta` by which the three linearized constraints stay strictly
/// negative.
pub fn verify_robinson(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    y: &Field,
    u: &Field,
    rho: f64,
    mesh: &Mesh,
) -> Result<RobinsonReport> {
    use crate::error::CoreError;
    if !(rho > 0.0) {
        return Err(CoreError::invalid("rho", format!("must be positive, got {rho}")));
    }
    let n = mesh.n_nodes();
    let zero_init = vec![0.0; n];

    // alpha = g_y/eps along the trajectory.
    let mut alpha = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            alpha.set(level, k, (spec.g_y)(x, yc, t, y.at(level, k)) / spec.eps);
        }
    }

    let c_state = field_f_prime(spec, y, mesh);
    let z_u = solve_linearized(spec, op, &c_state, u, &zero_init, mesh)?;

    // w_rho = u - rho + alpha z_u; xi solves the shifted-coefficient
    // equation, and u_rho = w_rho - alpha xi satisfies z_{u_rho} = xi.
    let mut w_rho = u.clone();
    for level in 0..mesh.n_levels() {
        for k in 0..n {
            w_rho.set(
                level,
                k,
                u.at(level, k) - rho + alpha.at(level, k) * z_u.at(level, k),
            );
        }
    }
    let mut c_shift = c_state.clone();
    for level in 0..mesh.n_levels() {
        for k in 0..n {
            c_shift.set(level, k, c_state.at(level, k) + alpha.at(level, k));
        }
    }
    let xi = solve_linearized(spec, op, &c_shift, &w_rho, &zero_init, mesh)?;
    let mut u_rho = w_rho.clone();
    for level in 0..mesh.n_levels() {
        for k in 0..n {
            u_rho.set(
                level,
                k,
                w_rho.at(level, k) - alpha.at(level, k) * xi.at(level, k),
            );
        }
    }

    let c2 = u_rho.axpy(-1.0, u).norm_inf_active() / rho;

    // Modified control: a + rho on {u = a}, u + rho on the thin layer
    // {a < u <= a + 2 C2 rho}, u_rho elsewhere.
    let tol_act = default_tol_act(spec);
    let mut u_hat = Field::zeros(mesh);
    for level in 0..mesh.n_levels() {
        for k in 0..n {
            let uv = u.at(level, k);
            let v = if (uv - spec.lower).abs() <= tol_act {
                spec.lower + rho
            } else if uv <= spec.lower + 2.0 * c2 * rho {
                uv + rho
            } else {
                u_rho.at(level, k)
            };
            u_hat.set(level, k, v);
        }
    }
    let z_hat = solve_linearized(spec, op, &c_state, &u_hat, &zero_init, mesh)?;

    // Target inequalities at (z_hat - z_u, u_hat - u); delta is the margin
    // by which all three stay below zero.
    let mut worst = f64::NEG_INFINITY;
    let mut worst_idx = 0u8;
    let mut worst_node = (0usize, 0usize);
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..n {
            let (x, yc) = mesh.node_coord(k);
            let uv = u.at(level, k);
            let du = u_hat.at(level, k) - uv;
            let dz = z_hat.at(level, k) - z_u.at(level, k);
            let g = (spec.g)(x, yc, t, y.at(level, k));
            let gy = (spec.g_y)(x, yc, t, y.at(level, k));
            let lhs = [
                uv - spec.upper + du,
                spec.lower - uv - du,
                g + spec.eps * uv + gy * dz + spec.eps * du,
            ];
            for (i, v) in lhs.iter().enumerate() {
                if *v > worst {
                    worst = *v;
                    worst_idx = (i + 1) as u8;
                    worst_node = (level, k);
                }
            }
        }
    }
    let delta = -worst;
    let success = delta > 0.0;
    Ok(RobinsonReport {
        rho,
        delta,
        c2_estimate: c2,
        success,
        failed_inequality: if success { None } else { Some(worst_idx) },
        worst_node: if success { None } else { Some(worst_node) },
        note: if success {
            String::new()
        } else {
            format!("inequality {worst_idx} violated; retry with a smaller rho")
        },
    })
}
