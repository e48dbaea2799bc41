//! Control-problem data: running cost, nonlinearity, mixed constraint,
//! bounds, initial datum, diffusion coefficient.
//!
//! All derivative callbacks are caller-supplied and cross-checked against
//! finite differences when a spec is constructed through the catalog or
//! through [`ProblemSpec::validated`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::mesh::{Coefficient, Mesh};

/// Running-cost callback `(x, y_coord, t, y, u) -> value`.
pub type CostFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
/// Nonlinearity callback `y -> value`.
pub type NonlinFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Mixed-constraint callback `(x, y_coord, t, y) -> value`.
pub type MixedFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// Initial-datum callback `(x, y_coord, dim) -> value`; `dim` lets one
/// closure serve both 1D and 2D meshes.
pub type InitFn = Arc<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>;

/// All data of the control problem
/// `min J(y,u) = int_Q L(x,t,y,u)` subject to
/// `y_t + Ay + f(y) = u`, `y = 0` on the lateral boundary, `y(0) = y0`,
/// `g(x,t,y) + eps*u <= 0` and `a <= u <= b`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub l: CostFn,
    pub l_y: CostFn,
    pub l_u: CostFn,
    pub l_yy: CostFn,
    pub l_yu: CostFn,
    pub l_uu: CostFn,
    pub f: NonlinFn,
    pub f_prime: NonlinFn,
    pub f_second: NonlinFn,
    pub g: MixedFn,
    pub g_y: MixedFn,
    pub g_yy: MixedFn,
    pub lower: f64,
    pub upper: f64,
    pub eps: f64,
    pub y0: InitFn,
    pub diffusion: Coefficient,
    pub horizon: f64,
    /// True when `f` is linear and `g` affine in `y` (enables the dense
    /// brute-force oracle).
    pub convex_structure: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("eps", &self.eps)
            .field("horizon", &self.horizon)
            .field("convex_structure", &self.convex_structure)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Validate bounds, weights and derivative callbacks; returns the spec
    /// unchanged on success. The derivative check compares each supplied
    /// partial with central finite differences at `n_samples` random points
    /// of the given ranges.
    pub fn validated(
        self,
        y_range: (f64, f64),
        u_range: (f64, f64),
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(self.lower < self.upper) {
            return Err(CoreError::invalid(
                "bounds",
                format!("need a < b, got a = {}, b = {}", self.lower, self.upper),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        let f0 = (self.f)(0.0);
        if f0.abs() > 1e-12 {
            return Err(CoreError::invalid("f", format!("f(0) must vanish, got {f0}")));
        }
        self.check_derivatives(y_range, u_range, n_samples, seed)?;
        Ok(self)
    }

    /// Finite-difference cross-check of every derivative callback.
    pub fn check_derivatives(
        &self,
        y_range: (f64, f64),
        u_range: (f64, f64),
        n_samples: usize,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let tol = |reference: f64| 1e-5 * (1.0 + reference.abs());
        for _ in 0..n_samples {
            let x = rng.gen_range(0.05..0.95);
            let xc = rng.gen_range(0.05..0.95);
            let t = rng.gen_range(0.0..1.0);
            let y = rng.gen_range(y_range.0..y_range.1);
            let u = rng.gen_range(u_range.0..u_range.1);

            let fd_ly = ((self.l)(x, xc, t, y + h, u) - (self.l)(x, xc, t, y - h, u)) / (2.0 * h);
            let an_ly = (self.l_y)(x, xc, t, y, u);
            if (fd_ly - an_ly).abs() > tol(an_ly) {
                return Err(CoreError::DerivativeMismatch {
                    which: "L_y",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_ly,
                    fd: fd_ly,
                });
            }
            let fd_lu = ((self.l)(x, xc, t, y, u + h) - (self.l)(x, xc, t, y, u - h)) / (2.0 * h);
            let an_lu = (self.l_u)(x, xc, t, y, u);
            if (fd_lu - an_lu).abs() > tol(an_lu) {
                return Err(CoreError::DerivativeMismatch {
                    which: "L_u",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_lu,
                    fd: fd_lu,
                });
            }
            let fd_lyy =
                ((self.l_y)(x, xc, t, y + h, u) - (self.l_y)(x, xc, t, y - h, u)) / (2.0 * h);
            let an_lyy = (self.l_yy)(x, xc, t, y, u);
            if (fd_lyy - an_lyy).abs() > tol(an_lyy) {
                return Err(CoreError::DerivativeMismatch {
                    which: "L_yy",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_lyy,
                    fd: fd_lyy,
                });
            }
            let fd_lyu =
                ((self.l_y)(x, xc, t, y, u + h) - (self.l_y)(x, xc, t, y, u - h)) / (2.0 * h);
            let an_lyu = (self.l_yu)(x, xc, t, y, u);
            if (fd_lyu - an_lyu).abs() > tol(an_lyu) {
                return Err(CoreError::DerivativeMismatch {
                    which: "L_yu",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_lyu,
                    fd: fd_lyu,
                });
            }
            let fd_luu =
                ((self.l_u)(x, xc, t, y, u + h) - (self.l_u)(x, xc, t, y, u - h)) / (2.0 * h);
            let an_luu = (self.l_uu)(x, xc, t, y, u);
            if (fd_luu - an_luu).abs() > tol(an_luu) {
                return Err(CoreError::DerivativeMismatch {
                    which: "L_uu",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_luu,
                    fd: fd_luu,
                });
            }
            let fd_fp = ((self.f)(y + h) - (self.f)(y - h)) / (2.0 * h);
            let an_fp = (self.f_prime)(y);
            if (fd_fp - an_fp).abs() > tol(an_fp) {
                return Err(CoreError::DerivativeMismatch {
                    which: "f'",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_fp,
                    fd: fd_fp,
                });
            }
            let fd_fpp = ((self.f_prime)(y + h) - (self.f_prime)(y - h)) / (2.0 * h);
            let an_fpp = (self.f_second)(y);
            if (fd_fpp - an_fpp).abs() > tol(an_fpp) {
                return Err(CoreError::DerivativeMismatch {
                    which: "f''",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_fpp,
                    fd: fd_fpp,
                });
            }
            let fd_gy = ((self.g)(x, xc, t, y + h) - (self.g)(x, xc, t, y - h)) / (2.0 * h);
            let an_gy = (self.g_y)(x, xc, t, y);
            if (fd_gy - an_gy).abs() > tol(an_gy) {
                return Err(CoreError::DerivativeMismatch {
                    which: "g_y",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_gy,
                    fd: fd_gy,
                });
            }
            let fd_gyy = ((self.g_y)(x, xc, t, y + h) - (self.g_y)(x, xc, t, y - h)) / (2.0 * h);
            let an_gyy = (self.g_yy)(x, xc, t, y);
            if (fd_gyy - an_gyy).abs() > tol(an_gyy) {
                return Err(CoreError::DerivativeMismatch {
                    which: "g_yy",
                    x,
                    t,
                    y,
                    u,
                    analytic: an_gyy,
                    fd: fd_gyy,
                });
            }
        }
        Ok(())
    }

    /// Sample the initial datum on the mesh; rejects data that do not vanish
    /// on the boundary of the rectangle.
    pub fn sample_initial(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        let check = |x: f64, yc: f64| -> Result<()> {
            let v = (self.y0)(x, yc, mesh.dim);
            if v.abs() > 1e-10 {
                return Err(CoreError::invalid(
                    "y0",
                    format!("initial datum must vanish on the boundary; y0({x}, {yc}) = {v}"),
                ));
            }
            Ok(())
        };
        if mesh.dim == 1 {
            check(0.0, 0.0)?;
            check(mesh.lx, 0.0)?;
        } else {
            for i in 0..=mesh.nx + 1 {
                let x = i as f64 * mesh.hx;
                check(x, 0.0)?;
                check(x, mesh.ly)?;
            }
            for j in 0..=mesh.ny + 1 {
                let y = j as f64 * mesh.hy;
                check(0.0, y)?;
                check(mesh.lx, y)?;
            }
        }
        Ok((0..mesh.n_nodes())
            .map(|k| {
                let (x, yc) = mesh.node_coord(k);
                (self.y0)(x, yc, mesh.dim)
            })
            .collect())
    }
}

/// Tracking problem for the cubic nonlinearity `f(y) = y^3 + y` with
/// `g(x,t,y) = -y - gamma`, `eps = 1`, `a = 0`:
/// `L = 1/2 (y - y_d)^2 + lambda/2 u^2`.
///
/// The nonnegative sine-bump initial datum and `u >= 0` keep the state
/// nonnegative, so the separation margin is at least `gamma`.
pub fn make_example_cubic(
    gamma: f64,
    b: f64,
    lambda: f64,
    y_d: f64,
    y0_amplitude: f64,
) -> Result<ProblemSpec> {
    if !(gamma > 0.0) {
        return Err(CoreError::invalid("gamma", format!("must be positive, got {gamma}")));
    }
    if !(b > 0.0) {
        return Err(CoreError::invalid("b", format!("must be positive, got {b}")));
    }
    if !(lambda > 0.0) {
        return Err(CoreError::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if y0_amplitude < 0.0 {
        return Err(CoreError::invalid(
            "y0_amplitude",
            format!("must be nonnegative, got {y0_amplitude}"),
        ));
    }
    let spec = ProblemSpec {
        l: Arc::new(move |_x, _xc, _t, y, u| 0.5 * (y - y_d).powi(2) + 0.5 * lambda * u * u),
        l_y: Arc::new(move |_x, _xc, _t, y, _u| y - y_d),
        l_u: Arc::new(move |_x, _xc, _t, _y, u| lambda * u),
        l_yy: Arc::new(|_, _, _, _, _| 1.0),
        l_yu: Arc::new(|_, _, _, _, _| 0.0),
        l_uu: Arc::new(move |_, _, _, _, _| lambda),
        f: Arc::new(|y| y * y * y + y),
        f_prime: Arc::new(|y| 3.0 * y * y + 1.0),
        f_second: Arc::new(|y| 6.0 * y),
        g: Arc::new(move |_x, _xc, _t, y| -y - gamma),
        g_y: Arc::new(|_, _, _, _| -1.0),
        g_yy: Arc::new(|_, _, _, _| 0.0),
        lower: 0.0,
        upper: b,
        eps: 1.0,
        y0: Arc::new(move |x, yc, dim| {
            // Product sine bump, nonnegative and zero on the boundary of the
            // unit square / interval; harmless outside (0,1) because solvers
            // sample it on the mesh only.
            let sx = (std::f64::consts::PI * x).sin().max(0.0);
            let sy = if dim == 1 {
                1.0
            } else {
                (std::f64::consts::PI * yc).sin().max(0.0)
            };
            y0_amplitude * sx * sy
        }),
        diffusion: Coefficient::Constant(1.0),
        horizon: 1.0,
        convex_structure: false,
    };
    spec.validated((-2.0, 2.0), (-1.0, b + 1.0), 100, 7)
}

/// Convex instance: linear `f(y) = c*y`, affine `g(x,t,y) = g0 + g1*y`
/// (`g1 <= 0`), quadratic tracking cost. The fully discretized problem is a
/// convex QP, so the dense brute-force oracle applies.
#[allow(clippy::too_many_arguments)]
pub fn make_convex_quadratic(
    c: f64,
    lambda: f64,
    y_d: f64,
    g0: f64,
    g1: f64,
    eps: f64,
    a: f64,
    b: f64,
) -> Result<ProblemSpec> {
    if !(lambda > 0.0) {
        return Err(CoreError::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if c < 0.0 {
        return Err(CoreError::invalid("c", format!("must be nonnegative, got {c}")));
    }
    if g1 > 0.0 {
        return Err(CoreError::invalid("g1", format!("g_y must be <= 0, got {g1}")));
    }
    if !(eps > 0.0) {
        return Err(CoreError::invalid("eps", format!("must be positive, got {eps}")));
    }
    let spec = ProblemSpec {
        l: Arc::new(move |_x, _xc, _t, y, u| 0.5 * (y - y_d).powi(2) + 0.5 * lambda * u * u),
        l_y: Arc::new(move |_x, _xc, _t, y, _u| y - y_d),
        l_u: Arc::new(move |_x, _xc, _t, _y, u| lambda * u),
        l_yy: Arc::new(|_, _, _, _, _| 1.0),
        l_yu: Arc::new(|_, _, _, _, _| 0.0),
        l_uu: Arc::new(move |_, _, _, _, _| lambda),
        f: Arc::new(move |y| c * y),
        f_prime: Arc::new(move |_| c),
        f_second: Arc::new(|_| 0.0),
        g: Arc::new(move |_x, _xc, _t, y| g0 + g1 * y),
        g_y: Arc::new(move |_, _, _, _| g1),
        g_yy: Arc::new(|_, _, _, _| 0.0),
        lower: a,
        upper: b,
        eps,
        y0: Arc::new(|_, _, _| 0.0),
        diffusion: Coefficient::Constant(1.0),
        horizon: 1.0,
        convex_structure: true,
    };
    spec.validated((-2.0, 2.0), (a - 1.0, b + 1.0), 100, 11)
}

/// Build a catalog problem from named numeric parameters (the format used by
/// run configs). Known names: `"cubic_example"` and `"convex_quadratic"`.
pub fn from_catalog(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    match name {
        "cubic_example" => {
            let gamma = get("gamma", 0.1);
            let b = get("b", 1.0);
            let lambda = get("lambda", 1.0);
            let y_d = get("y_d", 0.0);
            let amp = get("y0_amplitude", 0.25);
            let mut spec = make_example_cubic(gamma, b, lambda, y_d, amp)?;
            spec.horizon = get("t_final", spec.horizon);
            Ok(spec)
        }
        "convex_quadratic" => {
            let mut spec = make_convex_quadratic(
                get("c", 0.0),
                get("lambda", 1.0),
                get("y_d", 0.0),
                get("g0", -1.0),
                get("g1", 0.0),
                get("eps", 1.0),
                get("a", 0.0),
                get("b", 1.0),
            )?;
            spec.horizon = get("t_final", spec.horizon);
            Ok(spec)
        }
        other => Err(CoreError::UnknownCatalog(other.to_string())),
    }
}

/// Integral of `L(x,t,y,u)` over `Q` by the scheme-consistent quadrature:
/// nodal sum weighted `hx*hy` in space, right-endpoint rule with weight `dt`
/// over levels `1..=nt` in time.
pub fn eval_objective(spec: &ProblemSpec, y: &Field, u: &Field, mesh: &Mesh) -> Result<f64> {
    y.require_match(mesh, "y")?;
    u.require_match(mesh, "u")?;
    let w = mesh.node_weight() * mesh.dt;
    let mut total = 0.0;
    for level in 1..mesh.n_levels() {
        let t = mesh.time(level);
        for k in 0..mesh.n_nodes() {
            let (x, yc) = mesh.node_coord(k);
            let v = (spec.l)(x, yc, t, y.at(level, k), u.at(level, k));
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "L",
                    node: k,
                    level,
                });
            }
            total += v;
        }
    }
    Ok(total * w)
}

/// Worst sampled margin of one hypothesis together with the sample point.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisMargin {
    pub satisfied: bool,
    /// Margin convention: the hypothesis holds iff `margin >= 0`.
    pub margin: f64,
    pub at_y: f64,
    pub at_u: f64,
}

/// Sampled validation of the standing hypotheses.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    /// `f(0) = 0` and `f'(y) >= 0`; margin is `min f'`.
    pub h2: HypothesisMargin,
    /// `f' >= -g_y/eps >= 0`; margin is the min of both gaps.
    pub h4_sign: HypothesisMargin,
    /// `L_uu >= gamma_1 > 0`; margin is the measured `gamma_1 = min L_uu`.
    pub h6_prime: HypothesisMargin,
}

/// Sample hypotheses H2, the H4 sign condition and H6' on a grid of
/// `samples x samples` points of `y_range x u_range` (plus a few fixed
/// space-time points for the `(x,t)`-dependence of `g` and `L`).
pub fn check_hypotheses(
    spec: &ProblemSpec,
    y_range: (f64, f64),
    u_range: (f64, f64),
    samples: usize,
) -> Result<HypothesisReport> {
    if !(y_range.1 > y_range.0) || !(u_range.1 > u_range.0) {
        return Err(CoreError::invalid("range", "sampling ranges must be non-degenerate"));
    }
    let n = samples.max(2);
    let xs = [0.1, 0.5, 0.9];
    let ts = [0.0, 0.5, 1.0];

    let mut h2_margin = f64::INFINITY;
    let mut h2_at = (0.0, 0.0);
    let mut h4_margin = f64::INFINITY;
    let mut h4_at = (0.0, 0.0);
    let mut h6_margin = f64::INFINITY;
    let mut h6_at = (0.0, 0.0);

    for i in 0..n {
        let y = y_range.0 + (y_range.1 - y_range.0) * i as f64 / (n - 1) as f64;
        let fp = (spec.f_prime)(y);
        if fp < h2_margin {
            h2_margin = fp;
            h2_at = (y, 0.0);
        }
        for &x in &xs {
            for &t in &ts {
                let gy = (spec.g_y)(x, x, t, y);
                // Both inequalities of the sign condition.
                let gap = (fp + gy / spec.eps).min(-gy / spec.eps);
                if gap < h4_margin {
                    h4_margin = gap;
                    h4_at = (y, 0.0);
                }
            }
        }
        for j in 0..n {
            let u = u_range.0 + (u_range.1 - u_range.0) * j as f64 / (n - 1) as f64;
            for &x in &xs {
                for &t in &ts {
                    let luu = (spec.l_uu)(x, x, t, y, u);
                    if luu < h6_margin {
                        h6_margin = luu;
                        h6_at = (y, u);
                    }
                }
            }
        }
    }

    let f0_ok = (spec.f)(0.0).abs() <= 1e-12;
    Ok(HypothesisReport {
        h2: HypothesisMargin {
            satisfied: f0_ok && h2_margin >= 0.0,
            margin: h2_margin,
            at_y: h2_at.0,
            at_u: h2_at.1,
        },
        h4_sign: HypothesisMargin {
            satisfied: h4_margin >= 0.0,
            margin: h4_margin,
            at_y: h4_at.0,
            at_u: h4_at.1,
        },
        h6_prime: HypothesisMargin {
            satisfied: h6_margin > 0.0,
            margin: h6_margin,
            at_y: h6_at.0,
            at_u: h6_at.1,
        },
    })
}
