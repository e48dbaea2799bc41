//! Dense strictly convex quadratic programming:
//! `min 1/2 x'Hx + q'x  s.t.  Cx <= d`.
//!
//! A short-step primal-dual interior-point iteration localizes the solution,
//! then an active-set polish solves the equality-constrained KKT system
//! exactly and verifies multiplier signs. Used only by the tiny-grid
//! brute-force oracle, so everything is dense (nalgebra).

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One nonnegative multiplier per row of `C`.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    /// Max-norm of the stationarity residual `Hx + q + C'z` after polishing.
    pub kkt_residual: f64,
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    tol: f64,
) -> Result<QpSolution> {
    let n = h.nrows();
    let m = c.nrows();
    if h.ncols() != n || q.len() != n || c.ncols() != n || d.len() != m {
        return Err(CoreError::DimensionMismatch(format!(
            "qp: H {}x{}, q {}, C {}x{}, d {}",
            h.nrows(),
            h.ncols(),
            q.len(),
            c.nrows(),
            c.ncols(),
            d.len()
        )));
    }

    // Unconstrained minimizer as the primal seed.
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| CoreError::NonConvexSpec("Hessian is not positive definite".into()))?;
    let mut x = chol.solve(&(-q));

    if m == 0 {
        return Ok(QpSolution {
            x,
            multipliers: DVector::zeros(0),
            active: Vec::new(),
            iterations: 0,
            kkt_residual: 0.0,
        });
    }

    let mut s = DVector::from_element(m, 1.0);
    let cx = c * &x;
    for i in 0..m {
        s[i] = (d[i] - cx[i]).max(1.0);
    }
    let mut z = DVector::from_element(m, 1.0);

    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let r_d = h * &x + q + c.transpose() * &z;
        let r_p = c * &x + &s - d;
        let mu = s.dot(&z) / m as f64;
        if r_d.amax() < tol && r_p.amax() < tol && mu < tol {
            break;
        }
        let sigma = 0.1;
        // Reduced Newton system: (H + C' S^-1 Z C) dx = rhs.
        let mut hk = h.clone();
        for i in 0..m {
            let w = z[i] / s[i];
            for a in 0..n {
                let cia = c[(i, a)];
                if cia == 0.0 {
                    continue;
                }
                for b in 0..n {
                    hk[(a, b)] += w * cia * c[(i, b)];
                }
            }
        }
        let mut rhs = -&r_d;
        for i in 0..m {
            let rc = s[i] * z[i] - sigma * mu;
            let coeff = rc / s[i] - (z[i] / s[i]) * r_p[i];
            for a in 0..n {
                rhs[a] += c[(i, a)] * coeff;
            }
        }
        let dx = match hk.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                return Err(CoreError::NonConvexSpec(
                    "interior-point system lost positive definiteness".into(),
                ))
            }
        };
        let cdx = c * &dx;
        let mut ds = DVector::zeros(m);
        let mut dz = DVector::zeros(m);
        for i in 0..m {
            ds[i] = -r_p[i] - cdx[i];
            dz[i] = -(s[i] * z[i] - sigma * mu + z[i] * ds[i]) / s[i];
        }
        let mut alpha_p: f64 = 1.0;
        let mut alpha_d: f64 = 1.0;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-s[i] / ds[i]);
            }
            if dz[i] < 0.0 {
                alpha_d = alpha_d.min(-z[i] / dz[i]);
            }
        }
        let tau = 0.995;
        let ap = (tau * alpha_p).min(1.0);
        let ad = (tau * alpha_d).min(1.0);
        x += ap * dx;
        s += ap * ds;
        z += ad * dz;
    }

    polish(h, q, c, d, x, z, iterations, tol)
}

/// Identify the active set from the interior-point iterate, solve the
/// equality-constrained KKT system exactly and verify signs, adjusting the
/// working set when a check fails.
#[allow(clippy::too_many_arguments)]
fn polish(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    x_ipm: DVector<f64>,
    z_ipm: DVector<f64>,
    ipm_iters: usize,
    tol: f64,
) -> Result<QpSolution> {
    let n = h.nrows();
    let m = c.nrows();
    let cx = c * &x_ipm;
    let mut active: Vec<usize> = (0..m)
        .filter(|&i| d[i] - cx[i] < z_ipm[i].max(1e-8))
        .collect();

    for _round in 0..(2 * m + 2) {
        // KKT system [H C_A'; C_A 0] [x; z_A] = [-q; d_A].
        let na = active.len();
        let mut kkt = DMatrix::zeros(n + na, n + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (row, &i) in active.iter().enumerate() {
            for a in 0..n {
                kkt[(n + row, a)] = c[(i, a)];
                kkt[(a, n + row)] = c[(i, a)];
            }
        }
        let mut rhs = DVector::zeros(n + na);
        for a in 0..n {
            rhs[a] = -q[a];
        }
        for (row, &i) in active.iter().enumerate() {
            rhs[n + row] = d[i];
        }
        let lu = kkt.lu();
        let sol = match lu.solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                // Dependent active rows; drop the one with the smallest
                // interior-point multiplier and retry.
                if let Some(pos) = (0..active.len())
                    .min_by(|&a, &b| z_ipm[active[a]].partial_cmp(&z_ipm[active[b]]).unwrap())
                {
                    active.remove(pos);
                    continue;
                }
                return Err(CoreError::NonConvexSpec("singular KKT system".into()));
            }
        };
        let x = sol.rows(0, n).into_owned();
        let z_active = sol.rows(n, na).into_owned();

        // Most negative multiplier leaves the working set.
        if let Some((pos, _)) = z_active
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < -tol)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            active.remove(pos);
            continue;
        }
        // Most violated inactive constraint enters.
        let cx = c * &x;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let viol = cx[i] - d[i];
            if viol > tol && worst.map(|(_, w)| viol > w).unwrap_or(true) {
                worst = Some((i, viol));
            }
        }
        if let Some((i, _)) = worst {
            active.push(i);
            active.sort_unstable();
            continue;
        }

        let mut multipliers = DVector::zeros(m);
        for (row, &i) in active.iter().enumerate() {
            multipliers[i] = z_active[row].max(0.0);
        }
        let residual = (h * &x + q + c.transpose() * &multipliers).amax();
        return Ok(QpSolution {
            x,
            multipliers,
            active,
            iterations: ipm_iters,
            kkt_residual: residual,
        });
    }
    Err(CoreError::NonConvexSpec(
        "active-set polish did not settle".into(),
    ))
}
