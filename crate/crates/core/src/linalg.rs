//! Conjugate gradients with Jacobi preconditioning for the SPD systems
//! arising from implicit Euler steps.

use crate::error::{CoreError, Result};

/// Solve `A x = b` by preconditioned CG where `A` is given as a matrix-free
/// application `apply(x, out)` and `precond_diag` holds the main diagonal.
///
/// Convergence: `||r||_2 <= tol * ||b||_2` (absolute floor near machine
/// precision for `b = 0`). Returns the iteration count. A non-positive
/// curvature `p'Ap` aborts with [`CoreError::LinearBreakdown`]; callers add
/// step context.
pub fn conjugate_gradient<F>(
    apply: &F,
    b: &[f64],
    x: &mut [f64],
    precond_diag: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<usize>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let target = tol * bnorm;

    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r
        .iter()
        .zip(precond_diag)
        .map(|(ri, di)| ri / di.max(f64::MIN_POSITIVE))
        .collect();
    let mut p = z.clone();
    let mut rz: f64 = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for iter in 0..max_iters {
        if norm2(&r) <= target {
            return Ok(iter);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            let min_diag = precond_diag.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(CoreError::LinearBreakdown {
                step: 0,
                curvature: pap,
                min_diag,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / precond_diag[i].max(f64::MIN_POSITIVE);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm2(&r) <= target * 10.0 {
        // Accept a mildly stalled solve; the residual is still far below
        // the discretization error.
        return Ok(max_iters);
    }
    Err(CoreError::invalid(
        "cg",
        format!(
            "no convergence in {max_iters} iterations: ||r|| = {:.3e}, target {:.3e}",
            norm2(&r),
            target
        ),
    ))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_elliptic, build_mesh, Coefficient};

    #[test]
    fn cg_solves_shifted_laplacian() {
        let m = build_mesh(2, 1.0, 1.0, 12, 12, 1.0, 1).unwrap();
        let a = assemble_elliptic(&m, &Coefficient::Constant(1.0)).unwrap();
        let n = a.n();
        let xs: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            a.apply(v, out);
            for i in 0..n {
                out[i] += v[i];
            }
        };
        let mut b = vec![0.0; n];
        apply(&xs, &mut b);
        let diag: Vec<f64> = a.diag().iter().map(|d| d + 1.0).collect();
        let mut x = vec![0.0; n];
        conjugate_gradient(&apply, &b, &mut x, &diag, 1e-13, 10 * n).unwrap();
        let err = xs
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn cg_detects_indefinite_system() {
        let apply = |v: &[f64], out: &mut [f64]| {
            out[0] = -v[0];
            out[1] = -v[1];
        };
        let b = [1.0, 2.0];
        let mut x = [0.0, 0.0];
        let diag = [-1.0, -1.0];
        let err = conjugate_gradient(&apply, &b, &mut x, &diag, 1e-12, 50).unwrap_err();
        assert!(matches!(err, CoreError::LinearBreakdown { .. }));
    }
}
