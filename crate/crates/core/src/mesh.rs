//! Structured grids on rectangles and the discrete elliptic operator.
//!
//! The spatial domain is an interval `(0, lx)` or a rectangle
//! `(0, lx) x (0, ly)`. Only interior nodes carry unknowns; the boundary is
//! eliminated (homogeneous Dirichlet), which keeps every assembled operator
//! symmetric positive definite and an M-matrix for positive coefficients.

use std::fmt;
use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Diffusion coefficient descriptor `a(x)` for the operator
/// `A y = -div(a grad y)` (diagonal tensor `a_ij = a(x) delta_ij`).
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// Pointwise coefficient; called with `(x, y)` (`y = 0` in 1D).
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl Coefficient {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Function(f) => f(x, y),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Coefficient::Constant({c})"),
            Coefficient::Function(_) => write!(f, "Coefficient::Function(..)"),
        }
    }
}

/// Space-time discretization of `Q = Omega x (0, T)`.
///
/// Interior nodes are indexed row-major: in 2D node `k = iy*nx + ix` sits at
/// `((ix+1)*hx, (iy+1)*hy)`; in 1D node `k` sits at `(k+1)*hx`.
/// Time levels run `0..=nt` with spacing `dt = T/nt`.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub dim: usize,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub lx: f64,
    pub ly: f64,
    pub nt: usize,
    pub dt: f64,
    pub total_time: f64,
}

impl Mesh {
    /// Number of interior nodes per time level.
    pub fn n_nodes(&self) -> usize {
        if self.dim == 1 {
            self.nx
        } else {
            self.nx * self.ny
        }
    }

    /// Number of stored time levels (`nt + 1`).
    pub fn n_levels(&self) -> usize {
        self.nt + 1
    }

    /// Quadrature weight of one interior node (`hx` in 1D, `hx*hy` in 2D).
    pub fn node_weight(&self) -> f64 {
        if self.dim == 1 {
            self.hx
        } else {
            self.hx * self.hy
        }
    }

    /// Coordinates of interior node `k`; second component is 0 in 1D.
    pub fn node_coord(&self, k: usize) -> (f64, f64) {
        if self.dim == 1 {
            ((k + 1) as f64 * self.hx, 0.0)
        } else {
            let ix = k % self.nx;
            let iy = k / self.nx;
            ((ix + 1) as f64 * self.hx, (iy + 1) as f64 * self.hy)
        }
    }

    /// Time of level `n`.
    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Grid index pair of node `k` (iy = 0 in 1D).
    pub fn node_index2(&self, k: usize) -> (usize, usize) {
        if self.dim == 1 {
            (k, 0)
        } else {
            (k % self.nx, k / self.nx)
        }
    }

    /// Flat index of grid position `(ix, iy)`.
    pub fn flat_index(&self, ix: usize, iy: usize) -> usize {
        if self.dim == 1 {
            ix
        } else {
            iy * self.nx + ix
        }
    }
}

/// Build a mesh for `Omega = (0,lx)` (dim 1) or `(0,lx) x (0,ly)` (dim 2)
/// and the time interval `(0, total_time)` with `nt` implicit-Euler steps.
///
/// `nx`/`ny` count interior nodes per axis, so `hx = lx/(nx+1)`.
pub fn build_mesh(
    dim: usize,
    lx: f64,
    ly: f64,
    nx: usize,
    ny: usize,
    total_time: f64,
    nt: usize,
) -> Result<Mesh> {
    match dim {
        1 | 2 => {}
        other => return Err(CoreError::UnsupportedDimension(other)),
    }
    if !(lx > 0.0) {
        return Err(CoreError::invalid("lx", format!("must be positive, got {lx}")));
    }
    if dim == 2 && !(ly > 0.0) {
        return Err(CoreError::invalid("ly", format!("must be positive, got {ly}")));
    }
    if !(total_time > 0.0) {
        return Err(CoreError::invalid(
            "T",
            format!("must be positive, got {total_time}"),
        ));
    }
    if nx < 2 {
        return Err(CoreError::invalid("nx", format!("need at least 2 interior nodes, got {nx}")));
    }
    if dim == 2 && ny < 2 {
        return Err(CoreError::invalid("ny", format!("need at least 2 interior nodes, got {ny}")));
    }
    if nt < 1 {
        return Err(CoreError::invalid("nt", "need at least 1 time step"));
    }
    let (ny_eff, ly_eff) = if dim == 1 { (1, 1.0) } else { (ny, ly) };
    let hy = if dim == 1 { 0.0 } else { ly / (ny as f64 + 1.0) };
    Ok(Mesh {
        dim,
        nx,
        ny: ny_eff,
        hx: lx / (nx as f64 + 1.0),
        hy,
        lx,
        ly: ly_eff,
        nt,
        dt: total_time / nt as f64,
        total_time,
    })
}

/// Sparse symmetric operator in CSR form together with its coefficient.
///
/// Rows are scaled so that `apply` approximates `-div(a grad .)` at interior
/// nodes (boundary values taken as zero).
#[derive(Clone, Debug)]
pub struct EllipticOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    diag: Vec<f64>,
}

impl EllipticOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `out = A * x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[idx] * x[self.col_idx[idx]];
            }
            out[i] = s;
        }
    }

    /// Main diagonal (used for Jacobi preconditioning).
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Entry `(i, j)`; zero if not stored.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[idx] == j {
                return self.values[idx];
            }
        }
        0.0
    }

    /// Iterate over stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |idx| (self.col_idx[idx], self.values[idx]))
    }

    /// Largest relative symmetry defect `|a_ij - a_ji| / max|a|`.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self
            .values
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.entry(j, i)).abs() / scale);
            }
        }
        worst
    }

    /// Estimate of the smallest eigenvalue by inverse power iteration
    /// (conjugate-gradient solves on the operator itself).
    pub fn min_eigenvalue_estimate(&self, iters: usize) -> f64 {
        use crate::linalg::conjugate_gradient;
        let n = self.n;
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= nrm;
            }
            let mut w = vec![0.0; n];
            // Solve A w = v.
            let apply = |x: &[f64], out: &mut [f64]| self.apply(x, out);
            conjugate_gradient(&apply, &v, &mut w, self.diag(), 1e-13, 20 * n)
                .expect("elliptic operator must be SPD");
            let num: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            lambda = 1.0 / num.max(f64::MIN_POSITIVE);
            v = w;
        }
        lambda
    }
}

/// Assemble the divergence-form operator with coefficient `a(x)` on the
/// interior nodes of `mesh` (3-point stencil in 1D, 5-point in 2D).
///
/// Face coefficients are arithmetic means of the nodal values; every face
/// value must be strictly positive.
pub fn assemble_elliptic(mesh: &Mesh, coeff: &Coefficient) -> Result<EllipticOperator> {
    let n = mesh.n_nodes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut diag = vec![0.0; n];
    row_ptr.push(0);

    let face_coeff = |xa: f64, ya: f64, xb: f64, yb: f64| -> Result<f64> {
        let a = 0.5 * (coeff.eval(xa, ya) + coeff.eval(xb, yb));
        if !(a > 0.0) {
            return Err(CoreError::NonPositiveCoefficient {
                x: 0.5 * (xa + xb),
                y: 0.5 * (ya + yb),
                value: a,
            });
        }
        Ok(a)
    };

    // Nodes on the boundary ring have neighbors eliminated by the Dirichlet
    // condition; the corresponding flux still contributes to the diagonal.
    for k in 0..n {
        let (ix, iy) = mesh.node_index2(k);
        let (x, y) = mesh.node_coord(k);
        let ihx2 = 1.0 / (mesh.hx * mesh.hx);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(5);
        let mut d = 0.0;

        let aw = face_coeff(x, y, x - mesh.hx, y)? * ihx2;
        d += aw;
        if ix > 0 {
            entries.push((mesh.flat_index(ix - 1, iy), -aw));
        }
        let ae = face_coeff(x, y, x + mesh.hx, y)? * ihx2;
        d += ae;
        if ix + 1 < mesh.nx {
            entries.push((mesh.flat_index(ix + 1, iy), -ae));
        }

        if mesh.dim == 2 {
            let ihy2 = 1.0 / (mesh.hy * mesh.hy);
            let as_ = face_coeff(x, y, x, y - mesh.hy)? * ihy2;
            d += as_;
            if iy > 0 {
                entries.push((mesh.flat_index(ix, iy - 1), -as_));
            }
            let an = face_coeff(x, y, x, y + mesh.hy)? * ihy2;
            d += an;
            if iy + 1 < mesh.ny {
                entries.push((mesh.flat_index(ix, iy + 1), -an));
            }
        }

        entries.push((k, d));
        entries.sort_by_key(|e| e.0);
        diag[k] = d;
        for (c, v) in entries {
            col_idx.push(c);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }

    Ok(EllipticOperator {
        n,
        row_ptr,
        col_idx,
        values,
        diag,
    })
}
