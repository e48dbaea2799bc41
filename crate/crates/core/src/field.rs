//! Scalar grid functions on the space-time mesh.

use crate::error::{CoreError, Result};
use crate::mesh::Mesh;

/// A scalar function on interior nodes times time levels `0..=nt`.
///
/// States carry their initial datum at level 0. Control-shaped fields
/// (controls, multipliers, search directions) only act on levels `1..=nt`,
/// matching the implicit-Euler pairing; level 0 is kept for uniform storage
/// and mirrors level 1 after solves. All space-time reductions (integrals,
/// norms, residuals) run over levels `1..=nt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    n_nodes: usize,
    n_levels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(mesh: &Mesh) -> Self {
        Field {
            n_nodes: mesh.n_nodes(),
            n_levels: mesh.n_levels(),
            data: vec![0.0; mesh.n_nodes() * mesh.n_levels()],
        }
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Self {
        Field {
            n_nodes: mesh.n_nodes(),
            n_levels: mesh.n_levels(),
            data: vec![value; mesh.n_nodes() * mesh.n_levels()],
        }
    }

    /// Sample `f(x, y, t)` at every node and level.
    pub fn from_fn(mesh: &Mesh, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let n = mesh.n_nodes();
        let mut data = Vec::with_capacity(n * mesh.n_levels());
        for level in 0..mesh.n_levels() {
            let t = mesh.time(level);
            for k in 0..n {
                let (x, y) = mesh.node_coord(k);
                data.push(f(x, y, t));
            }
        }
        Field {
            n_nodes: n,
            n_levels: mesh.n_levels(),
            data,
        }
    }

    pub fn from_raw(n_nodes: usize, n_levels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_nodes * n_levels {
            return Err(CoreError::DimensionMismatch(format!(
                "field data length {} != {n_nodes} nodes x {n_levels} levels",
                data.len()
            )));
        }
        Ok(Field {
            n_nodes,
            n_levels,
            data,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn matches(&self, mesh: &Mesh) -> bool {
        self.n_nodes == mesh.n_nodes() && self.n_levels == mesh.n_levels()
    }

    pub fn require_match(&self, mesh: &Mesh, what: &'static str) -> Result<()> {
        if !self.matches(mesh) {
            return Err(CoreError::DimensionMismatch(format!(
                "{what}: field is {}x{}, mesh wants {}x{}",
                self.n_levels,
                self.n_nodes,
                mesh.n_levels(),
                mesh.n_nodes()
            )));
        }
        Ok(())
    }

    /// Error if any entry is non-finite.
    pub fn require_finite(&self, what: &'static str) -> Result<()> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite {
                    what,
                    node: idx % self.n_nodes,
                    level: idx / self.n_nodes,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, level: usize, node: usize) -> f64 {
        self.data[level * self.n_nodes + node]
    }

    #[inline]
    pub fn set(&mut self, level: usize, node: usize, value: f64) {
        self.data[level * self.n_nodes + node] = value;
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.data[level * self.n_nodes..(level + 1) * self.n_nodes]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        &mut self.data[level * self.n_nodes..(level + 1) * self.n_nodes]
    }

    pub fn set_level(&mut self, level: usize, values: &[f64]) {
        self.level_mut(level).copy_from_slice(values);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copy level 1 into level 0 (used for control-shaped fields so that the
    /// stored level 0 is a sensible plane rather than stale data).
    pub fn mirror_level0(&mut self) {
        if self.n_levels > 1 {
            let src: Vec<f64> = self.level(1).to_vec();
            self.set_level(0, &src);
        }
    }

    /// Max norm over all levels.
    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Max norm over the active levels `1..=nt`.
    pub fn norm_inf_active(&self) -> f64 {
        self.data[self.n_nodes..]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Weighted L2 norm over `Q`: levels `1..=nt`, node weight `w`, time
    /// weight `dt`.
    pub fn norm_l2(&self, mesh: &Mesh) -> f64 {
        self.inner_l2(self, mesh).sqrt()
    }

    /// Weighted L2 inner product over `Q` (levels `1..=nt`).
    pub fn inner_l2(&self, other: &Field, mesh: &Mesh) -> f64 {
        debug_assert_eq!(self.n_nodes, other.n_nodes);
        let w = mesh.node_weight() * mesh.dt;
        let skip = self.n_nodes;
        self.data[skip..]
            .iter()
            .zip(&other.data[skip..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * w
    }

    /// Pointwise minimum over all levels.
    pub fn min(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// Pointwise maximum over all levels.
    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }

    /// `self + s * other`, allocating.
    pub fn axpy(&self, s: f64, other: &Field) -> Field {
        debug_assert_eq!(self.data.len(), other.data.len());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Field {
            n_nodes: self.n_nodes,
            n_levels: self.n_levels,
            data,
        }
    }

    /// In-place `self += s * other`.
    pub fn axpy_mut(&mut self, s: f64, other: &Field) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            n_nodes: self.n_nodes,
            n_levels: self.n_levels,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    #[test]
    fn sampling_and_norms() {
        let m = build_mesh(1, 1.0, 0.0, 4, 0, 1.0, 2).unwrap();
        let f = Field::from_fn(&m, |x, _, t| x + t);
        assert_eq!(f.n_levels(), 3);
        assert!((f.at(0, 0) - 0.2).abs() < 1e-15);
        assert!((f.at(2, 3) - 1.8).abs() < 1e-15);
        assert!(f.matches(&m));
        // Constant 1 on levels 1..=2: ||1||_{L2}^2 = sum dt * sum h = 1 * 4*0.2 = 0.8.
        let one = Field::constant(&m, 1.0);
        assert!((one.norm_l2(&m).powi(2) - 0.8).abs() < 1e-14);
    }

    #[test]
    fn finite_check_reports_position() {
        let m = build_mesh(1, 1.0, 0.0, 3, 0, 1.0, 1).unwrap();
        let mut f = Field::zeros(&m);
        f.set(1, 2, f64::NAN);
        match f.require_finite("u") {
            Err(CoreError::NonFinite { node, level, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(level, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
