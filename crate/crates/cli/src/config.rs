//! Run configuration (TOML). See the repository README for the grammar.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use paroc_core::mesh::{build_mesh, Mesh};
use paroc_core::optimize::OptimizeParams;
use paroc_core::problem::{from_catalog, ProblemSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub mesh: MeshSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub verification: VerificationSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ProblemSection {
    /// Catalog name: `cubic_example` or `convex_quadratic`.
    pub catalog: String,
    /// Numeric parameters passed through to the catalog constructor.
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub dim: usize,
    pub nx: usize,
    #[serde(default)]
    pub ny: usize,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
    pub nt: usize,
    #[serde(default = "one")]
    pub t_final: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub penalty0: f64,
    pub penalty_growth: f64,
    pub grad_tol: f64,
    pub feas_tol: f64,
    pub kkt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub armijo_sigma: f64,
    pub backtrack: f64,
    /// Constant initial control; defaults to the box midpoint.
    pub u_init: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let p = OptimizeParams::default();
        OptimizerSection {
            penalty0: p.penalty0,
            penalty_growth: p.penalty_growth,
            grad_tol: p.grad_tol,
            feas_tol: p.feas_tol,
            kkt_tol: p.kkt_tol,
            max_outer: p.max_outer,
            max_inner: p.max_inner,
            armijo_sigma: p.armijo_sigma,
            backtrack: p.backtrack,
            u_init: None,
        }
    }
}

impl OptimizerSection {
    pub fn to_params(&self) -> OptimizeParams {
        OptimizeParams {
            penalty0: self.penalty0,
            penalty_growth: self.penalty_growth,
            grad_tol: self.grad_tol,
            feas_tol: self.feas_tol,
            kkt_tol: self.kkt_tol,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            armijo_sigma: self.armijo_sigma,
            backtrack: self.backtrack,
            ..OptimizeParams::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationSection {
    pub kkt_tol: f64,
    pub soc_samples: usize,
    pub soc_margin: f64,
    pub growth_perturbations: usize,
    pub growth_radius: f64,
    pub holder_pairs: usize,
    pub parabolic_metric: bool,
    pub min_alpha: f64,
    pub seed: u64,
    pub rho: Vec<f64>,
}

impl Default for VerificationSection {
    fn default() -> Self {
        VerificationSection {
            kkt_tol: 1e-6,
            soc_samples: 200,
            soc_margin: 0.0,
            growth_perturbations: 100,
            growth_radius: 1e-2,
            holder_pairs: 20_000,
            parabolic_metric: true,
            min_alpha: 0.0,
            seed: 42,
            rho: vec![1e-2, 1e-3],
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Interior node counts; 2D sweeps use nx = ny.
    #[serde(default)]
    pub nx: Vec<usize>,
    /// Separation parameters for the cubic example.
    #[serde(default)]
    pub gamma: Vec<f64>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config parse error in {}: {e}", path.display()))
    }

    /// Build the problem. The mesh horizon is authoritative for `T`.
    pub fn build_problem(&self) -> Result<ProblemSpec, String> {
        let mut spec = from_catalog(&self.problem.catalog, &self.problem.params)
            .map_err(|e| format!("problem section: {e}"))?;
        spec.horizon = self.mesh.t_final;
        Ok(spec)
    }

    pub fn build_mesh(&self) -> Result<Mesh, String> {
        build_mesh(
            self.mesh.dim,
            self.mesh.lx,
            self.mesh.ly,
            self.mesh.nx,
            self.mesh.ny,
            self.mesh.t_final,
            self.mesh.nt,
        )
        .map_err(|e| format!("mesh section: {e}"))
    }
}
