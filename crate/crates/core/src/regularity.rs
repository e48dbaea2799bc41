//! Empirical Hölder-exponent estimation, discrete maximum-principle checks
//! and the positive-geometric-density constants for rectangles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::mesh::{EllipticOperator, Mesh};
use crate::pde::solve_state;
use crate::problem::ProblemSpec;

/// One Hölder-exponent fit.
#[derive(Clone, Debug, Serialize)]
pub struct HolderEstimate {
    /// Least-squares slope of `log(max increment)` against `log(distance)`,
    /// clipped to `(0, 1.05]`.
    pub alpha: f64,
    /// Hölder constant from the fit intercept.
    pub constant: f64,
    /// Two-sigma band on the slope.
    pub band: f64,
    pub pairs_used: usize,
    pub bins_used: usize,
    pub fit_residual: f64,
    pub low_confidence: bool,
    /// Per-bin `(distance, max increment)` scatter for plotting.
    pub bins: Vec<(f64, f64)>,
}

/// Estimate the Hölder exponent of a field by sampling point pairs into
/// dyadic distance bins and fitting the max-increment envelope. With the
/// parabolic flag the metric is `|x - x'| + |t - t'|^{1/2}`, otherwise
/// `|x - x'| + |t - t'|`.
///
/// `mask` optionally restricts sampling to a subset of node/level pairs
/// (indexed `level * n_nodes + node`). A constant field has no exponent and
/// returns [`CoreError::ConstantField`].
pub fn holder_estimate(
    field: &Field,
    mesh: &Mesh,
    n_pairs: usize,
    seed: u64,
    parabolic: bool,
    mask: Option<&[bool]>,
) -> Result<HolderEstimate> {
    field.require_match(mesh, "field")?;
    if n_pairs < 100 {
        return Err(CoreError::invalid("n_pairs", "need at least 100 pairs"));
    }
    let n = mesh.n_nodes();
    let points: Vec<(usize, usize)> = (0..mesh.n_levels())
        .flat_map(|lev| (0..n).map(move |k| (lev, k)))
        .filter(|(lev, k)| mask.map(|m| m[lev * n + k]).unwrap_or(true))
        .collect();
    if points.len() < 2 {
        return Err(CoreError::ConstantField);
    }
    let values: Vec<f64> = points.iter().map(|&(lev, k)| field.at(lev, k)).collect();
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if vmax - vmin <= 1e-14 * (1.0 + vmax.abs()) {
        return Err(CoreError::ConstantField);
    }

    // Fast lookup from grid position to the index within `points`.
    let mut point_of: Vec<Option<usize>> = vec![None; mesh.n_levels() * n];
    for (pi, &(lev, k)) in points.iter().enumerate() {
        point_of[lev * n + k] = Some(pi);
    }

    // Distances below the grid resolution carry no continuum information.
    let mut min_sp = mesh.hx;
    if mesh.dim == 2 {
        min_sp = min_sp.min(mesh.hy);
    }
    let time_metric = |dt_abs: f64| if parabolic { dt_abs.sqrt() } else { dt_abs };
    if mesh.n_levels() > 1 {
        min_sp = min_sp.min(time_metric(mesh.dt));
    }
    let cutoff = 1.5 * min_sp;
    let diameter = mesh.lx
        + if mesh.dim == 2 { mesh.ly } else { 0.0 }
        + time_metric(mesh.total_time);
    // The largest scales are boundary-dominated and saturate at the total
    // oscillation; fit well below the diameter, keeping at least a few
    // octaves above the resolution cutoff.
    let d_max = (diameter / 8.0).max(8.0 * cutoff);

    let distance = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let (xa, ya) = mesh.node_coord(a.1);
        let (xb, yb) = mesh.node_coord(b.1);
        (xa - xb).abs()
            + (ya - yb).abs()
            + time_metric((mesh.time(a.0) - mesh.time(b.0)).abs())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per-bin max increment and the distance where it occurred.
    let mut bins: std::collections::BTreeMap<i32, (f64, f64)> = std::collections::BTreeMap::new();
    let record = |i: usize, j: usize, bins: &mut std::collections::BTreeMap<i32, (f64, f64)>| {
        let d = distance(points[i], points[j]);
        if d < cutoff || d > d_max {
            return;
        }
        let inc = (values[i] - values[j]).abs();
        // Half-octave bins.
        let key = (2.0 * d.log2()).floor() as i32;
        let entry = bins.entry(key).or_insert((d, 0.0));
        if inc > entry.1 {
            *entry = (d, inc);
        }
    };

    for pair in 0..n_pairs {
        if pair % 2 == 0 {
            // Uniform pair: covers the bulk scales.
            let i = rng.gen_range(0..points.len());
            let j = rng.gen_range(0..points.len());
            if i == j {
                continue;
            }
            record(i, j, &mut bins);
        } else {
            // Axis-stratified pair at a log-uniform target distance: keeps
            // the small-distance bins populated near sharp features.
            let i = rng.gen_range(0..points.len());
            let (lev, k) = points[i];
            let (ix, iy) = mesh.node_index2(k);
            let target = cutoff * (diameter / cutoff).powf(rng.gen_range(0.0..1.0));
            let axis = rng.gen_range(0..if mesh.dim == 2 { 3 } else { 2 });
            let sign: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
            let other = match axis {
                0 => {
                    let steps = (target / mesh.hx).round().max(1.0) as i64;
                    let jx = ix as i64 + sign * steps;
                    if jx < 0 || jx >= mesh.nx as i64 {
                        continue;
                    }
                    (lev, mesh.flat_index(jx as usize, iy))
                }
                1 if mesh.dim == 2 => {
                    let steps = (target / mesh.hy).round().max(1.0) as i64;
                    let jy = iy as i64 + sign * steps;
                    if jy < 0 || jy >= mesh.ny as i64 {
                        continue;
                    }
                    (lev, mesh.flat_index(ix, jy as usize))
                }
                _ => {
                    let dt_needed = if parabolic { target * target } else { target };
                    let steps = (dt_needed / mesh.dt).round().max(1.0) as i64;
                    let jl = lev as i64 + sign * steps;
                    if jl < 0 || jl >= mesh.n_levels() as i64 {
                        continue;
                    }
                    (jl as usize, k)
                }
            };
            match point_of[other.0 * n + other.1] {
                Some(j) if j != i => record(i, j, &mut bins),
                _ => continue,
            }
        }
    }

    // Bins whose max increment approaches the total oscillation are
    // saturated and carry no scaling information.
    let oscillation = vmax - vmin;
    let scatter: Vec<(f64, f64)> = bins
        .values()
        .filter(|(_, inc)| *inc > 0.0 && *inc <= 0.5 * oscillation)
        .cloned()
        .collect();
    let bins_used = scatter.len();
    if bins_used < 2 {
        return Err(CoreError::ConstantField);
    }
    let low_confidence = bins_used < 3;

    // Least squares on (log d, log max-increment).
    let xs: Vec<f64> = scatter.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = scatter.iter().map(|(_, m)| m.ln()).collect();
    let nf = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx.max(f64::MIN_POSITIVE);
    let intercept = my - slope * mx;
    let residual2: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let p = intercept + slope * x;
            (y - p) * (y - p)
        })
        .sum();
    let fit_residual = (residual2 / nf).sqrt();
    let band = if nf > 2.0 {
        2.0 * (residual2 / (nf - 2.0)).sqrt() / sxx.max(f64::MIN_POSITIVE).sqrt()
    } else {
        f64::MAX
    };

    Ok(HolderEstimate {
        alpha: slope.clamp(1e-3, 1.05),
        constant: intercept.exp(),
        band,
        pairs_used: n_pairs,
        bins_used,
        fit_residual,
        low_confidence,
        bins: scatter,
    })
}

/// Nonnegativity part of the discrete maximum principle.
#[derive(Clone, Debug, Serialize)]
pub struct MaxPrincipleReport {
    /// The check applies only when `u >= 0` and `y0 >= 0`.
    pub applicable: bool,
    pub min_y: f64,
    pub ok: bool,
}

/// Verify nonnegativity of the state for nonnegative data: `u >= 0` and
/// `y0 >= 0` imply `min y >= -1e-12`.
pub fn maximum_principle_check(
    spec: &ProblemSpec,
    y: &Field,
    u: &Field,
    mesh: &Mesh,
) -> Result<MaxPrincipleReport> {
    y.require_match(mesh, "y")?;
    u.require_match(mesh, "u")?;
    let y0 = spec.sample_initial(mesh)?;
    let data_nonneg = u.data()[mesh.n_nodes()..].iter().all(|v| *v >= 0.0)
        && y0.iter().all(|v| *v >= 0.0);
    let min_y = y.min();
    Ok(MaxPrincipleReport {
        applicable: data_nonneg,
        min_y,
        ok: !data_nonneg || min_y >= -1e-12,
    })
}

/// Comparison part of the maximum principle: `u1 >= u2` pointwise implies
/// `S(u1) >= S(u2) - 1e-12` nodewise.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub min_gap: f64,
    pub ok: bool,
}

pub fn comparison_check(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    u_hi: &Field,
    u_lo: &Field,
    mesh: &Mesh,
) -> Result<ComparisonReport> {
    for (a, b) in u_hi.data().iter().zip(u_lo.data()) {
        if a < b {
            return Err(CoreError::invalid("controls", "u_hi must dominate u_lo pointwise"));
        }
    }
    let (y_hi, _) = solve_state(spec, op, u_hi, mesh)?;
    let (y_lo, _) = solve_state(spec, op, u_lo, mesh)?;
    let min_gap = y_hi.axpy(-1.0, &y_lo).min();
    Ok(ComparisonReport {
        min_gap,
        ok: min_gap >= -1e-12,
    })
}

/// Domain descriptor for the positive-geometric-density check.
#[derive(Clone, Debug)]
pub enum DomainDescriptor {
    Interval { length: f64 },
    Rectangle { lx: f64, ly: f64 },
    Irregular { name: String },
}

impl DomainDescriptor {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        if mesh.dim == 1 {
            DomainDescriptor::Interval { length: mesh.lx }
        } else {
            DomainDescriptor::Rectangle {
                lx: mesh.lx,
                ly: mesh.ly,
            }
        }
    }
}

/// Positive geometric density constants of the boundary.
#[derive(Clone, Copy, Debug, Serialize)]
pub enum PositiveDensity {
    /// Convex domains satisfy the density property with `alpha* = 1/2` up to
    /// radius `r0`.
    Known { alpha_star: f64, r0: f64 },
    Unsupported,
}

pub fn check_positive_density(domain: &DomainDescriptor) -> PositiveDensity {
    match domain {
        DomainDescriptor::Interval { length } => PositiveDensity::Known {
            alpha_star: 0.5,
            r0: 0.5 * length,
        },
        DomainDescriptor::Rectangle { lx, ly } => PositiveDensity::Known {
            alpha_star: 0.5,
            r0: 0.5 * lx.min(*ly),
        },
        DomainDescriptor::Irregular { .. } => PositiveDensity::Unsupported,
    }
}

/// Full regularity report for a solution bundle: Hölder estimates for the
/// state, costate and control, and per-region estimates for the
/// multipliers.
#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub y: Option<HolderEstimate>,
    pub phi: Option<HolderEstimate>,
    pub u: Option<HolderEstimate>,
    /// Regions keyed "a", "b", "mixed", "inactive"; `None` marks a region
    /// that is empty or constant there (no exponent to estimate).
    pub e_regions: Vec<(String, Option<HolderEstimate>)>,
    pub ehat_regions: Vec<(String, Option<HolderEstimate>)>,
    pub alpha_star: f64,
    pub r0: f64,
}

fn optional_estimate(
    field: &Field,
    mesh: &Mesh,
    n_pairs: usize,
    seed: u64,
    parabolic: bool,
    mask: Option<&[bool]>,
) -> Result<Option<HolderEstimate>> {
    match holder_estimate(field, mesh, n_pairs, seed, parabolic, mask) {
        Ok(est) => Ok(Some(est)),
        Err(CoreError::ConstantField) => Ok(None),
        Err(other) => Err(other),
    }
}

/// Estimate exponents for all solution fields. Multiplier estimates are
/// restricted per active region, mirroring where each multiplier carries
/// information.
pub fn solution_regularity(
    sol: &crate::optimize::Solution,
    sets: &crate::kkt::ActiveSets,
    mesh: &Mesh,
    n_pairs: usize,
    seed: u64,
    parabolic: bool,
) -> Result<RegularityReport> {
    let total = mesh.n_nodes() * mesh.n_levels();
    let mut inactive = vec![false; total];
    for i in 0..total {
        inactive[i] = sets.mask_ab[i] && !sets.mask_mixed[i];
    }
    let regions: Vec<(String, Vec<bool>)> = vec![
        ("a".to_string(), sets.mask_a.clone()),
        ("b".to_string(), sets.mask_b.clone()),
        ("mixed".to_string(), sets.mask_mixed.clone()),
        ("inactive".to_string(), inactive),
    ];
    let mut e_regions = Vec::new();
    let mut ehat_regions = Vec::new();
    for (name, mask) in &regions {
        e_regions.push((
            name.clone(),
            optional_estimate(&sol.e, mesh, n_pairs, seed ^ 0x5e, parabolic, Some(mask))?,
        ));
        ehat_regions.push((
            name.clone(),
            optional_estimate(&sol.e_hat, mesh, n_pairs, seed ^ 0xe4a7, parabolic, Some(mask))?,
        ));
    }
    let density = check_positive_density(&DomainDescriptor::from_mesh(mesh));
    let (alpha_star, r0) = match density {
        PositiveDensity::Known { alpha_star, r0 } => (alpha_star, r0),
        PositiveDensity::Unsupported => (f64::NAN, f64::NAN),
    };
    Ok(RegularityReport {
        y: optional_estimate(&sol.y, mesh, n_pairs, seed ^ 0x01, parabolic, None)?,
        phi: optional_estimate(&sol.phi, mesh, n_pairs, seed ^ 0x02, parabolic, None)?,
        u: optional_estimate(&sol.u, mesh, n_pairs, seed ^ 0x03, parabolic, None)?,
        e_regions,
        ehat_regions,
        alpha_star,
        r0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_elliptic, build_mesh};
    use crate::problem::make_example_cubic;

    #[test]
    fn linear_profile_is_lipschitz() {
        // Spatial profile; a negligible horizon keeps cross-time pairs from
        // diluting the top distance bins.
        let mesh = build_mesh(1, 1.0, 0.0, 255, 0, 1e-9, 1).unwrap();
        let f = Field::from_fn(&mesh, |x, _, _| x);
        let est = holder_estimate(&f, &mesh, 20_000, 1, false, None).unwrap();
        assert!(
            (0.95..=1.05).contains(&est.alpha),
            "alpha = {} (band {})",
            est.alpha,
            est.band
        );
    }

    #[test]
    fn square_root_profile_is_half_holder() {
        // sqrt sampled from its singular point: the first interior node
        // carries the value at 0.
        let mesh = build_mesh(1, 1.0, 0.0, 1023, 0, 1e-9, 1).unwrap();
        let h = mesh.hx;
        let f = Field::from_fn(&mesh, |x, _, _| (x - h).max(0.0).sqrt());
        let est = holder_estimate(&f, &mesh, 60_000, 2, false, None).unwrap();
        assert!(
            (0.45..=0.55).contains(&est.alpha),
            "alpha = {} (band {})",
            est.alpha,
            est.band
        );
    }

    #[test]
    fn constant_field_has_no_exponent() {
        let mesh = build_mesh(1, 1.0, 0.0, 31, 0, 1.0, 2).unwrap();
        let f = Field::constant(&mesh, 3.0);
        assert!(matches!(
            holder_estimate(&f, &mesh, 1000, 1, false, None),
            Err(CoreError::ConstantField)
        ));
    }

    #[test]
    fn scale_equivariance() {
        let mesh = build_mesh(1, 1.0, 0.0, 127, 0, 1.0, 1).unwrap();
        let f = Field::from_fn(&mesh, |x, _, _| x.sqrt());
        let g = f.map(|v| 5.0 * v);
        let ef = holder_estimate(&f, &mesh, 20_000, 3, false, None).unwrap();
        let eg = holder_estimate(&g, &mesh, 20_000, 3, false, None).unwrap();
        assert!((ef.alpha - eg.alpha).abs() < 1e-9, "slope must be scale invariant");
        assert!(
            (eg.constant / ef.constant - 5.0).abs() < 1e-6,
            "constant must scale: {} vs {}",
            eg.constant,
            ef.constant
        );
    }

    #[test]
    fn refinement_stability_for_smooth_field() {
        let mut alphas = Vec::new();
        for &nx in &[63usize, 127] {
            let mesh = build_mesh(1, 1.0, 0.0, nx, 0, 1e-9, 1).unwrap();
            let f = Field::from_fn(&mesh, |x, _, _| (std::f64::consts::PI * x).sin());
            let est = holder_estimate(&f, &mesh, 20_000, 4, false, None).unwrap();
            alphas.push(est.alpha);
        }
        assert!((alphas[0] - alphas[1]).abs() < 0.1, "alphas {alphas:?}");
    }

    #[test]
    fn max_principle_zero_data() {
        let mesh = build_mesh(1, 1.0, 0.0, 9, 0, 1.0, 4).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.0).unwrap();
        let y = Field::zeros(&mesh);
        let u = Field::zeros(&mesh);
        let rep = maximum_principle_check(&spec, &y, &u, &mesh).unwrap();
        assert!(rep.applicable);
        assert!(rep.ok);
        assert_eq!(rep.min_y, 0.0);
    }

    #[test]
    fn max_principle_cubic_example() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.3, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u = Field::constant(&mesh, 0.5);
        let (y, _) = solve_state(&spec, &op, &u, &mesh).unwrap();
        let rep = maximum_principle_check(&spec, &y, &u, &mesh).unwrap();
        assert!(rep.applicable && rep.ok, "min y = {}", rep.min_y);
    }

    #[test]
    fn comparison_ordering_and_transitivity() {
        let mesh = build_mesh(1, 1.0, 0.0, 15, 0, 1.0, 8).unwrap();
        let spec = make_example_cubic(0.1, 1.0, 1.0, 0.0, 0.25).unwrap();
        let op = assemble_elliptic(&mesh, &spec.diffusion).unwrap();
        let u3 = Field::constant(&mesh, 0.1);
        // u2 = u3 + patch, u1 = u2 + patch.
        let patch = Field::from_fn(&mesh, |x, _, _| if (0.3..0.6).contains(&x) { 0.2 } else { 0.0 });
        let u2 = u3.axpy(1.0, &patch);
        let u1 = u2.axpy(1.0, &patch);
        let r12 = comparison_check(&spec, &op, &u1, &u2, &mesh).unwrap();
        let r23 = comparison_check(&spec, &op, &u2, &u3, &mesh).unwrap();
        let r13 = comparison_check(&spec, &op, &u1, &u3, &mesh).unwrap();
        assert!(r12.ok && r23.ok && r13.ok);
        // Strict increase somewhere inside the patch's domain of influence.
        let (y1, _) = solve_state(&spec, &op, &u1, &mesh).unwrap();
        let (y2, _) = solve_state(&spec, &op, &u2, &mesh).unwrap();
        assert!(y1.axpy(-1.0, &y2).max() > 1e-6);
        // Mismatched ordering is rejected.
        assert!(comparison_check(&spec, &op, &u3, &u1, &mesh).is_err());
    }

    #[test]
    fn density_constants() {
        let sq = check_positive_density(&DomainDescriptor::Rectangle { lx: 1.0, ly: 1.0 });
        match sq {
            PositiveDensity::Known { alpha_star, r0 } => {
                assert_eq!(alpha_star, 0.5);
                assert_eq!(r0, 0.5);
            }
            _ => panic!("rectangle must be supported"),
        }
        let iv = check_positive_density(&DomainDescriptor::Interval { length: 2.0 });
        match iv {
            PositiveDensity::Known { alpha_star, r0 } => {
                assert_eq!(alpha_star, 0.5);
                assert_eq!(r0, 1.0);
            }
            _ => panic!("interval must be supported"),
        }
        assert!(matches!(
            check_positive_density(&DomainDescriptor::Irregular { name: "L-shape".into() }),
            PositiveDensity::Unsupported
        ));
    }
}
