//! Subcommand implementations. Exit-code contract: 0 = success/certified,
//! 1 = a verification check failed, 2 = usage or configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use paroc_core::field::Field;
use paroc_core::io::{load_solution, save_solution, StoredSolution};
use paroc_core::kkt::{
    check_separation, classify_active_sets, default_tol_act, kkt_residuals, solve_adjoint_coupled,
    verify_robinson,
};
use paroc_core::mesh::{assemble_elliptic, EllipticOperator, Mesh};
use paroc_core::optimize::{solve_augmented_lagrangian, Solution};
use paroc_core::problem::{eval_objective, ProblemSpec};
use paroc_core::regularity::{maximum_principle_check, solution_regularity};
use paroc_core::soc::{growth_test, min_rayleigh};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub struct Ctx {
    pub config: RunConfig,
    pub out_override: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub quiet: bool,
    pub jobs: usize,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed_override.unwrap_or(self.config.verification.seed)
    }

    fn out_dir(&self) -> Result<PathBuf, String> {
        if let Some(dir) = &self.out_override {
            return Ok(dir.clone());
        }
        match &self.config.output.dir {
            Some(d) => Ok(PathBuf::from(d)),
            None => Err("no output directory: set [output] dir or pass --out".to_string()),
        }
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn build_all(config: &RunConfig) -> Result<(ProblemSpec, Mesh, EllipticOperator), String> {
    let spec = config.build_problem()?;
    let mesh = config.build_mesh()?;
    let op = assemble_elliptic(&mesh, &spec.diffusion).map_err(|e| format!("assembly: {e}"))?;
    Ok((spec, mesh, op))
}

pub fn cmd_solve(ctx: &Ctx) -> i32 {
    let (spec, mesh, op) = match build_all(&ctx.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let out = match ctx.out_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let u0_value = ctx
        .config
        .optimizer
        .u_init
        .unwrap_or(0.5 * (spec.lower + spec.upper));
    let u0 = Field::constant(&mesh, u0_value);
    let params = ctx.config.optimizer.to_params();
    let sol = match solve_augmented_lagrangian(&spec, &op, &u0, &params, &mesh) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: solve stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    if let Err(e) = save_solution(&out, &sol, &mesh) {
        eprintln!("error: persisting solution: {e}");
        return EXIT_CHECK_FAILED;
    }
    ctx.say(&format!(
        "solve: J = {:.6e}, stationarity = {:.3e}, feasibility = {:.3e}, certified = {}",
        sol.objective, sol.report.stationarity, sol.report.mixed_feasibility, sol.certified
    ));
    ctx.say(&format!("solution written to {}", out.display()));
    if sol.certified {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Rebuild the certification data from a stored solution: recompute the
/// costate, recover multipliers, evaluate residuals, the separation margins
/// and the Robinson construction.
pub fn cmd_certify(ctx: &Ctx, dir: &Path) -> i32 {
    let stored = match load_solution(dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let spec = match ctx.config.build_problem() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mesh = stored.mesh.clone();
    let op = match assemble_elliptic(&mesh, &spec.diffusion) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: assembly: {e}");
            return EXIT_USAGE;
        }
    };
    let tol = ctx.config.verification.kkt_tol;
    let result = (|| -> Result<(paroc_core::kkt::KktReport, Vec<paroc_core::kkt::RobinsonReport>), String> {
        let sets = classify_active_sets(&stored.u, &stored.y, &spec, &mesh, default_tol_act(&spec))
            .map_err(|e| e.to_string())?;
        let (phi, e, ehat) = solve_adjoint_coupled(&spec, &op, &stored.y, &stored.u, &sets, &mesh)
            .map_err(|e| e.to_string())?;
        let report = kkt_residuals(
            &spec, &op, &stored.y, &stored.u, &phi, &e, &ehat, &sets, &mesh, tol,
        )
        .map_err(|e| e.to_string())?;
        let mut robinson = Vec::new();
        for &rho in &ctx.config.verification.rho {
            robinson.push(
                verify_robinson(&spec, &op, &stored.y, &stored.u, rho, &mesh)
                    .map_err(|e| e.to_string())?,
            );
        }
        Ok((report, robinson))
    })();
    let (report, robinson) = match result {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: certify stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let margins = match check_separation(&spec, &stored.y, &stored.u, &mesh) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: certify stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };

    #[derive(serde::Serialize)]
    struct CertifyFile<'a> {
        report: &'a paroc_core::kkt::KktReport,
        separation: &'a paroc_core::kkt::SeparationMargins,
        robinson: &'a [paroc_core::kkt::RobinsonReport],
    }
    let payload = CertifyFile {
        report: &report,
        separation: &margins,
        robinson: &robinson,
    };
    let json = serde_json::to_string_pretty(&payload).expect("report serialization");
    if let Err(e) = std::fs::write(dir.join("kkt.json"), json + "\n") {
        eprintln!("error: writing kkt.json: {e}");
        return EXIT_CHECK_FAILED;
    }
    ctx.say(&format!(
        "certify: stationarity = {:.3e}, feasibility = {:.3e}, gamma = {:.4}, certified = {}",
        report.stationarity, report.mixed_feasibility, report.separation_gamma, report.certified
    ));
    for r in &robinson {
        ctx.say(&format!(
            "robinson rho = {:.1e}: delta = {:.3e} ({})",
            r.rho,
            r.delta,
            if r.success { "ok" } else { "failed" }
        ));
    }
    if report.certified {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

fn solution_from_stored(
    spec: &ProblemSpec,
    op: &EllipticOperator,
    stored: &StoredSolution,
    tol: f64,
) -> Result<(Solution, paroc_core::kkt::ActiveSets), String> {
    let mesh = &stored.mesh;
    let sets = classify_active_sets(&stored.u, &stored.y, spec, mesh, default_tol_act(spec))
        .map_err(|e| e.to_string())?;
    let report = kkt_residuals(
        spec,
        op,
        &stored.y,
        &stored.u,
        &stored.phi,
        &stored.e,
        &stored.e_hat,
        &sets,
        mesh,
        tol,
    )
    .map_err(|e| e.to_string())?;
    let objective =
        eval_objective(spec, &stored.y, &stored.u, mesh).map_err(|e| e.to_string())?;
    let certified = report.certified;
    Ok((
        Solution {
            u: stored.u.clone(),
            y: stored.y.clone(),
            phi: stored.phi.clone(),
            e: stored.e.clone(),
            e_hat: stored.e_hat.clone(),
            objective,
            report,
            history: Vec::new(),
            inner_history: Vec::new(),
            certified,
        },
        sets,
    ))
}

pub fn cmd_soc(ctx: &Ctx, dir: &Path) -> i32 {
    let stored = match load_solution(dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let spec = match ctx.config.build_problem() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mesh = stored.mesh.clone();
    let op = match assemble_elliptic(&mesh, &spec.diffusion) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: assembly: {e}");
            return EXIT_USAGE;
        }
    };
    let v = &ctx.config.verification;
    let (sol, sets) = match solution_from_stored(&spec, &op, &stored, v.kkt_tol) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: soc stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let rayleigh = match min_rayleigh(
        &spec,
        &op,
        &sol,
        &sets,
        v.soc_samples,
        ctx.seed(),
        v.soc_margin,
        &mesh,
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: soc sampling: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let growth = match growth_test(
        &spec,
        &op,
        &sol,
        v.growth_perturbations,
        v.growth_radius,
        ctx.seed().wrapping_add(1),
        &mesh,
    ) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: growth test: {e}");
            return EXIT_CHECK_FAILED;
        }
    };

    let mut samples_csv = String::from("sample,normalized_value\n");
    for (i, val) in rayleigh.values.iter().enumerate() {
        let _ = writeln!(samples_csv, "{i},{val}");
    }
    #[derive(serde::Serialize)]
    struct SocFile<'a> {
        rayleigh: &'a paroc_core::soc::SocReport,
        growth: &'a paroc_core::soc::GrowthReport,
    }
    let json = serde_json::to_string_pretty(&SocFile {
        rayleigh: &rayleigh,
        growth: &growth,
    })
    .expect("soc serialization");
    if std::fs::write(dir.join("soc.json"), json + "\n").is_err()
        || std::fs::write(dir.join("samples.csv"), samples_csv).is_err()
    {
        eprintln!("error: writing soc outputs");
        return EXIT_CHECK_FAILED;
    }
    ctx.say(&format!(
        "soc: min = {:.4e} (median {:.4e}, accepted {}/{}), growth kappa = {:.4e}",
        rayleigh.min_value,
        rayleigh.median_value,
        rayleigh.n_accepted,
        rayleigh.n_requested,
        growth.kappa
    ));
    if rayleigh.pass && growth.pass {
        EXIT_OK
    } else {
        if rayleigh.low_confidence {
            eprintln!("soc: low confidence ({} of {} samples accepted)", rayleigh.n_accepted, rayleigh.n_requested);
        }
        if !growth.pass {
            eprintln!(
                "soc: growth test failed (kappa = {:.3e}, feasible {}/{}{})",
                growth.kappa,
                growth.n_feasible,
                growth.n_tried,
                if growth.all_infeasible { ", radius too large" } else { "" }
            );
        }
        EXIT_CHECK_FAILED
    }
}

pub fn cmd_regularity(ctx: &Ctx, dir: &Path) -> i32 {
    let stored = match load_solution(dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let spec = match ctx.config.build_problem() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mesh = stored.mesh.clone();
    let op = match assemble_elliptic(&mesh, &spec.diffusion) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: assembly: {e}");
            return EXIT_USAGE;
        }
    };
    let v = &ctx.config.verification;
    let (sol, sets) = match solution_from_stored(&spec, &op, &stored, v.kkt_tol) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: regularity stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let report = match solution_regularity(
        &sol,
        &sets,
        &mesh,
        v.holder_pairs,
        ctx.seed(),
        v.parabolic_metric,
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: regularity stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let max_principle = match maximum_principle_check(&spec, &sol.y, &sol.u, &mesh) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: regularity stage: {e}");
            return EXIT_CHECK_FAILED;
        }
    };

    // Per-bin scatter for every estimated field.
    let mut bins_csv = String::from("field,distance,max_increment\n");
    let mut dump = |name: &str, est: &Option<paroc_core::regularity::HolderEstimate>| {
        if let Some(e) = est {
            for (d, m) in &e.bins {
                let _ = writeln!(bins_csv, "{name},{d},{m}");
            }
        }
    };
    dump("y", &report.y);
    dump("phi", &report.phi);
    dump("u", &report.u);
    for (region, est) in &report.e_regions {
        dump(&format!("e_{region}"), est);
    }
    for (region, est) in &report.ehat_regions {
        dump(&format!("ehat_{region}"), est);
    }

    #[derive(serde::Serialize)]
    struct RegularityFile<'a> {
        report: &'a paroc_core::regularity::RegularityReport,
        max_principle: &'a paroc_core::regularity::MaxPrincipleReport,
    }
    let json = serde_json::to_string_pretty(&RegularityFile {
        report: &report,
        max_principle: &max_principle,
    })
    .expect("regularity serialization");
    if std::fs::write(dir.join("regularity.json"), json + "\n").is_err()
        || std::fs::write(dir.join("bins.csv"), bins_csv).is_err()
    {
        eprintln!("error: writing regularity outputs");
        return EXIT_CHECK_FAILED;
    }

    let mut failed = false;
    let mut describe = |name: &str, est: &Option<paroc_core::regularity::HolderEstimate>| {
        match est {
            Some(e) => {
                ctx.say(&format!(
                    "regularity: {name}: alpha = {:.3} (+/- {:.3}{})",
                    e.alpha,
                    e.band,
                    if e.low_confidence { ", low confidence" } else { "" }
                ));
                if e.alpha < v.min_alpha {
                    failed = true;
                }
            }
            None => ctx.say(&format!(
                "regularity: {name}: constant or empty, exponent undefined (warning)"
            )),
        }
    };
    describe("y", &report.y);
    describe("phi", &report.phi);
    describe("u", &report.u);
    for (region, est) in &report.e_regions {
        describe(&format!("e[{region}]"), est);
    }
    for (region, est) in &report.ehat_regions {
        describe(&format!("ehat[{region}]"), est);
    }
    if !max_principle.ok {
        eprintln!("regularity: maximum principle violated (min y = {:.3e})", max_principle.min_y);
        failed = true;
    }
    if failed {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    }
}

struct SweepPoint {
    label: String,
    config: RunConfig,
}

pub fn cmd_sweep(ctx: &Ctx) -> i32 {
    let base_out = match ctx.out_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let sweep = match &ctx.config.sweep {
        Some(s) if !(s.nx.is_empty() && s.gamma.is_empty()) => s.clone(),
        _ => {
            eprintln!("error: sweep needs a [sweep] section with nx and/or gamma lists");
            return EXIT_USAGE;
        }
    };
    let nx_list = if sweep.nx.is_empty() {
        vec![ctx.config.mesh.nx]
    } else {
        sweep.nx.clone()
    };
    let gamma_list: Vec<Option<f64>> = if sweep.gamma.is_empty() {
        vec![None]
    } else {
        sweep.gamma.iter().map(|g| Some(*g)).collect()
    };

    let mut points = Vec::new();
    for &nx in &nx_list {
        for gamma in &gamma_list {
            let mut config = ctx.config.clone();
            config.mesh.nx = nx;
            if config.mesh.dim == 2 {
                config.mesh.ny = nx;
            }
            let mut label = format!("nx{nx}");
            if let Some(g) = gamma {
                config.problem.params.insert("gamma".to_string(), *g);
                label.push_str(&format!("_gamma{g}"));
            }
            points.push(SweepPoint { label, config });
        }
    }

    let results: Vec<Result<SweepRow, String>> = if ctx.jobs > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = points
                .iter()
                .map(|p| {
                    let out = base_out.join(&p.label);
                    let seed = ctx.seed();
                    scope.spawn(move || run_sweep_point(p, &out, seed))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep thread")).collect()
        })
    } else {
        points
            .iter()
            .map(|p| run_sweep_point(p, &base_out.join(&p.label), ctx.seed()))
            .collect()
    };

    let mut csv = String::from("label,nx,gamma,objective,certified,gamma_margin,alpha_y,alpha_phi,kappa,status\n");
    let mut any_failed = false;
    for (point, result) in points.iter().zip(&results) {
        match result {
            Ok(row) => {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},ok",
                    point.label,
                    row.nx,
                    row.gamma.map(|g| g.to_string()).unwrap_or_default(),
                    row.objective,
                    row.certified,
                    row.gamma_margin,
                    row.alpha_y.map(|a| a.to_string()).unwrap_or_default(),
                    row.alpha_phi.map(|a| a.to_string()).unwrap_or_default(),
                    row.kappa.map(|k| k.to_string()).unwrap_or_default(),
                );
                if !row.certified {
                    any_failed = true;
                }
            }
            Err(e) => {
                any_failed = true;
                let _ = writeln!(csv, "{},,,,,,,,,failed: {}", point.label, e.replace(',', ";"));
            }
        }
    }
    if std::fs::create_dir_all(&base_out).is_err()
        || std::fs::write(base_out.join("summary.csv"), csv).is_err()
    {
        eprintln!("error: writing sweep summary");
        return EXIT_CHECK_FAILED;
    }
    ctx.say(&format!(
        "sweep: {} points, summary at {}",
        points.len(),
        base_out.join("summary.csv").display()
    ));
    if any_failed {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    }
}

struct SweepRow {
    nx: usize,
    gamma: Option<f64>,
    objective: f64,
    certified: bool,
    gamma_margin: f64,
    alpha_y: Option<f64>,
    alpha_phi: Option<f64>,
    kappa: Option<f64>,
}

fn run_sweep_point(point: &SweepPoint, out: &Path, seed: u64) -> Result<SweepRow, String> {
    let config = &point.config;
    let spec = config.build_problem()?;
    let mesh = config.build_mesh()?;
    let op = assemble_elliptic(&mesh, &spec.diffusion).map_err(|e| e.to_string())?;
    let u0_value = config
        .optimizer
        .u_init
        .unwrap_or(0.5 * (spec.lower + spec.upper));
    let u0 = Field::constant(&mesh, u0_value);
    let params = config.optimizer.to_params();
    let sol = solve_augmented_lagrangian(&spec, &op, &u0, &params, &mesh)
        .map_err(|e| format!("solve: {e}"))?;
    save_solution(out, &sol, &mesh).map_err(|e| format!("persist: {e}"))?;

    let sets = classify_active_sets(&sol.u, &sol.y, &spec, &mesh, default_tol_act(&spec))
        .map_err(|e| e.to_string())?;
    let margins =
        check_separation(&spec, &sol.y, &sol.u, &mesh).map_err(|e| e.to_string())?;
    let v = &config.verification;
    let growth = growth_test(&spec, &op, &sol, v.growth_perturbations, v.growth_radius, seed, &mesh)
        .map_err(|e| format!("growth: {e}"))?;
    let regularity = solution_regularity(&sol, &sets, &mesh, v.holder_pairs, seed, v.parabolic_metric)
        .map_err(|e| format!("regularity: {e}"))?;

    Ok(SweepRow {
        nx: config.mesh.nx,
        gamma: config.problem.params.get("gamma").copied(),
        objective: sol.objective,
        certified: sol.certified,
        gamma_margin: margins.gamma,
        alpha_y: regularity.y.as_ref().map(|e| e.alpha),
        alpha_phi: regularity.phi.as_ref().map(|e| e.alpha),
        kappa: if growth.all_infeasible { None } else { Some(growth.kappa) },
    })
}
