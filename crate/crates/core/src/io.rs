//! Field and solution persistence.
//!
//! Field files are CSV: a header row naming the mesh metadata, one row of
//! values for it, then one row of node values per time level. Floats use
//! Rust's shortest round-trip formatting, so saving and loading is exact
//! and identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::mesh::{build_mesh, Mesh};
use crate::optimize::{OuterRecord, Solution};

pub const FIELD_HEADER: &str = "dim,nx,ny,nt,lx,ly,t_final";

/// Serialize a field with enough mesh metadata to rebuild the mesh.
pub fn field_to_csv(field: &Field, mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str(FIELD_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{}",
        mesh.dim, mesh.nx, mesh.ny, mesh.nt, mesh.lx, mesh.ly, mesh.total_time
    );
    for level in 0..field.n_levels() {
        let row: Vec<String> = field.level(level).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parse a field file; returns the field and the mesh rebuilt from the
/// header.
pub fn field_from_csv(text: &str, path_for_errors: &str) -> Result<(Field, Mesh)> {
    let malformed = |message: &str| CoreError::MalformedFieldFile {
        path: path_for_errors.to_string(),
        message: message.to_string(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file"))?;
    if header.trim() != FIELD_HEADER {
        return Err(malformed("unexpected header row"));
    }
    let meta = lines.next().ok_or_else(|| malformed("missing metadata row"))?;
    let parts: Vec<&str> = meta.split(',').collect();
    if parts.len() != 7 {
        return Err(malformed("metadata row needs 7 entries"));
    }
    let parse_usize = |s: &str, what: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| malformed(&format!("bad {what}: {s}")))
    };
    let parse_f64 = |s: &str, what: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| malformed(&format!("bad {what}: {s}")))
    };
    let dim = parse_usize(parts[0], "dim")?;
    let nx = parse_usize(parts[1], "nx")?;
    let ny = parse_usize(parts[2], "ny")?;
    let nt = parse_usize(parts[3], "nt")?;
    let lx = parse_f64(parts[4], "lx")?;
    let ly = parse_f64(parts[5], "ly")?;
    let t_final = parse_f64(parts[6], "t_final")?;
    let mesh = build_mesh(dim, lx, ly, nx, ny, t_final, nt)?;

    let mut data = Vec::with_capacity(mesh.n_nodes() * mesh.n_levels());
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        for cell in line.split(',') {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| malformed(&format!("bad value: {cell}")))?;
            data.push(v);
        }
    }
    if rows != mesh.n_levels() {
        return Err(malformed(&format!(
            "expected {} data rows, found {rows}",
            mesh.n_levels()
        )));
    }
    let field = Field::from_raw(mesh.n_nodes(), mesh.n_levels(), data)
        .map_err(|_| malformed("row width does not match the node count"))?;
    Ok((field, mesh))
}

pub fn write_field(path: &Path, field: &Field, mesh: &Mesh) -> Result<()> {
    fs::write(path, field_to_csv(field, mesh))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(Field, Mesh)> {
    let text = fs::read_to_string(path)?;
    field_from_csv(&text, &path.display().to_string())
}

/// File names of a persisted solution directory.
pub const SOLUTION_FIELDS: [&str; 5] = ["u.csv", "y.csv", "phi.csv", "e.csv", "e_hat.csv"];

pub fn history_to_csv(history: &[OuterRecord]) -> String {
    let mut out = String::from("outer,inner_iters,objective,feasibility,stationarity,penalty\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.outer, h.inner_iters, h.objective, h.feasibility, h.stationarity, h.penalty
        );
    }
    out
}

/// Persist a solution: the five fields, `report.json` and `history.csv`.
pub fn save_solution(dir: &Path, sol: &Solution, mesh: &Mesh) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, field) in SOLUTION_FIELDS
        .iter()
        .zip([&sol.u, &sol.y, &sol.phi, &sol.e, &sol.e_hat])
    {
        write_field(&dir.join(name), field, mesh)?;
    }
    #[derive(serde::Serialize)]
    struct ReportFile<'a> {
        objective: f64,
        certified: bool,
        report: &'a crate::kkt::KktReport,
    }
    let report = serde_json::to_string_pretty(&ReportFile {
        objective: sol.objective,
        certified: sol.certified,
        report: &sol.report,
    })?;
    fs::write(dir.join("report.json"), report + "\n")?;
    fs::write(dir.join("history.csv"), history_to_csv(&sol.history))?;
    Ok(())
}

/// Fields of a stored solution plus the mesh from the headers.
pub struct StoredSolution {
    pub u: Field,
    pub y: Field,
    pub phi: Field,
    pub e: Field,
    pub e_hat: Field,
    pub mesh: Mesh,
}

/// Load a solution directory; missing files are reported together.
pub fn load_solution(dir: &Path) -> Result<StoredSolution> {
    let missing: Vec<&str> = SOLUTION_FIELDS
        .iter()
        .filter(|name| !dir.join(name).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(CoreError::MalformedFieldFile {
            path: dir.display().to_string(),
            message: format!("missing files: {}", missing.join(", ")),
        });
    }
    let (u, mesh) = read_field(&dir.join("u.csv"))?;
    let (y, _) = read_field(&dir.join("y.csv"))?;
    let (phi, _) = read_field(&dir.join("phi.csv"))?;
    let (e, _) = read_field(&dir.join("e.csv"))?;
    let (e_hat, _) = read_field(&dir.join("e_hat.csv"))?;
    for (f, name) in [(&y, "y"), (&phi, "phi"), (&e, "e"), (&e_hat, "e_hat")] {
        f.require_match(&mesh, "stored field").map_err(|_| {
            CoreError::MalformedFieldFile {
                path: dir.display().to_string(),
                message: format!("{name}.csv does not match u.csv dimensions"),
            }
        })?;
    }
    Ok(StoredSolution {
        u,
        y,
        phi,
        e,
        e_hat,
        mesh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    #[test]
    fn field_round_trip_is_exact() {
        let mesh = build_mesh(2, 1.0, 2.0, 3, 4, 0.7, 5).unwrap();
        let f = Field::from_fn(&mesh, |x, y, t| (x * 13.7 + y * 0.3 - t).sin() / 3.0);
        let text = field_to_csv(&f, &mesh);
        let (g, mesh2) = field_from_csv(&text, "test").unwrap();
        assert_eq!(f, g);
        assert_eq!(mesh2.nx, mesh.nx);
        assert_eq!(mesh2.dt, mesh.dt);
        // Serialization is deterministic.
        assert_eq!(text, field_to_csv(&g, &mesh2));
    }

    #[test]
    fn malformed_inputs_are_reported() {
        assert!(matches!(
            field_from_csv("", "t"),
            Err(CoreError::MalformedFieldFile { .. })
        ));
        assert!(matches!(
            field_from_csv("wrong\n1,2\n", "t"),
            Err(CoreError::MalformedFieldFile { .. })
        ));
        let mesh = build_mesh(1, 1.0, 0.0, 3, 0, 1.0, 2).unwrap();
        let f = Field::zeros(&mesh);
        let text = field_to_csv(&f, &mesh);
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            field_from_csv(&truncated, "t"),
            Err(CoreError::MalformedFieldFile { .. })
        ));
    }
}
