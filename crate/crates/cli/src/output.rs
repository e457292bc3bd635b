//! Output files: value-field CSV, run manifest and report JSON.
//!
//! CSV column order is fixed (`t, x1..xk, i, j, value`) with one row per
//! `(slice, node, pair)`; floats are written with 17 significant digits so a
//! re-read reproduces the in-memory values bit-exactly. Node order is the
//! grid's row-major order, which together with the fixed column order keeps
//! downstream plotting stable.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use switchvi_core::grid::{Grid, MonotonicityReport, ValueField};
use switchvi_core::model::{ModeSpace, ValidationReport};

/// 17-significant-digit decimal form; round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// FNV-1a 64-bit fingerprint, hex-encoded. Deterministic across platforms;
/// used to certify bit-identical reruns, not for security.
pub fn fnv1a64(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Render a full field history as CSV.
pub fn field_to_csv(field: &ValueField, grid: &Grid, modes: ModeSpace) -> String {
    let k = grid.dim_k();
    let mut out = String::new();
    out.push('t');
    for c in 1..=k {
        let _ = write!(out, ",x{c}");
    }
    out.push_str(",i,j,value\n");
    for s in 0..=field.time_steps() {
        let t = grid.time_of_slice(s);
        for node in 0..grid.n_nodes() {
            let x = grid.coord(node);
            for (pair, (i, j)) in modes.pairs().enumerate() {
                let _ = write!(out, "{}", fmt_f64(t));
                for c in 0..k {
                    let _ = write!(out, ",{}", fmt_f64(x[c]));
                }
                let _ = writeln!(out, ",{i},{j},{}", fmt_f64(field.at(s, pair, node)));
            }
        }
    }
    out
}

/// Oracle root values as CSV in the same column convention (`t = 0`,
/// `x = anchor`).
pub fn oracle_to_csv(root: &[f64], x0: &[f64], modes: ModeSpace) -> String {
    let mut out = String::new();
    out.push('t');
    for c in 1..=x0.len() {
        let _ = write!(out, ",x{c}");
    }
    out.push_str(",i,j,value\n");
    for (pair, (i, j)) in modes.pairs().enumerate() {
        let _ = write!(out, "{}", fmt_f64(0.0));
        for &xc in x0 {
            let _ = write!(out, ",{}", fmt_f64(xc));
        }
        let _ = writeln!(out, ",{i},{j},{}", fmt_f64(root[pair]));
    }
    out
}

/// Parse a value-field CSV back into `(header, rows)`; used by the
/// round-trip tests and available to downstream tooling.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().ok_or("empty csv")?.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 2)))
            .collect::<Result<_, _>>()?;
        if row.len() != header.len() {
            return Err(format!("line {}: {} fields, expected {}", lineno + 2, row.len(), header.len()));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// Manifest / report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GridEcho {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub nodes_per_dim: Vec<usize>,
    pub time_steps: usize,
    pub boundary: String,
}

impl GridEcho {
    pub fn from_grid(grid: &Grid) -> GridEcho {
        GridEcho {
            box_lo: grid.spec().box_lo.clone(),
            box_hi: grid.spec().box_hi.clone(),
            nodes_per_dim: grid.spec().nodes_per_dim.clone(),
            time_steps: grid.spec().time_steps,
            boundary: match grid.boundary() {
                switchvi_core::BoundaryPolicy::Extrapolate => "extrapolate".into(),
                switchvi_core::BoundaryPolicy::Clamp => "clamp".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverEcho {
    pub scheme: String,
    pub n: Option<f64>,
    pub m: Option<f64>,
    pub schedule: Option<Vec<(f64, f64)>>,
    pub theta: f64,
    pub fixed_point_tol: f64,
    pub max_inner_iters: usize,
    pub damping: f64,
    pub exp_shift_lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub oracle_steps: Option<usize>,
    pub anchor: Option<Vec<f64>>,
    pub threads: usize,
    pub seed: u64,
    pub forced: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub terminal_ok: bool,
    pub terminal_worst_violation: f64,
    pub no_free_loop_ok: bool,
    pub cycle_lp1_ok: bool,
    pub cycle_lp2_ok: bool,
    pub cost_nonneg_ok: bool,
    pub lipschitz: Vec<LipschitzEcho>,
    pub witnesses: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEcho {
    pub target: String,
    pub estimate: f64,
    pub warning: bool,
}

impl ValidationSummary {
    pub fn from_report(report: &ValidationReport) -> ValidationSummary {
        let mut witnesses = Vec::new();
        if let Some(w) = &report.terminal.witness {
            witnesses.push(format!(
                "terminal: pair ({},{}) at x={:?}: lower {} <= h {} <= upper {} violated",
                w.pair.0, w.pair.1, w.x, w.lower, w.value, w.upper
            ));
        }
        if let Some(w) = &report.no_free_loop.witness {
            witnesses.push(format!(
                "free loop {:?} at (t={}, x={:?}): signed cost sum {}",
                w.pairs, w.t, w.x, w.sum
            ));
        }
        if let Some(w) = &report.cycle_lp1.witness {
            witnesses.push(format!("player-1 cycle {:?} has cost sum {} <= 0", w.modes, w.sum));
        }
        if let Some(w) = &report.cycle_lp2.witness {
            witnesses.push(format!("player-2 cycle {:?} has cost sum {} <= 0", w.modes, w.sum));
        }
        if let Some(w) = &report.cost_nonneg.witness {
            witnesses.push(format!(
                "{} entry {:?} is negative ({}) at (t={}, x={:?})",
                w.which, w.entry, w.value, w.t, w.x
            ));
        }
        ValidationSummary {
            terminal_ok: report.terminal.ok,
            terminal_worst_violation: report.terminal.worst_violation,
            no_free_loop_ok: report.no_free_loop.ok,
            cycle_lp1_ok: report.cycle_lp1.ok,
            cycle_lp2_ok: report.cycle_lp2.ok,
            cost_nonneg_ok: report.cost_nonneg.ok,
            lipschitz: report
                .lipschitz
                .iter()
                .map(|l| LipschitzEcho {
                    target: l.target.to_string(),
                    estimate: l.estimate,
                    warning: l.warning,
                })
                .collect(),
            witnesses,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityEcho {
    pub explicit_cfl: f64,
    pub explicit_cfl_ok: bool,
    pub worst_cross_margin: f64,
    pub cross_warning: bool,
}

impl MonotonicityEcho {
    pub fn from_report(r: &MonotonicityReport) -> MonotonicityEcho {
        MonotonicityEcho {
            explicit_cfl: r.explicit_cfl,
            explicit_cfl_ok: r.explicit_cfl_ok,
            worst_cross_margin: r.worst_cross_margin,
            cross_warning: r.cross_warning,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub fnv1a64: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub problem_file: String,
    pub problem_fnv1a64: String,
    pub grid: GridEcho,
    pub solver: SolverEcho,
    pub validation: Option<ValidationSummary>,
    pub monotonicity: Option<MonotonicityEcho>,
    pub outputs: Vec<OutputFile>,
    pub wall_seconds: f64,
}

/// Per-solve diagnostics written next to the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReportEcho {
    pub label: String,
    pub inner_iterations_max: usize,
    pub inner_iterations_total: usize,
    pub final_defect_max: f64,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotoneCheckEcho {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub direction: String,
    pub worst_violation: f64,
    pub tolerance: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub solves: Vec<SolveReportEcho>,
    pub schedule_checks: Vec<MonotoneCheckEcho>,
    pub oracle_root: Option<Vec<f64>>,
    pub notes: Vec<String>,
}

pub fn write_text(path: &Path, text: &str) -> Result<OutputFile, String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(OutputFile {
        path: path.display().to_string(),
        fnv1a64: fnv1a64(text.as_bytes()),
        bytes: text.len(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<OutputFile, String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_formatting_round_trips() {
        for v in [0.0, 1.0, -1.5, 0.1, 1.0 / 3.0, 2.0_f64.powi(-40), 1e300, -7.123456789012345e-12] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), "cbf29ce484222325");
        assert_eq!(fnv1a64(b"a"), "af63dc4c8601ec8c");
        assert_eq!(fnv1a64(b"hello"), "a430d84680aabd0b");
    }

    #[test]
    fn csv_parses_its_own_output() {
        let text = "t,x1,i,j,value\n0e0,5e-1,1,1,1.2345678901234567e0\n";
        let (header, rows) = parse_csv(text).unwrap();
        assert_eq!(header, vec!["t", "x1", "i", "j", "value"]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][4], 1.2345678901234567);
    }
}
