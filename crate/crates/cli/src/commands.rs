//! Subcommand implementations and argument handling.
//!
//! Exit codes: 0 success, 1 validation/property failure, 2 solver
//! non-convergence, 3 I/O or parse errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use switchvi_core::bilateral::{self, BilateralConfig, Variant};
use switchvi_core::grid::{build_grid, BoundaryPolicy, Grid, GridSpec, DEFAULT_VALUE_CAP};
use switchvi_core::model::{self, PenaltyKind};
use switchvi_core::oracle::{build_tree, switching_game_value, GameConfig, TreeOptions};
use switchvi_core::schemes::{run_schedule, solve_penalized, PenalizedConfig};
use switchvi_core::SliceInit;

use crate::output::{self, GridEcho, MonotonicityEcho, MonotoneCheckEcho, OutputFile, RunManifest, RunReport, SolveReportEcho, SolverEcho, ValidationSummary};
use crate::problem::{load_problem, LoadedProblem, SolverSection};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const MAX_NODES_ENV: &str = "SWITCHVI_MAX_NODES";

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Doubly,
    Decreasing,
    Increasing,
    BilateralMin,
    BilateralMax,
    Oracle,
}

impl Scheme {
    fn parse(s: &str) -> Result<Scheme, String> {
        Ok(match s {
            "doubly" => Scheme::Doubly,
            "decreasing" => Scheme::Decreasing,
            "increasing" => Scheme::Increasing,
            "bilateral-min" => Scheme::BilateralMin,
            "bilateral-max" => Scheme::BilateralMax,
            "oracle" => Scheme::Oracle,
            other => {
                return Err(format!(
                    "unknown scheme '{other}' (expected doubly | decreasing | increasing | \
                     bilateral-min | bilateral-max | oracle)"
                ))
            }
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Scheme::Doubly => "doubly",
            Scheme::Decreasing => "decreasing",
            Scheme::Increasing => "increasing",
            Scheme::BilateralMin => "bilateral-min",
            Scheme::BilateralMax => "bilateral-max",
            Scheme::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub scheme: Option<String>,
    pub n: Option<f64>,
    pub m: Option<f64>,
    pub schedule: Option<String>,
    pub out: Option<PathBuf>,
    pub grid: Option<String>,
    pub tol: Option<f64>,
    pub theta: Option<f64>,
    pub max_inner_iters: Option<usize>,
    pub n_steps: Option<usize>,
    pub anchor: Option<Vec<f64>>,
    pub threads: usize,
    pub seed: u64,
    pub force: bool,
    pub level: Option<String>,
    pub tol_scale: f64,
}

impl Flags {
    pub fn new() -> Flags {
        Flags { threads: 1, seed: 0, tol_scale: 1.0, ..Default::default() }
    }
}

#[derive(Debug)]
pub struct ParsedCli {
    pub command: String,
    pub problem: PathBuf,
    pub flags: Flags,
    pub argv: Vec<String>,
}

pub fn parse_cli(argv: &[String]) -> Result<ParsedCli, String> {
    if argv.is_empty() {
        return Err(usage());
    }
    let command = argv[0].clone();
    if !matches!(command.as_str(), "validate" | "solve" | "verify") {
        return Err(format!("unknown subcommand '{command}'\n{}", usage()));
    }
    let mut problem = None;
    let mut flags = Flags::new();
    let mut it = argv[1..].iter().peekable();
    while let Some(arg) = it.next() {
        let mut take = |name: &str| -> Result<String, String> {
            it.next().map(|s| s.to_string()).ok_or_else(|| format!("flag {name} needs a value"))
        };
        match arg.as_str() {
            "--scheme" => flags.scheme = Some(take("--scheme")?),
            "--n" => flags.n = Some(take("--n")?.parse().map_err(|e| format!("--n: {e}"))?),
            "--m" => flags.m = Some(take("--m")?.parse().map_err(|e| format!("--m: {e}"))?),
            "--schedule" => flags.schedule = Some(take("--schedule")?),
            "--out" => flags.out = Some(PathBuf::from(take("--out")?)),
            "--grid" => flags.grid = Some(take("--grid")?),
            "--tol" => flags.tol = Some(take("--tol")?.parse().map_err(|e| format!("--tol: {e}"))?),
            "--theta" => flags.theta = Some(take("--theta")?.parse().map_err(|e| format!("--theta: {e}"))?),
            "--max-inner-iters" => {
                flags.max_inner_iters =
                    Some(take("--max-inner-iters")?.parse().map_err(|e| format!("--max-inner-iters: {e}"))?)
            }
            "--n-steps" => {
                flags.n_steps = Some(take("--n-steps")?.parse().map_err(|e| format!("--n-steps: {e}"))?)
            }
            "--x0" => {
                let raw = take("--x0")?;
                let xs: Result<Vec<f64>, _> = raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
                flags.anchor = Some(xs.map_err(|e| format!("--x0: {e}"))?);
            }
            "--threads" => {
                flags.threads = take("--threads")?.parse().map_err(|e| format!("--threads: {e}"))?;
                if flags.threads == 0 {
                    return Err("--threads must be at least 1".into());
                }
            }
            "--seed" => flags.seed = take("--seed")?.parse().map_err(|e| format!("--seed: {e}"))?,
            "--force" => flags.force = true,
            "--level" => flags.level = Some(take("--level")?),
            "--tol-scale" => {
                flags.tol_scale = take("--tol-scale")?.parse().map_err(|e| format!("--tol-scale: {e}"))?;
                if !(flags.tol_scale > 0.0) {
                    return Err("--tol-scale must be positive".into());
                }
            }
            other if other.starts_with("--") => return Err(format!("unknown flag '{other}'\n{}", usage())),
            other => {
                if problem.is_some() {
                    return Err(format!("unexpected positional argument '{other}'"));
                }
                problem = Some(PathBuf::from(other));
            }
        }
    }
    let problem = problem.ok_or_else(|| format!("missing problem file\n{}", usage()))?;
    Ok(ParsedCli { command, problem, flags, argv: argv.to_vec() })
}

pub fn usage() -> String {
    "usage:\n  \
     switchvi validate <problem.json> [--grid SPEC] [--seed N]\n  \
     switchvi solve <problem.json> --scheme {doubly|decreasing|increasing|bilateral-min|bilateral-max|oracle}\n          \
     [--n F] [--m F] [--schedule LIST] [--out PREFIX] [--grid SPEC] [--tol F] [--theta F]\n          \
     [--max-inner-iters N] [--n-steps N] [--x0 LIST] [--threads N] [--seed N] [--force]\n  \
     switchvi verify <problem.json> [--level {fast|full}] [--tol-scale F] [--grid SPEC] [--seed N]\n\n\
     --grid format: lo,hi,nodes[,lo,hi,nodes...];time_steps\n\
     env: SWITCHVI_MAX_NODES caps stored values (nodes x pairs x slices)"
        .to_string()
}

/// Grid override: `lo,hi,nodes[,...];time_steps`, boundary inherited.
fn parse_grid_flag(raw: &str, boundary: BoundaryPolicy) -> Result<GridSpec, String> {
    let (space, steps) = raw.split_once(';').ok_or("grid spec needs ';time_steps'")?;
    let nums: Vec<&str> = space.split(',').map(str::trim).collect();
    if nums.is_empty() || nums.len() % 3 != 0 {
        return Err("grid spec needs lo,hi,nodes per dimension".into());
    }
    let mut box_lo = Vec::new();
    let mut box_hi = Vec::new();
    let mut nodes = Vec::new();
    for triple in nums.chunks(3) {
        box_lo.push(triple[0].parse::<f64>().map_err(|e| e.to_string())?);
        box_hi.push(triple[1].parse::<f64>().map_err(|e| e.to_string())?);
        nodes.push(triple[2].parse::<usize>().map_err(|e| e.to_string())?);
    }
    let time_steps = steps.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok(GridSpec { box_lo, box_hi, nodes_per_dim: nodes, time_steps, boundary })
}

pub fn value_cap_from_env() -> usize {
    std::env::var(MAX_NODES_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(DEFAULT_VALUE_CAP)
}

/// Resolve the grid from the file section plus the --grid override.
pub fn resolve_grid(loaded: &LoadedProblem, flags: &Flags) -> Result<Grid, String> {
    let file_spec = loaded.grid_spec.clone();
    let boundary = file_spec.as_ref().map_or(BoundaryPolicy::Extrapolate, |s| s.boundary);
    let spec = match (&flags.grid, file_spec) {
        (Some(raw), _) => parse_grid_flag(raw, boundary)?,
        (None, Some(spec)) => spec,
        (None, None) => return Err("the problem file has no grid section; pass --grid".into()),
    };
    build_grid(&spec, &loaded.problem, value_cap_from_env()).map_err(|e| e.to_string())
}

fn resolve_penalized_config(solver: &SolverSection, flags: &Flags, kind: PenaltyKind) -> PenalizedConfig {
    let mut cfg = PenalizedConfig { kind, ..Default::default() };
    if let Some(v) = solver.theta {
        cfg.theta = v;
    }
    if let Some(v) = solver.fixed_point_tol {
        cfg.fixed_point_tol = v;
    }
    if let Some(v) = solver.max_inner_iters {
        cfg.max_inner_iters = v;
    }
    if let Some(v) = solver.damping {
        cfg.damping = v;
    }
    if let Some(v) = solver.exp_shift_lambda {
        cfg.exp_shift_lambda = v;
    }
    if let Some(v) = flags.theta {
        cfg.theta = v;
    }
    if let Some(v) = flags.max_inner_iters {
        cfg.max_inner_iters = v;
    }
    if let Some(v) = flags.tol {
        cfg.fixed_point_tol = v;
    }
    cfg.n = flags.n.unwrap_or(0.0);
    cfg.m = flags.m.unwrap_or(0.0);
    cfg
}

fn resolve_bilateral_config(solver: &SolverSection, flags: &Flags, variant: Variant) -> BilateralConfig {
    let mut cfg = BilateralConfig { variant, force: flags.force, ..Default::default() };
    if let Some(v) = solver.tol {
        cfg.tol = v;
    }
    if let Some(v) = solver.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = solver.theta {
        cfg.theta = v;
    }
    if let Some(v) = solver.damping {
        cfg.damping = v;
    }
    if let Some(v) = flags.tol {
        cfg.tol = v;
    }
    if let Some(v) = flags.theta {
        cfg.theta = v;
    }
    if let Some(v) = flags.max_inner_iters {
        cfg.max_iters = v;
    }
    cfg
}

fn print_validation(summary: &ValidationSummary) {
    println!(
        "validation: terminal(H3) {} | no-free-loop(H4) {} | cycles(lp1) {} | cycles(lp2) {} | costs>=0 {}",
        ok_str(summary.terminal_ok),
        ok_str(summary.no_free_loop_ok),
        ok_str(summary.cycle_lp1_ok),
        ok_str(summary.cycle_lp2_ok),
        ok_str(summary.cost_nonneg_ok),
    );
    for l in &summary.lipschitz {
        if l.warning {
            println!("warning: sampled Lipschitz estimate for {} is {:.3e}", l.target, l.estimate);
        }
    }
    for w in &summary.witnesses {
        println!("witness: {w}");
    }
}

fn ok_str(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "VIOLATED"
    }
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn cmd_validate(cli: &ParsedCli) -> i32 {
    let loaded = match load_problem(&cli.problem) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let grid = match resolve_grid(&loaded, &cli.flags) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let extra = seeded_extra_points(&grid, cli.flags.seed);
    let report = match model::validate_on_grid(&loaded.problem, &grid, &extra) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: expression evaluation failed during validation: {e}");
            return EXIT_IO;
        }
    };
    let summary = ValidationSummary::from_report(&report);
    print_validation(&summary);
    if report.all_ok() {
        EXIT_OK
    } else {
        EXIT_PROPERTY
    }
}

/// A few extra (t, x) probes jittered inside the box, deterministic in the
/// seed; supplements the grid-node sampling of the validators.
pub fn seeded_extra_points(grid: &Grid, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut state = seed ^ 0x9e3779b97f4a7c15;
    let mut next = move || {
        // xorshift64*
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        state = state.wrapping_mul(0x2545f4914f6cdd1d);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let spec = grid.spec();
    let k = grid.dim_k();
    (0..16)
        .map(|_| {
            let t = grid.horizon() * next();
            let x = (0..k).map(|c| spec.box_lo[c] + (spec.box_hi[c] - spec.box_lo[c]) * next()).collect();
            (t, x)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

struct SolveArtifacts {
    outputs: Vec<OutputFile>,
    solves: Vec<SolveReportEcho>,
    schedule_checks: Vec<MonotoneCheckEcho>,
    oracle_root: Option<Vec<f64>>,
    monotonicity: Option<MonotonicityEcho>,
    notes: Vec<String>,
}

pub fn cmd_solve(cli: &ParsedCli) -> i32 {
    let started = Instant::now();
    let loaded = match load_problem(&cli.problem) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let scheme = match cli.flags.scheme.as_deref().map(Scheme::parse) {
        Some(Ok(s)) => s,
        Some(Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
        None => {
            eprintln!("error: solve needs --scheme\n{}", usage());
            return EXIT_IO;
        }
    };
    let grid = match resolve_grid(&loaded, &cli.flags) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };

    // assumption validation gates every solve unless forced
    let extra = seeded_extra_points(&grid, cli.flags.seed);
    let validation = match model::validate_on_grid(&loaded.problem, &grid, &extra) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: expression evaluation failed during validation: {e}");
            return EXIT_IO;
        }
    };
    let summary = ValidationSummary::from_report(&validation);
    print_validation(&summary);
    if !validation.all_ok() && !cli.flags.force {
        eprintln!("error: assumptions failed ({}); pass --force to solve anyway", validation.failures().join(", "));
        return EXIT_PROPERTY;
    }

    let out_prefix = cli.flags.out.clone().unwrap_or_else(|| {
        let stem = cli.problem.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or("run".into());
        PathBuf::from(format!("{stem}.{}", scheme.name()))
    });

    let artifacts = match run_scheme(&loaded, &grid, &scheme, &cli.flags, &out_prefix) {
        Ok(a) => a,
        Err(RunError::NonConvergence(msg)) => {
            eprintln!("error: solver did not converge: {msg}");
            let report_path = out_prefix.with_extension("report.json");
            let report = RunReport {
                solves: Vec::new(),
                schedule_checks: Vec::new(),
                oracle_root: None,
                notes: vec![format!("non-convergence: {msg}")],
            };
            let _ = output::write_json(&report_path, &report);
            eprintln!("report: {}", report_path.display());
            return EXIT_NONCONVERGENCE;
        }
        Err(RunError::Other(msg)) => {
            eprintln!("error: {msg}");
            return EXIT_IO;
        }
    };

    let report_path = out_prefix.with_extension("report.json");
    let report = RunReport {
        solves: artifacts.solves.clone(),
        schedule_checks: artifacts.schedule_checks.clone(),
        oracle_root: artifacts.oracle_root.clone(),
        notes: artifacts.notes.clone(),
    };
    let mut outputs = artifacts.outputs;
    match output::write_json(&report_path, &report) {
        Ok(f) => outputs.push(f),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.argv.clone(),
        problem_file: cli.problem.display().to_string(),
        problem_fnv1a64: output::fnv1a64(&loaded.raw),
        grid: GridEcho::from_grid(&grid),
        solver: SolverEcho {
            scheme: scheme.name().to_string(),
            n: cli.flags.n,
            m: cli.flags.m,
            schedule: parse_schedule(&cli.flags, &scheme).ok().flatten(),
            theta: resolve_penalized_config(&loaded.solver, &cli.flags, PenaltyKind::Doubly).theta,
            fixed_point_tol: resolve_penalized_config(&loaded.solver, &cli.flags, PenaltyKind::Doubly)
                .fixed_point_tol,
            max_inner_iters: resolve_penalized_config(&loaded.solver, &cli.flags, PenaltyKind::Doubly)
                .max_inner_iters,
            damping: resolve_penalized_config(&loaded.solver, &cli.flags, PenaltyKind::Doubly).damping,
            exp_shift_lambda: resolve_penalized_config(&loaded.solver, &cli.flags, PenaltyKind::Doubly)
                .exp_shift_lambda,
            tol: resolve_bilateral_config(&loaded.solver, &cli.flags, Variant::MinFirst).tol,
            max_iters: resolve_bilateral_config(&loaded.solver, &cli.flags, Variant::MinFirst).max_iters,
            oracle_steps: cli.flags.n_steps,
            anchor: cli.flags.anchor.clone(),
            threads: cli.flags.threads,
            seed: cli.flags.seed,
            forced: cli.flags.force,
        },
        validation: Some(summary),
        monotonicity: artifacts.monotonicity,
        outputs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out_prefix.with_extension("manifest.json");
    if let Err(e) = output::write_json(&manifest_path, &manifest) {
        eprintln!("error: {e}");
        return EXIT_IO;
    }
    println!("manifest: {}", manifest_path.display());
    EXIT_OK
}

enum RunError {
    NonConvergence(String),
    Other(String),
}

/// Schedule entries are self-contained solves, so the family can run on a
/// thread pool; results are collected in schedule order and every solve is
/// deterministic, keeping the outputs bit-identical to a serial run.
fn solve_schedule_parallel(
    problem: &switchvi_core::ProblemSpec,
    grid: &Grid,
    cfg: &PenalizedConfig,
    entries: &[(f64, f64)],
    threads: usize,
) -> Result<switchvi_core::schemes::ScheduleOutcome, switchvi_core::schemes::SolveError> {
    let chunk_size = entries.len().div_ceil(threads.max(1));
    let mut solved = Vec::with_capacity(entries.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&(n, m)| solve_penalized(problem, grid, &PenalizedConfig { n, m, ..*cfg }))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            solved.extend(h.join().expect("schedule worker panicked"));
        }
    });
    let mut fields = Vec::with_capacity(entries.len());
    let mut reports = Vec::with_capacity(entries.len());
    for result in solved {
        let (field, report) = result?;
        fields.push(field);
        reports.push(report);
    }
    let checks =
        switchvi_core::schemes::schedule_checks(cfg.kind, entries, &fields, 10.0 * cfg.fixed_point_tol);
    Ok(switchvi_core::schemes::ScheduleOutcome { penalties: entries.to_vec(), fields, reports, checks })
}

/// `--schedule` parse: `a,b,c` for one-sided families (penalty values),
/// `n:m,n:m` pairs for the doubly penalized family.
fn parse_schedule(flags: &Flags, scheme: &Scheme) -> Result<Option<Vec<(f64, f64)>>, String> {
    let Some(raw) = &flags.schedule else { return Ok(None) };
    let mut out = Vec::new();
    for item in raw.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        if let Some((a, b)) = item.split_once(':') {
            let n: f64 = a.trim().parse().map_err(|e| format!("--schedule '{item}': {e}"))?;
            let m: f64 = b.trim().parse().map_err(|e| format!("--schedule '{item}': {e}"))?;
            out.push((n, m));
        } else {
            let v: f64 = item.parse().map_err(|e| format!("--schedule '{item}': {e}"))?;
            match scheme {
                Scheme::Decreasing => out.push((0.0, v)),
                Scheme::Increasing => out.push((v, 0.0)),
                Scheme::Doubly => out.push((v, v)),
                _ => return Err("--schedule only applies to penalized schemes".into()),
            }
        }
    }
    if out.is_empty() {
        return Err("--schedule is empty".into());
    }
    Ok(Some(out))
}

fn echo_solve_report(label: &str, report: &switchvi_core::SolveReport, seconds: f64) -> SolveReportEcho {
    SolveReportEcho {
        label: label.to_string(),
        inner_iterations_max: report.inner_iterations.iter().copied().max().unwrap_or(0),
        inner_iterations_total: report.inner_iterations.iter().sum(),
        final_defect_max: report.max_defects.iter().copied().fold(0.0, f64::max),
        warnings: report.warnings.clone(),
        wall_seconds: seconds,
    }
}

fn run_scheme(
    loaded: &LoadedProblem,
    grid: &Grid,
    scheme: &Scheme,
    flags: &Flags,
    out_prefix: &Path,
) -> Result<SolveArtifacts, RunError> {
    let problem = &loaded.problem;
    let modes = problem.modes();
    let mut outputs = Vec::new();
    let mut solves = Vec::new();
    let mut schedule_checks = Vec::new();
    let mut notes = Vec::new();
    let mut oracle_root = None;
    let mut monotonicity = None;

    let classify = |e: switchvi_core::schemes::SolveError| match e {
        switchvi_core::schemes::SolveError::Step(
            s @ switchvi_core::StepError::NonConvergence { .. },
        ) => RunError::NonConvergence(s.to_string()),
        other => RunError::Other(other.to_string()),
    };

    match scheme {
        Scheme::Doubly | Scheme::Decreasing | Scheme::Increasing => {
            let kind = match scheme {
                Scheme::Doubly => PenaltyKind::Doubly,
                Scheme::Decreasing => PenaltyKind::LowerOnly,
                Scheme::Increasing => PenaltyKind::UpperOnly,
                _ => unreachable!(),
            };
            let cfg = resolve_penalized_config(&loaded.solver, flags, kind);
            let schedule = parse_schedule(flags, scheme).map_err(RunError::Other)?;
            match schedule {
                None => {
                    let t0 = Instant::now();
                    let (field, report) = solve_penalized(problem, grid, &cfg).map_err(classify)?;
                    let csv = output::field_to_csv(&field, grid, modes);
                    let path = out_prefix.with_extension("csv");
                    outputs.push(output::write_text(&path, &csv).map_err(RunError::Other)?);
                    println!("field: {} (n={}, m={})", path.display(), cfg.n, cfg.m);
                    monotonicity = Some(MonotonicityEcho::from_report(&report.monotonicity));
                    solves.push(echo_solve_report(
                        &format!("{} n={} m={}", scheme.name(), cfg.n, cfg.m),
                        &report,
                        t0.elapsed().as_secs_f64(),
                    ));
                }
                Some(entries) => {
                    let t0 = Instant::now();
                    let outcome = if flags.threads > 1 {
                        solve_schedule_parallel(problem, grid, &cfg, &entries, flags.threads)
                            .map_err(classify)?
                    } else {
                        run_schedule(problem, grid, &cfg, &entries).map_err(classify)?
                    };
                    let seconds = t0.elapsed().as_secs_f64() / entries.len() as f64;
                    for (idx, (n, m)) in outcome.penalties.iter().enumerate() {
                        let csv = output::field_to_csv(&outcome.fields[idx], grid, modes);
                        let path = out_prefix.with_extension(format!("n{n}m{m}.csv"));
                        outputs.push(output::write_text(&path, &csv).map_err(RunError::Other)?);
                        println!("field: {} (n={n}, m={m})", path.display());
                        solves.push(echo_solve_report(
                            &format!("{} n={n} m={m}", scheme.name()),
                            &outcome.reports[idx],
                            seconds,
                        ));
                    }
                    monotonicity = outcome
                        .reports
                        .first()
                        .map(|r| MonotonicityEcho::from_report(&r.monotonicity));
                    if !outcome.checks.is_empty() {
                        println!("monotonicity diagnostics (expected family ordering):");
                        println!("  from (n,m)      to (n,m)        direction   worst violation  ok");
                    }
                    for c in &outcome.checks {
                        let dir = match c.direction {
                            switchvi_core::schemes::OrderDirection::Increasing => "increasing",
                            switchvi_core::schemes::OrderDirection::Decreasing => "decreasing",
                        };
                        println!(
                            "  ({:>5},{:>5})  ({:>5},{:>5})  {:<10}  {:>13.3e}  {}",
                            c.from.0, c.from.1, c.to.0, c.to.1, dir, c.worst_violation, c.ok
                        );
                        schedule_checks.push(MonotoneCheckEcho {
                            from: c.from,
                            to: c.to,
                            direction: dir.to_string(),
                            worst_violation: c.worst_violation,
                            tolerance: c.tolerance,
                            ok: c.ok,
                        });
                    }
                }
            }
        }
        Scheme::BilateralMin | Scheme::BilateralMax => {
            let variant = if matches!(scheme, Scheme::BilateralMin) { Variant::MinFirst } else { Variant::MaxFirst };
            // the gate already ran; don't re-validate inside the solver
            let cfg = BilateralConfig {
                force: true,
                init: SliceInit::NextSlice,
                ..resolve_bilateral_config(&loaded.solver, flags, variant)
            };
            let t0 = Instant::now();
            let (field, report) = bilateral::solve_bilateral(problem, grid, &cfg).map_err(|e| match e {
                bilateral::BilateralError::Step(
                    s @ switchvi_core::StepError::NonConvergence { .. },
                ) => RunError::NonConvergence(s.to_string()),
                other => RunError::Other(other.to_string()),
            })?;
            let csv = output::field_to_csv(&field, grid, modes);
            let path = out_prefix.with_extension("csv");
            outputs.push(output::write_text(&path, &csv).map_err(RunError::Other)?);
            println!("field: {}", path.display());
            let resid = bilateral::residual(&field, problem, grid, variant, cfg.theta)
                .map_err(|e| RunError::Other(e.to_string()))?;
            notes.push(format!("complementarity residual max {:.3e} at {:?}", resid.max_abs, resid.argmax));
            println!("complementarity residual max {:.3e}", resid.max_abs);
            monotonicity = Some(MonotonicityEcho::from_report(&report.monotonicity));
            solves.push(echo_solve_report(scheme.name(), &report, t0.elapsed().as_secs_f64()));
        }
        Scheme::Oracle => {
            let steps = flags.n_steps.unwrap_or_else(|| grid.time_steps().max(1));
            let anchor = flags.anchor.clone().unwrap_or_else(|| {
                (0..grid.dim_k())
                    .map(|c| 0.5 * (grid.spec().box_lo[c] + grid.spec().box_hi[c]))
                    .collect()
            });
            let tree = build_tree(problem, &anchor, steps, &TreeOptions::default())
                .map_err(|e| RunError::Other(e.to_string()))?;
            let game = switching_game_value(&tree, problem, &GameConfig::default())
                .map_err(|e| RunError::Other(e.to_string()))?;
            println!("oracle root values at x0 = {anchor:?} ({steps} steps):");
            for (pair, (i, j)) in modes.pairs().enumerate() {
                println!("  v[{i},{j}] = {:.12}", game.root[pair]);
            }
            let csv = output::oracle_to_csv(&game.root, &anchor, modes);
            let path = out_prefix.with_extension("csv");
            outputs.push(output::write_text(&path, &csv).map_err(RunError::Other)?);
            println!("values: {}", path.display());
            notes.push(format!("tree: {} nodes, max nodal sweeps {}", tree.total_nodes(), game.max_sweeps));
            oracle_root = Some(game.root);
        }
    }

    Ok(SolveArtifacts { outputs, solves, schedule_checks, oracle_root, monotonicity, notes })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(cli: &ParsedCli) -> i32 {
    let loaded = match load_problem(&cli.problem) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let level = match cli.flags.level.as_deref().unwrap_or("fast") {
        "fast" => verify::Level::Fast,
        "full" => verify::Level::Full,
        other => {
            eprintln!("error: unknown level '{other}' (expected fast or full)");
            return EXIT_IO;
        }
    };
    let grid = match resolve_grid(&loaded, &cli.flags) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let outcomes = match verify::run_suite(&loaded, &grid, level, cli.flags.tol_scale, cli.flags.seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let mut failed = 0;
    for o in &outcomes {
        let status = if let Some(reason) = &o.skipped {
            format!("SKIP ({reason})")
        } else if o.passed {
            "PASS".to_string()
        } else {
            failed += 1;
            "FAIL".to_string()
        };
        println!(
            "{status:<22} {:<28} measured {:>12.4e}  threshold {:>12.4e}  {}",
            o.name, o.measured, o.threshold, o.details
        );
    }
    let stem = cli.problem.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or("run".into());
    let path = cli
        .flags
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{stem}.verify")))
        .with_extension("verify.json");
    if let Err(e) = output::write_json(&path, &outcomes) {
        eprintln!("error: {e}");
        return EXIT_IO;
    }
    println!("report: {}", path.display());
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_PROPERTY
    }
}
