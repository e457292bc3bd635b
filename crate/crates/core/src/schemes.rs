//! Backward solvers for the penalized approximation families.
//!
//! Three families approximate the bilateral system:
//!
//! * `Doubly` — no hard reflection; both penalty terms
//!   `+ n (y - L)^-  - m (y - U)^+` in the generator. The family is
//!   non-decreasing in `n` and non-increasing in `m`, nodewise.
//! * `LowerOnly` — hard reflection on the interconnected lower obstacle
//!   (projected sweeps) with the upper penalty `- m (y - U)^+` kept. This is
//!   the decreasing family: as `m` grows it decreases to the min-first
//!   bilateral solution.
//! * `UpperOnly` — hard reflection on the upper obstacle with `+ n (y - L)^-`
//!   kept; the increasing family.
//!
//! [`run_schedule`] solves a list of `(n, m)` pairs and reports the largest
//! nodewise violation of the expected monotone ordering between consecutive
//! comparable entries (one index fixed, the other increased); the expected
//! bound is `10 x fixed_point_tol`, since the continuous orderings are exact
//! and the discrete ones hold up to the accumulated inner-iteration defect.
//!
//! The `exp_shift_lambda` option solves in the variables `e^{lambda t} v`
//! (the change of variables used to reduce the comparison argument to the
//! monotone case); it is implemented as an exact per-step reparametrization,
//! so its output matches the unshifted run to solver tolerance.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::grid::{self, Grid, MonotonicityReport, ValueField};
use crate::model::{PenaltyKind, ProblemSpec};
use crate::num;
use crate::stepper::{self, BackwardConfig, Projection, SliceInit, SliceParams, StepError, Workspace};

pub use crate::stepper::SliceInit as PenalizedInit;

/// Configuration of a penalized solve.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedConfig {
    pub kind: PenaltyKind,
    /// Lower penalty (ignored by `LowerOnly`).
    pub n: f64,
    /// Upper penalty (ignored by `UpperOnly`).
    pub m: f64,
    /// Time implicitness in `[0,1]`; 1 = fully implicit.
    pub theta: f64,
    pub fixed_point_tol: f64,
    pub max_inner_iters: usize,
    /// Gauss-Seidel damping in `(0,1]`.
    pub damping: f64,
    /// Exponent of the `e^{lambda t}` change of variables; 0 disables it.
    pub exp_shift_lambda: f64,
}

impl Default for PenalizedConfig {
    fn default() -> Self {
        PenalizedConfig {
            kind: PenaltyKind::Doubly,
            n: 0.0,
            m: 0.0,
            theta: 1.0,
            fixed_point_tol: 1e-10,
            max_inner_iters: 500,
            damping: 1.0,
            exp_shift_lambda: 0.0,
        }
    }
}

impl PenalizedConfig {
    pub fn with_penalties(kind: PenaltyKind, n: f64, m: f64) -> Self {
        PenalizedConfig { kind, n, m, ..Default::default() }
    }

    /// Check the invariants; returns non-fatal warnings.
    pub fn validate(&self, grid: &Grid) -> Result<Vec<String>, SolveError> {
        if !(self.fixed_point_tol > 0.0) {
            return Err(SolveError::Config("fixed_point_tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolveError::Config("damping must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(SolveError::Config("theta must lie in [0, 1]"));
        }
        if self.n < 0.0 || self.m < 0.0 {
            return Err(SolveError::Config("penalties must be non-negative"));
        }
        if self.exp_shift_lambda < 0.0 {
            return Err(SolveError::Config("exp_shift_lambda must be non-negative"));
        }
        let mut warnings = Vec::new();
        let pen = self.n.max(self.m);
        if self.theta < 1.0 && (1.0 - self.theta) * grid.dt() * pen > 1.0 {
            warnings.push(format!(
                "theta = {} with penalties up to {pen} puts the explicit part outside its \
                 stability region; theta = 1 is required when penalties are large",
                self.theta
            ));
        }
        Ok(warnings)
    }

    fn projection(&self) -> Projection {
        match self.kind {
            PenaltyKind::Doubly => Projection::None,
            PenaltyKind::LowerOnly => Projection::Lower,
            PenaltyKind::UpperOnly => Projection::Upper,
        }
    }

    fn effective_penalties(&self) -> (f64, f64) {
        match self.kind {
            PenaltyKind::Doubly => (self.n, self.m),
            PenaltyKind::LowerOnly => (0.0, self.m),
            PenaltyKind::UpperOnly => (self.n, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveError {
    Config(&'static str),
    Step(StepError),
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::Config(msg) => write!(f, "invalid solver configuration: {msg}"),
            SolveError::Step(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SolveError {}

impl From<StepError> for SolveError {
    fn from(e: StepError) -> Self {
        SolveError::Step(e)
    }
}

/// Outcome diagnostics of one backward solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Gauss-Seidel sweeps used per slice, slice 0 first.
    pub inner_iterations: Vec<usize>,
    /// Final sweep defect per slice (max-norm of the last update).
    pub max_defects: Vec<f64>,
    pub monotonicity: MonotonicityReport,
    pub warnings: Vec<String>,
    /// Filled by callers that can measure time; the core solver leaves it
    /// empty.
    pub wall_seconds: Option<f64>,
}

/// One backward step: from the slice at `t + dt` to the slice at `t`.
///
/// `next_slice` is pair-major (`lambda * n_nodes`) in physical units; so is
/// the returned slice.
pub fn step_backward(
    next_slice: &[f64],
    t: f64,
    cfg: &PenalizedConfig,
    problem: &ProblemSpec,
    grid: &Grid,
) -> Result<(Vec<f64>, StepStats), SolveError> {
    cfg.validate(grid)?;
    let (pen_n, pen_m) = cfg.effective_penalties();
    let dt = grid.dt();
    let shift = cfg.exp_shift_lambda;
    let value_scale = num::exp(shift * t);
    let next_scale = num::exp(shift * (t + dt));

    let mut ws = Workspace::new(problem, grid);
    let params = SliceParams {
        theta: cfg.theta,
        dt,
        pen_n,
        pen_m,
        projection: cfg.projection(),
        damping: cfg.damping,
        tol: cfg.fixed_point_tol,
        max_iters: cfg.max_inner_iters,
        value_scale,
        next_decay: num::exp(-shift * dt),
    };
    let next: Vec<f64> = next_slice.iter().map(|v| v * next_scale).collect();
    let mut slice: Vec<f64> = next.iter().map(|v| v * params.next_decay).collect();
    let stats = stepper::solve_slice(problem, grid, &mut ws, &params, t, t + dt, &next, &mut slice)?;
    if shift != 0.0 {
        let unscale = 1.0 / value_scale;
        slice.iter_mut().for_each(|v| *v *= unscale);
    }
    Ok((slice, StepStats { iterations: stats.iterations, final_defect: stats.final_defect }))
}

/// Per-slice convergence statistics of [`step_backward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iterations: usize,
    pub final_defect: f64,
}

/// Full backward solve of one penalized family member.
///
/// The terminal slice is set to `h` exactly; each earlier slice is produced
/// by the theta-scheme sweeps. With `exp_shift_lambda > 0` the solve runs in
/// transformed variables and the output is untransformed.
pub fn solve_penalized(
    problem: &ProblemSpec,
    grid: &Grid,
    cfg: &PenalizedConfig,
) -> Result<(ValueField, SolveReport), SolveError> {
    let warnings = cfg.validate(grid)?;
    let (pen_n, pen_m) = cfg.effective_penalties();
    let outcome = stepper::backward_solve(
        problem,
        grid,
        &BackwardConfig {
            theta: cfg.theta,
            pen_n,
            pen_m,
            projection: cfg.projection(),
            damping: cfg.damping,
            tol: cfg.fixed_point_tol,
            max_iters: cfg.max_inner_iters,
            lambda_shift: cfg.exp_shift_lambda,
            init: SliceInit::NextSlice,
        },
    )?;
    let monotonicity = grid::monotonicity_report(problem, grid, cfg.theta).map_err(StepError::Eval)?;
    Ok((
        outcome.field,
        SolveReport {
            inner_iterations: outcome.iterations,
            max_defects: outcome.defects,
            monotonicity,
            warnings,
            wall_seconds: None,
        },
    ))
}

// ---------------------------------------------------------------------------
// Penalty schedules
// ---------------------------------------------------------------------------

/// Expected ordering between two schedule entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderDirection {
    /// Later entry should dominate (nodewise >=) the earlier one.
    Increasing,
    /// Later entry should be dominated.
    Decreasing,
}

/// Measured monotonicity between two consecutive comparable schedule entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCheck {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub direction: OrderDirection,
    /// Largest nodewise violation of the expected ordering (0 if fully
    /// ordered).
    pub worst_violation: f64,
    /// `(slice, pair, node)` of the worst violation.
    pub at: (usize, usize, usize),
    pub tolerance: f64,
    pub ok: bool,
}

/// Fields of every schedule entry plus the monotonicity diagnostics.
#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub penalties: Vec<(f64, f64)>,
    pub fields: Vec<ValueField>,
    pub reports: Vec<SolveReport>,
    pub checks: Vec<MonotoneCheck>,
}

/// Whether two entries are comparable for the configured family, and in
/// which direction the second should move.
fn comparable(kind: PenaltyKind, a: (f64, f64), b: (f64, f64)) -> Option<OrderDirection> {
    match kind {
        PenaltyKind::Doubly => {
            if a.0 == b.0 && b.1 > a.1 {
                Some(OrderDirection::Decreasing)
            } else if a.1 == b.1 && b.0 > a.0 {
                Some(OrderDirection::Increasing)
            } else if a.1 == b.1 && b.0 < a.0 {
                Some(OrderDirection::Decreasing)
            } else if a.0 == b.0 && b.1 < a.1 {
                Some(OrderDirection::Increasing)
            } else {
                None
            }
        }
        // the one-sided families are indexed by a single penalty
        PenaltyKind::LowerOnly => {
            if b.1 > a.1 {
                Some(OrderDirection::Decreasing)
            } else if b.1 < a.1 {
                Some(OrderDirection::Increasing)
            } else {
                None
            }
        }
        PenaltyKind::UpperOnly => {
            if b.0 > a.0 {
                Some(OrderDirection::Increasing)
            } else if b.0 < a.0 {
                Some(OrderDirection::Decreasing)
            } else {
                None
            }
        }
    }
}

/// Monotonicity diagnostics between consecutive comparable entries of an
/// already-solved schedule.
pub fn schedule_checks(
    kind: PenaltyKind,
    penalties: &[(f64, f64)],
    fields: &[ValueField],
    tolerance: f64,
) -> Vec<MonotoneCheck> {
    let mut checks = Vec::new();
    for w in 0..penalties.len().saturating_sub(1) {
        let (a, b) = (penalties[w], penalties[w + 1]);
        if let Some(direction) = comparable(kind, a, b) {
            let (worst, at) = match direction {
                OrderDirection::Increasing => fields[w].max_excess_over(&fields[w + 1]),
                OrderDirection::Decreasing => fields[w + 1].max_excess_over(&fields[w]),
            };
            let worst = worst.max(0.0);
            checks.push(MonotoneCheck {
                from: a,
                to: b,
                direction,
                worst_violation: worst,
                at,
                tolerance,
                ok: worst <= tolerance,
            });
        }
    }
    checks
}

/// Solve every `(n, m)` entry of the schedule and check the family's
/// monotonicity between consecutive comparable entries.
pub fn run_schedule(
    problem: &ProblemSpec,
    grid: &Grid,
    base_cfg: &PenalizedConfig,
    schedule: &[(f64, f64)],
) -> Result<ScheduleOutcome, SolveError> {
    if schedule.is_empty() {
        return Err(SolveError::Config("schedule must be non-empty"));
    }
    let mut fields = Vec::with_capacity(schedule.len());
    let mut reports = Vec::with_capacity(schedule.len());
    for &(n, m) in schedule {
        let cfg = PenalizedConfig { n, m, ..*base_cfg };
        let (field, report) = solve_penalized(problem, grid, &cfg)?;
        fields.push(field);
        reports.push(report);
    }
    let checks = schedule_checks(base_cfg.kind, schedule, &fields, 10.0 * base_cfg.fixed_point_tol);
    Ok(ScheduleOutcome { penalties: schedule.to_vec(), fields, reports, checks })
}

/// Outcome of a doubling run to stagnation.
#[derive(Debug, Clone)]
pub struct StagnationOutcome {
    pub field: ValueField,
    /// Penalty used at each round.
    pub penalties: Vec<f64>,
    /// Max-norm change between successive rounds (one fewer than rounds).
    pub changes: Vec<f64>,
    pub stagnated: bool,
}

/// Run the configured family with doubling penalties until the successive
/// max-norm change drops below `stagnation_tol` (the convergence of the
/// family has no known rate; stagnation is the solver convention).
pub fn run_to_stagnation(
    problem: &ProblemSpec,
    grid: &Grid,
    base_cfg: &PenalizedConfig,
    start: f64,
    stagnation_tol: f64,
    max_rounds: usize,
) -> Result<StagnationOutcome, SolveError> {
    if !(start > 0.0) || !(stagnation_tol > 0.0) || max_rounds == 0 {
        return Err(SolveError::Config("stagnation run needs positive start, tolerance and rounds"));
    }
    let mut penalty = start;
    let mut penalties = Vec::new();
    let mut changes = Vec::new();
    let mut prev: Option<ValueField> = None;
    let mut stagnated = false;
    for _ in 0..max_rounds {
        let cfg = match base_cfg.kind {
            PenaltyKind::Doubly => PenalizedConfig { n: penalty, m: penalty, ..*base_cfg },
            PenaltyKind::LowerOnly => PenalizedConfig { m: penalty, ..*base_cfg },
            PenaltyKind::UpperOnly => PenalizedConfig { n: penalty, ..*base_cfg },
        };
        let (field, _) = solve_penalized(problem, grid, &cfg)?;
        penalties.push(penalty);
        if let Some(p) = prev.take() {
            let change = field.max_abs_diff(&p);
            changes.push(change);
            if change < stagnation_tol {
                return Ok(StagnationOutcome { field, penalties, changes, stagnated: true });
            }
        }
        prev = Some(field);
        penalty *= 2.0;
    }
    let field = prev.expect("at least one round ran");
    if let Some(last) = changes.last() {
        stagnated = *last < stagnation_tol;
    }
    Ok(StagnationOutcome { field, penalties, changes, stagnated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use crate::grid::{build_grid, BoundaryPolicy, GridSpec, DEFAULT_VALUE_CAP};
    use crate::model::{ModeSpace, ProblemParts};

    fn problem_2x2(f: [&str; 4], g_lower: [&str; 2], g_upper: [&str; 2], h: [&str; 4], sigma: &str) -> ProblemSpec {
        ProblemSpec::new(ProblemParts {
            modes: ModeSpace::new(2, 2).unwrap(),
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: alloc::vec![parse("0").unwrap()],
            vol: alloc::vec![alloc::vec![parse(sigma).unwrap()]],
            gen: f.iter().map(|s| parse(s).unwrap()).collect(),
            cost_lower: alloc::vec![
                alloc::vec![parse("0").unwrap(), parse(g_lower[0]).unwrap()],
                alloc::vec![parse(g_lower[1]).unwrap(), parse("0").unwrap()],
            ],
            cost_upper: alloc::vec![
                alloc::vec![parse("0").unwrap(), parse(g_upper[0]).unwrap()],
                alloc::vec![parse(g_upper[1]).unwrap(), parse("0").unwrap()],
            ],
            terminal: h.iter().map(|s| parse(s).unwrap()).collect(),
        })
        .unwrap()
    }

    fn small_grid(problem: &ProblemSpec, steps: usize) -> Grid {
        build_grid(
            &GridSpec {
                box_lo: alloc::vec![-2.0],
                box_hi: alloc::vec![2.0],
                nodes_per_dim: alloc::vec![21],
                time_steps: steps,
                boundary: BoundaryPolicy::Clamp,
            },
            problem,
            DEFAULT_VALUE_CAP,
        )
        .unwrap()
    }

    #[test]
    fn trivial_ode_step_adds_c_dt() {
        // b = sigma = 0, f = c, no penalties: slice = next + c dt everywhere
        let p = problem_2x2(["3", "3", "3", "3"], ["1", "1"], ["1", "1"], ["0"; 4], "0");
        let g = small_grid(&p, 10); // dt = 0.1
        let next = alloc::vec![0.5; 4 * g.n_nodes()];
        let cfg = PenalizedConfig::default();
        let (slice, _) = step_backward(&next, 0.4, &cfg, &p, &g).unwrap();
        for v in &slice {
            assert!((v - 0.8).abs() < 1e-9, "{v}");
        }
        // identity when f = 0 as well
        let p = problem_2x2(["0"; 4], ["1", "1"], ["1", "1"], ["0"; 4], "0");
        let (slice, _) = step_backward(&next, 0.4, &cfg, &p, &g).unwrap();
        for v in &slice {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn penalized_step_matches_hand_fixed_point() {
        // 2x2 modes, f = 0, sigma = b = 0, h^{11} = 0, h^{21} = 1,
        // g_lower_12 = 0.2, n = 10, m = 0, one step dt = 0.1:
        // v^{11} solves v = dt n (v - 0.8)^- => v = dt n 0.8 / (1 + dt n) = 0.4
        let p = problem_2x2(["0"; 4], ["0.2", "0.2"], ["100", "100"], ["0", "0", "1", "1"], "0");
        let g = small_grid(&p, 10);
        let modes = p.modes();
        let n_nodes = g.n_nodes();
        let mut next = alloc::vec![0.0; 4 * n_nodes];
        // next slice holds the terminal values: v^{21} = v^{22} = 1
        for node in 0..n_nodes {
            next[modes.pair_index(2, 1) * n_nodes + node] = 1.0;
            next[modes.pair_index(2, 2) * n_nodes + node] = 1.0;
        }
        let cfg = PenalizedConfig::with_penalties(PenaltyKind::Doubly, 10.0, 0.0);
        let (slice, _) = step_backward(&next, 0.9, &cfg, &p, &g).unwrap();
        // independent scalar oracle: bisect v = dt n (v - 0.8)^-
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid - 1.0 * (0.8f64 - mid).max(0.0) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!((oracle - 0.4).abs() < 1e-9);
        for node in 0..n_nodes {
            let v = slice[modes.pair_index(1, 1) * n_nodes + node];
            assert!((v - oracle).abs() < 1e-9, "node {node}: {v}");
        }
    }

    #[test]
    fn zero_time_steps_returns_terminal_only() {
        let p = problem_2x2(["1"; 4], ["1", "1"], ["1", "1"], ["x1", "x1", "x1", "x1"], "0");
        let g = small_grid(&p, 0);
        let (field, _) = solve_penalized(&p, &g, &PenalizedConfig::default()).unwrap();
        assert_eq!(field.time_steps(), 0);
        for node in 0..g.n_nodes() {
            assert_eq!(field.at(0, 0, node), g.coord(node)[0]);
        }
    }

    #[test]
    fn constant_generator_integrates_to_h_plus_t() {
        // f = 1, b = sigma = 0, T = 1: v(0,x) = h(x) + 1 exactly
        let p = problem_2x2(["1"; 4], ["1", "1"], ["1", "1"], ["x1^2", "x1^2", "x1^2", "x1^2"], "0");
        let g = small_grid(&p, 20);
        let (field, report) = solve_penalized(&p, &g, &PenalizedConfig::default()).unwrap();
        for pair in 0..4 {
            for node in 0..g.n_nodes() {
                let x = g.coord(node)[0];
                assert!(
                    (field.at(0, pair, node) - (x * x + 1.0)).abs() < 1e-8,
                    "pair {pair} node {node}"
                );
            }
        }
        assert_eq!(report.inner_iterations.len(), 20);
    }

    #[test]
    fn schedule_requires_entries_and_checks_ordering() {
        let p = problem_2x2(
            ["x1", "0", "0", "-x1"],
            ["0.3", "0.3"],
            ["0.4", "0.4"],
            ["0", "0.25", "0.25", "0.5"],
            "0.3",
        );
        let g = small_grid(&p, 8);
        assert!(matches!(
            run_schedule(&p, &g, &PenalizedConfig::default(), &[]),
            Err(SolveError::Config(_))
        ));
        let out = run_schedule(
            &p,
            &g,
            &PenalizedConfig::default(),
            &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 1.0)],
        )
        .unwrap();
        assert_eq!(out.fields.len(), 4);
        assert_eq!(out.checks.len(), 3);
        for c in &out.checks {
            assert!(c.ok, "violation {} at {:?} for {:?}->{:?}", c.worst_violation, c.at, c.from, c.to);
        }
        // single-entry schedule: one field, no comparisons
        let out = run_schedule(&p, &g, &PenalizedConfig::default(), &[(1.0, 1.0)]).unwrap();
        assert_eq!(out.fields.len(), 1);
        assert!(out.checks.is_empty());
    }

    #[test]
    fn theta_warning_for_large_penalties() {
        let p = problem_2x2(["0"; 4], ["1", "1"], ["1", "1"], ["0"; 4], "0");
        let g = small_grid(&p, 10);
        let cfg = PenalizedConfig { theta: 0.5, n: 100.0, ..Default::default() };
        let warnings = cfg.validate(&g).unwrap();
        assert_eq!(warnings.len(), 1);
        let cfg = PenalizedConfig { theta: 1.0, n: 100.0, ..Default::default() };
        assert!(cfg.validate(&g).unwrap().is_empty());
    }
}
