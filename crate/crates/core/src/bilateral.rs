//! Direct solver for the bilateral interconnected-obstacle system and the
//! complementarity residual used as the ground-truth check.
//!
//! The min-first system is
//!
//! ```text
//! min{ v - L[v], max{ v - U[v], -dv/dt - Lop v - f } } = 0
//! ```
//!
//! and its max-first twin swaps the nesting. At each backward slice a
//! projected Gauss-Seidel iteration computes the implicit-PDE nodal
//! candidate `c` (as in the penalized stepper with `n = m = 0`) and projects
//! it as `max(L, min(U, c))` (min-first: the lower obstacle wins when the
//! obstacles cross) or `min(U, max(L, c))` (max-first), with fresh obstacle
//! values, until the slice defect settles.
//!
//! Whether the two variants' solutions coincide is open; the measured gap is
//! reported and only the ordering max-first <= min-first is ever asserted.
//!
//! The no-free-loop assumption is validated before solving: it is what rules
//! out cost-free switching cycles, and without it the nodal projection can
//! cycle. A failed validation refuses to solve unless explicitly forced.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exprlang::EvalError;
use crate::grid::{self, Grid, ValueField};
use crate::model::{self, ProblemSpec, ValidationReport};
use crate::num;
use crate::schemes::SolveReport;
use crate::stepper::{self, BackwardConfig, Projection, SliceInit, StepError, Workspace};

/// Which nesting of the min/max complementarity structure to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// System with the outer `min`: the lower obstacle always binds.
    MinFirst,
    /// System with the outer `max`: the upper obstacle always binds.
    MaxFirst,
}

impl Variant {
    fn projection(&self) -> Projection {
        match self {
            Variant::MinFirst => Projection::MinFirst,
            Variant::MaxFirst => Projection::MaxFirst,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilateralConfig {
    pub variant: Variant,
    pub tol: f64,
    pub max_iters: usize,
    pub theta: f64,
    pub damping: f64,
    pub init: SliceInit,
    /// Skip the assumption validation (forced run).
    pub force: bool,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        BilateralConfig {
            variant: Variant::MinFirst,
            tol: 1e-8,
            max_iters: 2000,
            theta: 1.0,
            damping: 1.0,
            init: SliceInit::NextSlice,
            force: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum BilateralError {
    /// H3/H4 failed at grid samples; the failing assumption names plus the
    /// full report.
    ValidationFailed { failures: Vec<String>, report: Box<ValidationReport> },
    Config(&'static str),
    Step(StepError),
    Mismatch,
}

impl fmt::Display for BilateralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BilateralError::ValidationFailed { failures, .. } => {
                write!(f, "assumptions failed at grid samples: {}", failures.join(", "))
            }
            BilateralError::Config(msg) => write!(f, "invalid bilateral configuration: {msg}"),
            BilateralError::Step(e) => write!(f, "{e}"),
            BilateralError::Mismatch => write!(f, "fields live on different grids or mode spaces"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BilateralError {}

impl From<StepError> for BilateralError {
    fn from(e: StepError) -> Self {
        BilateralError::Step(e)
    }
}

impl From<EvalError> for BilateralError {
    fn from(e: EvalError) -> Self {
        BilateralError::Step(StepError::Eval(e))
    }
}

/// Solve the bilateral system by backward time stepping with projected
/// Gauss-Seidel slices. Returns the full history (terminal slice = `h`
/// exactly) and the solve diagnostics.
pub fn solve_bilateral(
    problem: &ProblemSpec,
    grid: &Grid,
    cfg: &BilateralConfig,
) -> Result<(ValueField, SolveReport), BilateralError> {
    if !(cfg.tol > 0.0) {
        return Err(BilateralError::Config("tol must be positive"));
    }
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(BilateralError::Config("damping must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&cfg.theta) {
        return Err(BilateralError::Config("theta must lie in [0, 1]"));
    }
    if !cfg.force {
        let report = model::validate_on_grid(problem, grid, &[])?;
        if !report.all_ok() {
            return Err(BilateralError::ValidationFailed {
                failures: report.failures(),
                report: Box::new(report),
            });
        }
    }
    let outcome = stepper::backward_solve(
        problem,
        grid,
        &BackwardConfig {
            theta: cfg.theta,
            pen_n: 0.0,
            pen_m: 0.0,
            projection: cfg.variant.projection(),
            damping: cfg.damping,
            tol: cfg.tol,
            max_iters: cfg.max_iters,
            lambda_shift: 0.0,
            init: cfg.init,
        },
    )?;
    let monotonicity = grid::monotonicity_report(problem, grid, cfg.theta).map_err(StepError::Eval)?;
    Ok((
        outcome.field,
        SolveReport {
            inner_iterations: outcome.iterations,
            max_defects: outcome.defects,
            monotonicity,
            warnings: Vec::new(),
            wall_seconds: None,
        },
    ))
}

// ---------------------------------------------------------------------------
// Complementarity residual
// ---------------------------------------------------------------------------

/// Discrete complementarity residual of a field:
/// `min{v - L, max{v - U, A}}` (min-first) or `max{v - U, min{v - L, A}}`
/// (max-first), where `A` is the discrete parabolic operator residual built
/// with the same stencils as the solver. Zero at interior nodes of an exact
/// discrete solution.
#[derive(Debug, Clone)]
pub struct ComplementarityResidual {
    /// `[slice][pair][node]` over slices `0..time_steps`; boundary nodes are
    /// not evaluated and hold 0.
    pub values: Vec<f64>,
    pub time_steps: usize,
    pub lambda: usize,
    pub n_nodes: usize,
    /// Max-norm over evaluated (interior) entries.
    pub max_abs: f64,
    /// `(slice, pair, node)` attaining it.
    pub argmax: (usize, usize, usize),
}

impl ComplementarityResidual {
    pub fn at(&self, s: usize, pair: usize, node: usize) -> f64 {
        self.values[(s * self.lambda + pair) * self.n_nodes + node]
    }
}

/// Evaluate the residual of a field history. `theta` must match the scheme
/// that produced the field (1 for the default solvers).
pub fn residual(
    field: &ValueField,
    problem: &ProblemSpec,
    grid: &Grid,
    variant: Variant,
    theta: f64,
) -> Result<ComplementarityResidual, BilateralError> {
    let modes = problem.modes();
    let lambda = modes.lambda();
    let n = grid.n_nodes();
    let k = grid.dim_k();
    let d = problem.dim_d();
    let c1 = modes.count1();
    let c2 = modes.count2();
    let steps = grid.time_steps();
    let dt = grid.dt();
    if field.time_steps() != steps || field.n_nodes() != n {
        return Err(BilateralError::Mismatch);
    }

    let mut ws = Workspace::new(problem, grid);
    let mut values = vec![0.0; steps * lambda * n];
    let mut lop_next = vec![0.0; lambda * n];
    let mut ybuf = vec![0.0; lambda];
    let mut zbuf = vec![0.0; d];
    let mut gradbuf = vec![0.0; k];
    let mut max_abs = 0.0;
    let mut argmax = (0, 0, 0);

    for s in 0..steps {
        let t = grid.time_of_slice(s);
        let t1 = grid.time_of_slice(s + 1);
        if theta < 1.0 {
            ws.fill_coefficients(problem, grid, t1)?;
            for pair in 0..lambda {
                let next = field.pair_slice(s + 1, pair);
                for node in 0..n {
                    lop_next[pair * n + node] = if grid.is_interior(node) {
                        let (diag, off) =
                            grid::lop_split(grid, next, node, ws.b_at(node, k), ws.a_at(node, k));
                        diag * next[node] + off
                    } else {
                        0.0
                    };
                }
            }
        }
        ws.fill_coefficients(problem, grid, t)?;
        for pair in 0..lambda {
            let (i, j) = modes.pair_at(pair);
            let cur = field.pair_slice(s, pair);
            let next = field.pair_slice(s + 1, pair);
            for node in 0..n {
                if !grid.is_interior(node) {
                    continue;
                }
                for p in 0..lambda {
                    ybuf[p] = field.at(s, p, node);
                }
                let lhat = model::obstacle_lower_from_costs(modes, &ybuf, i, j, ws.costs_lo_at(node, c1), 1.0);
                let uhat = model::obstacle_upper_from_costs(modes, &ybuf, i, j, ws.costs_up_at(node, c2), 1.0);
                let b_node = ws.b_at(node, k);
                let (diag, off) = grid::lop_split(grid, cur, node, b_node, ws.a_at(node, k));
                grid::upwind_gradient(grid, cur, node, b_node, &mut gradbuf);
                for r in 0..d {
                    let mut z = 0.0;
                    for c in 0..k {
                        z += ws.sigma_at(node, k, d)[c * d + r] * gradbuf[c];
                    }
                    zbuf[r] = z;
                }
                let f_val = problem.eval_gen(ws.env_mut(), t, grid.coord(node), &ybuf, &zbuf, i, j)?;
                let v = cur[node];
                let a_term = -(next[node] - v) / dt
                    - theta * (diag * v + off)
                    - (1.0 - theta) * lop_next[pair * n + node]
                    - f_val;
                let r = match variant {
                    Variant::MinFirst => (v - lhat).min((v - uhat).max(a_term)),
                    Variant::MaxFirst => (v - uhat).max((v - lhat).min(a_term)),
                };
                values[(s * lambda + pair) * n + node] = r;
                if num::abs(r) > max_abs {
                    max_abs = num::abs(r);
                    argmax = (s, pair, node);
                }
            }
        }
    }
    Ok(ComplementarityResidual { values, time_steps: steps, lambda, n_nodes: n, max_abs, argmax })
}

// ---------------------------------------------------------------------------
// Feasibility and ordering audits
// ---------------------------------------------------------------------------

/// Obstacle feasibility of a field.
///
/// For min-first: `worst_hard` is the largest violation of `v >= L[v]`
/// anywhere (the system forces the lower obstacle), and `worst_conditional`
/// the largest violation of `v <= U[v]` restricted to points where
/// `v - L > slack_tol`. Max-first swaps the roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub worst_hard: f64,
    pub worst_conditional: f64,
}

pub fn feasibility(
    field: &ValueField,
    problem: &ProblemSpec,
    grid: &Grid,
    variant: Variant,
    slack_tol: f64,
) -> Result<Feasibility, BilateralError> {
    let modes = problem.modes();
    let lambda = modes.lambda();
    let n = grid.n_nodes();
    let c1 = modes.count1();
    let c2 = modes.count2();
    let mut env = problem.new_env();
    let mut lower = vec![0.0; c1 * c1];
    let mut upper = vec![0.0; c2 * c2];
    let mut ybuf = vec![0.0; lambda];
    let mut worst_hard: f64 = 0.0;
    let mut worst_cond: f64 = 0.0;
    for s in 0..=field.time_steps() {
        let t = grid.time_of_slice(s);
        for node in 0..n {
            problem.cost_tables(&mut env, t, grid.coord(node), &mut lower, &mut upper)?;
            for p in 0..lambda {
                ybuf[p] = field.at(s, p, node);
            }
            for (pair, (i, j)) in modes.pairs().enumerate() {
                let v = ybuf[pair];
                let lhat = model::obstacle_lower_from_costs(modes, &ybuf, i, j, &lower, 1.0);
                let uhat = model::obstacle_upper_from_costs(modes, &ybuf, i, j, &upper, 1.0);
                match variant {
                    Variant::MinFirst => {
                        worst_hard = worst_hard.max(lhat - v);
                        if v - lhat > slack_tol {
                            worst_cond = worst_cond.max(v - uhat);
                        }
                    }
                    Variant::MaxFirst => {
                        worst_hard = worst_hard.max(v - uhat);
                        if uhat - v > slack_tol {
                            worst_cond = worst_cond.max(lhat - v);
                        }
                    }
                }
            }
        }
    }
    Ok(Feasibility { worst_hard, worst_conditional: worst_cond })
}

/// Worst violation of `sub <= super`, with its location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubSuperReport {
    pub worst_violation: f64,
    pub at: (usize, usize, usize),
}

/// Numerical audit of the comparison principle: max over all slices, pairs
/// and nodes of `(sub - super)^+`.
pub fn compare_sub_super(sub: &ValueField, super_: &ValueField) -> Result<SubSuperReport, BilateralError> {
    if !sub.same_shape(super_) {
        return Err(BilateralError::Mismatch);
    }
    let (worst, at) = sub.max_excess_over(super_);
    Ok(SubSuperReport { worst_violation: worst.max(0.0), at })
}
