//! Shared backward-in-time slice solver.
//!
//! One time step solves, per mode pair and node, the theta-scheme nodal
//! equation
//!
//! ```text
//! v_t = v_{t+dt} + dt [ theta Lop v_t + (1-theta) Lop v_{t+dt}
//!                       + F(t, x, v_t, sigma^T Dx v_t) ]
//! ```
//!
//! by damped Gauss-Seidel sweeps: mode pairs lexicographic, nodes row-major,
//! the whole traversal reversed on alternate iterations. The diffusion
//! diagonal and the penalty terms are implicit in the node's own unknown
//! (the scalar equation is piecewise linear and solved exactly); neighbor
//! nodes, other components of `y` in the generator, and the gradient enter
//! with the freshest available values. Boundary nodes are not solved but
//! closed per the grid policy, and the hard obstacle projection of the
//! reflected/bilateral variants is applied at every node.
//!
//! Convergence is declared on the max-norm sweep defect. Sweeps continue to
//! `tol * INNER_SAFETY` so that the per-slice distance to the exact fixed
//! point stays well below `tol` even after accumulation across all slices;
//! a slice fails only if the defect is still above `tol` at `max_iters`.
//!
//! The exponential shift `v~ = e^{lambda t} v` (an option of the penalized
//! solvers) is implemented as an exact per-step change of variables: the
//! next slice enters scaled by `e^{-lambda dt}`, costs scale by
//! `e^{lambda t}`, and the generator is conjugated. In exact arithmetic the
//! shifted solve is therefore a reparametrization of the plain one.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exprlang::EvalError;
use crate::grid::{self, Grid, ValueField};
use crate::model::{self, ProblemSpec};
use crate::num;

/// Extra margin between the sweep-defect stopping threshold and the
/// fixed-point tolerance the caller asked for.
pub(crate) const INNER_SAFETY: f64 = 1.0 / 64.0;

/// Hard projection applied after the nodal implicit solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Projection {
    /// No reflection (doubly penalized system).
    None,
    /// `v = max(L, c)` — reflected on the lower obstacle.
    Lower,
    /// `v = min(U, c)` — reflected on the upper obstacle.
    Upper,
    /// `v = max(L, min(U, c))` — bilateral, lower obstacle wins.
    MinFirst,
    /// `v = min(U, max(L, c))` — bilateral, upper obstacle wins.
    MaxFirst,
}

impl Projection {
    #[inline]
    fn apply(&self, c: f64, l: f64, u: f64) -> f64 {
        match self {
            Projection::None => c,
            Projection::Lower => l.max(c),
            Projection::Upper => u.min(c),
            Projection::MinFirst => l.max(u.min(c)),
            Projection::MaxFirst => u.min(l.max(c)),
        }
    }
}

/// Initial iterate for each slice's sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceInit {
    /// Warm start from the next (already solved) slice.
    #[default]
    NextSlice,
    /// All zeros.
    Zeros,
    /// The terminal data broadcast backward.
    TerminalBroadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepError {
    Eval(EvalError),
    NonConvergence { t: f64, defect: f64, tol: f64, pair: (usize, usize), node: usize },
    Blowup { t: f64, pair: (usize, usize), node: usize },
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Eval(e) => write!(f, "coefficient evaluation failed: {e}"),
            StepError::NonConvergence { t, defect, tol, pair, node } => write!(
                f,
                "slice at t={t} did not converge: defect {defect} > tol {tol} (worst pair {:?}, node {node})",
                pair
            ),
            StepError::Blowup { t, pair, node } => {
                write!(f, "non-finite value at t={t}, pair {:?}, node {node}", pair)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for StepError {}

impl From<EvalError> for StepError {
    fn from(e: EvalError) -> Self {
        StepError::Eval(e)
    }
}

/// Per-step parameters of the nodal equations.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SliceParams {
    pub theta: f64,
    pub dt: f64,
    pub pen_n: f64,
    pub pen_m: f64,
    pub projection: Projection,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// `e^{lambda t_new}` — scale of the transformed variables at this slice.
    pub value_scale: f64,
    /// `e^{-lambda dt}` — decay factor applied to the next slice.
    pub next_decay: f64,
}

pub(crate) struct SliceStats {
    pub iterations: usize,
    pub final_defect: f64,
}

/// Reusable buffers for a backward solve.
pub(crate) struct Workspace {
    b: Vec<f64>,         // n_nodes * k
    a: Vec<f64>,         // n_nodes * k * k
    sigma: Vec<f64>,     // n_nodes * k * d
    costs_lo: Vec<f64>,  // n_nodes * c1^2
    costs_up: Vec<f64>,  // n_nodes * c2^2
    lop_next: Vec<f64>,  // lambda * n_nodes (only filled when theta < 1)
    ybuf: Vec<f64>,      // lambda
    yphys: Vec<f64>,     // lambda
    zbuf: Vec<f64>,      // d
    grad: Vec<f64>,      // k
    env: model::Env,
    pub closures: Vec<Option<grid::BoundaryInfo>>,
}

impl Workspace {
    pub fn new(problem: &ProblemSpec, grid: &Grid) -> Workspace {
        let k = grid.dim_k();
        let d = problem.dim_d();
        let n = grid.n_nodes();
        let c1 = problem.modes().count1();
        let c2 = problem.modes().count2();
        let lambda = problem.modes().lambda();
        Workspace {
            b: vec![0.0; n * k],
            a: vec![0.0; n * k * k],
            sigma: vec![0.0; n * k * d],
            costs_lo: vec![0.0; n * c1 * c1],
            costs_up: vec![0.0; n * c2 * c2],
            lop_next: vec![0.0; lambda * n],
            ybuf: vec![0.0; lambda],
            yphys: vec![0.0; lambda],
            zbuf: vec![0.0; d],
            grad: vec![0.0; k],
            env: problem.new_env(),
            closures: grid::closure_rules(grid),
        }
    }

    pub(crate) fn b_at(&self, node: usize, k: usize) -> &[f64] {
        &self.b[node * k..(node + 1) * k]
    }

    pub(crate) fn a_at(&self, node: usize, k: usize) -> &[f64] {
        &self.a[node * k * k..(node + 1) * k * k]
    }

    pub(crate) fn sigma_at(&self, node: usize, k: usize, d: usize) -> &[f64] {
        &self.sigma[node * k * d..(node + 1) * k * d]
    }

    pub(crate) fn costs_lo_at(&self, node: usize, c1: usize) -> &[f64] {
        &self.costs_lo[node * c1 * c1..(node + 1) * c1 * c1]
    }

    pub(crate) fn costs_up_at(&self, node: usize, c2: usize) -> &[f64] {
        &self.costs_up[node * c2 * c2..(node + 1) * c2 * c2]
    }

    pub(crate) fn env_mut(&mut self) -> &mut model::Env {
        &mut self.env
    }

    /// Evaluate `b`, `sigma sigma^T` and both cost tables at every node for
    /// time `t`.
    pub(crate) fn fill_coefficients(&mut self, problem: &ProblemSpec, grid: &Grid, t: f64) -> Result<(), EvalError> {
        let k = grid.dim_k();
        let d = problem.dim_d();
        let c1 = problem.modes().count1();
        let c2 = problem.modes().count2();
        for node in 0..grid.n_nodes() {
            let x = grid.coord(node);
            for c in 0..k {
                self.b[node * k + c] = problem.eval_drift(&mut self.env, t, x, c + 1)?;
                for r in 0..d {
                    self.sigma[(node * k + c) * d + r] = problem.eval_vol(&mut self.env, t, x, c + 1, r + 1)?;
                }
            }
            for c in 0..k {
                for e in 0..k {
                    let mut s = 0.0;
                    for r in 0..d {
                        s += self.sigma[(node * k + c) * d + r] * self.sigma[(node * k + e) * d + r];
                    }
                    self.a[(node * k + c) * k + e] = s;
                }
            }
            let (lo, up) = (
                &mut self.costs_lo[node * c1 * c1..(node + 1) * c1 * c1],
                &mut self.costs_up[node * c2 * c2..(node + 1) * c2 * c2],
            );
            problem.cost_tables(&mut self.env, t, x, lo, up)?;
        }
        Ok(())
    }
}

/// Solve one slice in place. `slice` enters holding the initial iterate (in
/// transformed units when shifted) and leaves holding the solution at
/// `t_new`; `next` holds the already-solved slice at `t_new + dt` (also
/// transformed units of that slice's own time).
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_slice(
    problem: &ProblemSpec,
    grid: &Grid,
    ws: &mut Workspace,
    params: &SliceParams,
    t_new: f64,
    t_next: f64,
    next: &[f64],
    slice: &mut [f64],
) -> Result<SliceStats, StepError> {
    let modes = problem.modes();
    let lambda = modes.lambda();
    let n = grid.n_nodes();
    let k = grid.dim_k();
    let d = problem.dim_d();
    let c1 = modes.count1();
    let c2 = modes.count2();

    // lagged part of the theta scheme, evaluated once
    if params.theta < 1.0 {
        ws.fill_coefficients(problem, grid, t_next)?;
        for pair in 0..lambda {
            let field = &next[pair * n..(pair + 1) * n];
            for node in 0..n {
                let solve_pde = match &ws.closures[node] {
                    None => true,
                    Some(info) => !info.couples(&ws.b[node * k..(node + 1) * k], &ws.a[node * k * k..(node + 1) * k * k], k),
                };
                ws.lop_next[pair * n + node] = if solve_pde {
                    let (diag, off) =
                        grid::lop_split(grid, field, node, &ws.b[node * k..], &ws.a[node * k * k..]);
                    diag * field[node] + off
                } else {
                    0.0
                };
            }
        }
    }
    ws.fill_coefficients(problem, grid, t_new)?;

    let stop = params.tol * INNER_SAFETY;
    let mut defect = f64::INFINITY;
    // defect two sweeps ago, per traversal direction; round-off plateaus
    // are detected against the same direction since the alternating sweeps
    // produce systematically different defects
    let mut prev_same_dir = [f64::INFINITY; 2];
    let mut worst: (usize, usize) = (0, 0);
    let mut iterations = 0;

    for iter in 0..params.max_iters {
        let same_dir = prev_same_dir[iter % 2];
        defect = 0.0;
        for visit in 0..lambda * n {
            let visit = if iter % 2 == 0 { visit } else { lambda * n - 1 - visit };
            let pair = visit / n;
            let node = visit % n;
            let (i, j) = modes.pair_at(pair);

            // fresh component values at this node
            for p in 0..lambda {
                ws.ybuf[p] = slice[p * n + node];
            }
            let lhat = model::obstacle_lower_from_costs(
                modes,
                &ws.ybuf,
                i,
                j,
                &ws.costs_lo[node * c1 * c1..],
                params.value_scale,
            );
            let uhat = model::obstacle_upper_from_costs(
                modes,
                &ws.ybuf,
                i,
                j,
                &ws.costs_up[node * c2 * c2..],
                params.value_scale,
            );

            // boundary nodes whose faces carry outward coupling take the
            // closure row; everything else solves its nodal equation
            let solve_pde = match &ws.closures[node] {
                None => true,
                Some(info) => {
                    !info.couples(&ws.b[node * k..(node + 1) * k], &ws.a[node * k * k..(node + 1) * k * k], k)
                }
            };

            let candidate = if solve_pde {
                let field = &slice[pair * n..(pair + 1) * n];
                let b_node = &ws.b[node * k..(node + 1) * k];
                let a_node = &ws.a[node * k * k..(node + 1) * k * k];
                let (diag, off) = grid::lop_split(grid, field, node, b_node, a_node);
                grid::upwind_gradient(grid, field, node, b_node, &mut ws.grad);
                for r in 0..d {
                    let mut z = 0.0;
                    for c in 0..k {
                        z += ws.sigma[(node * k + c) * d + r] * ws.grad[c];
                    }
                    ws.zbuf[r] = z / params.value_scale;
                }
                for p in 0..lambda {
                    ws.yphys[p] = ws.ybuf[p] / params.value_scale;
                }
                let f_val = params.value_scale
                    * problem.eval_gen(&mut ws.env, t_new, grid.coord(node), &ws.yphys, &ws.zbuf, i, j)?;

                let alpha = 1.0 - params.dt * params.theta * diag;
                let beta = params.next_decay * next[pair * n + node]
                    + params.dt
                        * (params.theta * off
                            + (1.0 - params.theta) * params.next_decay * ws.lop_next[pair * n + node]
                            + f_val);
                let c = solve_piecewise(alpha, beta, params.dt * params.pen_n, params.dt * params.pen_m, lhat, uhat);
                params.projection.apply(c, lhat, uhat)
            } else {
                let info = ws.closures[node].as_ref().expect("boundary node has a closure rule");
                let c = info.rule.apply(&slice[pair * n..(pair + 1) * n]);
                params.projection.apply(c, lhat, uhat)
            };

            let old = slice[pair * n + node];
            let new = old + params.damping * (candidate - old);
            if !new.is_finite() {
                return Err(StepError::Blowup { t: t_new, pair: (i, j), node });
            }
            let change = num::abs(new - old);
            if change > defect {
                defect = change;
                worst = (pair, node);
            }
            slice[pair * n + node] = new;
        }
        iterations = iter + 1;
        if defect <= stop {
            return Ok(SliceStats { iterations, final_defect: defect });
        }
        // sub-tolerance round-off plateau: no further progress is possible
        if defect <= params.tol && defect >= same_dir {
            return Ok(SliceStats { iterations, final_defect: defect });
        }
        prev_same_dir[iter % 2] = defect;
    }
    if defect <= params.tol {
        return Ok(SliceStats { iterations, final_defect: defect });
    }
    Err(StepError::NonConvergence {
        t: t_new,
        defect,
        tol: params.tol,
        pair: modes.pair_at(worst.0),
        node: worst.1,
    })
}

/// Exact solution of the scalar piecewise-linear nodal equation
/// `alpha c = beta + cn (c - l)^- - cm (c - u)^+` with `alpha > 0`,
/// `cn, cm >= 0`. Infinite obstacles deactivate their penalty.
pub(crate) fn solve_piecewise(alpha: f64, beta: f64, cn: f64, cm: f64, l: f64, u: f64) -> f64 {
    let cn = if l.is_finite() { cn } else { 0.0 };
    let cm = if u.is_finite() { cm } else { 0.0 };
    if cn == 0.0 && cm == 0.0 {
        return beta / alpha;
    }
    if cm == 0.0 {
        // single kink at l
        if alpha * l - beta > 0.0 {
            return (beta + cn * l) / (alpha + cn);
        }
        return beta / alpha;
    }
    if cn == 0.0 {
        // single kink at u
        if alpha * u - beta < 0.0 {
            return (beta + cm * u) / (alpha + cm);
        }
        return beta / alpha;
    }
    if l <= u {
        if alpha * l - beta > 0.0 {
            return (beta + cn * l) / (alpha + cn);
        }
        if alpha * u - beta < 0.0 {
            return (beta + cm * u) / (alpha + cm);
        }
        beta / alpha
    } else {
        // crossed obstacles: kinks ordered u < l, both terms can be active
        if alpha * u - beta - cn * (l - u) >= 0.0 {
            return (beta + cn * l) / (alpha + cn);
        }
        if alpha * l - beta + cm * (l - u) < 0.0 {
            return (beta + cm * u) / (alpha + cm);
        }
        (beta + cn * l + cm * u) / (alpha + cn + cm)
    }
}

/// Backward driver shared by the penalized and bilateral solvers.
pub(crate) struct BackwardConfig {
    pub theta: f64,
    pub pen_n: f64,
    pub pen_m: f64,
    pub projection: Projection,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub lambda_shift: f64,
    pub init: SliceInit,
}

pub(crate) struct BackwardOutcome {
    pub field: ValueField,
    pub iterations: Vec<usize>,
    pub defects: Vec<f64>,
}

/// Run the full backward sweep: terminal slice set exactly to `h`, then one
/// [`solve_slice`] per step. Fields are stored and returned in physical
/// (unshifted) units.
pub(crate) fn backward_solve(
    problem: &ProblemSpec,
    grid: &Grid,
    cfg: &BackwardConfig,
) -> Result<BackwardOutcome, StepError> {
    let modes = problem.modes();
    let lambda = modes.lambda();
    let n = grid.n_nodes();
    let steps = grid.time_steps();
    let mut field = ValueField::zeros(grid, modes);
    grid::set_terminal(&mut field, problem, grid)?;

    let mut ws = Workspace::new(problem, grid);
    let mut iterations = Vec::with_capacity(steps);
    let mut defects = Vec::with_capacity(steps);
    let mut next_buf = vec![0.0; lambda * n];
    let mut terminal_buf = Vec::new();
    if matches!(cfg.init, SliceInit::TerminalBroadcast) {
        terminal_buf = field.slice(steps).to_vec();
    }

    let dt = grid.dt();
    let shift = cfg.lambda_shift;
    for s in (0..steps).rev() {
        let t_new = grid.time_of_slice(s);
        let t_next = grid.time_of_slice(s + 1);

        // next slice in its own transformed units
        let next_scale = num::exp(shift * t_next);
        for (dst, src) in next_buf.iter_mut().zip(field.slice(s + 1).iter()) {
            *dst = next_scale * *src;
        }
        let value_scale = num::exp(shift * t_new);

        let params = SliceParams {
            theta: cfg.theta,
            dt,
            pen_n: cfg.pen_n,
            pen_m: cfg.pen_m,
            projection: cfg.projection,
            damping: cfg.damping,
            tol: cfg.tol,
            max_iters: cfg.max_iters,
            value_scale,
            next_decay: num::exp(-shift * dt),
        };

        {
            let slice = field.slice_mut(s);
            match cfg.init {
                SliceInit::NextSlice => {
                    for (dst, src) in slice.iter_mut().zip(next_buf.iter()) {
                        *dst = params.next_decay * *src;
                    }
                }
                SliceInit::Zeros => slice.iter_mut().for_each(|v| *v = 0.0),
                SliceInit::TerminalBroadcast => {
                    for (dst, src) in slice.iter_mut().zip(terminal_buf.iter()) {
                        *dst = value_scale * *src;
                    }
                }
            }
        }

        let stats = {
            let slice = field.slice_mut(s);
            solve_slice(problem, grid, &mut ws, &params, t_new, t_next, &next_buf, slice)?
        };
        iterations.push(stats.iterations);
        defects.push(stats.final_defect);

        if shift != 0.0 {
            let unscale = 1.0 / value_scale;
            for v in field.slice_mut(s).iter_mut() {
                *v *= unscale;
            }
        }
    }
    iterations.reverse();
    defects.reverse();
    Ok(BackwardOutcome { field, iterations, defects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(alpha: f64, beta: f64, cn: f64, cm: f64, l: f64, u: f64, c: f64) -> f64 {
        alpha * c - beta - cn * num::neg(c - l) + cm * num::pos(c - u)
    }

    #[test]
    fn piecewise_solver_hits_every_region() {
        let cases = [
            (1.0, 0.0, 1.0, 0.0, 0.8, f64::INFINITY),  // below lower kink
            (2.0, 5.0, 3.0, 0.0, 0.5, f64::INFINITY),  // above lower kink
            (1.5, 4.0, 0.0, 2.0, f64::NEG_INFINITY, 1.0), // above upper kink
            (1.0, -3.0, 2.0, 2.0, -1.0, 1.0),          // both finite, below
            (1.0, 7.0, 2.0, 2.0, -1.0, 1.0),           // both finite, above
            (1.0, 0.1, 2.0, 2.0, -1.0, 1.0),           // interior
            (1.0, 0.0, 5.0, 5.0, 2.0, -2.0),           // crossed obstacles, middle
            (1.0, 30.0, 5.0, 5.0, 2.0, -2.0),          // crossed, above l
            (1.0, -30.0, 5.0, 5.0, 2.0, -2.0),         // crossed, below u
            (1.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY),
        ];
        for (alpha, beta, cn, cm, l, u) in cases {
            let c = solve_piecewise(alpha, beta, cn, cm, l, u);
            let r = residual(alpha, beta, cn, cm, l, u, c);
            assert!(
                num::abs(r) < 1e-12 * (1.0 + num::abs(beta)),
                "case ({alpha},{beta},{cn},{cm},{l},{u}): c={c}, residual={r}"
            );
        }
    }

    #[test]
    fn piecewise_solver_matches_bisection() {
        // deterministic parameter sweep against a bisection oracle
        let mut k = 0u64;
        for _ in 0..500 {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = |k: u64, s: u64| ((k >> s) & 0xffff) as f64 / 65535.0;
            let alpha = 1.0 + 3.0 * r(k, 0);
            let beta = 10.0 * (r(k, 8) - 0.5);
            let cn = 4.0 * r(k, 16);
            let cm = 4.0 * r(k, 24);
            let l = 4.0 * (r(k, 32) - 0.5);
            let u = 4.0 * (r(k, 40) - 0.5);
            let c = solve_piecewise(alpha, beta, cn, cm, l, u);
            // bisection on the strictly increasing residual
            let (mut lo, mut hi) = (-1e3, 1e3);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if residual(alpha, beta, cn, cm, l, u, mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!(num::abs(c - 0.5 * (lo + hi)) < 1e-9, "c={c} vs bisect={}", 0.5 * (lo + hi));
        }
    }
}
