//! Independent desk-scale ground truth: explicit Markov-chain backward
//! induction for the interconnected switching game, and for a scalar
//! two-obstacle Dynkin game.
//!
//! The diffusion is approximated by a trinomial branch per dimension
//! (tensorized), matching the first and second local moments to `O(dt^2)`:
//! offsets `{-delta, 0, +delta}` with `delta = s sqrt(3 dt)`,
//! `p_mid = 2/3`, `p_up/down = 1/6 +- b sqrt(dt / (12 s^2))`, where
//! `s^2 = (sigma sigma^T)_cc`. Probabilities outside `[0,1]` are refused
//! with a suggested step count; clipping would silently destroy the moment
//! match and with it the oracle status. Dimensions with zero volatility
//! advance deterministically by `b dt`. Tensorized branches cannot represent
//! correlated diffusion, so a non-diagonal `sigma sigma^T` is refused at
//! build time by the local-moment check.
//!
//! With constant coefficients the lattice recombines; otherwise a general
//! tree is grown with a configurable cap on the node count.
//!
//! The backward recursion for the game solves, at every tree node, the
//! nodal fixed point
//!
//! ```text
//! v^{ij} = max( L^{ij}[v], min( U^{ij}[v], E[v^{ij}_next] + f^{ij} dt ) )
//! ```
//!
//! sweeping mode pairs lexicographically and in reverse on alternate
//! passes. The no-free-loop property is what makes this fixed point settle;
//! failure to settle within `lambda^2` sweeps is reported, not silently
//! accepted. The `z` argument of `f` defaults to 0 (restricting validated
//! problems to generators with weak `z` dependence); for constant `sigma` a
//! conditional-covariance regression estimate is available instead.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exprlang::{BindError, CompiledExpr, EvalError, Expression, Var};
use crate::model::{self, ProblemSpec};
use crate::num;
use crate::stepper;

/// How the gradient argument of the generator is supplied on the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZMode {
    /// `z = 0` (default).
    #[default]
    Zero,
    /// Conditional-covariance regression estimate; constant `sigma` only.
    CovarianceEstimate,
}

/// Nodal update used by the backward induction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodalUpdate {
    /// Hard min-first projection on the interconnected obstacles.
    Projected,
    /// Penalized update `v = E + dt (f + n(v-L)^- - m(v-U)^+)`; used to
    /// check the discrete penalization limit against the projected values.
    Penalized { n: f64, m: f64 },
}

#[derive(Debug, Clone)]
pub struct TreeOptions {
    pub node_cap: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { node_cap: 1_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct GameConfig {
    pub z_mode: ZMode,
    pub nodal: NodalUpdate,
    pub fixed_point_tol: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig { z_mode: ZMode::Zero, nodal: NodalUpdate::Projected, fixed_point_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    Eval(EvalError),
    Bind(BindError),
    BadDimension { expected: usize, got: usize },
    NodeCapExceeded { needed: usize, cap: usize },
    ProbabilityOutOfRange { dim: usize, prob: f64, suggested_steps: usize },
    CrossCovariance { dims: (usize, usize), value: f64 },
    MomentMismatch { dim: usize, error: f64 },
    NodalFixedPoint { level: usize, node: usize, defect: f64 },
    ObstacleOrder { level: usize, node: usize, lower: f64, upper: f64 },
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::Eval(e) => write!(f, "{e}"),
            OracleError::Bind(e) => write!(f, "{e}"),
            OracleError::BadDimension { expected, got } => {
                write!(f, "anchor point has dimension {got}, problem needs {expected}")
            }
            OracleError::NodeCapExceeded { needed, cap } => {
                write!(f, "tree needs {needed} nodes, exceeding the cap of {cap}")
            }
            OracleError::ProbabilityOutOfRange { dim, prob, suggested_steps } => write!(
                f,
                "branch probability {prob} out of [0,1] in dimension {dim}: the drift is too \
                 large for this dt; use at least {suggested_steps} steps"
            ),
            OracleError::CrossCovariance { dims, value } => write!(
                f,
                "sigma sigma^T has off-diagonal entry {value} at {:?}; the tensorized trinomial \
                 tree cannot match correlated diffusion",
                dims
            ),
            OracleError::MomentMismatch { dim, error } => {
                write!(f, "local moment mismatch {error} in dimension {dim}")
            }
            OracleError::NodalFixedPoint { level, node, defect } => write!(
                f,
                "nodal fixed point failed to settle (level {level}, node {node}, defect {defect}); \
                 this signals a near-violation of the no-free-loop property"
            ),
            OracleError::ObstacleOrder { level, node, lower, upper } => write!(
                f,
                "obstacle order violated at level {level}, node {node}: lower {lower} > upper {upper}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for OracleError {}

impl From<EvalError> for OracleError {
    fn from(e: EvalError) -> Self {
        OracleError::Eval(e)
    }
}

impl From<BindError> for OracleError {
    fn from(e: BindError) -> Self {
        OracleError::Bind(e)
    }
}

// ---------------------------------------------------------------------------
// Tree structure
// ---------------------------------------------------------------------------

/// One time level: node coordinates and the branches to the next level.
#[derive(Debug, Clone)]
pub struct TreeLevel {
    /// `n_nodes * k` coordinates, node-major.
    pub coords: Vec<f64>,
    /// Branch list offsets per node (`n_nodes + 1` entries); empty on the
    /// terminal level.
    pub offsets: Vec<usize>,
    /// Child node index at the next level, per branch.
    pub children: Vec<u32>,
    /// Branch probabilities, aligned with `children`.
    pub probs: Vec<f64>,
}

impl TreeLevel {
    /// Branch range of one node into `children`/`probs`.
    pub fn branches(&self, node: usize) -> core::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }
}

/// Discrete-time Markov-chain approximation of the diffusion, anchored at
/// `x0`.
#[derive(Debug, Clone)]
pub struct TreeModel {
    pub steps: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub dim_k: usize,
    pub recombining: bool,
    pub levels: Vec<TreeLevel>,
}

impl TreeModel {
    pub fn total_nodes(&self) -> usize {
        self.levels.iter().map(|l| l.coords.len() / self.dim_k.max(1)).sum()
    }

    fn level_nodes(&self, s: usize) -> usize {
        self.levels[s].coords.len() / self.dim_k
    }

    fn coord(&self, s: usize, node: usize) -> &[f64] {
        &self.levels[s].coords[node * self.dim_k..(node + 1) * self.dim_k]
    }
}

/// Per-dimension branching at one node.
enum DimBranch {
    /// Deterministic drift step.
    Drift { offset: f64 },
    /// Trinomial `{-delta, 0, +delta}` with `(p_down, p_mid, p_up)`.
    Trinomial { delta: f64, probs: [f64; 3] },
}

fn dim_branch(b: f64, s2: f64, dt: f64, horizon: f64, dim: usize) -> Result<DimBranch, OracleError> {
    if s2 <= 0.0 {
        return Ok(DimBranch::Drift { offset: b * dt });
    }
    let delta = num::sqrt(3.0 * s2 * dt);
    let tilt = b * num::sqrt(dt / (12.0 * s2));
    let pu = 1.0 / 6.0 + tilt;
    let pd = 1.0 / 6.0 - tilt;
    if pd < 0.0 || pu < 0.0 {
        // need |b| sqrt(dt / 12 s^2) <= 1/6, i.e. dt <= 3 s^2 / b^2... solve for steps
        let dt_max = s2 / (3.0 * b * b);
        let suggested = (horizon / dt_max) as usize + 1;
        return Err(OracleError::ProbabilityOutOfRange {
            dim: dim + 1,
            prob: if pd < 0.0 { pd } else { pu },
            suggested_steps: suggested,
        });
    }
    Ok(DimBranch::Trinomial { delta, probs: [pd, 2.0 / 3.0, pu] })
}

/// Build the lattice/tree for a problem's diffusion.
///
/// Constant coefficients produce a recombining lattice (level `s` has
/// `2s + 1` nodes per stochastic dimension); state-dependent coefficients
/// grow a general tree subject to `opts.node_cap`. A local-moment
/// consistency check runs on sampled nodes before the model is returned.
pub fn build_tree(
    problem: &ProblemSpec,
    x0: &[f64],
    steps: usize,
    opts: &TreeOptions,
) -> Result<TreeModel, OracleError> {
    let k = problem.dim_k();
    if x0.len() != k {
        return Err(OracleError::BadDimension { expected: k, got: x0.len() });
    }
    let dt = if steps > 0 { problem.horizon() / steps as f64 } else { problem.horizon() };
    let tree = if problem.coefficients_constant() {
        build_recombining(problem, x0, steps, dt)?
    } else {
        build_general(problem, x0, steps, dt, opts.node_cap)?
    };
    verify_local_moments(problem, &tree)?;
    Ok(tree)
}

/// `sigma sigma^T` at a point, with the off-diagonal check.
fn covariance_at(
    problem: &ProblemSpec,
    env: &mut model::Env,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let k = problem.dim_k();
    let d = problem.dim_d();
    let mut sigma = vec![0.0; k * d];
    for c in 0..k {
        for r in 0..d {
            sigma[c * d + r] = problem.eval_vol(env, t, x, c + 1, r + 1)?;
        }
    }
    let mut a = vec![0.0; k * k];
    for c in 0..k {
        for e in 0..k {
            let mut s = 0.0;
            for r in 0..d {
                s += sigma[c * d + r] * sigma[e * d + r];
            }
            a[c * k + e] = s;
        }
    }
    for c in 0..k {
        for e in 0..k {
            if c != e && num::abs(a[c * k + e]) > 1e-12 {
                return Err(OracleError::CrossCovariance { dims: (c + 1, e + 1), value: a[c * k + e] });
            }
        }
    }
    Ok(a)
}

fn build_recombining(problem: &ProblemSpec, x0: &[f64], steps: usize, dt: f64) -> Result<TreeModel, OracleError> {
    let k = problem.dim_k();
    let mut env = problem.new_env();
    let a = covariance_at(problem, &mut env, 0.0, x0)?;
    let mut branches = Vec::with_capacity(k);
    for c in 0..k {
        let b = problem.eval_drift(&mut env, 0.0, x0, c + 1)?;
        branches.push(dim_branch(b, a[c * k + c], dt, problem.horizon(), c)?);
    }
    let tri_dims: Vec<usize> = (0..k)
        .filter(|&c| matches!(branches[c], DimBranch::Trinomial { .. }))
        .collect();

    let mut levels = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let width = 2 * s + 1;
        let n_nodes = width.pow(tri_dims.len() as u32);
        let mut coords = vec![0.0; n_nodes * k];
        for node in 0..n_nodes {
            // decode per-dimension index in [-s, s] for stochastic dims
            let mut rem = node;
            let mut idx = vec![0i64; tri_dims.len()];
            for q in (0..tri_dims.len()).rev() {
                idx[q] = (rem % width) as i64 - s as i64;
                rem /= width;
            }
            for c in 0..k {
                coords[node * k + c] = match &branches[c] {
                    DimBranch::Drift { offset } => x0[c] + s as f64 * offset,
                    DimBranch::Trinomial { delta, .. } => {
                        let q = tri_dims.iter().position(|&d| d == c).unwrap();
                        x0[c] + idx[q] as f64 * delta
                    }
                };
            }
        }

        let (offsets, children, probs) = if s < steps {
            let next_width = width + 2;
            let n_branches = 3usize.pow(tri_dims.len() as u32);
            let mut offsets = Vec::with_capacity(n_nodes + 1);
            let mut children = Vec::with_capacity(n_nodes * n_branches);
            let mut probs_v = Vec::with_capacity(n_nodes * n_branches);
            offsets.push(0);
            for node in 0..n_nodes {
                let mut rem = node;
                let mut idx = vec![0i64; tri_dims.len()];
                for q in (0..tri_dims.len()).rev() {
                    idx[q] = (rem % width) as i64 - s as i64;
                    rem /= width;
                }
                for branch in 0..n_branches {
                    let mut child = 0usize;
                    let mut p = 1.0;
                    let mut rem_b = branch;
                    for q in 0..tri_dims.len() {
                        let mv = (rem_b % 3) as i64 - 1; // -1, 0, +1
                        rem_b /= 3;
                        let DimBranch::Trinomial { probs: pr, .. } = &branches[tri_dims[q]] else {
                            unreachable!()
                        };
                        p *= pr[(mv + 1) as usize];
                        let child_idx = idx[q] + mv + (s as i64 + 1); // shift into [0, next_width)
                        child = child * next_width + child_idx as usize;
                    }
                    children.push(child as u32);
                    probs_v.push(p);
                }
                offsets.push(children.len());
            }
            (offsets, children, probs_v)
        } else {
            (vec![0; n_nodes + 1], Vec::new(), Vec::new())
        };

        levels.push(TreeLevel { coords, offsets, children, probs });
    }
    Ok(TreeModel { steps, dt, x0: x0.to_vec(), dim_k: k, recombining: true, levels })
}

fn build_general(
    problem: &ProblemSpec,
    x0: &[f64],
    steps: usize,
    dt: f64,
    node_cap: usize,
) -> Result<TreeModel, OracleError> {
    let k = problem.dim_k();
    let mut env = problem.new_env();
    let mut levels: Vec<TreeLevel> = Vec::with_capacity(steps + 1);
    let mut current: Vec<f64> = x0.to_vec(); // coords of the current level
    let mut total = 1usize;
    for s in 0..=steps {
        let n_nodes = current.len() / k;
        let t = s as f64 * dt;
        if s == steps {
            levels.push(TreeLevel {
                coords: current.clone(),
                offsets: vec![0; n_nodes + 1],
                children: Vec::new(),
                probs: Vec::new(),
            });
            break;
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut children = Vec::new();
        let mut probs_v = Vec::new();
        let mut next_coords: Vec<f64> = Vec::new();
        offsets.push(0);
        for node in 0..n_nodes {
            let x = current[node * k..(node + 1) * k].to_vec();
            let a = covariance_at(problem, &mut env, t, &x)?;
            let mut branches = Vec::with_capacity(k);
            for c in 0..k {
                let b = problem.eval_drift(&mut env, t, &x, c + 1)?;
                branches.push(dim_branch(b, a[c * k + c], dt, problem.horizon(), c)?);
            }
            let moves_per_dim: Vec<usize> =
                branches.iter().map(|b| if matches!(b, DimBranch::Trinomial { .. }) { 3 } else { 1 }).collect();
            let n_branches: usize = moves_per_dim.iter().product();
            for branch in 0..n_branches {
                let mut rem_b = branch;
                let mut p = 1.0;
                let mut child_x = vec![0.0; k];
                for c in 0..k {
                    match &branches[c] {
                        DimBranch::Drift { offset } => child_x[c] = x[c] + offset,
                        DimBranch::Trinomial { delta, probs: pr } => {
                            let mv = (rem_b % 3) as i64 - 1;
                            rem_b /= 3;
                            p *= pr[(mv + 1) as usize];
                            child_x[c] = x[c] + mv as f64 * delta;
                        }
                    }
                }
                let child_index = next_coords.len() / k;
                next_coords.extend_from_slice(&child_x);
                children.push(child_index as u32);
                probs_v.push(p);
            }
            offsets.push(children.len());
        }
        total += next_coords.len() / k;
        if total > node_cap {
            return Err(OracleError::NodeCapExceeded { needed: total, cap: node_cap });
        }
        levels.push(TreeLevel { coords: current.clone(), offsets, children, probs: probs_v });
        current = next_coords;
    }
    Ok(TreeModel { steps, dt, x0: x0.to_vec(), dim_k: k, recombining: false, levels })
}

/// First/second local moment check at sampled nodes: `E[dX] = b dt` exactly
/// and `E[dX dX^T]_cc = a_cc dt + (b_c dt)^2` up to `O(dt^2)` round-off.
fn verify_local_moments(problem: &ProblemSpec, tree: &TreeModel) -> Result<(), OracleError> {
    let k = tree.dim_k;
    let mut env = problem.new_env();
    for s in (0..tree.steps).step_by((tree.steps / 4).max(1)) {
        let level = &tree.levels[s];
        let n_nodes = tree.level_nodes(s);
        let t = s as f64 * tree.dt;
        for node in (0..n_nodes).step_by((n_nodes / 8).max(1)) {
            let x = tree.coord(s, node);
            let a = covariance_at(problem, &mut env, t, x)?;
            for c in 0..k {
                let b = problem.eval_drift(&mut env, t, x, c + 1)?;
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for br in level.offsets[node]..level.offsets[node + 1] {
                    let child = level.children[br] as usize;
                    let dx = tree.coord(s + 1, child)[c] - x[c];
                    m1 += level.probs[br] * dx;
                    m2 += level.probs[br] * dx * dx;
                }
                let scale = 1.0 + num::abs(b * tree.dt) + a[c * k + c] * tree.dt;
                let e1 = num::abs(m1 - b * tree.dt);
                // the raw second moment is matched exactly; the variance is
                // then off by (b dt)^2, the promised O(dt^2) allowance
                let e2 = num::abs(m2 - a[c * k + c] * tree.dt);
                let allowance = b * tree.dt * b * tree.dt + 1e-9 * scale;
                if e1 > 1e-9 * scale || e2 > allowance {
                    return Err(OracleError::MomentMismatch { dim: c + 1, error: e1.max(e2) });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Switching game backward induction
// ---------------------------------------------------------------------------

/// Root values of the interconnected switching game, one per mode pair in
/// lexicographic order.
#[derive(Debug, Clone)]
pub struct GameValues {
    pub root: Vec<f64>,
    /// Largest number of nodal sweeps needed anywhere.
    pub max_sweeps: usize,
}

/// Discrete dynamic programming for the interconnected system (terminal
/// `v = h`, then the min-first nodal fixed point at every node backward).
/// The caller is expected to have validated the no-free-loop property.
pub fn switching_game_value(
    tree: &TreeModel,
    problem: &ProblemSpec,
    cfg: &GameConfig,
) -> Result<GameValues, OracleError> {
    let modes = problem.modes();
    let lambda = modes.lambda();
    let d = problem.dim_d();
    let c1 = modes.count1();
    let c2 = modes.count2();
    let mut env = problem.new_env();

    if matches!(cfg.z_mode, ZMode::CovarianceEstimate) && !problem.coefficients_constant() {
        return Err(OracleError::Eval(EvalError::NonFinite { op: "z estimate requires constant sigma" }));
    }

    // terminal level
    let n_term = tree.level_nodes(tree.steps);
    let mut values = vec![0.0; lambda * n_term];
    for node in 0..n_term {
        let x = tree.coord(tree.steps, node);
        for (pair, (i, j)) in modes.pairs().enumerate() {
            values[pair * n_term + node] = problem.eval_terminal(&mut env, x, i, j)?;
        }
    }

    let max_sweep_cap = (lambda * lambda).max(4);
    let mut max_sweeps = 0usize;
    let mut costs_lo = vec![0.0; c1 * c1];
    let mut costs_up = vec![0.0; c2 * c2];
    let mut ybuf = vec![0.0; lambda];
    let mut zbuf = vec![0.0; d.max(1)];
    let mut exp = vec![0.0; lambda];

    for s in (0..tree.steps).rev() {
        let level = &tree.levels[s];
        let n_nodes = tree.level_nodes(s);
        let n_next = tree.level_nodes(s + 1);
        let t = s as f64 * tree.dt;
        let mut new_values = vec![0.0; lambda * n_nodes];
        for node in 0..n_nodes {
            let x = tree.coord(s, node);
            problem.cost_tables(&mut env, t, x, &mut costs_lo, &mut costs_up)?;
            // conditional expectations per pair
            for pair in 0..lambda {
                let mut e = 0.0;
                for br in level.offsets[node]..level.offsets[node + 1] {
                    e += level.probs[br] * values[pair * n_next + level.children[br] as usize];
                }
                exp[pair] = e;
            }
            // nodal fixed point over pairs
            for pair in 0..lambda {
                ybuf[pair] = exp[pair];
            }
            let mut sweeps = 0usize;
            loop {
                // symmetric sweep: mode pairs in lexicographic order, then
                // in reverse, so each iteration is one deterministic map
                let mut defect: f64 = 0.0;
                for visit in 0..2 * lambda {
                    let pair = if visit < lambda { visit } else { 2 * lambda - 1 - visit };
                    let (i, j) = modes.pair_at(pair);
                    let lhat = model::obstacle_lower_from_costs(modes, &ybuf, i, j, &costs_lo, 1.0);
                    let uhat = model::obstacle_upper_from_costs(modes, &ybuf, i, j, &costs_up, 1.0);
                    if matches!(cfg.z_mode, ZMode::CovarianceEstimate) {
                        estimate_z(tree, s, node, pair, &values, problem, &mut env, &mut zbuf)?;
                    } else {
                        zbuf.iter_mut().for_each(|z| *z = 0.0);
                    }
                    let f_val = problem.eval_gen(&mut env, t, x, &ybuf, &zbuf[..d], i, j)?;
                    let continuation = exp[pair] + f_val * tree.dt;
                    let new = match cfg.nodal {
                        NodalUpdate::Projected => lhat.max(uhat.min(continuation)),
                        NodalUpdate::Penalized { n, m } => stepper::solve_piecewise(
                            1.0,
                            continuation,
                            tree.dt * n,
                            tree.dt * m,
                            lhat,
                            uhat,
                        ),
                    };
                    defect = defect.max(num::abs(new - ybuf[pair]));
                    ybuf[pair] = new;
                }
                sweeps += 1;
                if defect <= cfg.fixed_point_tol {
                    break;
                }
                if sweeps >= max_sweep_cap {
                    return Err(OracleError::NodalFixedPoint { level: s, node, defect });
                }
            }
            max_sweeps = max_sweeps.max(sweeps);
            for pair in 0..lambda {
                new_values[pair * n_nodes + node] = ybuf[pair];
            }
        }
        values = new_values;
    }
    Ok(GameValues { root: values, max_sweeps })
}

/// Regression estimate of `z = sigma^T Dx v` from the branch covariance:
/// `Dx v ~ Cov(v_next, dX_c) / Var(dX_c)` per dimension.
#[allow(clippy::too_many_arguments)]
fn estimate_z(
    tree: &TreeModel,
    s: usize,
    node: usize,
    pair: usize,
    next_values: &[f64],
    problem: &ProblemSpec,
    env: &mut model::Env,
    out: &mut [f64],
) -> Result<(), OracleError> {
    let k = tree.dim_k;
    let d = problem.dim_d();
    let level = &tree.levels[s];
    let n_next = tree.level_nodes(s + 1);
    let x = tree.coord(s, node);
    let t = s as f64 * tree.dt;
    let mut grad = vec![0.0; k];
    for c in 0..k {
        let mut mean_v = 0.0;
        let mut mean_dx = 0.0;
        for br in level.offsets[node]..level.offsets[node + 1] {
            let child = level.children[br] as usize;
            mean_v += level.probs[br] * next_values[pair * n_next + child];
            mean_dx += level.probs[br] * (tree.coord(s + 1, child)[c] - x[c]);
        }
        let mut cov = 0.0;
        let mut var = 0.0;
        for br in level.offsets[node]..level.offsets[node + 1] {
            let child = level.children[br] as usize;
            let dv = next_values[pair * n_next + child] - mean_v;
            let dx = tree.coord(s + 1, child)[c] - x[c] - mean_dx;
            cov += level.probs[br] * dv * dx;
            var += level.probs[br] * dx * dx;
        }
        grad[c] = if var > 0.0 { cov / var } else { 0.0 };
    }
    for r in 0..d {
        let mut z = 0.0;
        for c in 0..k {
            let sigma_cr = problem.eval_vol(env, t, x, c + 1, r + 1)?;
            z += sigma_cr * grad[c];
        }
        out[r] = z;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scalar Dynkin game
// ---------------------------------------------------------------------------

fn compile_tx(expr: &Expression, k: usize, ctx: &'static str) -> Result<CompiledExpr, BindError> {
    CompiledExpr::compile(expr, ctx, |v| match v {
        Var::T => Some(0),
        Var::X(c) if c >= 1 && c <= k => Some(c),
        _ => None,
    })
}

/// Value at the tree root of the zero-sum Dynkin game with lower payoff `L`,
/// upper payoff `U`, running reward `g` and terminal reward `xi`:
/// the backward recursion `v = max(L, min(U, E[v_next] + g dt))`. Requires
/// `L <= U` at every node and `L(T, .) <= xi`.
pub fn dynkin_value(
    tree: &TreeModel,
    lower: &Expression,
    upper: &Expression,
    running: &Expression,
    terminal: &Expression,
) -> Result<f64, OracleError> {
    let k = tree.dim_k;
    let l = compile_tx(lower, k, "dynkin lower obstacle (t,x)")?;
    let u = compile_tx(upper, k, "dynkin upper obstacle (t,x)")?;
    let g = compile_tx(running, k, "dynkin running reward (t,x)")?;
    let xi = compile_tx(terminal, k, "dynkin terminal reward (x)")?;

    let mut env = vec![0.0; 1 + k];
    let eval_at = |e: &CompiledExpr, t: f64, x: &[f64], env: &mut Vec<f64>| -> Result<f64, OracleError> {
        env[0] = t;
        env[1..1 + k].copy_from_slice(x);
        Ok(e.eval(env)?)
    };

    // obstacle order precondition over all nodes
    for s in 0..=tree.steps {
        let t = s as f64 * tree.dt;
        for node in 0..tree.level_nodes(s) {
            let x = tree.coord(s, node);
            let lv = eval_at(&l, t, x, &mut env)?;
            let uv = eval_at(&u, t, x, &mut env)?;
            if lv > uv {
                return Err(OracleError::ObstacleOrder { level: s, node, lower: lv, upper: uv });
            }
        }
    }

    let horizon = tree.steps as f64 * tree.dt;
    let n_term = tree.level_nodes(tree.steps);
    let mut values = vec![0.0; n_term];
    for node in 0..n_term {
        let x = tree.coord(tree.steps, node);
        let xiv = eval_at(&xi, horizon, x, &mut env)?;
        let lv = eval_at(&l, horizon, x, &mut env)?;
        if lv > xiv {
            return Err(OracleError::ObstacleOrder { level: tree.steps, node, lower: lv, upper: xiv });
        }
        values[node] = xiv;
    }
    for s in (0..tree.steps).rev() {
        let level = &tree.levels[s];
        let t = s as f64 * tree.dt;
        let n_nodes = tree.level_nodes(s);
        let mut new_values = vec![0.0; n_nodes];
        for node in 0..n_nodes {
            let x = tree.coord(s, node);
            let mut e = 0.0;
            for br in level.offsets[node]..level.offsets[node + 1] {
                e += level.probs[br] * values[level.children[br] as usize];
            }
            let lv = eval_at(&l, t, x, &mut env)?;
            let uv = eval_at(&u, t, x, &mut env)?;
            let gv = eval_at(&g, t, x, &mut env)?;
            new_values[node] = lv.max(uv.min(e + gv * tree.dt));
        }
        values = new_values;
    }
    Ok(values[0])
}
