//! Problem definition and the standing assumptions.
//!
//! A [`ProblemSpec`] holds the full game data: the two mode sets, the
//! diffusion coefficients `b`, `sigma`, the generators `f^{ij}`, the
//! switching costs `g_lower_{ik}`, `g_upper_{jl}` and the terminal data
//! `h^{ij}`. It exposes the interconnected obstacle operators
//!
//! ```text
//! L^{ij}[v](t,x) = max_{k != i} (v^{kj} - g_lower_{ik}(t,x))
//! U^{ij}[v](t,x) = min_{l != j} (v^{il} + g_upper_{jl}(t,x))
//! ```
//!
//! and the penalized generators
//!
//! ```text
//! f^{ij,n,m} = f^{ij} + n (y^{ij} - L^{ij}[y])^-  -  m (y^{ij} - U^{ij}[y])^+
//! ```
//!
//! together with the one-sided variants that drop one of the two terms.
//!
//! Validators check, at sampled points, the terminal-consistency condition,
//! non-negativity of the costs, and the no-free-loop property (every
//! admissible loop of switches has non-zero signed cost, plus the simple
//! cycle conditions for each player separately). These are sampled checks on
//! the solver grid, not global proofs; Lipschitz/growth assumptions are only
//! estimated by finite differences and reported as warnings, never failures.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exprlang::{self, BindError, CompiledExpr, EvalError, Expression, Var};
use crate::grid::Grid;
use crate::num;

/// Numeric zero for the sampled assumption checks.
pub const ASSUMPTION_TOL: f64 = 1e-12;

/// Lower-obstacle sentinel when player 1 has a single mode.
pub const NO_LOWER: f64 = f64::NEG_INFINITY;
/// Upper-obstacle sentinel when player 2 has a single mode.
pub const NO_UPPER: f64 = f64::INFINITY;

// ---------------------------------------------------------------------------
// Mode space
// ---------------------------------------------------------------------------

/// The two players' mode sets. Mode indices are 1-based pairs `(i,j)` with
/// `i` in `1..=count1`, `j` in `1..=count2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpace {
    count1: usize,
    count2: usize,
}

impl ModeSpace {
    pub fn new(count1: usize, count2: usize) -> Result<Self, ModelError> {
        if count1 < 1 || count2 < 1 {
            return Err(ModelError::Shape("each player needs at least one mode"));
        }
        Ok(ModeSpace { count1, count2 })
    }

    pub fn count1(&self) -> usize {
        self.count1
    }

    pub fn count2(&self) -> usize {
        self.count2
    }

    /// Total number of mode pairs.
    pub fn lambda(&self) -> usize {
        self.count1 * self.count2
    }

    /// Lexicographic index of the pair `(i,j)`, 1-based input.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= 1 && i <= self.count1 && j >= 1 && j <= self.count2);
        (i - 1) * self.count2 + (j - 1)
    }

    /// Inverse of [`ModeSpace::pair_index`].
    pub fn pair_at(&self, index: usize) -> (usize, usize) {
        (index / self.count2 + 1, index % self.count2 + 1)
    }

    /// All pairs in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.count1).flat_map(move |i| (1..=self.count2).map(move |j| (i, j)))
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Shape(&'static str),
    NonZeroDiagonalCost { player: u8, index: usize },
    Bind(BindError),
    BadHorizon(f64),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Shape(what) => write!(f, "malformed problem: {what}"),
            ModelError::NonZeroDiagonalCost { player, index } => write!(
                f,
                "diagonal switching cost for player {player}, mode {index} must be the constant 0"
            ),
            ModelError::Bind(b) => write!(f, "{b}"),
            ModelError::BadHorizon(t) => write!(f, "horizon must be positive, got {t}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<BindError> for ModelError {
    fn from(b: BindError) -> Self {
        ModelError::Bind(b)
    }
}

// ---------------------------------------------------------------------------
// Problem specification
// ---------------------------------------------------------------------------

/// Raw ingredients for a [`ProblemSpec`].
///
/// Matrices are row-major: `vol[c][r]` is the `(c,r)` entry of the `k x d`
/// volatility, `cost_lower[i-1][k-1]` is `g_lower_{ik}`, and the per-pair
/// vectors (`gen`, `terminal`) are in lexicographic `(i,j)` order. The
/// diagonals of both cost matrices must be the literal constant `0`.
#[derive(Debug, Clone)]
pub struct ProblemParts {
    pub modes: ModeSpace,
    pub dim_k: usize,
    pub dim_d: usize,
    pub horizon: f64,
    pub drift: Vec<Expression>,
    pub vol: Vec<Vec<Expression>>,
    pub gen: Vec<Expression>,
    pub cost_lower: Vec<Vec<Expression>>,
    pub cost_upper: Vec<Vec<Expression>>,
    pub terminal: Vec<Expression>,
}

/// A coefficient expression together with its slot-compiled form.
#[derive(Debug, Clone)]
struct Coeff {
    raw: Expression,
    compiled: CompiledExpr,
}

/// The complete, validated problem definition.
///
/// Immutable after construction; all evaluation entry points are reentrant
/// and safe to call concurrently.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    modes: ModeSpace,
    dim_k: usize,
    dim_d: usize,
    horizon: f64,
    drift: Vec<Coeff>,
    vol: Vec<Coeff>,        // k*d, row-major
    gen: Vec<Coeff>,        // lambda
    cost_lower: Vec<Coeff>, // count1*count1, row-major
    cost_upper: Vec<Coeff>, // count2*count2
    terminal: Vec<Coeff>,   // lambda
}

/// Environment layout: `[t, x1..xk, y_(1,1)..y_(c1,c2), z1..zd]`.
#[derive(Debug, Clone, Copy)]
pub struct EnvLayout {
    pub dim_k: usize,
    pub dim_d: usize,
    pub modes: ModeSpace,
}

impl EnvLayout {
    pub fn len(&self) -> usize {
        1 + self.dim_k + self.modes.lambda() + self.dim_d
    }

    pub fn t_slot(&self) -> usize {
        0
    }

    pub fn x_slot(&self, c: usize) -> usize {
        c // 1-based c maps to slot c
    }

    pub fn y_slot(&self, i: usize, j: usize) -> usize {
        1 + self.dim_k + self.modes.pair_index(i, j)
    }

    pub fn y_base(&self) -> usize {
        1 + self.dim_k
    }

    pub fn z_base(&self) -> usize {
        1 + self.dim_k + self.modes.lambda()
    }

    fn slot(&self, var: Var, allow: VarClasses) -> Option<usize> {
        match var {
            Var::T if allow.t => Some(self.t_slot()),
            Var::X(c) if allow.x && c >= 1 && c <= self.dim_k => Some(self.x_slot(c)),
            Var::Y(i, j)
                if allow.y && i >= 1 && i <= self.modes.count1() && j >= 1 && j <= self.modes.count2() =>
            {
                Some(self.y_slot(i, j))
            }
            Var::Z(r) if allow.z && r >= 1 && r <= self.dim_d => Some(self.z_base() + r - 1),
            _ => None,
        }
    }
}

#[derive(Clone, Copy)]
struct VarClasses {
    t: bool,
    x: bool,
    y: bool,
    z: bool,
}

const TX_ONLY: VarClasses = VarClasses { t: true, x: true, y: false, z: false };
const X_ONLY: VarClasses = VarClasses { t: false, x: true, y: false, z: false };
const ALL: VarClasses = VarClasses { t: true, x: true, y: true, z: true };

/// Scratch evaluation buffer laid out per [`EnvLayout`].
#[derive(Debug, Clone)]
pub struct Env {
    buf: Vec<f64>,
    layout: EnvLayout,
}

impl Env {
    pub fn set_t(&mut self, t: f64) {
        self.buf[0] = t;
    }

    pub fn set_x(&mut self, x: &[f64]) {
        self.buf[1..1 + self.layout.dim_k].copy_from_slice(x);
    }

    pub fn set_y(&mut self, ybar: &[f64]) {
        let base = self.layout.y_base();
        self.buf[base..base + self.layout.modes.lambda()].copy_from_slice(ybar);
    }

    pub fn set_y_component(&mut self, pair: usize, value: f64) {
        self.buf[self.layout.y_base() + pair] = value;
    }

    pub fn set_z(&mut self, z: &[f64]) {
        let base = self.layout.z_base();
        self.buf[base..base + self.layout.dim_d].copy_from_slice(z);
    }
}

fn is_zero_literal(e: &Expression) -> bool {
    matches!(e.root(), exprlang::Node::Number(v) if *v == 0.0)
}

impl ProblemSpec {
    pub fn new(parts: ProblemParts) -> Result<Self, ModelError> {
        let ProblemParts { modes, dim_k, dim_d, horizon, drift, vol, gen, cost_lower, cost_upper, terminal } =
            parts;
        if dim_k < 1 {
            return Err(ModelError::Shape("state dimension k must be at least 1"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ModelError::BadHorizon(horizon));
        }
        if drift.len() != dim_k {
            return Err(ModelError::Shape("drift must have k components"));
        }
        if vol.len() != dim_k || vol.iter().any(|row| row.len() != dim_d) {
            return Err(ModelError::Shape("volatility must be a k x d matrix"));
        }
        let lambda = modes.lambda();
        if gen.len() != lambda {
            return Err(ModelError::Shape("one generator per mode pair is required"));
        }
        if terminal.len() != lambda {
            return Err(ModelError::Shape("one terminal function per mode pair is required"));
        }
        if cost_lower.len() != modes.count1() || cost_lower.iter().any(|r| r.len() != modes.count1()) {
            return Err(ModelError::Shape("lower cost matrix must be count1 x count1"));
        }
        if cost_upper.len() != modes.count2() || cost_upper.iter().any(|r| r.len() != modes.count2()) {
            return Err(ModelError::Shape("upper cost matrix must be count2 x count2"));
        }
        for (i, row) in cost_lower.iter().enumerate() {
            if !is_zero_literal(&row[i]) {
                return Err(ModelError::NonZeroDiagonalCost { player: 1, index: i + 1 });
            }
        }
        for (j, row) in cost_upper.iter().enumerate() {
            if !is_zero_literal(&row[j]) {
                return Err(ModelError::NonZeroDiagonalCost { player: 2, index: j + 1 });
            }
        }

        let layout = EnvLayout { dim_k, dim_d, modes };
        let compile = |e: &Expression, ctx: &'static str, allow: VarClasses| -> Result<Coeff, ModelError> {
            let compiled = CompiledExpr::compile(e, ctx, |v| layout.slot(v, allow))?;
            Ok(Coeff { raw: e.clone(), compiled })
        };

        let drift = drift.iter().map(|e| compile(e, "drift b (t,x)", TX_ONLY)).collect::<Result<_, _>>()?;
        let vol = vol
            .iter()
            .flat_map(|row| row.iter())
            .map(|e| compile(e, "volatility sigma (t,x)", TX_ONLY))
            .collect::<Result<_, _>>()?;
        let gen = gen.iter().map(|e| compile(e, "generator f (t,x,y,z)", ALL)).collect::<Result<_, _>>()?;
        let cost_lower = cost_lower
            .iter()
            .flat_map(|row| row.iter())
            .map(|e| compile(e, "lower switching cost (t,x)", TX_ONLY))
            .collect::<Result<_, _>>()?;
        let cost_upper = cost_upper
            .iter()
            .flat_map(|row| row.iter())
            .map(|e| compile(e, "upper switching cost (t,x)", TX_ONLY))
            .collect::<Result<_, _>>()?;
        let terminal =
            terminal.iter().map(|e| compile(e, "terminal h (x)", X_ONLY)).collect::<Result<_, _>>()?;

        Ok(ProblemSpec {
            modes,
            dim_k,
            dim_d,
            horizon,
            drift,
            vol,
            gen,
            cost_lower,
            cost_upper,
            terminal,
        })
    }

    pub fn modes(&self) -> ModeSpace {
        self.modes
    }

    pub fn dim_k(&self) -> usize {
        self.dim_k
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn layout(&self) -> EnvLayout {
        EnvLayout { dim_k: self.dim_k, dim_d: self.dim_d, modes: self.modes }
    }

    pub fn new_env(&self) -> Env {
        let layout = self.layout();
        Env { buf: vec![0.0; layout.len()], layout }
    }

    /// Raw generator expression of the pair `(i,j)` (1-based).
    pub fn gen_expr(&self, i: usize, j: usize) -> &Expression {
        &self.gen[self.modes.pair_index(i, j)].raw
    }

    /// Raw drift/volatility expressions (used to detect constant coefficients).
    pub fn drift_expr(&self, c: usize) -> &Expression {
        &self.drift[c - 1].raw
    }

    pub fn vol_expr(&self, c: usize, r: usize) -> &Expression {
        &self.vol[(c - 1) * self.dim_d + (r - 1)].raw
    }

    /// True when no generator references a gradient component `z*`.
    pub fn generators_z_independent(&self) -> bool {
        self.gen.iter().all(|c| {
            exprlang::free_var_refs(&c.raw).iter().all(|v| !matches!(v, Var::Z(_)))
        })
    }

    /// True when `b` and `sigma` reference neither `t` nor `x`.
    pub fn coefficients_constant(&self) -> bool {
        self.drift
            .iter()
            .chain(self.vol.iter())
            .all(|c| exprlang::free_var_refs(&c.raw).is_empty())
    }

    // -- evaluation ---------------------------------------------------------

    pub fn eval_drift(&self, env: &mut Env, t: f64, x: &[f64], c: usize) -> Result<f64, EvalError> {
        env.set_t(t);
        env.set_x(x);
        self.drift[c - 1].compiled.eval(&env.buf)
    }

    pub fn eval_vol(&self, env: &mut Env, t: f64, x: &[f64], c: usize, r: usize) -> Result<f64, EvalError> {
        env.set_t(t);
        env.set_x(x);
        self.vol[(c - 1) * self.dim_d + (r - 1)].compiled.eval(&env.buf)
    }

    pub fn eval_cost_lower(&self, env: &mut Env, t: f64, x: &[f64], i: usize, k: usize) -> Result<f64, EvalError> {
        env.set_t(t);
        env.set_x(x);
        self.cost_lower[(i - 1) * self.modes.count1() + (k - 1)].compiled.eval(&env.buf)
    }

    pub fn eval_cost_upper(&self, env: &mut Env, t: f64, x: &[f64], j: usize, l: usize) -> Result<f64, EvalError> {
        env.set_t(t);
        env.set_x(x);
        self.cost_upper[(j - 1) * self.modes.count2() + (l - 1)].compiled.eval(&env.buf)
    }

    pub fn eval_terminal(&self, env: &mut Env, x: &[f64], i: usize, j: usize) -> Result<f64, EvalError> {
        env.set_x(x);
        self.terminal[self.modes.pair_index(i, j)].compiled.eval(&env.buf)
    }

    /// Plain generator `f^{ij}(t, x, ybar, z)`.
    pub fn eval_gen(
        &self,
        env: &mut Env,
        t: f64,
        x: &[f64],
        ybar: &[f64],
        z: &[f64],
        i: usize,
        j: usize,
    ) -> Result<f64, EvalError> {
        env.set_t(t);
        env.set_x(x);
        env.set_y(ybar);
        env.set_z(z);
        self.gen[self.modes.pair_index(i, j)].compiled.eval(&env.buf)
    }

    /// Fill `out` (length count1*count1, row-major) with the lower cost
    /// matrix at `(t,x)`; same for the upper matrix.
    pub fn cost_tables(
        &self,
        env: &mut Env,
        t: f64,
        x: &[f64],
        lower_out: &mut [f64],
        upper_out: &mut [f64],
    ) -> Result<(), EvalError> {
        env.set_t(t);
        env.set_x(x);
        for (slot, coeff) in lower_out.iter_mut().zip(self.cost_lower.iter()) {
            *slot = coeff.compiled.eval(&env.buf)?;
        }
        for (slot, coeff) in upper_out.iter_mut().zip(self.cost_upper.iter()) {
            *slot = coeff.compiled.eval(&env.buf)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Obstacle operators
// ---------------------------------------------------------------------------

/// Value of an obstacle operator together with the recorded argmax/argmin
/// mode (ties break to the smallest index; `None` when the player has a
/// single mode and the sentinel applies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub value: f64,
    pub arg: Option<usize>,
}

/// `L^{ij}[v](t,x) = max_{k != i} (v^{kj} - g_lower_{ik}(t,x))`.
///
/// `values` holds the lambda components in lexicographic pair order. Returns
/// the `-inf` sentinel when player 1 has a single mode.
pub fn obstacle_lower(
    problem: &ProblemSpec,
    env: &mut Env,
    values: &[f64],
    i: usize,
    j: usize,
    t: f64,
    x: &[f64],
) -> Result<Obstacle, EvalError> {
    let modes = problem.modes();
    let mut best = Obstacle { value: NO_LOWER, arg: None };
    for k in 1..=modes.count1() {
        if k == i {
            continue;
        }
        let cost = problem.eval_cost_lower(env, t, x, i, k)?;
        let cand = values[modes.pair_index(k, j)] - cost;
        if best.arg.is_none() || cand > best.value {
            best = Obstacle { value: cand, arg: Some(k) };
        }
    }
    Ok(best)
}

/// `U^{ij}[v](t,x) = min_{l != j} (v^{il} + g_upper_{jl}(t,x))`.
pub fn obstacle_upper(
    problem: &ProblemSpec,
    env: &mut Env,
    values: &[f64],
    i: usize,
    j: usize,
    t: f64,
    x: &[f64],
) -> Result<Obstacle, EvalError> {
    let modes = problem.modes();
    let mut best = Obstacle { value: NO_UPPER, arg: None };
    for l in 1..=modes.count2() {
        if l == j {
            continue;
        }
        let cost = problem.eval_cost_upper(env, t, x, j, l)?;
        let cand = values[modes.pair_index(i, l)] + cost;
        if best.arg.is_none() || cand < best.value {
            best = Obstacle { value: cand, arg: Some(l) };
        }
    }
    Ok(best)
}

/// Lower obstacle from a precomputed cost table (`count1 x count1`,
/// row-major), optionally scaled; the solvers' hot path.
pub(crate) fn obstacle_lower_from_costs(
    modes: ModeSpace,
    values: &[f64],
    i: usize,
    j: usize,
    costs_lower: &[f64],
    cost_scale: f64,
) -> f64 {
    let mut best = NO_LOWER;
    let mut found = false;
    for k in 1..=modes.count1() {
        if k == i {
            continue;
        }
        let cand = values[modes.pair_index(k, j)] - cost_scale * costs_lower[(i - 1) * modes.count1() + (k - 1)];
        if !found || cand > best {
            best = cand;
            found = true;
        }
    }
    best
}

pub(crate) fn obstacle_upper_from_costs(
    modes: ModeSpace,
    values: &[f64],
    i: usize,
    j: usize,
    costs_upper: &[f64],
    cost_scale: f64,
) -> f64 {
    let mut best = NO_UPPER;
    let mut found = false;
    for l in 1..=modes.count2() {
        if l == j {
            continue;
        }
        let cand = values[modes.pair_index(i, l)] + cost_scale * costs_upper[(j - 1) * modes.count2() + (l - 1)];
        if !found || cand < best {
            best = cand;
            found = true;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Penalized generators
// ---------------------------------------------------------------------------

/// Which penalty terms the generator carries.
///
/// * `Doubly` — both terms: `f + n(y-L)^- - m(y-U)^+` (no hard reflection);
/// * `LowerOnly` — the family reflected on the lower obstacle: keep only the
///   upper penalty `-m(y-U)^+`;
/// * `UpperOnly` — reflected on the upper obstacle: keep only `+n(y-L)^-`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Doubly,
    LowerOnly,
    UpperOnly,
}

/// The penalized generator value at one point.
///
/// `ybar` plays the role of the solution vector in the obstacles. `n` is
/// ignored for `LowerOnly`, `m` for `UpperOnly`; with `n = m = 0` this is
/// exactly the plain generator.
#[allow(clippy::too_many_arguments)]
pub fn penalized_generator(
    problem: &ProblemSpec,
    env: &mut Env,
    kind: PenaltyKind,
    n: f64,
    m: f64,
    i: usize,
    j: usize,
    t: f64,
    x: &[f64],
    ybar: &[f64],
    z: &[f64],
) -> Result<f64, EvalError> {
    let own = ybar[problem.modes().pair_index(i, j)];
    let mut value = problem.eval_gen(env, t, x, ybar, z, i, j)?;
    if matches!(kind, PenaltyKind::Doubly | PenaltyKind::UpperOnly) {
        let lower = obstacle_lower(problem, env, ybar, i, j, t, x)?.value;
        value += n * num::neg(own - lower);
    }
    if matches!(kind, PenaltyKind::Doubly | PenaltyKind::LowerOnly) {
        let upper = obstacle_upper(problem, env, ybar, i, j, t, x)?.value;
        value -= m * num::pos(own - upper);
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalWitness {
    pub pair: (usize, usize),
    pub x: Vec<f64>,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

/// Terminal-consistency check: `L_term <= h^{ij} <= U_term` at every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCheck {
    pub ok: bool,
    pub worst_violation: f64,
    pub witness: Option<TerminalWitness>,
}

/// Checks `max_{k != i}(h^{kj} - g_lower_{ik}(T,x)) <= h^{ij}(x) <=
/// min_{l != j}(h^{il} + g_upper_{jl}(T,x))` over the sample points.
pub fn validate_terminal(problem: &ProblemSpec, samples: &[Vec<f64>]) -> Result<TerminalCheck, EvalError> {
    let modes = problem.modes();
    let mut env = problem.new_env();
    let t = problem.horizon();
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    let mut h = vec![0.0; modes.lambda()];
    for x in samples {
        for (idx, (i, j)) in modes.pairs().enumerate() {
            h[idx] = problem.eval_terminal(&mut env, x, i, j)?;
        }
        for (i, j) in modes.pairs() {
            let value = h[modes.pair_index(i, j)];
            let lower = obstacle_lower(problem, &mut env, &h, i, j, t, x)?.value;
            let upper = obstacle_upper(problem, &mut env, &h, i, j, t, x)?.value;
            let violation = num::pos(lower - value).max(num::pos(value - upper));
            if violation > worst {
                worst = violation;
                witness = Some(TerminalWitness { pair: (i, j), x: x.clone(), lower, value, upper });
            }
        }
    }
    let ok = !(worst > ASSUMPTION_TOL);
    Ok(TerminalCheck { ok, worst_violation: worst.max(0.0), witness: if ok { None } else { witness } })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopWitness {
    /// The closed sequence of pairs, first element repeated at the end.
    pub pairs: Vec<(usize, usize)>,
    pub t: f64,
    pub x: Vec<f64>,
    /// The signed cost sum along the loop (first sign convention; the second
    /// convention is its negative).
    pub sum: f64,
}

/// No-free-loop check over admissible loops of mode pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCheck {
    pub ok: bool,
    pub loops_checked: usize,
    pub witness: Option<LoopWitness>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleWitness {
    pub modes: Vec<usize>,
    pub t: f64,
    pub x: Vec<f64>,
    pub sum: f64,
}

/// Simple-cycle cost positivity for one player (the classical no-free-loop
/// conditions).
#[derive(Debug, Clone, PartialEq)]
pub struct CycleCheck {
    pub ok: bool,
    pub cycles_checked: usize,
    pub witness: Option<CycleWitness>,
}

/// All admissible loops: closed pair sequences with distinct interior pairs
/// in which consecutive pairs share a row or a column. Loops are enumerated
/// from their lexicographically smallest pair, in both directions (the costs
/// are directional).
fn enumerate_pair_loops(modes: ModeSpace) -> Vec<Vec<usize>> {
    let lambda = modes.lambda();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); lambda];
    for p in 0..lambda {
        let (i, j) = modes.pair_at(p);
        for q in 0..lambda {
            if q == p {
                continue;
            }
            let (a, b) = modes.pair_at(q);
            if a == i || b == j {
                neighbors[p].push(q);
            }
        }
    }
    let mut loops = Vec::new();
    let mut path = Vec::new();
    for start in 0..lambda {
        path.clear();
        path.push(start);
        dfs_loops(start, start, &neighbors, &mut path, &mut (1u64 << start), &mut loops);
    }
    loops
}

fn dfs_loops(
    start: usize,
    at: usize,
    neighbors: &[Vec<usize>],
    path: &mut Vec<usize>,
    visited: &mut u64,
    out: &mut Vec<Vec<usize>>,
) {
    for &next in &neighbors[at] {
        if next == start && path.len() >= 2 {
            let mut cycle = path.clone();
            cycle.push(start);
            out.push(cycle);
            continue;
        }
        // keep `start` the smallest pair of the loop so each cyclic class is
        // enumerated once per direction
        if next <= start || *visited & (1 << next) != 0 {
            continue;
        }
        *visited |= 1 << next;
        path.push(next);
        dfs_loops(start, next, neighbors, path, visited, out);
        path.pop();
        *visited &= !(1 << next);
    }
}

/// Evaluates the signed cost sum of (nonfreeloop) at every sample for every
/// admissible loop, and the per-player simple cycle sums. The second sign
/// convention of the loop sum is the negative of the first, so a single
/// magnitude test covers both.
pub fn validate_no_free_loop(
    problem: &ProblemSpec,
    samples: &[(f64, Vec<f64>)],
) -> Result<(LoopCheck, CycleCheck, CycleCheck), EvalError> {
    let modes = problem.modes();
    let loops = enumerate_pair_loops(modes);
    let cycles1 = enumerate_mode_cycles(modes.count1());
    let cycles2 = enumerate_mode_cycles(modes.count2());

    let mut env = problem.new_env();
    let mut lower = vec![0.0; modes.count1() * modes.count1()];
    let mut upper = vec![0.0; modes.count2() * modes.count2()];

    let mut loop_check = LoopCheck { ok: true, loops_checked: loops.len(), witness: None };
    let mut lp1 = CycleCheck { ok: true, cycles_checked: cycles1.len(), witness: None };
    let mut lp2 = CycleCheck { ok: true, cycles_checked: cycles2.len(), witness: None };

    for (t, x) in samples {
        problem.cost_tables(&mut env, *t, x, &mut lower, &mut upper)?;
        if loop_check.ok {
            for lp in &loops {
                let mut sum = 0.0;
                for w in lp.windows(2) {
                    let (i0, j0) = modes.pair_at(w[0]);
                    let (i1, j1) = modes.pair_at(w[1]);
                    if i1 != i0 {
                        sum -= lower[(i0 - 1) * modes.count1() + (i1 - 1)];
                    }
                    if j1 != j0 {
                        sum += upper[(j0 - 1) * modes.count2() + (j1 - 1)];
                    }
                }
                if num::abs(sum) <= ASSUMPTION_TOL {
                    loop_check.ok = false;
                    loop_check.witness = Some(LoopWitness {
                        pairs: lp.iter().map(|&p| modes.pair_at(p)).collect(),
                        t: *t,
                        x: x.clone(),
                        sum,
                    });
                    break;
                }
            }
        }
        check_cycles(&cycles1, &lower, modes.count1(), *t, x, &mut lp1);
        check_cycles(&cycles2, &upper, modes.count2(), *t, x, &mut lp2);
    }
    Ok((loop_check, lp1, lp2))
}

/// Simple cycles (length >= 2 distinct modes) in the complete directed graph
/// over one player's modes, each starting from its smallest member.
fn enumerate_mode_cycles(count: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = Vec::new();
    for start in 0..count {
        path.clear();
        path.push(start);
        dfs_mode_cycles(start, count, &mut path, &mut (1u64 << start), &mut out);
    }
    out
}

fn dfs_mode_cycles(start: usize, count: usize, path: &mut Vec<usize>, visited: &mut u64, out: &mut Vec<Vec<usize>>) {
    for next in 0..count {
        if next == path[path.len() - 1] {
            continue;
        }
        if next == start {
            if path.len() >= 2 {
                let mut cycle: Vec<usize> = path.iter().map(|&m| m + 1).collect();
                cycle.push(start + 1);
                out.push(cycle);
            }
            continue;
        }
        if next <= start || *visited & (1 << next) != 0 {
            continue;
        }
        *visited |= 1 << next;
        path.push(next);
        dfs_mode_cycles(start, count, path, visited, out);
        path.pop();
        *visited &= !(1 << next);
    }
}

fn check_cycles(cycles: &[Vec<usize>], costs: &[f64], count: usize, t: f64, x: &[f64], check: &mut CycleCheck) {
    if !check.ok {
        return;
    }
    for cy in cycles {
        let mut sum = 0.0;
        for w in cy.windows(2) {
            sum += costs[(w[0] - 1) * count + (w[1] - 1)];
        }
        if sum <= ASSUMPTION_TOL {
            check.ok = false;
            check.witness = Some(CycleWitness { modes: cy.clone(), t, x: x.to_vec(), sum });
            return;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostWitness {
    pub which: &'static str,
    pub entry: (usize, usize),
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCheck {
    pub ok: bool,
    pub witness: Option<CostWitness>,
}

/// Non-negativity of both cost families at the samples.
pub fn validate_cost_nonneg(problem: &ProblemSpec, samples: &[(f64, Vec<f64>)]) -> Result<CostCheck, EvalError> {
    let modes = problem.modes();
    let mut env = problem.new_env();
    let mut worst: Option<CostWitness> = None;
    for (t, x) in samples {
        for i in 1..=modes.count1() {
            for k in 1..=modes.count1() {
                if i == k {
                    continue;
                }
                let v = problem.eval_cost_lower(&mut env, *t, x, i, k)?;
                if v < -ASSUMPTION_TOL && worst.as_ref().map_or(true, |w| v < w.value) {
                    worst = Some(CostWitness { which: "g_lower", entry: (i, k), t: *t, x: x.clone(), value: v });
                }
            }
        }
        for j in 1..=modes.count2() {
            for l in 1..=modes.count2() {
                if j == l {
                    continue;
                }
                let v = problem.eval_cost_upper(&mut env, *t, x, j, l)?;
                if v < -ASSUMPTION_TOL && worst.as_ref().map_or(true, |w| v < w.value) {
                    worst = Some(CostWitness { which: "g_upper", entry: (j, l), t: *t, x: x.clone(), value: v });
                }
            }
        }
    }
    Ok(CostCheck { ok: worst.is_none(), witness: worst })
}

/// Finite-difference Lipschitz estimate, informational only.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub target: &'static str,
    pub estimate: f64,
    pub warning: bool,
}

const LIPSCHITZ_WARN: f64 = 1e6;

/// Crude sampled Lipschitz constants of `b`, `sigma` in `x` and of `f` in
/// `(y,z)`. Global verification is undecidable for user expressions; a large
/// estimate only produces a warning.
pub fn estimate_lipschitz(
    problem: &ProblemSpec,
    samples: &[(f64, Vec<f64>)],
) -> Result<Vec<LipschitzEstimate>, EvalError> {
    let modes = problem.modes();
    let mut env = problem.new_env();
    let step = 1e-4;
    let mut l_b: f64 = 0.0;
    let mut l_sigma: f64 = 0.0;
    let mut l_f: f64 = 0.0;
    let ybar = vec![0.0; modes.lambda()];
    let z = vec![0.0; problem.dim_d()];
    let mut xp = vec![0.0; problem.dim_k()];
    for (t, x) in samples.iter().take(64) {
        for c in 1..=problem.dim_k() {
            xp.copy_from_slice(x);
            xp[c - 1] += step;
            for e in 1..=problem.dim_k() {
                let d0 = problem.eval_drift(&mut env, *t, x, e)?;
                let d1 = problem.eval_drift(&mut env, *t, &xp, e)?;
                l_b = l_b.max(num::abs(d1 - d0) / step);
                for r in 1..=problem.dim_d() {
                    let s0 = problem.eval_vol(&mut env, *t, x, e, r)?;
                    let s1 = problem.eval_vol(&mut env, *t, &xp, e, r)?;
                    l_sigma = l_sigma.max(num::abs(s1 - s0) / step);
                }
            }
        }
        for (i, j) in modes.pairs() {
            let f0 = problem.eval_gen(&mut env, *t, x, &ybar, &z, i, j)?;
            let mut yp = ybar.clone();
            for comp in 0..modes.lambda() {
                yp[comp] += step;
                let f1 = problem.eval_gen(&mut env, *t, x, &yp, &z, i, j)?;
                l_f = l_f.max(num::abs(f1 - f0) / step);
                yp[comp] -= step;
            }
            let mut zp = z.clone();
            for comp in 0..problem.dim_d() {
                zp[comp] += step;
                let f1 = problem.eval_gen(&mut env, *t, x, &ybar, &zp, i, j)?;
                l_f = l_f.max(num::abs(f1 - f0) / step);
                zp[comp] -= step;
            }
        }
    }
    Ok(vec![
        LipschitzEstimate { target: "b", estimate: l_b, warning: l_b > LIPSCHITZ_WARN },
        LipschitzEstimate { target: "sigma", estimate: l_sigma, warning: l_sigma > LIPSCHITZ_WARN },
        LipschitzEstimate { target: "f", estimate: l_f, warning: l_f > LIPSCHITZ_WARN },
    ])
}

/// Aggregated validator output. All flags true certifies the assumptions at
/// every sampled point only; this is a documented limitation, not a global
/// proof.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub terminal: TerminalCheck,
    pub no_free_loop: LoopCheck,
    pub cycle_lp1: CycleCheck,
    pub cycle_lp2: CycleCheck,
    pub cost_nonneg: CostCheck,
    pub lipschitz: Vec<LipschitzEstimate>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.terminal.ok && self.no_free_loop.ok && self.cycle_lp1.ok && self.cycle_lp2.ok && self.cost_nonneg.ok
    }

    pub fn failures(&self) -> Vec<String> {
        use alloc::string::ToString;
        let mut out = Vec::new();
        if !self.terminal.ok {
            out.push("terminal consistency (H3)".to_string());
        }
        if !self.no_free_loop.ok {
            out.push("no-free-loop (H4)".to_string());
        }
        if !self.cycle_lp1.ok {
            out.push("player-1 cycle positivity (lp1)".to_string());
        }
        if !self.cycle_lp2.ok {
            out.push("player-2 cycle positivity (lp2)".to_string());
        }
        if !self.cost_nonneg.ok {
            out.push("cost non-negativity (H4)".to_string());
        }
        out
    }
}

/// Run every validator on grid-derived samples (all nodes for the terminal
/// check, nodes x a handful of times for the (t,x) checks), plus optional
/// extra points.
pub fn validate_on_grid(
    problem: &ProblemSpec,
    grid: &Grid,
    extra_tx: &[(f64, Vec<f64>)],
) -> Result<ValidationReport, EvalError> {
    let xs = grid.sample_nodes(2048);
    let mut txs: Vec<(f64, Vec<f64>)> = Vec::new();
    let times = grid.sample_times(9, problem.horizon());
    let coarse: Vec<Vec<f64>> = grid.sample_nodes(256);
    for t in &times {
        for x in &coarse {
            txs.push((*t, x.clone()));
        }
    }
    txs.extend_from_slice(extra_tx);

    let terminal = validate_terminal(problem, &xs)?;
    let (no_free_loop, cycle_lp1, cycle_lp2) = validate_no_free_loop(problem, &txs)?;
    let cost_nonneg = validate_cost_nonneg(problem, &txs)?;
    let lipschitz = estimate_lipschitz(problem, &txs)?;
    Ok(ValidationReport { terminal, no_free_loop, cycle_lp1, cycle_lp2, cost_nonneg, lipschitz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use alloc::string::ToString;

    fn expr(s: &str) -> Expression {
        parse(s).unwrap()
    }

    /// 2x2 problem with constant costs and trivial dynamics, k = d = 1.
    pub(crate) fn two_by_two(
        f: [&str; 4],
        g_lower: [&str; 2],  // g_12, g_21
        g_upper: [&str; 2],  // g_12, g_21
        h: [&str; 4],
    ) -> ProblemSpec {
        let modes = ModeSpace::new(2, 2).unwrap();
        ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: f.iter().map(|s| expr(s)).collect(),
            cost_lower: vec![vec![expr("0"), expr(g_lower[0])], vec![expr(g_lower[1]), expr("0")]],
            cost_upper: vec![vec![expr("0"), expr(g_upper[0])], vec![expr(g_upper[1]), expr("0")]],
            terminal: h.iter().map(|s| expr(s)).collect(),
        })
        .unwrap()
    }

    #[test]
    fn pair_indexing_is_lexicographic() {
        let m = ModeSpace::new(2, 3).unwrap();
        assert_eq!(m.lambda(), 6);
        assert_eq!(m.pair_index(1, 1), 0);
        assert_eq!(m.pair_index(1, 3), 2);
        assert_eq!(m.pair_index(2, 1), 3);
        assert_eq!(m.pair_at(4), (2, 2));
        let pairs: Vec<_> = m.pairs().collect();
        assert_eq!(pairs[0], (1, 1));
        assert_eq!(pairs[5], (2, 3));
    }

    #[test]
    fn obstacle_lower_single_term() {
        // v = {v11:1, v12:2, v21:3, v22:4}, g_lower_12 = 0.5 => L^{11} = 3 - 0.5
        let p = two_by_two(["0"; 4], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        let mut env = p.new_env();
        let v = [1.0, 2.0, 3.0, 4.0];
        let l = obstacle_lower(&p, &mut env, &v, 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(l.value, 2.5);
        assert_eq!(l.arg, Some(2));
        let u = obstacle_upper(&p, &mut env, &v, 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(u.value, 2.7);
        assert_eq!(u.arg, Some(2));
    }

    #[test]
    fn obstacle_sentinels_for_single_mode() {
        let modes = ModeSpace::new(1, 1).unwrap();
        let p = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: vec![expr("0")],
            cost_lower: vec![vec![expr("0")]],
            cost_upper: vec![vec![expr("0")]],
            terminal: vec![expr("0")],
        })
        .unwrap();
        let mut env = p.new_env();
        let l = obstacle_lower(&p, &mut env, &[5.0], 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(l.value, NO_LOWER);
        assert_eq!(l.arg, None);
        let u = obstacle_upper(&p, &mut env, &[5.0], 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(u.value, NO_UPPER);
    }

    #[test]
    fn obstacle_three_modes_tie_break() {
        // player 1 has 3 modes: v^{21}=3, v^{31}=3.6, g_12=0.5, g_13=1.0
        // => L^{11} = max(2.5, 2.6) = 2.6 at k=3
        let modes = ModeSpace::new(3, 1).unwrap();
        let p = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: vec![expr("0"), expr("0"), expr("0")],
            cost_lower: vec![
                vec![expr("0"), expr("0.5"), expr("1.0")],
                vec![expr("0.5"), expr("0"), expr("0.5")],
                vec![expr("1.0"), expr("0.5"), expr("0")],
            ],
            cost_upper: vec![vec![expr("0")]],
            terminal: vec![expr("0"), expr("0"), expr("0")],
        })
        .unwrap();
        let mut env = p.new_env();
        let v = [0.0, 3.0, 3.6];
        let l = obstacle_lower(&p, &mut env, &v, 1, 1, 0.0, &[0.0]).unwrap();
        assert!((l.value - 2.6).abs() < 1e-15);
        assert_eq!(l.arg, Some(3));
        // exact tie goes to the smallest k
        let v_tie = [0.0, 3.0, 3.5];
        let l = obstacle_lower(&p, &mut env, &v_tie, 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(l.value, 2.5);
        assert_eq!(l.arg, Some(2));
    }

    #[test]
    fn obstacles_read_only_their_own_row_or_column() {
        // L^{ij} may only touch components (k, j), U^{ij} only (i, l);
        // poison everything else with NaN and require a finite result
        let p = two_by_two(["0"; 4], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        let mut env = p.new_env();
        let modes = p.modes();
        let mut v = [f64::NAN; 4];
        v[modes.pair_index(2, 1)] = 3.0;
        let l = obstacle_lower(&p, &mut env, &v, 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(l.value, 2.5);
        let mut v = [f64::NAN; 4];
        v[modes.pair_index(1, 2)] = 2.0;
        let u = obstacle_upper(&p, &mut env, &v, 1, 1, 0.0, &[0.0]).unwrap();
        assert_eq!(u.value, 2.7);
    }

    #[test]
    fn penalized_generator_matches_displayed_formula() {
        // f = 0, y^{11} = 0, v^{21} = 3, v^{12} = 2, g_lower = 0.5, g_upper = 0.7
        // => L^{11} = 2.5, U^{11} = 2.7, n = 2, m = 1:
        // doubly: 0 + 2*(0-2.5)^- - 1*(0-2.7)^+ = 5.0
        let p = two_by_two(["0"; 4], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        let mut env = p.new_env();
        let ybar = [0.0, 2.0, 3.0, 4.0];
        let z = [0.0];
        let x = [0.0];
        let v = penalized_generator(&p, &mut env, PenaltyKind::Doubly, 2.0, 1.0, 1, 1, 0.0, &x, &ybar, &z).unwrap();
        assert_eq!(v, 5.0);
        let v = penalized_generator(&p, &mut env, PenaltyKind::UpperOnly, 2.0, 1.0, 1, 1, 0.0, &x, &ybar, &z).unwrap();
        assert_eq!(v, 5.0);
        let v = penalized_generator(&p, &mut env, PenaltyKind::LowerOnly, 2.0, 1.0, 1, 1, 0.0, &x, &ybar, &z).unwrap();
        assert_eq!(v, 0.0);
        // n = m = 0 reduces to the plain generator
        let p2 = two_by_two(["x1^2+2*t", "0", "0", "0"], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        let v = penalized_generator(&p2, &mut env, PenaltyKind::Doubly, 0.0, 0.0, 1, 1, 1.0, &[3.0], &ybar, &z).unwrap();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn penalized_generator_monotone_in_n_and_m() {
        let p = two_by_two(["0"; 4], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        let mut env = p.new_env();
        let ybar = [0.0, 2.0, 3.0, 4.0];
        let grid: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
        for (i, j) in p.modes().pairs() {
            for a in 0..grid.len() - 1 {
                for m in grid {
                    let lo = penalized_generator(&p, &mut env, PenaltyKind::Doubly, grid[a], m, i, j, 0.0, &[0.0], &ybar, &[0.0]).unwrap();
                    let hi = penalized_generator(&p, &mut env, PenaltyKind::Doubly, grid[a + 1], m, i, j, 0.0, &[0.0], &ybar, &[0.0]).unwrap();
                    assert!(hi >= lo);
                }
                for n in grid {
                    let lo = penalized_generator(&p, &mut env, PenaltyKind::Doubly, n, grid[a], i, j, 0.0, &[0.0], &ybar, &[0.0]).unwrap();
                    let hi = penalized_generator(&p, &mut env, PenaltyKind::Doubly, n, grid[a + 1], i, j, 0.0, &[0.0], &ybar, &[0.0]).unwrap();
                    assert!(hi <= lo);
                }
            }
        }
    }

    #[test]
    fn penalized_generator_decomposes() {
        // doubly(n,m) = lower_only(m) + n (y-L)^-  and  = upper_only(n) - m (y-U)^+
        let p = two_by_two(["y_1_1 - y_2_2"; 4], ["0.5", "0.4"], ["0.7", "0.6"], ["0"; 4]);
        let mut env = p.new_env();
        let ybar = [0.3, 2.0, -1.0, 0.9];
        let (n, m) = (3.0, 2.0);
        for (i, j) in p.modes().pairs() {
            let own = ybar[p.modes().pair_index(i, j)];
            let l = obstacle_lower(&p, &mut env, &ybar, i, j, 0.2, &[0.1]).unwrap().value;
            let u = obstacle_upper(&p, &mut env, &ybar, i, j, 0.2, &[0.1]).unwrap().value;
            let doubly = penalized_generator(&p, &mut env, PenaltyKind::Doubly, n, m, i, j, 0.2, &[0.1], &ybar, &[0.0]).unwrap();
            let lower = penalized_generator(&p, &mut env, PenaltyKind::LowerOnly, n, m, i, j, 0.2, &[0.1], &ybar, &[0.0]).unwrap();
            let upper = penalized_generator(&p, &mut env, PenaltyKind::UpperOnly, n, m, i, j, 0.2, &[0.1], &ybar, &[0.0]).unwrap();
            assert!((doubly - (lower + n * num::neg(own - l))).abs() < 1e-14);
            assert!((doubly - (upper - m * num::pos(own - u))).abs() < 1e-14);
        }
    }

    #[test]
    fn terminal_validator_examples() {
        let xs: Vec<Vec<f64>> = (-5..=5).map(|i| vec![i as f64 * 0.5]).collect();

        // h = 0 with non-negative costs is consistent
        let p = two_by_two(["0"; 4], ["0.5", "0.5"], ["0.7", "0.7"], ["0"; 4]);
        assert!(validate_terminal(&p, &xs).unwrap().ok);

        // h^{11} = 1, h^{21} = 0, g_lower_21 = 0.3: violated at (2,1) since
        // h^{11} - g_21 = 0.7 > 0
        let p = two_by_two(["0"; 4], ["0.5", "0.3"], ["10", "10"], ["1", "1", "0", "0"]);
        let check = validate_terminal(&p, &xs).unwrap();
        assert!(!check.ok);
        assert!((check.worst_violation - 0.7).abs() < 1e-15);
        assert_eq!(check.witness.unwrap().pair, (2, 1));

        // h^{ij} = i + j with costs 10 everywhere: all inequalities slack
        let p = two_by_two(["0"; 4], ["10", "10"], ["10", "10"], ["2", "3", "3", "4"]);
        let check = validate_terminal(&p, &xs).unwrap();
        assert!(check.ok, "worst violation {}", check.worst_violation);
    }

    #[test]
    fn no_free_loop_irrational_ratio_passes() {
        // g_lower = |i-k|, g_upper = sqrt(2) |j-l|: irrational ratio, loops
        // never cancel
        let p = two_by_two(["0"; 4], ["1", "1"], ["sqrt(2)", "sqrt(2)"], ["0"; 4]);
        let samples = vec![(0.0, vec![0.0]), (0.5, vec![1.0])];
        let (lc, lp1, lp2) = validate_no_free_loop(&p, &samples).unwrap();
        assert!(lc.ok && lp1.ok && lp2.ok);
        assert!(lc.loops_checked > 0);
    }

    #[test]
    fn no_free_loop_zero_costs_violated() {
        let p = two_by_two(["0"; 4], ["0", "0"], ["0", "0"], ["0"; 4]);
        let samples = vec![(0.0, vec![0.0])];
        let (lc, lp1, lp2) = validate_no_free_loop(&p, &samples).unwrap();
        assert!(!lc.ok);
        assert!(!lp1.ok && !lp2.ok);
        let w = lc.witness.unwrap();
        assert_eq!(w.sum, 0.0);
        assert!(w.pairs.len() >= 3);
        assert_eq!(w.pairs.first(), w.pairs.last());
    }

    #[test]
    fn no_free_loop_mixed_sign_cancellation() {
        // all costs 1: the four-corner loop sums -1+1-1+1 = 0 even though
        // each player's own cycles are strictly positive
        let p = two_by_two(["0"; 4], ["1", "1"], ["1", "1"], ["0"; 4]);
        let samples = vec![(0.0, vec![0.0])];
        let (lc, lp1, lp2) = validate_no_free_loop(&p, &samples).unwrap();
        assert!(lp1.ok && lp2.ok, "single-player cycles are cost 2 > 0");
        assert!(!lc.ok);
        let w = lc.witness.unwrap();
        assert_eq!(w.sum, 0.0);
        assert_eq!(w.pairs.len(), 5, "four-corner loop: {:?}", w.pairs);
    }

    #[test]
    fn cost_nonneg_detects_negative_entry() {
        let p = two_by_two(["0"; 4], ["-0.25", "1"], ["1", "1"], ["0"; 4]);
        let check = validate_cost_nonneg(&p, &[(0.0, vec![0.0])]).unwrap();
        assert!(!check.ok);
        let w = check.witness.unwrap();
        assert_eq!(w.which, "g_lower");
        assert_eq!(w.entry, (1, 2));
        assert_eq!(w.value, -0.25);
    }

    #[test]
    fn terminal_expressions_cannot_use_t_or_y() {
        let modes = ModeSpace::new(1, 1).unwrap();
        let bad = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: vec![expr("0")],
            cost_lower: vec![vec![expr("0")]],
            cost_upper: vec![vec![expr("0")]],
            terminal: vec![expr("t + x1")],
        });
        assert!(matches!(bad, Err(ModelError::Bind(_))));
    }

    #[test]
    fn diagonal_costs_must_be_zero() {
        let modes = ModeSpace::new(2, 2).unwrap();
        let bad = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: vec![expr("0"); 4],
            cost_lower: vec![vec![expr("1"), expr("1")], vec![expr("1"), expr("0")]],
            cost_upper: vec![vec![expr("0"), expr("1")], vec![expr("1"), expr("0")]],
            terminal: vec![expr("0"); 4],
        });
        assert_eq!(bad.unwrap_err().to_string(), "diagonal switching cost for player 1, mode 1 must be the constant 0");
    }

    #[test]
    fn generator_index_ranges_are_checked() {
        let modes = ModeSpace::new(2, 2).unwrap();
        let bad = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 1,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![expr("0")],
            vol: vec![vec![expr("0")]],
            gen: vec![expr("z2"), expr("0"), expr("0"), expr("0")], // d = 1, z2 out of range
            cost_lower: vec![vec![expr("0"), expr("1")], vec![expr("1"), expr("0")]],
            cost_upper: vec![vec![expr("0"), expr("1")], vec![expr("1"), expr("0")]],
            terminal: vec![expr("0"); 4],
        });
        assert!(matches!(bad, Err(ModelError::Bind(_))));
    }
}
