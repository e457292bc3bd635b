//! Truncated tensor-product space-time grid, the discrete second-order
//! operator, and value-field storage/interpolation.
//!
//! The continuous problem lives on all of `R^k`; truncation to a box and the
//! boundary closure are solver conventions, not model data. Grids are
//! uniform per dimension, nodes are ordered row-major with the last
//! dimension fastest, and that ordering is what the CSV output uses.
//!
//! The discrete generator uses central differences for second derivatives,
//! upwind differences (on the sign of the drift component) for first
//! derivatives and the standard 4-point stencil for cross terms. Boundary
//! nodes are not solved: they are closed either by linear extrapolation from
//! the two nearest nodes along each boundary dimension (`Extrapolate`,
//! second-order, the default) or by copying the nearest interior value
//! (`Clamp`, first-order but order-preserving, which keeps the discrete
//! comparison principle exact at every node).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exprlang::EvalError;
use crate::model::{ModeSpace, ProblemSpec};

/// Boundary closure policy for the truncated box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// One-sided second-order (quadratic) extrapolation from the three
    /// nearest nodes along each boundary dimension; exact on solutions that
    /// are quadratic in space. The closure row has negative weights, so
    /// comparison orderings can be violated at boundary nodes at
    /// truncation-error scale.
    Extrapolate,
    /// Copy the nearest interior value. First-order but order-preserving:
    /// every comparison-principle property holds at all nodes to solver
    /// tolerance.
    Clamp,
}

/// Grid geometry request.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub nodes_per_dim: Vec<usize>,
    pub time_steps: usize,
    pub boundary: BoundaryPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridError {
    DimensionMismatch { expected: usize, got: usize },
    DegenerateBox { dim: usize },
    TooFewNodes { dim: usize, got: usize },
    NodeCapExceeded { needed: usize, cap: usize },
    OutOfHull { what: &'static str, value: f64 },
    FieldMismatch,
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::DimensionMismatch { expected, got } => {
                write!(f, "grid has {got} dimensions but the problem needs {expected}")
            }
            GridError::DegenerateBox { dim } => write!(f, "box is degenerate in dimension {dim} (lo >= hi)"),
            GridError::TooFewNodes { dim, got } => write!(
                f,
                "dimension {dim} has {got} nodes; at least 3 are required for central differences"
            ),
            GridError::NodeCapExceeded { needed, cap } => write!(
                f,
                "grid needs {needed} stored values which exceeds the cap of {cap} \
                 (see SWITCHVI_MAX_NODES)"
            ),
            GridError::OutOfHull { what, value } => write!(f, "query {what}={value} is outside the grid hull"),
            GridError::FieldMismatch => write!(f, "value fields live on different grids or mode spaces"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GridError {}

/// Built grid: node coordinates, spacings, neighbor indexing.
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    dim_k: usize,
    n_nodes: usize,
    strides: Vec<usize>,
    dx: Vec<f64>,
    dt: f64,
    horizon: f64,
    coords: Vec<f64>,     // n_nodes * dim_k
    interior: Vec<bool>,  // per node
    neighbors: Vec<i64>,  // n_nodes * dim_k * 2, [minus, plus], -1 when absent
}

/// Default cap on stored values (nodes x pairs x slices).
pub const DEFAULT_VALUE_CAP: usize = 50_000_000;

/// Build the grid for a problem, checking shape and the memory cap.
pub fn build_grid(spec: &GridSpec, problem: &ProblemSpec, value_cap: usize) -> Result<Grid, GridError> {
    let k = problem.dim_k();
    if spec.box_lo.len() != k || spec.box_hi.len() != k || spec.nodes_per_dim.len() != k {
        return Err(GridError::DimensionMismatch {
            expected: k,
            got: spec.box_lo.len().max(spec.box_hi.len()).max(spec.nodes_per_dim.len()),
        });
    }
    for c in 0..k {
        if !(spec.box_lo[c] < spec.box_hi[c]) {
            return Err(GridError::DegenerateBox { dim: c + 1 });
        }
        if spec.nodes_per_dim[c] < 3 {
            return Err(GridError::TooFewNodes { dim: c + 1, got: spec.nodes_per_dim[c] });
        }
    }
    let n_nodes: usize = spec.nodes_per_dim.iter().product();
    let stored = n_nodes
        .saturating_mul(problem.modes().lambda())
        .saturating_mul(spec.time_steps + 1);
    if stored > value_cap {
        return Err(GridError::NodeCapExceeded { needed: stored, cap: value_cap });
    }

    // row-major strides, last dimension fastest
    let mut strides = vec![1usize; k];
    for c in (0..k.saturating_sub(1)).rev() {
        strides[c] = strides[c + 1] * spec.nodes_per_dim[c + 1];
    }
    let dx: Vec<f64> =
        (0..k).map(|c| (spec.box_hi[c] - spec.box_lo[c]) / (spec.nodes_per_dim[c] - 1) as f64).collect();
    let dt = if spec.time_steps > 0 { problem.horizon() / spec.time_steps as f64 } else { 0.0 };

    let mut coords = vec![0.0; n_nodes * k];
    let mut interior = vec![true; n_nodes];
    let mut neighbors = vec![-1i64; n_nodes * k * 2];
    let mut idx = vec![0usize; k];
    for node in 0..n_nodes {
        let mut rem = node;
        for c in 0..k {
            idx[c] = rem / strides[c];
            rem %= strides[c];
        }
        for c in 0..k {
            coords[node * k + c] = spec.box_lo[c] + idx[c] as f64 * dx[c];
            if idx[c] == 0 || idx[c] == spec.nodes_per_dim[c] - 1 {
                interior[node] = false;
            }
            if idx[c] > 0 {
                neighbors[(node * k + c) * 2] = (node - strides[c]) as i64;
            }
            if idx[c] + 1 < spec.nodes_per_dim[c] {
                neighbors[(node * k + c) * 2 + 1] = (node + strides[c]) as i64;
            }
        }
    }

    Ok(Grid {
        spec: spec.clone(),
        dim_k: k,
        n_nodes,
        strides,
        dx,
        dt,
        horizon: problem.horizon(),
        coords,
        interior,
        neighbors,
    })
}

impl Grid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim_k(&self) -> usize {
        self.dim_k
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn time_steps(&self) -> usize {
        self.spec.time_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn boundary(&self) -> BoundaryPolicy {
        self.spec.boundary
    }

    /// Coordinates of a node (length `k`).
    pub fn coord(&self, node: usize) -> &[f64] {
        &self.coords[node * self.dim_k..(node + 1) * self.dim_k]
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.interior[node]
    }

    /// Neighbor along dimension `c` (0-based); `dir` is -1 or +1.
    pub fn neighbor(&self, node: usize, c: usize, dir: i8) -> Option<usize> {
        let slot = (node * self.dim_k + c) * 2 + usize::from(dir > 0);
        let v = self.neighbors[slot];
        if v < 0 {
            None
        } else {
            Some(v as usize)
        }
    }

    /// Time of slice `s` (slice `time_steps` is the terminal time).
    pub fn time_of_slice(&self, s: usize) -> f64 {
        if self.spec.time_steps == 0 {
            self.horizon
        } else {
            s as f64 * self.dt
        }
    }

    /// Flat node index of the node closest to `x` (for diagnostics).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for c in 0..self.dim_k {
            let u = (x[c] - self.spec.box_lo[c]) / self.dx[c];
            let i = if u <= 0.0 {
                0
            } else {
                (u + 0.5) as usize
            }
            .min(self.spec.nodes_per_dim[c] - 1);
            node += i * self.strides[c];
        }
        node
    }

    /// Up to `max` node coordinate samples, stride-subsampled.
    pub fn sample_nodes(&self, max: usize) -> Vec<Vec<f64>> {
        let stride = (self.n_nodes + max - 1) / max.max(1);
        (0..self.n_nodes).step_by(stride.max(1)).map(|p| self.coord(p).to_vec()).collect()
    }

    /// Evenly spaced times in `[0, horizon]` including the endpoints.
    pub fn sample_times(&self, count: usize, horizon: f64) -> Vec<f64> {
        let count = count.max(2);
        (0..count).map(|i| horizon * i as f64 / (count - 1) as f64).collect()
    }
}

// ---------------------------------------------------------------------------
// Boundary closure rules
// ---------------------------------------------------------------------------

/// Precomputed update rule for one boundary node.
#[derive(Debug, Clone)]
pub(crate) enum ClosureRule {
    /// `v = v[src]` (nearest interior node).
    Clamp { src: usize },
    /// `v = avg over boundary dims of (3 v[p1] - 3 v[p2] + v[p3])`
    /// (quadratic, second-order, exact on parabolas); a dimension too thin
    /// for three inward nodes degrades to `2 v[p1] - v[p2]` encoded as
    /// `p3 == p2`, where the linear rule equals `2 v1 - v2 = 3 v1 - 3 v2 + v2`.
    Extrapolate { terms: Vec<(usize, usize, usize)> },
}

impl ClosureRule {
    pub(crate) fn apply(&self, values: &[f64]) -> f64 {
        match self {
            ClosureRule::Clamp { src } => values[*src],
            ClosureRule::Extrapolate { terms } => {
                let mut sum = 0.0;
                for (p1, p2, p3) in terms {
                    sum += if p3 == p2 {
                        2.0 * values[*p1] - values[*p2]
                    } else {
                        3.0 * values[*p1] - 3.0 * values[*p2] + values[*p3]
                    };
                }
                sum / terms.len() as f64
            }
        }
    }
}

/// Boundary-node metadata: which dimensions sit on which face, plus the
/// closure row for when the stencil actually reaches outside. A boundary
/// dimension only forces the closure when it carries outward coupling
/// (diffusion, outward-pointing drift, or a cross term); without coupling
/// the node solves its own nodal equation and degenerate problems stay
/// exact on the boundary.
#[derive(Debug, Clone)]
pub(crate) struct BoundaryInfo {
    /// `(dim, side)` with side -1 at the lower face, +1 at the upper face.
    pub dims: Vec<(usize, i8)>,
    pub rule: ClosureRule,
}

impl BoundaryInfo {
    /// True when any boundary dimension's stencil reaches outside the grid
    /// for the local coefficients `b` (length k) and `a = sigma sigma^T`
    /// (k x k).
    pub(crate) fn couples(&self, b: &[f64], a: &[f64], k: usize) -> bool {
        self.dims.iter().any(|&(c, side)| {
            if a[c * k + c] != 0.0 {
                return true;
            }
            if (side > 0 && b[c] > 0.0) || (side < 0 && b[c] < 0.0) {
                return true;
            }
            (0..k).any(|e| e != c && a[c * k + e] != 0.0)
        })
    }
}

/// One entry per node; `None` for interior nodes.
pub(crate) fn closure_rules(grid: &Grid) -> Vec<Option<BoundaryInfo>> {
    let k = grid.dim_k;
    let mut out = vec![None; grid.n_nodes];
    let mut idx = vec![0usize; k];
    for node in 0..grid.n_nodes {
        if grid.is_interior(node) {
            continue;
        }
        let mut rem = node;
        for c in 0..k {
            idx[c] = rem / grid.strides[c];
            rem %= grid.strides[c];
        }
        let mut dims = Vec::new();
        for c in 0..k {
            if idx[c] == 0 {
                dims.push((c, -1i8));
            } else if idx[c] == grid.spec.nodes_per_dim[c] - 1 {
                dims.push((c, 1i8));
            }
        }
        let rule = match grid.spec.boundary {
            BoundaryPolicy::Clamp => {
                let mut src = 0;
                for c in 0..k {
                    let clamped = idx[c].clamp(1, grid.spec.nodes_per_dim[c] - 2);
                    src += clamped * grid.strides[c];
                }
                ClosureRule::Clamp { src }
            }
            BoundaryPolicy::Extrapolate => {
                let mut terms = Vec::new();
                for &(c, side) in &dims {
                    let stride = grid.strides[c] as i64;
                    let dir = -(side as i64); // inward
                    let p1 = (node as i64 + dir * stride) as usize;
                    let p2 = (node as i64 + 2 * dir * stride) as usize;
                    let p3 = if grid.spec.nodes_per_dim[c] >= 4 {
                        (node as i64 + 3 * dir * stride) as usize
                    } else {
                        p2 // too thin for a quadratic fit; degrade to linear
                    };
                    terms.push((p1, p2, p3));
                }
                ClosureRule::Extrapolate { terms }
            }
        };
        out[node] = Some(BoundaryInfo { dims, rule });
    }
    out
}

// ---------------------------------------------------------------------------
// Discrete generator
// ---------------------------------------------------------------------------

/// Split of the discrete generator at a node:
/// `Lop v (node) = diag * v[node] + offdiag`, with `offdiag` built from
/// neighbor values. `b` has length `k`, `a = sigma sigma^T` is `k x k`
/// row-major. The split form is what the implicit nodal solves need.
///
/// Callers guarantee that any term with a nonzero coefficient has its
/// neighbors in-grid (interior nodes always do; boundary nodes reach here
/// only when their boundary dimensions carry no outward coupling).
pub(crate) fn lop_split(grid: &Grid, values: &[f64], node: usize, b: &[f64], a: &[f64]) -> (f64, f64) {
    let k = grid.dim_k;
    let mut diag = 0.0;
    let mut off = 0.0;
    for c in 0..k {
        let dxc = grid.dx[c];
        // diffusion, central
        let w = 0.5 * a[c * k + c] / (dxc * dxc);
        if w != 0.0 {
            let vp = values[grid.neighbor(node, c, 1).expect("stencil in grid")];
            let vm = values[grid.neighbor(node, c, -1).expect("stencil in grid")];
            diag += -2.0 * w;
            off += w * (vp + vm);
        }
        // convection, upwind on the sign of b
        let bc = b[c];
        if bc > 0.0 {
            let vp = values[grid.neighbor(node, c, 1).expect("stencil in grid")];
            diag += -bc / dxc;
            off += bc * vp / dxc;
        } else if bc < 0.0 {
            let vm = values[grid.neighbor(node, c, -1).expect("stencil in grid")];
            diag += bc / dxc;
            off += -bc * vm / dxc;
        }
        // cross terms, 4-point stencil
        for e in c + 1..k {
            let ace = a[c * k + e];
            if ace == 0.0 {
                continue;
            }
            let w = ace / (4.0 * dxc * grid.dx[e]);
            let pp = values[grid.neighbor(grid.neighbor(node, c, 1).unwrap(), e, 1).unwrap()];
            let mm = values[grid.neighbor(grid.neighbor(node, c, -1).unwrap(), e, -1).unwrap()];
            let pm = values[grid.neighbor(grid.neighbor(node, c, 1).unwrap(), e, -1).unwrap()];
            let mp = values[grid.neighbor(grid.neighbor(node, c, -1).unwrap(), e, 1).unwrap()];
            off += w * (pp + mm - pm - mp);
        }
    }
    (diag, off)
}

/// Upwind spatial gradient of `values` at a node, direction chosen by the
/// sign of the drift component (forward for `b_c >= 0`). A missing neighbor
/// contributes a zero slope; that only happens on boundary faces without
/// outward coupling, where the volatility row is zero and the slope cannot
/// enter the generator.
pub(crate) fn upwind_gradient(grid: &Grid, values: &[f64], node: usize, b: &[f64], out: &mut [f64]) {
    for c in 0..grid.dim_k {
        let dxc = grid.dx[c];
        out[c] = if b[c] >= 0.0 {
            match grid.neighbor(node, c, 1) {
                Some(q) => (values[q] - values[node]) / dxc,
                None => 0.0,
            }
        } else {
            match grid.neighbor(node, c, -1) {
                Some(q) => (values[node] - values[q]) / dxc,
                None => 0.0,
            }
        };
    }
}

/// Value of `Lop phi` at a node, evaluating the coefficients at `(t, x)`.
///
/// At boundary nodes, out-of-grid neighbors are substituted per policy
/// (clamped value, or linear extrapolation along the offending dimension).
/// This entry point is for inspection and residuals; the solvers do not
/// solve the PDE on the boundary.
pub fn discrete_generator(
    problem: &ProblemSpec,
    grid: &Grid,
    values: &[f64],
    node: usize,
    t: f64,
) -> Result<f64, EvalError> {
    let k = grid.dim_k;
    let d = problem.dim_d();
    let mut env = problem.new_env();
    let x = grid.coord(node).to_vec();
    let mut b = vec![0.0; k];
    let mut sigma = vec![0.0; k * d];
    for c in 0..k {
        b[c] = problem.eval_drift(&mut env, t, &x, c + 1)?;
        for r in 0..d {
            sigma[c * d + r] = problem.eval_vol(&mut env, t, &x, c + 1, r + 1)?;
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

    let sample = |offsets: &[i64]| sample_offset(grid, values, node, offsets);
    let mut offsets = vec![0i64; k];
    let mut total = 0.0;
    for c in 0..k {
        let dxc = grid.dx[c];
        offsets.iter_mut().for_each(|o| *o = 0);
        offsets[c] = 1;
        let vp = sample(&offsets);
        offsets[c] = -1;
        let vm = sample(&offsets);
        let v0 = values[node];
        total += 0.5 * a[c * k + c] * (vp - 2.0 * v0 + vm) / (dxc * dxc);
        let bc = b[c];
        total += if bc >= 0.0 { bc * (vp - v0) / dxc } else { bc * (v0 - vm) / dxc };
        for e in c + 1..k {
            let ace = a[c * k + e];
            if ace == 0.0 {
                continue;
            }
            offsets.iter_mut().for_each(|o| *o = 0);
            offsets[c] = 1;
            offsets[e] = 1;
            let pp = sample(&offsets);
            offsets[c] = -1;
            offsets[e] = -1;
            let mm = sample(&offsets);
            offsets[c] = 1;
            offsets[e] = -1;
            let pm = sample(&offsets);
            offsets[c] = -1;
            offsets[e] = 1;
            let mp = sample(&offsets);
            total += ace * (pp + mm - pm - mp) / (4.0 * dxc * grid.dx[e]);
        }
    }
    Ok(total)
}

/// Field value at `node + offsets`, applying the boundary policy where the
/// target leaves the grid.
fn sample_offset(grid: &Grid, values: &[f64], node: usize, offsets: &[i64]) -> f64 {
    let k = grid.dim_k;
    let mut idx = vec![0i64; k];
    let mut rem = node;
    for c in 0..k {
        idx[c] = (rem / grid.strides[c]) as i64 + offsets[c];
        rem %= grid.strides[c];
    }
    value_at_extended(grid, values, &mut idx, 0)
}

fn value_at_extended(grid: &Grid, values: &[f64], idx: &mut [i64], from_dim: usize) -> f64 {
    for c in from_dim..grid.dim_k {
        let n = grid.spec.nodes_per_dim[c] as i64;
        if idx[c] >= 0 && idx[c] < n {
            continue;
        }
        match grid.spec.boundary {
            BoundaryPolicy::Clamp => {
                idx[c] = idx[c].clamp(0, n - 1);
            }
            BoundaryPolicy::Extrapolate => {
                // quadratic extrapolation through the last three nodes
                let (edge, inner, inner2) = if idx[c] < 0 { (0, 1, 2) } else { (n - 1, n - 2, n - 3) };
                let saved = idx[c];
                idx[c] = edge;
                let ve = value_at_extended(grid, values, idx, c + 1);
                idx[c] = inner;
                let vi = value_at_extended(grid, values, idx, c + 1);
                idx[c] = inner2;
                let vi2 = value_at_extended(grid, values, idx, c + 1);
                let m = if saved < 0 { (-saved) as f64 } else { (saved - (n - 1)) as f64 };
                idx[c] = saved;
                return ve + m * (ve - vi) + 0.5 * m * (m + 1.0) * (ve - 2.0 * vi + vi2);
            }
        }
    }
    let mut node = 0usize;
    for c in 0..grid.dim_k {
        node += idx[c] as usize * grid.strides[c];
    }
    values[node]
}

// ---------------------------------------------------------------------------
// Monotonicity diagnostics
// ---------------------------------------------------------------------------

/// Positivity diagnostics of the discrete scheme.
///
/// `explicit_cfl` is the largest sampled value of
/// `dt * sum_c (|b_c|/dx_c + a_cc/dx_c^2)`; an explicit or theta < 1 scheme
/// is monotone when `(1-theta) * explicit_cfl <= 1` (the implicit part is
/// unconditional). `worst_cross_margin` is the smallest sampled value of
/// `a_cc/dx_c^2 - sum_{e != c} |a_ce| / (dx_c dx_e)`; a negative margin means
/// the 4-point cross stencil introduces negative weights and monotonicity of
/// the spatial operator is lost (reported, never fatal).
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub explicit_cfl: f64,
    pub explicit_cfl_ok: bool,
    pub worst_cross_margin: f64,
    pub cross_warning: bool,
}

pub fn monotonicity_report(problem: &ProblemSpec, grid: &Grid, theta: f64) -> Result<MonotonicityReport, EvalError> {
    let k = grid.dim_k;
    let d = problem.dim_d();
    let mut env = problem.new_env();
    let times = grid.sample_times(3, problem.horizon());
    let nodes = grid.sample_nodes(512);
    let mut worst_cfl: f64 = 0.0;
    let mut worst_margin = f64::INFINITY;
    let mut sigma = vec![0.0; k * d];
    for t in &times {
        for x in &nodes {
            let mut sum = 0.0;
            for c in 0..k {
                for r in 0..d {
                    sigma[c * d + r] = problem.eval_vol(&mut env, *t, x, c + 1, r + 1)?;
                }
            }
            for c in 0..k {
                let b = problem.eval_drift(&mut env, *t, x, c + 1)?;
                let mut acc = 0.0;
                for r in 0..d {
                    acc += sigma[c * d + r] * sigma[c * d + r];
                }
                sum += crate::num::abs(b) / grid.dx[c] + acc / (grid.dx[c] * grid.dx[c]);
                let mut cross = 0.0;
                for e in 0..k {
                    if e == c {
                        continue;
                    }
                    let mut ace = 0.0;
                    for r in 0..d {
                        ace += sigma[c * d + r] * sigma[e * d + r];
                    }
                    cross += crate::num::abs(ace) / (grid.dx[c] * grid.dx[e]);
                }
                worst_margin = worst_margin.min(acc / (grid.dx[c] * grid.dx[c]) - cross);
            }
            worst_cfl = worst_cfl.max(grid.dt * sum);
        }
    }
    Ok(MonotonicityReport {
        explicit_cfl: worst_cfl,
        explicit_cfl_ok: (1.0 - theta) * worst_cfl <= 1.0 + 1e-12,
        worst_cross_margin: worst_margin,
        cross_warning: worst_margin < -1e-12,
    })
}

// ---------------------------------------------------------------------------
// Value fields
// ---------------------------------------------------------------------------

/// Per-pair value surfaces over the full space-time grid.
///
/// Layout: `data[slice][pair][node]`, slices `0..=time_steps` with slice
/// `time_steps` holding the terminal data.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    modes: ModeSpace,
    n_nodes: usize,
    time_steps: usize,
    data: Vec<f64>,
}

impl ValueField {
    pub fn zeros(grid: &Grid, modes: ModeSpace) -> ValueField {
        ValueField {
            modes,
            n_nodes: grid.n_nodes(),
            time_steps: grid.time_steps(),
            data: vec![0.0; grid.n_nodes() * modes.lambda() * (grid.time_steps() + 1)],
        }
    }

    pub fn modes(&self) -> ModeSpace {
        self.modes
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    fn slice_len(&self) -> usize {
        self.n_nodes * self.modes.lambda()
    }

    /// All pair surfaces of one time slice, pair-major.
    pub fn slice(&self, s: usize) -> &[f64] {
        let len = self.slice_len();
        &self.data[s * len..(s + 1) * len]
    }

    pub fn slice_mut(&mut self, s: usize) -> &mut [f64] {
        let len = self.slice_len();
        &mut self.data[s * len..(s + 1) * len]
    }

    /// One pair's surface at one slice.
    pub fn pair_slice(&self, s: usize, pair: usize) -> &[f64] {
        let base = s * self.slice_len() + pair * self.n_nodes;
        &self.data[base..base + self.n_nodes]
    }

    pub fn at(&self, s: usize, pair: usize, node: usize) -> f64 {
        self.data[s * self.slice_len() + pair * self.n_nodes + node]
    }

    pub fn set(&mut self, s: usize, pair: usize, node: usize, v: f64) {
        let len = self.slice_len();
        self.data[s * len + pair * self.n_nodes + node] = v;
    }

    pub fn same_shape(&self, other: &ValueField) -> bool {
        self.modes == other.modes && self.n_nodes == other.n_nodes && self.time_steps == other.time_steps
    }

    /// Largest value of `self - other` over all slices/pairs/nodes, with its
    /// location `(slice, pair, node)`.
    pub fn max_excess_over(&self, other: &ValueField) -> (f64, (usize, usize, usize)) {
        debug_assert!(self.same_shape(other));
        let mut worst = f64::NEG_INFINITY;
        let mut at = (0, 0, 0);
        let lambda = self.modes.lambda();
        for s in 0..=self.time_steps {
            for pair in 0..lambda {
                let a = self.pair_slice(s, pair);
                let b = other.pair_slice(s, pair);
                for node in 0..self.n_nodes {
                    let d = a[node] - b[node];
                    if d > worst {
                        worst = d;
                        at = (s, pair, node);
                    }
                }
            }
        }
        (worst, at)
    }

    /// Max-norm distance to another field.
    pub fn max_abs_diff(&self, other: &ValueField) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| crate::num::abs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fill the terminal slice with `h^{ij}` sampled exactly on the nodes.
pub fn set_terminal(field: &mut ValueField, problem: &ProblemSpec, grid: &Grid) -> Result<(), EvalError> {
    let mut env = problem.new_env();
    let modes = problem.modes();
    let s = field.time_steps;
    for (pair, (i, j)) in modes.pairs().enumerate() {
        for node in 0..grid.n_nodes() {
            let v = problem.eval_terminal(&mut env, grid.coord(node), i, j)?;
            field.set(s, pair, node, v);
        }
    }
    Ok(())
}

/// Multilinear-in-space, linear-in-time interpolation of one pair surface.
pub fn interpolate(field: &ValueField, grid: &Grid, i: usize, j: usize, t: f64, x: &[f64]) -> Result<f64, GridError> {
    let k = grid.dim_k();
    let eps = 1e-12;
    if t < -eps || t > grid.horizon() + eps {
        return Err(GridError::OutOfHull { what: "t", value: t });
    }
    for c in 0..k {
        let lo = grid.spec.box_lo[c];
        let hi = grid.spec.box_hi[c];
        let tol = eps * (1.0 + crate::num::abs(hi - lo));
        if x[c] < lo - tol || x[c] > hi + tol {
            return Err(GridError::OutOfHull { what: "x", value: x[c] });
        }
    }
    let pair = field.modes.pair_index(i, j);

    let space_interp = |values: &[f64]| -> f64 {
        // multilinear over the 2^k cell corners
        let mut base = vec![0usize; k];
        let mut w = vec![0.0; k];
        for c in 0..k {
            let u = (x[c] - grid.spec.box_lo[c]) / grid.dx[c];
            let max_cell = grid.spec.nodes_per_dim[c] - 2;
            let i0 = if u <= 0.0 { 0 } else { (u as usize).min(max_cell) };
            base[c] = i0;
            w[c] = (u - i0 as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << k) {
            let mut node = 0;
            let mut weight = 1.0;
            for c in 0..k {
                let up = (corner >> c) & 1 == 1;
                node += (base[c] + usize::from(up)) * grid.strides[c];
                weight *= if up { w[c] } else { 1.0 - w[c] };
            }
            acc += weight * values[node];
        }
        acc
    };

    if field.time_steps == 0 {
        return Ok(space_interp(field.pair_slice(0, pair)));
    }
    let dt = grid.horizon() / field.time_steps as f64;
    let u = (t / dt).clamp(0.0, field.time_steps as f64);
    let s0 = (u as usize).min(field.time_steps - 1);
    let wt = u - s0 as f64;
    let v0 = space_interp(field.pair_slice(s0, pair));
    let v1 = space_interp(field.pair_slice(s0 + 1, pair));
    Ok(v0 * (1.0 - wt) + v1 * wt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use crate::model::{ModeSpace, ProblemParts};

    fn dummy_problem(k: usize, d: usize, sigma: &str, b: &str) -> ProblemSpec {
        let modes = ModeSpace::new(1, 1).unwrap();
        ProblemSpec::new(ProblemParts {
            modes,
            dim_k: k,
            dim_d: d,
            horizon: 1.0,
            drift: vec![parse(b).unwrap(); k],
            vol: vec![vec![parse(sigma).unwrap(); d]; k],
            gen: vec![parse("0").unwrap()],
            cost_lower: vec![vec![parse("0").unwrap()]],
            cost_upper: vec![vec![parse("0").unwrap()]],
            terminal: vec![parse("0").unwrap()],
        })
        .unwrap()
    }

    fn grid_1d(problem: &ProblemSpec, lo: f64, hi: f64, n: usize, steps: usize) -> Grid {
        build_grid(
            &GridSpec {
                box_lo: vec![lo],
                box_hi: vec![hi],
                nodes_per_dim: vec![n],
                time_steps: steps,
                boundary: BoundaryPolicy::Extrapolate,
            },
            problem,
            DEFAULT_VALUE_CAP,
        )
        .unwrap()
    }

    #[test]
    fn grid_nodes_1d() {
        let p = dummy_problem(1, 1, "0", "0");
        let g = grid_1d(&p, -1.0, 1.0, 5, 1);
        let xs: Vec<f64> = (0..5).map(|n| g.coord(n)[0]).collect();
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(!g.is_interior(0) && g.is_interior(2) && !g.is_interior(4));
    }

    #[test]
    fn grid_2d_row_major() {
        let modes = ModeSpace::new(1, 1).unwrap();
        let p = ProblemSpec::new(ProblemParts {
            modes,
            dim_k: 2,
            dim_d: 1,
            horizon: 1.0,
            drift: vec![parse("0").unwrap(); 2],
            vol: vec![vec![parse("0").unwrap()]; 2],
            gen: vec![parse("0").unwrap()],
            cost_lower: vec![vec![parse("0").unwrap()]],
            cost_upper: vec![vec![parse("0").unwrap()]],
            terminal: vec![parse("0").unwrap()],
        })
        .unwrap();
        let g = build_grid(
            &GridSpec {
                box_lo: vec![0.0, 0.0],
                box_hi: vec![1.0, 1.0],
                nodes_per_dim: vec![3, 3],
                time_steps: 1,
                boundary: BoundaryPolicy::Extrapolate,
            },
            &p,
            DEFAULT_VALUE_CAP,
        )
        .unwrap();
        assert_eq!(g.n_nodes(), 9);
        // last dimension fastest: node 1 moves x2
        assert_eq!(g.coord(0), &[0.0, 0.0]);
        assert_eq!(g.coord(1), &[0.0, 0.5]);
        assert_eq!(g.coord(3), &[0.5, 0.0]);
        assert_eq!(g.neighbor(4, 0, 1), Some(7));
        assert_eq!(g.neighbor(4, 1, 1), Some(5));
        assert_eq!(g.neighbor(0, 0, -1), None);
        assert!(g.is_interior(4) && !g.is_interior(1));
    }

    #[test]
    fn too_few_nodes_is_an_error() {
        let p = dummy_problem(1, 1, "0", "0");
        let err = build_grid(
            &GridSpec {
                box_lo: vec![0.0],
                box_hi: vec![1.0],
                nodes_per_dim: vec![2],
                time_steps: 1,
                boundary: BoundaryPolicy::Extrapolate,
            },
            &p,
            DEFAULT_VALUE_CAP,
        )
        .unwrap_err();
        assert!(matches!(err, GridError::TooFewNodes { dim: 1, got: 2 }));
    }

    #[test]
    fn value_cap_is_enforced() {
        let p = dummy_problem(1, 1, "0", "0");
        let err = build_grid(
            &GridSpec {
                box_lo: vec![0.0],
                box_hi: vec![1.0],
                nodes_per_dim: vec![1000],
                time_steps: 10,
                boundary: BoundaryPolicy::Extrapolate,
            },
            &p,
            5000,
        )
        .unwrap_err();
        assert!(matches!(err, GridError::NodeCapExceeded { .. }));
    }

    #[test]
    fn generator_vanishes_without_coefficients() {
        let p = dummy_problem(1, 1, "0", "0");
        let g = grid_1d(&p, -1.0, 1.0, 9, 1);
        let field: Vec<f64> = (0..9).map(|n| g.coord(n)[0].sin()).collect();
        for node in 0..9 {
            assert_eq!(discrete_generator(&p, &g, &field, node, 0.3).unwrap(), 0.0);
        }
    }

    #[test]
    fn central_difference_exact_on_quadratics() {
        // sigma = sqrt(2) so a = 2 and (1/2) a phi'' = phi'' = 2 for phi = x^2
        let p = dummy_problem(1, 1, "sqrt(2)", "0");
        let g = grid_1d(&p, -1.0, 1.0, 9, 1);
        let field: Vec<f64> = (0..9).map(|n| g.coord(n)[0] * g.coord(n)[0]).collect();
        for node in 1..8 {
            let v = discrete_generator(&p, &g, &field, node, 0.0).unwrap();
            assert!((v - 2.0).abs() < 1e-12, "node {node}: {v}");
        }
    }

    #[test]
    fn upwind_exact_on_linears() {
        let p = dummy_problem(1, 1, "0", "1");
        let g = grid_1d(&p, -1.0, 1.0, 5, 1); // dx = 0.5
        let field: Vec<f64> = (0..5).map(|n| g.coord(n)[0]).collect();
        for node in 0..5 {
            let v = discrete_generator(&p, &g, &field, node, 0.0).unwrap();
            assert!((v - 1.0).abs() < 1e-13, "node {node}: {v}");
        }
    }

    #[test]
    fn linear_consistency_on_affine_fields() {
        // b = 2, sigma = 0: Lop (3x + 5) = 2 * 3 at every node
        let p = dummy_problem(1, 1, "0", "2");
        let g = grid_1d(&p, -2.0, 2.0, 17, 1);
        let field: Vec<f64> = (0..17).map(|n| 3.0 * g.coord(n)[0] + 5.0).collect();
        for node in 0..17 {
            let v = discrete_generator(&p, &g, &field, node, 0.0).unwrap();
            assert!((v - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_examples() {
        let p = dummy_problem(1, 1, "0", "0");
        let g = grid_1d(&p, 0.0, 1.0, 3, 1); // nodes 0, 0.5, 1
        let modes = ModeSpace::new(1, 1).unwrap();
        let mut f = ValueField::zeros(&g, modes);
        for (node, v) in [(0usize, 1.0), (1, 3.0), (2, 5.0)] {
            f.set(0, 0, node, v);
            f.set(1, 0, node, v);
        }
        // node hits are exact
        assert_eq!(interpolate(&f, &g, 1, 1, 0.0, &[0.5]).unwrap(), 3.0);
        // midpoint of nodes valued 1 and 3
        assert_eq!(interpolate(&f, &g, 1, 1, 0.0, &[0.25]).unwrap(), 2.0);
        // out of hull
        assert!(matches!(
            interpolate(&f, &g, 1, 1, 0.0, &[1.5]),
            Err(GridError::OutOfHull { what: "x", .. })
        ));
        assert!(interpolate(&f, &g, 1, 1, 2.0, &[0.5]).is_err());
    }

    #[test]
    fn monotonicity_report_flags_cross_terms() {
        let p = dummy_problem(1, 1, "1", "1");
        let g = grid_1d(&p, -1.0, 1.0, 11, 10); // dx = 0.2, dt = 0.1
        let r = monotonicity_report(&p, &g, 1.0).unwrap();
        // dt (|b|/dx + a/dx^2) = 0.1 (5 + 25) = 3
        assert!((r.explicit_cfl - 3.0).abs() < 1e-12);
        assert!(r.explicit_cfl_ok); // theta = 1
        assert!(!r.cross_warning);
        let r = monotonicity_report(&p, &g, 0.5).unwrap();
        assert!(!r.explicit_cfl_ok); // 0.5 * 3 > 1
    }
}
