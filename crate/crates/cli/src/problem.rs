//! Problem file schema (JSON) and its translation to core types.
//!
//! ```json
//! {
//!   "modes": { "count1": 2, "count2": 2 },
//!   "horizon": 1.0,
//!   "dynamics": { "b": ["0"], "sigma": [["0.5"]] },
//!   "generators": { "f_1_1": "0", "f_1_2": "-x1", ... },
//!   "costs": { "g_lower_1_2": "0.3", "g_upper_1_2": "0.3*sqrt(2)", ... },
//!   "terminal": { "h_1_1": "0.5*min(pos(x1),1)", ... },
//!   "grid": { "box_lo": [-3], "box_hi": [3], "nodes_per_dim": [121],
//!             "time_steps": 60, "boundary": "clamp" },
//!   "solver": { "theta": 1.0, "fixed_point_tol": 1e-10, ... }
//! }
//! ```
//!
//! Expressions are strings in the coefficient language. Every mode pair
//! needs a generator `f_i_j` and a terminal `h_i_j`; the cost matrices need
//! every off-diagonal entry (`g_lower_i_k` for player 1, `g_upper_j_l` for
//! player 2) and must not name diagonal entries, which are zero by
//! convention.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use switchvi_core::exprlang::{self, Expression};
use switchvi_core::grid::{BoundaryPolicy, GridSpec};
use switchvi_core::model::{ModeSpace, ProblemParts, ProblemSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub modes: ModesSection,
    pub horizon: f64,
    pub dynamics: DynamicsSection,
    pub generators: BTreeMap<String, String>,
    #[serde(default)]
    pub costs: BTreeMap<String, String>,
    pub terminal: BTreeMap<String, String>,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub solver: Option<SolverSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesSection {
    pub count1: usize,
    pub count2: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub b: Vec<String>,
    pub sigma: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub nodes_per_dim: Vec<usize>,
    pub time_steps: usize,
    #[serde(default)]
    pub boundary: Option<String>,
}

/// Solver defaults carried by the file; command-line flags override.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub fixed_point_tol: Option<f64>,
    #[serde(default)]
    pub max_inner_iters: Option<usize>,
    #[serde(default)]
    pub damping: Option<f64>,
    #[serde(default)]
    pub exp_shift_lambda: Option<f64>,
    /// Bilateral slice tolerance.
    #[serde(default)]
    pub tol: Option<f64>,
    /// Bilateral per-slice iteration cap.
    #[serde(default)]
    pub max_iters: Option<usize>,
}

#[derive(Debug)]
pub enum ProblemError {
    Io(String),
    Json(String),
    Schema(String),
    Expr { key: String, error: String },
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemError::Io(e) => write!(f, "cannot read problem file: {e}"),
            ProblemError::Json(e) => write!(f, "problem file is not valid JSON: {e}"),
            ProblemError::Schema(e) => write!(f, "problem file schema error: {e}"),
            ProblemError::Expr { key, error } => write!(f, "expression '{key}' does not parse: {error}"),
        }
    }
}

impl std::error::Error for ProblemError {}

/// A fully loaded problem: the core spec, the grid request, and the solver
/// defaults from the file.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub problem: ProblemSpec,
    pub grid_spec: Option<GridSpec>,
    pub solver: SolverSection,
    /// The parsed file, kept so derived problems (e.g. shifted generators
    /// in the verification suite) can be rebuilt from source text.
    pub file: ProblemFile,
    /// Raw file bytes, hashed into the manifest.
    pub raw: Vec<u8>,
}

pub fn load_problem(path: &Path) -> Result<LoadedProblem, ProblemError> {
    let raw = std::fs::read(path).map_err(|e| ProblemError::Io(e.to_string()))?;
    let file: ProblemFile =
        serde_json::from_slice(&raw).map_err(|e| ProblemError::Json(e.to_string()))?;
    let mut loaded = from_file(&file)?;
    loaded.raw = raw;
    Ok(loaded)
}

pub fn from_file(file: &ProblemFile) -> Result<LoadedProblem, ProblemError> {
    let modes = ModeSpace::new(file.modes.count1, file.modes.count2)
        .map_err(|e| ProblemError::Schema(e.to_string()))?;
    let dim_k = file.dynamics.b.len();
    if dim_k == 0 {
        return Err(ProblemError::Schema("dynamics.b must have at least one component".into()));
    }
    if file.dynamics.sigma.len() != dim_k {
        return Err(ProblemError::Schema(format!(
            "dynamics.sigma has {} rows but b has {} components",
            file.dynamics.sigma.len(),
            dim_k
        )));
    }
    let dim_d = file.dynamics.sigma.first().map_or(0, |r| r.len());
    if dim_d == 0 || file.dynamics.sigma.iter().any(|r| r.len() != dim_d) {
        return Err(ProblemError::Schema("dynamics.sigma rows must all have the same positive length".into()));
    }

    let parse_expr = |key: &str, src: &str| -> Result<Expression, ProblemError> {
        exprlang::parse(src).map_err(|e| ProblemError::Expr { key: key.to_string(), error: e.to_string() })
    };

    let drift = file
        .dynamics
        .b
        .iter()
        .enumerate()
        .map(|(c, s)| parse_expr(&format!("dynamics.b[{c}]"), s))
        .collect::<Result<Vec<_>, _>>()?;
    let vol = file
        .dynamics
        .sigma
        .iter()
        .enumerate()
        .map(|(c, row)| {
            row.iter()
                .enumerate()
                .map(|(r, s)| parse_expr(&format!("dynamics.sigma[{c}][{r}]"), s))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    // per-pair maps keyed f_i_j / h_i_j
    let collect_pairs = |map: &BTreeMap<String, String>, prefix: &str| -> Result<Vec<Expression>, ProblemError> {
        let mut out = Vec::with_capacity(modes.lambda());
        for (i, j) in modes.pairs() {
            let key = format!("{prefix}_{i}_{j}");
            let src = map.get(&key).ok_or_else(|| ProblemError::Schema(format!("missing entry '{key}'")))?;
            out.push(parse_expr(&key, src)?);
        }
        for key in map.keys() {
            let ok = parse_pair_key(key, prefix)
                .map(|(i, j)| i >= 1 && i <= modes.count1() && j >= 1 && j <= modes.count2())
                .unwrap_or(false);
            if !ok {
                return Err(ProblemError::Schema(format!("unexpected entry '{key}'")));
            }
        }
        Ok(out)
    };
    let gen = collect_pairs(&file.generators, "f")?;
    let terminal = collect_pairs(&file.terminal, "h")?;

    let zero = exprlang::parse("0").expect("literal");
    let mut cost_lower = vec![vec![zero.clone(); modes.count1()]; modes.count1()];
    let mut cost_upper = vec![vec![zero.clone(); modes.count2()]; modes.count2()];
    for (key, src) in &file.costs {
        if let Some((i, k)) = parse_pair_key(key, "g_lower") {
            if i == k {
                return Err(ProblemError::Schema(format!(
                    "'{key}' names a diagonal cost; diagonals are 0 by convention and must be omitted"
                )));
            }
            if i < 1 || i > modes.count1() || k < 1 || k > modes.count1() {
                return Err(ProblemError::Schema(format!("'{key}' is out of range for count1")));
            }
            cost_lower[i - 1][k - 1] = parse_expr(key, src)?;
        } else if let Some((j, l)) = parse_pair_key(key, "g_upper") {
            if j == l {
                return Err(ProblemError::Schema(format!(
                    "'{key}' names a diagonal cost; diagonals are 0 by convention and must be omitted"
                )));
            }
            if j < 1 || j > modes.count2() || l < 1 || l > modes.count2() {
                return Err(ProblemError::Schema(format!("'{key}' is out of range for count2")));
            }
            cost_upper[j - 1][l - 1] = parse_expr(key, src)?;
        } else {
            return Err(ProblemError::Schema(format!("unexpected cost entry '{key}'")));
        }
    }
    // every off-diagonal must be present
    for i in 1..=modes.count1() {
        for k in 1..=modes.count1() {
            if i != k && !file.costs.contains_key(&format!("g_lower_{i}_{k}")) {
                return Err(ProblemError::Schema(format!("missing cost entry 'g_lower_{i}_{k}'")));
            }
        }
    }
    for j in 1..=modes.count2() {
        for l in 1..=modes.count2() {
            if j != l && !file.costs.contains_key(&format!("g_upper_{j}_{l}")) {
                return Err(ProblemError::Schema(format!("missing cost entry 'g_upper_{j}_{l}'")));
            }
        }
    }

    let problem = ProblemSpec::new(ProblemParts {
        modes,
        dim_k,
        dim_d,
        horizon: file.horizon,
        drift,
        vol,
        gen,
        cost_lower,
        cost_upper,
        terminal,
    })
    .map_err(|e| ProblemError::Schema(e.to_string()))?;

    let grid_spec = match &file.grid {
        None => None,
        Some(g) => {
            let boundary = match g.boundary.as_deref() {
                None | Some("extrapolate") => BoundaryPolicy::Extrapolate,
                Some("clamp") => BoundaryPolicy::Clamp,
                Some(other) => {
                    return Err(ProblemError::Schema(format!(
                        "unknown boundary policy '{other}' (expected 'extrapolate' or 'clamp')"
                    )))
                }
            };
            Some(GridSpec {
                box_lo: g.box_lo.clone(),
                box_hi: g.box_hi.clone(),
                nodes_per_dim: g.nodes_per_dim.clone(),
                time_steps: g.time_steps,
                boundary,
            })
        }
    };

    Ok(LoadedProblem {
        problem,
        grid_spec,
        solver: file.solver.clone().unwrap_or_default(),
        file: file.clone(),
        raw: Vec::new(),
    })
}

/// Parse `"<prefix>_<a>_<b>"` into `(a, b)`.
fn parse_pair_key(key: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix(prefix)?.strip_prefix('_')?;
    let mut parts = rest.split('_');
    let a: usize = parts.next()?.parse().ok()?;
    let b: usize = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((a, b))
}
