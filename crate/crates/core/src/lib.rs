//! Solvers for systems of parabolic variational inequalities with
//! interconnected bilateral obstacles, the Bellman-Isaacs system of a
//! two-player multi-mode switching game.
//!
//! For every mode pair `(i,j)` the unknown surface `v^{ij}(t,x)` satisfies
//!
//! ```text
//! min{ v - L[v], max{ v - U[v], -dv/dt - Lop v - f } } = 0,   v(T,.) = h
//! ```
//!
//! where the obstacles are built from the other components of the solution
//! through switching costs,
//!
//! ```text
//! L^{ij}[v] = max_{k != i} (v^{kj} - g_lower_{ik}),
//! U^{ij}[v] = min_{l != j} (v^{il} + g_upper_{jl}),
//! ```
//!
//! and `Lop` is the generator `b . Dx + 1/2 Tr(sigma sigma^T Dxx)`.
//!
//! The crate provides three routes to the solution, cross-validated against
//! each other:
//!
//! * [`schemes`] — penalized approximations (doubly penalized, and the two
//!   one-sided reflected families) with monotone penalty schedules;
//! * [`bilateral`] — a direct projected Gauss-Seidel solver for the bilateral
//!   complementarity system, in both min-first and max-first nesting, plus
//!   the complementarity residual used as the ground-truth check;
//! * [`oracle`] — an independent Markov-chain (lattice) backward induction
//!   for the switching game and for scalar two-obstacle Dynkin games.
//!
//! Coefficients of a problem are user-supplied arithmetic expressions parsed
//! by [`exprlang`]; [`model`] holds the problem definition and validates the
//! standing assumptions (terminal consistency, non-negative costs, the
//! no-free-loop property) at grid resolution.
//!
//! The crate is `no_std`-compatible (`default-features = false`); it only
//! needs `alloc`. All transcendental math goes through `libm` so results are
//! bit-identical with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bilateral;
pub mod exprlang;
pub mod grid;
pub mod model;
pub mod num;
pub mod oracle;
pub mod schemes;

mod stepper;

pub use bilateral::{compare_sub_super, residual, solve_bilateral, BilateralConfig, Variant};
pub use exprlang::{eval, free_vars, parse, Expression};
pub use grid::{build_grid, interpolate, BoundaryPolicy, Grid, GridSpec, ValueField};
pub use model::{ModeSpace, PenaltyKind, ProblemSpec, ValidationReport};
pub use oracle::{build_tree, dynkin_value, switching_game_value, TreeModel};
pub use schemes::{run_schedule, solve_penalized, step_backward, PenalizedConfig, SolveReport};
pub use stepper::{SliceInit, StepError};
