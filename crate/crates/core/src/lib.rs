//! Numerical local-controllability analysis for control dynamical systems
//! with endpoint constraints.
//!
//! Given a reference process of `xdot = phi(t, x, u)` with endpoint
//! inequality constraints `f(x(t0), x(t1)) <= 0` and equalities
//! `g(x(t0), x(t1)) = 0`, the library
//!
//! * computes the multiplier cone (costate + boundary + complementary
//!   slackness + Hamiltonian-maximum conditions) and classifies its
//!   abnormality order, pointedness and singularity;
//! * assembles the second-order quadratic form on the cone of admissible
//!   first-order variations and searches for a negativity certificate, which
//!   decides local controllability in the first-order-abnormality case;
//! * constructs explicit steering controls for nearby endpoint targets with
//!   the square-root deviation law, using a degenerate-Newton fixed-point
//!   corrector plus chattering mixes of controls;
//! * checks second-order necessary conditions for a strong minimum when a
//!   cost functional is supplied.

pub mod analysis;
pub mod cone_geom;
pub mod corrector;
pub mod expr;
pub mod kernel;
pub mod linalg;
pub mod multiplier;
pub mod optimality;
pub mod quadform;
pub mod scenario;
pub mod system;
pub mod trajectory;

pub use analysis::{analyze, AnalysisReport, Verdict};
pub use scenario::Scenario;
pub use system::{build_builtin, verify_derivatives, ControlSet, ControlSystem};
pub use trajectory::{simulate, Grid, Process};

use serde::{Deserialize, Serialize};

/// Central tolerance configuration; scenario files may override fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Tolerances {
    /// Per-step dynamics defect allowed for an admissible process.
    pub dyn_defect: f64,
    /// Endpoint residual allowed for an admissible process.
    pub admissibility: f64,
    /// |<lambda1, f>| allowed for cone members.
    pub complementarity: f64,
    /// Allowed negativity of lambda1 entries.
    pub sign_tol: f64,
    /// Costate initial-condition residual allowed for cone members.
    pub boundary_residual: f64,
    /// Relative singular-value threshold for nullspaces.
    pub svd_rel: f64,
    /// Constraint residual allowed for kernel-cone members.
    pub cone_residual: f64,
    /// Relative threshold for Q-negativity: tol_q = q_rel * ||Q||.
    pub q_rel: f64,
    /// Hamiltonian maximum margin.
    pub ham_margin: f64,
    /// Lattice points per control axis for the Hamiltonian check.
    pub ham_lattice: usize,
    /// Largest |y| accepted by the steering corrector.
    pub reach_radius: f64,
    /// Fixed-point residual target of the steering corrector.
    pub reach_tol: f64,
    /// Iteration cap of the steering corrector.
    pub reach_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            dyn_defect: 1e-8,
            admissibility: 1e-6,
            complementarity: 1e-9,
            sign_tol: 1e-9,
            boundary_residual: 1e-8,
            svd_rel: 1e-9,
            cone_residual: 1e-9,
            q_rel: 1e-8,
            ham_margin: 1e-7,
            ham_lattice: 101,
            reach_radius: 1e-2,
            reach_tol: 1e-10,
            reach_max_iter: 200,
        }
    }
}
