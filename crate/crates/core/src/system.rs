//! Control system model: dynamics and endpoint maps with derivative oracles.
//!
//! A [`ControlSystem`] bundles the right-hand side `phi(t, x, u)`, the
//! endpoint inequality map `f(x(t0), x(t1)) <= 0`, the endpoint equality map
//! `g(x(t0), x(t1)) = 0`, and the (open) control set with its compact test
//! window. Derivatives up to second order are available either analytically
//! (built-in scenarios) or by central finite differences (parsed scenarios).

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{self, Expr};

pub const FD_STEP_FIRST: f64 = 1e-6;
pub const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unknown builtin system `{0}`")]
    UnknownBuiltin(String),
    #[error("parameter `{name}` out of range for `{builtin}`: {reason}")]
    BadParam {
        builtin: String,
        name: String,
        reason: String,
    },
}

/// Dynamics oracle `phi` together with its first and second derivatives in
/// `w = (x, u)`.
pub trait Dynamics: Send + Sync {
    fn value(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// n x n Jacobian in x.
    fn jac_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// n x r Jacobian in u.
    fn jac_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// One symmetric (n+r) x (n+r) Hessian per output component, blocks
    /// ordered (x, u).
    fn hess(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

/// Endpoint map on `z = (x(t0), x(t1))` in R^{2n}.
pub trait Endpoint: Send + Sync {
    fn dim_out(&self) -> usize;
    fn value(&self, z: &DVector<f64>) -> DVector<f64>;
    /// m x 2n Jacobian.
    fn jac(&self, z: &DVector<f64>) -> DMatrix<f64>;
    /// One symmetric 2n x 2n Hessian per output component.
    fn hess(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

/// Per-coordinate open interval bounds plus a compact test window used for
/// Hamiltonian-maximum checks on unbounded coordinates.
#[derive(Debug, Clone)]
pub struct ControlSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub test_window: Vec<(f64, f64)>,
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Strict membership (the control set is open).
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        (0..self.dim()).all(|i| u[i] > self.lower[i] && u[i] < self.upper[i])
    }

    pub fn window_contains(&self, u: &DVector<f64>) -> bool {
        self.test_window
            .iter()
            .enumerate()
            .all(|(i, (lo, hi))| u[i] >= *lo && u[i] <= *hi)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.upper.len() != self.lower.len() || self.test_window.len() != self.lower.len() {
            return Err("control set dimension mismatch".into());
        }
        for i in 0..self.dim() {
            if !(self.lower[i] < self.upper[i]) {
                return Err(format!("empty control interval in coordinate {}", i + 1));
            }
            let (lo, hi) = self.test_window[i];
            if !(lo < hi) || lo <= self.lower[i] || hi >= self.upper[i] {
                return Err(format!(
                    "test window must be a nonempty compact box inside the open bounds (coordinate {})",
                    i + 1
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct ControlSystem {
    pub n: usize,
    pub r: usize,
    pub m1: usize,
    pub m2: usize,
    pub dynamics: Arc<dyn Dynamics>,
    /// Inequality endpoint block (m1 rows; may be empty).
    pub f: Arc<dyn Endpoint>,
    /// Equality endpoint block (m2 rows; may be empty).
    pub g: Arc<dyn Endpoint>,
    pub control_set: ControlSet,
    /// Declared bounding box for states; derivative checks sample inside it
    /// and trajectories leaving it are reported.
    pub state_box: Vec<(f64, f64)>,
}

impl ControlSystem {
    pub fn hamiltonian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> f64 {
        p.dot(&self.dynamics.value(t, x, u))
    }

    /// Hessian of `<p, phi>` in `w = (x,u)`: the H_ww block entering the
    /// quadratic form.
    pub fn hamiltonian_hess_ww(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: &DVector<f64>,
    ) -> DMatrix<f64> {
        let hs = self.dynamics.hess(t, x, u);
        let d = self.n + self.r;
        let mut out = DMatrix::zeros(d, d);
        for (i, h) in hs.iter().enumerate() {
            out += h * p[i];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// finite differences

/// Central-difference Jacobian of `func` at `x0`, step `scale * max(1, |x_i|)`.
pub fn fd_jacobian<F>(func: F, x0: &DVector<f64>, out_dim: usize, scale: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = x0.len();
    let mut jac = DMatrix::zeros(out_dim, d);
    for j in 0..d {
        let h = scale * x0[j].abs().max(1.0);
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (func(&xp) - func(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Central-difference Hessians (one per output component) of `func` at `x0`.
pub fn fd_hessians<F>(func: F, x0: &DVector<f64>, out_dim: usize, scale: f64) -> Vec<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = x0.len();
    let mut hs = vec![DMatrix::zeros(d, d); out_dim];
    let step = |j: usize| scale * x0[j].abs().max(1.0);
    for i in 0..d {
        let hi = step(i);
        for j in i..d {
            let hj = step(j);
            let mut xpp = x0.clone();
            let mut xpm = x0.clone();
            let mut xmp = x0.clone();
            let mut xmm = x0.clone();
            xpp[i] += hi;
            xpp[j] += hj;
            xpm[i] += hi;
            xpm[j] -= hj;
            xmp[i] -= hi;
            xmp[j] += hj;
            xmm[i] -= hi;
            xmm[j] -= hj;
            let num = func(&xpp) - func(&xpm) - func(&xmp) + func(&xmm);
            for c in 0..out_dim {
                let v = num[c] / (4.0 * hi * hj);
                hs[c][(i, j)] = v;
                hs[c][(j, i)] = v;
            }
        }
    }
    hs
}

// ---------------------------------------------------------------------------
// expression-backed dynamics / endpoints

/// Dynamics defined by one expression per state coordinate; derivatives by
/// central finite differences of the parsed expressions.
pub struct ParsedDynamics {
    pub n: usize,
    pub r: usize,
    exprs: Vec<Expr>,
    param_values: Vec<f64>,
}

impl ParsedDynamics {
    /// Variable table: `t, x1..xn, u1..ur`, then parameter names.
    pub fn new(
        sources: &[String],
        n: usize,
        r: usize,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, expr::ExprError> {
        let mut vars: Vec<String> = vec!["t".to_string()];
        for i in 1..=n {
            vars.push(format!("x{i}"));
        }
        for i in 1..=r {
            vars.push(format!("u{i}"));
        }
        let mut param_values = Vec::new();
        for (name, value) in params {
            vars.push(name.clone());
            param_values.push(*value);
        }
        let exprs = sources
            .iter()
            .map(|s| expr::parse(s, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParsedDynamics {
            n,
            r,
            exprs,
            param_values,
        })
    }

    fn eval_at(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut vars = Vec::with_capacity(1 + self.n + self.r + self.param_values.len());
        vars.push(t);
        vars.extend(x.iter().copied());
        vars.extend(u.iter().copied());
        vars.extend(self.param_values.iter().copied());
        DVector::from_iterator(self.exprs.len(), self.exprs.iter().map(|e| e.eval(&vars)))
    }

    fn eval_w(&self, t: f64, w: &DVector<f64>) -> DVector<f64> {
        let x = DVector::from_iterator(self.n, w.iter().take(self.n).copied());
        let u = DVector::from_iterator(self.r, w.iter().skip(self.n).copied());
        self.eval_at(t, &x, &u)
    }
}

impl Dynamics for ParsedDynamics {
    fn value(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.eval_at(t, x, u)
    }

    fn jac_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|xx| self.eval_at(t, xx, u), x, self.n, FD_STEP_FIRST)
    }

    fn jac_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|uu| self.eval_at(t, x, uu), u, self.n, FD_STEP_FIRST)
    }

    fn hess(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut w = DVector::zeros(self.n + self.r);
        w.rows_mut(0, self.n).copy_from(x);
        w.rows_mut(self.n, self.r).copy_from(u);
        fd_hessians(|ww| self.eval_w(t, ww), &w, self.n, FD_STEP_SECOND)
    }
}

/// Endpoint map defined by expressions in `z1..z2n` (plus parameters).
pub struct ParsedEndpoint {
    dim_in: usize,
    exprs: Vec<Expr>,
    param_values: Vec<f64>,
}

impl ParsedEndpoint {
    pub fn new(
        sources: &[String],
        n: usize,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, expr::ExprError> {
        let mut vars: Vec<String> = (1..=2 * n).map(|i| format!("z{i}")).collect();
        let mut param_values = Vec::new();
        for (name, value) in params {
            vars.push(name.clone());
            param_values.push(*value);
        }
        let exprs = sources
            .iter()
            .map(|s| expr::parse(s, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParsedEndpoint {
            dim_in: 2 * n,
            exprs,
            param_values,
        })
    }

    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut vars = Vec::with_capacity(self.dim_in + self.param_values.len());
        vars.extend(z.iter().copied());
        vars.extend(self.param_values.iter().copied());
        DVector::from_iterator(self.exprs.len(), self.exprs.iter().map(|e| e.eval(&vars)))
    }
}

impl Endpoint for ParsedEndpoint {
    fn dim_out(&self) -> usize {
        self.exprs.len()
    }

    fn value(&self, z: &DVector<f64>) -> DVector<f64> {
        self.eval(z)
    }

    fn jac(&self, z: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|zz| self.eval(zz), z, self.exprs.len(), FD_STEP_FIRST)
    }

    fn hess(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        fd_hessians(|zz| self.eval(zz), z, self.exprs.len(), FD_STEP_SECOND)
    }
}

// ---------------------------------------------------------------------------
// analytic endpoints and built-in systems

/// Affine endpoint map `A z + b`.
pub struct LinearEndpoint {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearEndpoint {
    /// Pins the listed coordinates of `(x(t0), x(t1))` to target values.
    pub fn pin(n: usize, pins: &[(usize, f64)]) -> Self {
        let m = pins.len();
        let mut a = DMatrix::zeros(m, 2 * n);
        let mut b = DVector::zeros(m);
        for (row, (idx, target)) in pins.iter().enumerate() {
            a[(row, *idx)] = 1.0;
            b[row] = -target;
        }
        LinearEndpoint { a, b }
    }

    pub fn empty(n: usize) -> Self {
        LinearEndpoint {
            a: DMatrix::zeros(0, 2 * n),
            b: DVector::zeros(0),
        }
    }
}

impl Endpoint for LinearEndpoint {
    fn dim_out(&self) -> usize {
        self.a.nrows()
    }

    fn value(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b
    }

    fn jac(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn hess(&self, _z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.a.ncols(), self.a.ncols()); self.a.nrows()]
    }
}

struct Example1Dynamics;

impl Dynamics for Example1Dynamics {
    fn value(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![u[0], u[0] * u[0] - x[0] * x[0]])
    }

    fn jac_x(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -2.0 * x[0], 0.0])
    }

    fn jac_u(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[1.0, 2.0 * u[0]])
    }

    fn hess(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let h1 = DMatrix::zeros(3, 3);
        let mut h2 = DMatrix::zeros(3, 3);
        h2[(0, 0)] = -2.0;
        h2[(2, 2)] = 2.0;
        vec![h1, h2]
    }
}

struct Example2Dynamics;

impl Dynamics for Example2Dynamics {
    fn value(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![u[0], u[0] * u[0] * u[0]])
    }

    fn jac_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }

    fn jac_u(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[1.0, 3.0 * u[0] * u[0]])
    }

    fn hess(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let h1 = DMatrix::zeros(3, 3);
        let mut h2 = DMatrix::zeros(3, 3);
        h2[(2, 2)] = 6.0 * u[0];
        vec![h1, h2]
    }
}

struct DoubleIntegratorDynamics;

impl Dynamics for DoubleIntegratorDynamics {
    fn value(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], u[0]])
    }

    fn jac_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }

    fn jac_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
    }

    fn hess(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)]
    }
}

/// Scalar `xdot = x` with a control input that does not enter the dynamics;
/// every multiplier has a u-constant Hamiltonian, which makes the reference
/// process singular.
struct UncontrolledLinearDynamics;

impl Dynamics for UncontrolledLinearDynamics {
    fn value(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0]])
    }

    fn jac_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 1, &[1.0])
    }

    fn jac_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn hess(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(2, 2)]
    }
}

fn get_param(
    builtin: &str,
    params: &BTreeMap<String, f64>,
    name: &str,
    default: Option<f64>,
) -> Result<f64, SystemError> {
    match (params.get(name), default) {
        (Some(v), _) => Ok(*v),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(SystemError::BadParam {
            builtin: builtin.to_string(),
            name: name.to_string(),
            reason: "required parameter missing".into(),
        }),
    }
}

/// Reference process and grid that make a built-in system's canonical
/// scenario admissible.
pub struct BuiltinReference {
    pub x0: DVector<f64>,
    pub u_const: DVector<f64>,
    pub t0: f64,
    pub t1: f64,
}

/// Construct a built-in system with exact analytic derivatives.
///
/// Supported: `example1` (param `T`), `example2` (param `a < 1`),
/// `double_integrator`, `uncontrolled_linear`.
pub fn build_builtin(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<(ControlSystem, BuiltinReference), SystemError> {
    match name {
        "example1" => {
            let t_end = get_param(name, params, "T", Some(4.0))?;
            if t_end <= 0.0 {
                return Err(SystemError::BadParam {
                    builtin: name.into(),
                    name: "T".into(),
                    reason: "horizon must be positive".into(),
                });
            }
            let system = ControlSystem {
                n: 2,
                r: 1,
                m1: 0,
                m2: 4,
                dynamics: Arc::new(Example1Dynamics),
                f: Arc::new(LinearEndpoint::empty(2)),
                g: Arc::new(LinearEndpoint::pin(
                    2,
                    &[(0, 0.0), (1, 0.0), (2, 0.0), (3, 0.0)],
                )),
                control_set: ControlSet {
                    lower: vec![f64::NEG_INFINITY],
                    upper: vec![f64::INFINITY],
                    test_window: vec![(-2.0, 2.0)],
                },
                state_box: vec![(-10.0, 10.0), (-10.0, 10.0)],
            };
            let reference = BuiltinReference {
                x0: DVector::zeros(2),
                u_const: DVector::zeros(1),
                t0: 0.0,
                t1: t_end,
            };
            Ok((system, reference))
        }
        "example2" => {
            let a = get_param(name, params, "a", None)?;
            if a >= 1.0 {
                return Err(SystemError::BadParam {
                    builtin: name.into(),
                    name: "a".into(),
                    reason: "requires a < 1".into(),
                });
            }
            let system = ControlSystem {
                n: 2,
                r: 1,
                m1: 0,
                m2: 4,
                dynamics: Arc::new(Example2Dynamics),
                f: Arc::new(LinearEndpoint::empty(2)),
                g: Arc::new(LinearEndpoint::pin(
                    2,
                    &[(0, 0.0), (1, 0.0), (2, 1.0), (3, 1.0)],
                )),
                control_set: ControlSet {
                    lower: vec![a],
                    upper: vec![f64::INFINITY],
                    test_window: vec![(a + 0.05, 4.0)],
                },
                state_box: vec![(-10.0, 10.0), (-10.0, 10.0)],
            };
            let reference = BuiltinReference {
                x0: DVector::zeros(2),
                u_const: DVector::from_vec(vec![1.0]),
                t0: 0.0,
                t1: 1.0,
            };
            Ok((system, reference))
        }
        "double_integrator" => {
            let system = ControlSystem {
                n: 2,
                r: 1,
                m1: 0,
                m2: 4,
                dynamics: Arc::new(DoubleIntegratorDynamics),
                f: Arc::new(LinearEndpoint::empty(2)),
                g: Arc::new(LinearEndpoint::pin(
                    2,
                    &[(0, 0.0), (1, 0.0), (2, 0.0), (3, 0.0)],
                )),
                control_set: ControlSet {
                    lower: vec![f64::NEG_INFINITY],
                    upper: vec![f64::INFINITY],
                    test_window: vec![(-2.0, 2.0)],
                },
                state_box: vec![(-10.0, 10.0), (-10.0, 10.0)],
            };
            let reference = BuiltinReference {
                x0: DVector::zeros(2),
                u_const: DVector::zeros(1),
                t0: 0.0,
                t1: 1.0,
            };
            Ok((system, reference))
        }
        "uncontrolled_linear" => {
            let system = ControlSystem {
                n: 1,
                r: 1,
                m1: 0,
                m2: 2,
                dynamics: Arc::new(UncontrolledLinearDynamics),
                f: Arc::new(LinearEndpoint::empty(1)),
                g: Arc::new(LinearEndpoint::pin(1, &[(0, 0.0), (1, 0.0)])),
                control_set: ControlSet {
                    lower: vec![f64::NEG_INFINITY],
                    upper: vec![f64::INFINITY],
                    test_window: vec![(-1.0, 1.0)],
                },
                state_box: vec![(-10.0, 10.0)],
            };
            let reference = BuiltinReference {
                x0: DVector::zeros(1),
                u_const: DVector::zeros(1),
                t0: 0.0,
                t1: 1.0,
            };
            Ok((system, reference))
        }
        other => Err(SystemError::UnknownBuiltin(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// derivative verification

/// Worst relative error per derivative block, analytic vs central finite
/// differences of the value oracles.
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub phi_jac_x: f64,
    pub phi_jac_u: f64,
    pub phi_hess: f64,
    pub f_jac: f64,
    pub f_hess: f64,
    pub g_jac: f64,
    pub g_hess: f64,
}

impl DerivativeReport {
    pub fn worst_first_order(&self) -> f64 {
        self.phi_jac_x.max(self.phi_jac_u).max(self.f_jac).max(self.g_jac)
    }

    pub fn worst_second_order(&self) -> f64 {
        self.phi_hess.max(self.f_hess).max(self.g_hess)
    }
}

fn rel_err(reported: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (reported - reference).norm();
    diff / reference.norm().max(1.0)
}

/// Compare the system's derivative oracles against finite differences of its
/// value oracles at `samples` points drawn inside the state box and test
/// window. Report-only.
pub fn verify_derivatives(system: &ControlSystem, samples: usize, seed: u64) -> DerivativeReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = DerivativeReport {
        phi_jac_x: 0.0,
        phi_jac_u: 0.0,
        phi_hess: 0.0,
        f_jac: 0.0,
        f_hess: 0.0,
        g_jac: 0.0,
        g_hess: 0.0,
    };
    let dyn_ = &system.dynamics;
    for _ in 0..samples.max(1) {
        let t: f64 = rng.random_range(0.0..1.0);
        let x = DVector::from_iterator(
            system.n,
            system
                .state_box
                .iter()
                .map(|(lo, hi)| rng.random_range(*lo..*hi)),
        );
        let u = DVector::from_iterator(
            system.r,
            system
                .control_set
                .test_window
                .iter()
                .map(|(lo, hi)| rng.random_range(*lo..*hi)),
        );

        let jx_fd = fd_jacobian(|xx| dyn_.value(t, xx, &u), &x, system.n, FD_STEP_FIRST);
        report.phi_jac_x = report.phi_jac_x.max(rel_err(&dyn_.jac_x(t, &x, &u), &jx_fd));
        let ju_fd = fd_jacobian(|uu| dyn_.value(t, &x, uu), &u, system.n, FD_STEP_FIRST);
        report.phi_jac_u = report.phi_jac_u.max(rel_err(&dyn_.jac_u(t, &x, &u), &ju_fd));

        let mut w = DVector::zeros(system.n + system.r);
        w.rows_mut(0, system.n).copy_from(&x);
        w.rows_mut(system.n, system.r).copy_from(&u);
        let h_fd = fd_hessians(
            |ww| {
                let xx = ww.rows(0, system.n).into_owned();
                let uu = ww.rows(system.n, system.r).into_owned();
                dyn_.value(t, &xx, &uu)
            },
            &w,
            system.n,
            FD_STEP_SECOND,
        );
        for (ha, hf) in dyn_.hess(t, &x, &u).iter().zip(h_fd.iter()) {
            report.phi_hess = report.phi_hess.max(rel_err(ha, hf));
        }

        let z = DVector::from_iterator(
            2 * system.n,
            system
                .state_box
                .iter()
                .chain(system.state_box.iter())
                .map(|(lo, hi)| rng.random_range(*lo..*hi)),
        );
        for (map, jac_slot, hess_slot) in [
            (&system.f, &mut report.f_jac, &mut report.f_hess),
            (&system.g, &mut report.g_jac, &mut report.g_hess),
        ] {
            if map.dim_out() == 0 {
                continue;
            }
            let j_fd = fd_jacobian(|zz| map.value(zz), &z, map.dim_out(), FD_STEP_FIRST);
            *jac_slot = jac_slot.max(rel_err(&map.jac(&z), &j_fd));
            let h_fd = fd_hessians(|zz| map.value(zz), &z, map.dim_out(), FD_STEP_SECOND);
            for (ha, hf) in map.hess(&z).iter().zip(h_fd.iter()) {
                *hess_slot = hess_slot.max(rel_err(ha, hf));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn builtin_shapes() {
        let (sys, reference) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        assert_eq!((sys.n, sys.r, sys.m1, sys.m2), (2, 1, 0, 4));
        assert_eq!(reference.t1, 4.0);
        let phi = sys
            .dynamics
            .value(0.0, &DVector::from_vec(vec![0.3, 0.0]), &DVector::from_vec(vec![0.2]));
        assert_relative_eq!(phi[0], 0.2);
        assert_relative_eq!(phi[1], 0.04 - 0.09);

        let (sys2, reference2) = build_builtin("example2", &params(&[("a", -3.0)])).unwrap();
        assert_eq!(sys2.control_set.lower[0], -3.0);
        assert_eq!(reference2.u_const[0], 1.0);
        let ends = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(sys2.g.value(&ends).norm(), 0.0);
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(
            build_builtin("nope", &BTreeMap::new()),
            Err(SystemError::UnknownBuiltin(_))
        ));
        assert!(matches!(
            build_builtin("example2", &params(&[("a", 1.5)])),
            Err(SystemError::BadParam { .. })
        ));
        assert!(matches!(
            build_builtin("example2", &BTreeMap::new()),
            Err(SystemError::BadParam { .. })
        ));
    }

    #[test]
    fn builtin_derivatives_match_fd() {
        for (name, ps) in [
            ("example1", params(&[("T", 4.0)])),
            ("example2", params(&[("a", -1.0)])),
            ("double_integrator", BTreeMap::new()),
            ("uncontrolled_linear", BTreeMap::new()),
        ] {
            let (sys, _) = build_builtin(name, &ps).unwrap();
            let report = verify_derivatives(&sys, 100, 1);
            assert!(
                report.worst_first_order() <= 1e-6,
                "{name}: first-order error {}",
                report.worst_first_order()
            );
            assert!(
                report.worst_second_order() <= 1e-4,
                "{name}: second-order error {}",
                report.worst_second_order()
            );
        }
    }

    #[test]
    fn injected_jacobian_error_is_flagged() {
        struct WrongJacobian(Example1Dynamics);
        impl Dynamics for WrongJacobian {
            fn value(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                self.0.value(t, x, u)
            }
            fn jac_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
                self.0.jac_x(t, x, u) + DMatrix::from_element(2, 2, 0.1)
            }
            fn jac_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
                self.0.jac_u(t, x, u)
            }
            fn hess(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
                self.0.hess(t, x, u)
            }
        }
        let (mut sys, _) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        sys.dynamics = Arc::new(WrongJacobian(Example1Dynamics));
        let report = verify_derivatives(&sys, 10, 1);
        assert!(report.phi_jac_x >= 1e-2);
    }

    #[test]
    fn constant_dynamics_fd_is_exact() {
        struct ConstDynamics;
        impl Dynamics for ConstDynamics {
            fn value(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![1.25, -0.5])
            }
            fn jac_x(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(2, 2)
            }
            fn jac_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(2, 1)
            }
            fn hess(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
                vec![DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)]
            }
        }
        let (mut sys, _) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        sys.dynamics = Arc::new(ConstDynamics);
        let report = verify_derivatives(&sys, 5, 1);
        assert!(report.phi_jac_x <= 1e-9);
        assert!(report.phi_jac_u <= 1e-9);
        assert!(report.phi_hess <= 1e-7);
    }

    #[test]
    fn parsed_matches_analytic_example1() {
        let ps = BTreeMap::new();
        let parsed = ParsedDynamics::new(
            &["u1".to_string(), "u1^2 - x1^2".to_string()],
            2,
            1,
            &ps,
        )
        .unwrap();
        let (sys, _) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let u = DVector::from_vec(vec![rng.random_range(-2.0..2.0)]);
            let a = sys.dynamics.value(0.0, &x, &u);
            let b = parsed.value(0.0, &x, &u);
            assert!((a - b).norm() <= 1e-12);
        }
        // FD Jacobians at the spec's probe point
        let x = DVector::from_vec(vec![0.3, 0.0]);
        let u = DVector::from_vec(vec![0.2]);
        let jx = parsed.jac_x(0.0, &x, &u);
        let ju = parsed.jac_u(0.0, &x, &u);
        assert!((jx - DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -0.6, 0.0])).norm() <= 1e-6);
        assert!((ju - DMatrix::from_row_slice(2, 1, &[1.0, 0.4])).norm() <= 1e-6);
    }

    #[test]
    fn control_set_membership_is_open() {
        let cs = ControlSet {
            lower: vec![-3.0],
            upper: vec![f64::INFINITY],
            test_window: vec![(-2.95, 4.0)],
        };
        cs.validate().unwrap();
        assert!(cs.contains(&DVector::from_vec(vec![0.0])));
        assert!(cs.contains(&DVector::from_vec(vec![-2.999])));
        assert!(!cs.contains(&DVector::from_vec(vec![-3.0])));
        assert!(!cs.contains(&DVector::from_vec(vec![-3.5])));
    }
}
