//! Fixed-grid integration of state, variational and costate equations.
//!
//! Everything lives on one uniform grid with piecewise-constant controls
//! (value `u_k` on `[t_k, t_{k+1})`). The state is advanced by classical RK4
//! with the control frozen per cell. Linearizations are the *exact*
//! derivatives of the discrete RK4 step (stage chain rule), so variational
//! solutions, fundamental matrices and backward costates are consistent with
//! `simulate` to machine precision, and the costate/variation pairing is
//! conserved exactly for autonomous linearizations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::system::ControlSystem;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl Grid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Grid {
        assert!(steps >= 1 && t1 > t0, "degenerate grid");
        Grid { t0, t1, steps }
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("control dimension mismatch: expected {expected} samples of dim {dim}")]
    ControlShape { expected: usize, dim: usize },
}

/// A sampled process: state on the nodes, control per cell.
#[derive(Debug, Clone)]
pub struct Process {
    pub grid: Grid,
    /// N+1 states.
    pub x: Vec<DVector<f64>>,
    /// N controls, one per cell.
    pub u: Vec<DVector<f64>>,
    /// Worst per-step defect `|x_{k+1} - rk4(x_k, u_k)|` (zero when the
    /// trajectory was produced by `simulate`).
    pub dyn_defect: f64,
    /// True if some node left the declared state box (reported, not fatal).
    pub left_state_box: bool,
}

impl Process {
    pub fn x0(&self) -> &DVector<f64> {
        &self.x[0]
    }

    pub fn x_end(&self) -> &DVector<f64> {
        &self.x[self.grid.steps]
    }

    /// Endpoint pair (x(t0), x(t1)) stacked in R^{2n}.
    pub fn endpoints(&self) -> DVector<f64> {
        let n = self.x[0].len();
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(self.x0());
        z.rows_mut(n, n).copy_from(self.x_end());
        z
    }

    /// Control at node k (last cell's value at the final node).
    pub fn u_at_node(&self, k: usize) -> &DVector<f64> {
        &self.u[k.min(self.u.len() - 1)]
    }

    pub fn max_deviation(&self, other: &Process) -> f64 {
        self.x
            .iter()
            .zip(other.x.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

pub(crate) struct CellStages {
    pub t: [f64; 4],
    pub x: [DVector<f64>; 4],
}

pub(crate) fn rk4_cell(
    system: &ControlSystem,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, CellStages) {
    let dynamics = &system.dynamics;
    let k1 = dynamics.value(t, x, u);
    let s2 = x + &k1 * (dt / 2.0);
    let k2 = dynamics.value(t + dt / 2.0, &s2, u);
    let s3 = x + &k2 * (dt / 2.0);
    let k3 = dynamics.value(t + dt / 2.0, &s3, u);
    let s4 = x + &k3 * dt;
    let k4 = dynamics.value(t + dt, &s4, u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let stages = CellStages {
        t: [t, t + dt / 2.0, t + dt / 2.0, t + dt],
        x: [x.clone(), s2, s3, s4],
    };
    (next, stages)
}

fn in_box(x: &DVector<f64>, state_box: &[(f64, f64)]) -> bool {
    x.iter()
        .zip(state_box.iter())
        .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
}

/// Integrate the system with the given per-cell controls.
pub fn simulate(
    system: &ControlSystem,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    grid: Grid,
) -> Result<Process, SimulateError> {
    if controls.len() != grid.steps || controls.iter().any(|u| u.len() != system.r) {
        return Err(SimulateError::ControlShape {
            expected: grid.steps,
            dim: system.r,
        });
    }
    let dt = grid.dt();
    let mut x = Vec::with_capacity(grid.steps + 1);
    x.push(x0.clone());
    let mut left_state_box = !in_box(x0, &system.state_box);
    for k in 0..grid.steps {
        let (next, _) = rk4_cell(system, grid.time(k), &x[k], &controls[k], dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SimulateError::NonFinite { step: k + 1 });
        }
        left_state_box |= !in_box(&next, &system.state_box);
        x.push(next);
    }
    Ok(Process {
        grid,
        x,
        u: controls.to_vec(),
        dyn_defect: 0.0,
        left_state_box,
    })
}

/// Recompute the dynamics defect of an externally supplied trajectory.
pub fn dynamics_defect(system: &ControlSystem, process: &Process) -> f64 {
    let dt = process.grid.dt();
    let mut worst: f64 = 0.0;
    for k in 0..process.grid.steps {
        let (pred, _) = rk4_cell(system, process.grid.time(k), &process.x[k], &process.u[k], dt);
        worst = worst.max((&process.x[k + 1] - pred).norm());
    }
    worst
}

/// Exact derivatives of the discrete RK4 step: `jac[k] = d x_{k+1} / d x_k`
/// and `ctrl[k] = d x_{k+1} / d u_k`.
pub struct LinearizedCells {
    pub jac: Vec<DMatrix<f64>>,
    pub ctrl: Vec<DMatrix<f64>>,
}

pub fn linearize(system: &ControlSystem, process: &Process) -> LinearizedCells {
    let n = system.n;
    let dt = process.grid.dt();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut jac = Vec::with_capacity(process.grid.steps);
    let mut ctrl = Vec::with_capacity(process.grid.steps);
    for k in 0..process.grid.steps {
        let u = &process.u[k];
        let (_, st) = rk4_cell(system, process.grid.time(k), &process.x[k], u, dt);
        let a: Vec<DMatrix<f64>> = (0..4)
            .map(|i| system.dynamics.jac_x(st.t[i], &st.x[i], u))
            .collect();
        let b: Vec<DMatrix<f64>> = (0..4)
            .map(|i| system.dynamics.jac_u(st.t[i], &st.x[i], u))
            .collect();
        let k1 = a[0].clone();
        let k2 = &a[1] * (&eye + &k1 * (dt / 2.0));
        let k3 = &a[2] * (&eye + &k2 * (dt / 2.0));
        let k4 = &a[3] * (&eye + &k3 * dt);
        jac.push(&eye + (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0));
        let c1 = b[0].clone();
        let c2 = &a[1] * &c1 * (dt / 2.0) + &b[1];
        let c3 = &a[2] * &c2 * (dt / 2.0) + &b[2];
        let c4 = &a[3] * &c3 * dt + &b[3];
        ctrl.push((c1 + c2 * 2.0 + c3 * 2.0 + c4) * (dt / 6.0));
    }
    LinearizedCells { jac, ctrl }
}

/// Transition matrices `Phi(t_k, t0)` of the linearized dynamics along a
/// process.
pub struct FundamentalMatrix {
    pub phi: Vec<DMatrix<f64>>,
}

impl FundamentalMatrix {
    pub fn end(&self) -> &DMatrix<f64> {
        self.phi.last().unwrap()
    }
}

pub fn fundamental_matrix(cells: &LinearizedCells, n: usize) -> FundamentalMatrix {
    let mut phi = Vec::with_capacity(cells.jac.len() + 1);
    phi.push(DMatrix::identity(n, n));
    for j in &cells.jac {
        let next = j * phi.last().unwrap();
        phi.push(next);
    }
    FundamentalMatrix { phi }
}

/// Costate trajectory for a multiplier pair, integrated backward with the
/// transpose of the exact step Jacobians.
#[derive(Debug, Clone)]
pub struct Costate {
    /// N+1 covectors (stored as columns).
    pub p: Vec<DVector<f64>>,
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    /// Initial-condition residual `rho = p(t0) - (f_z1^T l1 + g_z1^T l2)`;
    /// linear in the multipliers.
    pub residual: DVector<f64>,
}

pub fn costate_solve(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
    lambda1: &DVector<f64>,
    lambda2: &DVector<f64>,
) -> Costate {
    let n = system.n;
    let z = process.endpoints();
    let fj = system.f.jac(&z);
    let gj = system.g.jac(&z);
    let f1t = fj.columns(0, n).transpose();
    let f2t = fj.columns(n, n).transpose();
    let g1t = gj.columns(0, n).transpose();
    let g2t = gj.columns(n, n).transpose();

    let p_end = -(&f2t * lambda1) - &g2t * lambda2;
    let mut p = vec![DVector::zeros(n); process.grid.steps + 1];
    p[process.grid.steps] = p_end;
    for k in (0..process.grid.steps).rev() {
        p[k] = cells.jac[k].transpose() * &p[k + 1];
    }
    let residual = &p[0] - (&f1t * lambda1 + &g1t * lambda2);
    Costate {
        p,
        lambda1: lambda1.clone(),
        lambda2: lambda2.clone(),
        residual,
    }
}

/// Composite trapezoid rule for node samples on a uniform grid.
pub fn quadrature(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}

/// CSV dump with header `t,x1..xn,u1..ur`; the final row repeats the last
/// cell's control.
pub fn trajectory_csv(process: &Process) -> String {
    let n = process.x[0].len();
    let r = process.u[0].len();
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 1..=r {
        out.push_str(&format!(",u{i}"));
    }
    out.push('\n');
    for k in 0..=process.grid.steps {
        out.push_str(&format!("{:.12e}", process.grid.time(k)));
        for v in process.x[k].iter() {
            out.push_str(&format!(",{v:.12e}"));
        }
        for v in process.u_at_node(k).iter() {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    out
}

/// CSV dump of a costate with header `t,p1..pn`.
pub fn costate_csv(grid: &Grid, costate: &Costate) -> String {
    let n = costate.p[0].len();
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    for k in 0..=grid.steps {
        out.push_str(&format!("{:.12e}", grid.time(k)));
        for v in costate.p[k].iter() {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    out
}

pub fn constant_controls(value: &DVector<f64>, steps: usize) -> Vec<DVector<f64>> {
    vec![value.clone(); steps]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_builtin;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn example1_equilibrium() {
        let (sys, r) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        let grid = Grid::new(r.t0, r.t1, 200);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 200), grid).unwrap();
        for x in &proc.x {
            assert_eq!(x.norm(), 0.0);
        }
    }

    #[test]
    fn example2_reference_is_linear_in_time() {
        let (sys, r) = build_builtin("example2", &params(&[("a", -3.0)])).unwrap();
        let grid = Grid::new(0.0, 1.0, 200);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 200), grid).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..=200 {
            let t = grid.time(k);
            worst = worst.max((proc.x[k][0] - t).abs().max((proc.x[k][1] - t).abs()));
        }
        assert!(worst <= 1e-10, "worst deviation {worst}");
    }

    #[test]
    fn double_integrator_closed_form() {
        let (sys, r) = build_builtin("double_integrator", &BTreeMap::new()).unwrap();
        let grid = Grid::new(0.0, 1.0, 100);
        let u = DVector::from_vec(vec![1.0]);
        let proc = simulate(&sys, &r.x0, &constant_controls(&u, 100), grid).unwrap();
        assert_relative_eq!(proc.x_end()[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(proc.x_end()[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn fundamental_matrix_identity_and_shear() {
        let (sys, r) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        let grid = Grid::new(0.0, 4.0, 50);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 50), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let fund = fundamental_matrix(&cells, sys.n);
        for phi in &fund.phi {
            assert!((phi - DMatrix::<f64>::identity(2, 2)).norm() <= 1e-14);
        }

        let (di, rr) = build_builtin("double_integrator", &BTreeMap::new()).unwrap();
        let proc = simulate(&di, &rr.x0, &constant_controls(&rr.u_const, 50), grid).unwrap();
        let cells = linearize(&di, &proc);
        let fund = fundamental_matrix(&cells, di.n);
        for (k, phi) in fund.phi.iter().enumerate() {
            let t = grid.time(k);
            let expected = DMatrix::from_row_slice(2, 2, &[1.0, t, 0.0, 1.0]);
            assert!((phi - expected).norm() <= 1e-10);
        }
    }

    #[test]
    fn costate_example1_constant() {
        let (sys, r) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        let grid = Grid::new(0.0, 4.0, 100);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 100), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let l1 = DVector::zeros(0);
        // lambda2 = (0, a, 0, -a) with a = -1 closes the boundary conditions
        let l2 = DVector::from_vec(vec![0.0, -1.0, 0.0, 1.0]);
        let costate = costate_solve(&sys, &proc, &cells, &l1, &l2);
        for p in &costate.p {
            assert!((p - DVector::from_vec(vec![0.0, -1.0])).norm() <= 1e-14);
        }
        assert!(costate.residual.norm() <= 1e-14);

        let zero = costate_solve(&sys, &proc, &cells, &l1, &DVector::zeros(4));
        assert_eq!(zero.residual.norm(), 0.0);
        for p in &zero.p {
            assert_eq!(p.norm(), 0.0);
        }
    }

    #[test]
    fn costate_residual_matches_transition_formula() {
        let (sys, r) = build_builtin("double_integrator", &BTreeMap::new()).unwrap();
        let grid = Grid::new(0.0, 1.0, 80);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 80), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let fund = fundamental_matrix(&cells, sys.n);
        let z = proc.endpoints();
        let gj = sys.g.jac(&z);
        let g1t = gj.columns(0, 2).transpose();
        let g2t = gj.columns(2, 2).transpose();
        let l1 = DVector::zeros(0);
        for col in 0..4 {
            let mut l2 = DVector::zeros(4);
            l2[col] = 1.0;
            let costate = costate_solve(&sys, &proc, &cells, &l1, &l2);
            // rho = Phi(t1,t0)^T p(t1) - g_z1^T l2
            let direct = fund.end().transpose() * (-(&g2t * &l2)) - &g1t * &l2;
            assert!((costate.residual.clone() - direct).norm() <= 1e-10);
        }
    }

    #[test]
    fn pairing_is_conserved() {
        // <p(t_k), h(t_k)> constant along homogeneous variations
        for (name, ps) in [
            ("example1", params(&[("T", 4.0)])),
            ("double_integrator", BTreeMap::new()),
            ("uncontrolled_linear", BTreeMap::new()),
        ] {
            let (sys, r) = build_builtin(name, &ps).unwrap();
            let grid = Grid::new(r.t0, r.t1, 120);
            let proc =
                simulate(&sys, &r.x0, &constant_controls(&r.u_const, 120), grid).unwrap();
            let cells = linearize(&sys, &proc);
            let mut l2 = DVector::zeros(sys.m2);
            for (i, v) in [0.3, -0.7, 0.2, 0.9].iter().enumerate() {
                if i < sys.m2 {
                    l2[i] = *v;
                }
            }
            let costate = costate_solve(&sys, &proc, &cells, &DVector::zeros(sys.m1), &l2);
            let mut h = DVector::from_iterator(sys.n, (0..sys.n).map(|i| 0.5 + i as f64));
            let pairing0 = costate.p[0].dot(&h);
            let scale = pairing0.abs().max(1.0);
            for k in 0..grid.steps {
                h = &cells.jac[k] * &h;
                let drift = (costate.p[k + 1].dot(&h) - pairing0).abs() / scale;
                assert!(drift <= 1e-8, "{name}: pairing drift {drift}");
            }
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let (sys, r) = build_builtin("uncontrolled_linear", &BTreeMap::new()).unwrap();
        let x0 = DVector::from_vec(vec![1.0]);
        let mut errors = Vec::new();
        for steps in [10usize, 20, 40] {
            let grid = Grid::new(0.0, 1.0, steps);
            let proc =
                simulate(&sys, &x0, &constant_controls(&r.u_const, steps), grid).unwrap();
            errors.push((proc.x_end()[0] - 1f64.exp()).abs());
        }
        let slope1 = (errors[0] / errors[1]).log2();
        let slope2 = (errors[1] / errors[2]).log2();
        assert!(slope1 > 3.8 && slope2 > 3.8, "slopes {slope1} {slope2}");
    }

    #[test]
    fn quadrature_oracles() {
        let n = 200;
        let dt = std::f64::consts::PI / n as f64;
        let vals: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).sin()).collect();
        assert!((quadrature(&vals, dt) - 2.0).abs() <= 1e-4);

        let ones = vec![1.0; 11];
        assert_relative_eq!(quadrature(&ones, 0.1), 1.0, epsilon = 1e-14);

        let n = 100;
        let dt = 1.0 / n as f64;
        let vals: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powi(2)).collect();
        assert!((quadrature(&vals, dt) - 1.0 / 3.0).abs() <= 1e-4);
    }

    #[test]
    fn costate_residual_is_linear() {
        let (sys, r) = build_builtin("example2", &params(&[("a", -1.0)])).unwrap();
        let grid = Grid::new(0.0, 1.0, 60);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 60), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let l1 = DVector::zeros(0);
        let a = DVector::from_vec(vec![0.2, -0.5, 1.0, 0.7]);
        let b = DVector::from_vec(vec![-1.0, 0.3, 0.0, 2.0]);
        let ra = costate_solve(&sys, &proc, &cells, &l1, &a).residual;
        let rb = costate_solve(&sys, &proc, &cells, &l1, &b).residual;
        let combo = costate_solve(&sys, &proc, &cells, &l1, &(&a * 0.3 + &b * -1.7)).residual;
        assert!((combo - (ra * 0.3 + rb * -1.7)).norm() <= 1e-12);
    }
}
