//! Polyhedral model of the cone K of admissible first-order variations.
//!
//! A variation `q = (h0, v)` is an initial-state perturbation plus a
//! piecewise-constant control perturbation; its state part propagates through
//! the exact linearization of the discrete step map, so `h(t1)` is an affine
//! function of the coordinates. The linearized endpoint equalities and
//! inequalities then carve a polyhedral cone out of `R^{n + N*r}`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

use crate::linalg;
use crate::system::ControlSystem;
use crate::trajectory::{LinearizedCells, Process};

#[derive(Debug, Clone)]
pub struct Variation {
    pub h0: DVector<f64>,
    /// N control perturbations.
    pub v: Vec<DVector<f64>>,
    /// N+1 states of the variational equation.
    pub h: Vec<DVector<f64>>,
}

impl Variation {
    /// Endpoint pair (h(t0), h(t1)).
    pub fn eta(&self) -> DVector<f64> {
        let n = self.h0.len();
        let mut e = DVector::zeros(2 * n);
        e.rows_mut(0, n).copy_from(&self.h[0]);
        e.rows_mut(n, n).copy_from(self.h.last().unwrap());
        e
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: DVector<f64>,
    pub active_rows: Vec<usize>,
    pub eq_residual: f64,
    pub ineq_violation: f64,
}

pub struct KernelCone {
    pub n: usize,
    pub r: usize,
    pub steps: usize,
    /// n + N*r.
    pub ambient: usize,
    /// Linearized equality endpoint rows (m2 x ambient).
    pub a_eq: DMatrix<f64>,
    /// Linearized inequality endpoint rows (m1 x ambient).
    pub a_ineq: DMatrix<f64>,
    /// Orthonormal basis of the equality nullspace (ambient x d).
    pub nullspace: DMatrix<f64>,
    /// Exact step Jacobians and control sensitivities of the process.
    pub jac: Vec<DMatrix<f64>>,
    pub ctrl: Vec<DMatrix<f64>>,
}

impl KernelCone {
    pub fn coords_dim(&self) -> usize {
        self.ambient
    }

    pub fn split(&self, coords: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let h0 = coords.rows(0, self.n).into_owned();
        let v = (0..self.steps)
            .map(|k| coords.rows(self.n + k * self.r, self.r).into_owned())
            .collect();
        (h0, v)
    }

    pub fn join(&self, h0: &DVector<f64>, v: &[DVector<f64>]) -> DVector<f64> {
        let mut c = DVector::zeros(self.ambient);
        c.rows_mut(0, self.n).copy_from(h0);
        for (k, vk) in v.iter().enumerate() {
            c.rows_mut(self.n + k * self.r, self.r).copy_from(vk);
        }
        c
    }

    /// Propagate the variational equation for the given coordinates.
    pub fn variation(&self, coords: &DVector<f64>) -> Variation {
        let (h0, v) = self.split(coords);
        let mut h = Vec::with_capacity(self.steps + 1);
        h.push(h0.clone());
        for k in 0..self.steps {
            let next = &self.jac[k] * &h[k] + &self.ctrl[k] * &v[k];
            h.push(next);
        }
        Variation { h0, v, h }
    }

    pub fn eq_residual(&self, coords: &DVector<f64>) -> f64 {
        if self.a_eq.nrows() == 0 {
            0.0
        } else {
            (&self.a_eq * coords).norm()
        }
    }

    pub fn ineq_violation(&self, coords: &DVector<f64>) -> f64 {
        if self.a_ineq.nrows() == 0 {
            0.0
        } else {
            (&self.a_ineq * coords)
                .iter()
                .fold(0.0f64, |acc, v| acc.max(*v))
                .max(0.0)
        }
    }

    /// Orthogonal projection onto the equality nullspace followed by an
    /// active-set correction for violated inequality rows.
    pub fn project(&self, coords: &DVector<f64>) -> Projection {
        let z = &self.nullspace;
        let mut y = z.transpose() * coords;
        let m1 = self.a_ineq.nrows();
        let mut active: Vec<usize> = Vec::new();
        if m1 > 0 {
            let rows = &self.a_ineq * z; // m1 x d
            let y_in = y.clone();
            for _ in 0..(2 * m1 + 4) {
                // project y_in onto { rows y = 0 } for the active rows
                if active.is_empty() {
                    y = y_in.clone();
                } else {
                    let ra = rows.select_rows(active.iter());
                    let (coef, _) = linalg::min_norm_solve(&(ra.clone() * ra.transpose()), &(ra.clone() * &y_in), 1e-12);
                    y = &y_in - ra.transpose() * &coef;
                    // dual feasibility: multipliers must be nonnegative
                    if let Some((worst_idx, worst)) = coef
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, v)| (i, *v))
                    {
                        if worst < -1e-12 {
                            active.remove(worst_idx);
                            continue;
                        }
                    }
                }
                // primal feasibility
                let vals = &rows * &y;
                let mut worst = 1e-12;
                let mut worst_row = None;
                for i in 0..m1 {
                    if !active.contains(&i) && vals[i] > worst {
                        worst = vals[i];
                        worst_row = Some(i);
                    }
                }
                match worst_row {
                    Some(i) => active.push(i),
                    None => break,
                }
            }
        }
        let coords_out = z * &y;
        let eq_residual = self.eq_residual(&coords_out);
        let ineq_violation = self.ineq_violation(&coords_out);
        active.sort_unstable();
        Projection {
            coords: coords_out,
            active_rows: active,
            eq_residual,
            ineq_violation,
        }
    }

    /// Seeded unit-norm members of the cone; empty when the cone is {0}.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Variation> {
        let d = self.nullspace.ncols();
        let mut out = Vec::new();
        if d == 0 {
            return out;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut attempts = 0;
        while out.len() < count && attempts < 20 * count.max(1) {
            attempts += 1;
            let y = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
            let coords = &self.nullspace * y;
            let proj = self.project(&coords);
            let norm = proj.coords.norm();
            if norm <= 1e-10 {
                continue;
            }
            out.push(self.variation(&(proj.coords / norm)));
        }
        out
    }
}

pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    // Box-Muller on two uniforms
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Assemble the polyhedral cone of admissible first-order variations.
pub fn build_kernel_cone(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
    svd_rel: f64,
) -> KernelCone {
    let n = system.n;
    let r = system.r;
    let steps = process.grid.steps;
    let ambient = n + steps * r;

    // h(t1) = Phi(t1,t0) h0 + sum_k S_{k+1} B_k v_k with S_k = Phi(t1,t_k)
    let mut s = DMatrix::<f64>::identity(n, n);
    let mut ctrl_to_end: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, r); steps];
    for k in (0..steps).rev() {
        ctrl_to_end[k] = &s * &cells.ctrl[k];
        s = &s * &cells.jac[k];
    }
    let phi_end = s; // Phi(t1, t0)

    let z = process.endpoints();
    let build_rows = |jac: &DMatrix<f64>, m: usize| -> DMatrix<f64> {
        let mut a = DMatrix::zeros(m, ambient);
        if m == 0 {
            return a;
        }
        let j1 = jac.columns(0, n).into_owned();
        let j2 = jac.columns(n, n).into_owned();
        let h0_block = &j1 + &j2 * &phi_end;
        a.columns_mut(0, n).copy_from(&h0_block);
        for k in 0..steps {
            let block = &j2 * &ctrl_to_end[k];
            a.columns_mut(n + k * r, r).copy_from(&block);
        }
        a
    };
    let a_eq = build_rows(&system.g.jac(&z), system.m2);
    let a_ineq = build_rows(&system.f.jac(&z), system.m1);
    let nullspace = linalg::nullspace(&a_eq, svd_rel);

    KernelCone {
        n,
        r,
        steps,
        ambient,
        a_eq,
        a_ineq,
        nullspace,
        jac: cells.jac.clone(),
        ctrl: cells.ctrl.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_builtin;
    use crate::trajectory::{constant_controls, linearize, simulate, Grid};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn setup(name: &str, ps: &BTreeMap<String, f64>, steps: usize) -> (ControlSystem, Process, KernelCone) {
        let (sys, r) = build_builtin(name, ps).unwrap();
        let grid = Grid::new(r.t0, r.t1, steps);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, steps), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let cone = build_kernel_cone(&sys, &proc, &cells, 1e-9);
        (sys, proc, cone)
    }

    #[test]
    fn example1_cone_structure() {
        let (_, _, cone) = setup("example1", &params(&[("T", 4.0)]), 100);
        // rows: h0 pinned (2), h1(T) = sum v_k dt (1), h2(T) duplicates the
        // h2(0) row because the second variational component is frozen
        assert_eq!(cone.a_eq.nrows(), 4);
        let rank = linalg::row_space_basis(&cone.a_eq, 1e-9).nrows();
        assert_eq!(rank, 3);
        assert_eq!(cone.nullspace.ncols(), cone.ambient - 3);

        for q in cone.sample(5, 3) {
            assert!(q.h0.norm() <= 1e-9);
            assert!(q.h.last().unwrap().norm() <= 1e-9);
        }
    }

    #[test]
    fn example2_endpoint_rows_are_proportional() {
        let (_, _, cone) = setup("example2", &params(&[("a", -1.0)]), 80);
        // the two t1-rows, restricted to the control block, are proportional
        let v_cols = cone.ambient - cone.n;
        let row3 = cone.a_eq.row(2).columns(cone.n, v_cols).into_owned();
        let row4 = cone.a_eq.row(3).columns(cone.n, v_cols).into_owned();
        let stacked = DMatrix::from_rows(&[row3, row4]);
        assert_eq!(linalg::row_space_basis(&stacked, 1e-9).nrows(), 1);
        // and the ratio is the phi_u ratio 3
        let r3 = cone.a_eq[(2, cone.n)];
        let r4 = cone.a_eq[(3, cone.n)];
        assert!((r4 / r3 - 3.0).abs() <= 1e-9);
    }

    #[test]
    fn unconstrained_cone_is_whole_space() {
        let (mut sys, r) = build_builtin("example1", &params(&[("T", 4.0)])).unwrap();
        sys.m1 = 0;
        sys.m2 = 0;
        sys.f = Arc::new(crate::system::LinearEndpoint::empty(2));
        sys.g = Arc::new(crate::system::LinearEndpoint::empty(2));
        let grid = Grid::new(0.0, 4.0, 20);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, 20), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let cone = build_kernel_cone(&sys, &proc, &cells, 1e-9);
        assert_eq!(cone.nullspace.ncols(), cone.ambient);
    }

    #[test]
    fn projection_enforces_equalities() {
        let (_, proc, cone) = setup("example1", &params(&[("T", 4.0)]), 100);
        let mut coords = DVector::zeros(cone.ambient);
        for k in 0..cone.steps {
            let t = proc.grid.time(k);
            coords[cone.n + k] = (std::f64::consts::PI * t / 4.0).sin();
        }
        let proj = cone.project(&coords);
        assert!(proj.eq_residual <= 1e-9);
        let q = cone.variation(&proj.coords);
        assert!(q.h.last().unwrap()[0].abs() <= 1e-9);

        let zero = cone.project(&DVector::zeros(cone.ambient));
        assert!(zero.coords.norm() <= 1e-12);
    }

    #[test]
    fn one_dimensional_inequality_projection() {
        // synthetic cone: ambient R^1, no equalities, A_ineq = [1]
        let cone = KernelCone {
            n: 1,
            r: 1,
            steps: 0,
            ambient: 1,
            a_eq: DMatrix::zeros(0, 1),
            a_ineq: DMatrix::from_row_slice(1, 1, &[1.0]),
            nullspace: DMatrix::identity(1, 1),
            jac: vec![],
            ctrl: vec![],
        };
        let proj = cone.project(&DVector::from_vec(vec![1.0]));
        assert!(proj.coords[0].abs() <= 1e-12);
        assert_eq!(proj.active_rows, vec![0]);
        let inside = cone.project(&DVector::from_vec(vec![-0.5]));
        assert!((inside.coords[0] + 0.5).abs() <= 1e-12);
        assert!(inside.active_rows.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_and_feasible() {
        let (_, _, cone) = setup("example1", &params(&[("T", 4.0)]), 60);
        let a = cone.sample(10, 7);
        let b = cone.sample(10, 7);
        assert_eq!(a.len(), 10);
        for (qa, qb) in a.iter().zip(b.iter()) {
            assert_eq!(qa.h0, qb.h0);
            assert_eq!(qa.v, qb.v);
        }
        for q in &a {
            let coords = cone.join(&q.h0, &q.v);
            assert!(cone.eq_residual(&coords) <= 1e-9);
            assert!((coords.norm() - 1.0).abs() <= 1e-12);
        }

        // degenerate cone {0}: no samples
        let degenerate = KernelCone {
            n: 1,
            r: 1,
            steps: 0,
            ambient: 1,
            a_eq: DMatrix::identity(1, 1),
            a_ineq: DMatrix::zeros(0, 1),
            nullspace: DMatrix::zeros(1, 0),
            jac: vec![],
            ctrl: vec![],
        };
        assert!(degenerate.sample(5, 1).is_empty());
    }

    #[test]
    fn cone_members_add() {
        let (_, _, cone) = setup("example2", &params(&[("a", -1.0)]), 60);
        let qs = cone.sample(2, 11);
        let c1 = cone.join(&qs[0].h0, &qs[0].v);
        let c2 = cone.join(&qs[1].h0, &qs[1].v);
        assert!(cone.eq_residual(&(&c1 + &c2)) <= 2e-9);
    }

    #[test]
    fn linearization_matches_simulation() {
        // endpoint deviation of the nonlinear flow along a cone member is
        // eps * h(t1) + O(eps^2); Richardson slope close to 2
        let (sys, proc, cone) = setup("example1", &params(&[("T", 4.0)]), 50);
        let q = &cone.sample(1, 5)[0];
        let mut errs = Vec::new();
        let epsilons = [1e-2, 1e-3];
        for eps in epsilons {
            let x0 = &proc.x[0] + &q.h0 * eps;
            let controls: Vec<DVector<f64>> = (0..cone.steps)
                .map(|k| &proc.u[k] + &q.v[k] * eps)
                .collect();
            let perturbed = simulate(&sys, &x0, &controls, proc.grid).unwrap();
            let dev = perturbed.x_end() - proc.x_end();
            errs.push((dev - q.h.last().unwrap() * eps).norm());
        }
        let slope = (errs[0] / errs[1]).log10();
        assert!(slope >= 1.9, "slope {slope}");
    }
}
