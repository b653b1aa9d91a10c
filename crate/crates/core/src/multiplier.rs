//! The multiplier cone Lambda_max: costate/boundary relations, complementary
//! slackness, and the Hamiltonian maximum condition, without the final
//! quadratic inequality.
//!
//! Every condition defining the cone is linear in the multiplier pair
//! `(lambda1, lambda2)`: the boundary relations give a nullspace, the sign
//! and complementarity conditions give coordinate constraints, and for each
//! grid node and each control value `u` the maximum condition contributes the
//! homogeneous halfspace `<p(t_k), phi(t_k, x_k, u) - phi_hat(t_k)> <= 0`.
//! Because the control set is open and the reference control is regular, the
//! maximum condition also forces the stationarity equalities
//! `H_u(t_k, u_hat_k) = 0`, which are added as paired cuts; they pin rays that
//! are tangent to the sampled halfspaces. A cutting-plane loop adds refined
//! witnesses until every returned generator passes the exact check.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cone_geom::{self, PolyhedralCone};
use crate::linalg;
use crate::system::ControlSystem;
use crate::trajectory::{costate_solve, Costate, LinearizedCells, Process};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum MultiplierError {
    #[error("m1 = {0} exceeds the sign-enumeration limit of 8")]
    TooManyInequalities(usize),
    #[error(transparent)]
    Cone(#[from] cone_geom::ConeError),
    #[error("cutting-plane refinement did not converge")]
    NoConvergence,
}

/// Costate matrices `P_k` with `p_lambda(t_k) = P_k * (lambda1, lambda2)`,
/// plus the boundary map whose nullspace carries the multiplier candidates.
pub struct CostateBasis {
    pub p_mats: Vec<DMatrix<f64>>,
    pub boundary: DMatrix<f64>,
}

pub fn costate_basis(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
) -> CostateBasis {
    let n = system.n;
    let m = system.m1 + system.m2;
    let z = process.endpoints();
    let fj = system.f.jac(&z);
    let gj = system.g.jac(&z);
    let mut end = DMatrix::zeros(n, m);
    let mut start = DMatrix::zeros(n, m);
    if system.m1 > 0 {
        end.columns_mut(0, system.m1)
            .copy_from(&(-fj.columns(n, n).transpose()));
        start
            .columns_mut(0, system.m1)
            .copy_from(&fj.columns(0, n).transpose());
    }
    if system.m2 > 0 {
        end.columns_mut(system.m1, system.m2)
            .copy_from(&(-gj.columns(n, n).transpose()));
        start
            .columns_mut(system.m1, system.m2)
            .copy_from(&gj.columns(0, n).transpose());
    }
    let steps = process.grid.steps;
    let mut p_mats = vec![DMatrix::zeros(n, m); steps + 1];
    p_mats[steps] = end;
    for k in (0..steps).rev() {
        p_mats[k] = cells.jac[k].transpose() * &p_mats[k + 1];
    }
    let boundary = &p_mats[0] - start;
    CostateBasis { p_mats, boundary }
}

/// Matrix of the linear map `(lambda1, lambda2) -> rho` (initial-condition
/// residual of the costate solve), assembled from the transition structure.
pub fn boundary_map(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
) -> DMatrix<f64> {
    costate_basis(system, process, cells).boundary
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct HamiltonianReport {
    pub worst_margin: f64,
    pub witness_t: f64,
    pub witness_u: Vec<f64>,
    pub pass: bool,
}

fn window_lattice(system: &ControlSystem, per_axis: usize) -> Vec<DVector<f64>> {
    let r = system.r;
    let per_axis = match r {
        1 => per_axis,
        2 => per_axis.min(21),
        _ => per_axis.min(7),
    }
    .max(2);
    let mut pts: Vec<DVector<f64>> = vec![DVector::zeros(0)];
    for axis in 0..r {
        let (lo, hi) = system.control_set.test_window[axis];
        let mut next = Vec::with_capacity(pts.len() * per_axis);
        for base in &pts {
            for i in 0..per_axis {
                let v = lo + (hi - lo) * i as f64 / (per_axis - 1) as f64;
                let mut u = DVector::zeros(axis + 1);
                u.rows_mut(0, axis).copy_from(base);
                u[axis] = v;
                next.push(u);
            }
        }
        pts = next;
    }
    pts
}

/// Golden-section polish of `H` around `u0`, coordinate by coordinate,
/// staying inside the test window.
fn refine_max(
    system: &ControlSystem,
    t: f64,
    x: &DVector<f64>,
    p: &DVector<f64>,
    u0: &DVector<f64>,
    radius: f64,
) -> (f64, DVector<f64>) {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut u = u0.clone();
    let mut best = system.hamiltonian(t, x, &u, p);
    for _pass in 0..2 {
        for axis in 0..system.r {
            let (wlo, whi) = system.control_set.test_window[axis];
            let mut a = (u[axis] - radius).max(wlo);
            let mut b = (u[axis] + radius).min(whi);
            let eval = |v: f64, u: &DVector<f64>| {
                let mut uu = u.clone();
                uu[axis] = v;
                (system.hamiltonian(t, x, &uu, p), uu)
            };
            let mut c = b - phi * (b - a);
            let mut d = a + phi * (b - a);
            let (mut fc, _) = eval(c, &u);
            let (mut fd, _) = eval(d, &u);
            for _ in 0..48 {
                if fc > fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - phi * (b - a);
                    fc = eval(c, &u).0;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + phi * (b - a);
                    fd = eval(d, &u).0;
                }
            }
            let (fm, um) = eval(0.5 * (a + b), &u);
            if fm > best {
                best = fm;
                u = um;
            }
        }
    }
    (best, u)
}

/// Check `max_u H(t_k, x_k, u, p_k) <= H(u_hat_k) + tol` over the test
/// window at every grid node; lattice search plus local refinement.
/// Report-only.
pub fn hamiltonian_max_check(
    system: &ControlSystem,
    process: &Process,
    p: &[DVector<f64>],
    tol: f64,
    lattice_per_axis: usize,
) -> HamiltonianReport {
    let lattice = window_lattice(system, lattice_per_axis);
    let radius: f64 = system
        .control_set
        .test_window
        .iter()
        .map(|(lo, hi)| (hi - lo) / (lattice_per_axis.max(2) - 1) as f64)
        .fold(0.0, f64::max);
    let mut worst = f64::NEG_INFINITY;
    let mut witness_t = process.grid.t0;
    let mut witness_u = DVector::zeros(system.r);
    for k in 0..=process.grid.steps {
        let t = process.grid.time(k);
        let x = &process.x[k];
        let u_hat = process.u_at_node(k);
        let h_ref = system.hamiltonian(t, x, u_hat, &p[k]);
        let mut best = f64::NEG_INFINITY;
        let mut best_u = u_hat.clone();
        for u in &lattice {
            let h = system.hamiltonian(t, x, u, &p[k]);
            if h > best {
                best = h;
                best_u = u.clone();
            }
        }
        let (refined, refined_u) = refine_max(system, t, x, &p[k], &best_u, radius);
        let margin = refined - h_ref;
        if margin > worst {
            worst = margin;
            witness_t = t;
            witness_u = refined_u;
        }
    }
    HamiltonianReport {
        worst_margin: worst,
        witness_t,
        witness_u: witness_u.iter().copied().collect(),
        pass: worst <= tol,
    }
}

/// Fraction of grid nodes at which `u -> H` is constant over the test window
/// (within `tol`).
pub fn hamiltonian_constancy_fraction(
    system: &ControlSystem,
    process: &Process,
    p: &[DVector<f64>],
    tol: f64,
    lattice_per_axis: usize,
) -> f64 {
    let lattice = window_lattice(system, lattice_per_axis);
    let mut constant = 0usize;
    for k in 0..=process.grid.steps {
        let t = process.grid.time(k);
        let x = &process.x[k];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for u in &lattice {
            let h = system.hamiltonian(t, x, u, &p[k]);
            lo = lo.min(h);
            hi = hi.max(h);
        }
        if hi - lo <= tol {
            constant += 1;
        }
    }
    constant as f64 / (process.grid.steps + 1) as f64
}

/// One member of Lambda_max with its diagnostics.
#[derive(Debug, Clone)]
pub struct MultiplierTuple {
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    pub costate: Costate,
    pub boundary_residual: f64,
    pub complementarity: f64,
    pub hamiltonian_margin: f64,
}

impl MultiplierTuple {
    pub fn stacked(&self) -> DVector<f64> {
        let m1 = self.lambda1.len();
        let m2 = self.lambda2.len();
        let mut v = DVector::zeros(m1 + m2);
        v.rows_mut(0, m1).copy_from(&self.lambda1);
        v.rows_mut(m1, m2).copy_from(&self.lambda2);
        v
    }
}

#[derive(Debug, Clone)]
pub struct ConeDescription {
    /// m1 + m2.
    pub ambient: usize,
    /// Dimension of the boundary-map nullspace before sign/maximum filters.
    pub nullspace_dim: usize,
    /// Extreme rays of the filtered cone (unit norm), including both signs
    /// of every lineality direction.
    pub generators: Vec<MultiplierTuple>,
    /// Directions whose whole line lies in the cone.
    pub lineality: Vec<DVector<f64>>,
    /// Dimension of the linear hull of the cone.
    pub order: usize,
    pub is_empty: bool,
    pub is_pointed: bool,
    /// True when the boundary map was entirely below the SVD threshold.
    pub degenerate_nullspace: bool,
}

struct MembershipOracle<'a> {
    system: &'a ControlSystem,
    process: &'a Process,
    cells: &'a LinearizedCells,
    f_hat: DVector<f64>,
    tols: &'a Tolerances,
}

struct MembershipOutcome {
    pass: bool,
    tuple: MultiplierTuple,
    ham: HamiltonianReport,
}

impl<'a> MembershipOracle<'a> {
    fn check(&self, lambda: &DVector<f64>) -> MembershipOutcome {
        let m1 = self.system.m1;
        let m2 = self.system.m2;
        let lambda = lambda.normalize();
        let l1 = lambda.rows(0, m1).into_owned();
        let l2 = lambda.rows(m1, m2).into_owned();
        let costate = costate_solve(self.system, self.process, self.cells, &l1, &l2);
        let boundary_residual = costate.residual.norm();
        let complementarity = l1.dot(&self.f_hat).abs();
        let sign_ok = l1.iter().all(|v| *v >= -self.tols.sign_tol);
        let ham = hamiltonian_max_check(
            self.system,
            self.process,
            &costate.p,
            self.tols.ham_margin,
            self.tols.ham_lattice,
        );
        let pass = sign_ok
            && boundary_residual <= self.tols.boundary_residual
            && complementarity <= self.tols.complementarity
            && ham.pass;
        MembershipOutcome {
            pass,
            tuple: MultiplierTuple {
                lambda1: l1,
                lambda2: l2,
                costate,
                boundary_residual,
                complementarity,
                hamiltonian_margin: ham.worst_margin,
            },
            ham,
        }
    }
}

fn dedupe_rows_hashed(rows: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    use std::collections::HashSet;
    let mut seen: HashSet<Vec<i64>> = HashSet::new();
    let mut out = Vec::new();
    for row in rows {
        let norm = row.norm();
        if norm <= 1e-13 {
            continue;
        }
        let unit = row / norm;
        let key: Vec<i64> = unit.iter().map(|v| (v * 1e9).round() as i64).collect();
        if seen.insert(key) {
            out.push(unit);
        }
    }
    out
}

/// Compute the multiplier cone Lambda_max of a process.
pub fn lambda_max_set(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
    tols: &Tolerances,
) -> Result<ConeDescription, MultiplierError> {
    let m1 = system.m1;
    let m2 = system.m2;
    let m = m1 + m2;
    if m1 > 8 {
        return Err(MultiplierError::TooManyInequalities(m1));
    }
    if m == 0 {
        return Ok(ConeDescription {
            ambient: 0,
            nullspace_dim: 0,
            generators: Vec::new(),
            lineality: Vec::new(),
            order: 0,
            is_empty: true,
            is_pointed: true,
            degenerate_nullspace: false,
        });
    }

    let basis = costate_basis(system, process, cells);
    let z = process.endpoints();
    let f_hat = if m1 > 0 {
        system.f.value(&z)
    } else {
        DVector::zeros(0)
    };

    // equalities: boundary map plus complementarity-forced zeros of lambda1
    let mut eq_rows: Vec<DVector<f64>> = (0..basis.boundary.nrows())
        .map(|i| basis.boundary.row(i).transpose())
        .collect();
    let degenerate_nullspace = basis.boundary.norm() <= 1e-12;
    for i in 0..m1 {
        if f_hat[i] < -tols.complementarity {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            eq_rows.push(e);
        }
    }
    let eq_mat = DMatrix::from_rows(&eq_rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    let v = linalg::nullspace(&eq_mat, tols.svd_rel);
    let nullspace_dim = linalg::nullspace(&basis.boundary, tols.svd_rel).ncols();
    let d = v.ncols();
    if d == 0 {
        return Ok(ConeDescription {
            ambient: m,
            nullspace_dim,
            generators: Vec::new(),
            lineality: Vec::new(),
            order: 0,
            is_empty: true,
            is_pointed: true,
            degenerate_nullspace,
        });
    }

    // inequality rows in ambient multiplier coordinates
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for i in 0..m1 {
        if f_hat[i] >= -tols.complementarity {
            let mut e = DVector::zeros(m);
            e[i] = -1.0; // lambda1_i >= 0
            rows.push(e);
        }
    }
    let lattice = window_lattice(system, tols.ham_lattice);
    for k in 0..=process.grid.steps {
        let t = process.grid.time(k);
        let x = &process.x[k];
        let u_hat = process.u_at_node(k);
        let phi_hat = system.dynamics.value(t, x, u_hat);
        let pk = &basis.p_mats[k];
        for u in &lattice {
            let dphi = system.dynamics.value(t, x, u) - &phi_hat;
            rows.push(pk.transpose() * dphi);
        }
        // interior maximum over the open control set forces stationarity
        let ju = system.dynamics.jac_u(t, x, u_hat);
        for j in 0..system.r {
            let col = ju.column(j).into_owned();
            let row = pk.transpose() * col;
            rows.push(row.clone());
            rows.push(-row);
        }
    }
    let mut rows = dedupe_rows_hashed(rows);

    let oracle = MembershipOracle {
        system,
        process,
        cells,
        f_hat: f_hat.clone(),
        tols,
    };

    // cutting-plane loop: double description on the sampled rows, then refine
    // each candidate with the exact Hamiltonian check and cut the violations.
    let mut cone: PolyhedralCone;
    let mut verified: Vec<(DVector<f64>, MembershipOutcome)>;
    let mut lineality_dirs: Vec<DVector<f64>>;
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > 80 {
            return Err(MultiplierError::NoConvergence);
        }
        let proj: Vec<DVector<f64>> = rows.iter().map(|r| v.transpose() * r).collect();
        let row_mat = if proj.is_empty() {
            DMatrix::zeros(0, d)
        } else {
            DMatrix::from_rows(&proj.iter().map(|r| r.transpose()).collect::<Vec<_>>())
        };
        cone = cone_geom::cone_from_inequalities(&row_mat, d)?;

        let mut new_cuts: Vec<DVector<f64>> = Vec::new();
        verified = Vec::new();
        lineality_dirs = Vec::new();

        let mut candidates: Vec<DVector<f64>> = Vec::new();
        for ray in &cone.rays {
            candidates.push((&v * ray).normalize());
        }
        for l in &cone.lineality {
            let dir = (&v * l).normalize();
            candidates.push(dir.clone());
            candidates.push(-dir);
        }
        for cand in candidates {
            let outcome = oracle.check(&cand);
            if outcome.pass {
                verified.push((cand, outcome));
            } else if outcome.ham.worst_margin > tols.ham_margin {
                // the refined maximum found a violated control value: cut it
                let k = ((outcome.ham.witness_t - process.grid.t0) / process.grid.dt())
                    .round() as usize;
                let k = k.min(process.grid.steps);
                let t = process.grid.time(k);
                let x = &process.x[k];
                let u_star = DVector::from_row_slice(&outcome.ham.witness_u);
                let dphi = system.dynamics.value(t, x, &u_star)
                    - system.dynamics.value(t, x, process.u_at_node(k));
                new_cuts.push(basis.p_mats[k].transpose() * dphi);
            }
            // sign/boundary failures cannot happen for nullspace directions;
            // if they do (degenerate numerics) the candidate is just dropped.
        }
        if new_cuts.is_empty() {
            // classify verified directions into lineality (both signs pass)
            let mut used = vec![false; verified.len()];
            for i in 0..verified.len() {
                if used[i] {
                    continue;
                }
                for j in (i + 1)..verified.len() {
                    if verified[i].0.dot(&verified[j].0) < -(1.0 - 1e-9) {
                        used[j] = true;
                        lineality_dirs.push(verified[i].0.clone());
                    }
                }
            }
            break;
        }
        rows.extend(new_cuts);
        rows = dedupe_rows_hashed(rows);
    }

    let mut generators: Vec<MultiplierTuple> = Vec::new();
    let mut gen_dirs: Vec<DVector<f64>> = Vec::new();
    for (dir, outcome) in &verified {
        if gen_dirs.iter().any(|g| g.dot(dir) > 1.0 - 1e-9) {
            continue;
        }
        gen_dirs.push(dir.clone());
        generators.push(outcome.tuple.clone());
    }
    // deterministic ordering
    let mut idx: Vec<usize> = (0..generators.len()).collect();
    idx.sort_by(|&a, &b| {
        let va = &gen_dirs[a];
        let vb = &gen_dirs[b];
        for i in 0..va.len() {
            let ka = (va[i] * 1e9).round() as i64;
            let kb = (vb[i] * 1e9).round() as i64;
            if ka != kb {
                return ka.cmp(&kb);
            }
        }
        std::cmp::Ordering::Equal
    });
    let generators: Vec<MultiplierTuple> = idx.into_iter().map(|i| generators[i].clone()).collect();

    let is_empty = generators.is_empty();
    let order = if is_empty {
        0
    } else {
        let cols: Vec<DVector<f64>> = generators.iter().map(|g| g.stacked()).collect();
        let mat = DMatrix::from_columns(&cols);
        linalg::row_space_basis(&mat.transpose(), 1e-6).nrows()
    };
    let is_pointed = lineality_dirs.is_empty();

    Ok(ConeDescription {
        ambient: m,
        nullspace_dim,
        generators,
        lineality: lineality_dirs,
        order,
        is_empty,
        is_pointed,
        degenerate_nullspace,
    })
}

#[derive(Debug, Clone)]
pub struct SingularityReport {
    pub singular: bool,
    pub witness: Option<DVector<f64>>,
    /// Fraction of grid nodes with a u-constant Hamiltonian for the witness.
    pub constancy_fraction: f64,
}

/// A process is singular when Lambda_max contains a full line; equivalently
/// some nonzero tuple with `lambda1 = 0` has a Hamiltonian constant in `u`.
pub fn singularity_check(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
    cone: &ConeDescription,
    tols: &Tolerances,
) -> SingularityReport {
    if cone.is_empty {
        return SingularityReport {
            singular: false,
            witness: None,
            constancy_fraction: 0.0,
        };
    }
    for dir in &cone.lineality {
        let m1 = system.m1;
        let l1 = dir.rows(0, m1).into_owned();
        if l1.norm() > tols.sign_tol {
            continue;
        }
        let l2 = dir.rows(m1, system.m2).into_owned();
        let costate = costate_solve(system, process, cells, &l1, &l2);
        let fraction = hamiltonian_constancy_fraction(
            system,
            process,
            &costate.p,
            tols.ham_margin * 2.0,
            tols.ham_lattice,
        );
        if fraction >= 0.99 {
            return SingularityReport {
                singular: true,
                witness: Some(dir.clone()),
                constancy_fraction: fraction,
            };
        }
    }
    SingularityReport {
        singular: false,
        witness: None,
        constancy_fraction: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_builtin;
    use crate::trajectory::{constant_controls, linearize, simulate, Grid};
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn setup(name: &str, ps: &BTreeMap<String, f64>, steps: usize) -> (ControlSystem, Process, LinearizedCells) {
        let (sys, r) = build_builtin(name, ps).unwrap();
        let grid = Grid::new(r.t0, r.t1, steps);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, steps), grid).unwrap();
        let cells = linearize(&sys, &proc);
        (sys, proc, cells)
    }

    #[test]
    fn example1_boundary_nullspace_is_two_dimensional() {
        let (sys, proc, cells) = setup("example1", &params(&[("T", 4.0)]), 100);
        let m = boundary_map(&sys, &proc, &cells);
        // with a zero linearization the residual map is
        // rho(l2) = -(l2_3, l2_4) - (l2_1, l2_2)
        let expected = DMatrix::from_row_slice(
            2,
            4,
            &[-1.0, 0.0, -1.0, 0.0, 0.0, -1.0, 0.0, -1.0],
        );
        assert!((m.clone() - expected).norm() <= 1e-12);
        let ns = linalg::nullspace(&m, 1e-9);
        assert_eq!(ns.ncols(), 2);

        // least-squares oracle over the 4 columns: brute-force the nullspace
        // from a dense elimination and compare subspaces
        let oracle = linalg::nullspace(&m, 1e-12);
        assert!(linalg::subspace_distance(&ns, &oracle) <= 1e-8);
    }

    #[test]
    fn boundary_map_matches_costate_columns() {
        let (sys, proc, cells) = setup("double_integrator", &BTreeMap::new(), 60);
        let m = boundary_map(&sys, &proc, &cells);
        for col in 0..4 {
            let mut l2 = DVector::zeros(4);
            l2[col] = 1.0;
            let costate = costate_solve(&sys, &proc, &cells, &DVector::zeros(0), &l2);
            assert!((m.column(col).into_owned() - costate.residual).norm() <= 1e-12);
        }
    }

    #[test]
    fn empty_endpoint_maps_give_trivial_cone() {
        let (mut sys, proc, _) = setup("example1", &params(&[("T", 4.0)]), 40);
        sys.m1 = 0;
        sys.m2 = 0;
        sys.f = std::sync::Arc::new(crate::system::LinearEndpoint::empty(2));
        sys.g = std::sync::Arc::new(crate::system::LinearEndpoint::empty(2));
        let cells = linearize(&sys, &proc);
        let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        assert!(cone.is_empty);
        assert_eq!(cone.order, 0);
    }

    #[test]
    fn example2_hamiltonian_margins() {
        // p = (1, -1/3): H(u) = u - u^3/3, max over (a, inf) at u = 1 when
        // a = -1; violated near the window floor when a = -3.
        let (sys, proc, _cells) = setup("example2", &params(&[("a", -1.0)]), 50);
        let p = vec![DVector::from_vec(vec![1.0, -1.0 / 3.0]); 51];
        let rep = hamiltonian_max_check(&sys, &proc, &p, 1e-7, 101);
        assert!(rep.pass, "margin {}", rep.worst_margin);

        let (sys3, proc3, _c3) = setup("example2", &params(&[("a", -3.0)]), 50);
        let p = vec![DVector::from_vec(vec![1.0, -1.0 / 3.0]); 51];
        let rep = hamiltonian_max_check(&sys3, &proc3, &p, 1e-7, 101);
        assert!(!rep.pass);
        // H(-3+) - H(1) = 6 - 2/3 at the open end; the window floor sits at
        // -2.95 so the detected violation is a bit smaller but still large
        assert!(rep.worst_margin > 4.0);
        assert!(rep.witness_u[0] < -2.5);
    }

    #[test]
    fn zero_costate_passes_trivially() {
        let (sys, proc, _) = setup("example1", &params(&[("T", 4.0)]), 30);
        let p = vec![DVector::zeros(2); 31];
        let rep = hamiltonian_max_check(&sys, &proc, &p, 1e-9, 41);
        assert!(rep.pass);
        assert!(rep.worst_margin.abs() <= 1e-12);
    }

    #[test]
    fn example1_cone_is_a_single_ray() {
        let (sys, proc, cells) = setup("example1", &params(&[("T", 4.0)]), 100);
        let tols = Tolerances::default();
        let cone = lambda_max_set(&sys, &proc, &cells, &tols).unwrap();
        assert!(!cone.is_empty);
        assert!(cone.is_pointed);
        assert_eq!(cone.order, 1);
        assert_eq!(cone.generators.len(), 1);
        assert_eq!(cone.nullspace_dim, 2);
        let g = &cone.generators[0];
        // lambda2 proportional to (0, a, 0, -a) with a < 0; costate (0, a)
        let l2 = &g.lambda2;
        assert!(l2[1] < 0.0);
        assert!((l2[0]).abs() <= 1e-7);
        assert!((l2[2]).abs() <= 1e-7);
        assert!((l2[1] + l2[3]).abs() <= 1e-7);
        let p0 = &g.costate.p[0];
        assert!(p0[0].abs() <= 1e-7);
        assert!(p0[1] < 0.0);

        // positive rescaling keeps membership (cone property)
        let oracle = MembershipOracle {
            system: &sys,
            process: &proc,
            cells: &cells,
            f_hat: DVector::zeros(0),
            tols: &tols,
        };
        for c in [0.5, 2.0, 10.0] {
            let outcome = oracle.check(&(g.stacked() * c));
            assert!(outcome.pass);
        }
        // the negation must fail (pointed ray)
        let outcome = oracle.check(&(-g.stacked()));
        assert!(!outcome.pass);
    }

    #[test]
    fn example2_cone_cases() {
        // a = -3: empty
        let (sys, proc, cells) = setup("example2", &params(&[("a", -3.0)]), 100);
        let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        assert!(cone.is_empty, "a=-3 should empty the cone");

        // a = -1: a single ray with costate direction (1, -1/3)
        let (sys, proc, cells) = setup("example2", &params(&[("a", -1.0)]), 100);
        let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        assert!(!cone.is_empty);
        assert_eq!(cone.order, 1);
        assert!(cone.is_pointed);
        assert_eq!(cone.generators.len(), 1);
        let g = &cone.generators[0];
        let p0 = &g.costate.p[0];
        assert!(p0[0] > 0.0);
        assert!((p0[1] / p0[0] + 1.0 / 3.0).abs() <= 1e-6);
        // under the printed boundary signs: lambda2 = (a, -a/3, -a, a/3)
        let l2 = &g.lambda2;
        assert!((l2[2] / l2[0] + 1.0).abs() <= 1e-6);
        assert!((l2[1] / l2[0] + 1.0 / 3.0).abs() <= 1e-6);

        // a = -2 is still the nonempty case (boundary of case 2)
        let (sys, proc, cells) = setup("example2", &params(&[("a", -2.0)]), 100);
        let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        assert!(!cone.is_empty);
        assert_eq!(cone.order, 1);
    }

    #[test]
    fn double_integrator_cone_empty_matches_kalman() {
        let (sys, proc, cells) = setup("double_integrator", &BTreeMap::new(), 80);
        let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        assert!(cone.is_empty);
        // Kalman rank oracle: controllability matrix [B, AB] full rank
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let ab = &a * &b;
        let ctrb = DMatrix::from_columns(&[b, ab]);
        assert_eq!(linalg::row_space_basis(&ctrb, 1e-12).nrows(), 2);
    }

    #[test]
    fn uncontrolled_linear_is_singular() {
        let (sys, proc, cells) = setup("uncontrolled_linear", &BTreeMap::new(), 60);
        let tols = Tolerances::default();
        let cone = lambda_max_set(&sys, &proc, &cells, &tols).unwrap();
        assert!(!cone.is_empty);
        assert!(!cone.is_pointed);
        assert_eq!(cone.order, 1);
        let report = singularity_check(&sys, &proc, &cells, &cone, &tols);
        assert!(report.singular);
        let w = report.witness.unwrap();
        assert!(w.norm() > 0.9);
        assert!(report.constancy_fraction >= 0.99);

        // nonsingular cross-checks
        let (sys1, proc1, cells1) = setup("example1", &params(&[("T", 4.0)]), 60);
        let cone1 = lambda_max_set(&sys1, &proc1, &cells1, &tols).unwrap();
        let rep1 = singularity_check(&sys1, &proc1, &cells1, &cone1, &tols);
        assert!(!rep1.singular);

        let (sys2, proc2, cells2) = setup("example2", &params(&[("a", -3.0)]), 60);
        let cone2 = lambda_max_set(&sys2, &proc2, &cells2, &tols).unwrap();
        let rep2 = singularity_check(&sys2, &proc2, &cells2, &cone2, &tols);
        assert!(!rep2.singular);
    }

    #[test]
    fn scaling_the_equality_map_preserves_structure() {
        for scale in [0.5, 2.0, 10.0] {
            let (mut sys, proc, _) = setup("example1", &params(&[("T", 4.0)]), 60);
            let g = crate::system::LinearEndpoint {
                a: DMatrix::<f64>::identity(4, 4) * scale,
                b: DVector::zeros(4),
            };
            sys.g = std::sync::Arc::new(g);
            let cells = linearize(&sys, &proc);
            let cone = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
            assert!(!cone.is_empty);
            assert_eq!(cone.order, 1);
            assert!(cone.is_pointed);
        }
    }
}
