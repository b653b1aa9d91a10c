//! The second-order quadratic form Q on cone coordinates and the
//! controllability certificate search.
//!
//! For a multiplier tuple with costate `p`, the form is
//! `Q[q,q] = -int H_ww(t)[q(t),q(t)] dt + <l1, f''[eta,eta]> + <l2, g''[eta,eta]>`
//! on variations `q = (h0, v)`. The integrand is piecewise smooth with the
//! control frozen per cell, so the quadrature is a per-cell trapezoid that
//! uses the cell's control at both cell ends; this makes pure control terms
//! like `int v^2 dt` exact sums `sum v_k^2 dt`.

use nalgebra::{DMatrix, DVector};

use crate::kernel::KernelCone;
use crate::linalg;
use crate::multiplier::{ConeDescription, MultiplierTuple};
use crate::system::ControlSystem;
use crate::trajectory::Process;
use crate::Tolerances;

#[derive(Debug, Clone)]
pub struct QuadraticForm {
    /// Full symmetric matrix on (h0, v) coordinates.
    pub mat: DMatrix<f64>,
    /// `-int H_ww` contribution.
    pub mat_integral: DMatrix<f64>,
    /// Endpoint second-derivative contribution.
    pub mat_endpoint: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn eval(&self, coords: &DVector<f64>) -> f64 {
        coords.dot(&(&self.mat * coords))
    }

    pub fn spectral_norm(&self) -> f64 {
        linalg::sym_spectral_norm(&self.mat, 30)
    }
}

/// Coordinate-to-state maps `h(t_k) = G_k c` for the kernel cone's
/// linearization.
fn state_maps(cone: &KernelCone) -> Vec<DMatrix<f64>> {
    let mut maps = Vec::with_capacity(cone.steps + 1);
    let mut g = DMatrix::zeros(cone.n, cone.ambient);
    g.columns_mut(0, cone.n)
        .copy_from(&DMatrix::identity(cone.n, cone.n));
    maps.push(g);
    for k in 0..cone.steps {
        let mut next = &cone.jac[k] * &maps[k];
        let block = &cone.ctrl[k];
        let mut cols = next.columns_mut(cone.n + k * cone.r, cone.r);
        cols += block;
        maps.push(next);
    }
    maps
}

/// Assemble the quadratic form for one multiplier tuple.
pub fn assemble_q(
    system: &ControlSystem,
    process: &Process,
    multiplier: &MultiplierTuple,
    cone: &KernelCone,
) -> QuadraticForm {
    let n = system.n;
    let r = system.r;
    let ambient = cone.ambient;
    let dt = process.grid.dt();
    let maps = state_maps(cone);

    let mut int_hww = DMatrix::<f64>::zeros(ambient, ambient);
    // accumulate sum_j sigma_j (W^T y_j)(W^T y_j)^T where H at the node is
    // decomposed spectrally; W maps coords to (h(t), v_cell)
    let add_node = |k_state: usize, k_cell: usize, t: f64, weight: f64, int_hww: &mut DMatrix<f64>| {
        let h = system.hamiltonian_hess_ww(
            t,
            &process.x[k_state],
            &process.u[k_cell],
            &multiplier.costate.p[k_state],
        );
        if h.norm() == 0.0 {
            return;
        }
        let eig = nalgebra::SymmetricEigen::new(h);
        for j in 0..eig.eigenvalues.len() {
            let sigma = eig.eigenvalues[j];
            if sigma.abs() <= 1e-300 {
                continue;
            }
            let y = eig.eigenvectors.column(j);
            // w = W^T y: state part through G_k, control part through the
            // v_cell selector
            let gx = maps[k_state].transpose() * y.rows(0, n);
            let mut w = gx;
            for jr in 0..r {
                w[cone.n + k_cell * r + jr] += y[n + jr];
            }
            int_hww.syger(weight * sigma, &w, &w, 1.0);
        }
    };

    for k in 0..cone.steps {
        let t0 = process.grid.time(k);
        let t1 = process.grid.time(k + 1);
        add_node(k, k, t0, dt / 2.0, &mut int_hww);
        add_node(k + 1, k, t1, dt / 2.0, &mut int_hww);
    }
    // syger only writes the lower triangle; mirror it
    let int_hww = mirror_lower(int_hww);

    // endpoint block: eta = (h(t0), h(t1)) = E c
    let mut e_eta = DMatrix::zeros(2 * n, ambient);
    e_eta.rows_mut(0, n).copy_from(&maps[0]);
    e_eta.rows_mut(n, n).copy_from(&maps[cone.steps]);
    let z = process.endpoints();
    let mut m_end = DMatrix::<f64>::zeros(2 * n, 2 * n);
    if system.m1 > 0 {
        for (i, h) in system.f.hess(&z).iter().enumerate() {
            m_end += h * multiplier.lambda1[i];
        }
    }
    if system.m2 > 0 {
        for (i, h) in system.g.hess(&z).iter().enumerate() {
            m_end += h * multiplier.lambda2[i];
        }
    }
    let mat_endpoint = e_eta.transpose() * m_end * e_eta;

    let mat_integral = -int_hww;
    let mat = symmetrize(&mat_integral + &mat_endpoint);
    QuadraticForm {
        mat,
        mat_integral,
        mat_endpoint,
    }
}

fn mirror_lower(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
    m
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Direct evaluation of Q along one variation, independent of the assembled
/// matrix: propagates the variation and integrates `H_ww[q,q]` cell by cell.
pub fn eval_q_direct(
    system: &ControlSystem,
    process: &Process,
    multiplier: &MultiplierTuple,
    cone: &KernelCone,
    coords: &DVector<f64>,
) -> f64 {
    let n = system.n;
    let r = system.r;
    let dt = process.grid.dt();
    let q = cone.variation(coords);
    let mut integral = 0.0;
    for k in 0..cone.steps {
        for (k_state, t) in [(k, process.grid.time(k)), (k + 1, process.grid.time(k + 1))] {
            let h = system.hamiltonian_hess_ww(
                t,
                &process.x[k_state],
                &process.u[k],
                &multiplier.costate.p[k_state],
            );
            let mut w = DVector::zeros(n + r);
            w.rows_mut(0, n).copy_from(&q.h[k_state]);
            w.rows_mut(n, r).copy_from(&q.v[k]);
            integral += dt / 2.0 * w.dot(&(&h * &w));
        }
    }
    let eta = q.eta();
    let z = process.endpoints();
    let mut endpoint = 0.0;
    if system.m1 > 0 {
        for (i, h) in system.f.hess(&z).iter().enumerate() {
            endpoint += multiplier.lambda1[i] * eta.dot(&(h * &eta));
        }
    }
    if system.m2 > 0 {
        for (i, h) in system.g.hess(&z).iter().enumerate() {
            endpoint += multiplier.lambda2[i] * eta.dot(&(h * &eta));
        }
    }
    -integral + endpoint
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CertificateVerdict {
    Controllable,
    NotCertified,
    Unknown,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub verdict: CertificateVerdict,
    pub reason: Option<String>,
    /// Unit-norm witness coordinates (h0, v), present for Controllable.
    pub witness: Option<DVector<f64>>,
    /// Q value of the witness for every generator of the multiplier cone.
    pub q_values: Vec<f64>,
    /// Minimal eigenvalue of Q restricted to the equality nullspace
    /// (equality-only path).
    pub min_restricted_eig: Option<f64>,
    pub tol_q: f64,
}

/// Search for a variation with `Q[q,q] < -tol_q` on every generator of the
/// multiplier cone (first order of abnormality, nonsingular).
pub fn certificate_search(
    system: &ControlSystem,
    process: &Process,
    cone: &KernelCone,
    cone_desc: &ConeDescription,
    singular: bool,
    seed: u64,
    tols: &Tolerances,
) -> (Certificate, Vec<QuadraticForm>) {
    if cone_desc.is_empty || cone_desc.order != 1 || singular || cone_desc.generators.len() != 1 {
        let reason = if cone_desc.is_empty {
            "multiplier cone is empty; certificate not needed"
        } else if singular {
            "process is singular; the ray argument does not apply"
        } else {
            "abnormality order is not 1; no decision procedure"
        };
        return (
            Certificate {
                verdict: CertificateVerdict::Unknown,
                reason: Some(reason.to_string()),
                witness: None,
                q_values: Vec::new(),
                min_restricted_eig: None,
                tol_q: 0.0,
            },
            Vec::new(),
        );
    }

    let generator = &cone_desc.generators[0];
    let qform = assemble_q(system, process, generator, cone);
    let tol_q = tols.q_rel * qform.spectral_norm();
    let z = &cone.nullspace;
    let ineq_on_null = if cone.a_ineq.nrows() == 0 {
        0.0
    } else {
        (&cone.a_ineq * z).norm()
    };

    if ineq_on_null <= 1e-12 {
        // equality-only: restricted eigenproblem
        let qr = z.transpose() * &qform.mat * z;
        if qr.nrows() == 0 {
            return (
                Certificate {
                    verdict: CertificateVerdict::NotCertified,
                    reason: Some("variation cone is trivial".into()),
                    witness: None,
                    q_values: Vec::new(),
                    min_restricted_eig: None,
                    tol_q,
                },
                vec![qform],
            );
        }
        let (eig, vec) = linalg::smallest_eigenpair_sym(&symmetrize(qr));
        if eig < -tol_q {
            let witness = (z * vec).normalize();
            let value = qform.eval(&witness);
            (
                Certificate {
                    verdict: CertificateVerdict::Controllable,
                    reason: None,
                    witness: Some(witness),
                    q_values: vec![value],
                    min_restricted_eig: Some(eig),
                    tol_q,
                },
                vec![qform],
            )
        } else {
            (
                Certificate {
                    verdict: CertificateVerdict::NotCertified,
                    reason: Some("restricted quadratic form is nonnegative".into()),
                    witness: None,
                    q_values: Vec::new(),
                    min_restricted_eig: Some(eig),
                    tol_q,
                },
                vec![qform],
            )
        }
    } else {
        // inequality rows active on the nullspace: heuristic projected
        // gradient on the Rayleigh quotient, seeded restarts
        let mut best_val = f64::INFINITY;
        let mut best: Option<DVector<f64>> = None;
        let restarts = 16;
        let samples = cone.sample(restarts, seed);
        for q in &samples {
            let mut c = cone.join(&q.h0, &q.v);
            let mut value = qform.eval(&c);
            let mut step = 0.5;
            for _ in 0..200 {
                let grad = (&qform.mat * &c) * 2.0 - &c * (2.0 * value);
                let trial = &c - grad * step;
                let proj = cone.project(&trial);
                let norm = proj.coords.norm();
                if norm <= 1e-12 {
                    step *= 0.5;
                    continue;
                }
                let cand = proj.coords / norm;
                let cand_val = qform.eval(&cand);
                if cand_val < value - 1e-14 {
                    c = cand;
                    value = cand_val;
                    step = (step * 1.3).min(4.0);
                } else {
                    step *= 0.5;
                    if step < 1e-8 {
                        break;
                    }
                }
            }
            if value < best_val {
                best_val = value;
                best = Some(c);
            }
        }
        if best_val < -tol_q {
            let witness = best.unwrap();
            (
                Certificate {
                    verdict: CertificateVerdict::Controllable,
                    reason: None,
                    witness: Some(witness),
                    q_values: vec![best_val],
                    min_restricted_eig: None,
                    tol_q,
                },
                vec![qform],
            )
        } else {
            // a failed heuristic search cannot conclude nonnegativity
            (
                Certificate {
                    verdict: CertificateVerdict::Unknown,
                    reason: Some(
                        "projected-gradient search found no negative value under inequality rows"
                            .into(),
                    ),
                    witness: None,
                    q_values: Vec::new(),
                    min_restricted_eig: None,
                    tol_q,
                },
                vec![qform],
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum LambdaQStatus {
    Empty,
    NonEmpty { witness_generator: usize },
    Unknown,
}

/// Decide emptiness of the multiplier set for one variation, where possible.
///
/// `q_forms` must be aligned with `cone_desc.generators`.
pub fn lambda_q_nonempty(
    cone_desc: &ConeDescription,
    q_forms: &[QuadraticForm],
    coords: &DVector<f64>,
    singular: bool,
    tol_q: f64,
) -> LambdaQStatus {
    if cone_desc.is_empty {
        return LambdaQStatus::Empty;
    }
    for (i, form) in q_forms.iter().enumerate() {
        if form.eval(coords) >= -tol_q {
            return LambdaQStatus::NonEmpty {
                witness_generator: i,
            };
        }
    }
    if cone_desc.order == 1 && !singular && cone_desc.generators.len() == 1 {
        // the cone is a single ray and Q is strictly negative on it
        return LambdaQStatus::Empty;
    }
    LambdaQStatus::Unknown
}

/// Piecewise-constant samples of the lowest Dirichlet mode `sin(pi t / T)`,
/// chosen so the discrete variational state matches the mode at the nodes.
pub fn dirichlet_mode_coords(cone: &KernelCone, process: &Process) -> DVector<f64> {
    let grid = &process.grid;
    let t_len = grid.t1 - grid.t0;
    let dt = grid.dt();
    let mut coords = DVector::zeros(cone.ambient);
    for k in 0..cone.steps {
        let s0 = (std::f64::consts::PI * (grid.time(k) - grid.t0) / t_len).sin();
        let s1 = (std::f64::consts::PI * (grid.time(k + 1) - grid.t0) / t_len).sin();
        coords[cone.n + k * cone.r] = (s1 - s0) / dt;
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernel_cone;
    use crate::multiplier::lambda_max_set;
    use crate::system::build_builtin;
    use crate::trajectory::{constant_controls, linearize, simulate, Grid};
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    struct Setup {
        sys: ControlSystem,
        proc: Process,
        cone: KernelCone,
        desc: ConeDescription,
    }

    fn setup(name: &str, ps: &BTreeMap<String, f64>, steps: usize) -> Setup {
        let (sys, r) = build_builtin(name, ps).unwrap();
        let grid = Grid::new(r.t0, r.t1, steps);
        let proc = simulate(&sys, &r.x0, &constant_controls(&r.u_const, steps), grid).unwrap();
        let cells = linearize(&sys, &proc);
        let cone = build_kernel_cone(&sys, &proc, &cells, 1e-9);
        let desc = lambda_max_set(&sys, &proc, &cells, &Tolerances::default()).unwrap();
        Setup {
            sys,
            proc,
            cone,
            desc,
        }
    }

    fn rescale_generator(g: &MultiplierTuple, target_alpha: f64, alpha_index: usize) -> MultiplierTuple {
        let scale = target_alpha / g.lambda2[alpha_index];
        let mut out = g.clone();
        out.lambda1 *= scale;
        out.lambda2 *= scale;
        for p in out.costate.p.iter_mut() {
            *p *= scale;
        }
        out
    }

    #[test]
    fn example1_mode_value_matches_closed_form() {
        let s = setup("example1", &params(&[("T", 4.0)]), 200);
        // generator rescaled to alpha = -1 (lambda2 = (0,-1,0,1))
        let gen = rescale_generator(&s.desc.generators[0], -1.0, 1);
        let qform = assemble_q(&s.sys, &s.proc, &gen, &s.cone);
        let coords = dirichlet_mode_coords(&s.cone, &s.proc);
        let value = qform.eval(&coords);
        let expected = std::f64::consts::PI.powi(2) / 4.0 - 4.0;
        assert!(
            (value - expected).abs() <= 1e-3,
            "value {value} vs {expected}"
        );
        // zero variation gives zero
        assert_eq!(qform.eval(&DVector::zeros(s.cone.ambient)), 0.0);
    }

    #[test]
    fn example2_q_is_twice_the_control_energy() {
        let s = setup("example2", &params(&[("a", -1.0)]), 150);
        // alpha = 1 normalization: lambda2 = (1, -1/3, -1, 1/3)
        let gen = rescale_generator(&s.desc.generators[0], 1.0, 0);
        let qform = assemble_q(&s.sys, &s.proc, &gen, &s.cone);
        let dt = s.proc.grid.dt();
        for q in s.cone.sample(20, 9) {
            let coords = s.cone.join(&q.h0, &q.v);
            let value = qform.eval(&coords);
            let v_energy: f64 = q.v.iter().map(|v| v.norm_squared() * dt).sum();
            let expected = 2.0 * v_energy;
            assert!(
                (value - expected).abs() <= 1e-6 * expected.max(1.0),
                "value {value} vs 2*int v^2 = {expected}"
            );
            assert!(value >= 0.0);
        }
    }

    #[test]
    fn assembled_matrix_matches_direct_integration() {
        let s = setup("example1", &params(&[("T", 3.0)]), 120);
        let gen = &s.desc.generators[0];
        let qform = assemble_q(&s.sys, &s.proc, gen, &s.cone);
        // symmetry
        assert!((qform.mat.clone() - qform.mat.transpose()).norm() <= 1e-12);
        for q in s.cone.sample(20, 21) {
            let coords = s.cone.join(&q.h0, &q.v);
            let via_matrix = qform.eval(&coords);
            let direct = eval_q_direct(&s.sys, &s.proc, gen, &s.cone, &coords);
            assert!(
                (via_matrix - direct).abs() <= 1e-6 * direct.abs().max(1.0),
                "{via_matrix} vs {direct}"
            );
        }
    }

    #[test]
    fn certificate_verdicts_flip_at_pi() {
        let tols = Tolerances::default();
        let s4 = setup("example1", &params(&[("T", 4.0)]), 200);
        let (cert, _forms) =
            certificate_search(&s4.sys, &s4.proc, &s4.cone, &s4.desc, false, 1, &tols);
        assert_eq!(cert.verdict, CertificateVerdict::Controllable);
        let w = cert.witness.as_ref().unwrap();
        // witness close to the lowest Dirichlet mode
        let mode = dirichlet_mode_coords(&s4.cone, &s4.proc).normalize();
        assert!(w.dot(&mode).abs() > 0.95, "overlap {}", w.dot(&mode).abs());
        assert!(cert.q_values[0] < 0.0);

        let s3 = setup("example1", &params(&[("T", 3.0)]), 200);
        let (cert, _) = certificate_search(&s3.sys, &s3.proc, &s3.cone, &s3.desc, false, 1, &tols);
        assert_eq!(cert.verdict, CertificateVerdict::NotCertified);
        assert!(cert.min_restricted_eig.unwrap() >= 0.0);
    }

    #[test]
    fn example2_not_certified() {
        let tols = Tolerances::default();
        let s = setup("example2", &params(&[("a", -1.0)]), 150);
        let (cert, forms) =
            certificate_search(&s.sys, &s.proc, &s.cone, &s.desc, false, 1, &tols);
        assert_eq!(cert.verdict, CertificateVerdict::NotCertified);

        // every sampled q has a nonempty multiplier set
        for q in s.cone.sample(10, 3) {
            let coords = s.cone.join(&q.h0, &q.v);
            let status = lambda_q_nonempty(&s.desc, &forms, &coords, false, cert.tol_q);
            assert!(matches!(status, LambdaQStatus::NonEmpty { .. }));
        }
    }

    #[test]
    fn lambda_q_cases() {
        let tols = Tolerances::default();
        // empty cone (example2, a=-3)
        let s = setup("example2", &params(&[("a", -3.0)]), 100);
        let status = lambda_q_nonempty(&s.desc, &[], &DVector::zeros(s.cone.ambient), false, 0.0);
        assert_eq!(status, LambdaQStatus::Empty);

        // example1 T=4 at the certificate witness: the ray is excluded
        let s = setup("example1", &params(&[("T", 4.0)]), 200);
        let (cert, forms) =
            certificate_search(&s.sys, &s.proc, &s.cone, &s.desc, false, 1, &tols);
        let w = cert.witness.unwrap();
        let status = lambda_q_nonempty(&s.desc, &forms, &w, false, cert.tol_q);
        assert_eq!(status, LambdaQStatus::Empty);
    }

    #[test]
    fn scaling_covariance_of_q() {
        let s = setup("example1", &params(&[("T", 4.0)]), 100);
        let gen = &s.desc.generators[0];
        let qform = assemble_q(&s.sys, &s.proc, gen, &s.cone);
        let scaled = rescale_generator(gen, gen.lambda2[1] * 3.0, 1);
        let qform3 = assemble_q(&s.sys, &s.proc, &scaled, &s.cone);
        let coords = dirichlet_mode_coords(&s.cone, &s.proc);
        let a = qform.eval(&coords);
        let b = qform3.eval(&coords);
        assert!((b - 3.0 * a).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn rayleigh_threshold_sweeps_once() {
        // the minimal restricted eigenvalue changes sign exactly once on a
        // monotone T-sweep through pi
        let tols = Tolerances::default();
        let mut signs = Vec::new();
        for i in 0..8 {
            let t_end = 2.9 + 0.5 * i as f64 / 7.0;
            let s = setup("example1", &params(&[("T", t_end)]), 100);
            let (cert, _) =
                certificate_search(&s.sys, &s.proc, &s.cone, &s.desc, false, 1, &tols);
            signs.push(cert.min_restricted_eig.unwrap() < -cert.tol_q);
        }
        let flips = signs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(flips, 1, "signs {signs:?}");
        assert!(!signs[0] && *signs.last().unwrap());
    }
}
