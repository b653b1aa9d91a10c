//! Constructive steering: given a certificate direction, drive the endpoint
//! map to nearby targets with a degenerate-Newton fixed-point iteration and
//! realize the required control mixes by chattering.
//!
//! The decision space is `w = (xi, alpha, v, r)`: initial state, mix weights
//! for a tuple of candidate controls, a piecewise-constant control
//! perturbation, and the inequality slack. The endpoint map `G` is evaluated
//! through the relaxed dynamics
//! `phi + sum_i alpha_i (phi(., m_i) - phi)`, whose first-order mix response
//! supplies the endpoint directions that the plain linearization misses; a
//! fixed point of
//! `Psi_y(z) = y + z - G(w_hat + R1(z - G(w_hat)) + sqrt(R2(z - G(w_hat))) q)`
//! then steers the system, and the mix weights are realized by chattering on
//! a refined subgrid (fraction `alpha_i` of every subinterval runs candidate
//! `i`). The final iterations run against the chattered map itself, so the
//! returned control is an exact piecewise-constant control of the original
//! system.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::kernel::{standard_normal, KernelCone};
use crate::linalg;
use crate::system::ControlSystem;
use crate::trajectory::{rk4_cell, LinearizedCells, Process};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error("second-order regularity not detected: probe residual {residual:.3e} in direction {direction:?}")]
    NotSecondOrderRegular {
        residual: f64,
        direction: Vec<f64>,
    },
    #[error("target |y| = {0:.3e} exceeds the configured radius {1:.3e}")]
    TargetTooLarge(f64, f64),
    #[error("mix weights must be nonnegative with sum < 1 (got sum {0})")]
    BadMixWeights(f64),
    #[error("steering iteration diverged: residual {residual:.3e} after {iterations} iterations")]
    Diverged { residual: f64, iterations: usize },
}

// ---------------------------------------------------------------------------
// chattering controls

/// Piecewise-constant control on an explicit (possibly non-uniform) partition.
#[derive(Debug, Clone, Serialize)]
pub struct ChatteringControl {
    /// S+1 breakpoints covering [t0, t1].
    pub breaks: Vec<f64>,
    /// S control values.
    pub values: Vec<Vec<f64>>,
}

impl ChatteringControl {
    pub fn from_cells(grid: &crate::trajectory::Grid, samples: &[DVector<f64>]) -> Self {
        ChatteringControl {
            breaks: grid.times(),
            values: samples.iter().map(|u| u.iter().copied().collect()).collect(),
        }
    }

    pub fn value_at(&self, t: f64) -> DVector<f64> {
        let mut idx = match self
            .breaks
            .binary_search_by(|b| b.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        idx = idx.min(self.values.len() - 1);
        DVector::from_row_slice(&self.values[idx])
    }

    /// L1 distance between two controls on the same span.
    pub fn l1_distance(&self, other: &ChatteringControl) -> f64 {
        let mut cuts: Vec<f64> = self
            .breaks
            .iter()
            .chain(other.breaks.iter())
            .copied()
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            total += (self.value_at(mid) - other.value_at(mid)).norm() * (w[1] - w[0]);
        }
        total
    }
}

/// Time-share the candidate controls on every refined subinterval: fraction
/// `alpha_i` runs candidate `i`, the remainder runs the base control. Exact
/// switch points keep the map `alpha -> control` L1-continuous.
pub fn mix_controls(
    base: &[DVector<f64>],
    candidates: &[Vec<DVector<f64>>],
    weights: &DVector<f64>,
    subgrid_depth: usize,
    grid: &crate::trajectory::Grid,
) -> Result<ChatteringControl, CorrectorError> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || sum >= 1.0 {
        return Err(CorrectorError::BadMixWeights(sum));
    }
    assert_eq!(candidates.len(), weights.len());
    let sub = 1usize << subgrid_depth;
    let dt_sub = grid.dt() / sub as f64;
    let mut breaks = vec![grid.t0];
    let mut values: Vec<Vec<f64>> = Vec::new();
    for k in 0..grid.steps {
        for j in 0..sub {
            let start = grid.time(k) + j as f64 * dt_sub;
            let mut at = start;
            for (i, cand) in candidates.iter().enumerate() {
                let len = weights[i] * dt_sub;
                if len <= 1e-18 * grid.dt() {
                    continue;
                }
                at += len;
                breaks.push(at);
                values.push(cand[k].iter().copied().collect());
            }
            // remainder runs the base control
            let end = start + dt_sub;
            if end - at > 1e-18 * grid.dt() {
                breaks.push(end);
                values.push(base[k].iter().copied().collect());
            } else if let Some(last) = breaks.last_mut() {
                *last = end;
            }
        }
    }
    *breaks.last_mut().unwrap() = grid.t1;
    Ok(ChatteringControl { breaks, values })
}

/// RK4 integration of a chattering control, one step per constant segment.
/// Returns the states at all breakpoints.
pub fn simulate_chattered(
    system: &ControlSystem,
    x0: &DVector<f64>,
    control: &ChatteringControl,
) -> Result<Vec<DVector<f64>>, crate::trajectory::SimulateError> {
    let mut states = Vec::with_capacity(control.breaks.len());
    states.push(x0.clone());
    for (s, value) in control.values.iter().enumerate() {
        let t = control.breaks[s];
        let dt = control.breaks[s + 1] - t;
        let u = DVector::from_row_slice(value);
        let x = states.last().unwrap().clone();
        let next = if dt <= 0.0 {
            x
        } else {
            rk4_cell(system, t, &x, &u, dt).0
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(crate::trajectory::SimulateError::NonFinite { step: s + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// the corrector problem

/// Decision space, reference point and mix tuple for the steering corrector.
pub struct CorrectorProblem {
    pub system: ControlSystem,
    pub process: Process,
    /// Candidate controls for the mix coordinates (piecewise constant on the
    /// reference grid).
    pub mix: Vec<Vec<DVector<f64>>>,
    /// Unit direction in decision coordinates (weighted norm); the mix block
    /// is zero, matching the cone membership of the certificate variation.
    pub q_dir: DVector<f64>,
    /// Column weights of the decision space (control columns carry sqrt(dt)).
    pub weights: DVector<f64>,
    /// Lower bounds for the displacement from w_hat.
    pub lower_disp: Vec<f64>,
    pub f_hat: DVector<f64>,
    pub g_hat_map: DVector<f64>,
    n: usize,
    r: usize,
    steps: usize,
}

impl CorrectorProblem {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.mix.len(), self.steps * self.r, self.system.m1)
    }

    pub fn decision_dim(&self) -> usize {
        let (n, k, nv, m1) = self.dims();
        n + k + nv + m1
    }

    fn split<'a>(&self, w: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>, Vec<DVector<f64>>, DVector<f64>) {
        let (n, k, _nv, m1) = self.dims();
        let xi = w.rows(0, n).into_owned();
        let alpha = w.rows(n, k).into_owned();
        let v: Vec<DVector<f64>> = (0..self.steps)
            .map(|s| w.rows(n + k + s * self.r, self.r).into_owned())
            .collect();
        let r_abs = w.rows(n + k + self.steps * self.r, m1).into_owned();
        (xi, alpha, v, r_abs)
    }

    /// Reference decision point (xi = x0_hat, alpha = 0, v = 0, r = -f_hat).
    pub fn w_hat(&self) -> DVector<f64> {
        let (n, k, nv, m1) = self.dims();
        let mut w = DVector::zeros(n + k + nv + m1);
        w.rows_mut(0, n).copy_from(self.process.x0());
        for i in 0..m1 {
            w[n + k + nv + i] = -self.f_hat[i];
        }
        w
    }

    /// Endpoint map of the relaxed dynamics, `(f + r, g)`.
    pub fn eval_relaxed(&self, w: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let (xi, alpha, v, r_abs) = self.split(w);
        let states = self.simulate_relaxed(&xi, &alpha, &v);
        (self.endpoint_values(&states, &r_abs), states)
    }

    fn endpoint_values(&self, states: &[DVector<f64>], r_abs: &DVector<f64>) -> DVector<f64> {
        let sys = &self.system;
        let mut z = DVector::zeros(2 * sys.n);
        z.rows_mut(0, sys.n).copy_from(&states[0]);
        z.rows_mut(sys.n, sys.n).copy_from(states.last().unwrap());
        let mut out = DVector::zeros(sys.m1 + sys.m2);
        if sys.m1 > 0 {
            out.rows_mut(0, sys.m1).copy_from(&(sys.f.value(&z) + r_abs));
        }
        if sys.m2 > 0 {
            out.rows_mut(sys.m1, sys.m2).copy_from(&sys.g.value(&z));
        }
        out
    }

    fn relaxed_field(
        &self,
        t: f64,
        x: &DVector<f64>,
        cell: usize,
        v: &[DVector<f64>],
        alpha: &DVector<f64>,
    ) -> DVector<f64> {
        let u = &self.process.u[cell] + &v[cell];
        let mut phi = self.system.dynamics.value(t, x, &u);
        if alpha.iter().any(|a| *a != 0.0) {
            let base = phi.clone();
            for (i, cand) in self.mix.iter().enumerate() {
                if alpha[i] == 0.0 {
                    continue;
                }
                let phi_i = self.system.dynamics.value(t, x, &cand[cell]);
                phi += (phi_i - &base) * alpha[i];
            }
        }
        phi
    }

    fn simulate_relaxed(
        &self,
        xi: &DVector<f64>,
        alpha: &DVector<f64>,
        v: &[DVector<f64>],
    ) -> Vec<DVector<f64>> {
        let grid = &self.process.grid;
        let dt = grid.dt();
        let mut states = Vec::with_capacity(grid.steps + 1);
        states.push(xi.clone());
        for k in 0..grid.steps {
            let t = grid.time(k);
            let x = states.last().unwrap();
            let f = |tt: f64, xx: &DVector<f64>| self.relaxed_field(tt, xx, k, v, alpha);
            let k1 = f(t, x);
            let k2 = f(t + dt / 2.0, &(x + &k1 * (dt / 2.0)));
            let k3 = f(t + dt / 2.0, &(x + &k2 * (dt / 2.0)));
            let k4 = f(t + dt, &(x + &k3 * dt));
            states.push(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0));
        }
        states
    }

    /// Endpoint map through the chattered realization of the mix weights.
    pub fn eval_chattered(
        &self,
        w: &DVector<f64>,
        depth: usize,
    ) -> Result<(DVector<f64>, ChatteringControl, Vec<DVector<f64>>), CorrectorError> {
        let (xi, mut alpha, v, r_abs) = self.split(w);
        // the bound-constrained solve can leave weights a few ulps below zero
        for a in alpha.iter_mut() {
            if *a < 0.0 && *a > -1e-9 {
                *a = 0.0;
            }
        }
        let base: Vec<DVector<f64>> = (0..self.steps)
            .map(|k| &self.process.u[k] + &v[k])
            .collect();
        let control = mix_controls(&base, &self.mix, &alpha, depth, &self.process.grid)?;
        let states = simulate_chattered(&self.system, &xi, &control)
            .map_err(|_| CorrectorError::Diverged { residual: f64::INFINITY, iterations: 0 })?;
        let node_states = node_states_from_breaks(&control.breaks, &states, &self.process.grid);
        let g = self.endpoint_values(&node_states, &r_abs);
        Ok((g, control, node_states))
    }
}

/// Pick the states at the original grid nodes out of the breakpoint states.
fn node_states_from_breaks(
    breaks: &[f64],
    states: &[DVector<f64>],
    grid: &crate::trajectory::Grid,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(grid.steps + 1);
    let mut idx = 0usize;
    for k in 0..=grid.steps {
        let t = grid.time(k);
        while idx + 1 < breaks.len() && breaks[idx] < t - 1e-12 {
            idx += 1;
        }
        out.push(states[idx].clone());
    }
    out
}

/// Default mix tuple: constant controls near the window edges, one pair per
/// control axis with the other axes at the window center, plus the center.
fn default_mix(system: &ControlSystem, steps: usize) -> Vec<Vec<DVector<f64>>> {
    let mid = DVector::from_iterator(
        system.r,
        system
            .control_set
            .test_window
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi)),
    );
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    for axis in 0..system.r {
        let (lo, hi) = system.control_set.test_window[axis];
        let width = hi - lo;
        for frac in [0.05, 0.95] {
            let mut c = mid.clone();
            c[axis] = lo + frac * width;
            candidates.push(c);
        }
    }
    candidates.push(mid);
    candidates
        .into_iter()
        .map(|c| vec![c; steps])
        .collect()
}

/// Assemble the corrector problem around a reference process; the direction
/// comes from the certificate witness (kernel-cone coordinates) when one
/// exists.
pub fn build_corrector_problem(
    system: &ControlSystem,
    process: &Process,
    kernel: &KernelCone,
    direction: Option<&DVector<f64>>,
    tols: &Tolerances,
) -> CorrectorProblem {
    let n = system.n;
    let r = system.r;
    let steps = process.grid.steps;
    let mix = default_mix(system, steps);
    let k = mix.len();
    let m1 = system.m1;
    let dim = n + k + steps * r + m1;

    let z = process.endpoints();
    let f_hat = if m1 > 0 { system.f.value(&z) } else { DVector::zeros(0) };
    let g_hat_map = if system.m2 > 0 { system.g.value(&z) } else { DVector::zeros(0) };

    let sqrt_dt = process.grid.dt().sqrt();
    let mut weights = DVector::from_element(dim, 1.0);
    for i in 0..steps * r {
        weights[n + k + i] = sqrt_dt;
    }
    let mut lower = vec![f64::NEG_INFINITY; dim];
    for i in 0..k {
        lower[n + i] = 0.0; // alpha displacement >= 0
    }
    for i in 0..m1 {
        lower[n + k + steps * r + i] = f_hat[i]; // r displacement >= f_hat
    }

    let mut q_dir = DVector::zeros(dim);
    if let Some(coords) = direction {
        let variation = kernel.variation(coords);
        q_dir.rows_mut(0, n).copy_from(&variation.h0);
        for (s, vs) in variation.v.iter().enumerate() {
            q_dir.rows_mut(n + k + s * r, r).copy_from(vs);
        }
        if m1 > 0 {
            let eta = variation.eta();
            let f_eta = system.f.jac(&z) * eta;
            for i in 0..m1 {
                q_dir[n + k + steps * r + i] = -f_eta[i];
            }
        }
        let wn = (0..dim)
            .map(|i| (q_dir[i] * weights[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        if wn > 0.0 {
            q_dir /= wn;
        }
    }
    let _ = tols;
    CorrectorProblem {
        system: system.clone(),
        process: process.clone(),
        mix,
        q_dir,
        weights,
        lower_disp: lower,
        f_hat,
        g_hat_map,
        n,
        r,
        steps,
    }
}

// ---------------------------------------------------------------------------
// right inverse of the first-plus-second-order map

/// Right inverse of `Lambda(w, beta) = G'(w_hat) w + beta/2 * G''(w_hat)[q,q]`
/// on the shifted cone, with its norm bound.
pub struct RightInverse {
    /// m x (dim+1) matrix on weighted variables.
    a_weighted: DMatrix<f64>,
    weights: DVector<f64>,
    lower: Vec<f64>,
    /// G''(w_hat)[q, q] by central differencing of the relaxed map.
    pub second_dir: DVector<f64>,
    /// Estimated norm bound: max (|R1| + R2) / |z| over the probe sphere.
    pub gamma: f64,
}

pub struct RightInverseSolution {
    pub disp: DVector<f64>,
    pub beta: f64,
    pub residual: f64,
}

impl RightInverse {
    pub fn solve(&self, z: &DVector<f64>) -> RightInverseSolution {
        let sol = linalg::min_norm_solve_bounded(&self.a_weighted, z, &self.lower, 1e-12);
        let dim = self.weights.len();
        let mut disp = DVector::zeros(dim);
        for i in 0..dim {
            disp[i] = sol.x[i] / self.weights[i];
        }
        RightInverseSolution {
            disp,
            beta: sol.x[dim].max(0.0),
            residual: sol.residual,
        }
    }
}

/// Exact derivative of one relaxed RK4 cell with respect to a mix weight at
/// alpha = 0: stage chain with the candidate field difference as forcing.
fn mix_response_end(
    system: &ControlSystem,
    process: &Process,
    cells: &LinearizedCells,
    candidate: &[DVector<f64>],
) -> DVector<f64> {
    let n = system.n;
    let dt = process.grid.dt();
    let mut d = DVector::zeros(n);
    for k in 0..process.grid.steps {
        let u = &process.u[k];
        let (_, st) = rk4_cell(system, process.grid.time(k), &process.x[k], u, dt);
        let df = |i: usize| {
            system.dynamics.value(st.t[i], &st.x[i], &candidate[k])
                - system.dynamics.value(st.t[i], &st.x[i], u)
        };
        let a = |i: usize| system.dynamics.jac_x(st.t[i], &st.x[i], u);
        let d1 = df(0);
        let d2 = a(1) * &d1 * (dt / 2.0) + df(1);
        let d3 = a(2) * &d2 * (dt / 2.0) + df(2);
        let d4 = a(3) * &d3 * dt + df(3);
        d = &cells.jac[k] * d + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (dt / 6.0);
    }
    d
}

/// Build the right inverse; errors when some probe direction is not covered
/// (the linearized-plus-second-order map is not onto the cone image).
pub fn build_right_inverse(
    problem: &CorrectorProblem,
    cells: &LinearizedCells,
    _tols: &Tolerances,
) -> Result<RightInverse, CorrectorError> {
    let sys = &problem.system;
    let n = sys.n;
    let m = sys.m1 + sys.m2;
    let (_, k, nv, m1) = problem.dims();
    let dim = problem.decision_dim();

    let z_hat = problem.process.endpoints();
    let fj = sys.f.jac(&z_hat);
    let gj = sys.g.jac(&z_hat);
    let mut stacked = DMatrix::zeros(m, 2 * n);
    if sys.m1 > 0 {
        stacked.rows_mut(0, sys.m1).copy_from(&fj);
    }
    if sys.m2 > 0 {
        stacked.rows_mut(sys.m1, sys.m2).copy_from(&gj);
    }

    // transition and per-cell control sensitivities to the final state
    let mut s = DMatrix::<f64>::identity(n, n);
    let mut ctrl_to_end: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, problem.r); problem.steps];
    for kk in (0..problem.steps).rev() {
        ctrl_to_end[kk] = &s * &cells.ctrl[kk];
        s = &s * &cells.jac[kk];
    }
    let phi_end = s;

    let endpoint_cols = |d0: &DVector<f64>, d1: &DVector<f64>| -> DVector<f64> {
        let mut dz = DVector::zeros(2 * n);
        dz.rows_mut(0, n).copy_from(d0);
        dz.rows_mut(n, n).copy_from(d1);
        &stacked * dz
    };

    let mut a = DMatrix::zeros(m, dim + 1);
    // xi columns
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let d1 = &phi_end * &e;
        a.set_column(j, &endpoint_cols(&e, &d1));
    }
    // mix columns
    for (i, cand) in problem.mix.iter().enumerate() {
        let d1 = mix_response_end(sys, &problem.process, cells, cand);
        a.set_column(n + i, &endpoint_cols(&DVector::zeros(n), &d1));
    }
    // control columns
    for kk in 0..problem.steps {
        for j in 0..problem.r {
            let d1 = ctrl_to_end[kk].column(j).into_owned();
            a.set_column(
                n + k + kk * problem.r + j,
                &endpoint_cols(&DVector::zeros(n), &d1),
            );
        }
    }
    // slack columns feed the f-rows directly
    for i in 0..m1 {
        let mut col = DVector::zeros(m);
        col[i] = 1.0;
        a.set_column(n + k + nv + i, &col);
    }
    // second-order column: central difference along q of the relaxed map
    let w_hat = problem.w_hat();
    let step = 1e-4;
    let second_dir = if problem.q_dir.norm() > 0.0 {
        let (gp, _) = problem.eval_relaxed(&(&w_hat + &problem.q_dir * step));
        let (g0, _) = problem.eval_relaxed(&w_hat);
        let (gm, _) = problem.eval_relaxed(&(&w_hat - &problem.q_dir * step));
        (gp - &g0 * 2.0 + gm) / (step * step)
    } else {
        DVector::zeros(m)
    };
    a.set_column(dim, &(&second_dir * 0.5));

    // weighted variables; bounded coordinates keep weight 1
    let mut weights = problem.weights.clone();
    for (i, lo) in problem.lower_disp.iter().enumerate() {
        if lo.is_finite() {
            debug_assert_eq!(weights[i], 1.0);
        }
        let _ = i;
    }
    let mut a_weighted = a.clone();
    for j in 0..dim {
        let wj = weights[j];
        let col = a_weighted.column(j) / wj;
        a_weighted.set_column(j, &col);
    }
    let mut lower = problem.lower_disp.clone();
    lower.push(0.0); // beta >= 0
    weights = weights.clone();

    let inverse = RightInverse {
        a_weighted,
        weights,
        lower,
        second_dir,
        gamma: 0.0,
    };

    // probe the unit sphere: +-e_i and 64 deterministic directions
    let mut probes: Vec<DVector<f64>> = Vec::new();
    for i in 0..m {
        let mut e = DVector::zeros(m);
        e[i] = 1.0;
        probes.push(e.clone());
        probes.push(-e);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..64 {
        let v = DVector::from_fn(m, |_, _| standard_normal(&mut rng));
        let norm = v.norm();
        if norm > 1e-12 {
            probes.push(v / norm);
        }
    }
    let mut gamma: f64 = 0.0;
    for z in &probes {
        let sol = inverse.solve(z);
        if sol.residual > 1e-7 {
            return Err(CorrectorError::NotSecondOrderRegular {
                residual: sol.residual,
                direction: z.iter().copied().collect(),
            });
        }
        let r1_weighted = (0..dim)
            .map(|i| (sol.disp[i] * problem.weights[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        gamma = gamma.max(r1_weighted + sol.beta);
    }

    Ok(RightInverse { gamma, ..inverse })
}

// ---------------------------------------------------------------------------
// steering

#[derive(Debug, Clone, Serialize)]
pub struct SteeringVerification {
    pub controls_in_set: bool,
    pub g_residual: f64,
    pub f_within_target: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteeringResult {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub left_trust_ball: bool,
    pub y: Vec<f64>,
    /// max_k |x(t_k) - x_hat(t_k)| of the realized trajectory.
    pub deviation: f64,
    /// deviation / sqrt(|y - G(w_hat)|).
    pub kappa_empirical: f64,
    /// sqrt(8 gamma) from the right-inverse bound.
    pub kappa_theory: f64,
    pub beta: f64,
    pub alpha: Vec<f64>,
    pub chatter_depth: Option<usize>,
    #[serde(skip)]
    pub control: ChatteringControl,
    #[serde(skip)]
    pub node_states: Vec<DVector<f64>>,
    pub endpoint_values: Vec<f64>,
    pub verification: SteeringVerification,
    pub residual_history: Vec<f64>,
}

/// Steer the system to endpoint targets `y = (y1, y2)`.
pub fn reach_target(
    problem: &CorrectorProblem,
    right_inverse: &RightInverse,
    y: &DVector<f64>,
    max_iter: usize,
    tol: f64,
    tols: &Tolerances,
) -> Result<SteeringResult, CorrectorError> {
    let m = problem.system.m1 + problem.system.m2;
    assert_eq!(y.len(), m);
    if y.norm() > tols.reach_radius * (1.0 + 1e-12) {
        return Err(CorrectorError::TargetTooLarge(y.norm(), tols.reach_radius));
    }
    let w_hat = problem.w_hat();
    let (g_hat, _) = problem.eval_relaxed(&w_hat);
    let y_gap = (y - &g_hat).norm();

    if y_gap <= 1e-14 {
        // the reference process already realizes the target
        let control = ChatteringControl::from_cells(&problem.process.grid, &problem.process.u);
        return Ok(SteeringResult {
            converged: true,
            iterations: 0,
            residual: 0.0,
            left_trust_ball: false,
            y: y.iter().copied().collect(),
            deviation: 0.0,
            kappa_empirical: 0.0,
            kappa_theory: (8.0 * right_inverse.gamma).sqrt(),
            beta: 0.0,
            alpha: vec![0.0; problem.mix.len()],
            chatter_depth: None,
            control,
            node_states: problem.process.x.clone(),
            endpoint_values: g_hat.iter().copied().collect(),
            verification: SteeringVerification {
                controls_in_set: true,
                g_residual: 0.0,
                f_within_target: true,
            },
            residual_history: vec![0.0],
        });
    }

    let point_of = |sol: &RightInverseSolution| -> DVector<f64> {
        &w_hat + &sol.disp + &problem.q_dir * sol.beta.sqrt()
    };

    // phase 1: iterate with the relaxed (smooth) endpoint map
    let mut z = g_hat.clone();
    let mut history = Vec::new();
    let mut left_trust = false;
    let mut iterations = 0;
    let mut best_sol = right_inverse.solve(&DVector::zeros(m));
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        iterations = it + 1;
        let sol = right_inverse.solve(&(&z - &g_hat));
        let w = point_of(&sol);
        let (g, _) = problem.eval_relaxed(&w);
        let psi = y + &z - &g;
        residual = (y - &g).norm();
        history.push(residual);
        if (&psi - &g_hat).norm() > 2.0 * y_gap * (1.0 + 1e-9) {
            left_trust = true;
        }
        best_sol = sol;
        if residual <= tol {
            break;
        }
        z = psi;
    }
    if residual > tol * 1e3 && residual > 1e-6 {
        return Err(CorrectorError::Diverged {
            residual,
            iterations,
        });
    }

    // phase 2/3: realize the mix weights by chattering and polish against
    // the chattered map itself
    let alpha_needed = best_sol.disp.rows(problem.n, problem.mix.len()).amax() > 1e-12;
    let mut depth_used = None;
    let g_true: DVector<f64>;
    let control: ChatteringControl;
    let node_states: Vec<DVector<f64>>;
    if alpha_needed {
        let mut depth = 6;
        loop {
            let mut zz = z.clone();
            let mut sol = right_inverse.solve(&(&zz - &g_hat));
            let mut polished;
            let mut out = problem.eval_chattered(&point_of(&sol), depth)?;
            loop {
                let g = &out.0;
                polished = (y - g).norm();
                history.push(polished);
                iterations += 1;
                if polished <= tol || history.len() > max_iter + 80 {
                    break;
                }
                zz = y + &zz - g;
                sol = right_inverse.solve(&(&zz - &g_hat));
                out = problem.eval_chattered(&point_of(&sol), depth)?;
            }
            if polished <= tol || depth >= 12 {
                residual = polished;
                best_sol = sol;
                g_true = out.0;
                control = out.1;
                node_states = out.2;
                depth_used = Some(depth);
                break;
            }
            depth += 3;
        }
    } else {
        // no mixing: the relaxed evaluation already is an exact
        // piecewise-constant control
        let out = problem.eval_chattered(&point_of(&best_sol), 0)?;
        g_true = out.0;
        control = out.1;
        node_states = out.2;
        residual = (y - &g_true).norm();
    }

    finish(
        problem,
        right_inverse,
        y,
        y_gap,
        residual,
        iterations,
        left_trust,
        best_sol,
        control,
        node_states,
        g_true,
        history,
        depth_used,
        tol,
        tols,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &CorrectorProblem,
    right_inverse: &RightInverse,
    y: &DVector<f64>,
    y_gap: f64,
    residual: f64,
    iterations: usize,
    left_trust: bool,
    sol: RightInverseSolution,
    control: ChatteringControl,
    node_states: Vec<DVector<f64>>,
    g_true: DVector<f64>,
    history: Vec<f64>,
    depth_used: Option<usize>,
    tol: f64,
    _tols: &Tolerances,
) -> Result<SteeringResult, CorrectorError> {
    let converged = residual <= tol * 10.0;
    // independent verification of the realized control
    let states = simulate_chattered(&problem.system, &node_states[0], &control)
        .map_err(|_| CorrectorError::Diverged { residual, iterations })?;
    let mut deviation: f64 = 0.0;
    for (k, xs) in node_states.iter().enumerate() {
        deviation = deviation.max((xs - &problem.process.x[k]).norm());
    }
    let controls_in_set = control
        .values
        .iter()
        .all(|u| problem.system.control_set.contains(&DVector::from_row_slice(u)));
    let n = problem.system.n;
    let mut z_end = DVector::zeros(2 * n);
    z_end.rows_mut(0, n).copy_from(&states[0]);
    z_end.rows_mut(n, n).copy_from(states.last().unwrap());
    let g_map = if problem.system.m2 > 0 {
        problem.system.g.value(&z_end)
    } else {
        DVector::zeros(0)
    };
    let y2 = y.rows(problem.system.m1, problem.system.m2);
    let g_residual = (g_map - y2).norm();
    let f_within_target = if problem.system.m1 > 0 {
        let f_vals = problem.system.f.value(&z_end);
        (0..problem.system.m1).all(|i| f_vals[i] <= y[i] + 10.0 * tol)
    } else {
        true
    };

    let alpha = sol.disp.rows(problem.n, problem.mix.len()).iter().copied().collect();
    Ok(SteeringResult {
        converged,
        iterations,
        residual,
        left_trust_ball: left_trust,
        y: y.iter().copied().collect(),
        deviation,
        kappa_empirical: if y_gap > 0.0 {
            deviation / y_gap.sqrt()
        } else {
            0.0
        },
        kappa_theory: (8.0 * right_inverse.gamma).sqrt(),
        beta: sol.beta,
        alpha,
        chatter_depth: depth_used,
        control,
        node_states,
        endpoint_values: g_true.iter().copied().collect(),
        verification: SteeringVerification {
            controls_in_set,
            g_residual,
            f_within_target,
        },
        residual_history: history,
    })
}

// ---------------------------------------------------------------------------
// reachability probing

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Best residual on the shifted coordinates after feasibility correction
    /// of the unshifted ones.
    pub best_residual: f64,
    pub evaluations: usize,
    pub best_gap: Vec<f64>,
}

/// Randomized + Nelder-Mead search for a control realizing
/// `g(endpoints) = g_hat + target_shift`. Unshifted coordinates are enforced
/// through a scalar offset correction, so the reported residual isolates the
/// obstructed directions. A large floor corroborates (never proves)
/// non-controllability.
pub fn probe_reachability(
    system: &ControlSystem,
    process: &Process,
    target_shift: &DVector<f64>,
    budget: usize,
    seed: u64,
) -> ProbeReport {
    let m2 = system.m2;
    assert_eq!(target_shift.len(), m2);
    let grid = process.grid;
    let z_hat = process.endpoints();
    let g_target = system.g.value(&z_hat) + target_shift;
    let shifted: Vec<usize> = (0..m2).filter(|&i| target_shift[i].abs() > 1e-15).collect();
    let unshifted: Vec<usize> = (0..m2).filter(|&i| target_shift[i].abs() <= 1e-15).collect();

    // basis: constant + three Fourier pairs per control axis
    let t_len = grid.t1 - grid.t0;
    let n_basis = 1 + 6;
    let basis = |j: usize, t: f64| -> f64 {
        if j == 0 {
            1.0
        } else {
            let harmonic = ((j - 1) / 2 + 1) as f64;
            let phase = 2.0 * std::f64::consts::PI * harmonic * (t - grid.t0) / t_len;
            if (j - 1) % 2 == 0 {
                phase.sin()
            } else {
                phase.cos()
            }
        }
    };
    let p = n_basis * system.r;
    let evals = std::cell::Cell::new(0usize);

    let controls_for = |c: &DVector<f64>, offset: f64| -> Vec<DVector<f64>> {
        (0..grid.steps)
            .map(|k| {
                let t = grid.time(k);
                let mut u = process.u[k].clone();
                for axis in 0..system.r {
                    let mut du = offset;
                    for j in 0..n_basis {
                        du += c[axis * n_basis + j] * basis(j, t);
                    }
                    let (lo, hi) = system.control_set.test_window[axis];
                    u[axis] = (u[axis] + du).clamp(lo, hi);
                }
                u
            })
            .collect()
    };
    let endpoints_gap = |c: &DVector<f64>, offset: f64| -> Option<DVector<f64>> {
        evals.set(evals.get() + 1);
        let controls = controls_for(c, offset);
        let proc = crate::trajectory::simulate(system, process.x0(), &controls, grid).ok()?;
        Some(system.g.value(&proc.endpoints()) - &g_target)
    };

    // scalar offset correction on the unshifted coordinates (Gauss-Newton on
    // the unshifted residual; exact in one step for offset-linear endpoints)
    let corrected_gap = |c: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
        let mut offset = 0.0;
        if !unshifted.is_empty() {
            for _ in 0..8 {
                let gap = endpoints_gap(c, offset)?;
                let val: f64 = unshifted.iter().map(|&i| gap[i] * gap[i]).sum();
                if val <= 1e-28 {
                    break;
                }
                let h = 1e-7;
                let gap_h = endpoints_gap(c, offset + h)?;
                let mut jg = 0.0;
                let mut jj = 0.0;
                for &i in &unshifted {
                    let j = (gap_h[i] - gap[i]) / h;
                    jg += j * gap[i];
                    jj += j * j;
                }
                if jj <= 1e-18 {
                    break;
                }
                offset -= jg / jj;
            }
        }
        endpoints_gap(c, offset).map(|g| (g, offset))
    };
    let objective = |c: &DVector<f64>| -> f64 {
        match corrected_gap(c) {
            Some((gap, _)) => {
                let main: f64 = if shifted.is_empty() {
                    gap.amax()
                } else {
                    shifted.iter().map(|&i| gap[i].abs()).fold(0.0, f64::max)
                };
                let penalty: f64 = unshifted.iter().map(|&i| gap[i].abs()).sum();
                main + 1e2 * penalty
            }
            None => f64::INFINITY,
        }
    };

    let mut best_c = DVector::zeros(p);
    let mut best_val = objective(&best_c);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.3;
    while evals.get() < budget * 7 / 10 {
        let start = if evals.get() < budget / 4 {
            DVector::from_fn(p, |_, _| scale * standard_normal(&mut rng) * 0.3)
        } else {
            // perturb the incumbent
            &best_c + DVector::from_fn(p, |_, _| 0.1 * scale * standard_normal(&mut rng))
        };
        let (c, val) = nelder_mead(&start, 0.05, &objective, budget.saturating_sub(evals.get()));
        if val < best_val {
            best_val = val;
            best_c = c;
        }
    }
    // final polish: coordinate Gauss-Newton sweeps on the shifted residual
    let eval_cap = budget + budget / 2;
    'polish: for _pass in 0..2 {
        for axis in 0..p {
            let mut c = best_c.clone();
            for _ in 0..5 {
                if evals.get() >= eval_cap {
                    break 'polish;
                }
                let Some((gap, _)) = corrected_gap(&c) else { break };
                let h = 1e-7;
                let mut ch = c.clone();
                ch[axis] += h;
                let Some((gap_h, _)) = corrected_gap(&ch) else { break };
                let mut jg = 0.0;
                let mut jj = 0.0;
                for &i in shifted.iter().chain(unshifted.iter()) {
                    let j = (gap_h[i] - gap[i]) / h;
                    jg += j * gap[i];
                    jj += j * j;
                }
                if jj <= 1e-18 {
                    break;
                }
                c[axis] -= jg / jj;
            }
            let vc = objective(&c);
            if vc < best_val {
                best_val = vc;
                best_c = c;
            }
        }
    }

    let (gap, _) = corrected_gap(&best_c).unwrap_or((DVector::from_element(m2, f64::INFINITY), 0.0));
    let best_residual = if shifted.is_empty() {
        gap.amax()
    } else {
        shifted.iter().map(|&i| gap[i].abs()).fold(0.0, f64::max)
    };
    ProbeReport {
        best_residual,
        evaluations: evals.get(),
        best_gap: gap.iter().copied().collect(),
    }
}

/// Minimal Nelder-Mead with an evaluation cap.
fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(
    start: &DVector<f64>,
    spread: f64,
    f: &F,
    max_evals: usize,
) -> (DVector<f64>, f64) {
    let dim = start.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut used = 0usize;
    let eval = |x: &DVector<f64>, used: &mut usize| -> f64 {
        *used += 1;
        f(x)
    };
    simplex.push((start.clone(), eval(start, &mut used)));
    for i in 0..dim {
        let mut x = start.clone();
        x[i] += spread;
        let v = eval(&x, &mut used);
        simplex.push((x, v));
    }
    while used < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= 1e-14 * best.abs().max(1.0) {
            break;
        }
        let centroid: DVector<f64> = simplex[..dim]
            .iter()
            .fold(DVector::zeros(dim), |acc, (x, _)| acc + x)
            / dim as f64;
        let reflected = &centroid * 2.0 - &simplex[dim].0;
        let fr = eval(&reflected, &mut used);
        if fr < simplex[0].1 {
            let expanded = &centroid * 2.0 - &simplex[dim].0 + (&reflected - &centroid);
            let fe = eval(&expanded, &mut used);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = &centroid + (&simplex[dim].0 - &centroid) * 0.5;
            let fc = eval(&contracted, &mut used);
            if fc < simplex[dim].1 {
                simplex[dim] = (contracted, fc);
            } else {
                let best_x = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let shrunk = (&best_x + &item.0) * 0.5;
                    let fv = eval(&shrunk, &mut used);
                    *item = (shrunk, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex[0].clone()
}
