//! Dense linear-algebra helpers shared across the analysis pipeline.

use nalgebra::{DMatrix, DVector};

/// Orthonormal basis (rows) of the row space of `a`, SVD-based with a
/// relative singular-value threshold.
pub fn row_space_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(0, a.ncols());
    }
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > rel_tol * smax)
        .count();
    v_t.rows(0, rank).into_owned()
}

/// Orthonormal basis (columns) of the nullspace of `a`.
///
/// Computed by completing the row space to a full basis with a canonical-
/// vector sweep; deterministic for a fixed input.
pub fn nullspace(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let d = a.ncols();
    let w = row_space_basis(a, rel_tol);
    let rank = w.nrows();
    let want = d - rank;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(want);
    for j in 0..d {
        if basis.len() == want {
            break;
        }
        let mut v = DVector::zeros(d);
        v[j] = 1.0;
        // two rounds of Gram-Schmidt for numerical stability
        for _ in 0..2 {
            for i in 0..rank {
                let row = w.row(i).transpose();
                let c = row.dot(&v);
                v -= row * c;
            }
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    assert_eq!(basis.len(), want, "nullspace completion failed");
    if basis.is_empty() {
        return DMatrix::zeros(d, 0);
    }
    DMatrix::from_columns(&basis)
}

/// Spectral distance between the orthogonal projectors onto the column
/// spans of `a` and `b`.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    assert_eq!(b.nrows(), d);
    let pa = a * a.transpose();
    let pb = b * b.transpose();
    let diff = pa - pb;
    diff.svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
}

/// Estimate of the spectral norm of a symmetric matrix (power iteration).
pub fn sym_spectral_norm(m: &DMatrix<f64>, iters: usize) -> f64 {
    let d = m.nrows();
    if d == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64 * 0.7).sin());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..iters {
        let w = m * &v;
        est = w.norm();
        if est == 0.0 {
            return 0.0;
        }
        v = w / est;
    }
    est
}

/// Smallest eigenpair of a symmetric matrix. Dense for small sizes, Lanczos
/// with full reorthogonalization above that (dense fallback on stagnation).
pub fn smallest_eigenpair_sym(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let d = m.nrows();
    assert!(d > 0);
    if d <= 160 {
        return dense_smallest(m);
    }
    // Gershgorin upper bound so that c*I - M is positive semidefinite and
    // its top eigenpair is our bottom one.
    let c = (0..d)
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        + 1.0;
    let scale = sym_spectral_norm(m, 25).max(1e-300);
    for attempt in 0..2 {
        if let Some((mu, v)) = lanczos_top(m, c, 140, attempt) {
            let lambda = c - mu;
            let resid = (m * &v - &v * lambda).norm();
            if resid <= 1e-8 * scale.max(1.0) {
                return (lambda, v);
            }
        }
    }
    dense_smallest(m)
}

fn dense_smallest(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Largest eigenpair of `c*I - M` by Lanczos. Returns None on breakdown.
fn lanczos_top(m: &DMatrix<f64>, c: f64, max_steps: usize, attempt: usize) -> Option<(f64, DVector<f64>)> {
    let d = m.nrows();
    let steps = max_steps.min(d);
    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas = Vec::with_capacity(steps);

    let mut q = DVector::from_fn(d, |i, _| {
        let x = (i as f64 + 1.0) * (0.37 + attempt as f64 * 0.11);
        1.0 + x.sin()
    });
    q /= q.norm();
    qs.push(q.clone());

    let apply = |v: &DVector<f64>| -> DVector<f64> { v * c - m * v };

    let mut beta_prev = 0.0;
    let mut q_prev: Option<DVector<f64>> = None;
    for j in 0..steps {
        let mut w = apply(&qs[j]);
        if let Some(prev) = &q_prev {
            w -= prev * beta_prev;
        }
        let alpha = qs[j].dot(&w);
        w -= &qs[j] * alpha;
        // full reorthogonalization
        for qi in &qs {
            let ci = qi.dot(&w);
            w -= qi * ci;
        }
        alphas.push(alpha);
        let beta = w.norm();
        if j + 1 == steps || beta < 1e-13 {
            break;
        }
        betas.push(beta);
        beta_prev = beta;
        q_prev = Some(qs[j].clone());
        qs.push(w / beta);
    }

    let k = alphas.len();
    if k == 0 {
        return None;
    }
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut best = 0;
    for i in 1..k {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let s = eig.eigenvectors.column(best);
    let mut v = DVector::zeros(d);
    for (j, qj) in qs.iter().enumerate().take(k) {
        v += qj * s[j];
    }
    let norm = v.norm();
    if norm == 0.0 {
        return None;
    }
    Some((eig.eigenvalues[best], v / norm))
}

/// Minimum-norm solution of the (generally wide) system `a x = z`.
/// Returns the solution and the equality residual norm.
pub fn min_norm_solve(a: &DMatrix<f64>, z: &DVector<f64>, rel_tol: f64) -> (DVector<f64>, f64) {
    let d = a.ncols();
    if a.nrows() == 0 {
        return (DVector::zeros(d), 0.0);
    }
    if d == 0 {
        return (DVector::zeros(0), z.norm());
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let mut x = DVector::zeros(d);
    if smax > 0.0 {
        let uz = u.transpose() * z;
        for i in 0..svd.singular_values.len() {
            let s = svd.singular_values[i];
            if s > rel_tol * smax {
                x += v_t.row(i).transpose() * (uz[i] / s);
            }
        }
    }
    let resid = (a * &x - z).norm();
    (x, resid)
}

/// Result of the bound-constrained minimum-norm solve.
#[derive(Debug, Clone)]
pub struct BoundedSolution {
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Minimize `||x||^2` subject to `a x = z` and `x_i >= lower_i`
/// (`lower_i = -inf` leaves a coordinate free). When the equalities are
/// unsatisfiable under the bounds, the least-squares residual is minimized
/// instead and reported.
///
/// The number of bounded coordinates is small everywhere this is used (mix
/// weights, slacks and the square-root coefficient), so the KKT system is
/// solved exactly by enumerating pinned subsets of a ridge-regularized
/// formulation. The optimum is unique and continuous in `z`.
pub fn min_norm_solve_bounded(
    a: &DMatrix<f64>,
    z: &DVector<f64>,
    lower: &[f64],
    _rel_tol: f64,
) -> BoundedSolution {
    let d = a.ncols();
    let m = a.nrows();
    assert_eq!(lower.len(), d);
    let bounded: Vec<usize> = (0..d).filter(|i| lower[*i].is_finite()).collect();
    assert!(
        bounded.len() <= 20,
        "too many bounded coordinates for subset enumeration"
    );

    let gram = a * a.transpose();
    let eps = 1e-14 * (gram.trace() + 1.0);
    let tol = 1e-9;

    let mut best: Option<(f64, f64, DVector<f64>, usize)> = None; // (resid, norm, x, iters)
    let n_subsets = 1usize << bounded.len();
    let mut fallback: Option<(f64, f64, DVector<f64>)> = None;
    for mask in 0..n_subsets {
        let pinned: Vec<usize> = bounded
            .iter()
            .enumerate()
            .filter(|(b, _)| mask & (1 << b) != 0)
            .map(|(_, i)| *i)
            .collect();
        // rhs and Gram of the free block
        let mut rhs = z.clone();
        let mut g = gram.clone();
        for &i in &pinned {
            rhs -= a.column(i) * lower[i];
            let ai = a.column(i).into_owned();
            g.syger(-1.0, &ai, &ai, 1.0);
        }
        for r in 0..m {
            for c in (r + 1)..m {
                g[(r, c)] = g[(c, r)];
            }
            g[(r, r)] += eps;
        }
        let omega = match g.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => {
                let (w, _) = min_norm_solve(&g, &rhs, 1e-13);
                w
            }
        };
        // x_free = A_free^T omega
        let mut x = a.transpose() * &omega;
        for &i in &pinned {
            x[i] = lower[i];
        }
        // primal feasibility on free bounded coordinates
        let scale = 1.0 + omega.norm();
        let primal_ok = bounded
            .iter()
            .filter(|i| !pinned.contains(i))
            .all(|&i| x[i] >= lower[i] - tol * scale);
        // dual feasibility on pinned coordinates: mu_i ~ lower_i - a_i^T omega
        let dual_ok = pinned
            .iter()
            .all(|&i| lower[i] - a.column(i).dot(&omega) >= -tol * scale);
        let resid = (a * &x - z).norm();
        if primal_ok {
            let entry = (resid, x.norm(), x.clone());
            if fallback
                .as_ref()
                .map(|(r, n, _)| resid < *r - 1e-15 || (resid <= *r + 1e-15 && x.norm() < *n))
                .unwrap_or(true)
            {
                fallback = Some(entry);
            }
        }
        if primal_ok && dual_ok {
            let better = match &best {
                None => true,
                Some((r, n, _, _)) => resid < *r - 1e-15 || (resid <= *r + 1e-15 && x.norm() < *n),
            };
            if better {
                best = Some((resid, x.norm(), x, mask.count_ones() as usize + 1));
            }
        }
    }
    if let Some((residual, _, x, iterations)) = best {
        return BoundedSolution {
            x,
            residual,
            iterations,
        };
    }
    // degenerate numerics: take the best primal-feasible candidate
    let (residual, _, x) = fallback.expect("all-pinned subset is always primal feasible");
    BoundedSolution {
        x,
        residual,
        iterations: n_subsets,
    }
}
