//! Double-description of polyhedral cones `{ c : B c <= 0 }`.
//!
//! The multiplier cone is the intersection of a nullspace with finitely many
//! homogeneous halfspaces; this module turns that H-description into
//! generators: a lineality basis plus the extreme rays of the pointed part.
//! Dimensions here are small (at most the number of endpoint constraints),
//! rows can be numerous (Hamiltonian cuts), so rows are deduplicated first
//! and the update uses the combinatorial adjacency test.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum ConeError {
    #[error("double description blew up ({0} rays); cone too complex")]
    TooComplex(usize),
}

#[derive(Debug, Clone)]
pub struct PolyhedralCone {
    /// Extreme rays of the pointed part (unit norm).
    pub rays: Vec<DVector<f64>>,
    /// Orthonormal basis of the lineality space.
    pub lineality: Vec<DVector<f64>>,
}

impl PolyhedralCone {
    pub fn is_trivial(&self) -> bool {
        self.rays.is_empty() && self.lineality.is_empty()
    }

    /// Dimension of the linear hull.
    pub fn linear_hull_dim(&self, ambient: usize) -> usize {
        if self.is_trivial() {
            return 0;
        }
        let mut cols: Vec<DVector<f64>> = self.lineality.clone();
        cols.extend(self.rays.iter().cloned());
        let mat = DMatrix::from_columns(&cols);
        linalg::row_space_basis(&mat.transpose(), 1e-7).nrows().min(ambient)
    }
}

const ACTIVE_TOL: f64 = 1e-9;
const MAX_RAYS: usize = 4096;

/// Deduplicate and normalize inequality rows; drops near-zero rows.
fn clean_rows(b: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let mut rows: Vec<DVector<f64>> = Vec::new();
    'outer: for i in 0..b.nrows() {
        let r = b.row(i).transpose();
        let norm = r.norm();
        if norm <= 1e-14 {
            continue;
        }
        let r = r / norm;
        for existing in &rows {
            if existing.dot(&r) > 1.0 - 1e-12 {
                continue 'outer;
            }
        }
        rows.push(r);
    }
    rows
}

/// Double description of `{ c : B c <= 0 }` in R^d.
pub fn cone_from_inequalities(b: &DMatrix<f64>, d: usize) -> Result<PolyhedralCone, ConeError> {
    debug_assert!(b.nrows() == 0 || b.ncols() == d);
    let rows = clean_rows(b);
    if rows.is_empty() {
        let eye = DMatrix::<f64>::identity(d, d);
        return Ok(PolyhedralCone {
            rays: Vec::new(),
            lineality: (0..d).map(|i| eye.column(i).into_owned()).collect(),
        });
    }

    // Global lineality = nullspace of the row matrix; work in its orthogonal
    // complement, where the cone is pointed.
    let row_mat = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    let lineality_basis = linalg::nullspace(&row_mat, 1e-10);
    let w = linalg::row_space_basis(&row_mat, 1e-10); // d' x d
    let dp = w.nrows();
    if dp == 0 {
        return Ok(PolyhedralCone {
            rays: Vec::new(),
            lineality: (0..lineality_basis.ncols())
                .map(|i| lineality_basis.column(i).into_owned())
                .collect(),
        });
    }
    let proj_rows: Vec<DVector<f64>> = rows.iter().map(|r| &w * r).collect();

    let mut lin: Vec<DVector<f64>> = (0..dp)
        .map(|i| {
            let mut e = DVector::zeros(dp);
            e[i] = 1.0;
            e
        })
        .collect();
    let mut rays: Vec<DVector<f64>> = Vec::new();
    // active[j] over processed rows, parallel to rays
    let mut active: Vec<Vec<bool>> = Vec::new();
    let mut processed: Vec<DVector<f64>> = Vec::new();

    for b_row in &proj_rows {
        // reduce lineality first if the row acts on it
        let mut pivot: Option<usize> = None;
        let mut best = ACTIVE_TOL;
        for (i, l) in lin.iter().enumerate() {
            let v = b_row.dot(l).abs();
            if v > best {
                best = v;
                pivot = Some(i);
            }
        }
        if let Some(i0) = pivot {
            let l0 = lin.remove(i0);
            let s0 = b_row.dot(&l0);
            for l in lin.iter_mut() {
                let s = b_row.dot(l);
                *l -= &l0 * (s / s0);
                let n = l.norm();
                if n > 0.0 {
                    *l /= n;
                }
            }
            for r in rays.iter_mut() {
                let s = b_row.dot(r);
                *r -= &l0 * (s / s0);
                let n = r.norm();
                if n > 0.0 {
                    *r /= n;
                }
            }
            let new_ray = if s0 > 0.0 { -l0 } else { l0 };
            rays.push(new_ray.normalize());
            // recompute active sets against processed rows
            active = rays
                .iter()
                .map(|r| {
                    processed
                        .iter()
                        .map(|p| p.dot(r).abs() <= ACTIVE_TOL)
                        .collect()
                })
                .collect();
            processed.push(b_row.clone());
            for (r, a) in rays.iter().zip(active.iter_mut()) {
                a.push(b_row.dot(r).abs() <= ACTIVE_TOL);
            }
            continue;
        }

        // classify rays
        let vals: Vec<f64> = rays.iter().map(|r| b_row.dot(r)).collect();
        let neg: Vec<usize> = (0..rays.len()).filter(|&i| vals[i] < -ACTIVE_TOL).collect();
        let zero: Vec<usize> = (0..rays.len()).filter(|&i| vals[i].abs() <= ACTIVE_TOL).collect();
        let pos: Vec<usize> = (0..rays.len()).filter(|&i| vals[i] > ACTIVE_TOL).collect();
        if pos.is_empty() {
            processed.push(b_row.clone());
            for (r, a) in rays.iter().zip(active.iter_mut()) {
                a.push(b_row.dot(r).abs() <= ACTIVE_TOL);
            }
            continue;
        }

        let mut new_rays: Vec<DVector<f64>> = Vec::new();
        for &ip in &pos {
            for &im in &neg {
                if !adjacent(&active, ip, im, &zero, &neg, &pos) {
                    continue;
                }
                let combo = (&rays[im] * vals[ip] - &rays[ip] * vals[im]).normalize();
                new_rays.push(combo);
            }
        }
        let mut kept: Vec<DVector<f64>> = Vec::new();
        for &i in neg.iter().chain(zero.iter()) {
            kept.push(rays[i].clone());
        }
        kept.extend(new_rays);
        if kept.len() > MAX_RAYS {
            return Err(ConeError::TooComplex(kept.len()));
        }
        rays = dedupe_rays(kept);
        processed.push(b_row.clone());
        active = rays
            .iter()
            .map(|r| {
                processed
                    .iter()
                    .map(|p| p.dot(r).abs() <= ACTIVE_TOL)
                    .collect()
            })
            .collect();
    }

    // lineality should be exhausted in the pointed quotient
    debug_assert!(lin.is_empty() || !rays.is_empty() || lin.iter().all(|l| l.norm() < 1e-6));

    // lift back to ambient coordinates and run a final feasibility sweep
    let mut out_rays = Vec::new();
    'rays: for r in &rays {
        let lifted = (w.transpose() * r).normalize();
        for row in &rows {
            if row.dot(&lifted) > 10.0 * ACTIVE_TOL {
                continue 'rays;
            }
        }
        out_rays.push(lifted);
    }
    let out_rays = dedupe_rays(out_rays);

    Ok(PolyhedralCone {
        rays: out_rays,
        lineality: (0..lineality_basis.ncols())
            .map(|i| lineality_basis.column(i).into_owned())
            .collect(),
    })
}

/// Combinatorial adjacency: no third ray's active set contains the common
/// active set of the pair.
fn adjacent(
    active: &[Vec<bool>],
    ip: usize,
    im: usize,
    zero: &[usize],
    neg: &[usize],
    pos: &[usize],
) -> bool {
    if active.is_empty() || active[0].is_empty() {
        // no processed rows yet: only a 2D-like situation, accept
        return true;
    }
    let common: Vec<usize> = (0..active[ip].len())
        .filter(|&j| active[ip][j] && active[im][j])
        .collect();
    for &k in zero.iter().chain(neg.iter()).chain(pos.iter()) {
        if k == ip || k == im {
            continue;
        }
        if common.iter().all(|&j| active[k][j]) {
            return false;
        }
    }
    true
}

fn dedupe_rays(rays: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(rays.len());
    'outer: for r in rays {
        for existing in &out {
            if existing.dot(&r) > 1.0 - 1e-9 {
                continue 'outer;
            }
        }
        out.push(r);
    }
    out
}
