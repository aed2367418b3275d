//! POD snapshot compression and the classical Galerkin reduced-basis
//! baseline used for comparison.

use crate::error::{Error, Result};
use crate::fem::{relative_test_mean_error, FemSystem};
use crate::galerkin;
use nalgebra::{DMatrix, DVector};

/// Orthonormal POD basis with the full singular spectrum retained for
/// tail-energy reporting.
#[derive(Clone, Debug)]
pub struct PodBasis {
    /// N_free × N, orthonormal columns ordered by descending singular value.
    pub p: DMatrix<f64>,
    /// All singular values of the snapshot matrix, descending.
    pub singular_values: DVector<f64>,
    /// Numerical rank when it fell below the requested basis size; trailing
    /// columns were completed from the nullspace.
    pub deficient_rank: Option<usize>,
}

impl PodBasis {
    pub fn n_basis(&self) -> usize {
        self.p.ncols()
    }

    /// `Σ_{i>N} σ_i²` — the Eckart–Young optimum for the projection error.
    pub fn tail_energy(&self, n: usize) -> f64 {
        self.singular_values
            .iter()
            .skip(n)
            .map(|s| s * s)
            .sum()
    }

    /// `Σ_i ‖u_i − PPᵀu_i‖₂²` over snapshot columns.
    pub fn projection_error(&self, snapshots: &DMatrix<f64>) -> f64 {
        let pt_u = self.p.transpose() * snapshots;
        let recon = &self.p * pt_u;
        (snapshots - recon).norm_squared()
    }
}

/// Top-`n` left singular vectors of the snapshot matrix (thin SVD).
///
/// Rank deficiency below `n` is allowed: missing directions are completed
/// with canonical vectors orthonormalized against the computed ones, and the
/// basis is flagged.
pub fn build_pod_basis(snapshots: &DMatrix<f64>, n: usize) -> Result<PodBasis> {
    let (rows, cols) = snapshots.shape();
    let kmax = rows.min(cols);
    if n == 0 || n > kmax {
        return Err(Error::InvalidConfig(format!(
            "basis size must satisfy 1 <= N <= min(N_free, M) = {kmax}, got {n}"
        )));
    }
    let svd = snapshots.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or(Error::Eigen("SVD did not return U".into()))?;
    let sigma = &svd.singular_values;

    let tol = f64::EPSILON * rows.max(cols) as f64 * sigma.max();
    let rank = sigma.iter().filter(|&&s| s > tol).count();

    let mut p = DMatrix::zeros(rows, n);
    for j in 0..n.min(u.ncols()) {
        p.set_column(j, &u.column(j));
    }

    let deficient_rank = if rank < n {
        complete_columns(&mut p, rank);
        Some(rank)
    } else {
        None
    };

    Ok(PodBasis {
        p,
        singular_values: DVector::from_iterator(sigma.len(), sigma.iter().cloned()),
        deficient_rank,
    })
}

/// Replaces columns `from..` with canonical vectors orthonormalized against
/// everything before them (deterministic nullspace completion).
fn complete_columns(p: &mut DMatrix<f64>, from: usize) {
    let rows = p.nrows();
    let mut next = from;
    let mut candidate = 0;
    while next < p.ncols() && candidate < rows {
        let mut v = DVector::zeros(rows);
        v[candidate] = 1.0;
        candidate += 1;
        for j in 0..next {
            let proj = p.column(j).dot(&v);
            v -= proj * p.column(j).into_owned();
        }
        let norm = v.norm();
        if norm > 1e-8 {
            v /= norm;
            p.set_column(next, &v);
            next += 1;
        }
    }
}

/// Galerkin projection of a FEM system onto the POD basis.
///
/// Returns the reduced coefficients and the lifted solution `û = P u_N`.
pub fn galerkin_reduce_solve(
    basis: &PodBasis,
    sys: &FemSystem,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (u_hat, cache) = galerkin::galerkin_activation(&basis.p, &sys.a, &sys.f)?;
    Ok((cache.u_n, u_hat))
}

/// Builds bases of each requested size on the training snapshots and reports
/// the relative test mean error of the Galerkin solves on the test set.
pub fn pod_error_curve(
    train_snapshots: &DMatrix<f64>,
    test: &[(FemSystem, DVector<f64>)],
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("pod_error_curve needs test samples".into()));
    }
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let basis = build_pod_basis(train_snapshots, n)?;
        let mut preds = Vec::with_capacity(test.len());
        let mut refs = Vec::with_capacity(test.len());
        for (sys, u_ref) in test {
            let (_, u_hat) = galerkin_reduce_solve(&basis, sys)?;
            preds.push(u_hat);
            refs.push(u_ref.clone());
        }
        out.push((n, relative_test_mean_error(&preds, &refs)?));
    }
    Ok(out)
}
