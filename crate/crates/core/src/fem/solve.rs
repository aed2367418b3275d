//! Linear solvers for the assembled SPD systems.
//!
//! Dense Cholesky below 5000 unknowns, Jacobi-preconditioned conjugate
//! gradients above; both paths report the achieved residual.

use super::{FemSystem, SolveReport, SparseMatrixCsr};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

const DENSE_LIMIT: usize = 5000;

/// Solves `A u = F` for the SPD system; `tol` is relative to `‖F‖₂`.
pub fn solve_linear(sys: &FemSystem, tol: f64) -> Result<(DVector<f64>, SolveReport)> {
    let n = sys.n_free();
    let (u, mut report) = if n <= DENSE_LIMIT {
        let u = solve_dense_spd(&sys.a.to_dense(), &sys.f)?;
        (
            u,
            SolveReport {
                iterations: 1,
                residual: 0.0,
                converged: true,
            },
        )
    } else {
        solve_pcg_jacobi(&sys.a, &sys.f, tol, 10 * n)?
    };
    report.residual = sys.relative_residual(&u);
    report.converged = report.residual <= tol.max(1e-12);
    if !report.converged {
        return Err(Error::SolverDiverged {
            residual: report.residual,
            iterations: report.iterations,
        });
    }
    Ok((u, report))
}

pub fn solve_dense_spd(a: &DMatrix<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::NotSpd)?;
    Ok(chol.solve(f))
}

/// Jacobi-preconditioned CG. Returns the iterate and a report; errs only on
/// structural problems (zero diagonal), leaving convergence to the caller.
pub fn solve_pcg_jacobi(
    a: &SparseMatrixCsr,
    f: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, SolveReport)> {
    let n = a.nrows();
    let diag = a.diagonal();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::NotSpd);
    }
    let fnorm = f.norm().max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(n);
    let mut r = f.clone();
    let mut z = DVector::from_iterator(n, r.iter().zip(&diag).map(|(ri, di)| ri / di));
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut iterations = 0;
    let mut ap = vec![0.0; n];
    while iterations < max_iter {
        if r.norm() <= tol * fnorm {
            break;
        }
        a.matvec(p.as_slice(), &mut ap);
        let ap_v = DVector::from_column_slice(&ap);
        let alpha = rz / p.dot(&ap_v);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap_v, 1.0);
        z = DVector::from_iterator(n, r.iter().zip(&diag).map(|(ri, di)| ri / di));
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
        iterations += 1;
    }
    let residual = r.norm() / fnorm;
    Ok((
        x,
        SolveReport {
            iterations,
            residual,
            converged: residual <= tol,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_darcy, ElementKind, FieldNodal, Grid2D};

    #[test]
    fn identity_system_returns_rhs() {
        let grid = Grid2D::new(3, 3, ElementKind::Quad).unwrap();
        let a = SparseMatrixCsr::from_triplets(1, 1, vec![(0, 0, 1.0)]);
        let sys = FemSystem {
            a,
            f: DVector::from_element(1, 1.0),
            grid,
        };
        let (u, rep) = solve_linear(&sys, 1e-12).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-14);
        assert!(rep.converged);
    }

    /// Fourier-series value of max u for −Δu = 1 on the unit square.
    fn poisson_center_value() -> f64 {
        let mut s = 0.0;
        for m in (1..400).step_by(2) {
            for n in (1..400).step_by(2) {
                let sign = if ((m - 1) / 2 + (n - 1) / 2) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                let (mf, nf) = (m as f64, n as f64);
                s += sign * 16.0
                    / (std::f64::consts::PI.powi(4) * mf * nf * (mf * mf + nf * nf));
            }
        }
        s
    }

    #[test]
    fn poisson_peak_matches_fourier_oracle() {
        let grid = Grid2D::new(65, 65, ElementKind::Quad).unwrap();
        let k = FieldNodal::constant(65, 65, 1.0);
        let sys = assemble_darcy(&k, &grid).unwrap();
        let (u, _) = solve_linear(&sys, 1e-10).unwrap();
        let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let oracle = poisson_center_value();
        assert!(
            (max - oracle).abs() < 5e-4,
            "max {max}, oracle {oracle} (≈0.0736713)"
        );
        // The peak sits at the domain center.
        let center = grid.free_index(32, 32).unwrap();
        assert!((u[center] - max).abs() < 1e-14);
    }

    #[test]
    fn solution_scales_inversely_with_kappa() {
        let grid = Grid2D::new(17, 17, ElementKind::Quad).unwrap();
        let k1 = FieldNodal::constant(17, 17, 1.0);
        let k1000 = FieldNodal::constant(17, 17, 1000.0);
        let (u1, _) = solve_linear(&assemble_darcy(&k1, &grid).unwrap(), 1e-11).unwrap();
        let (u2, _) = solve_linear(&assemble_darcy(&k1000, &grid).unwrap(), 1e-11).unwrap();
        for i in 0..u1.len() {
            assert!((u2[i] * 1000.0 - u1[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn pcg_agrees_with_cholesky() {
        let grid = Grid2D::new(15, 15, ElementKind::Tri).unwrap();
        let k = FieldNodal::from_fn(&grid, |x, y| 1.0 + 5.0 * x * y);
        let sys = assemble_darcy(&k, &grid).unwrap();
        let (u_chol, _) = solve_linear(&sys, 1e-12).unwrap();
        let (u_cg, rep) = solve_pcg_jacobi(&sys.a, &sys.f, 1e-12, 5000).unwrap();
        assert!(rep.converged);
        assert!((&u_chol - &u_cg).norm() / u_chol.norm() < 1e-9);
    }
}
