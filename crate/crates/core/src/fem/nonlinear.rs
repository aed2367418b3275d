//! Nonlinear solves: oscillatory source terms via damped Newton, and the
//! p-Laplacian via Newton on the discrete energy.
//!
//! Both solvers return a `FemSystem` carrying the data-linearized pair
//! `(A_h, F_h)` so that `A_h u_h = F_h` holds to solver tolerance — the
//! contract the Galerkin-projection layer depends on.

use super::assembly::{
    corner_coords, element_corners, nodal_to_element, tri_area,
    tri_element_stiffness, tri_gradient_coeffs,
};
use super::{assemble_darcy, solve_linear, ElementKind, FemSystem, FieldNodal, Grid2D,
    SparseMatrixCsr};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const SOURCE_FREQ: f64 = 10.0 * std::f64::consts::PI;

#[derive(Clone, Copy, Debug)]
pub struct NewtonCfg {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonCfg {
    fn default() -> Self {
        NewtonCfg {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// Accepted damping factor per iteration.
    pub alphas: Vec<f64>,
}

/// Source load for `f(u) = sin(10πu) + cos(10πu)` using element means of `u`.
fn oscillatory_load(grid: &Grid2D, u_free: &DVector<f64>) -> DVector<f64> {
    let full = FieldNodal::from_free(grid, u_free.as_slice()).expect("free vector size");
    let means = nodal_to_element(&full, grid).expect("grid match");
    let mut f = DVector::zeros(grid.n_free());
    for e in 0..grid.n_elements() {
        let (corners, nc, area) = element_corners(grid, e);
        let s = (SOURCE_FREQ * means[e]).sin() + (SOURCE_FREQ * means[e]).cos();
        let w = area / nc as f64;
        for &(ix, iy) in corners.iter().take(nc) {
            if let Some(fi) = grid.free_index(ix, iy) {
                f[fi] += s * w;
            }
        }
    }
    f
}

/// dF/du for the oscillatory source (dense, free nodes only).
fn oscillatory_load_jacobian(grid: &Grid2D, u_free: &DVector<f64>) -> DMatrix<f64> {
    let full = FieldNodal::from_free(grid, u_free.as_slice()).expect("free vector size");
    let means = nodal_to_element(&full, grid).expect("grid match");
    let n = grid.n_free();
    let mut j = DMatrix::zeros(n, n);
    for e in 0..grid.n_elements() {
        let (corners, nc, area) = element_corners(grid, e);
        let ds = SOURCE_FREQ
            * ((SOURCE_FREQ * means[e]).cos() - (SOURCE_FREQ * means[e]).sin());
        let w = (area / nc as f64) * ds / nc as f64;
        for &(ix, iy) in corners.iter().take(nc) {
            let Some(fi) = grid.free_index(ix, iy) else {
                continue;
            };
            for &(jx, jy) in corners.iter().take(nc) {
                if let Some(fj) = grid.free_index(jx, jy) {
                    j[(fi, fj)] += w;
                }
            }
        }
    }
    j
}

/// Solves `−∇·(K∇u) = sin(10πu) + cos(10πu)` by damped Newton iteration.
///
/// The returned system carries the stiffness `A_h(K)` and the load
/// `F_h = ∫ (sin(10π u_h) + cos(10π u_h)) φ_i dx`, so `A_h u_h = F_h`
/// to the solver tolerance.
pub fn solve_nonlinear_source(
    kappa: &FieldNodal,
    grid: &Grid2D,
    cfg: NewtonCfg,
) -> Result<(DVector<f64>, FemSystem, NewtonReport)> {
    let base = assemble_darcy(kappa, grid)?;
    if grid.n_free() > 8000 {
        return Err(Error::InvalidConfig(
            "nonlinear source solve uses a dense Newton Jacobian; grids above 8000 free nodes are not supported".into(),
        ));
    }
    let a_dense = base.a.to_dense();

    // Initial guess: linear solve with the source frozen at u = 0, where
    // sin(0) + cos(0) = 1 reduces to the f ≡ 1 load already assembled.
    let (mut u, _) = solve_linear(&base, 1e-12)?;

    let mut residuals = Vec::new();
    let mut alphas = Vec::new();
    let mut f_u = oscillatory_load(grid, &u);
    let mut r = &base.a.to_dense() * &u - &f_u;
    let mut rnorm = r.norm();
    residuals.push(rnorm);

    for iter in 0..cfg.max_iter {
        let fnorm = f_u.norm().max(f64::MIN_POSITIVE);
        if rnorm <= cfg.tol * fnorm {
            let sys = FemSystem {
                a: base.a.clone(),
                f: f_u,
                grid: grid.clone(),
            };
            return Ok((
                u,
                sys,
                NewtonReport {
                    iterations: iter,
                    residuals,
                    alphas,
                },
            ));
        }
        let jac = &a_dense - oscillatory_load_jacobian(grid, &u);
        let delta = jac
            .lu()
            .solve(&(-&r))
            .ok_or(Error::Singular {
                context: "Newton Jacobian",
            })?;

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let trial = &u + alpha * &delta;
            let f_trial = oscillatory_load(grid, &trial);
            let r_trial = &a_dense * &trial - &f_trial;
            if r_trial.norm() < (1.0 - 1e-4 * alpha) * rnorm {
                u = trial;
                f_u = f_trial;
                r = r_trial;
                rnorm = r.norm();
                residuals.push(rnorm);
                alphas.push(alpha);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDiverged {
                iterations: iter,
                residual: rnorm,
                trace: alphas,
            });
        }
    }

    let fnorm = f_u.norm().max(f64::MIN_POSITIVE);
    if rnorm <= cfg.tol * fnorm {
        let sys = FemSystem {
            a: base.a.clone(),
            f: f_u,
            grid: grid.clone(),
        };
        Ok((
            u,
            sys,
            NewtonReport {
                iterations: cfg.max_iter,
                residuals,
                alphas,
            },
        ))
    } else {
        Err(Error::NewtonDiverged {
            iterations: cfg.max_iter,
            residual: rnorm,
            trace: alphas,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PLaplaceCfg {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PLaplaceCfg {
    fn default() -> Self {
        PLaplaceCfg {
            tol: 1e-9,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

/// Gradient bound accepted when the energy stops improving at machine
/// precision before `tol` is met; matches the `A_h u_h = F_h` contract.
const STALL_GRAD_BOUND: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct PLaplaceReport {
    pub iterations: usize,
    /// Energy after each accepted step, starting with the initial guess.
    pub energies: Vec<f64>,
    pub grad_norm: f64,
}

struct TriGeometry {
    free: [Option<usize>; 3],
    grads: [(f64, f64); 3],
    area: f64,
    kappa: f64,
}

fn tri_geometry(kappa: &FieldNodal, grid: &Grid2D) -> Result<Vec<TriGeometry>> {
    if grid.kind() != ElementKind::Tri {
        return Err(Error::InvalidConfig(
            "p-Laplacian requires a triangular grid (element-constant gradients)".into(),
        ));
    }
    kappa.ensure_positive()?;
    let coeff = nodal_to_element(kappa, grid)?;
    let mut geoms = Vec::with_capacity(grid.n_elements());
    for e in 0..grid.n_elements() {
        let (corners, nc, _) = element_corners(grid, e);
        debug_assert_eq!(nc, 3);
        let coords = corner_coords(grid, &corners[..3]);
        let area = tri_area(coords);
        let (b, c) = tri_gradient_coeffs(coords);
        let mut grads = [(0.0, 0.0); 3];
        let mut free = [None; 3];
        for i in 0..3 {
            grads[i] = (b[i] / (2.0 * area), c[i] / (2.0 * area));
            let (ix, iy) = corners[i];
            free[i] = grid.free_index(ix, iy);
        }
        geoms.push(TriGeometry {
            free,
            grads,
            area,
            kappa: coeff[e],
        });
    }
    Ok(geoms)
}

fn element_gradient(geom: &TriGeometry, u: &DVector<f64>) -> (f64, f64) {
    let mut g = (0.0, 0.0);
    for i in 0..3 {
        if let Some(fi) = geom.free[i] {
            g.0 += u[fi] * geom.grads[i].0;
            g.1 += u[fi] * geom.grads[i].1;
        }
    }
    g
}

/// Discrete p-Laplacian energy `(1/p) Σ_T κ_T ‖∇v‖₂^p |T| − Fᵀv`.
pub fn plaplace_energy(
    kappa: &FieldNodal,
    grid: &Grid2D,
    p: f64,
    u: &DVector<f64>,
) -> Result<f64> {
    let geoms = tri_geometry(kappa, grid)?;
    let f = assemble_darcy(kappa, grid)?.f;
    Ok(energy_inner(&geoms, &f, p, u))
}

fn energy_inner(geoms: &[TriGeometry], f: &DVector<f64>, p: f64, u: &DVector<f64>) -> f64 {
    let mut e = 0.0;
    for geom in geoms {
        let g = element_gradient(geom, u);
        let norm = (g.0 * g.0 + g.1 * g.1).sqrt();
        e += geom.kappa / p * norm.powf(p) * geom.area;
    }
    e - f.dot(u)
}

fn gradient_inner(
    geoms: &[TriGeometry],
    f: &DVector<f64>,
    p: f64,
    u: &DVector<f64>,
) -> DVector<f64> {
    let mut grad = -f.clone();
    for geom in geoms {
        let g = element_gradient(geom, u);
        let norm2 = g.0 * g.0 + g.1 * g.1;
        let w = geom.kappa * norm2.powf((p - 2.0) / 2.0) * geom.area;
        for i in 0..3 {
            if let Some(fi) = geom.free[i] {
                grad[fi] += w * (g.0 * geom.grads[i].0 + g.1 * geom.grads[i].1);
            }
        }
    }
    grad
}

fn hessian_inner(geoms: &[TriGeometry], p: f64, u: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n);
    let eps2 = 1e-24;
    for geom in geoms {
        let g = element_gradient(geom, u);
        let norm2 = g.0 * g.0 + g.1 * g.1 + eps2;
        let w1 = geom.kappa * norm2.powf((p - 2.0) / 2.0) * geom.area;
        let w2 = geom.kappa * (p - 2.0) * norm2.powf((p - 4.0) / 2.0) * geom.area;
        for i in 0..3 {
            let Some(fi) = geom.free[i] else { continue };
            let gi = geom.grads[i];
            let mgi = (
                w1 * gi.0 + w2 * g.0 * (g.0 * gi.0 + g.1 * gi.1),
                w1 * gi.1 + w2 * g.1 * (g.0 * gi.0 + g.1 * gi.1),
            );
            for j in 0..3 {
                if let Some(fj) = geom.free[j] {
                    let gj = geom.grads[j];
                    h[(fi, fj)] += mgi.0 * gj.0 + mgi.1 * gj.1;
                }
            }
        }
    }
    h
}

/// Minimizes the p-Laplacian energy by damped Newton from the p=2 solution.
///
/// The returned system carries the stiffness assembled with the per-element
/// coefficient `κ‖∇u_h‖₂^{p−2}`, so first-order optimality is exactly
/// `A_h u_h = F_h`.
pub fn solve_plaplace(
    kappa: &FieldNodal,
    grid: &Grid2D,
    p: f64,
    cfg: PLaplaceCfg,
) -> Result<(DVector<f64>, FemSystem, PLaplaceReport)> {
    if p < 2.0 {
        return Err(Error::InvalidConfig(format!(
            "p-Laplacian requires p >= 2, got {p}"
        )));
    }
    let geoms = tri_geometry(kappa, grid)?;
    let base = assemble_darcy(kappa, grid)?;
    let n = grid.n_free();
    let (mut u, _) = solve_linear(&base, 1e-12)?;
    let fnorm = base.f.norm().max(f64::MIN_POSITIVE);

    let mut energy = energy_inner(&geoms, &base.f, p, &u);
    let mut energies = vec![energy];
    let mut iterations = 0;
    let mut stalled = 0usize;

    loop {
        let grad = gradient_inner(&geoms, &base.f, p, &u);
        let gnorm = grad.norm();
        let converged = gnorm <= cfg.tol * fnorm
            || (stalled >= 2 && gnorm <= STALL_GRAD_BOUND * fnorm);
        if converged || iterations >= cfg.max_iter {
            if !converged {
                return Err(Error::NewtonDiverged {
                    iterations,
                    residual: gnorm,
                    trace: energies,
                });
            }
            let sys = linearized_system(&geoms, grid, &base.f, p, &u);
            return Ok((
                u,
                sys,
                PLaplaceReport {
                    iterations,
                    energies,
                    grad_norm: gnorm,
                },
            ));
        }

        let hess = hessian_inner(&geoms, p, &u, n);
        let delta = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&(-&grad)))
            .or_else(|| hess.lu().solve(&(-&grad)))
            .ok_or(Error::Singular {
                context: "p-Laplacian Hessian",
            })?;

        let slope = grad.dot(&delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let trial = &u + alpha * &delta;
            let e_trial = energy_inner(&geoms, &base.f, p, &trial);
            if e_trial <= energy + 1e-4 * alpha * slope {
                let rel_drop = (energy - e_trial) / energy.abs().max(f64::MIN_POSITIVE);
                stalled = if rel_drop < 1e-15 { stalled + 1 } else { 0 };
                u = trial;
                energy = e_trial;
                energies.push(energy);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearchFailed {
                iteration: iterations,
                energy,
            });
        }
        iterations += 1;
    }
}

fn linearized_system(
    geoms: &[TriGeometry],
    grid: &Grid2D,
    f: &DVector<f64>,
    p: f64,
    u: &DVector<f64>,
) -> FemSystem {
    let n = grid.n_free();
    let mut triplets = Vec::new();
    for (e, geom) in geoms.iter().enumerate() {
        let g = element_gradient(geom, u);
        let norm2 = g.0 * g.0 + g.1 * g.1;
        let coeff = geom.kappa * norm2.powf((p - 2.0) / 2.0);
        let (corners, _, _) = element_corners(grid, e);
        let k = tri_element_stiffness(corner_coords(grid, &corners[..3]));
        for i in 0..3 {
            let Some(fi) = geom.free[i] else { continue };
            for j in 0..3 {
                if let Some(fj) = geom.free[j] {
                    triplets.push((fi, fj, coeff * k[i][j]));
                }
            }
        }
    }
    FemSystem {
        a: SparseMatrixCsr::from_triplets(n, n, triplets),
        f: f.clone(),
        grid: grid.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_residual_load_entry_is_h_squared() {
        // At u = 0 every element source is sin 0 + cos 0 = 1, so the load
        // reduces to the f ≡ 1 load with interior entries h².
        let grid = Grid2D::new(9, 9, ElementKind::Quad).unwrap();
        let u = DVector::zeros(grid.n_free());
        let f = oscillatory_load(&grid, &u);
        let h2 = grid.h() * grid.h();
        for i in 0..f.len() {
            assert!((f[i] - h2).abs() < 1e-15);
        }
    }

    #[test]
    fn newton_converges_on_desk_grid() {
        let grid = Grid2D::new(17, 17, ElementKind::Quad).unwrap();
        let k = FieldNodal::constant(17, 17, 1.0);
        let (u, sys, report) = solve_nonlinear_source(&k, &grid, NewtonCfg::default()).unwrap();
        assert!(
            report.iterations <= 20,
            "needed {} damped steps",
            report.iterations
        );
        assert!(sys.relative_residual(&u) <= 1e-8);
    }

    #[test]
    fn newton_self_consistency_on_rough_field() {
        let grid = Grid2D::new(13, 13, ElementKind::Quad).unwrap();
        let k = FieldNodal::from_fn(&grid, |x, y| (2.0 * (x - y)).exp());
        let (u, sys, _) = solve_nonlinear_source(&k, &grid, NewtonCfg::default()).unwrap();
        assert!(sys.relative_residual(&u) <= 1e-8);
    }

    #[test]
    fn load_jacobian_matches_finite_differences() {
        let grid = Grid2D::new(7, 7, ElementKind::Quad).unwrap();
        let n = grid.n_free();
        let u = DVector::from_fn(n, |i, _| 0.01 * (i as f64).sin());
        let jac = oscillatory_load_jacobian(&grid, &u);
        let eps = 1e-6;
        for j in 0..n {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fd = (oscillatory_load(&grid, &up) - oscillatory_load(&grid, &dn)) / (2.0 * eps);
            for i in 0..n {
                assert!(
                    (jac[(i, j)] - fd[i]).abs() < 1e-7,
                    "entry ({i},{j}): {} vs {}",
                    jac[(i, j)],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn plaplace_p2_reduces_to_darcy() {
        let grid = Grid2D::new(11, 11, ElementKind::Tri).unwrap();
        let k = FieldNodal::from_fn(&grid, |x, y| 1.0 + x + y);
        let (u2, sys2, _) = solve_plaplace(&k, &grid, 2.0, PLaplaceCfg::default()).unwrap();
        let (u_lin, _) = solve_linear(&assemble_darcy(&k, &grid).unwrap(), 1e-12).unwrap();
        assert!((&u2 - &u_lin).norm() / u_lin.norm() < 1e-10);
        assert!(sys2.relative_residual(&u2) <= 1e-8);
    }

    #[test]
    fn plaplace_p3_energy_monotone_and_self_consistent() {
        let grid = Grid2D::new(13, 13, ElementKind::Tri).unwrap();
        let k = FieldNodal::from_fn(&grid, |x, y| (x + 0.5_f64).exp() * (1.0 + y));
        let (u, sys, report) = solve_plaplace(&k, &grid, 3.0, PLaplaceCfg::default()).unwrap();
        for w in report.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "energy increased: {w:?}");
        }
        assert!(sys.relative_residual(&u) <= 1e-8);
        // The linearized stiffness is the gradient operator: A(u)u − F = ∇E(u).
        let grad_fd = {
            let e0 = plaplace_energy(&k, &grid, 3.0, &u).unwrap();
            let mut g = DVector::zeros(u.len());
            let eps = 1e-7;
            for i in 0..u.len() {
                let mut up = u.clone();
                up[i] += eps;
                g[i] = (plaplace_energy(&k, &grid, 3.0, &up).unwrap() - e0) / eps;
            }
            g
        };
        assert!(grad_fd.norm() < 1e-4, "gradient at optimum {}", grad_fd.norm());
    }

    #[test]
    fn plaplace_rejects_quad_grids() {
        let grid = Grid2D::new(9, 9, ElementKind::Quad).unwrap();
        let k = FieldNodal::constant(9, 9, 1.0);
        assert!(solve_plaplace(&k, &grid, 3.0, PLaplaceCfg::default()).is_err());
    }
}
