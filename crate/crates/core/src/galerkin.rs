//! The Galerkin-projection output activation and its adjoint.
//!
//! Given basis columns `P` (N_free × N) and a fine-scale system `(A, F)`,
//! the activation computes `û = P (PᵀAP)⁻¹ PᵀF`, making the residual of `û`
//! orthogonal to the span of `P`. The closed-form vector–Jacobian product
//! lets the layer sit at the end of a network and backpropagate into `P`.
//!
//! With `u_N = A_N⁻¹F_N`, `w = A_N⁻ᵀ Pᵀg` and `r = F − A û`, the gradient of
//! `gᵀû` with respect to `P` is
//!
//! ```text
//!   ∂(gᵀû)/∂P = g u_Nᵀ + r wᵀ − Aᵀ P w u_Nᵀ
//! ```
//!
//! which for symmetric `A` is the familiar `g u_Nᵀ + F wᵀ − A P (u_N wᵀ + w u_Nᵀ)`.

use crate::error::{Error, Result};
use crate::fem::SparseMatrixCsr;
use nalgebra::{DMatrix, DVector};

/// Skip threshold for ill-conditioned reduced systems during training.
pub const COND_SKIP_THRESHOLD: f64 = 1e12;

/// Factorization and intermediates of one Galerkin projection, reused by the
/// adjoint and by the condition-number regularizer.
#[derive(Clone, Debug)]
pub struct GalerkinCache {
    /// Reduced operator `A_N = PᵀAP`.
    pub a_n: DMatrix<f64>,
    /// Explicit inverse of `A_N` (N ≤ 50 in practice).
    pub a_n_inv: DMatrix<f64>,
    /// Reduced load `F_N = PᵀF`.
    pub f_n: DVector<f64>,
    /// Reduced solution `u_N = A_N⁻¹ F_N`.
    pub u_n: DVector<f64>,
    /// 1-norm condition estimate used for the skip decision.
    pub cond_1: f64,
    /// Frobenius condition number `‖A_N‖_F ‖A_N⁻¹‖_F`.
    pub cond_f: f64,
}

fn check_dims(p: &DMatrix<f64>, a: &SparseMatrixCsr, f: &DVector<f64>) -> Result<()> {
    if p.nrows() != a.nrows() || f.len() != a.nrows() || a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch {
            context: "galerkin_activation",
            expected: format!("P rows = F len = A dim = {}", a.nrows()),
            got: format!("P {}x{}, F {}", p.nrows(), p.ncols(), f.len()),
        });
    }
    Ok(())
}

/// `A P` with sparse `A`, column by column.
fn a_times_p(a: &SparseMatrixCsr, p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut ap = DMatrix::zeros(p.nrows(), p.ncols());
    let mut col = vec![0.0; p.nrows()];
    let mut out = vec![0.0; p.nrows()];
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            col[i] = p[(i, j)];
        }
        a.matvec(&col, &mut out);
        for i in 0..p.nrows() {
            ap[(i, j)] = out[i];
        }
    }
    ap
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Builds the reduced system and its factorization; errs when the reduced
/// operator is singular or its condition estimate exceeds `skip_threshold`.
pub fn prepare_cache(
    p: &DMatrix<f64>,
    a: &SparseMatrixCsr,
    f: &DVector<f64>,
    skip_threshold: f64,
    symmetrize: bool,
) -> Result<GalerkinCache> {
    check_dims(p, a, f)?;
    let ap = a_times_p(a, p);
    let mut a_n = p.transpose() * &ap;
    if symmetrize {
        a_n = 0.5 * (&a_n + a_n.transpose());
    }
    let f_n = p.transpose() * f;
    let a_n_inv = a_n
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned { cond: f64::INFINITY })?;
    let cond_1 = one_norm(&a_n) * one_norm(&a_n_inv);
    if !cond_1.is_finite() || cond_1 > skip_threshold {
        return Err(Error::IllConditioned { cond: cond_1 });
    }
    let u_n = &a_n_inv * &f_n;
    let cond_f = a_n.norm() * a_n_inv.norm();
    Ok(GalerkinCache {
        a_n,
        a_n_inv,
        f_n,
        u_n,
        cond_1,
        cond_f,
    })
}

/// Galerkin-projection activation: `û = P (PᵀAP)⁻¹ PᵀF`.
pub fn galerkin_activation(
    p: &DMatrix<f64>,
    a: &SparseMatrixCsr,
    f: &DVector<f64>,
) -> Result<(DVector<f64>, GalerkinCache)> {
    let cache = prepare_cache(p, a, f, COND_SKIP_THRESHOLD, false)?;
    Ok((p * &cache.u_n, cache))
}

/// Relative residual orthogonality `‖Pᵀ(Aû − F)‖ / ‖PᵀF‖` of a projection.
pub fn residual_orthogonality(
    p: &DMatrix<f64>,
    a: &SparseMatrixCsr,
    f: &DVector<f64>,
    u_hat: &DVector<f64>,
) -> f64 {
    let au = DVector::from_vec(a.matvec_alloc(u_hat.as_slice()));
    let r = au - f;
    let pt_r = p.transpose() * r;
    let pt_f = p.transpose() * f;
    pt_r.norm() / pt_f.norm().max(f64::MIN_POSITIVE)
}

/// Adjoint of the activation: gradient of `upstreamᵀ û` with respect to `P`.
pub fn galerkin_vjp(
    cache: &GalerkinCache,
    p: &DMatrix<f64>,
    a: &SparseMatrixCsr,
    f: &DVector<f64>,
    upstream: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(p, a, f)?;
    if upstream.len() != p.nrows() {
        return Err(Error::ShapeMismatch {
            context: "galerkin_vjp",
            expected: format!("{}", p.nrows()),
            got: format!("{}", upstream.len()),
        });
    }
    let pt_g = p.transpose() * upstream;
    let w = cache.a_n_inv.transpose() * pt_g;
    let u_hat = p * &cache.u_n;
    let a_uhat = DVector::from_vec(a.matvec_alloc(u_hat.as_slice()));
    let r = f - a_uhat;
    // Aᵀ (P w)
    let pw = p * &w;
    let mut at_pw = vec![0.0; p.nrows()];
    a.tr_matvec(pw.as_slice(), &mut at_pw);
    let at_pw = DVector::from_column_slice(&at_pw);

    let mut grad = upstream * cache.u_n.transpose();
    grad += &r * w.transpose();
    grad -= at_pw * cache.u_n.transpose();
    Ok(grad)
}

/// Frobenius condition number `‖A‖_F · ‖A⁻¹‖_F`.
pub fn cond_frobenius(a_n: &DMatrix<f64>) -> Result<f64> {
    let inv = a_n
        .clone()
        .try_inverse()
        .ok_or(Error::Singular {
            context: "cond_frobenius",
        })?;
    Ok(a_n.norm() * inv.norm())
}

/// Frobenius condition number together with its gradient in `A_N`.
///
/// With `B = A⁻¹`, `a = ‖A‖_F`, `b = ‖B‖_F`:
/// `∂(ab)/∂A = (b/a) A − (a/b) Bᵀ B Bᵀ`.
pub fn cond_frobenius_grad(a_n: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let b = a_n
        .clone()
        .try_inverse()
        .ok_or(Error::Singular {
            context: "cond_frobenius_grad",
        })?;
    let na = a_n.norm();
    let nb = b.norm();
    let grad = (nb / na) * a_n - (na / nb) * (b.transpose() * &b * b.transpose());
    Ok((na * nb, grad))
}

/// Pulls a gradient in `A_N = PᵀAP` back to `P`: `A P Gᵀ + Aᵀ P G`.
pub fn pullback_an_to_p(
    p: &DMatrix<f64>,
    a: &SparseMatrixCsr,
    grad_an: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ap = a_times_p(a, p);
    // Aᵀ P, column by column.
    let mut atp = DMatrix::zeros(p.nrows(), p.ncols());
    let mut col = vec![0.0; p.nrows()];
    let mut out = vec![0.0; p.nrows()];
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            col[i] = p[(i, j)];
        }
        a.tr_matvec(&col, &mut out);
        for i in 0..p.nrows() {
            atp[(i, j)] = out[i];
        }
    }
    &ap * grad_an.transpose() + atp * grad_an
}
