//! The relative test mean error used throughout for reporting accuracy.

use crate::error::{Error, Result};
use nalgebra::DVector;

/// `(1/M) Σ_i ‖u_i − û_i‖₂² / ‖u_i‖₂²` — squared-norm ratio per sample.
pub fn relative_test_mean_error(preds: &[DVector<f64>], refs: &[DVector<f64>]) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(Error::ShapeMismatch {
            context: "relative_test_mean_error",
            expected: format!("{} predictions", refs.len()),
            got: format!("{}", preds.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::InvalidConfig(
            "relative_test_mean_error needs at least one sample".into(),
        ));
    }
    let mut total = 0.0;
    for (i, (p, r)) in preds.iter().zip(refs).enumerate() {
        if p.len() != r.len() {
            return Err(Error::ShapeMismatch {
                context: "relative_test_mean_error",
                expected: format!("len {}", r.len()),
                got: format!("len {}", p.len()),
            });
        }
        let denom = r.norm_squared();
        if denom == 0.0 {
            return Err(Error::ZeroNormReference { index: i });
        }
        total += (p - r).norm_squared() / denom;
    }
    Ok(total / preds.len() as f64)
}
