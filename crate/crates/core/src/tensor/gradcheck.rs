//! Central-difference gradient verification.

use super::Tensor;
use crate::error::{MorphError, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compare the analytic gradient of a scalar-valued `f` at `x` against
/// central finite differences over every coordinate. Returns the maximum
/// relative error `|a − fd| / (|a| + |fd| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = x.numel();
    let idx: Vec<usize> = (0..n).collect();
    finite_difference_check_at(f, x, h, &idx)
}

/// Same as [`finite_difference_check`] but probing only the listed
/// coordinates; keeps full-network checks affordable.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, h: f32, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(MorphError::invalid("finite differences need h > 0".to_string()));
    }
    let leaf = x.requires_grad();
    let loss = f(&leaf)?;
    if !loss.is_scalar() {
        return Err(MorphError::shape(format!(
            "gradient check needs a scalar objective, got {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| MorphError::invalid("objective ignores its input".to_string()))?;

    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= base.len() {
            return Err(MorphError::invalid(format!(
                "coordinate {} out of range for {} elements",
                i,
                base.len()
            )));
        }
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(plus, &shape)?)?.item()? as f64;
        let fm = f(&Tensor::from_vec(minus, &shape)?)?.item()? as f64;
        let numeric = (fp - fm) / (2.0 * h as f64);
        worst = worst.max(rel_err(analytic[i] as f64, numeric));
    }
    Ok(worst)
}
