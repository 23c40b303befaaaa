use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Disagreement between analytic and numerical gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / ‖numeric‖₂` over all parameters at once;
    /// the absolute norm when the numeric gradient is zero.
    pub error: f64,
    /// Largest `‖analytic − numeric‖₂ / ‖numeric‖₂` over parameter
    /// tensors. A tensor with a tiny gradient magnifies the rounding
    /// floor of the differences, so this is informational.
    pub tensor_error: f64,
    /// Largest `|analytic − numeric| / (|numeric| + 1e-8)` over entries.
    /// Entries whose true gradient is near zero are dominated by rounding
    /// in the differences, so this is informational.
    pub entry_error: f64,
}

/// Compares analytic gradients against fourth-order central differences
/// `(8·(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// `f` evaluates the scalar function at the given parameters and returns
/// its value together with the analytic gradient of every parameter.
pub fn finite_difference_check<T, F>(params: &[Tensor<T>], h: f64, mut f: F) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)>,
{
    if !(h > 0.0) {
        return Err(Error::Range(format!("step {h} must be positive")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in analytic.iter().zip(params).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {i} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        g.check_finite(&format!("analytic gradient of parameter {i}"))?;
    }

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheck::default();
    let (mut all_diff2, mut all_ref2) = (0.0f64, 0.0f64);
    for (pi, grad) in analytic.iter().enumerate() {
        let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
        for k in 0..grad.len() {
            let original = work[pi].data()[k];
            let mut eval_at = |offset: f64| -> Result<(f64, f64)> {
                let x = original + T::lit(offset);
                work[pi].data_mut()[k] = x;
                let (v, _) = f(&work)?;
                // the representable displacement, not the requested one
                Ok((v, (x - original).as_f64()))
            };
            let (p1, d1) = eval_at(h)?;
            let (m1, e1) = eval_at(-h)?;
            let (p2, d2) = eval_at(2.0 * h)?;
            let (m2, e2) = eval_at(-2.0 * h)?;
            work[pi].data_mut()[k] = original;
            let near = (p1 - m1) / (d1 - e1);
            let far = (p2 - m2) / (d2 - e2);
            let numeric = (4.0 * near - far) / 3.0;
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "numerical derivative for parameter {pi} entry {k} is {numeric}"
                )));
            }
            let a = grad.data()[k].as_f64();
            report.entry_error = report
                .entry_error
                .max((a - numeric).abs() / (numeric.abs() + 1e-8));
            diff2 += (a - numeric).powi(2);
            ref2 += numeric * numeric;
        }
        report.tensor_error = report.tensor_error.max(relative(diff2, ref2));
        all_diff2 += diff2;
        all_ref2 += ref2;
    }
    report.error = relative(all_diff2, all_ref2);
    Ok(report)
}

fn relative(diff2: f64, ref2: f64) -> f64 {
    if ref2 > 0.0 {
        (diff2 / ref2).sqrt()
    } else {
        diff2.sqrt()
    }
}
