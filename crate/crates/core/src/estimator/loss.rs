use crate::error::{Error, Result};

/// Squared error of a single mean prediction.
pub fn loss_plain(mean: f64, target: f64) -> f64 {
    (mean - target).powi(2)
}

/// Gaussian negative log-likelihood up to constants: `(mu - m)^2 / G + ln G`.
pub fn loss_uncertainty(mean: f64, variance: f64, target: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::OutOfRange(format!(
            "predicted variance must be positive, got {variance}"
        )));
    }
    Ok((mean - target).powi(2) / variance + variance.ln())
}

/// Value and derivatives with respect to the mean and the variance.
pub fn loss_uncertainty_grad(mean: f64, variance: f64, target: f64) -> (f64, f64, f64) {
    let r = mean - target;
    let value = r * r / variance + variance.ln();
    let d_mean = 2.0 * r / variance;
    let d_var = -r * r / (variance * variance) + 1.0 / variance;
    (value, d_mean, d_var)
}

/// Mean of per-sample values; empty input is an error.
pub fn batch_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            got: 0,
            context: "batch loss",
        });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
