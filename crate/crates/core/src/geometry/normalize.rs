use crate::error::{Error, Result};

use super::AmVector;

/// Per-AM affine standardisation fitted on a training set.
///
/// Uses the population standard deviation (divide by n): normalisation is a
/// fixed affine map of the dataset, not an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AmNormalization {
    pub ids: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AmNormalization {
    pub fn fit(ids: &[String], train: &[AmVector]) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                got: train.len(),
                context: "AM normalization",
            });
        }
        let k = ids.len();
        if let Some(bad) = train.iter().find(|v| v.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: bad.len(),
                context: "AM vector length",
            });
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; k];
        for v in train {
            for (m, x) in mean.iter_mut().zip(&v.values) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; k];
        for v in train {
            for j in 0..k {
                var[j] += (v.values[j] - mean[j]).powi(2);
            }
        }
        let mut std = Vec::with_capacity(k);
        for j in 0..k {
            let s = (var[j] / n).sqrt();
            if !(s > 1e-12 * mean[j].abs().max(1.0)) {
                return Err(Error::ZeroVariance(ids[j].clone()));
            }
            std.push(s);
        }
        Ok(Self {
            ids: ids.to_vec(),
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, v: &AmVector) -> AmVector {
        AmVector {
            values: v
                .values
                .iter()
                .enumerate()
                .map(|(j, x)| (x - self.mean[j]) / self.std[j])
                .collect(),
        }
    }

    pub fn invert(&self, v: &AmVector) -> AmVector {
        AmVector {
            values: v
                .values
                .iter()
                .enumerate()
                .map(|(j, z)| z * self.std[j] + self.mean[j])
                .collect(),
        }
    }

    /// Denormalise a single value of AM `k`.
    pub fn invert_one(&self, k: usize, z: f64) -> f64 {
        z * self.std[k] + self.mean[k]
    }

    /// Variance in normalised units maps to measurement units by `std^2`.
    pub fn invert_variance(&self, k: usize, var: f64) -> f64 {
        var * self.std[k] * self.std[k]
    }
}
