use crate::error::{Error, Result};

/// Inverse-variance combination of `L` segment predictions for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub means: Vec<f64>,
    /// Raw aggregated variance `w`.
    pub variances: Vec<f64>,
    /// Length-calibrated uncertainty `L * w`.
    pub uncertainties: Vec<f64>,
    pub segments: usize,
}

/// `segments[l] = (means, variances)` for segment `l`, each of length K.
pub fn aggregate(segments: &[(Vec<f64>, Vec<f64>)]) -> Result<AggregatedPrediction> {
    let Some(first) = segments.first() else {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            got: 0,
            context: "aggregation over segments",
        });
    };
    let k = first.0.len();
    let mut precision = vec![0.0; k];
    let mut weighted = vec![0.0; k];
    for (means, vars) in segments {
        if means.len() != k || vars.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: means.len().min(vars.len()),
                context: "segment prediction width",
            });
        }
        for j in 0..k {
            if !(vars[j] > 0.0) || !vars[j].is_finite() {
                return Err(Error::OutOfRange(format!(
                    "segment variance must be positive and finite, got {}",
                    vars[j]
                )));
            }
            precision[j] += 1.0 / vars[j];
            weighted[j] += means[j] / vars[j];
        }
    }
    let l = segments.len() as f64;
    let variances: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let means = weighted.iter().zip(&variances).map(|(s, w)| s * w).collect();
    let uncertainties = variances.iter().map(|w| l * w).collect();
    Ok(AggregatedPrediction {
        means,
        variances,
        uncertainties,
        segments: segments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(means: &[f64], vars: &[f64]) -> AggregatedPrediction {
        let segs: Vec<_> = means
            .iter()
            .zip(vars)
            .map(|(m, v)| (vec![*m], vec![*v]))
            .collect();
        aggregate(&segs).unwrap()
    }

    #[test]
    fn worked_examples() {
        let a = one(&[1.7], &[0.3]);
        assert_eq!((a.means[0], a.variances[0], a.uncertainties[0]), (1.7, 0.3, 0.3));
        let a = one(&[1.0, 3.0], &[1.0, 1.0]);
        assert_eq!((a.means[0], a.variances[0], a.uncertainties[0]), (2.0, 0.5, 1.0));
        let a = one(&[1.0, 3.0], &[1.0, 3.0]);
        assert!((a.means[0] - 1.5).abs() < 1e-15);
        assert!((a.variances[0] - 0.75).abs() < 1e-15);
        assert!((a.uncertainties[0] - 1.5).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(vec![1.0], vec![0.0])]).is_err());
    }

    proptest! {
        #[test]
        fn convex_and_duplication_invariant(
            pairs in prop::collection::vec((-10.0f64..10.0, 1e-3f64..10.0), 1..12)
        ) {
            let (m, v): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let a = one(&m, &v);
            let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.means[0] >= lo - 1e-12 && a.means[0] <= hi + 1e-12);
            let wsum: f64 = v.iter().map(|g| a.variances[0] / g).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);

            let m2: Vec<f64> = m.iter().chain(&m).copied().collect();
            let v2: Vec<f64> = v.iter().chain(&v).copied().collect();
            let b = one(&m2, &v2);
            prop_assert!((b.means[0] - a.means[0]).abs() <= 1e-12 * (1.0 + a.means[0].abs()));
            prop_assert!((b.variances[0] - a.variances[0] / 2.0).abs() <= 1e-12 * a.variances[0]);
            prop_assert!((b.uncertainties[0] - a.uncertainties[0]).abs() <= 1e-12 * a.uncertainties[0]);
        }
    }
}
