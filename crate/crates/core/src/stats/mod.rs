//! Chance baselines, error ratios, the one-sided t-test and the repeated
//! experiment harness.

mod harness;
mod report;
mod student;

pub use harness::{
    filter_indices, run_harness, AmTestResult, FilterLevel, HarnessConfig, HarnessInput, HarnessResult,
    PhonemeAnnotations, RunResult,
};
pub use report::{render_bar_chart, write_report_csv, BarChart};
pub use student::{inc_beta, ln_gamma, t_cdf, t_quantile};

use crate::dataset::Split;
use crate::error::{Error, Result};

/// Constant per-AM predictor: the training mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceEstimator {
    pub means: Vec<f64>,
}

pub fn chance_baseline(train: &[&[f64]]) -> Result<ChanceEstimator> {
    let Some(first) = train.first() else {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            got: 0,
            context: "chance baseline over the training split",
        });
    };
    let k = first.len();
    let mut means = vec![0.0; k];
    for row in train {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: row.len(),
                context: "training AM vector",
            });
        }
        for (m, v) in means.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= train.len() as f64);
    Ok(ChanceEstimator { means })
}

/// Model and chance MSE for one AM on the testing split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPair {
    pub eps: f64,
    pub eps_chance: f64,
    pub ratio: f64,
}

/// Per-AM error pairs. Only the testing split is accepted: errors on the
/// training or selection splits are optimistically biased.
pub fn error_pair(split: Split, predictions: &[&[f64]], truth: &[&[f64]], chance: &ChanceEstimator) -> Result<Vec<ErrorPair>> {
    if split != Split::Test {
        return Err(Error::SplitMisuse(format!(
            "error ratios must be computed on the test split, not `{split}`"
        )));
    }
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predictions.len(),
            context: "predictions aligned with test samples",
        });
    }
    if truth.is_empty() {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            got: 0,
            context: "test samples",
        });
    }
    let k = chance.means.len();
    (0..k)
        .map(|j| {
            let (mut e, mut c) = (0.0, 0.0);
            for (p, t) in predictions.iter().zip(truth) {
                e += (p[j] - t[j]).powi(2);
                c += (chance.means[j] - t[j]).powi(2);
            }
            let n = truth.len() as f64;
            let (eps, eps_chance) = (e / n, c / n);
            if eps_chance <= 0.0 {
                return Err(Error::ZeroVariance(format!("AM {j} on the test split")));
            }
            Ok(ErrorPair {
                eps,
                eps_chance,
                ratio: eps / eps_chance,
            })
        })
        .collect()
}

/// Upper bound of the one-sided `1 - alpha` confidence interval of the mean
/// ratio: `mean + t_{1-alpha, N-1} * sd / sqrt(N)` with the sample sd.
pub fn ci_upper(ratios: &[f64], alpha: f64) -> Result<f64> {
    let n = ratios.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: n,
            context: "runs for the confidence interval",
        });
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::OutOfRange(format!("significance level {alpha} outside (0, 0.5)")));
    }
    let (mean, sd) = mean_sd(ratios);
    Ok(mean + t_quantile(1.0 - alpha, (n - 1) as f64)? * sd / (n as f64).sqrt())
}

/// Mean and sample standard deviation (N - 1).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let rough = v.iter().sum::<f64>() / n;
    // one correction pass removes the rounding of the naive sum
    let mean = rough + v.iter().map(|x| x - rough).sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Predictable when the upper bound is below 1 (reject "mean ratio >= 1").
pub fn is_predictable(ci_u: f64) -> bool {
    ci_u < 1.0
}
