use crate::error::{Error, Result};

use super::mel::MelSpectrogram;

/// Per-mel-bin mean/variance statistics pooled over all training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelNormalizer {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let mut n_mels = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut sumsq = Vec::new();
        let specs: Vec<&MelSpectrogram> = specs.into_iter().collect();
        // two passes for numerically sound variance
        for s in &specs {
            let b = *n_mels.get_or_insert(s.n_mels);
            if s.n_mels != b {
                return Err(Error::DimensionMismatch {
                    expected: b,
                    actual: s.n_mels,
                    context: "mel bin count",
                });
            }
            sum.resize(b, 0.0);
            for row in s.data.chunks_exact(b) {
                for (acc, x) in sum.iter_mut().zip(row) {
                    *acc += x;
                }
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::NotEnoughSamples {
                needed: 2,
                got: count,
                context: "mel normalization frames",
            });
        }
        let b = n_mels.unwrap();
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        sumsq.resize(b, 0.0);
        for s in &specs {
            for row in s.data.chunks_exact(b) {
                for j in 0..b {
                    sumsq[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let mut std = Vec::with_capacity(b);
        for j in 0..b {
            let sd = (sumsq[j] / count as f64).sqrt();
            if !(sd > 1e-12 * mean[j].abs().max(1.0)) {
                return Err(Error::ZeroVariance(format!("mel bin {j}")));
            }
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn n_mels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.check(spec)?;
        let mut out = spec.clone();
        for row in out.data.chunks_exact_mut(spec.n_mels) {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.check(spec)?;
        let mut out = spec.clone();
        for row in out.data.chunks_exact_mut(spec.n_mels) {
            for j in 0..row.len() {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }

    fn check(&self, spec: &MelSpectrogram) -> Result<()> {
        if spec.n_mels != self.n_mels() {
            return Err(Error::DimensionMismatch {
                expected: self.n_mels(),
                actual: spec.n_mels,
                context: "mel bin count",
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spec(frames: usize, seed: u64) -> MelSpectrogram {
        let mut rng = crate::rng::rng_from(seed, &[]);
        let data = (0..frames * 4).map(|i| rng.gen_range(-5.0..5.0) + (i % 4) as f64 * 10.0).collect();
        MelSpectrogram::new(data, 4, 0.01, 0.025).unwrap()
    }

    #[test]
    fn normalized_corpus_is_standardized() {
        let specs = vec![random_spec(30, 1), random_spec(17, 2)];
        let norm = MelNormalizer::fit(&specs).unwrap();
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for s in &specs {
            let z = norm.apply(s).unwrap();
            let back = norm.invert(&z).unwrap();
            for (a, b) in back.data.iter().zip(&s.data) {
                assert!((a - b).abs() < 1e-10);
            }
            for row in z.data.chunks_exact(4) {
                for j in 0..4 {
                    sums[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
            }
        }
        for j in 0..4 {
            assert!((sums[j] / 47.0).abs() < 1e-8);
            assert!((sq[j] / 47.0 - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_bin_is_an_error() {
        let mut s = random_spec(10, 3);
        for row in s.data.chunks_exact_mut(4) {
            row[2] = 7.0;
        }
        match MelNormalizer::fit([&s]) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "mel bin 2"),
            other => panic!("{other:?}"),
        }
    }
}
