//! Training-only diffusion constraint: a small denoiser conditioned on the
//! voice code predicts the noise added to a waveform window of the same
//! speaker. Its gradient flows back into the shared encoder through `e`.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::CODE_DIM;
use crate::nn::{self, Layout, Slot};

pub const WINDOW: usize = 256;
pub const TIME_EMBED: usize = 16;
pub const DENOISER_HIDDEN: usize = 512;
const INPUT: usize = WINDOW + TIME_EMBED + CODE_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 50;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.15;

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::OutOfRange("diffusion steps must be positive".into()));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) || beta_end < beta_start {
            return Err(Error::OutOfRange(format!(
                "beta range [{beta_start}, {beta_end}] must lie in (0,1) and be increasing"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar_t` for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Closed-form `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn forward_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let ab = self.alpha_bar(t)?;
        if x0.len() != noise.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                actual: noise.len(),
                context: "noise window",
            });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }

    /// One Markov transition `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
    pub fn step_transition(&self, prev: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let beta = self.betas[t - 1];
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        Ok(prev.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        h.finalize().into()
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("valid default schedule")
    }
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED] {
    let mut out = [0.0; TIME_EMBED];
    let half = TIME_EMBED / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    out
}

/// Scale a raw waveform window to zero mean and unit RMS.
pub fn normalize_window(samples: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let rms = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if rms > 1e-8 { 1.0 / rms } else { 0.0 };
    samples.iter().map(|x| (x - mean) * scale).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenoiserSlots {
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
    w3: Slot,
    b3: Slot,
}

/// Noise predictor `eps(x_t, t, e)`: two ReLU layers of 512 units.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub params: Vec<f64>,
    slots: DenoiserSlots,
}

fn denoiser_layout() -> (Layout, DenoiserSlots) {
    let mut l = Layout::default();
    let s = DenoiserSlots {
        w1: l.add("w1", DENOISER_HIDDEN * INPUT),
        b1: l.add("b1", DENOISER_HIDDEN),
        w2: l.add("w2", DENOISER_HIDDEN * DENOISER_HIDDEN),
        b2: l.add("b2", DENOISER_HIDDEN),
        w3: l.add("w3", WINDOW * DENOISER_HIDDEN),
        b3: l.add("b3", WINDOW),
    };
    (l, s)
}

pub struct DenoiserCache {
    batch: usize,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Result of one diffusion-loss evaluation over a batch.
#[derive(Debug, Clone)]
pub struct DiffusionOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `d loss / d e`, `batch x CODE_DIM`.
    pub d_codes: Vec<f64>,
}

impl Denoiser {
    pub fn zeros() -> Self {
        let (l, slots) = denoiser_layout();
        Self {
            params: vec![0.0; l.total],
            slots,
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut d = Self::zeros();
        let s = d.slots;
        nn::init_normal(s.w1.of_mut(&mut d.params), (2.0 / INPUT as f64).sqrt(), rng);
        nn::init_normal(s.w2.of_mut(&mut d.params), (2.0 / DENOISER_HIDDEN as f64).sqrt(), rng);
        nn::init_normal(s.w3.of_mut(&mut d.params), (1.0 / DENOISER_HIDDEN as f64).sqrt(), rng);
        d
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros();
        if params.len() != d.params.len() {
            return Err(Error::DimensionMismatch {
                expected: d.params.len(),
                actual: params.len(),
                context: "denoiser parameter count",
            });
        }
        d.params = params;
        Ok(d)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `noisy`: batch x WINDOW, `steps`: 1-based, `codes`: batch x CODE_DIM.
    pub fn forward(&self, noisy: &[f64], steps: &[usize], codes: &[f64]) -> (Vec<f64>, DenoiserCache) {
        let batch = steps.len();
        assert_eq!(noisy.len(), batch * WINDOW);
        assert_eq!(codes.len(), batch * CODE_DIM);
        let mut input = Vec::with_capacity(batch * INPUT);
        for i in 0..batch {
            input.extend_from_slice(&noisy[i * WINDOW..(i + 1) * WINDOW]);
            input.extend_from_slice(&time_embedding(steps[i]));
            input.extend_from_slice(&codes[i * CODE_DIM..(i + 1) * CODE_DIM]);
        }
        let s = &self.slots;
        let p = &self.params;
        let mut h1 = nn::dense_forward(s.w1.of(p), s.b1.of(p), &input, batch, INPUT);
        nn::relu_inplace(&mut h1);
        let mut h2 = nn::dense_forward(s.w2.of(p), s.b2.of(p), &h1, batch, DENOISER_HIDDEN);
        nn::relu_inplace(&mut h2);
        let out = nn::dense_forward(s.w3.of(p), s.b3.of(p), &h2, batch, DENOISER_HIDDEN);
        (out, DenoiserCache { batch, input, h1, h2 })
    }

    /// Returns `d loss / d codes` and accumulates parameter gradients.
    pub fn backward(&self, cache: &DenoiserCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let s = &self.slots;
        let p = &self.params;
        let b = cache.batch;
        let (g12, g3) = grad.split_at_mut(s.w3.offset);
        let (gw3, gb3) = g3.split_at_mut(s.w3.len);
        let mut d_h2 = nn::dense_backward(s.w3.of(p), &cache.h2, d_out, b, DENOISER_HIDDEN, gw3, gb3, true).unwrap();
        nn::relu_backward(&cache.h2, &mut d_h2);
        let (g1, g2) = g12.split_at_mut(s.w2.offset);
        let (gw2, gb2) = g2.split_at_mut(s.w2.len);
        let mut d_h1 = nn::dense_backward(s.w2.of(p), &cache.h1, &d_h2, b, DENOISER_HIDDEN, gw2, gb2, true).unwrap();
        nn::relu_backward(&cache.h1, &mut d_h1);
        let (gw1, gb1) = g1.split_at_mut(s.w1.len);
        let d_in = nn::dense_backward(s.w1.of(p), &cache.input, &d_h1, b, INPUT, gw1, gb1, true).unwrap();
        let mut d_codes = Vec::with_capacity(b * CODE_DIM);
        for row in d_in.chunks_exact(INPUT) {
            d_codes.extend_from_slice(&row[WINDOW + TIME_EMBED..]);
        }
        d_codes
    }

    pub fn architecture_hash(&self) -> [u8; 32] {
        let (l, _) = denoiser_layout();
        Sha256::digest(format!("voxface-denoiser/1;{}", l.describe()).as_bytes()).into()
    }

    /// Mean absolute noise-prediction error with explicit steps and noise,
    /// plus gradients with respect to parameters and codes.
    pub fn loss_with(
        &self,
        schedule: &DiffusionSchedule,
        clean: &[f64],
        codes: &[f64],
        steps: &[usize],
        noise: &[f64],
    ) -> Result<DiffusionOutput> {
        let batch = steps.len();
        if clean.len() != batch * WINDOW || noise.len() != batch * WINDOW {
            return Err(Error::DimensionMismatch {
                expected: batch * WINDOW,
                actual: clean.len(),
                context: "diffusion windows",
            });
        }
        if codes.len() != batch * CODE_DIM {
            return Err(Error::DimensionMismatch {
                expected: batch * CODE_DIM,
                actual: codes.len(),
                context: "diffusion voice codes",
            });
        }
        let mut noisy = Vec::with_capacity(batch * WINDOW);
        for i in 0..batch {
            let r = i * WINDOW..(i + 1) * WINDOW;
            noisy.extend(schedule.forward_sample(&clean[r.clone()], steps[i], &noise[r])?);
        }
        let (pred, cache) = self.forward(&noisy, steps, codes);
        let n = (batch * WINDOW) as f64;
        let loss = pred.iter().zip(noise).map(|(p, e)| (p - e).abs()).sum::<f64>() / n;
        let d_out: Vec<f64> = pred
            .iter()
            .zip(noise)
            .map(|(p, e)| {
                let r = p - e;
                if r > 0.0 {
                    1.0 / n
                } else if r < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
        let mut grad = vec![0.0; self.param_count()];
        let d_codes = self.backward(&cache, &d_out, &mut grad);
        Ok(DiffusionOutput { loss, grad, d_codes })
    }

    /// Single draw of step and Gaussian noise per example.
    pub fn diffusion_loss<R: Rng + ?Sized>(
        &self,
        schedule: &DiffusionSchedule,
        clean: &[f64],
        codes: &[f64],
        rng: &mut R,
    ) -> Result<DiffusionOutput> {
        let batch = clean.len() / WINDOW;
        let steps: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let noise: Vec<f64> = (0..batch * WINDOW).map(|_| rng.sample(StandardNormal)).collect();
        self.loss_with(schedule, clean, codes, &steps, &noise)
    }
}

/// Combined objective of the estimator and the diffusion constraint.
pub fn joint_loss(estimator_loss: f64, diffusion_loss: f64, gamma: f64) -> f64 {
    estimator_loss + gamma * diffusion_loss
}

/// The waveform conditioning a segment's code must come from the same speaker.
pub fn check_pairing(feature_speaker: &str, waveform_speaker: &str) -> Result<()> {
    if feature_speaker != waveform_speaker {
        return Err(Error::SpeakerMismatch {
            left: feature_speaker.to_string(),
            right: waveform_speaker.to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 50);
        assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars.last().unwrap() < 0.05);
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(51).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let s = DiffusionSchedule::default();
        let x = s.forward_sample(&[2.0], 1, &[3.0]).unwrap();
        assert!((x[0] - (0.9999f64.sqrt() * 2.0 + 0.0001f64.sqrt() * 3.0)).abs() < 1e-14);
        for t in [1, 10, 50] {
            let x = s.forward_sample(&[0.0, 0.0], t, &[1.0, -2.0]).unwrap();
            let k = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            assert_eq!(x, vec![k, -2.0 * k]);
        }
    }

    #[test]
    fn closed_form_matches_iterated_chain() {
        let s = DiffusionSchedule::default();
        let mut rng = rng_from(3, &[]);
        let n = 100_000;
        let x0 = 0.8;
        for t in [1usize, 5, 25, 50] {
            let (mut m1, mut v1, mut m2, mut v2) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                let a = s.forward_sample(&[x0], t, &[e]).unwrap()[0];
                let mut b = x0;
                for step in 1..=t {
                    let z: f64 = rng.sample(StandardNormal);
                    b = s.step_transition(&[b], step, &[z]).unwrap()[0];
                }
                m1 += a;
                v1 += a * a;
                m2 += b;
                v2 += b * b;
            }
            let nf = n as f64;
            let (m1, m2) = (m1 / nf, m2 / nf);
            let (v1, v2) = (v1 / nf - m1 * m1, v2 / nf - m2 * m2);
            let ab = s.alpha_bar(t).unwrap();
            assert!((m1 - m2).abs() < 0.02, "t={t}: {m1} vs {m2}");
            assert!((m1 - ab.sqrt() * x0).abs() < 0.01);
            assert!((v1 - v2).abs() < 0.02 * v1.max(0.01), "t={t}: {v1} vs {v2}");
        }
    }

    #[test]
    fn noised_unit_variance_is_preserved() {
        let s = DiffusionSchedule::default();
        let mut rng = rng_from(4, &[]);
        let n = 100_000;
        for t in [1usize, 20, 50] {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..n {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let y = s.forward_sample(&[x], t, &[e]).unwrap()[0];
                acc += y;
                acc2 += y * y;
            }
            let mean = acc / n as f64;
            let var = acc2 / n as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.02, "t={t}: {var}");
        }
    }

    #[test]
    fn zero_denoiser_loss_is_mean_abs_noise() {
        let d = Denoiser::zeros();
        let s = DiffusionSchedule::default();
        let mut rng = rng_from(5, &[]);
        let batch = 64;
        let clean = vec![0.5; batch * WINDOW];
        let codes = vec![0.0; batch * CODE_DIM];
        let out = d.diffusion_loss(&s, &clean, &codes, &mut rng).unwrap();
        assert!((out.loss - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01, "{}", out.loss);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // Only the output bias is non-zero, and the noise equals it.
        let mut d = Denoiser::zeros();
        let bias: Vec<f64> = (0..WINDOW).map(|i| (i as f64 * 0.37).sin()).collect();
        d.slots.b3.of_mut(&mut d.params).copy_from_slice(&bias);
        let s = DiffusionSchedule::default();
        let out = d
            .loss_with(&s, &vec![0.1; WINDOW], &vec![0.0; CODE_DIM], &[7], &bias)
            .unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_from(6, &[]);
        let d = Denoiser::init(&mut rng);
        let s = DiffusionSchedule::default();
        let batch = 3;
        let clean: Vec<f64> = (0..batch * WINDOW).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let codes: Vec<f64> = (0..batch * CODE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
        let steps = [3, 17, 44];
        let noise: Vec<f64> = (0..batch * WINDOW).map(|_| rng.sample(StandardNormal)).collect();
        let out = d.loss_with(&s, &clean, &codes, &steps, &noise).unwrap();
        let h = 1e-5;
        let (l, _) = denoiser_layout();
        let mut picks: Vec<usize> = l.slots.iter().map(|(_, s)| s.offset + rng.gen_range(0..s.len)).collect();
        while picks.len() < 25 {
            picks.push(rng.gen_range(0..d.param_count()));
        }
        for &i in &picks {
            let mut a = d.clone();
            a.params[i] += h;
            let mut b = d.clone();
            b.params[i] -= h;
            let fa = a.loss_with(&s, &clean, &codes, &steps, &noise).unwrap().loss;
            let fb = b.loss_with(&s, &clean, &codes, &steps, &noise).unwrap().loss;
            let fd = (fa - fb) / (2.0 * h);
            let err = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", out.grad[i]);
        }
        for j in [0, 70, 191] {
            let mut c = codes.clone();
            c[j] += h;
            let fa = d.loss_with(&s, &clean, &c, &steps, &noise).unwrap().loss;
            c[j] -= 2.0 * h;
            let fb = d.loss_with(&s, &clean, &c, &steps, &noise).unwrap().loss;
            let fd = (fa - fb) / (2.0 * h);
            assert!((fd - out.d_codes[j]).abs() <= 1e-4 * fd.abs().max(1e-6), "code {j}");
        }
    }

    #[test]
    fn pairing_requires_same_speaker() {
        assert!(check_pairing("s1", "s1").is_ok());
        assert!(matches!(check_pairing("s1", "s2"), Err(Error::SpeakerMismatch { .. })));
        assert_eq!(joint_loss(2.0, 5.0, 0.0), 2.0);
        assert_eq!(joint_loss(2.0, 5.0, 0.1), 2.5);
    }
}
