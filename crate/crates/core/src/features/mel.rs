use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::wav::Waveform;

/// Power floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Analysis window in seconds.
    pub window: f64,
    /// Frame hop in seconds.
    pub hop: f64,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 0.025,
            hop: 0.010,
            n_mels: 64,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as f64).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// `floor((S - W) / H) + 1`, or `None` when `S < W`.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        let w = self.window_samples();
        (samples >= w).then(|| (samples - w) / self.hop_samples() + 1)
    }
}

/// Triangular mel filters over the `n_fft / 2 + 1` power-spectrum bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per filter: first bin index and weights.
    pub filters: Vec<(usize, Vec<f64>)>,
    /// Centre frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Self {
            filters,
            centers: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// F x n_mels log-mel energies, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f64>,
    pub n_mels: usize,
    /// Seconds between frames.
    pub frame_hop: f64,
    /// Analysis window in seconds.
    pub window: f64,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f64>, n_mels: usize, frame_hop: f64, window: f64) -> Result<Self> {
        if n_mels == 0 || data.len() % n_mels != 0 || data.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: n_mels,
                actual: data.len(),
                context: "spectrogram data must be a non-empty multiple of the bin count",
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(Self {
            data,
            n_mels,
            frame_hop,
            window,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.n_mels
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.n_mels..(f + 1) * self.n_mels]
    }

    /// Frames `[start, end)` as a new spectrogram.
    pub fn slice(&self, start: usize, end: usize) -> MelSpectrogram {
        MelSpectrogram {
            data: self.data[start * self.n_mels..end * self.n_mels].to_vec(),
            n_mels: self.n_mels,
            frame_hop: self.frame_hop,
            window: self.window,
        }
    }
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
}

impl Stft {
    fn new(cfg: &MelConfig) -> Self {
        let w = cfg.window_samples();
        let n_fft = cfg.n_fft();
        // periodic Hann
        let window = (0..w)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / w as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window,
            n_fft,
        }
    }

    fn power(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        buf.clear();
        buf.extend(frame.iter().zip(&self.window).map(|(s, w)| Complex::new(s * w, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm_sqr();
        }
    }
}

/// Power spectrum (`n_fft / 2 + 1` bins) of one Hann-windowed frame.
#[cfg(test)]
fn frame_power(cfg: &MelConfig, frame: &[f64]) -> Vec<f64> {
    let stft = Stft::new(cfg);
    let mut out = vec![0.0; stft.n_fft / 2 + 1];
    stft.power(frame, &mut Vec::new(), &mut out);
    out
}

pub fn compute_logmel(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform rate {} does not match feature rate {}; resample first",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    if wave.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("waveform samples"));
    }
    let w = cfg.window_samples();
    let frames = cfg.frame_count(wave.samples.len()).ok_or(Error::TooShort {
        needed: w,
        got: wave.samples.len(),
        unit: "samples",
    })?;
    let hop = cfg.hop_samples();
    let stft = Stft::new(cfg);
    let bank = MelFilterbank::new(cfg.n_mels, stft.n_fft, cfg.sample_rate);
    let mut data = vec![0.0; frames * cfg.n_mels];
    let mut power = vec![0.0; stft.n_fft / 2 + 1];
    let mut buf = Vec::with_capacity(stft.n_fft);
    for (f, row) in data.chunks_exact_mut(cfg.n_mels).enumerate() {
        stft.power(&wave.samples[f * hop..f * hop + w], &mut buf, &mut power);
        bank.apply(&power, row);
        for x in row.iter_mut() {
            *x = x.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(data, cfg.n_mels, cfg.hop, cfg.window)
}
