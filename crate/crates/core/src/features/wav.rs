use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

use super::mel::MelSpectrogram;
use super::resample::resample;

pub const CANONICAL_RATE: u32 = 16_000;

/// Mono waveform with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Resample to `rate` if needed.
    pub fn to_rate(&self, rate: u32) -> Result<Waveform> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        Waveform::new(resample(&self.samples, self.sample_rate, rate)?, rate)
    }
}

/// Read a PCM WAV file as mono at `target_rate` (multi-channel input is
/// averaged, other rates are resampled).
pub fn read_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
    };
    let channels = spec.channels.max(1) as usize;
    if channels > 1 {
        warn!("{}: averaging {channels} channels to mono", path.display());
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)?.to_rate(target_rate)
}

/// Write 16-bit PCM mono; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"VXMEL001";

/// Feature cache: magic, F (u64), bins (u64), then F x bins little-endian
/// f64 values in row-major order.
pub fn write_feature_cache(path: &Path, spec: &MelSpectrogram) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::with_capacity(24 + 8 * spec.data.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(spec.frames() as u64).to_le_bytes());
    buf.extend_from_slice(&(spec.n_mels as u64).to_le_bytes());
    for x in &spec.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path, hop: f64, window: f64) -> Result<MelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("missing feature cache magic"));
    }
    let f = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let b = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + 8 * f * b {
        return Err(bad("length does not match header"));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(data, b, hop, window)
}
