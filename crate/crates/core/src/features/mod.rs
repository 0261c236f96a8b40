//! Voice ingestion and log-mel features.
//!
//! Canonical input is 16 kHz mono PCM-16 WAV. Other sample rates are brought
//! to 16 kHz by a linear-phase polyphase resampler (windowed-sinc FIR).
//!
//! Log-mel parameters: Hann window of 25 ms, 10 ms hop, 64 triangular mel
//! filters on the HTK scale `2595 log10(1 + f / 700)` spanning 0 Hz to
//! Nyquist, natural log of power with a floor of `1e-10` applied before the
//! log.

mod mel;
mod normalize;
mod resample;
mod segment;
mod wav;

pub use mel::{compute_logmel, hz_to_mel, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram, LOG_FLOOR};
pub use normalize::MelNormalizer;
pub use resample::resample;
pub use segment::{frames_for_seconds, segment, tile_spans, Segment, SegmentMode, SegmentSet, Span};
pub use wav::{read_feature_cache, read_wav, write_feature_cache, write_wav, Waveform, CANONICAL_RATE};
