use crate::error::{Error, Result};
use crate::features::{tile_spans, MelSpectrogram, Span};

use super::{aggregate, AggregatedPrediction, EstimatorModel};

/// A voice recording with normalised log-mel features and, optionally, the
/// raw waveform used by the training-only diffusion constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceRecording {
    pub id: String,
    pub speaker: String,
    pub features: MelSpectrogram,
    pub waveform: Option<Vec<f64>>,
}

/// A recording paired with its speaker's normalised AM vector.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub recording: &'a VoiceRecording,
    pub target: &'a [f64],
}

/// Tile the recording into segments of `segment_frames` (the whole
/// recording when shorter), predict each, and aggregate.
pub fn predict_recording(
    model: &EstimatorModel,
    features: &MelSpectrogram,
    segment_frames: usize,
    min_frames: usize,
) -> Result<AggregatedPrediction> {
    predict_spans(model, features, &tile_spans(features.frames(), segment_frames), min_frames)
}

/// Predict and aggregate over caller-chosen spans (e.g. phoneme annotations).
pub fn predict_spans(
    model: &EstimatorModel,
    features: &MelSpectrogram,
    spans: &[Span],
    min_frames: usize,
) -> Result<AggregatedPrediction> {
    let mut preds = Vec::with_capacity(spans.len());
    for span in spans {
        if span.end > features.frames() || span.is_empty() {
            return Err(Error::OutOfRange(format!(
                "span {}..{} outside {} frames",
                span.start,
                span.end,
                features.frames()
            )));
        }
        let slice = &features.data[span.start * features.n_mels..span.end * features.n_mels];
        let p = model.predict(slice, min_frames)?;
        preds.push((p.means, p.variances));
    }
    aggregate(&preds)
}

/// Mean over AMs of model MSE divided by the MSE of the constant `chance`
/// predictor, both over the given recordings.
pub fn mean_normalized_error(
    predictions: &[AggregatedPrediction],
    targets: &[&[f64]],
    chance: &[f64],
) -> f64 {
    let k = chance.len();
    let mut total = 0.0;
    for j in 0..k {
        let mut model = 0.0;
        let mut base = 0.0;
        for (p, t) in predictions.iter().zip(targets) {
            model += (p.means[j] - t[j]).powi(2);
            base += (chance[j] - t[j]).powi(2);
        }
        total += if base > 0.0 { model / base } else { 1.0 };
    }
    total / k as f64
}
