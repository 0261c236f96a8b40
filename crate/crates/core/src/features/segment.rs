use rand::Rng;

use crate::error::{Error, Result};

use super::mel::MelSpectrogram;

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub recording_id: String,
    pub span: Span,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentMode {
    /// One random crop with a length drawn uniformly from the frame range
    /// (a recording shorter than `min_frames` is used whole).
    TrainRandom { min_frames: usize, max_frames: usize },
    /// The whole recording as a single segment.
    EvalFull,
    /// Caller-provided spans, optionally labelled (e.g. phonemes).
    Annotated(Vec<(Span, Option<String>)>),
}

/// Number of frames covering `seconds` at a hop of `hop` seconds.
pub fn frames_for_seconds(seconds: f64, hop: f64) -> usize {
    (seconds / hop).round() as usize
}

/// Consecutive non-overlapping spans of `len` frames; a trailing remainder
/// shorter than `len` is dropped unless it is the only span.
pub fn tile_spans(frames: usize, len: usize) -> Vec<Span> {
    if len == 0 || frames <= len {
        return vec![Span { start: 0, end: frames }];
    }
    (0..frames / len)
        .map(|i| Span {
            start: i * len,
            end: (i + 1) * len,
        })
        .collect()
}

pub fn segment<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    recording_id: &str,
    mode: &SegmentMode,
    rng: &mut R,
) -> Result<SegmentSet> {
    let frames = spec.frames();
    let seg = |span: Span, label: Option<String>| Segment {
        recording_id: recording_id.to_string(),
        span,
        label,
    };
    let segments = match mode {
        SegmentMode::EvalFull => vec![seg(Span { start: 0, end: frames }, None)],
        SegmentMode::TrainRandom { min_frames, max_frames } => {
            if min_frames > max_frames || *min_frames == 0 {
                return Err(Error::Config(format!(
                    "bad random segment range {min_frames}..={max_frames}"
                )));
            }
            if frames <= *min_frames {
                vec![seg(Span { start: 0, end: frames }, None)]
            } else {
                let len = rng.gen_range(*min_frames..=(*max_frames).min(frames));
                let start = rng.gen_range(0..=frames - len);
                vec![seg(Span { start, end: start + len }, None)]
            }
        }
        SegmentMode::Annotated(spans) => {
            let mut out = Vec::with_capacity(spans.len());
            for (span, label) in spans {
                if span.is_empty() || span.end > frames {
                    return Err(Error::OutOfRange(format!(
                        "span {}..{} outside recording `{recording_id}` of {frames} frames",
                        span.start, span.end
                    )));
                }
                out.push(seg(*span, label.clone()));
            }
            out
        }
    };
    Ok(SegmentSet { segments })
}
