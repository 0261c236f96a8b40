//! Reading the dataset directory and intermediate CSV tables.

use std::collections::BTreeMap;
use std::path::Path;

use voxface::dataset::SplitAssignment;
use voxface::estimator::VoiceRecording;
use voxface::features::{compute_logmel, read_feature_cache, read_wav, MelConfig, Span};
use voxface::geometry::{read_am_csv, AmVector};
use voxface::stats::PhonemeAnnotations;

use crate::artifacts::Ctx;
use crate::error::{CliError, Result};

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Rows of a headed CSV file as string maps keyed by column name.
pub fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = reader(path)?;
    let fmt = |e: csv::Error| CliError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let header: Vec<String> = r.headers().map_err(fmt)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(fmt)?;
        rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(rows)
}

pub fn field<'a>(row: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    row.get(key).map(String::as_str).ok_or_else(|| CliError::Format {
        path: path.to_path_buf(),
        msg: format!("missing column `{key}`"),
    })
}

pub fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| CliError::Format {
        path: path.to_path_buf(),
        msg: format!("`{s}` is not a number"),
    })
}

/// `recordings.csv` with columns `recording,speaker,features,audio`. Either
/// file column may be empty; features are computed from audio when the cache
/// is absent. Waveforms are loaded only when `with_audio` is set.
pub fn load_recordings(ctx: &Ctx, with_audio: bool) -> Result<Vec<VoiceRecording>> {
    let path = ctx.data("recordings.csv");
    ctx.require_file(&path, "recording list", "synth")?;
    let f = &ctx.cfg.features;
    let mel = MelConfig {
        sample_rate: f.sample_rate,
        window: f.window,
        hop: f.hop,
        ..MelConfig::default()
    };
    let mut out = Vec::new();
    for row in read_rows(&path)? {
        let id = field(&row, "recording", &path)?.to_string();
        let speaker = field(&row, "speaker", &path)?.to_string();
        let feat = row.get("features").map(String::as_str).unwrap_or("");
        let audio = row.get("audio").map(String::as_str).unwrap_or("");
        let wave = if !audio.is_empty() && (with_audio || feat.is_empty()) {
            Some(read_wav(&ctx.data(audio), f.sample_rate)?)
        } else {
            None
        };
        let features = if !feat.is_empty() {
            read_feature_cache(&ctx.data(feat), f.hop, f.window)?
        } else if let Some(w) = &wave {
            compute_logmel(w, &mel)?
        } else {
            return Err(CliError::Format {
                path: path.clone(),
                msg: format!("recording `{id}` has neither features nor audio"),
            });
        };
        out.push(VoiceRecording {
            id,
            speaker,
            features,
            waveform: if with_audio { wave.map(|w| w.samples) } else { None },
        });
    }
    Ok(out)
}

pub fn load_splits(ctx: &Ctx) -> Result<SplitAssignment> {
    let path = ctx.data("splits.csv");
    ctx.require_file(&path, "split manifest", "synth")?;
    Ok(SplitAssignment::read(&path)?)
}

pub fn load_ams(ctx: &Ctx) -> Result<(Vec<String>, BTreeMap<String, AmVector>)> {
    ctx.require_stage("compute-ams")?;
    let path = ctx.out("ams.csv");
    ctx.require_file(&path, "AM table", "compute-ams")?;
    let (ids, rows) = read_am_csv(&path)?;
    Ok((ids, rows.into_iter().collect()))
}

/// `recording,start_frame,end_frame,label`, end exclusive.
pub fn load_phonemes(path: &Path) -> Result<PhonemeAnnotations> {
    let mut out = PhonemeAnnotations::new();
    for row in read_rows(path)? {
        let span = |k: &str| -> Result<usize> {
            field(&row, k, path)?.parse().map_err(|_| CliError::Format {
                path: path.to_path_buf(),
                msg: format!("bad frame index in column `{k}`"),
            })
        };
        let (start, end) = (span("start_frame")?, span("end_frame")?);
        if end <= start {
            return Err(CliError::Format {
                path: path.to_path_buf(),
                msg: format!("empty span {start}..{end}"),
            });
        }
        out.entry(field(&row, "recording", path)?.to_string())
            .or_default()
            .push((Span { start, end }, field(&row, "label", path)?.to_string()));
    }
    Ok(out)
}
