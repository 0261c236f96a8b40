use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::dataset::{PreparedData, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::estimator::{
    min_input_frames, predict_recording, predict_spans, train, AggregatedPrediction, EstimatorModel, TrainConfig,
    VoiceRecording,
};
use crate::features::Span;
use crate::geometry::AmVector;
use crate::rng::{derive_seed, rng_from, stream};

use super::{ci_upper, is_predictable, mean_sd, ChanceEstimator};

/// Labelled spans per recording id (e.g. phoneme segmentations).
pub type PhonemeAnnotations = BTreeMap<String, Vec<(Span, String)>>;

/// Fraction of lowest-uncertainty test samples kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterLevel(pub f64);

impl FilterLevel {
    pub fn label(&self) -> String {
        format!("{}%", (self.0 * 100.0).round())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub runs: usize,
    pub alpha: f64,
    pub levels: Vec<FilterLevel>,
    /// Template for every run; its seed is replaced by the run seed.
    pub train: TrainConfig,
    pub master_seed: u64,
    /// Redraw the speaker split for every run instead of keeping the given one.
    pub resample_splits: bool,
    /// Explicit per-run seeds; derived from the master seed when absent.
    pub run_seeds: Option<Vec<u64>>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            alpha: 0.05,
            levels: vec![FilterLevel(1.0), FilterLevel(0.75), FilterLevel(0.5)],
            train: TrainConfig::default(),
            master_seed: 0,
            resample_splits: false,
            run_seeds: None,
        }
    }
}

/// Raw inputs of the harness.
#[derive(Debug, Clone, Copy)]
pub struct HarnessInput<'a> {
    pub am_ids: &'a [String],
    pub recordings: &'a [VoiceRecording],
    pub speaker_ams: &'a BTreeMap<String, AmVector>,
    pub splits: &'a SplitAssignment,
    pub phonemes: Option<&'a PhonemeAnnotations>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    /// `[level][am]` error ratios on the test split.
    pub ratios: Vec<Vec<f64>>,
    /// Per phoneme label, per-AM ratios (NaN where fewer than two samples).
    pub phoneme_ratios: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmTestResult {
    pub am_id: String,
    pub level: FilterLevel,
    pub mean: f64,
    pub sd: f64,
    pub ci_upper: f64,
    pub predictable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessResult {
    pub am_ids: Vec<String>,
    pub levels: Vec<FilterLevel>,
    pub runs: Vec<RunResult>,
    /// One row per (level, AM), levels in configuration order.
    pub tests: Vec<AmTestResult>,
    /// Per phoneme label: mean `1 - CI_u` over the AMs predictable at the
    /// first level (all AMs if none is).
    pub phoneme_scores: Vec<(String, f64)>,
}

impl HarnessResult {
    pub fn test(&self, level: usize, am: usize) -> &AmTestResult {
        &self.tests[level * self.am_ids.len() + am]
    }

    pub fn predictable_ids(&self, level: usize) -> Vec<&str> {
        (0..self.am_ids.len())
            .filter(|&k| self.test(level, k).predictable)
            .map(|k| self.am_ids[k].as_str())
            .collect()
    }

    /// Mean over runs and over the given AMs of the ratio at `level`.
    pub fn mean_ratio(&self, level: usize, ams: &[usize]) -> f64 {
        ams.iter().map(|&k| self.test(level, k).mean).sum::<f64>() / ams.len() as f64
    }
}

fn run_seeds(cfg: &HarnessConfig) -> Result<Vec<u64>> {
    let seeds = match &cfg.run_seeds {
        Some(s) => {
            if s.len() != cfg.runs {
                return Err(Error::Config(format!("{} run seeds given for {} runs", s.len(), cfg.runs)));
            }
            s.clone()
        }
        None => (0..cfg.runs as u64)
            .map(|i| derive_seed(cfg.master_seed, &[stream::HARNESS_RUN, i]))
            .collect(),
    };
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::Config("harness runs must have distinct seeds".into()));
    }
    Ok(seeds)
}

/// Keep the `level` fraction of samples with the smallest uncertainty for AM
/// `k`, ties broken by speaker then recording id.
pub fn filter_indices(preds: &[AggregatedPrediction], recs: &[&VoiceRecording], k: usize, level: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[a].uncertainties[k]
            .total_cmp(&preds[b].uncertainties[k])
            .then_with(|| recs[a].speaker.cmp(&recs[b].speaker))
            .then_with(|| recs[a].id.cmp(&recs[b].id))
    });
    let keep = ((level * preds.len() as f64).ceil() as usize).clamp(1.min(preds.len()), preds.len());
    order.truncate(keep);
    order
}

fn ratio(preds: &[&[f64]], truth: &[&[f64]], chance: f64, k: usize) -> f64 {
    let (mut e, mut c) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(truth) {
        e += (p[k] - t[k]).powi(2);
        c += (chance - t[k]).powi(2);
    }
    if c > 0.0 {
        e / c
    } else {
        f64::NAN
    }
}

fn one_run(
    data: &PreparedData,
    cfg: &HarnessConfig,
    seed: u64,
    phonemes: Option<&PhonemeAnnotations>,
) -> Result<(RunResult, EstimatorModel)> {
    let train_set = data.labeled(Split::Train);
    let select = data.labeled(Split::Select);
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let model = train(&train_set, &select, &tc)?.model;
    let train_targets: Vec<&[f64]> = train_set.iter().map(|l| l.target).collect();
    let chance = super::chance_baseline(&train_targets)?;

    let test_idx = data.indices(Split::Test);
    let recs: Vec<&VoiceRecording> = test_idx.iter().map(|&i| &data.recordings[i]).collect();
    let truth: Vec<&[f64]> = test_idx.iter().map(|&i| data.targets[i].as_slice()).collect();
    let preds = recs
        .iter()
        .map(|r| predict_recording(&model, &r.features, tc.eval_frames, 1))
        .collect::<Result<Vec<_>>>()?;
    let k = data.am_ids.len();
    let ratios = cfg
        .levels
        .iter()
        .map(|lv| {
            (0..k)
                .map(|j| {
                    let keep = filter_indices(&preds, &recs, j, lv.0);
                    let p: Vec<&[f64]> = keep.iter().map(|&i| preds[i].means.as_slice()).collect();
                    let t: Vec<&[f64]> = keep.iter().map(|&i| truth[i]).collect();
                    ratio(&p, &t, chance.means[j], j)
                })
                .collect()
        })
        .collect();
    let phoneme_ratios = match phonemes {
        Some(ann) => phoneme_run(&model, &recs, &truth, &chance, ann)?,
        None => BTreeMap::new(),
    };
    Ok((RunResult { seed, ratios, phoneme_ratios }, model))
}

fn phoneme_run(
    model: &EstimatorModel,
    recs: &[&VoiceRecording],
    truth: &[&[f64]],
    chance: &ChanceEstimator,
    ann: &PhonemeAnnotations,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let min = min_input_frames();
    let mut per_label: BTreeMap<String, (Vec<Vec<f64>>, Vec<&[f64]>)> = BTreeMap::new();
    for (r, t) in recs.iter().zip(truth) {
        let Some(spans) = ann.get(&r.id) else { continue };
        let labels: BTreeSet<&String> = spans.iter().map(|(_, l)| l).collect();
        for label in labels {
            let chosen: Vec<Span> = spans
                .iter()
                .filter(|(s, l)| l == label && s.len() >= min)
                .map(|(s, _)| *s)
                .collect();
            if chosen.is_empty() {
                continue;
            }
            let agg = predict_spans(model, &r.features, &chosen, 1)?;
            let e = per_label.entry(label.clone()).or_default();
            e.0.push(agg.means);
            e.1.push(t);
        }
    }
    let k = chance.means.len();
    Ok(per_label
        .into_iter()
        .map(|(label, (p, t))| {
            let pr: Vec<&[f64]> = p.iter().map(|v| v.as_slice()).collect();
            let r = (0..k)
                .map(|j| if pr.len() >= 2 { ratio(&pr, &t, chance.means[j], j) } else { f64::NAN })
                .collect();
            (label, r)
        })
        .collect())
}

/// Run `cfg.runs` independently seeded train-and-test repetitions and test
/// every AM at every filter level.
pub fn run_harness(input: &HarnessInput, cfg: &HarnessConfig) -> Result<HarnessResult> {
    if cfg.runs < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: cfg.runs,
            context: "harness runs",
        });
    }
    if cfg.levels.is_empty() || cfg.levels.iter().any(|l| !(l.0 > 0.0 && l.0 <= 1.0)) {
        return Err(Error::Config("filter levels must lie in (0, 1]".into()));
    }
    let seeds = run_seeds(cfg)?;
    let fixed = if cfg.resample_splits {
        None
    } else {
        Some(PreparedData::prepare(input.am_ids, input.recordings, input.speaker_ams, input.splits)?)
    };
    let speakers: Vec<String> = input.splits.speakers.keys().cloned().collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let data = match &fixed {
                Some(d) => std::borrow::Cow::Borrowed(d),
                None => {
                    let assign = SplitAssignment::random(&speakers, &mut rng_from(seed, &[stream::SYNTH_SPLIT]))?;
                    std::borrow::Cow::Owned(PreparedData::prepare(
                        input.am_ids,
                        input.recordings,
                        input.speaker_ams,
                        &assign,
                    )?)
                }
            };
            one_run(&data, cfg, seed, input.phonemes).map(|r| r.0)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(input.am_ids, cfg, runs)
}

pub(crate) fn summarize(am_ids: &[String], cfg: &HarnessConfig, runs: Vec<RunResult>) -> Result<HarnessResult> {
    let k = am_ids.len();
    let mut tests = Vec::with_capacity(cfg.levels.len() * k);
    for (li, lv) in cfg.levels.iter().enumerate() {
        for (j, id) in am_ids.iter().enumerate() {
            let r: Vec<f64> = runs.iter().map(|run| run.ratios[li][j]).collect();
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::ZeroVariance(format!("AM `{id}` on the retained test samples")));
            }
            let (mean, sd) = mean_sd(&r);
            let ci = ci_upper(&r, cfg.alpha)?;
            tests.push(AmTestResult {
                am_id: id.clone(),
                level: *lv,
                mean,
                sd,
                ci_upper: ci,
                predictable: is_predictable(ci),
            });
        }
    }
    let predictable: Vec<usize> = (0..k).filter(|&j| tests[j].predictable).collect();
    let focus: Vec<usize> = if predictable.is_empty() { (0..k).collect() } else { predictable };
    let labels: BTreeSet<&String> = runs.iter().flat_map(|r| r.phoneme_ratios.keys()).collect();
    let mut phoneme_scores = Vec::new();
    for label in labels {
        let mut acc = Vec::new();
        for &j in &focus {
            let r: Vec<f64> = runs
                .iter()
                .filter_map(|run| run.phoneme_ratios.get(label).map(|v| v[j]))
                .filter(|x| x.is_finite())
                .collect();
            if r.len() >= 2 {
                acc.push(1.0 - ci_upper(&r, cfg.alpha)?);
            }
        }
        if !acc.is_empty() {
            phoneme_scores.push((label.clone(), acc.iter().sum::<f64>() / acc.len() as f64));
        }
    }
    Ok(HarnessResult {
        am_ids: am_ids.to_vec(),
        levels: cfg.levels.clone(),
        runs,
        tests,
        phoneme_scores,
    })
}
