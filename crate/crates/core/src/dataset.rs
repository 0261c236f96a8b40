//! Speaker-disjoint splits and their manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::{Labeled, VoiceRecording};
use crate::features::MelNormalizer;
use crate::geometry::{AmNormalization, AmVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    /// Training (D_t).
    Train,
    /// Model selection (D_v1).
    Select,
    /// Predictability testing (D_v2).
    Test,
    /// Held-out evaluation (D_e).
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Select, Split::Test, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Select => "select",
            Split::Test => "test",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, select, test or eval)")))
    }
}

/// Speaker id to split, ordered by speaker id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitAssignment {
    pub speakers: BTreeMap<String, Split>,
}

impl SplitAssignment {
    /// Shuffle speakers and cut 7/1/1/1. Needs at least 20 speakers so every
    /// split holds at least two.
    pub fn random<R: Rng + ?Sized>(speakers: &[String], rng: &mut R) -> Result<Self> {
        if speakers.len() < 20 {
            return Err(Error::NotEnoughSamples {
                needed: 20,
                got: speakers.len(),
                context: "speakers for a 7/1/1/1 split",
            });
        }
        let unique: BTreeSet<&String> = speakers.iter().collect();
        if unique.len() != speakers.len() {
            return Err(Error::Config("duplicate speaker ids".into()));
        }
        let mut order: Vec<&String> = unique.into_iter().collect();
        order.shuffle(rng);
        let n = order.len();
        let n_train = n * 7 / 10;
        let n_each = (n - n_train) / 3;
        let mut out = BTreeMap::new();
        for (i, s) in order.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_each {
                Split::Select
            } else if i < n_train + 2 * n_each {
                Split::Test
            } else {
                Split::Eval
            };
            out.insert(s.clone(), split);
        }
        Ok(Self { speakers: out })
    }

    pub fn of(&self, speaker: &str) -> Option<Split> {
        self.speakers.get(speaker).copied()
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.speakers
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["speaker", "split"]).map_err(|e| csv_err(path, e))?;
        for (spk, split) in &self.speakers {
            w.write_record([spk.as_str(), split.name()]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let mut speakers = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let parse_err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg,
            };
            if rec.len() != 2 {
                return Err(parse_err("expected `speaker,split`".into()));
            }
            let split: Split = rec[1].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if speakers.insert(rec[0].to_string(), split).is_some() {
                return Err(parse_err(format!("speaker `{}` listed twice", &rec[0])));
            }
        }
        Ok(Self { speakers })
    }
}

/// Recordings with training-fitted normalisation applied to features and
/// targets, ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub am_ids: Vec<String>,
    pub recordings: Vec<VoiceRecording>,
    pub splits: Vec<Split>,
    /// Normalised AM vector of each recording's speaker.
    pub targets: Vec<Vec<f64>>,
    pub mel_norm: MelNormalizer,
    pub am_norm: AmNormalization,
}

impl PreparedData {
    /// `speaker_ams` maps speaker id to raw AMs; recordings of speakers
    /// without a split or without AMs are an error.
    pub fn prepare(
        am_ids: &[String],
        recordings: &[VoiceRecording],
        speaker_ams: &BTreeMap<String, AmVector>,
        assignment: &SplitAssignment,
    ) -> Result<Self> {
        let mut splits = Vec::with_capacity(recordings.len());
        for r in recordings {
            let split = assignment
                .of(&r.speaker)
                .ok_or_else(|| Error::Config(format!("speaker `{}` has no split", r.speaker)))?;
            if !speaker_ams.contains_key(&r.speaker) {
                return Err(Error::Config(format!("speaker `{}` has no AMs", r.speaker)));
            }
            splits.push(split);
        }
        let train_specs = recordings
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(r, _)| &r.features);
        let mel_norm = MelNormalizer::fit(train_specs)?;
        let train_ams: Vec<AmVector> = assignment
            .members(Split::Train)
            .into_iter()
            .filter_map(|s| speaker_ams.get(s).cloned())
            .collect();
        let am_norm = AmNormalization::fit(am_ids, &train_ams)?;
        let mut normed = Vec::with_capacity(recordings.len());
        let mut targets = Vec::with_capacity(recordings.len());
        for r in recordings {
            let mut r2 = r.clone();
            r2.features = mel_norm.apply(&r.features)?;
            normed.push(r2);
            targets.push(am_norm.apply(&speaker_ams[&r.speaker]).values);
        }
        Ok(Self {
            am_ids: am_ids.to_vec(),
            recordings: normed,
            splits,
            targets,
            mel_norm,
            am_norm,
        })
    }

    pub fn labeled(&self, split: Split) -> Vec<Labeled<'_>> {
        self.indices(split)
            .into_iter()
            .map(|i| Labeled {
                recording: &self.recordings[i],
                target: &self.targets[i],
            })
            .collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.recordings.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn seven_one_one_one() {
        let a = SplitAssignment::random(&ids(400), &mut rng_from(1, &[])).unwrap();
        let counts: Vec<usize> = Split::ALL.iter().map(|s| a.members(*s).len()).collect();
        assert_eq!(counts, vec![280, 40, 40, 40]);
        assert!(SplitAssignment::random(&ids(19), &mut rng_from(1, &[])).is_err());
        let b = SplitAssignment::random(&ids(20), &mut rng_from(1, &[])).unwrap();
        assert!(Split::ALL.iter().all(|s| b.members(*s).len() >= 2));
    }

    #[test]
    fn manifest_roundtrip() {
        let a = SplitAssignment::random(&ids(30), &mut rng_from(2, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.csv");
        a.write(&p).unwrap();
        assert_eq!(SplitAssignment::read(&p).unwrap(), a);
    }
}
