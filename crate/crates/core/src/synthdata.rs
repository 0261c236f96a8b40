//! Synthetic paired dataset with planted voice-to-AM dependence.
//!
//! Faces are a template plus a linear combination of compact-support
//! deformation fields. Every canonical landmark owns three fields (one per
//! axis) that move it and nothing else among the landmarks, so AMs built
//! from disjoint landmark sets are independent. Remaining fields are
//! centred away from landmarks and only change the surface.
//!
//! Voice features are `F x 64` arrays. For each planted AM a band of
//! four bins carries `gain * (rho * z + sqrt(1 - rho^2) * s / rms(s) * u)`
//! where `z` is the standardised AM, `u` a per-recording Gaussian and `s`
//! the speaker's noise level, so `rho` is the population correlation.
//! The top four bins carry `ln s`, a voice-quality cue from which the
//! estimator can learn its uncertainty; the remaining bins carry a
//! face-independent spectral envelope. Frame noise is the same for every
//! speaker so that feature magnitude does not reveal `s`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Normal, StandardNormal, UnitSphere, Distribution};
use rayon::prelude::*;

use crate::dataset::{Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::estimator::VoiceRecording;
use crate::features::{write_feature_cache, write_wav, MelSpectrogram, Waveform, CANONICAL_RATE};
use crate::geometry::{
    canonical_definitions, eval_resolved, resolve_all, template_landmark_positions, write_am_definitions,
    write_landmarks, write_obj, AmDefinition, AmVector, LandmarkMap, Mesh, Point,
};
use crate::rng::{rng_from, stream};

pub const TOPOLOGY: &str = "voxface-synth";
/// Mel bins carrying one planted AM.
pub const BAND: usize = 4;
const N_MELS: usize = 64;
const LANDMARK_RADIUS_MM: f64 = 25.0;
const SURFACE_RADIUS_MM: f64 = 30.0;
const HOP: f64 = 0.01;
/// Log-mel level of the planted bands before the signal is added.
const PLANTED_BASE: f64 = -4.0;
const WINDOW_S: f64 = 0.025;
/// Top bins carry the log noise level as a voice-quality cue.
const QUALITY_START: usize = N_MELS - BAND;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedAm {
    pub am_id: String,
    /// Signal strength in `[0, 1]`.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub vertices: usize,
    pub latent_dim: usize,
    pub planted: Vec<PlantedAm>,
    /// Standard deviation (mm) of each deformation field's peak displacement.
    pub deformation_mm: f64,
    /// I.i.d. per-vertex noise added to every mesh (mm).
    pub mesh_noise_mm: f64,
    /// Gain of the planted signal in feature units.
    pub signal_gain: f64,
    /// Frame-level feature noise.
    pub frame_noise: f64,
    /// Speaker noise levels are `exp(U(-spread, spread))`.
    pub noise_spread: f64,
    /// Standard deviation of the speaker spectral-envelope coefficients.
    pub envelope_scale: f64,
    pub recordings_per_speaker: usize,
    pub frames_per_recording: usize,
    pub waveform_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 400,
            vertices: 500,
            latent_dim: 96,
            planted: ["nose_width", "mouth_width", "bigonial_width", "head_width"]
                .iter()
                .map(|id| PlantedAm {
                    am_id: id.to_string(),
                    rho: 0.9,
                })
                .collect(),
            deformation_mm: 2.5,
            mesh_noise_mm: 0.0,
            signal_gain: 1.0,
            frame_noise: 1.5,
            noise_spread: 1.5,
            envelope_scale: 1.0,
            recordings_per_speaker: 2,
            frames_per_recording: 48,
            waveform_samples: 2048,
            seed: 0,
        }
    }
}

/// One row of the ground-truth manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRecord {
    pub am_id: String,
    pub rho: f64,
    /// First mel bin of the carrying band.
    pub band_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeaker {
    pub id: String,
    pub noise_level: f64,
    pub latent: Vec<f64>,
    pub mesh: Mesh,
    /// AMs in measurement units, in definition order.
    pub ams: AmVector,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub definitions: Vec<AmDefinition>,
    pub landmarks: LandmarkMap,
    pub template: Mesh,
    /// True deformation fields, `3T x latent_dim`, scaled to mm.
    pub fields: DMatrix<f64>,
    pub speakers: Vec<SynthSpeaker>,
    /// Features are raw (not normalised); waveforms are attached.
    pub recordings: Vec<VoiceRecording>,
    pub splits: SplitAssignment,
    pub manifest: Vec<PlantedRecord>,
}

impl SynthConfig {
    pub fn validate(&self, defs: &[AmDefinition]) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_speakers < 20 {
            return Err(Error::NotEnoughSamples {
                needed: 20,
                got: self.n_speakers,
                context: "synthetic speakers (7/1/1/1 splits degenerate below 20)",
            });
        }
        let n_landmarks = template_landmark_positions().len();
        if self.vertices < n_landmarks {
            return bad(format!("need at least {n_landmarks} vertices, got {}", self.vertices));
        }
        if self.latent_dim < 3 * n_landmarks {
            return bad(format!(
                "latent_dim must be at least {} (three fields per landmark)",
                3 * n_landmarks
            ));
        }
        if self.planted.len() * BAND > N_MELS / 2 {
            return bad(format!("too many planted AMs ({})", self.planted.len()));
        }
        for (i, p) in self.planted.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.rho) {
                return bad(format!("rho for `{}` must lie in [0, 1]", p.am_id));
            }
            if !defs.iter().any(|d| d.id == p.am_id) {
                return bad(format!("planted AM `{}` is not a defined AM", p.am_id));
            }
            if self.planted[..i].iter().any(|q| q.am_id == p.am_id) {
                return bad(format!("planted AM `{}` listed twice", p.am_id));
            }
        }
        if self.recordings_per_speaker == 0 || self.frames_per_recording == 0 {
            return bad("recordings and frames per recording must be positive".into());
        }
        if self.waveform_samples < crate::phonatory::WINDOW {
            return bad(format!("waveform_samples must be at least {}", crate::phonatory::WINDOW));
        }
        if self.deformation_mm < 0.0 || self.mesh_noise_mm < 0.0 || self.frame_noise < 0.0 || self.noise_spread < 0.0 || self.envelope_scale < 0.0 {
            return bad("noise and amplitude settings must be non-negative".into());
        }
        Ok(())
    }
}

fn band_start(p: usize, n_planted: usize) -> usize {
    (p + 1) * N_MELS / (n_planted + 1) - BAND / 2
}

/// C2 Wendland function, 1 at the centre and 0 beyond `r = 1`.
fn wendland(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (1.0 - r).powi(4) * (4.0 * r + 1.0)
    }
}

fn build_template(cfg: &SynthConfig) -> (Mesh, LandmarkMap, DMatrix<f64>) {
    let mut rng = rng_from(cfg.seed, &[stream::SYNTH_TEMPLATE]);
    let lms = template_landmark_positions();
    let n_lm = lms.len();
    let mut verts: Vec<Point> = lms.iter().map(|(_, p)| *p).collect();
    let landmarks = LandmarkMap::from_pairs(lms.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)))
        .expect("template landmark names are unique");
    // Remaining vertices on an ellipsoid around the face.
    let centre = Point::new(0.0, -20.0, 10.0);
    let radii = Point::new(80.0, 105.0, 85.0);
    while verts.len() < cfg.vertices {
        let d: [f64; 3] = UnitSphere.sample(&mut rng);
        verts.push(centre + Point::new(d[0] * radii.x, d[1] * radii.y, d[2] * radii.z));
    }
    let t = verts.len();

    let mut fields = DMatrix::zeros(3 * t, cfg.latent_dim);
    let nearest = |c: &Point, skip: Option<usize>| {
        lms.iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, (_, p))| (p - c).norm())
            .fold(f64::INFINITY, f64::min)
    };
    let mut col = 0;
    for (l, (_, c)) in lms.iter().enumerate() {
        let radius = LANDMARK_RADIUS_MM.min(0.9 * nearest(c, Some(l)));
        for axis in 0..3 {
            for (v, p) in verts.iter().enumerate() {
                fields[(3 * v + axis, col)] = wendland((p - c).norm() / radius);
            }
            col += 1;
        }
    }
    while col < cfg.latent_dim {
        let v0 = rng.gen_range(n_lm..t.max(n_lm + 1)).min(t - 1);
        let c = verts[v0];
        let radius = SURFACE_RADIUS_MM.min(0.9 * nearest(&c, None));
        if v0 < n_lm || radius < 2.0 {
            // no room away from landmarks: use a uniform shift of non-landmark vertices
            let d: [f64; 3] = UnitSphere.sample(&mut rng);
            for v in n_lm..t {
                for a in 0..3 {
                    fields[(3 * v + a, col)] = d[a] * 0.5;
                }
            }
            col += 1;
            continue;
        }
        let d: [f64; 3] = UnitSphere.sample(&mut rng);
        for (v, p) in verts.iter().enumerate() {
            let w = wendland((p - c).norm() / radius);
            for a in 0..3 {
                fields[(3 * v + a, col)] = d[a] * w;
            }
        }
        col += 1;
    }
    fields *= cfg.deformation_mm;
    (Mesh::new(verts, TOPOLOGY).expect("finite template"), landmarks, fields)
}

fn speaker_ids(n: usize) -> Vec<String> {
    let width = (n.max(2) - 1).to_string().len().max(4);
    (0..n).map(|i| format!("spk{i:0width$}")).collect()
}

/// Generate the full dataset with the canonical AM list.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    generate_with(cfg, canonical_definitions())
}

pub fn generate_with(cfg: &SynthConfig, definitions: Vec<AmDefinition>) -> Result<SynthDataset> {
    cfg.validate(&definitions)?;
    let (template, landmarks, fields) = build_template(cfg);
    let resolved = resolve_all(&landmarks, &definitions)?;
    let ids = speaker_ids(cfg.n_speakers);
    let t = template.len();
    let base: Vec<f64> = template.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect();

    let speakers = ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let mut rng = rng_from(cfg.seed, &[stream::SYNTH_FACE, i as u64]);
            let latent: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let z = nalgebra::DVector::from_column_slice(&latent);
            let disp = &fields * z;
            let noise = Normal::new(0.0, cfg.mesh_noise_mm.max(f64::MIN_POSITIVE)).unwrap();
            let flat: Vec<f64> = base
                .iter()
                .zip(disp.iter())
                .map(|(b, d)| b + d + if cfg.mesh_noise_mm > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect();
            let ams = eval_resolved(flat.as_slice(), &resolved)?;
            let mesh = Mesh::new(
                flat.chunks_exact(3).map(|c| Point::new(c[0], c[1], c[2])).collect(),
                TOPOLOGY,
            )?;
            let u: f64 = rng.gen_range(-1.0..=1.0);
            Ok(SynthSpeaker {
                id: id.clone(),
                noise_level: (cfg.noise_spread * u).exp(),
                latent,
                mesh,
                ams,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(speakers.iter().all(|s| s.mesh.len() == t));

    // standardise planted AMs over the generated population
    let planted_idx: Vec<usize> = cfg
        .planted
        .iter()
        .map(|p| definitions.iter().position(|d| d.id == p.am_id).unwrap())
        .collect();
    let n = speakers.len() as f64;
    let stats: Vec<(f64, f64)> = planted_idx
        .iter()
        .map(|&k| {
            let m = speakers.iter().map(|s| s.ams.values[k]).sum::<f64>() / n;
            let v = speakers.iter().map(|s| (s.ams.values[k] - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt().max(1e-12))
        })
        .collect();
    let manifest: Vec<PlantedRecord> = cfg
        .planted
        .iter()
        .enumerate()
        .map(|(p, a)| PlantedRecord {
            am_id: a.am_id.clone(),
            rho: a.rho,
            band_start: band_start(p, cfg.planted.len()),
        })
        .collect();

    // E[s^2] for s = exp(spread * U(-1, 1)), so rho stays the population correlation
    let noise_rms = if cfg.noise_spread > 0.0 {
        ((2.0 * cfg.noise_spread).sinh() / (2.0 * cfg.noise_spread)).sqrt()
    } else {
        1.0
    };
    let recordings = speakers
        .par_iter()
        .enumerate()
        .map(|(i, spk)| {
            let mut rng = rng_from(cfg.seed, &[stream::SYNTH_VOICE, i as u64]);
            let z: Vec<f64> = planted_idx
                .iter()
                .zip(&stats)
                .map(|(&k, (m, s))| (spk.ams.values[k] - m) / s)
                .collect();
            voice_for_speaker(cfg, spk, &z, noise_rms, &manifest, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let splits = SplitAssignment::random(&ids, &mut rng_from(cfg.seed, &[stream::SYNTH_SPLIT]))?;
    Ok(SynthDataset {
        config: cfg.clone(),
        definitions,
        landmarks,
        template,
        fields,
        speakers,
        recordings,
        splits,
        manifest,
    })
}

fn voice_for_speaker<R: Rng>(
    cfg: &SynthConfig,
    spk: &SynthSpeaker,
    z: &[f64],
    noise_rms: f64,
    manifest: &[PlantedRecord],
    rng: &mut R,
) -> Result<Vec<VoiceRecording>> {
    // speaker spectral envelope, independent of the face
    let coeffs: Vec<f64> = (0..5).map(|_| cfg.envelope_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let envelope: Vec<f64> = (0..N_MELS)
        .map(|c| {
            let x = c as f64 / (N_MELS - 1) as f64;
            PLANTED_BASE + coeffs
                .iter()
                .enumerate()
                .map(|(j, a)| a * (std::f64::consts::PI * j as f64 * x).cos())
                .sum::<f64>()
        })
        .collect();
    let wave_env: Vec<f64> = (0..4).map(|_| 0.1 * (0.4 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let s = spk.noise_level;
    (0..cfg.recordings_per_speaker)
        .map(|r| {
            // the face-independent part is redrawn per recording
            let planted: Vec<f64> = z
                .iter()
                .zip(&cfg.planted)
                .map(|(z, p)| {
                    let u: f64 = rng.sample(StandardNormal);
                    p.rho * z + (1.0 - p.rho * p.rho).sqrt() * s / noise_rms * u
                })
                .collect();
            let mut mean = envelope.clone();
            for m in &mut mean[QUALITY_START..] {
                *m = PLANTED_BASE + s.ln();
            }
            for (rec, v) in manifest.iter().zip(&planted) {
                for m in &mut mean[rec.band_start..rec.band_start + BAND] {
                    *m = PLANTED_BASE + cfg.signal_gain * v;
                }
            }
            let mut data = Vec::with_capacity(cfg.frames_per_recording * N_MELS);
            for _ in 0..cfg.frames_per_recording {
                for m in &mean {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(m + cfg.frame_noise * e);
                }
            }
            let features = MelSpectrogram::new(data, N_MELS, HOP, WINDOW_S)?;
            let waveform = synth_waveform(cfg.waveform_samples, &planted, &wave_env, s, rng);
            Ok(VoiceRecording {
                id: format!("{}_r{r}", spk.id),
                speaker: spk.id.clone(),
                features,
                waveform: Some(waveform),
            })
        })
        .collect()
}

/// Sum of sinusoids: one partial per planted AM with amplitude driven by the
/// planted value, four speaker-envelope partials, and noise.
fn synth_waveform<R: Rng>(n: usize, planted: &[f64], env: &[f64], s: f64, rng: &mut R) -> Vec<f64> {
    let period = crate::phonatory::WINDOW as f64;
    let mut partials: Vec<(f64, f64)> = planted
        .iter()
        .enumerate()
        .map(|(p, v)| ((3 + 4 * p) as f64, 0.15 * (0.5 * v).exp()))
        .collect();
    partials.extend(env.iter().enumerate().map(|(j, a)| ((5 + 4 * j) as f64, *a)));
    let phases: Vec<f64> = partials.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / period;
            partials
                .iter()
                .zip(&phases)
                .map(|((k, a), ph)| a * (std::f64::consts::TAU * k * t + ph).sin())
                .sum::<f64>()
                + 0.02 * s * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.95 {
        out.iter_mut().for_each(|x| *x *= 0.95 / peak);
    }
    out
}

/// AMs that the generator planted, with their strengths.
pub fn ground_truth_manifest(ds: &SynthDataset) -> &[PlantedRecord] {
    &ds.manifest
}

impl SynthDataset {
    pub fn am_ids(&self) -> Vec<String> {
        self.definitions.iter().map(|d| d.id.clone()).collect()
    }

    pub fn speaker(&self, id: &str) -> Option<&SynthSpeaker> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn speakers_in(&self, split: Split) -> Vec<&SynthSpeaker> {
        self.speakers
            .iter()
            .filter(|s| self.splits.of(&s.id) == Some(split))
            .collect()
    }

    pub fn speaker_ams(&self) -> std::collections::BTreeMap<String, AmVector> {
        self.speakers.iter().map(|s| (s.id.clone(), s.ams.clone())).collect()
    }

    /// Normalised training-ready view with this dataset's splits.
    pub fn prepare(&self) -> Result<crate::dataset::PreparedData> {
        crate::dataset::PreparedData::prepare(&self.am_ids(), &self.recordings, &self.speaker_ams(), &self.splits)
    }

    pub fn is_planted(&self, am_id: &str) -> bool {
        self.manifest.iter().any(|r| r.am_id == am_id)
    }

    /// Write every artifact consumed by the pipeline stages.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        mkdir(&dir.join("meshes"))?;
        write_obj(&dir.join("template.obj"), &self.template)?;
        write_landmarks(&dir.join("landmarks.txt"), &self.landmarks)?;
        write_am_definitions(&dir.join("ams.txt"), &self.definitions)?;
        for s in &self.speakers {
            write_obj(&dir.join("meshes").join(format!("{}.obj", s.id)), &s.mesh)?;
        }
        let mut rec_rows = String::from("recording,speaker,features,audio\n");
        for r in &self.recordings {
            let feat = format!("features/{}.mel", r.id);
            let audio = format!("audio/{}.wav", r.id);
            write_feature_cache(&dir.join(&feat), &r.features)?;
            if let Some(w) = &r.waveform {
                write_wav(&dir.join(&audio), &Waveform::new(w.clone(), CANONICAL_RATE)?)?;
            }
            rec_rows.push_str(&format!("{},{},{feat},{audio}\n", r.id, r.speaker));
        }
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("recordings.csv", &rec_rows)?;
        self.splits.write(&dir.join("splits.csv"))?;
        let mut planted = String::from("am_id,rho,band_start,band_end\n");
        for r in &self.manifest {
            planted.push_str(&format!("{},{},{},{}\n", r.am_id, r.rho, r.band_start, r.band_start + BAND));
        }
        write("planted.csv", &planted)
    }
}
