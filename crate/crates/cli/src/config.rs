//! Pipeline configuration: built-in defaults, overlaid by a TOML file, then
//! by `VOXFACE_*` environment variables and command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxface::estimator::{PhonatoryConfig, TrainConfig};
use voxface::stats::{FilterLevel, HarnessConfig};
use voxface::synthdata::{PlantedAm, SynthConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub features: Features,
    pub synth: Synth,
    pub train: Train,
    pub phonatory: Phonatory,
    pub harness: Harness,
    pub reconstruction: Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory: recordings.csv, splits.csv, meshes/, landmarks.txt, ams.txt.
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub topology: String,
    /// Optional `recording,start_frame,end_frame,label` phoneme annotations.
    pub phonemes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub sample_rate: u32,
    pub window: f64,
    pub hop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Planted {
    pub am_id: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synth {
    pub n_speakers: usize,
    pub vertices: usize,
    pub latent_dim: usize,
    pub planted: Vec<Planted>,
    pub deformation_mm: f64,
    pub mesh_noise_mm: f64,
    pub signal_gain: f64,
    pub frame_noise: f64,
    pub noise_spread: f64,
    pub envelope_scale: f64,
    pub recordings_per_speaker: usize,
    pub frames_per_recording: usize,
    pub waveform_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub eval_frames: usize,
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phonatory {
    pub enabled: bool,
    pub gamma: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub pretrain_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Harness {
    pub runs: usize,
    pub alpha: f64,
    pub levels: Vec<f64>,
    pub resample_splits: bool,
    /// Training length per harness run; 0 uses `train.iterations`.
    pub iterations: usize,
    /// Learning rate per harness run; 0 uses `train.learning_rate`.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reconstruction {
    pub lambda: f64,
    pub top_ams: usize,
    /// Basis dimension; 0 picks the default for the training-set size.
    pub basis_dim: usize,
    pub confidence_weighting: bool,
    pub max_iter: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            features: Features::default(),
            synth: Synth::default(),
            train: Train::default(),
            phonatory: Phonatory::default(),
            harness: Harness::default(),
            reconstruction: Reconstruction::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            out_dir: "out".into(),
            topology: voxface::synthdata::TOPOLOGY.into(),
            phonemes: None,
        }
    }
}

impl Default for Features {
    fn default() -> Self {
        let m = voxface::features::MelConfig::default();
        Self {
            sample_rate: m.sample_rate,
            window: m.window,
            hop: m.hop,
        }
    }
}

impl Default for Planted {
    fn default() -> Self {
        Self {
            am_id: String::new(),
            rho: 0.9,
        }
    }
}

impl Default for Synth {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_speakers: s.n_speakers,
            vertices: s.vertices,
            latent_dim: s.latent_dim,
            planted: s
                .planted
                .into_iter()
                .map(|p| Planted {
                    am_id: p.am_id,
                    rho: p.rho,
                })
                .collect(),
            deformation_mm: s.deformation_mm,
            mesh_noise_mm: s.mesh_noise_mm,
            signal_gain: s.signal_gain,
            frame_noise: s.frame_noise,
            noise_spread: s.noise_spread,
            envelope_scale: s.envelope_scale,
            recordings_per_speaker: s.recordings_per_speaker,
            frames_per_recording: s.frames_per_recording,
            waveform_samples: s.waveform_samples,
        }
    }
}

impl Default for Train {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup: t.warmup,
            min_frames: t.min_frames,
            max_frames: t.max_frames,
            eval_frames: t.eval_frames,
            eval_every: t.eval_every,
            grad_clip: t.grad_clip.unwrap_or(0.0),
        }
    }
}

impl Default for Phonatory {
    fn default() -> Self {
        let p = PhonatoryConfig::default();
        Self {
            enabled: false,
            gamma: p.gamma,
            steps: p.steps,
            beta_start: p.beta_start,
            beta_end: p.beta_end,
            pretrain_iterations: p.pretrain_iterations,
        }
    }
}

impl Default for Harness {
    fn default() -> Self {
        let h = HarnessConfig::default();
        Self {
            runs: h.runs,
            alpha: h.alpha,
            levels: h.levels.iter().map(|l| l.0).collect(),
            resample_splits: h.resample_splits,
            iterations: 0,
            learning_rate: 0.0,
        }
    }
}

impl Default for Reconstruction {
    fn default() -> Self {
        Self {
            lambda: voxface::reconstruction::DEFAULT_LAMBDA,
            top_ams: voxface::reconstruction::DEFAULT_TOP_AMS,
            basis_dim: 0,
            confidence_weighting: false,
            max_iter: voxface::reconstruction::DEFAULT_MAX_ITER,
        }
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub phonatory: Option<bool>,
    pub gamma: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(d) = &overrides.data_root {
            cfg.paths.data_root = d.clone();
        }
        if let Some(d) = &overrides.out_dir {
            cfg.paths.out_dir = d.clone();
        }
        if let Some(p) = overrides.phonatory {
            cfg.phonatory.enabled = p;
        }
        if let Some(g) = overrides.gamma {
            cfg.phonatory.gamma = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.harness.alpha > 0.0 && self.harness.alpha < 0.5) {
            return bad(format!("harness.alpha must lie in (0, 0.5), got {}", self.harness.alpha));
        }
        if self.harness.runs < 2 {
            return bad("harness.runs must be at least 2".into());
        }
        if self.harness.levels.is_empty() || self.harness.levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return bad("harness.levels must be fractions in (0, 1]".into());
        }
        if !(self.harness.learning_rate >= 0.0) {
            return bad("harness.learning_rate must be non-negative".into());
        }
        if !(self.reconstruction.lambda >= 0.0) {
            return bad("reconstruction.lambda must be non-negative".into());
        }
        if !(self.phonatory.gamma >= 0.0) {
            return bad("phonatory.gamma must be non-negative".into());
        }
        self.train_config(false).validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialisation, ignoring paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let text = toml::to_string(&c).expect("config serialises");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_speakers: s.n_speakers,
            vertices: s.vertices,
            latent_dim: s.latent_dim,
            planted: s
                .planted
                .iter()
                .map(|p| PlantedAm {
                    am_id: p.am_id.clone(),
                    rho: p.rho,
                })
                .collect(),
            deformation_mm: s.deformation_mm,
            mesh_noise_mm: s.mesh_noise_mm,
            signal_gain: s.signal_gain,
            frame_noise: s.frame_noise,
            noise_spread: s.noise_spread,
            envelope_scale: s.envelope_scale,
            recordings_per_speaker: s.recordings_per_speaker,
            frames_per_recording: s.frames_per_recording,
            waveform_samples: s.waveform_samples,
            seed: self.seed,
        }
    }

    /// Training configuration; `harness` applies the harness length override.
    pub fn train_config(&self, harness: bool) -> TrainConfig {
        let t = &self.train;
        let iterations = if harness && self.harness.iterations > 0 {
            self.harness.iterations
        } else {
            t.iterations
        };
        let scale = |n: usize| if iterations == t.iterations { n } else { n * iterations / t.iterations.max(1) };
        TrainConfig {
            iterations,
            batch_size: t.batch_size,
            learning_rate: if harness && self.harness.learning_rate > 0.0 {
                self.harness.learning_rate
            } else {
                t.learning_rate
            },
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup: scale(t.warmup),
            min_frames: t.min_frames,
            max_frames: t.max_frames,
            eval_frames: t.eval_frames,
            eval_every: scale(t.eval_every),
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            seed: self.seed,
            phonatory: self.phonatory.enabled.then(|| PhonatoryConfig {
                gamma: self.phonatory.gamma,
                steps: self.phonatory.steps,
                beta_start: self.phonatory.beta_start,
                beta_end: self.phonatory.beta_end,
                pretrain_iterations: self.phonatory.pretrain_iterations,
            }),
        }
    }

    pub fn harness_config(&self) -> HarnessConfig {
        HarnessConfig {
            runs: self.harness.runs,
            alpha: self.harness.alpha,
            levels: self.harness.levels.iter().map(|l| FilterLevel(*l)).collect(),
            train: self.train_config(true),
            master_seed: self.seed,
            resample_splits: self.harness.resample_splits,
            run_seeds: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[harness]\nruns = 10\n[phonatory]\ngamma = 0.3\n").unwrap();
        let c = PipelineConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.harness.runs, c.phonatory.gamma), (5, 10, 0.3));
        assert_eq!(c.train, Train::default());
        let o = Overrides {
            seed: Some(9),
            gamma: Some(0.0),
            ..Overrides::default()
        };
        let c = PipelineConfig::load(Some(&p), &o).unwrap();
        assert_eq!((c.seed, c.phonatory.gamma), (9, 0.0));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[harness]\nrunz = 10\n").unwrap();
        assert!(PipelineConfig::load(Some(&p), &Overrides::default()).is_err());
        std::fs::write(&p, "[harness]\nalpha = 0.5\n").unwrap();
        assert!(PipelineConfig::load(Some(&p), &Overrides::default()).is_err());
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back: PipelineConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn harness_length_override_scales_schedule() {
        let mut c = PipelineConfig::default();
        c.harness.iterations = 500;
        let t = c.train_config(true);
        assert_eq!((t.iterations, t.warmup, t.eval_every), (500, 20, 25));
        assert_eq!(c.train_config(false).iterations, 5000);
    }
}
