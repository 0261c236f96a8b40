//! Binary checkpoint: trained estimator plus everything needed to apply it.
//!
//! Little-endian; strings and arrays are length-prefixed with `u64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::MelNormalizer;
use crate::geometry::AmNormalization;
use crate::phonatory::{Denoiser, DiffusionSchedule};

use super::network::EstimatorModel;
use super::train::PhonatoryConfig;

const MAGIC: &[u8; 8] = b"VXFCKPT1";

#[derive(Debug, Clone)]
pub struct PhonatoryState {
    pub config: PhonatoryConfig,
    pub denoiser: Denoiser,
}

impl PhonatoryState {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.config.schedule()
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub model: EstimatorModel,
    pub mel_norm: MelNormalizer,
    pub am_norm: AmNormalization,
    pub selected_iteration: usize,
    pub selection_error: f64,
    pub phonatory: Option<PhonatoryState>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated checkpoint")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err("implausible length field".into());
        }
        Ok(n)
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.len()?;
        self.take(n)
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
    fn floats(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn am_ids(&self) -> &[String] {
        &self.am_norm.ids
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.str(&self.config_hash);
        w.u64(self.seed);
        w.bytes(&self.model.architecture_hash());
        w.u64(self.model.n_ams as u64);
        w.floats(&self.model.params);
        w.floats(&self.mel_norm.mean);
        w.floats(&self.mel_norm.std);
        w.u64(self.am_norm.ids.len() as u64);
        self.am_norm.ids.iter().for_each(|id| w.str(id));
        w.floats(&self.am_norm.mean);
        w.floats(&self.am_norm.std);
        w.u64(self.selected_iteration as u64);
        w.f64(self.selection_error);
        match &self.phonatory {
            None => w.u64(0),
            Some(p) => {
                w.u64(1);
                w.f64(p.config.gamma);
                w.u64(p.config.steps as u64);
                w.f64(p.config.beta_start);
                w.f64(p.config.beta_end);
                w.u64(p.config.pretrain_iterations as u64);
                w.bytes(&p.denoiser.architecture_hash());
                w.floats(&p.denoiser.params);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a voxface checkpoint".into());
        }
        let mut r = Reader { buf: bytes, pos: MAGIC.len() };
        let config_hash = r.str()?;
        let seed = r.u64()?;
        let arch = r.bytes()?.to_vec();
        let n_ams = r.len()?;
        let model = EstimatorModel::from_params(n_ams, r.floats()?).map_err(|e| e.to_string())?;
        if arch != model.architecture_hash() {
            return Err("estimator architecture hash mismatch".into());
        }
        let mel_norm = MelNormalizer {
            mean: r.floats()?,
            std: r.floats()?,
        };
        let n_ids = r.len()?;
        let ids = (0..n_ids).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let am_norm = AmNormalization {
            ids,
            mean: r.floats()?,
            std: r.floats()?,
        };
        if am_norm.ids.len() != n_ams || am_norm.mean.len() != n_ams || am_norm.std.len() != n_ams {
            return Err("AM normalisation does not match the model".into());
        }
        let selected_iteration = r.u64()? as usize;
        let selection_error = r.f64()?;
        let phonatory = match r.u64()? {
            0 => None,
            1 => {
                let config = PhonatoryConfig {
                    gamma: r.f64()?,
                    steps: r.u64()? as usize,
                    beta_start: r.f64()?,
                    beta_end: r.f64()?,
                    pretrain_iterations: r.u64()? as usize,
                };
                let arch = r.bytes()?.to_vec();
                let denoiser = Denoiser::from_params(r.floats()?).map_err(|e| e.to_string())?;
                if arch != denoiser.architecture_hash() {
                    return Err("denoiser architecture hash mismatch".into());
                }
                Some(PhonatoryState { config, denoiser })
            }
            t => return Err(format!("unknown phonatory tag {t}")),
        };
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(Checkpoint {
            config_hash,
            seed,
            model,
            mel_norm,
            am_norm,
            selected_iteration,
            selection_error,
            phonatory,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}
