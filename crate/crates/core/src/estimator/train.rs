use std::collections::BTreeMap;

use log::debug;
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{segment, SegmentMode};
use crate::nn::{l2_norm, Sgd};
use crate::phonatory::{check_pairing, normalize_window, Denoiser, DiffusionSchedule, WINDOW};
use crate::rng::{rng_from, stream};

use super::network::{EstimatorModel, CODE_DIM};
use super::predict::{mean_normalized_error, predict_recording, Labeled};

#[derive(Debug, Clone, PartialEq)]
pub struct PhonatoryConfig {
    pub gamma: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Iterations of diffusion-only training of encoder and denoiser before
    /// the joint phase.
    pub pretrain_iterations: usize,
}

impl Default for PhonatoryConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            steps: DiffusionSchedule::DEFAULT_STEPS,
            beta_start: DiffusionSchedule::DEFAULT_BETA_START,
            beta_end: DiffusionSchedule::DEFAULT_BETA_END,
            pretrain_iterations: 0,
        }
    }
}

impl PhonatoryConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Leading iterations trained with the plain squared error, variance frozen.
    pub warmup: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Segment length used when tiling recordings for evaluation.
    pub eval_frames: usize,
    /// Model selection interval on the selection split; 0 selects only the final model.
    pub eval_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub phonatory: Option<PhonatoryConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup: 200,
            min_frames: 20,
            max_frames: 40,
            eval_frames: 40,
            eval_every: 250,
            grad_clip: Some(5.0),
            seed: 0,
            phonatory: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive, momentum in [0,1), weight decay >= 0");
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames || self.eval_frames < self.min_frames {
            return bad("segment frame range must satisfy 0 < min <= max and eval >= min");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        if let Some(p) = &self.phonatory {
            if !(p.gamma >= 0.0) {
                return bad("gamma must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EstimatorModel,
    pub denoiser: Option<Denoiser>,
    /// Iteration whose parameters were kept (after that many updates).
    pub selected_iteration: usize,
    pub selection_error: f64,
    /// Estimator batch loss per iteration.
    pub loss_trace: Vec<f64>,
}

struct Batch {
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    speakers: Vec<String>,
}

fn draw_batch<R: Rng>(data: &[Labeled], cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let mode = SegmentMode::TrainRandom {
        min_frames: cfg.min_frames,
        max_frames: cfg.max_frames,
    };
    let mut b = Batch {
        features: Vec::with_capacity(cfg.batch_size),
        targets: Vec::with_capacity(cfg.batch_size),
        speakers: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let item = &data[rng.gen_range(0..data.len())];
        let rec = item.recording;
        let seg = segment(&rec.features, &rec.id, &mode, rng)?;
        let span = seg.segments[0].span;
        let n = rec.features.n_mels;
        b.features.push(rec.features.data[span.start * n..span.end * n].to_vec());
        b.targets.push(item.target.to_vec());
        b.speakers.push(rec.speaker.clone());
    }
    Ok(b)
}

/// Clean waveform windows for the diffusion constraint: one window per batch
/// item, drawn from a recording of the same speaker.
fn draw_windows<R: Rng>(
    batch: &Batch,
    by_speaker: &BTreeMap<&str, Vec<(&str, &[f64])>>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.speakers.len() * WINDOW);
    for spk in &batch.speakers {
        let pool = by_speaker.get(spk.as_str()).ok_or_else(|| {
            Error::Config(format!("speaker `{spk}` has no waveform for the diffusion constraint"))
        })?;
        let (owner, wave) = pool[rng.gen_range(0..pool.len())];
        check_pairing(spk, owner)?;
        let start = rng.gen_range(0..=wave.len() - WINDOW);
        out.extend(normalize_window(&wave[start..start + WINDOW]));
    }
    Ok(out)
}

fn clip(grads: &mut [&mut [f64]], max_norm: Option<f64>) {
    let Some(max) = max_norm else { return };
    let norm = grads.iter().map(|g| l2_norm(g).powi(2)).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Per-iteration estimator loss and gradients over a batch.
fn estimator_step(
    model: &EstimatorModel,
    batch: &Batch,
    warm: bool,
    d_codes: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let k = model.n_ams;
    let scale = 1.0 / (batch.features.len() * k) as f64;
    let mut total = 0.0;
    let mut codes = Vec::with_capacity(batch.features.len() * CODE_DIM);
    for (i, (x, t)) in batch.features.iter().zip(&batch.targets).enumerate() {
        let (pred, cache) = model.forward(x, 1)?;
        let mut dm = vec![0.0; k];
        let mut dv = vec![0.0; k];
        for j in 0..k {
            let r = pred.means[j] - t[j];
            if warm {
                total += r * r;
                dm[j] = 2.0 * r * scale;
            } else {
                let g = pred.variances[j];
                total += r * r / g + g.ln();
                dm[j] = 2.0 * r / g * scale;
                dv[j] = (1.0 / g - r * r / (g * g)) * scale;
            }
        }
        let extra = d_codes.map(|d| &d[i * CODE_DIM..(i + 1) * CODE_DIM]);
        model.backward(&cache, &dm, &dv, extra, grad);
        codes.extend_from_slice(&pred.code);
    }
    Ok((total * scale, codes))
}

fn selection_error(model: &EstimatorModel, select: &[Labeled], chance: &[f64], cfg: &TrainConfig) -> Result<f64> {
    let preds = select
        .iter()
        .map(|s| predict_recording(model, &s.recording.features, cfg.eval_frames, 1))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<&[f64]> = select.iter().map(|s| s.target).collect();
    Ok(mean_normalized_error(&preds, &targets, chance))
}

fn codes_only(model: &EstimatorModel, batch: &Batch) -> Result<(Vec<f64>, Vec<super::ForwardCache>)> {
    let mut codes = Vec::new();
    let mut caches = Vec::new();
    for x in &batch.features {
        let (p, c) = model.forward(x, 1)?;
        codes.extend_from_slice(&p.code);
        caches.push(c);
    }
    Ok((codes, caches))
}

/// Train on `train`, keeping the parameters with the lowest mean normalised
/// error on `select`.
pub fn train(train: &[Labeled], select: &[Labeled], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || select.is_empty() {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            got: 0,
            context: "training and selection splits must be non-empty",
        });
    }
    let k = train[0].target.len();
    if train.iter().chain(select).any(|s| s.target.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: 0,
            context: "all targets must share the AM count",
        });
    }
    let mut chance = vec![0.0; k];
    for s in train {
        for (c, v) in chance.iter_mut().zip(s.target) {
            *c += v / train.len() as f64;
        }
    }

    let mut init_rng = rng_from(cfg.seed, &[stream::INIT]);
    let mut batch_rng = rng_from(cfg.seed, &[stream::BATCH]);
    let mut model = EstimatorModel::init(k, &mut init_rng);
    let mut opt = Sgd::new(model.param_count(), cfg.learning_rate, cfg.momentum, cfg.weight_decay);

    let phon = cfg.phonatory.as_ref().filter(|p| p.gamma > 0.0);
    let mut diff = match phon {
        Some(p) => {
            let mut rng = rng_from(cfg.seed, &[stream::DIFFUSION]);
            let den = Denoiser::init(&mut rng);
            let opt = Sgd::new(den.param_count(), cfg.learning_rate, cfg.momentum, cfg.weight_decay);
            Some((p, p.schedule()?, den, opt, rng))
        }
        None => None,
    };
    let mut by_speaker: BTreeMap<&str, Vec<(&str, &[f64])>> = BTreeMap::new();
    if diff.is_some() {
        for s in train {
            let r = s.recording;
            if let Some(w) = &r.waveform {
                if w.len() < WINDOW {
                    return Err(Error::TooShort {
                        needed: WINDOW,
                        got: w.len(),
                        unit: "waveform samples",
                    });
                }
                by_speaker.entry(r.speaker.as_str()).or_default().push((r.speaker.as_str(), w));
            }
        }
    }

    if let Some((p, schedule, den, dopt, drng)) = diff.as_mut() {
        for it in 0..p.pretrain_iterations {
            let batch = draw_batch(train, cfg, drng)?;
            let windows = draw_windows(&batch, &by_speaker, drng)?;
            let (codes, caches) = codes_only(&model, &batch)?;
            let out = den.diffusion_loss(schedule, &windows, &codes, drng)?;
            let mut grad = vec![0.0; model.param_count()];
            let zeros = vec![0.0; k];
            for (i, c) in caches.iter().enumerate() {
                model.backward(c, &zeros, &zeros, Some(&out.d_codes[i * CODE_DIM..(i + 1) * CODE_DIM]), &mut grad);
            }
            let mut dgrad = out.grad;
            clip(&mut [&mut grad, &mut dgrad], cfg.grad_clip);
            opt.step(&mut model.params, &grad);
            dopt.step(&mut den.params, &dgrad);
            if it % 100 == 0 {
                debug!("pretrain {it}: diffusion loss {:.4}", out.loss);
            }
        }
    }

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw_batch(train, cfg, &mut batch_rng)?;
        let warm = it < cfg.warmup;
        let mut grad = vec![0.0; model.param_count()];
        let loss = match diff.as_mut() {
            None => estimator_step(&model, &batch, warm, None, &mut grad)?.0,
            Some((p, schedule, den, dopt, drng)) => {
                let windows = draw_windows(&batch, &by_speaker, drng)?;
                let (codes, _) = codes_only(&model, &batch)?;
                let out = den.diffusion_loss(schedule, &windows, &codes, drng)?;
                let d_codes: Vec<f64> = out.d_codes.iter().map(|d| p.gamma * d).collect();
                let (loss, _) = estimator_step(&model, &batch, warm, Some(&d_codes), &mut grad)?;
                let mut dgrad: Vec<f64> = out.grad.iter().map(|g| p.gamma * g).collect();
                clip(&mut [&mut grad, &mut dgrad], cfg.grad_clip);
                dopt.step(&mut den.params, &dgrad);
                opt.step(&mut model.params, &grad);
                trace.push(loss);
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                maybe_select(&mut best, &model, select, &chance, cfg, it)?;
                continue;
            }
        };
        clip(&mut [&mut grad], cfg.grad_clip);
        opt.step(&mut model.params, &grad);
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        maybe_select(&mut best, &model, select, &chance, cfg, it)?;
    }
    let (err, at, params) = best.expect("final iteration is always evaluated");
    debug!("selected iteration {at} with selection error {err:.4}");
    Ok(TrainOutcome {
        model: EstimatorModel::from_params(k, params)?,
        denoiser: diff.map(|d| d.2),
        selected_iteration: at,
        selection_error: err,
        loss_trace: trace,
    })
}

fn maybe_select(
    best: &mut Option<(f64, usize, Vec<f64>)>,
    model: &EstimatorModel,
    select: &[Labeled],
    chance: &[f64],
    cfg: &TrainConfig,
    it: usize,
) -> Result<()> {
    let done = it + 1;
    let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.iterations;
    if !due || done <= cfg.warmup.min(cfg.iterations - 1) {
        return Ok(());
    }
    let err = selection_error(model, select, chance, cfg)?;
    debug!("iteration {done}: selection error {err:.4}");
    if best.as_ref().map_or(true, |b| err < b.0) {
        *best = Some((err, done, model.params.clone()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PreparedData, Split};
    use crate::estimator::predict_recording;
    use crate::synthdata::{generate, SynthConfig};

    fn data(n_speakers: usize, seed: u64) -> PreparedData {
        let cfg = SynthConfig {
            n_speakers,
            vertices: 120,
            frames_per_recording: 24,
            waveform_samples: 512,
            seed,
            ..SynthConfig::default()
        };
        generate(&cfg).unwrap().prepare().unwrap()
    }

    fn quick(iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 8,
            warmup: iterations / 4,
            min_frames: 13,
            max_frames: 20,
            eval_frames: 20,
            eval_every: iterations / 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = data(40, 1);
        let (tr, sel) = (d.labeled(Split::Train), d.labeled(Split::Select));
        let a = train(&tr, &sel, &quick(20, 3)).unwrap();
        let b = train(&tr, &sel, &quick(20, 3)).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        let c = train(&tr, &sel, &quick(20, 4)).unwrap();
        assert_ne!(a.loss_trace, c.loss_trace);
    }

    #[test]
    fn loss_decreases() {
        let d = data(40, 2);
        let (tr, sel) = (d.labeled(Split::Train), d.labeled(Split::Select));
        let (mut head, mut tail) = (0.0, 0.0);
        for seed in 0..5 {
            let mut cfg = quick(100, seed);
            cfg.warmup = 100;
            let out = train(&tr, &sel, &cfg).unwrap();
            head += out.loss_trace[..10].iter().sum::<f64>();
            tail += out.loss_trace[90..].iter().sum::<f64>();
        }
        assert!(tail < head, "first {head} last {tail}");
    }

    #[test]
    fn planted_error_below_chance() {
        let d = data(160, 3);
        let (tr, sel, test) = (d.labeled(Split::Train), d.labeled(Split::Select), d.labeled(Split::Test));
        let out = train(&tr, &sel, &quick(120, 0)).unwrap();
        let k = d.am_ids.iter().position(|a| a == "nose_width").unwrap();
        let (mut err, mut chance) = (0.0, 0.0);
        for l in &test {
            let p = predict_recording(&out.model, &l.recording.features, 20, 1).unwrap();
            err += (p.means[k] - l.target[k]).powi(2);
            // targets are standardised on the training split
            chance += l.target[k].powi(2);
        }
        assert!(err < chance, "mse {err} chance {chance}");
    }

    #[test]
    fn zero_gamma_is_estimator_only() {
        let d = data(40, 4);
        let (tr, sel) = (d.labeled(Split::Train), d.labeled(Split::Select));
        let plain = train(&tr, &sel, &quick(12, 5)).unwrap();
        let mut cfg = quick(12, 5);
        cfg.phonatory = Some(PhonatoryConfig { gamma: 0.0, ..PhonatoryConfig::default() });
        let zero = train(&tr, &sel, &cfg).unwrap();
        assert_eq!(plain.model.params, zero.model.params);
        assert!(zero.denoiser.is_none());
        cfg.phonatory = Some(PhonatoryConfig::default());
        let joint = train(&tr, &sel, &cfg).unwrap();
        assert_ne!(plain.loss_trace[1..], joint.loss_trace[1..]);
        assert!(joint.denoiser.is_some());
    }

    #[test]
    fn rejects_bad_config() {
        let d = data(40, 5);
        let (tr, sel) = (d.labeled(Split::Train), d.labeled(Split::Select));
        let mut cfg = quick(10, 0);
        cfg.max_frames = 5;
        assert!(train(&tr, &sel, &cfg).is_err());
        assert!(train(&tr, &[], &quick(10, 0)).is_err());
    }
}
