//! Voice-code encoder and per-AM mean/variance heads.
//!
//! ```text
//! frames (F x 64)
//!   -> per-frame linear lift to 128 channels
//!   -> conv1d(k=5, s=2) + ReLU -> conv1d(k=5, s=2) + ReLU
//!   -> mean and std pooling over time (256)
//!   -> FC 256->128 + ReLU -> FC 128->64 + ReLU      = voice code e
//!   -> per AM k: mean  F_k = w_k . e + b_k
//!                var   G_k = exp(clamp(v_k . e + c_k, -15, 15))
//! ```

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, gemm, Layout, Slot, Strides};

pub const N_MELS: usize = 64;
pub const CHANNELS: usize = 128;
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const POOLED: usize = 2 * CHANNELS;
pub const HIDDEN: usize = 128;
pub const CODE_DIM: usize = 64;
/// Clamp range of the pre-exponential variance activation.
pub const LOG_VAR_CLAMP: f64 = 15.0;
const POOL_EPS: f64 = 1e-6;
const PATCH: usize = KERNEL * CHANNELS;

fn conv_len(frames: usize) -> usize {
    if frames < KERNEL {
        0
    } else {
        (frames - KERNEL) / STRIDE + 1
    }
}

/// Smallest input length that leaves at least one frame after both convolutions.
pub fn min_input_frames() -> usize {
    (1..).find(|&f| conv_len(conv_len(f)) >= 1).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderSlots {
    lift_w: Slot,
    lift_b: Slot,
    conv1_w: Slot,
    conv1_b: Slot,
    conv2_w: Slot,
    conv2_b: Slot,
    fc1_w: Slot,
    fc1_b: Slot,
    fc2_w: Slot,
    fc2_b: Slot,
    mean_w: Slot,
    mean_b: Slot,
    var_w: Slot,
    var_b: Slot,
}

/// Encoder plus heads for `n_ams` measurements, parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    pub n_ams: usize,
    pub params: Vec<f64>,
    slots: EncoderSlots,
    layout_desc: String,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    frames: usize,
    h0: Vec<f64>,
    h1: Vec<f64>,
    f1: usize,
    h2: Vec<f64>,
    f2: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    pooled: Vec<f64>,
    a1: Vec<f64>,
    pub code: Vec<f64>,
    log_var_raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub code: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

fn layout(n_ams: usize) -> (Layout, EncoderSlots) {
    let mut l = Layout::default();
    let slots = EncoderSlots {
        lift_w: l.add("lift_w", CHANNELS * N_MELS),
        lift_b: l.add("lift_b", CHANNELS),
        conv1_w: l.add("conv1_w", CHANNELS * PATCH),
        conv1_b: l.add("conv1_b", CHANNELS),
        conv2_w: l.add("conv2_w", CHANNELS * PATCH),
        conv2_b: l.add("conv2_b", CHANNELS),
        fc1_w: l.add("fc1_w", HIDDEN * POOLED),
        fc1_b: l.add("fc1_b", HIDDEN),
        fc2_w: l.add("fc2_w", CODE_DIM * HIDDEN),
        fc2_b: l.add("fc2_b", CODE_DIM),
        mean_w: l.add("mean_w", n_ams * CODE_DIM),
        mean_b: l.add("mean_b", n_ams),
        var_w: l.add("var_w", n_ams * CODE_DIM),
        var_b: l.add("var_b", n_ams),
    };
    (l, slots)
}

/// Row-major `rows x cols` view with a custom row stride.
fn rows(stride: usize) -> Strides {
    Strides(stride as isize, 1)
}

impl EstimatorModel {
    /// All-zero parameters.
    pub fn zeros(n_ams: usize) -> Self {
        let (l, slots) = layout(n_ams);
        Self {
            n_ams,
            params: vec![0.0; l.total],
            slots,
            layout_desc: l.describe(),
        }
    }

    /// He-normal initialisation for ReLU layers; heads start at zero so the
    /// initial prediction is mean 0, variance 1.
    pub fn init<R: Rng + ?Sized>(n_ams: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_ams);
        let s = m.slots;
        let p = &mut m.params;
        nn::init_normal(s.lift_w.of_mut(p), (1.0 / N_MELS as f64).sqrt(), rng);
        nn::init_normal(s.conv1_w.of_mut(p), (2.0 / PATCH as f64).sqrt(), rng);
        nn::init_normal(s.conv2_w.of_mut(p), (2.0 / PATCH as f64).sqrt(), rng);
        nn::init_normal(s.fc1_w.of_mut(p), (2.0 / POOLED as f64).sqrt(), rng);
        nn::init_normal(s.fc2_w.of_mut(p), (2.0 / HIDDEN as f64).sqrt(), rng);
        m
    }

    pub fn from_params(n_ams: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(n_ams);
        if params.len() != m.params.len() {
            return Err(Error::DimensionMismatch {
                expected: m.params.len(),
                actual: params.len(),
                context: "estimator parameter count",
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Stable identifier of the architecture (not the weights).
    pub fn architecture_hash(&self) -> [u8; 32] {
        let desc = format!(
            "voxface-estimator/1;mels={N_MELS};ch={CHANNELS};k={KERNEL};s={STRIDE};hidden={HIDDEN};code={CODE_DIM};ams={};{}",
            self.n_ams, self.layout_desc
        );
        Sha256::digest(desc.as_bytes()).into()
    }

    /// Number of parameters belonging to the shared encoder (the prefix of
    /// `params`); the rest are heads.
    pub fn encoder_param_count(&self) -> usize {
        self.slots.mean_w.offset
    }

    pub fn forward(&self, frames: &[f64], min_frames: usize) -> Result<(Prediction, ForwardCache)> {
        if frames.len() % N_MELS != 0 {
            return Err(Error::DimensionMismatch {
                expected: N_MELS,
                actual: frames.len() % N_MELS,
                context: "segment must hold whole 64-bin frames",
            });
        }
        let f = frames.len() / N_MELS;
        let needed = min_frames.max(min_input_frames());
        if f < needed {
            return Err(Error::TooShort {
                needed,
                got: f,
                unit: "frames",
            });
        }
        let s = &self.slots;
        let p = &self.params;

        // lift: h0 (F x C) = x (F x 64) * lift_w^T + b
        let mut h0 = vec![0.0; f * CHANNELS];
        for row in h0.chunks_exact_mut(CHANNELS) {
            row.copy_from_slice(s.lift_b.of(p));
        }
        gemm(f, N_MELS, CHANNELS, frames, rows(N_MELS), s.lift_w.of(p), Strides(1, N_MELS as isize), 1.0, &mut h0, rows(CHANNELS));

        let (h1, f1) = conv_forward(&h0, f, s.conv1_w.of(p), s.conv1_b.of(p));
        let (h2, f2) = conv_forward(&h1, f1, s.conv2_w.of(p), s.conv2_b.of(p));

        let mut mean = vec![0.0; CHANNELS];
        for row in h2.chunks_exact(CHANNELS) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f2 as f64);
        let mut var = vec![0.0; CHANNELS];
        for row in h2.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                var[c] += (row[c] - mean[c]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / f2 as f64 + POOL_EPS).sqrt()).collect();
        let pooled: Vec<f64> = mean.iter().chain(&std).copied().collect();

        let mut a1 = vec![0.0; HIDDEN];
        nn::affine(s.fc1_w.of(p), s.fc1_b.of(p), &pooled, &mut a1);
        nn::relu_inplace(&mut a1);
        let mut code = vec![0.0; CODE_DIM];
        nn::affine(s.fc2_w.of(p), s.fc2_b.of(p), &a1, &mut code);
        nn::relu_inplace(&mut code);

        let (means, log_var_raw, variances) = self.heads(&code);
        let pred = Prediction {
            code: code.clone(),
            means,
            variances,
        };
        let cache = ForwardCache {
            input: frames.to_vec(),
            frames: f,
            h0,
            h1,
            f1,
            h2,
            f2,
            mean,
            std,
            pooled,
            a1,
            code,
            log_var_raw,
        };
        Ok((pred, cache))
    }

    fn heads(&self, code: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = &self.slots;
        let p = &self.params;
        let mut means = vec![0.0; self.n_ams];
        nn::affine(s.mean_w.of(p), s.mean_b.of(p), code, &mut means);
        let mut raw = vec![0.0; self.n_ams];
        nn::affine(s.var_w.of(p), s.var_b.of(p), code, &mut raw);
        let variances = raw
            .iter()
            .map(|r| r.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp())
            .collect();
        (means, raw, variances)
    }

    /// Backpropagate `d loss / d mean_k` and `d loss / d G_k` (with respect to
    /// the variance itself) into `grad`, plus an optional extra gradient on
    /// the voice code from another consumer of `e`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_means: &[f64],
        d_vars: &[f64],
        d_code_extra: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let s = &self.slots;
        let p = &self.params;
        assert_eq!(grad.len(), p.len());

        // variance head: G = exp(clamp(r)); dG/dr = G inside the clamp range, else 0
        let d_raw: Vec<f64> = cache
            .log_var_raw
            .iter()
            .zip(d_vars)
            .map(|(r, g)| {
                if r.abs() < LOG_VAR_CLAMP {
                    g * r.exp()
                } else {
                    0.0
                }
            })
            .collect();

        let mut d_code = vec![0.0; CODE_DIM];
        let mut tmp = vec![0.0; CODE_DIM];
        {
            let (dw, db) = split2(grad, s.mean_w, s.mean_b);
            nn::affine_backward(s.mean_w.of(p), &cache.code, d_means, dw, db, Some(&mut tmp));
        }
        add(&mut d_code, &tmp);
        {
            let (dw, db) = split2(grad, s.var_w, s.var_b);
            nn::affine_backward(s.var_w.of(p), &cache.code, &d_raw, dw, db, Some(&mut tmp));
        }
        add(&mut d_code, &tmp);
        if let Some(extra) = d_code_extra {
            add(&mut d_code, extra);
        }
        self.backward_encoder(cache, d_code, grad);
    }

    fn backward_encoder(&self, cache: &ForwardCache, mut d_code: Vec<f64>, grad: &mut [f64]) {
        let s = &self.slots;
        let p = &self.params;
        nn::relu_backward(&cache.code, &mut d_code);
        let mut d_a1 = vec![0.0; HIDDEN];
        {
            let (dw, db) = split2(grad, s.fc2_w, s.fc2_b);
            nn::affine_backward(s.fc2_w.of(p), &cache.a1, &d_code, dw, db, Some(&mut d_a1));
        }
        nn::relu_backward(&cache.a1, &mut d_a1);
        let mut d_pooled = vec![0.0; POOLED];
        {
            let (dw, db) = split2(grad, s.fc1_w, s.fc1_b);
            nn::affine_backward(s.fc1_w.of(p), &cache.pooled, &d_a1, dw, db, Some(&mut d_pooled));
        }

        let f2 = cache.f2 as f64;
        let mut d_h2 = vec![0.0; cache.h2.len()];
        for (drow, row) in d_h2.chunks_exact_mut(CHANNELS).zip(cache.h2.chunks_exact(CHANNELS)) {
            for c in 0..CHANNELS {
                drow[c] = d_pooled[c] / f2
                    + d_pooled[CHANNELS + c] * (row[c] - cache.mean[c]) / (f2 * cache.std[c]);
            }
        }

        let d_h1 = {
            let (dw, db) = split2(grad, s.conv2_w, s.conv2_b);
            conv_backward(&cache.h1, cache.f1, &cache.h2, cache.f2, s.conv2_w.of(p), d_h2, dw, db, true)
        };
        let d_h0 = {
            let (dw, db) = split2(grad, s.conv1_w, s.conv1_b);
            conv_backward(&cache.h0, cache.frames, &cache.h1, cache.f1, s.conv1_w.of(p), d_h1.unwrap(), dw, db, true)
        }
        .unwrap();

        // lift: d lift_w (C x 64) += d_h0^T (C x F) * x (F x 64)
        let (dw, db) = split2(grad, s.lift_w, s.lift_b);
        gemm(CHANNELS, cache.frames, N_MELS, &d_h0, Strides(1, CHANNELS as isize), &cache.input, rows(N_MELS), 1.0, dw, rows(N_MELS));
        for row in d_h0.chunks_exact(CHANNELS) {
            add(db, row);
        }
    }

    /// Inference only; never touches training-only modules.
    pub fn predict(&self, frames: &[f64], min_frames: usize) -> Result<Prediction> {
        Ok(self.forward(frames, min_frames)?.0)
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Disjoint mutable views of two slots (weights precede biases).
fn split2(grad: &mut [f64], w: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.offset + w.len, b.offset);
    let (head, tail) = grad[w.offset..b.offset + b.len].split_at_mut(w.len);
    (head, tail)
}

/// Valid strided convolution over time, followed by ReLU.
/// `input` is `frames x C` row-major; a patch is `KERNEL` consecutive rows,
/// which is contiguous, so the im2col matrix is a strided view.
fn conv_forward(input: &[f64], frames: usize, w: &[f64], b: &[f64]) -> (Vec<f64>, usize) {
    let out_frames = conv_len(frames);
    let mut out = vec![0.0; out_frames * CHANNELS];
    for row in out.chunks_exact_mut(CHANNELS) {
        row.copy_from_slice(b);
    }
    gemm(
        out_frames,
        PATCH,
        CHANNELS,
        input,
        rows(STRIDE * CHANNELS),
        w,
        Strides(1, PATCH as isize),
        1.0,
        &mut out,
        rows(CHANNELS),
    );
    nn::relu_inplace(&mut out);
    (out, out_frames)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_frames: usize,
    output: &[f64],
    out_frames: usize,
    w: &[f64],
    mut d_out: Vec<f64>,
    dw: &mut [f64],
    db: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    nn::relu_backward(output, &mut d_out);
    for row in d_out.chunks_exact(CHANNELS) {
        add(db, row);
    }
    // dW (C x PATCH) += d_out^T (C x T) * patches (T x PATCH)
    gemm(
        CHANNELS,
        out_frames,
        PATCH,
        &d_out,
        Strides(1, CHANNELS as isize),
        input,
        rows(STRIDE * CHANNELS),
        1.0,
        dw,
        rows(PATCH),
    );
    if !want_input_grad {
        return None;
    }
    // d_patches (T x PATCH) = d_out (T x C) * W (C x PATCH), then overlap-add
    let mut d_patches = vec![0.0; out_frames * PATCH];
    gemm(out_frames, CHANNELS, PATCH, &d_out, rows(CHANNELS), w, rows(PATCH), 0.0, &mut d_patches, rows(PATCH));
    let mut d_in = vec![0.0; in_frames * CHANNELS];
    for (t, dp) in d_patches.chunks_exact(PATCH).enumerate() {
        add(&mut d_in[t * STRIDE * CHANNELS..t * STRIDE * CHANNELS + PATCH], dp);
    }
    Some(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn zero_heads_predict_unit_variance() {
        let model = EstimatorModel::init(5, &mut rng_from(1, &[]));
        let mut rng = rng_from(2, &[]);
        let x: Vec<f64> = (0..30 * N_MELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = model.predict(&x, 20).unwrap();
        assert_eq!(a.means, vec![0.0; 5]);
        assert_eq!(a.variances, vec![1.0; 5]);
        assert_eq!(a.code.len(), CODE_DIM);
        let b = model.predict(&x, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_segments_are_rejected() {
        let model = EstimatorModel::zeros(2);
        assert!(model.predict(&vec![0.0; 19 * N_MELS], 20).is_err());
        assert!(model.predict(&vec![0.0; 12 * N_MELS], 1).is_err());
        assert!(model.predict(&vec![0.0; 13 * N_MELS], 1).is_ok());
        assert_eq!(min_input_frames(), 13);
    }

    fn loss_of(model: &EstimatorModel, x: &[f64], targets: &[f64]) -> f64 {
        let p = model.predict(x, 1).unwrap();
        (0..targets.len())
            .map(|k| crate::estimator::loss_uncertainty(p.means[k], p.variances[k], targets[k]).unwrap())
            .sum::<f64>()
            + p.code.iter().map(|c| 0.3 * c).sum::<f64>()
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let mut model = EstimatorModel::init(3, &mut rng_from(7, &[]));
        let mut rng = rng_from(8, &[]);
        let heads = model.encoder_param_count();
        for v in &mut model.params[heads..] {
            *v = rng.gen_range(-0.2..0.2);
        }
        let x: Vec<f64> = (0..21 * N_MELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = [0.5, -1.0, 2.0];
        let (pred, cache) = model.forward(&x, 1).unwrap();
        let mut dm = vec![0.0; 3];
        let mut dv = vec![0.0; 3];
        for k in 0..3 {
            let (_, a, b) = crate::estimator::loss_uncertainty_grad(pred.means[k], pred.variances[k], targets[k]);
            dm[k] = a;
            dv[k] = b;
        }
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&cache, &dm, &dv, Some(&[0.3; CODE_DIM]), &mut grad);

        // sample from every slot so each layer is covered
        let (l, _) = layout(3);
        let mut picks = Vec::new();
        for (_, slot) in &l.slots {
            picks.push(slot.offset + rng.gen_range(0..slot.len));
        }
        while picks.len() < 25 {
            picks.push(rng.gen_range(0..model.param_count()));
        }
        let h = 1e-5;
        for &i in &picks {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = (loss_of(&plus, &x, &targets) - loss_of(&minus, &x, &targets)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: analytic {} fd {fd}", grad[i]);
        }
    }
}
