//! Rational-ratio polyphase resampling with a Blackman-windowed sinc
//! low-pass filter. The filter is symmetric (linear phase) and centred, so
//! the output has no group delay.

use crate::error::{Error, Result};

const ZERO_CROSSINGS: usize = 16;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn resample(input: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if from == to {
        return Ok(input.to_vec());
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    let width = up.max(down);
    let half = ZERO_CROSSINGS * width;
    // taps over the upsampled grid, index j <-> offset j - half
    let taps: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let n = j as f64 - half as f64;
            let window = 0.42
                + 0.5 * (std::f64::consts::PI * n / half as f64).cos()
                + 0.08 * (2.0 * std::f64::consts::PI * n / half as f64).cos();
            up as f64 / width as f64 * sinc(n / width as f64) * window
        })
        .collect();
    let out_len = (input.len() * up).div_ceil(down);
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = (m * down) as isize;
        let k_lo = (t - half as isize).div_euclid(up as isize) + 1;
        let k_hi = (t + half as isize).div_euclid(up as isize);
        let mut acc = 0.0;
        for k in k_lo.max(0)..=k_hi.min(input.len() as isize - 1) {
            let offset = t - k * up as isize;
            acc += input[k as usize] * taps[(offset + half as isize) as usize];
        }
        out.push(acc);
    }
    Ok(out)
}
