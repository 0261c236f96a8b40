//! Minimal dense building blocks with hand-written backward passes.
//!
//! Parameters of a network live in one flat `Vec<f64>`; a [`Layout`] names
//! the slices. Gradients use the same layout, so optimisers and
//! finite-difference checks work on plain slices.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Named slice of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub slots: Vec<(&'static str, Slot)>,
    pub total: usize,
}

impl Layout {
    pub fn add(&mut self, name: &'static str, len: usize) -> Slot {
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.slots.push((name, slot));
        slot
    }

    pub fn describe(&self) -> String {
        self.slots
            .iter()
            .map(|(n, s)| format!("{n}:{}", s.len))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Row/column strides of a matrix view.
#[derive(Debug, Clone, Copy)]
pub struct Strides(pub isize, pub isize);

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1
}

/// `c = a (m x k) * b (k x n) + beta * c`, with arbitrary non-negative strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(span(m, k, sa) <= a.len(), "gemm: a out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: b out of bounds");
    assert!(span(m, n, sc) <= c.len(), "gemm: c out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index touched by dgemm, and `c`
    // is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

/// `y = W x + b` for `W` stored `out x in` row-major.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *yo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulate `dW += dy x^T`, `db += dy` and return `dx = W^T dy` (if asked).
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        for (d, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *d += g * wi;
            }
        }
    }
}

/// Batched `Y (B x out) = X (B x in) W^T + b` for `W` stored `out x in`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], batch: usize, n_in: usize) -> Vec<f64> {
    let n_out = b.len();
    let mut y = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(batch, n_in, n_out, x, Strides(n_in as isize, 1), w, Strides(1, n_in as isize), 1.0, &mut y, Strides(n_out as isize, 1));
    y
}

/// Backward of [`dense_forward`]: accumulates into `dw`, `db` and returns `dX` if asked.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    batch: usize,
    n_in: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n_out = db.len();
    for row in dy.chunks_exact(n_out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    gemm(n_out, batch, n_in, dy, Strides(1, n_out as isize), x, Strides(n_in as isize, 1), 1.0, dw, Strides(n_in as isize, 1));
    want_dx.then(|| {
        let mut dx = vec![0.0; batch * n_in];
        gemm(batch, n_out, n_in, dy, Strides(n_out as isize, 1), w, Strides(n_in as isize, 1), 0.0, &mut dx, Strides(n_in as isize, 1));
        dx
    })
}

pub fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zero `grad` wherever the ReLU output was not positive.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fill with N(0, std^2).
pub fn init_normal<R: Rng + ?Sized>(v: &mut [f64], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    v.iter_mut().for_each(|x| *x = dist.sample(rng));
}

/// SGD with momentum and L2 weight decay (decay added to the gradient).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
