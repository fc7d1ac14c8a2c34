//! Shared test support: an independent 64-bit reference implementation of
//! every differentiable kernel plus a central finite-difference harness.
//!
//! The references here are deliberately written as plain loops with no code
//! shared with the tape, so they can serve as an oracle for it.

#![allow(dead_code)]

use defined::nn::{Dims, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const FD_H: f64 = 1e-3;
/// Relative-error floor: gradients smaller than this in both views are
/// compared against the floor instead of each other, since f32 rounding
/// noise dominates below it.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.5f32..1.5)).collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Central finite difference of `f` w.r.t. input `which`, elementwise.
pub fn fd_grad(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    which: usize,
    h: f64,
) -> Vec<f64> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let n = inputs[which].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which][i];
        work[which][i] = orig + h;
        let fp = f(&work);
        work[which][i] = orig - h;
        let fm = f(&work);
        work[which][i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between the analytic f32 gradient and the
/// finite-difference reference.
pub fn max_rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let a = a as f64;
            let denom = a.abs().max(r.abs()).max(REL_FLOOR);
            (a - r).abs() / denom
        })
        .fold(0.0, f64::max)
}

// 64-bit reference kernels. All matrices row-major.

pub fn ref_matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..n {
                c[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    c
}

pub fn ref_linear(x: &[f64], r: usize, k: usize, w: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = ref_matmul(x, r, k, w, n);
    for row in y.chunks_exact_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

pub fn ref_layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let eps = 1e-5;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * inv * g[c] + b[c];
        }
    }
    out
}

pub fn ref_gelu(x: &[f64]) -> Vec<f64> {
    let c = 0.7978845608028654;
    let a = 0.044715;
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn ref_softmax_rows(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..d {
            let e = (row[c] - m).exp();
            out[r * d + c] = e;
            sum += e;
        }
        for c in 0..d {
            out[r * d + c] /= sum;
        }
    }
    out
}

pub fn ref_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    frames: usize,
    len: usize,
    heads: usize,
    d: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt() as f64;
    let mut out = vec![0.0; q.len()];
    for f in 0..frames {
        for h in 0..heads {
            for i in 0..len {
                // Causal scores over positions 0..=i.
                let qi = |c: usize| q[(f * len + i) * d + h * dh + c];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qi(c) * k[(f * len + j) * d + h * dh + c];
                    }
                    scores.push(s * scale);
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += scores[j] * v[(f * len + j) * d + h * dh + c];
                    }
                    out[(f * len + i) * d + h * dh + c] = acc;
                }
            }
        }
    }
    out
}

pub fn ref_cross_entropy_mean(logits: &[f64], rows: usize, c: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
    }
    total / rows as f64
}

pub fn ref_interleave(a: &[f64], b: &[f64], frames: usize, la: usize, d: usize) -> Vec<f64> {
    let lb = la - 1;
    let l = la + lb;
    let mut out = vec![0.0; frames * l * d];
    for f in 0..frames {
        for i in 0..la {
            out[((f * l) + 2 * i) * d..((f * l) + 2 * i + 1) * d]
                .copy_from_slice(&a[(f * la + i) * d..(f * la + i + 1) * d]);
        }
        for i in 0..lb {
            out[((f * l) + 2 * i + 1) * d..((f * l) + 2 * i + 2) * d]
                .copy_from_slice(&b[(f * lb + i) * d..(f * lb + i + 1) * d]);
        }
    }
    out
}

pub fn ref_add_pos(x: &[f64], pos: &[f64], frames: usize, len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for i in 0..len {
            for c in 0..d {
                out[(f * len + i) * d + c] = x[(f * len + i) * d + c] + pos[i * d + c];
            }
        }
    }
    out
}

pub fn ref_slice_cols(x: &[f64], rows: usize, cols: usize, start: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + w]);
    }
    out
}

pub fn ref_gather_rows(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Outcome of one kernel's randomized gradient check.
pub struct KernelCheck {
    pub kernel: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Builds tape constants, runs `op`, reduces with fixed random weights,
/// backprops, and compares each requested input gradient against central
/// finite differences of `reference` (which must include the same weighted
/// reduction).
fn check_one(
    tape_inputs: &[(Dims, Vec<f32>)],
    op: impl FnOnce(&mut Tape, &[Tensor]) -> Tensor,
    reference: &dyn Fn(&[Vec<f64>]) -> f64,
    checked: &[usize],
) -> f64 {
    let mut tape = Tape::new(true);
    let handles: Vec<Tensor> = tape_inputs
        .iter()
        .map(|(dims, data)| tape.constant(*dims, data.clone()).unwrap())
        .collect();
    let loss = op(&mut tape, &handles);
    tape.backward(loss, 1.0).unwrap();
    let inputs64: Vec<Vec<f64>> = tape_inputs.iter().map(|(_, d)| to64(d)).collect();
    let mut worst = 0.0f64;
    for &which in checked {
        let fd = fd_grad(reference, &inputs64, which, FD_H);
        let analytic = tape
            .grad(handles[which])
            .unwrap_or_else(|| panic!("no gradient reached input {which}"));
        worst = worst.max(max_rel_err(analytic, &fd));
    }
    worst
}

pub fn check_matmul(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (m, k, n) = (
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
        );
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, k * n);
        let w = rand_vec(&mut r, m * n);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| dot(&w64, &ref_matmul(&ins[0], m, k, &ins[1], n));
        worst = worst.max(check_one(
            &[
                (Dims::new(m, k), a),
                (Dims::new(k, n), b),
            ],
            |t, h| {
                let y = t.matmul(h[0], h[1]).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0, 1],
        ));
    }
    KernelCheck {
        kernel: "matmul",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_linear(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, k, n) = (
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
        );
        let x = rand_vec(&mut r, rows * k);
        let wm = rand_vec(&mut r, k * n);
        let b = rand_vec(&mut r, n);
        let w = rand_vec(&mut r, rows * n);
        let w64 = to64(&w);
        let reference =
            move |ins: &[Vec<f64>]| dot(&w64, &ref_linear(&ins[0], rows, k, &ins[1], n, &ins[2]));
        worst = worst.max(check_one(
            &[
                (Dims::new(rows, k), x),
                (Dims::new(k, n), wm),
                (Dims::new(1, n), b),
            ],
            |t, h| {
                let y = t.linear(h[0], h[1], h[2]).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0, 1, 2],
        ));
    }
    KernelCheck {
        kernel: "linear",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_add_scale(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, cols) = (r.gen_range(1..=5usize), r.gen_range(1..=5usize));
        let a = rand_vec(&mut r, rows * cols);
        let b = rand_vec(&mut r, rows * cols);
        let c = r.gen_range(-2.0f32..2.0);
        let w = rand_vec(&mut r, rows * cols);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| {
            let sum: Vec<f64> = ins[0]
                .iter()
                .zip(&ins[1])
                .map(|(x, y)| (x + y) * c as f64)
                .collect();
            dot(&w64, &sum)
        };
        worst = worst.max(check_one(
            &[
                (Dims::new(rows, cols), a),
                (Dims::new(rows, cols), b),
            ],
            |t, h| {
                let s = t.add(h[0], h[1]).unwrap();
                let s = t.scale(s, c).unwrap();
                t.weighted_sum(s, w).unwrap()
            },
            &reference,
            &[0, 1],
        ));
    }
    KernelCheck {
        kernel: "add+scale",
        cases,
        max_rel_err: worst,
    }
}

/// Rows with near-zero variance make the normalization's third derivative
/// explode and the h=1e-3 stencil loses accuracy for reasons unrelated to
/// the implementation, so the generator redraws such rows.
fn rand_spread_rows(r: &mut ChaCha12Rng, rows: usize, d: usize) -> Vec<f32> {
    let mut x = vec![0.0f32; rows * d];
    for row in x.chunks_exact_mut(d) {
        loop {
            for v in row.iter_mut() {
                *v = r.gen_range(-1.5f32..1.5);
            }
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            if var > 0.1 {
                break;
            }
        }
    }
    x
}

pub fn check_layer_norm(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, d) = (r.gen_range(1..=4usize), r.gen_range(2..=8usize));
        let x = rand_spread_rows(&mut r, rows, d);
        let g = rand_vec(&mut r, d);
        let b = rand_vec(&mut r, d);
        let w = rand_vec(&mut r, rows * d);
        let w64 = to64(&w);
        let reference =
            move |ins: &[Vec<f64>]| dot(&w64, &ref_layer_norm(&ins[0], rows, d, &ins[1], &ins[2]));
        worst = worst.max(check_one(
            &[
                (Dims::new(rows, d), x),
                (Dims::new(1, d), g),
                (Dims::new(1, d), b),
            ],
            |t, h| {
                let y = t.layer_norm(h[0], h[1], h[2]).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0, 1, 2],
        ));
    }
    KernelCheck {
        kernel: "layer_norm",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_gelu(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, cols) = (r.gen_range(1..=5usize), r.gen_range(1..=6usize));
        let x = rand_vec(&mut r, rows * cols);
        let w = rand_vec(&mut r, rows * cols);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| dot(&w64, &ref_gelu(&ins[0]));
        worst = worst.max(check_one(
            &[(Dims::new(rows, cols), x)],
            |t, h| {
                let y = t.gelu(h[0]).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0],
        ));
    }
    KernelCheck {
        kernel: "gelu",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_softmax_rows(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, d) = (r.gen_range(1..=4usize), r.gen_range(2..=6usize));
        let x = rand_vec(&mut r, rows * d);
        let w = rand_vec(&mut r, rows * d);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| dot(&w64, &ref_softmax_rows(&ins[0], rows, d));
        worst = worst.max(check_one(
            &[(Dims::new(rows, d), x)],
            |t, h| {
                let y = t.softmax_rows(h[0]).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0],
        ));
    }
    KernelCheck {
        kernel: "softmax_rows",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_attention(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let frames = r.gen_range(1..=3usize);
        let len = r.gen_range(1..=5usize);
        let heads = [1usize, 2, 4][r.gen_range(0..3usize)];
        let dh = r.gen_range(1..=3usize);
        let d = heads * dh;
        let n = frames * len * d;
        let q = rand_vec(&mut r, n);
        let k = rand_vec(&mut r, n);
        let v = rand_vec(&mut r, n);
        let w = rand_vec(&mut r, n);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| {
            dot(
                &w64,
                &ref_attention(&ins[0], &ins[1], &ins[2], frames, len, heads, d),
            )
        };
        worst = worst.max(check_one(
            &[
                (Dims::new(frames * len, d), q),
                (Dims::new(frames * len, d), k),
                (Dims::new(frames * len, d), v),
            ],
            |t, h| {
                let y = t.attention(h[0], h[1], h[2], frames, heads).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0, 1, 2],
        ));
    }
    KernelCheck {
        kernel: "attention",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_cross_entropy(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (rows, c) = (r.gen_range(1..=5usize), r.gen_range(2..=5usize));
        let logits = rand_vec(&mut r, rows * c);
        let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..c)).collect();
        let tgt = targets.clone();
        let reference =
            move |ins: &[Vec<f64>]| ref_cross_entropy_mean(&ins[0], rows, c, &tgt);
        worst = worst.max(check_one(
            &[(Dims::new(rows, c), logits)],
            |t, h| t.cross_entropy_mean(h[0], targets).unwrap(),
            &reference,
            &[0],
        ));
    }
    KernelCheck {
        kernel: "cross_entropy_mean",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_interleave_and_pos(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let frames = r.gen_range(1..=3usize);
        let la = r.gen_range(1..=3usize);
        let lb = la - 1;
        let d = r.gen_range(1..=4usize);
        let l = la + lb;
        let pos_rows = l + r.gen_range(0..=2usize);
        let a = rand_vec(&mut r, frames * la * d);
        let b = rand_vec(&mut r, frames * lb * d);
        let pos = rand_vec(&mut r, pos_rows * d);
        let w = rand_vec(&mut r, frames * l * d);
        let w64 = to64(&w);
        let reference = move |ins: &[Vec<f64>]| {
            let inter = ref_interleave(&ins[0], &ins[1], frames, la, d);
            let mut pos_full = ins[2].clone();
            pos_full.truncate(pos_rows * d);
            dot(&w64, &ref_add_pos(&inter, &pos_full, frames, l, d))
        };
        worst = worst.max(check_one(
            &[
                (Dims::new(frames * la, d), a),
                (Dims::new(frames * lb, d), b),
                (Dims::new(pos_rows, d), pos),
            ],
            |t, h| {
                let y = t.interleave_rows(h[0], h[1], frames).unwrap();
                let y = t.add_pos(y, h[2], frames).unwrap();
                t.weighted_sum(y, w).unwrap()
            },
            &reference,
            &[0, 1, 2],
        ));
    }
    KernelCheck {
        kernel: "interleave+add_pos",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_slice_gather(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let rows = r.gen_range(1..=5usize);
        let cols = r.gen_range(2..=6usize);
        let start = r.gen_range(0..cols - 1);
        let w_cols = r.gen_range(1..=cols - start);
        let n_idx = r.gen_range(1..=6usize);
        let idx: Vec<usize> = (0..n_idx).map(|_| r.gen_range(0..rows)).collect();
        let x = rand_vec(&mut r, rows * cols);
        let w = rand_vec(&mut r, n_idx * w_cols);
        let w64 = to64(&w);
        let idx_ref = idx.clone();
        let reference = move |ins: &[Vec<f64>]| {
            let sliced = ref_slice_cols(&ins[0], rows, cols, start, w_cols);
            dot(&w64, &ref_gather_rows(&sliced, w_cols, &idx_ref))
        };
        worst = worst.max(check_one(
            &[(Dims::new(rows, cols), x)],
            |t, h| {
                let s = t.slice_cols(h[0], start, w_cols).unwrap();
                let g = t.gather_rows(s, idx).unwrap();
                t.weighted_sum(g, w).unwrap()
            },
            &reference,
            &[0],
        ));
    }
    KernelCheck {
        kernel: "slice_cols+gather_rows",
        cases,
        max_rel_err: worst,
    }
}

/// Two-layer toy network: linear -> gelu -> linear -> cross entropy.
pub fn check_composed_network(cases: usize, seed: u64) -> KernelCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let rows = r.gen_range(1..=3usize);
        let d_in = r.gen_range(2..=4usize);
        let d_h = r.gen_range(2..=5usize);
        let classes = r.gen_range(2..=4usize);
        let x = rand_vec(&mut r, rows * d_in);
        let w1 = rand_vec(&mut r, d_in * d_h);
        let b1 = rand_vec(&mut r, d_h);
        let w2 = rand_vec(&mut r, d_h * classes);
        let b2 = rand_vec(&mut r, classes);
        let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();
        let tgt = targets.clone();
        let reference = move |ins: &[Vec<f64>]| {
            let h1 = ref_linear(&ins[0], rows, d_in, &ins[1], d_h, &ins[2]);
            let a1 = ref_gelu(&h1);
            let logits = ref_linear(&a1, rows, d_h, &ins[3], classes, &ins[4]);
            ref_cross_entropy_mean(&logits, rows, classes, &tgt)
        };
        worst = worst.max(check_one(
            &[
                (Dims::new(rows, d_in), x),
                (Dims::new(d_in, d_h), w1),
                (Dims::new(1, d_h), b1),
                (Dims::new(d_h, classes), w2),
                (Dims::new(1, classes), b2),
            ],
            |t, h| {
                let z = t.linear(h[0], h[1], h[2]).unwrap();
                let z = t.gelu(z).unwrap();
                let z = t.linear(z, h[3], h[4]).unwrap();
                t.cross_entropy_mean(z, targets).unwrap()
            },
            &reference,
            &[0, 1, 2, 3, 4],
        ));
    }
    KernelCheck {
        kernel: "composed 2-layer network",
        cases,
        max_rel_err: worst,
    }
}

/// Every kernel check at `cases` cases each.
pub fn all_kernel_checks(cases: usize, seed: u64) -> Vec<KernelCheck> {
    vec![
        check_matmul(cases, seed),
        check_linear(cases, seed + 1),
        check_add_scale(cases, seed + 2),
        check_layer_norm(cases, seed + 3),
        check_gelu(cases, seed + 4),
        check_softmax_rows(cases, seed + 5),
        check_attention(cases, seed + 6),
        check_cross_entropy(cases, seed + 7),
        check_interleave_and_pos(cases, seed + 8),
        check_slice_gather(cases, seed + 9),
        check_composed_network(cases, seed + 10),
    ]
}
