//! The reverse-mode tape: an append-only arena of operation nodes.
//!
//! Recording a forward computation appends one [`Node`] per operation,
//! holding the output values and the minimal context its backward rule
//! needs (attention keeps its probability rows, layer norm its per-row
//! mean and inverse deviation, cross entropy its softmax probabilities).
//! [`Tape::backward`] then walks the arena once in reverse, accumulating
//! gradients into per-node buffers that are allocated lazily.
//!
//! Every kernel validates shapes up front and checks its outputs for
//! non-finite values; `backward` re-checks every gradient buffer before
//! returning, so a NaN anywhere surfaces as an error at the step that
//! produced it rather than as a silently poisoned model.

use super::{gemm, Dims, NnError, ParamStore, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// Handle to a tape node. Cheap to copy; `dims` mirrors the node's shape
/// so callers can do shape arithmetic without borrowing the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: u32,
    pub dims: Dims,
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.dims.rows
    }

    pub fn cols(&self) -> usize {
        self.dims.cols
    }
}

enum Data {
    Own(Vec<f32>),
    Shared(Arc<Vec<f32>>),
}

impl Data {
    fn as_slice(&self) -> &[f32] {
        match self {
            Data::Own(v) => v,
            Data::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    Matmul {
        a: u32,
        b: u32,
    },
    Linear {
        x: u32,
        w: u32,
        b: u32,
    },
    Add {
        a: u32,
        b: u32,
    },
    Scale {
        x: u32,
        c: f32,
    },
    Reshape {
        x: u32,
    },
    SliceCols {
        x: u32,
        start: usize,
    },
    InterleaveRows {
        a: u32,
        b: u32,
        frames: usize,
    },
    AddPos {
        x: u32,
        pos: u32,
        frames: usize,
    },
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
        /// Per row: (mean, 1/sqrt(var + eps)).
        cache: Vec<(f32, f32)>,
    },
    Gelu {
        x: u32,
    },
    Attention {
        q: u32,
        k: u32,
        v: u32,
        frames: usize,
        len: usize,
        heads: usize,
        /// Row-stochastic causal attention weights,
        /// `(frames * heads) x len x len`, exactly zero above the diagonal.
        probs: Vec<f32>,
    },
    GatherRows {
        x: u32,
        rows: Vec<usize>,
    },
    SoftmaxRows {
        x: u32,
    },
    CrossEntropyMean {
        logits: u32,
        targets: Vec<usize>,
        /// Softmax probabilities of the logits, row-major.
        probs: Vec<f32>,
    },
    WeightedSum {
        x: u32,
        weights: Vec<f32>,
    },
    Dropout {
        x: u32,
        /// Per-element multiplier: 0 (dropped) or 1/(1-p) (kept).
        mask: Vec<f32>,
    },
}

struct Node {
    data: Data,
    dims: Dims,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Reverse-mode arena. Create one per forward computation; drop it after
/// extracting gradients. With `recording` disabled the same kernels run
/// value-only (no backward context is kept) for cheap inference.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new(recording: bool) -> Self {
        Tape {
            nodes: Vec::with_capacity(128),
            recording,
            backward_done: false,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output values of `t`.
    pub fn value(&self, t: Tensor) -> &[f32] {
        self.nodes[t.id as usize].data.as_slice()
    }

    /// Accumulated gradient of `t`, if backward reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[f32]> {
        self.nodes[t.id as usize].grad.as_deref()
    }

    /// Appends a non-trainable leaf holding `data`.
    pub fn constant(&mut self, dims: Dims, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != dims.len() {
            return Err(shape(
                "constant",
                format!("data length {} != {}x{}", data.len(), dims.rows, dims.cols),
            ));
        }
        check_finite("constant", &data)?;
        Ok(self.push(Data::Own(data), dims, Op::Leaf))
    }

    /// Attaches every parameter of `store` as a shared leaf, in
    /// registration order, and returns the handles in that same order.
    pub fn attach(&mut self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| {
                let p = store.param(i);
                self.push(Data::Shared(p.value.clone()), p.dims, Op::Leaf)
            })
            .collect()
    }

    fn push(&mut self, data: Data, dims: Dims, op: Op) -> Tensor {
        let id = u32::try_from(self.nodes.len()).expect("tape node count overflow");
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            data,
            dims,
            grad: None,
            op,
        });
        Tensor { id, dims }
    }

    fn dims_of(&self, id: u32) -> Dims {
        self.nodes[id as usize].dims
    }

    fn data_of(&self, id: u32) -> &[f32] {
        self.nodes[id as usize].data.as_slice()
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(shape(
                "matmul",
                format!("{}x{} @ {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
            ));
        }
        let dims = Dims::new(a.rows(), b.cols());
        let mut out = vec![0.0f32; dims.len()];
        gemm(
            false,
            false,
            1.0,
            self.value(a),
            a.dims,
            self.value(b),
            b.dims,
            0.0,
            &mut out,
        );
        check_finite("matmul", &out)?;
        Ok(self.push(Data::Own(out), dims, Op::Matmul { a: a.id, b: b.id }))
    }

    /// `x @ w + bias`, bias broadcast over rows.
    pub fn linear(&mut self, x: Tensor, w: Tensor, bias: Tensor) -> Result<Tensor> {
        if x.cols() != w.rows() || bias.rows() != 1 || bias.cols() != w.cols() {
            return Err(shape(
                "linear",
                format!(
                    "x {}x{}, w {}x{}, bias {}x{}",
                    x.rows(),
                    x.cols(),
                    w.rows(),
                    w.cols(),
                    bias.rows(),
                    bias.cols()
                ),
            ));
        }
        let dims = Dims::new(x.rows(), w.cols());
        let mut out = vec![0.0f32; dims.len()];
        gemm(
            false,
            false,
            1.0,
            self.value(x),
            x.dims,
            self.value(w),
            w.dims,
            0.0,
            &mut out,
        );
        let b = self.value(bias);
        let n = w.cols();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        check_finite("linear", &out)?;
        Ok(self.push(
            Data::Own(out),
            dims,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: bias.id,
            },
        ))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.dims != b.dims {
            return Err(shape(
                "add",
                format!(
                    "{}x{} vs {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        Ok(self.push(Data::Own(out), a.dims, Op::Add { a: a.id, b: b.id }))
    }

    /// Multiplies every element by `c`.
    pub fn scale(&mut self, x: Tensor, c: f32) -> Result<Tensor> {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        Ok(self.push(Data::Own(out), x.dims, Op::Scale { x: x.id, c }))
    }

    /// Same elements under new dimensions; element count must match.
    pub fn reshape(&mut self, x: Tensor, dims: Dims) -> Result<Tensor> {
        if dims.len() != x.dims.len() {
            return Err(shape(
                "reshape",
                format!(
                    "{}x{} has {} elements, {}x{} wants {}",
                    x.rows(),
                    x.cols(),
                    x.dims.len(),
                    dims.rows,
                    dims.cols,
                    dims.len()
                ),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Data::Own(out), dims, Op::Reshape { x: x.id }))
    }

    /// Columns `start..start+width` of `x`.
    pub fn slice_cols(&mut self, x: Tensor, start: usize, width: usize) -> Result<Tensor> {
        if width == 0 || start + width > x.cols() {
            return Err(shape(
                "slice_cols",
                format!("cols {}..{} of {} columns", start, start + width, x.cols()),
            ));
        }
        let dims = Dims::new(x.rows(), width);
        let src = self.value(x);
        let mut out = Vec::with_capacity(dims.len());
        for r in 0..x.rows() {
            let base = r * x.cols() + start;
            out.extend_from_slice(&src[base..base + width]);
        }
        Ok(self.push(Data::Own(out), dims, Op::SliceCols { x: x.id, start }))
    }

    /// Per-frame row interleave: frame rows `[a0, b0, a1, b1, ..]`. `a`
    /// must hold one more row per frame than `b` (the sequence both starts
    /// and ends with an `a` row), so each output frame has an odd number of
    /// rows.
    pub fn interleave_rows(&mut self, a: Tensor, b: Tensor, frames: usize) -> Result<Tensor> {
        if frames == 0
            || a.cols() != b.cols()
            || a.rows() % frames != 0
            || (b.rows() > 0 && b.rows() % frames != 0)
        {
            return Err(shape(
                "interleave_rows",
                format!(
                    "a {}x{}, b {}x{}, frames {}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols(),
                    frames
                ),
            ));
        }
        let la = a.rows() / frames;
        let lb = b.rows() / frames;
        if la != lb + 1 {
            return Err(shape(
                "interleave_rows",
                format!("{la} rows/frame in a vs {lb} in b (need la = lb + 1)"),
            ));
        }
        let d = a.cols();
        let l = la + lb;
        let dims = Dims::new(frames * l, d);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0f32; dims.len()];
        for f in 0..frames {
            for i in 0..la {
                let dst = (f * l + 2 * i) * d;
                let src = (f * la + i) * d;
                out[dst..dst + d].copy_from_slice(&av[src..src + d]);
            }
            for i in 0..lb {
                let dst = (f * l + 2 * i + 1) * d;
                let src = (f * lb + i) * d;
                out[dst..dst + d].copy_from_slice(&bv[src..src + d]);
            }
        }
        Ok(self.push(
            Data::Own(out),
            dims,
            Op::InterleaveRows {
                a: a.id,
                b: b.id,
                frames,
            },
        ))
    }

    /// Adds row `i % len` of `pos` to row `i` of each frame:
    /// `out[f*len + i] = x[f*len + i] + pos[i]`.
    pub fn add_pos(&mut self, x: Tensor, pos: Tensor, frames: usize) -> Result<Tensor> {
        if frames == 0 || x.rows() % frames != 0 || pos.cols() != x.cols() {
            return Err(shape(
                "add_pos",
                format!(
                    "x {}x{}, pos {}x{}, frames {}",
                    x.rows(),
                    x.cols(),
                    pos.rows(),
                    pos.cols(),
                    frames
                ),
            ));
        }
        let len = x.rows() / frames;
        if len > pos.rows() {
            return Err(shape(
                "add_pos",
                format!("sequence length {} exceeds position table {}", len, pos.rows()),
            ));
        }
        let d = x.cols();
        let xv = self.value(x);
        let pv = self.value(pos);
        let mut out = vec![0.0f32; xv.len()];
        for f in 0..frames {
            for i in 0..len {
                let o = (f * len + i) * d;
                for c in 0..d {
                    out[o + c] = xv[o + c] + pv[i * d + c];
                }
            }
        }
        check_finite("add_pos", &out)?;
        Ok(self.push(
            Data::Own(out),
            x.dims,
            Op::AddPos {
                x: x.id,
                pos: pos.id,
                frames,
            },
        ))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let d = x.cols();
        if gamma.dims != Dims::new(1, d) || beta.dims != Dims::new(1, d) || d == 0 {
            return Err(shape(
                "layer_norm",
                format!(
                    "x {}x{}, gamma {}x{}, beta {}x{}",
                    x.rows(),
                    x.cols(),
                    gamma.rows(),
                    gamma.cols(),
                    beta.rows(),
                    beta.cols()
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0f32; xv.len()];
        let mut cache = if self.recording {
            Vec::with_capacity(x.rows())
        } else {
            Vec::new()
        };
        for r in 0..x.rows() {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let z = v as f64 - mean;
                    z * z
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let (mean32, inv32) = (mean as f32, inv as f32);
            let o = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                o[c] = (row[c] - mean32) * inv32 * g[c] + b[c];
            }
            if self.recording {
                cache.push((mean32, inv32));
            }
        }
        check_finite("layer_norm", &out)?;
        Ok(self.push(
            Data::Own(out),
            x.dims,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                cache,
            },
        ))
    }

    /// GELU with the tanh approximation (the GPT-2 activation).
    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        let out: Vec<f32> = self.value(x).iter().map(|&v| gelu_f(v as f64) as f32).collect();
        check_finite("gelu", &out)?;
        Ok(self.push(Data::Own(out), x.dims, Op::Gelu { x: x.id }))
    }

    /// Multi-head causal self-attention over `frames` independent packed
    /// sequences of `len` rows each. Attention weights are exactly zero
    /// above the diagonal; each used row is row-stochastic.
    pub fn attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        frames: usize,
        heads: usize,
    ) -> Result<Tensor> {
        let d = q.cols();
        if q.dims != k.dims || q.dims != v.dims {
            return Err(shape("attention", "q/k/v shapes differ".into()));
        }
        if frames == 0 || heads == 0 || d % heads != 0 || q.rows() % frames != 0 {
            return Err(shape(
                "attention",
                format!(
                    "rows {}, cols {}, frames {}, heads {}",
                    q.rows(),
                    d,
                    frames,
                    heads
                ),
            ));
        }
        let len = q.rows() / frames;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![0.0f32; qv.len()];
        let mut probs = if self.recording {
            vec![0.0f32; frames * heads * len * len]
        } else {
            Vec::new()
        };
        let mut scores = vec![0.0f32; len * len];
        for f in 0..frames {
            for h in 0..heads {
                let base = f * len * d + h * dh;
                unsafe {
                    // scores = scale * Q K^T over this frame/head subview.
                    matrixmultiply::sgemm(
                        len,
                        dh,
                        len,
                        scale,
                        qv.as_ptr().add(base),
                        d as isize,
                        1,
                        kv.as_ptr().add(base),
                        1,
                        d as isize,
                        0.0,
                        scores.as_mut_ptr(),
                        len as isize,
                        1,
                    );
                }
                causal_softmax_rows(&mut scores, len);
                if self.recording {
                    let slot = (f * heads + h) * len * len;
                    probs[slot..slot + len * len].copy_from_slice(&scores);
                }
                unsafe {
                    // out subview = P V.
                    matrixmultiply::sgemm(
                        len,
                        len,
                        dh,
                        1.0,
                        scores.as_ptr(),
                        len as isize,
                        1,
                        vv.as_ptr().add(base),
                        d as isize,
                        1,
                        0.0,
                        out.as_mut_ptr().add(base),
                        d as isize,
                        1,
                    );
                }
            }
        }
        check_finite("attention", &out)?;
        Ok(self.push(
            Data::Own(out),
            q.dims,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                frames,
                len,
                heads,
                probs,
            },
        ))
    }

    /// Copies the listed rows of `x` (indices may repeat).
    pub fn gather_rows(&mut self, x: Tensor, rows: Vec<usize>) -> Result<Tensor> {
        if rows.is_empty() || rows.iter().any(|&r| r >= x.rows()) {
            return Err(shape(
                "gather_rows",
                format!("{} indices into {} rows", rows.len(), x.rows()),
            ));
        }
        let d = x.cols();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let dims = Dims::new(rows.len(), d);
        Ok(self.push(Data::Own(out), dims, Op::GatherRows { x: x.id, rows }))
    }

    /// Row-wise softmax (no mask).
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let d = x.cols();
        if d == 0 {
            return Err(shape("softmax_rows", "zero columns".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..x.rows() {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let o = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                let e = ((row[c] - m) as f64).exp();
                o[c] = e as f32;
                sum += e;
            }
            let inv = (1.0 / sum) as f32;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        check_finite("softmax_rows", &out)?;
        Ok(self.push(Data::Own(out), x.dims, Op::SoftmaxRows { x: x.id }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Returns a 1x1 tensor.
    pub fn cross_entropy_mean(&mut self, logits: Tensor, targets: Vec<usize>) -> Result<Tensor> {
        let r = logits.rows();
        let c = logits.cols();
        if targets.len() != r || r == 0 {
            return Err(shape(
                "cross_entropy_mean",
                format!("{} targets for {} rows", targets.len(), r),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NnError::ClassOutOfRange {
                index: bad,
                classes: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = if self.recording {
            vec![0.0f32; lv.len()]
        } else {
            Vec::new()
        };
        let mut total = 0.0f64;
        for row in 0..r {
            let x = &lv[row * c..(row + 1) * c];
            let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for &v in x {
                sum += ((v as f64) - m).exp();
            }
            let lse = m + sum.ln();
            total += lse - x[targets[row]] as f64;
            if self.recording {
                let p = &mut probs[row * c..(row + 1) * c];
                for i in 0..c {
                    p[i] = ((x[i] as f64 - lse).exp()) as f32;
                }
            }
        }
        let mean = (total / r as f64) as f32;
        if !mean.is_finite() {
            return Err(NnError::NonFiniteValue {
                op: "cross_entropy_mean",
            });
        }
        Ok(self.push(
            Data::Own(vec![mean]),
            Dims::new(1, 1),
            Op::CrossEntropyMean {
                logits: logits.id,
                targets,
                probs,
            },
        ))
    }

    /// Scalar dot product with fixed weights (handy for reducing a tensor
    /// to a differentiable scalar in gradient checks).
    pub fn weighted_sum(&mut self, x: Tensor, weights: Vec<f32>) -> Result<Tensor> {
        if weights.len() != x.dims.len() {
            return Err(shape(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), x.dims.len()),
            ));
        }
        let s: f64 = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let out = s as f32;
        if !out.is_finite() {
            return Err(NnError::NonFiniteValue { op: "weighted_sum" });
        }
        Ok(self.push(
            Data::Own(vec![out]),
            Dims::new(1, 1),
            Op::WeightedSum {
                x: x.id,
                weights,
            },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - p`,
    /// scaling survivors by `1/(1-p)` so expectations match. Only
    /// meaningful while training; inference paths simply skip the op.
    pub fn dropout(&mut self, x: Tensor, p: f32, rng: &mut ChaCha12Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            // Identity; record a mask of ones to keep semantics uniform.
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..x.dims.len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        check_finite("dropout", &out)?;
        Ok(self.push(Data::Own(out), x.dims, Op::Dropout { x: x.id, mask }))
    }

    /// Reverse pass from `loss` (must be 1x1), seeding its gradient with
    /// `seed`. A tape supports exactly one backward pass: combine multiple
    /// objectives into one scalar with [`Tape::scale`]/[`Tape::add`] before
    /// differentiating, or use separate tapes and sum into a
    /// [`super::GradBuffer`].
    pub fn backward(&mut self, loss: Tensor, seed: f32) -> Result<()> {
        if !self.recording {
            return Err(NnError::NotRecorded);
        }
        if self.backward_done {
            return Err(NnError::BackwardConsumed);
        }
        self.backward_done = true;
        if loss.dims != Dims::new(1, 1) {
            return Err(shape(
                "backward",
                format!("loss must be 1x1, got {}x{}", loss.rows(), loss.cols()),
            ));
        }
        {
            let g = self.grad_buf(loss.id);
            g[0] += seed;
        }
        for id in (0..=loss.id as usize).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.step_backward(id as u32);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(NnError::NonFiniteValue { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: u32) -> &mut Vec<f32> {
        let node = &mut self.nodes[id as usize];
        let len = node.dims.len();
        node.grad.get_or_insert_with(|| vec![0.0f32; len])
    }

    fn take_grad(&mut self, id: u32) -> Vec<f32> {
        let node = &mut self.nodes[id as usize];
        let len = node.dims.len();
        node.grad.take().unwrap_or_else(|| vec![0.0f32; len])
    }

    fn put_grad(&mut self, id: u32, g: Vec<f32>) {
        self.nodes[id as usize].grad = Some(g);
    }

    fn step_backward(&mut self, id: u32) {
        // The output gradient is moved out so input-gradient buffers can be
        // borrowed mutably; it is restored before returning.
        let dy = self.nodes[id as usize]
            .grad
            .take()
            .expect("step_backward on node without gradient");
        let op = std::mem::replace(&mut self.nodes[id as usize].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (ad, bd) = (self.dims_of(a), self.dims_of(b));
                let out_dims = Dims::new(ad.rows, bd.cols);
                let mut ga = self.take_grad(a);
                gemm(false, true, 1.0, &dy, out_dims, self.data_of(b), bd, 1.0, &mut ga);
                self.put_grad(a, ga);
                let mut gb = self.take_grad(b);
                gemm(true, false, 1.0, self.data_of(a), ad, &dy, out_dims, 1.0, &mut gb);
                self.put_grad(b, gb);
            }
            &Op::Linear { x, w, b } => {
                let (xd, wd) = (self.dims_of(x), self.dims_of(w));
                let out_dims = Dims::new(xd.rows, wd.cols);
                let mut gx = self.take_grad(x);
                gemm(false, true, 1.0, &dy, out_dims, self.data_of(w), wd, 1.0, &mut gx);
                self.put_grad(x, gx);
                let mut gw = self.take_grad(w);
                gemm(true, false, 1.0, self.data_of(x), xd, &dy, out_dims, 1.0, &mut gw);
                self.put_grad(w, gw);
                let n = wd.cols;
                let mut col_sums = vec![0.0f64; n];
                for row in dy.chunks_exact(n) {
                    for (s, &v) in col_sums.iter_mut().zip(row) {
                        *s += v as f64;
                    }
                }
                let gb = self.grad_buf(b);
                for (g, s) in gb.iter_mut().zip(&col_sums) {
                    *g += *s as f32;
                }
            }
            &Op::Add { a, b } => {
                for &input in &[a, b] {
                    let g = self.grad_buf(input);
                    for (gv, &dv) in g.iter_mut().zip(&dy) {
                        *gv += dv;
                    }
                }
            }
            &Op::Scale { x, c } => {
                let g = self.grad_buf(x);
                for (gv, &dv) in g.iter_mut().zip(&dy) {
                    *gv += dv * c;
                }
            }
            &Op::Reshape { x } => {
                let g = self.grad_buf(x);
                for (gv, &dv) in g.iter_mut().zip(&dy) {
                    *gv += dv;
                }
            }
            &Op::SliceCols { x, start } => {
                let xd = self.dims_of(x);
                let w = self.nodes[id as usize].dims.cols;
                let g = self.grad_buf(x);
                for r in 0..xd.rows {
                    let dst = r * xd.cols + start;
                    let src = r * w;
                    for c in 0..w {
                        g[dst + c] += dy[src + c];
                    }
                }
            }
            &Op::InterleaveRows { a, b, frames } => {
                let (ad, bd) = (self.dims_of(a), self.dims_of(b));
                let d = ad.cols;
                let la = ad.rows / frames;
                let lb = if frames > 0 { bd.rows / frames } else { 0 };
                let l = la + lb;
                {
                    let ga = self.grad_buf(a);
                    for f in 0..frames {
                        for i in 0..la {
                            let src = ((f * l) + 2 * i) * d;
                            let dst = (f * la + i) * d;
                            for c in 0..d {
                                ga[dst + c] += dy[src + c];
                            }
                        }
                    }
                }
                let gb = self.grad_buf(b);
                for f in 0..frames {
                    for i in 0..lb {
                        let src = ((f * l) + 2 * i + 1) * d;
                        let dst = (f * lb + i) * d;
                        for c in 0..d {
                            gb[dst + c] += dy[src + c];
                        }
                    }
                }
            }
            &Op::AddPos { x, pos, frames } => {
                let xd = self.dims_of(x);
                let d = xd.cols;
                let len = xd.rows / frames;
                {
                    let gx = self.grad_buf(x);
                    for (gv, &dv) in gx.iter_mut().zip(&dy) {
                        *gv += dv;
                    }
                }
                let gp = self.grad_buf(pos);
                for f in 0..frames {
                    for i in 0..len {
                        let src = (f * len + i) * d;
                        let dst = i * d;
                        for c in 0..d {
                            gp[dst + c] += dy[src + c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = self.dims_of(x);
                let d = xd.cols;
                let mut gx_add = vec![0.0f32; xd.len()];
                let mut ggamma = vec![0.0f64; d];
                let mut gbeta = vec![0.0f64; d];
                {
                    let xv = self.data_of(x);
                    let gv = self.data_of(gamma);
                    for r in 0..xd.rows {
                        let (mean, inv) = cache[r];
                        let row = &xv[r * d..(r + 1) * d];
                        let dyr = &dy[r * d..(r + 1) * d];
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            let g = (dyr[c] * gv[c]) as f64;
                            sum_g += g;
                            sum_gx += g * xhat as f64;
                            ggamma[c] += (dyr[c] as f64) * xhat as f64;
                            gbeta[c] += dyr[c] as f64;
                        }
                        let mg = sum_g / d as f64;
                        let mgx = sum_gx / d as f64;
                        let o = &mut gx_add[r * d..(r + 1) * d];
                        for c in 0..d {
                            let xhat = ((row[c] - mean) * inv) as f64;
                            let g = (dyr[c] * gv[c]) as f64;
                            o[c] = ((g - mg - xhat * mgx) * inv as f64) as f32;
                        }
                    }
                }
                {
                    let gx = self.grad_buf(x);
                    for (gv, &av) in gx.iter_mut().zip(&gx_add) {
                        *gv += av;
                    }
                }
                {
                    let gg = self.grad_buf(gamma);
                    for (gv, &av) in gg.iter_mut().zip(&ggamma) {
                        *gv += av as f32;
                    }
                }
                let gb = self.grad_buf(beta);
                for (gv, &av) in gb.iter_mut().zip(&gbeta) {
                    *gv += av as f32;
                }
            }
            &Op::Gelu { x } => {
                let mut gx_add = vec![0.0f32; dy.len()];
                {
                    let xv = self.data_of(x);
                    for i in 0..dy.len() {
                        gx_add[i] = dy[i] * gelu_df(xv[i] as f64) as f32;
                    }
                }
                let gx = self.grad_buf(x);
                for (gv, &av) in gx.iter_mut().zip(&gx_add) {
                    *gv += av;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                frames,
                len,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (frames, len, heads) = (*frames, *len, *heads);
                let d = self.dims_of(q).cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let n = self.dims_of(q).len();
                let mut gq = self.take_grad(q);
                let mut gk = self.take_grad(k);
                let mut gv = self.take_grad(v);
                debug_assert!(gq.len() == n && gk.len() == n && gv.len() == n);
                let qv = self.data_of(q);
                let kv = self.data_of(k);
                let vv = self.data_of(v);
                let mut dp = vec![0.0f32; len * len];
                let mut ds = vec![0.0f32; len * len];
                for f in 0..frames {
                    for h in 0..heads {
                        let base = f * len * d + h * dh;
                        let p = &probs[(f * heads + h) * len * len..][..len * len];
                        unsafe {
                            // dV += P^T dO
                            matrixmultiply::sgemm(
                                len,
                                len,
                                dh,
                                1.0,
                                p.as_ptr(),
                                1,
                                len as isize,
                                dy.as_ptr().add(base),
                                d as isize,
                                1,
                                1.0,
                                gv.as_mut_ptr().add(base),
                                d as isize,
                                1,
                            );
                            // dP = dO V^T
                            matrixmultiply::sgemm(
                                len,
                                dh,
                                len,
                                1.0,
                                dy.as_ptr().add(base),
                                d as isize,
                                1,
                                vv.as_ptr().add(base),
                                1,
                                d as isize,
                                0.0,
                                dp.as_mut_ptr(),
                                len as isize,
                                1,
                            );
                        }
                        // dS = P .* (dP - rowsum(dP .* P)); zero rows above
                        // the diagonal fall out because P is zero there.
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dpr = &dp[i * len..(i + 1) * len];
                            let mut dot = 0.0f64;
                            for j in 0..=i {
                                dot += dpr[j] as f64 * pr[j] as f64;
                            }
                            let dsr = &mut ds[i * len..(i + 1) * len];
                            for j in 0..len {
                                dsr[j] = pr[j] * (dpr[j] - dot as f32);
                            }
                        }
                        unsafe {
                            // dQ += scale * dS K
                            matrixmultiply::sgemm(
                                len,
                                len,
                                dh,
                                scale,
                                ds.as_ptr(),
                                len as isize,
                                1,
                                kv.as_ptr().add(base),
                                d as isize,
                                1,
                                1.0,
                                gq.as_mut_ptr().add(base),
                                d as isize,
                                1,
                            );
                            // dK += scale * dS^T Q
                            matrixmultiply::sgemm(
                                len,
                                len,
                                dh,
                                scale,
                                ds.as_ptr(),
                                1,
                                len as isize,
                                qv.as_ptr().add(base),
                                d as isize,
                                1,
                                1.0,
                                gk.as_mut_ptr().add(base),
                                d as isize,
                                1,
                            );
                        }
                    }
                }
                self.put_grad(q, gq);
                self.put_grad(k, gk);
                self.put_grad(v, gv);
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                let d = self.dims_of(x).cols;
                let g = self.grad_buf(x);
                for (out_r, &src_r) in rows.iter().enumerate() {
                    let src = out_r * d;
                    let dst = src_r * d;
                    for c in 0..d {
                        g[dst + c] += dy[src + c];
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                let out_vals = self.nodes[id as usize].data.as_slice().to_vec();
                let d = self.dims_of(x).cols;
                let g = self.grad_buf(x);
                for r in 0..out_vals.len() / d {
                    let p = &out_vals[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut dot = 0.0f64;
                    for c in 0..d {
                        dot += dyr[c] as f64 * p[c] as f64;
                    }
                    let gr = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        gr[c] += p[c] * (dyr[c] - dot as f32);
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let c = self.dims_of(logits).cols;
                let r = targets.len();
                let seed = dy[0] / r as f32;
                let g = self.grad_buf(logits);
                for row in 0..r {
                    let pr = &probs[row * c..(row + 1) * c];
                    let gr = &mut g[row * c..(row + 1) * c];
                    for i in 0..c {
                        gr[i] += seed * pr[i];
                    }
                    gr[targets[row]] -= seed;
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                let s = dy[0];
                let g = self.grad_buf(x);
                for (gv, &w) in g.iter_mut().zip(weights) {
                    *gv += s * w;
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let g = self.grad_buf(x);
                for i in 0..dy.len() {
                    g[i] += dy[i] * mask[i];
                }
            }
        }
        let node = &mut self.nodes[id as usize];
        node.op = op;
        node.grad = Some(dy);
    }
}

fn shape(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

fn check_finite(op: &'static str, xs: &[f32]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFiniteValue { op })
    }
}

/// Causal row softmax in place over an `len x len` score matrix: row `i`
/// normalizes columns `0..=i`; columns above the diagonal become exactly 0.
fn causal_softmax_rows(scores: &mut [f32], len: usize) {
    for i in 0..len {
        let row = &mut scores[i * len..(i + 1) * len];
        let mut m = f32::NEG_INFINITY;
        for &v in &row[..=i] {
            m = m.max(v);
        }
        let mut sum = 0.0f64;
        for v in row[..=i].iter_mut() {
            let e = ((*v - m) as f64).exp();
            *v = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for v in row[..=i].iter_mut() {
            *v *= inv;
        }
        for v in row[i + 1..].iter_mut() {
            *v = 0.0;
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        tape.constant(Dims::new(rows, cols), data).unwrap()
    }

    #[test]
    fn weighted_sum_gradient_is_the_weights() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let loss = tape.weighted_sum(x, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(tape.value(loss), &[2.0 + 8.0 + 18.0]);
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn reshape_preserves_elements_and_routes_gradient() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = tape.reshape(x, Dims::new(3, 2)).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
        assert_eq!(r.dims, Dims::new(3, 2));
        let loss = tape.weighted_sum(r, vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 2.0, 0.0, 0.0, 3.0]);
        let bad = tape.reshape(x, Dims::new(4, 2)).unwrap_err();
        assert!(matches!(bad, NnError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_forward_and_grad_match_hand_calc() {
        let mut tape = Tape::new(true);
        let a = t(&mut tape, 1, 2, vec![1.0, 2.0]);
        let b = t(&mut tape, 2, 1, vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        tape.backward(c, 1.0).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut tape = Tape::new(true);
        let logits = t(&mut tape, 2, 4, vec![0.0; 8]);
        let loss = tape.cross_entropy_mean(logits, vec![1, 3]).unwrap();
        let expect = (4.0f64).ln() as f32;
        assert!((tape.value(loss)[0] - expect).abs() < 1e-6);
        tape.backward(loss, 1.0).unwrap();
        // Gradient per row: (1/4 - onehot)/rows.
        let g = tape.grad(logits).unwrap();
        assert!((g[0] - 0.125).abs() < 1e-6);
        assert!((g[1] + 0.375).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new(true);
        let logits = t(&mut tape, 1, 2, vec![0.0, 0.0]);
        let err = tape.cross_entropy_mean(logits, vec![2]).unwrap_err();
        assert!(matches!(err, NnError::ClassOutOfRange { index: 2, classes: 2 }));
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        // One token: the causal softmax row is [1], so out = v.
        let mut tape = Tape::new(true);
        let q = t(&mut tape, 1, 4, vec![0.3, -0.1, 0.8, 0.5]);
        let k = t(&mut tape, 1, 4, vec![1.0, 2.0, -1.0, 0.0]);
        let v = t(&mut tape, 1, 4, vec![5.0, 6.0, 7.0, 8.0]);
        let o = tape.attention(q, k, v, 1, 2).unwrap();
        assert_eq!(tape.value(o), tape.value(v));
    }

    #[test]
    fn attention_probs_are_causal_and_row_stochastic() {
        let mut tape = Tape::new(true);
        let n = 3;
        let d = 4;
        let data: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.37).sin()).collect();
        let q = t(&mut tape, n, d, data.clone());
        let k = t(&mut tape, n, d, data.clone());
        let v = t(&mut tape, n, d, data);
        let o = tape.attention(q, k, v, 1, 2).unwrap();
        // Reach into the recorded probs via backward: perturbing a future
        // token must not change earlier outputs, which only holds if the
        // mask is exact. Here we check row sums through the public value:
        // for the first token, out == v row 0 per head.
        let ov = tape.value(o);
        let vv = tape.value(v);
        assert_eq!(&ov[..d], &vv[..d]);
    }

    #[test]
    fn causal_softmax_zero_above_diagonal_exactly() {
        let mut s = vec![1.0f32; 9];
        causal_softmax_rows(&mut s, 3);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[5], 0.0);
        assert_eq!(s[0], 1.0);
        for i in 0..3 {
            let sum: f32 = s[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn add_shape_mismatch_is_reported() {
        let mut tape = Tape::new(true);
        let a = t(&mut tape, 1, 2, vec![0.0, 0.0]);
        let b = t(&mut tape, 2, 1, vec![0.0, 0.0]);
        assert!(matches!(
            tape.add(a, b),
            Err(NnError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_forward_is_caught() {
        let mut tape = Tape::new(true);
        let a = t(&mut tape, 1, 1, vec![f32::MAX]);
        let b = t(&mut tape, 1, 1, vec![f32::MAX]);
        assert!(matches!(
            tape.add(a, b),
            Err(NnError::NonFiniteValue { op: "add" })
        ));
    }

    #[test]
    fn non_recorded_tape_refuses_backward() {
        let mut tape = Tape::new(false);
        let x = t(&mut tape, 1, 1, vec![1.0]);
        let loss = tape.weighted_sum(x, vec![1.0]).unwrap();
        assert!(matches!(
            tape.backward(loss, 1.0),
            Err(NnError::NotRecorded)
        ));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 1, 1, vec![3.0]);
        let loss = tape.weighted_sum(x, vec![2.0]).unwrap();
        tape.backward(loss, 0.5).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 1.0).abs() < 1e-6, "seed scales");
        assert!(matches!(
            tape.backward(loss, 1.0),
            Err(NnError::BackwardConsumed)
        ));
    }

    #[test]
    fn interleave_round_trips_rows() {
        let mut tape = Tape::new(true);
        // 2 frames, 2 a-rows + 1 b-row each, width 2.
        let a = t(&mut tape, 4, 2, vec![1., 1., 2., 2., 5., 5., 6., 6.]);
        let b = t(&mut tape, 2, 2, vec![3., 3., 7., 7.]);
        let o = tape.interleave_rows(a, b, 2).unwrap();
        assert_eq!(
            tape.value(o),
            &[1., 1., 3., 3., 2., 2., 5., 5., 7., 7., 6., 6.]
        );
        let loss_w: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let loss = tape.weighted_sum(o, loss_w).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0., 1., 4., 5., 6., 7., 10., 11.]);
        assert_eq!(tape.grad(b).unwrap(), &[2., 3., 8., 9.]);
    }

    #[test]
    fn gather_rows_scatters_gradient_with_repeats() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 3, 1, vec![10.0, 20.0, 30.0]);
        let g = tape.gather_rows(x, vec![2, 0, 2]).unwrap();
        assert_eq!(tape.value(g), &[30.0, 10.0, 30.0]);
        let loss = tape.weighted_sum(g, vec![1.0, 1.0, 1.0]).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_uniform() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 1, 4, vec![2.0, 2.0, 2.0, 2.0]);
        let s = tape.softmax_rows(x).unwrap();
        for &v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_with_unit_mask() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 1, 4, vec![1.0, -2.0, 3.0, -4.0]);
        let mut rng = crate::channel::frame_rng(1, 0);
        let d = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        let loss = tape.weighted_sum(d, vec![1.0; 4]).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new(true);
        let x = t(&mut tape, 1, 1000, vec![1.0; 1000]);
        let mut rng = crate::channel::frame_rng(2, 0);
        let d = tape.dropout(x, 0.5, &mut rng).unwrap();
        let vals = tape.value(d);
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-6));
        assert!((350..650).contains(&kept), "kept {kept} of 1000 at p=0.5");
    }
}
