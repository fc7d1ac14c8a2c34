//! From-scratch reverse-mode automatic differentiation and the optimizer.
//!
//! The design is a flat arena tape: every operation appends one node
//! holding its output values plus whatever it needs for the backward pass
//! (see [`tape::Tape`]). Tensors are dense row-major `f32` matrices; the
//! handle type [`Tensor`] is a copyable index into the tape. Reductions
//! (means, softmax normalizers, bias-gradient column sums) accumulate in
//! `f64` before rounding back, which keeps batched losses stable without
//! giving up `f32` storage.
//!
//! Operations are batched: a whole batch of sequences is folded into the
//! row dimension, so the heavy lifting inside [`tape`] is a handful of
//! dense GEMM calls per layer instead of per-element graph walks.

mod adam;
mod tape;

pub use adam::{AdamHyper, GradBuffer, LrSchedule, ParamStore};
pub use tape::{Tape, Tensor};

use thiserror::Error;

/// Row/column shape of a tape tensor. Everything in this crate is rank 2;
/// vectors are single-row matrices and scalars are 1x1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Dims { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward requested on a tape recorded with recording disabled")]
    NotRecorded,
    #[error("backward already ran on this tape; build a combined scalar instead")]
    BackwardConsumed,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

/// `c = alpha * op(a) * op(b) + beta * c` for dense row-major matrices with
/// optional logical transposes expressed through strides.
///
/// `a_dims`/`b_dims` are the *stored* shapes; `ta`/`tb` request transposed
/// participation. `c` must be `m x n` row-major where `m`/`n` are the
/// post-transpose outer dims.
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    alpha: f32,
    a: &[f32],
    a_dims: Dims,
    b: &[f32],
    b_dims: Dims,
    beta: f32,
    c: &mut [f32],
) {
    let (m, k) = if ta {
        (a_dims.cols, a_dims.rows)
    } else {
        (a_dims.rows, a_dims.cols)
    };
    let (kb, n) = if tb {
        (b_dims.cols, b_dims.rows)
    } else {
        (b_dims.rows, b_dims.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    assert!(a.len() >= a_dims.len() && b.len() >= b_dims.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        return;
    }
    let (rsa, csa) = if ta {
        (1isize, a_dims.cols as isize)
    } else {
        (a_dims.cols as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, b_dims.cols as isize)
    } else {
        (b_dims.cols as isize, 1isize)
    };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
