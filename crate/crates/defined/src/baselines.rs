//! Classical detection baselines: MMSE channel estimation with joint
//! nearest-symbol search, its decision-feedback refinement, and the
//! perfect-CSI genie bound.
//!
//! All detectors share one symbol-index convention (see
//! [`crate::constellation`]) and operate on the power-normalized transmit
//! vectors actually sent over the channel, so their outputs are directly
//! comparable with the learned detector's.

use crate::channel::PromptFrame;
use crate::constellation::Constellation;
use crate::linalg::{CMat, SingularMatrix};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    /// The regularized pilot Gram matrix had no usable pivot (only possible
    /// with zero noise variance and rank-deficient pilots).
    #[error("singular pilot system: pilot Gram matrix is not invertible")]
    SingularSystem,
}

impl From<SingularMatrix> for BaselineError {
    fn from(_: SingularMatrix) -> Self {
        BaselineError::SingularSystem
    }
}

/// Known transmit/receive pairs available to an estimator: `x` is
/// `k x n_t` (power-normalized transmitted vectors), `y` is `k x n_r`.
#[derive(Clone, Debug)]
pub struct PilotSet {
    pub x: CMat,
    pub y: CMat,
    pub sigma2: f64,
}

impl PilotSet {
    /// The first `k` slots of `frame` as pilots.
    pub fn from_frame(frame: &PromptFrame, cons: &Constellation, k: usize) -> Self {
        assert!(k <= frame.t_len, "pilot count exceeds frame length");
        let n_t = frame.task.n_t;
        let n_r = frame.task.n_r;
        let mut x = CMat::zeros(k, n_t);
        let mut y = CMat::zeros(k, n_r);
        for t in 0..k {
            for (j, v) in frame.tx_at(t, cons).into_iter().enumerate() {
                x.set(t, j, v);
            }
            for (r, &v) in frame.y_at(t).iter().enumerate() {
                y.set(t, r, v);
            }
        }
        PilotSet {
            x,
            y,
            sigma2: frame.task.sigma2,
        }
    }

    /// Appends one transmit/receive pair (used for decision feedback, where
    /// decisions are weighted exactly like pilots).
    pub fn push(&mut self, tx: &[Complex64], y: &[Complex64]) {
        let mut x_new = CMat::zeros(self.x.rows() + 1, self.x.cols());
        let mut y_new = CMat::zeros(self.y.rows() + 1, self.y.cols());
        for r in 0..self.x.rows() {
            for c in 0..self.x.cols() {
                x_new.set(r, c, self.x.get(r, c));
            }
            for c in 0..self.y.cols() {
                y_new.set(r, c, self.y.get(r, c));
            }
        }
        for (c, &v) in tx.iter().enumerate() {
            x_new.set(self.x.rows(), c, v);
        }
        for (c, &v) in y.iter().enumerate() {
            y_new.set(self.y.rows(), c, v);
        }
        self.x = x_new;
        self.y = y_new;
    }
}

/// Regularized least-squares channel estimate
/// `H_hat = ((X^H X + sigma2 I)^-1 X^H Y)^T`, returned as `n_r x n_t`.
///
/// With zero noise variance and full-rank pilots this reduces to the exact
/// least-squares solution; with `sigma2 > 0` the system is always
/// invertible.
pub fn mmse_channel_estimate(pilots: &PilotSet) -> Result<CMat, BaselineError> {
    let mut gram = pilots.x.herm_mul(&pilots.x);
    gram.add_diag(pilots.sigma2);
    let rhs = pilots.x.herm_mul(&pilots.y);
    let h_t = gram.solve(&rhs)?;
    Ok(h_t.transpose())
}

/// Joint maximum-likelihood symbol detection: exhaustive search over all
/// `C^{n_t}` candidate index vectors for the minimizer of
/// `||y - H x||^2`, where candidate transmit vectors use the same
/// `1/sqrt(n_t)` power scaling as the channel. Ties resolve to the
/// lexicographically smallest index vector.
pub fn nearest_symbol_detect(
    h: &CMat,
    y: &[Complex64],
    cons: &Constellation,
) -> Vec<usize> {
    let n_r = h.rows();
    let n_t = h.cols();
    assert_eq!(y.len(), n_r, "received vector length mismatch");
    let c = cons.class_count();
    let scale = 1.0 / (n_t as f64).sqrt();
    // Effective column j for symbol index i: h[:, j] * point(i) / sqrt(n_t).
    let mut cols: Vec<Vec<Complex64>> = Vec::with_capacity(n_t);
    for j in 0..n_t {
        let mut col = Vec::with_capacity(c * n_r);
        for i in 0..c {
            let p = cons.point(i) * scale;
            for r in 0..n_r {
                col.push(h.get(r, j) * p);
            }
        }
        cols.push(col);
    }
    let mut idx = vec![0usize; n_t];
    let mut best_idx = idx.clone();
    let mut best_d = f64::INFINITY;
    let mut acc = vec![Complex64::new(0.0, 0.0); n_r];
    loop {
        for r in 0..n_r {
            let mut s = Complex64::new(0.0, 0.0);
            for (j, col) in cols.iter().enumerate() {
                s += col[idx[j] * n_r + r];
            }
            acc[r] = s;
        }
        let d: f64 = y
            .iter()
            .zip(&acc)
            .map(|(yv, hv)| (yv - hv).norm_sqr())
            .sum();
        // Strict improvement keeps the first (lexicographically smallest)
        // minimizer, since enumeration order is lexicographic.
        if d < best_d {
            best_d = d;
            best_idx.copy_from_slice(&idx);
        }
        let mut j = n_t;
        loop {
            if j == 0 {
                return best_idx;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < c {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Detections for slots `k..T` of one frame, with the matching truth.
#[derive(Clone, Debug)]
pub struct DetectionRun {
    pub k: usize,
    pub n_t: usize,
    /// Detected indices, row-major `(T - k) x n_t`.
    pub detected: Vec<usize>,
    /// True indices for the same slots.
    pub truth: Vec<usize>,
}

impl DetectionRun {
    pub fn slots(&self) -> usize {
        self.truth.len() / self.n_t
    }

    pub fn detected_at(&self, rel_t: usize) -> &[usize] {
        &self.detected[rel_t * self.n_t..(rel_t + 1) * self.n_t]
    }

    pub fn truth_at(&self, rel_t: usize) -> &[usize] {
        &self.truth[rel_t * self.n_t..(rel_t + 1) * self.n_t]
    }

    /// Per-antenna symbol errors.
    pub fn errors(&self) -> usize {
        self.detected
            .iter()
            .zip(&self.truth)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// MMSE baseline: estimate the channel from the first `k` slots once, then
/// detect every remaining slot with that fixed estimate.
pub fn run_mmse(
    frame: &PromptFrame,
    cons: &Constellation,
    k: usize,
) -> Result<DetectionRun, BaselineError> {
    let pilots = PilotSet::from_frame(frame, cons, k);
    let h_hat = mmse_channel_estimate(&pilots)?;
    let mut run = empty_run(frame, k);
    for t in k..frame.t_len {
        let det = nearest_symbol_detect(&h_hat, frame.y_at(t), cons);
        run.detected.extend_from_slice(&det);
        run.truth.extend_from_slice(frame.x_at(t));
    }
    Ok(run)
}

/// Decision-feedback MMSE: before each slot, re-estimate the channel from
/// the pilots plus all previous decisions (weighted identically to pilots,
/// with the noise term fixed at the true `sigma2`), detect, and feed the
/// decision back.
pub fn run_mmse_df(
    frame: &PromptFrame,
    cons: &Constellation,
    k: usize,
) -> Result<DetectionRun, BaselineError> {
    let mut pilots = PilotSet::from_frame(frame, cons, k);
    let scale = 1.0 / (frame.task.n_t as f64).sqrt();
    let mut run = empty_run(frame, k);
    for t in k..frame.t_len {
        let h_hat = mmse_channel_estimate(&pilots)?;
        let det = nearest_symbol_detect(&h_hat, frame.y_at(t), cons);
        let tx: Vec<Complex64> = det.iter().map(|&i| cons.point(i) * scale).collect();
        pilots.push(&tx, frame.y_at(t));
        run.detected.extend_from_slice(&det);
        run.truth.extend_from_slice(frame.x_at(t));
    }
    Ok(run)
}

/// Genie bound: detect every slot with the true channel matrix.
pub fn perfect_csi_detect(frame: &PromptFrame, cons: &Constellation) -> DetectionRun {
    let task = &frame.task;
    let mut h = CMat::zeros(task.n_r, task.n_t);
    for r in 0..task.n_r {
        for c in 0..task.n_t {
            h.set(r, c, task.h_at(r, c));
        }
    }
    let mut run = empty_run(frame, 0);
    for t in 0..frame.t_len {
        let det = nearest_symbol_detect(&h, frame.y_at(t), cons);
        run.detected.extend_from_slice(&det);
        run.truth.extend_from_slice(frame.x_at(t));
    }
    run
}

fn empty_run(frame: &PromptFrame, k: usize) -> DetectionRun {
    let slots = frame.t_len - k;
    DetectionRun {
        k,
        n_t: frame.task.n_t,
        detected: Vec::with_capacity(slots * frame.task.n_t),
        truth: Vec::with_capacity(slots * frame.task.n_t),
    }
}

/// Exact average symbol error rate of coherent BPSK detection with perfect
/// CSI on a Rayleigh-faded SISO channel at average SNR `gamma`:
/// `(1 - sqrt(gamma / (1 + gamma))) / 2`.
pub fn rayleigh_bpsk_ser(gamma: f64) -> f64 {
    0.5 * (1.0 - (gamma / (1.0 + gamma)).sqrt())
}
