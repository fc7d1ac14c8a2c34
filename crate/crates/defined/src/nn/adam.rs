//! Parameter storage and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] in registration order; that order is
//! the single source of truth for checkpoint layout and gradient buffers.
//! Values are held behind `Arc` so tapes can attach them as shared leaves
//! without copying; between steps the store holds the only strong
//! reference, so updates mutate in place.

use super::{Dims, NnError, Result, Tape, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

/// One named parameter tensor with its Adam moment buffers.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub dims: Dims,
    pub value: Arc<Vec<f32>>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Ordered collection of model parameters.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    /// Number of Adam updates applied so far (drives bias correction).
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique and registration order
    /// is permanent.
    pub fn register(&mut self, name: &str, dims: Dims, init: Vec<f32>) -> usize {
        assert_eq!(init.len(), dims.len(), "init length mismatch for {name}");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let idx = self.params.len();
        self.by_name.insert(name.to_string(), idx);
        self.params.push(Param {
            name: name.to_string(),
            dims,
            value: Arc::new(init),
            m: vec![0.0; dims.len()],
            v: vec![0.0; dims.len()],
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    /// Total scalar count across parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.dims.len()).sum()
    }

    pub fn adam_t(&self) -> u64 {
        self.adam_t
    }

    /// Replaces a parameter's value (checkpoint restore).
    pub fn load_value(&mut self, i: usize, value: Vec<f32>, m: Vec<f32>, v: Vec<f32>) {
        let p = &mut self.params[i];
        assert_eq!(value.len(), p.dims.len());
        assert_eq!(m.len(), p.dims.len());
        assert_eq!(v.len(), p.dims.len());
        p.value = Arc::new(value);
        p.m = m;
        p.v = v;
    }

    pub fn set_adam_t(&mut self, t: u64) {
        self.adam_t = t;
    }

    /// One Adam step over every parameter. Update rule, in exactly this
    /// evaluation order per scalar (all `f32` arithmetic):
    ///
    /// ```text
    /// m = b1*m + (1-b1)*g
    /// v = b2*v + (1-b2)*g*g
    /// p = p - lr * (m*c1) / (sqrt(v*c2) + eps)
    /// ```
    ///
    /// where `c1 = 1/(1-b1^t)`, `c2 = 1/(1-b2^t)` are the bias corrections
    /// for step `t` (computed in `f64`, applied as `f32`). Gradients are
    /// zeroed afterwards.
    pub fn adam_step(&mut self, grads: &mut GradBuffer, lr: f64, hp: AdamHyper) -> Result<()> {
        assert_eq!(grads.bufs.len(), self.params.len(), "grad buffer mismatch");
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let c1 = (1.0 / (1.0 - (hp.beta1 as f64).powi(t))) as f32;
        let c2 = (1.0 / (1.0 - (hp.beta2 as f64).powi(t))) as f32;
        let lr = lr as f32;
        let (b1, b2, eps) = (hp.beta1, hp.beta2, hp.eps);
        for (p, g) in self.params.iter_mut().zip(&mut grads.bufs) {
            let value = Arc::make_mut(&mut p.value);
            for i in 0..value.len() {
                let gi = g[i];
                let m = b1 * p.m[i] + (1.0 - b1) * gi;
                let v = b2 * p.v[i] + (1.0 - b2) * gi * gi;
                p.m[i] = m;
                p.v[i] = v;
                value[i] -= lr * (m * c1) / ((v * c2).sqrt() + eps);
            }
            if !value.iter().all(|x| x.is_finite()) {
                return Err(NnError::NonFiniteValue { op: "adam_step" });
            }
            g.fill(0.0);
        }
        Ok(())
    }
}

/// Adam hyperparameters; defaults are the standard (0.9, 0.999, 1e-8).
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
pub struct GradBuffer {
    bufs: Vec<Vec<f32>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            bufs: (0..store.len())
                .map(|i| vec![0.0f32; store.param(i).dims.len()])
                .collect(),
        }
    }

    /// Adds the gradients present on `tape` for `handles[i]` into buffer
    /// `i`. Handles must come from [`Tape::attach`] on the same store.
    pub fn accumulate(&mut self, tape: &Tape, handles: &[Tensor]) {
        assert_eq!(handles.len(), self.bufs.len());
        for (buf, &h) in self.bufs.iter_mut().zip(handles) {
            if let Some(g) = tape.grad(h) {
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
        }
    }

    pub fn buf(&self, i: usize) -> &[f32] {
        &self.bufs[i]
    }

    pub fn buf_mut(&mut self, i: usize) -> &mut Vec<f32> {
        &mut self.bufs[i]
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }
}

/// Warmup plus optional cosine decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub cosine_decay: bool,
    /// Total steps the decay stretches over (ignored unless decaying).
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for 0-based step `step`: linear warmup from
    /// `base/warmup` to `base`, then either flat or a half-cosine to zero
    /// at `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || self.total_steps <= self.warmup_steps {
            return self.base;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let done = (step.min(self.total_steps) - self.warmup_steps) as f64;
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * done / span).cos())
    }
}
