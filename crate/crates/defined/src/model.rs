//! Decoder-only sequence model over interleaved received/transmitted tokens.
//!
//! A frame's first `prefix` slots become the token sequence
//! `[y_0, x_0, y_1, x_1, .., y_{prefix-1}]`: received vectors at even
//! positions, transmitted vectors at odd positions, each embedded from its
//! re/im components. The hidden state at an even position (a received token)
//! is all the model may use to classify that slot's transmitted symbols, so
//! detection is causal in the context.

use crate::channel::PromptFrame;
use crate::constellation::Constellation;
use crate::nn::{Dims, NnError, ParamStore, Tape, Tensor};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("prefix of {len} received symbols exceeds the positional table's {max} slots")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch does not match the model: {detail}")]
    BatchMismatch { detail: String },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture geometry. Stored alongside parameters in checkpoints, so
/// every field is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum received symbols per frame; the positional table covers the
    /// `2 * t_max - 1` token positions that many slots produce.
    pub t_max: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub class_count: usize,
    pub dropout: f32,
}

impl ModelConfig {
    /// Standard geometry: 64-wide, 8 blocks, 8 heads, no dropout.
    pub fn new(n_r: usize, n_t: usize, class_count: usize, t_max: usize) -> Self {
        Self {
            d_e: 64,
            n_layers: 8,
            n_heads: 8,
            t_max,
            n_r,
            n_t,
            class_count,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_e == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err("d_e, n_layers and n_heads must be positive".into());
        }
        if self.d_e % self.n_heads != 0 {
            return Err(format!(
                "d_e {} is not divisible by n_heads {}",
                self.d_e, self.n_heads
            ));
        }
        if self.t_max == 0 || self.n_r == 0 || self.n_t == 0 {
            return Err("t_max, n_r and n_t must be positive".into());
        }
        if self.class_count < 2 {
            return Err(format!("class_count {} must be at least 2", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Token count for a frame with `prefix` received symbols.
    pub fn seq_len(prefix: usize) -> usize {
        2 * prefix - 1
    }

    /// Total scalar parameters of this geometry.
    pub fn param_count(&self) -> usize {
        build_layout(self).0.iter().map(|s| s.dims.len()).sum()
    }
}

#[derive(Clone, Copy)]
enum InitRule {
    /// N(0, 0.02).
    Normal,
    /// N(0, 0.02 / sqrt(2 * n_layers)); applied to the two matrices feeding
    /// each residual sum so depth does not inflate the residual stream.
    Residual,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    dims: Dims,
    init: InitRule,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Idx {
    wy: usize,
    wx: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    final_g: usize,
    final_b: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: InitRule) -> usize {
        self.specs.push(ParamSpec {
            name,
            dims: Dims::new(rows, cols),
            init,
        });
        self.specs.len() - 1
    }
}

/// The parameter layout. Registration order here is the checkpoint layout,
/// so it must never change for a given config.
fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Idx) {
    let d = cfg.d_e;
    let mut b = LayoutBuilder::default();
    let wy = b.add("embed.wy".into(), 2 * cfg.n_r, d, InitRule::Normal);
    let wx = b.add("embed.wx".into(), 2 * cfg.n_t, d, InitRule::Normal);
    let pos = b.add(
        "embed.pos".into(),
        ModelConfig::seq_len(cfg.t_max),
        d,
        InitRule::Normal,
    );
    let blocks = (0..cfg.n_layers)
        .map(|i| BlockIdx {
            ln1_g: b.add(format!("block{i}.ln1.g"), 1, d, InitRule::Ones),
            ln1_b: b.add(format!("block{i}.ln1.b"), 1, d, InitRule::Zeros),
            wqkv: b.add(format!("block{i}.attn.wqkv"), d, 3 * d, InitRule::Normal),
            bqkv: b.add(format!("block{i}.attn.bqkv"), 1, 3 * d, InitRule::Zeros),
            wo: b.add(format!("block{i}.attn.wo"), d, d, InitRule::Residual),
            bo: b.add(format!("block{i}.attn.bo"), 1, d, InitRule::Zeros),
            ln2_g: b.add(format!("block{i}.ln2.g"), 1, d, InitRule::Ones),
            ln2_b: b.add(format!("block{i}.ln2.b"), 1, d, InitRule::Zeros),
            w1: b.add(format!("block{i}.mlp.w1"), d, 4 * d, InitRule::Normal),
            b1: b.add(format!("block{i}.mlp.b1"), 1, 4 * d, InitRule::Zeros),
            w2: b.add(format!("block{i}.mlp.w2"), 4 * d, d, InitRule::Residual),
            b2: b.add(format!("block{i}.mlp.b2"), 1, d, InitRule::Zeros),
        })
        .collect();
    let final_g = b.add("final_ln.g".into(), 1, d, InitRule::Ones);
    let final_b = b.add("final_ln.b".into(), 1, d, InitRule::Zeros);
    let head_w = b.add("head.w".into(), d, cfg.n_t * cfg.class_count, InitRule::Normal);
    let head_b = b.add("head.b".into(), 1, cfg.n_t * cfg.class_count, InitRule::Zeros);
    (
        b.specs,
        Idx {
            wy,
            wx,
            pos,
            blocks,
            final_g,
            final_b,
            head_w,
            head_b,
        },
    )
}

/// A rectangular batch of frame prefixes ready for embedding. Row layouts
/// are frame-major: `y` holds `frames * prefix` rows of `2 * n_r` reals
/// (re components then im components), `x` holds `frames * (prefix - 1)`
/// rows of `2 * n_t` in the same component order.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub frames: usize,
    pub prefix: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub y: Vec<f32>,
    pub x: Vec<f32>,
}

impl TokenBatch {
    pub fn from_parts(
        frames: usize,
        prefix: usize,
        n_r: usize,
        n_t: usize,
        y: Vec<f32>,
        x: Vec<f32>,
    ) -> Self {
        assert!(frames > 0 && prefix > 0, "empty batch");
        assert_eq!(y.len(), frames * prefix * 2 * n_r, "y row mismatch");
        assert_eq!(x.len(), frames * (prefix - 1) * 2 * n_t, "x row mismatch");
        Self {
            frames,
            prefix,
            n_r,
            n_t,
            y,
            x,
        }
    }

    /// Batch with ground-truth transmitted symbols as the odd tokens.
    pub fn from_prompts(frames: &[PromptFrame], prefix: usize, cons: &Constellation) -> Self {
        assert!(!frames.is_empty());
        let (n_r, n_t) = (frames[0].task.n_r, frames[0].task.n_t);
        let mut y = Vec::with_capacity(frames.len() * prefix * 2 * n_r);
        let mut x = Vec::with_capacity(frames.len() * (prefix - 1) * 2 * n_t);
        for f in frames {
            assert!(prefix <= f.t_len, "prefix exceeds frame length");
            for t in 0..prefix {
                y.extend(Self::received_row(f.y_at(t)));
                if t + 1 < prefix {
                    x.extend(Self::symbol_row(f.x_at(t), n_t, cons));
                }
            }
        }
        Self::from_parts(frames.len(), prefix, n_r, n_t, y, x)
    }

    /// Real embedding input for a received vector.
    pub fn received_row(y: &[Complex64]) -> Vec<f32> {
        let mut row = Vec::with_capacity(2 * y.len());
        row.extend(y.iter().map(|c| c.re as f32));
        row.extend(y.iter().map(|c| c.im as f32));
        row
    }

    /// Real embedding input for transmitted symbol indices, at the power
    /// scaling actually sent over the channel.
    pub fn symbol_row(indices: &[usize], n_t: usize, cons: &Constellation) -> Vec<f32> {
        let scale = 1.0 / (n_t as f64).sqrt();
        let mut row = Vec::with_capacity(2 * indices.len());
        row.extend(indices.iter().map(|&i| (cons.point(i).re * scale) as f32));
        row.extend(indices.iter().map(|&i| (cons.point(i).im * scale) as f32));
        row
    }

    /// Hidden-state row indices of the received tokens for the 0-based
    /// `slots`, frame-major then slot-major.
    pub fn y_token_rows(&self, slots: &[usize]) -> Vec<usize> {
        let l = ModelConfig::seq_len(self.prefix);
        let mut rows = Vec::with_capacity(self.frames * slots.len());
        for f in 0..self.frames {
            for &s in slots {
                assert!(s < self.prefix, "slot {s} outside prefix {}", self.prefix);
                rows.push(f * l + 2 * s);
            }
        }
        rows
    }
}

/// Model parameters plus the wiring to run them on a tape.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    idx: Idx,
}

impl Model {
    /// Fresh initialization, deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate().map_err(ModelError::Config)?;
        let (specs, idx) = build_layout(&cfg);
        let residual_std = 0.02 / ((2 * cfg.n_layers) as f32).sqrt();
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let residual = Normal::new(0.0f32, residual_std).expect("valid std");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in &specs {
            let n = spec.dims.len();
            let value = match spec.init {
                InitRule::Zeros => vec![0.0; n],
                InitRule::Ones => vec![1.0; n],
                InitRule::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                InitRule::Residual => (0..n).map(|_| residual.sample(&mut rng)).collect(),
            };
            store.register(&spec.name, spec.dims, value);
        }
        Ok(Self { cfg, store, idx })
    }

    /// Wraps an existing store (a loaded checkpoint), verifying it has
    /// exactly the layout this config produces.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        cfg.validate().map_err(ModelError::Config)?;
        let (specs, idx) = build_layout(&cfg);
        if store.len() != specs.len() {
            return Err(ModelError::Layout(format!(
                "store has {} parameters, config wants {}",
                store.len(),
                specs.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let p = store.param(i);
            if p.name != spec.name || p.dims != spec.dims {
                return Err(ModelError::Layout(format!(
                    "parameter {i} is {} {}x{}, config wants {} {}x{}",
                    p.name, p.dims.rows, p.dims.cols, spec.name, spec.dims.rows, spec.dims.cols
                )));
            }
        }
        Ok(Self { cfg, store, idx })
    }

    /// Leaf handles for every parameter, in registration order.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Tensor> {
        tape.attach(&self.store)
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        if batch.n_r != self.cfg.n_r || batch.n_t != self.cfg.n_t {
            return Err(ModelError::BatchMismatch {
                detail: format!(
                    "batch is {}x{}, model is {}x{}",
                    batch.n_r, batch.n_t, self.cfg.n_r, self.cfg.n_t
                ),
            });
        }
        if batch.prefix > self.cfg.t_max {
            return Err(ModelError::SequenceTooLong {
                len: batch.prefix,
                max: self.cfg.t_max,
            });
        }
        Ok(())
    }

    /// Embedded token sequence with positional rows added:
    /// `frames * (2 * prefix - 1)` rows of `d_e`.
    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        batch: &TokenBatch,
    ) -> Result<Tensor, ModelError> {
        self.check_batch(batch)?;
        let y_in = tape.constant(
            Dims::new(batch.frames * batch.prefix, 2 * self.cfg.n_r),
            batch.y.clone(),
        )?;
        let x_in = tape.constant(
            Dims::new(batch.frames * (batch.prefix - 1), 2 * self.cfg.n_t),
            batch.x.clone(),
        )?;
        let hy = tape.matmul(y_in, params[self.idx.wy])?;
        let hx = tape.matmul(x_in, params[self.idx.wx])?;
        let seq = tape.interleave_rows(hy, hx, batch.frames)?;
        Ok(tape.add_pos(seq, params[self.idx.pos], batch.frames)?)
    }

    /// Full forward pass to the final normalized hidden states.
    pub fn hidden_states(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Tensor, ModelError> {
        let d = self.cfg.d_e;
        let mut seq = self.embed_sequence(tape, params, batch)?;
        for blk in &self.idx.blocks {
            let a = tape.layer_norm(seq, params[blk.ln1_g], params[blk.ln1_b])?;
            let qkv = tape.linear(a, params[blk.wqkv], params[blk.bqkv])?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let att = tape.attention(q, k, v, batch.frames, self.cfg.n_heads)?;
            let mut att = tape.linear(att, params[blk.wo], params[blk.bo])?;
            if self.cfg.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    att = tape.dropout(att, self.cfg.dropout, rng)?;
                }
            }
            seq = tape.add(seq, att)?;
            let m = tape.layer_norm(seq, params[blk.ln2_g], params[blk.ln2_b])?;
            let m = tape.linear(m, params[blk.w1], params[blk.b1])?;
            let m = tape.gelu(m)?;
            let mut m = tape.linear(m, params[blk.w2], params[blk.b2])?;
            if self.cfg.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    m = tape.dropout(m, self.cfg.dropout, rng)?;
                }
            }
            seq = tape.add(seq, m)?;
        }
        Ok(tape.layer_norm(seq, params[self.idx.final_g], params[self.idx.final_b])?)
    }

    /// Per-antenna class logits for the given hidden-state rows: output has
    /// `rows.len() * n_t` rows of `class_count` columns, row-major by
    /// (input row, antenna).
    pub fn logits_for_rows(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        hidden: Tensor,
        rows: Vec<usize>,
    ) -> Result<Tensor, ModelError> {
        let n = rows.len();
        let g = tape.gather_rows(hidden, rows)?;
        let logits = tape.linear(g, params[self.idx.head_w], params[self.idx.head_b])?;
        Ok(tape.reshape(logits, Dims::new(n * self.cfg.n_t, self.cfg.class_count))?)
    }
}

/// Argmax per `classes`-wide row; ties resolve to the lowest index.
pub fn argmax_rows(values: &[f32], classes: usize) -> Vec<usize> {
    assert!(classes > 0 && values.len() % classes == 0);
    values
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_frame, sample_task, frame_rng, SimConfig};
    use crate::constellation::Scheme;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_e: 8,
            n_layers: 2,
            n_heads: 2,
            t_max: 5,
            n_r: 1,
            n_t: 1,
            class_count: 4,
            dropout: 0.0,
        }
    }

    fn random_batch(cfg: &ModelConfig, frames: usize, prefix: usize, seed: u64) -> TokenBatch {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let y: Vec<f32> = (0..frames * prefix * 2 * cfg.n_r)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let x: Vec<f32> = (0..frames * (prefix - 1) * 2 * cfg.n_t)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        TokenBatch::from_parts(frames, prefix, cfg.n_r, cfg.n_t, y, x)
    }

    #[test]
    fn standard_siso_qpsk_parameter_count() {
        let cfg = ModelConfig::new(1, 1, 4, 31);
        assert_eq!(cfg.param_count(), 404_420);
        let model = Model::new(cfg, 7).unwrap();
        assert_eq!(model.store.n_scalars(), 404_420);
        let pos = model.store.by_name("embed.pos").unwrap();
        assert_eq!(pos.dims, Dims::new(61, 64));
        let w2 = model.store.by_name("block7.mlp.w2").unwrap();
        assert_eq!(w2.dims, Dims::new(256, 64));
        assert_eq!(model.store.by_name("head.w").unwrap().dims, Dims::new(64, 4));
    }

    #[test]
    fn from_store_round_trips_and_rejects_wrong_layout() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 3).unwrap();
        let reloaded = Model::from_store(cfg, model.store).unwrap();
        let mut other = tiny_cfg();
        other.n_layers = 1;
        let err = Model::from_store(other, reloaded.store).unwrap_err();
        assert!(matches!(err, ModelError::Layout(_)));
    }

    #[test]
    fn zero_tokens_embed_to_positional_rows() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 5).unwrap();
        let frames = 2;
        let prefix = 3;
        let batch = TokenBatch::from_parts(
            frames,
            prefix,
            1,
            1,
            vec![0.0; frames * prefix * 2],
            vec![0.0; frames * (prefix - 1) * 2],
        );
        let mut tape = Tape::new(false);
        let params = model.attach(&mut tape);
        let seq = model.embed_sequence(&mut tape, &params, &batch).unwrap();
        let pos = model.store.by_name("embed.pos").unwrap().value.clone();
        let l = ModelConfig::seq_len(prefix);
        let got = tape.value(seq);
        for f in 0..frames {
            for i in 0..l {
                let row = &got[(f * l + i) * cfg.d_e..(f * l + i + 1) * cfg.d_e];
                assert_eq!(row, &pos[i * cfg.d_e..(i + 1) * cfg.d_e], "frame {f} pos {i}");
            }
        }
    }

    #[test]
    fn future_tokens_never_change_earlier_logits() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 11).unwrap();
        for case in 0..5u64 {
            let prefix = 4;
            let mut batch = random_batch(&cfg, 1, prefix, 100 + case);
            let slot = 1usize;
            let logits_of = |b: &TokenBatch| {
                let mut tape = Tape::new(false);
                let params = model.attach(&mut tape);
                let h = model.hidden_states(&mut tape, &params, b, None).unwrap();
                let rows = b.y_token_rows(&[slot]);
                let l = model.logits_for_rows(&mut tape, &params, h, rows).unwrap();
                tape.value(l).to_vec()
            };
            let before = logits_of(&batch);
            // Perturb every token after the probed received token: x rows
            // from `slot` on, y rows from `slot + 1` on.
            for t in slot..prefix - 1 {
                for c in 0..2 * cfg.n_t {
                    batch.x[t * 2 * cfg.n_t + c] += 3.5;
                }
            }
            for t in slot + 1..prefix {
                for c in 0..2 * cfg.n_r {
                    batch.y[t * 2 * cfg.n_r + c] -= 2.5;
                }
            }
            let after = logits_of(&batch);
            assert_eq!(before, after, "case {case}: bits changed under future edits");
        }
    }

    #[test]
    fn single_slot_prefix_has_no_transmitted_tokens() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 2).unwrap();
        let batch = random_batch(&cfg, 3, 1, 9);
        let mut tape = Tape::new(false);
        let params = model.attach(&mut tape);
        let h = model.hidden_states(&mut tape, &params, &batch, None).unwrap();
        assert_eq!(h.dims, Dims::new(3, cfg.d_e));
        let rows = batch.y_token_rows(&[0]);
        let logits = model.logits_for_rows(&mut tape, &params, h, rows).unwrap();
        assert_eq!(logits.dims, Dims::new(3 * cfg.n_t, cfg.class_count));
    }

    #[test]
    fn prefix_beyond_positional_table_is_rejected() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg, 2).unwrap();
        let batch = random_batch(&cfg, 1, cfg.t_max + 1, 9);
        let mut tape = Tape::new(false);
        let params = model.attach(&mut tape);
        let err = model
            .hidden_states(&mut tape, &params, &batch, None)
            .unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooLong { len: 6, max: 5 }));
    }

    #[test]
    fn prompt_batch_embeds_actual_transmissions() {
        let sim = SimConfig {
            scheme: Scheme::Qpsk,
            n_r: 2,
            n_t: 2,
            t: 6,
            snr_db_min: 10.0,
            snr_db_max: 10.0,
            snr_sampling: Default::default(),
            seed: 42,
        };
        let cons = Constellation::new(sim.scheme);
        let mut rng = frame_rng(sim.seed, 0);
        let task = sample_task(&sim, &mut rng);
        let frame = generate_frame(&task, &cons, sim.t, &mut rng);
        let batch = TokenBatch::from_prompts(std::slice::from_ref(&frame), 3, &cons);
        assert_eq!(batch.frames, 1);
        // Slot 1's transmitted token holds the scaled constellation points.
        let tx = frame.tx_at(1, &cons);
        let row = &batch.x[2 * 2 * 1..2 * 2 * 2];
        assert_eq!(row[0], tx[0].re as f32);
        assert_eq!(row[1], tx[1].re as f32);
        assert_eq!(row[2], tx[0].im as f32);
        assert_eq!(row[3], tx[1].im as f32);
        // Slot 2's received token.
        let y = frame.y_at(2);
        let yrow = &batch.y[2 * 2 * 2..2 * 2 * 3];
        assert_eq!(yrow[0], y[0].re as f32);
        assert_eq!(yrow[3], y[1].im as f32);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.1, 0.2, 0.9, 0.9], 3), vec![0, 1]);
    }

    #[test]
    fn initialization_is_deterministic_in_seed() {
        let a = Model::new(tiny_cfg(), 99).unwrap();
        let b = Model::new(tiny_cfg(), 99).unwrap();
        let c = Model::new(tiny_cfg(), 100).unwrap();
        for i in 0..a.store.len() {
            assert_eq!(a.store.param(i).value[..], b.store.param(i).value[..]);
        }
        assert_ne!(
            a.store.by_name("embed.wy").unwrap().value[..],
            c.store.by_name("embed.wy").unwrap().value[..]
        );
    }
}
