//! Training objectives and the two-phase loop: in-context pretraining on
//! ground-truth context, then fine-tuning on a mixture of the
//! decision-feedback loss and the original objective.
//!
//! Decisions re-enter the context as plain numeric tokens (indices looked
//! up in the constellation), never as tape tensors, so no gradient can flow
//! through feedback by construction; a test verifies the gradients match a
//! rollout done by a detached copy of the model.

use crate::channel::{nth_frame, PromptFrame, SimConfig};
use crate::checkpoint::{self, CheckpointError};
use crate::constellation::Constellation;
use crate::model::{argmax_rows, Model, ModelConfig, ModelError, TokenBatch};
use crate::nn::{AdamHyper, GradBuffer, LrSchedule, NnError, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Frames per accumulation chunk. Chunks are reduced sequentially in index
/// order, so gradients and losses are bit-identical for any batch size or
/// worker count.
pub const TRAIN_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("loss trace write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("training diverged at global step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// How decisions are drawn from the per-antenna class distribution during
/// decision-feedback rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackRule {
    /// Highest-probability class; ties resolve to the lowest index.
    #[default]
    Greedy,
    /// Sample from the softmax distribution (needs an rng).
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub base: f64,
    pub warmup_steps: u64,
    pub cosine_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per optimizer step.
    pub batch: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Weight of the decision-feedback term in the fine-tune mixture.
    pub alpha: f64,
    /// Ground-truth context pairs before feedback starts.
    pub pilots: usize,
    #[serde(default)]
    pub feedback: FeedbackRule,
    pub lr: LrConfig,
    /// Seeds parameter init and any stochastic feedback; the data stream is
    /// seeded by the simulation config.
    pub seed: u64,
    /// Checkpoint cadence in global steps (0 disables periodic snapshots).
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<(), String> {
        if self.batch == 0 {
            return Err("batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if self.pilots == 0 || self.pilots >= sim.t {
            return Err(format!(
                "pilots {} must lie in 1..{} (frame length)",
                self.pilots, sim.t
            ));
        }
        if self.lr.base <= 0.0 || !self.lr.base.is_finite() {
            return Err(format!("lr.base {} must be positive", self.lr.base));
        }
        Ok(())
    }
}

fn uniform_t_len(frames: &[PromptFrame]) -> usize {
    assert!(!frames.is_empty(), "empty frame batch");
    let t = frames[0].t_len;
    assert!(
        frames.iter().all(|f| f.t_len == t),
        "frames of mixed length in one batch"
    );
    t
}

/// Ground-truth class targets for the given slots, ordered to match
/// `logits_for_rows`: frame-major, then slot, then antenna.
fn slot_targets(frames: &[PromptFrame], slots: &[usize]) -> Vec<usize> {
    let n_t = frames[0].task.n_t;
    let mut targets = Vec::with_capacity(frames.len() * slots.len() * n_t);
    for f in frames {
        for &s in slots {
            targets.extend_from_slice(f.x_at(s));
        }
    }
    targets
}

/// Mean and sum cross entropy straight from logit values, accumulated in
/// f64. Used by the reporting losses; the gradient path applies the same
/// math on the tape.
fn ce_sum_f64(logits: &[f32], classes: usize, targets: &[usize]) -> f64 {
    assert_eq!(logits.len(), classes * targets.len());
    let mut acc = 0.0f64;
    for (row, &target) in logits.chunks_exact(classes).zip(targets) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
        acc += max + sum.ln() - row[target] as f64;
    }
    acc
}

/// Mean cross entropy of next-symbol prediction over every slot of every
/// frame, with ground-truth context throughout.
pub fn icl_loss(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
) -> Result<f64, TrainError> {
    let t_len = uniform_t_len(frames);
    let slots: Vec<usize> = (0..t_len).collect();
    let mut acc = 0.0f64;
    let mut rows = 0usize;
    for chunk in frames.chunks(TRAIN_CHUNK) {
        let batch = TokenBatch::from_prompts(chunk, t_len, cons);
        let mut tape = Tape::new(false);
        let params = model.attach(&mut tape);
        let h = model.hidden_states(&mut tape, &params, &batch, None)?;
        let idx = batch.y_token_rows(&slots);
        let logits = model.logits_for_rows(&mut tape, &params, h, idx)?;
        let targets = slot_targets(chunk, &slots);
        acc += ce_sum_f64(tape.value(logits), model.cfg.class_count, &targets);
        rows += targets.len();
    }
    Ok(acc / rows as f64)
}

/// Accumulates `weight` times the gradient of [`icl_loss`] and returns the
/// unweighted loss (from the tape's f32 reduction).
pub fn icl_grad(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
    grads: &mut GradBuffer,
    weight: f64,
) -> Result<f64, TrainError> {
    let t_len = uniform_t_len(frames);
    let slots: Vec<usize> = (0..t_len).collect();
    let total_rows = (frames.len() * t_len * model.cfg.n_t) as f64;
    let mut acc = 0.0f64;
    for chunk in frames.chunks(TRAIN_CHUNK) {
        let batch = TokenBatch::from_prompts(chunk, t_len, cons);
        let mut tape = Tape::new(true);
        let params = model.attach(&mut tape);
        let h = model.hidden_states(&mut tape, &params, &batch, None)?;
        let idx = batch.y_token_rows(&slots);
        let logits = model.logits_for_rows(&mut tape, &params, h, idx)?;
        let targets = slot_targets(chunk, &slots);
        let share = targets.len() as f64 / total_rows;
        let loss = tape.cross_entropy_mean(logits, targets)?;
        acc += tape.value(loss)[0] as f64 * share;
        tape.backward(loss, (weight * share) as f32)?;
        grads.accumulate(&tape, &params);
    }
    Ok(acc)
}

/// Context for detecting slot `t` (prefix `t + 1`): transmitted tokens are
/// ground truth below `pilots` and prior decisions from `det` above.
/// `det` is flat `[frame][slot - pilots][antenna]` with stride
/// `t_len - pilots` slots per frame.
pub fn df_context_batch(
    frames: &[PromptFrame],
    t: usize,
    pilots: usize,
    det: &[usize],
    cons: &Constellation,
) -> TokenBatch {
    let t_len = uniform_t_len(frames);
    let (n_r, n_t) = (frames[0].task.n_r, frames[0].task.n_t);
    let stride = t_len - pilots;
    let prefix = t + 1;
    let mut y = Vec::with_capacity(frames.len() * prefix * 2 * n_r);
    let mut x = Vec::with_capacity(frames.len() * (prefix - 1) * 2 * n_t);
    for (f, frame) in frames.iter().enumerate() {
        for s in 0..prefix {
            y.extend(TokenBatch::received_row(frame.y_at(s)));
            if s + 1 < prefix {
                if s < pilots {
                    x.extend(TokenBatch::symbol_row(frame.x_at(s), n_t, cons));
                } else {
                    let base = (f * stride + (s - pilots)) * n_t;
                    x.extend(TokenBatch::symbol_row(&det[base..base + n_t], n_t, cons));
                }
            }
        }
    }
    TokenBatch::from_parts(frames.len(), prefix, n_r, n_t, y, x)
}

fn sample_rows(
    values: &[f32],
    classes: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    values
        .chunks_exact(classes)
        .map(|row| {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    return i;
                }
            }
            classes - 1
        })
        .collect()
}

/// Shared rollout walk: one forward pass per slot from `pilots` on, feeding
/// each slot's decision back as context for the next. `per_slot` sees the
/// tape and latest logits before the decision is taken.
fn df_scan(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
    pilots: usize,
    rule: FeedbackRule,
    mut rng: Option<&mut ChaCha12Rng>,
    record: bool,
    mut per_slot: impl FnMut(&mut Tape, &[Tensor], usize, Tensor) -> Result<(), TrainError>,
) -> Result<Vec<usize>, TrainError> {
    let t_len = uniform_t_len(frames);
    let n_t = model.cfg.n_t;
    assert!(pilots >= 1 && pilots < t_len, "pilots outside 1..t_len");
    let stride = t_len - pilots;
    let mut det = vec![0usize; frames.len() * stride * n_t];
    for t in pilots..t_len {
        let batch = df_context_batch(frames, t, pilots, &det, cons);
        let mut tape = Tape::new(record);
        let params = model.attach(&mut tape);
        let h = model.hidden_states(&mut tape, &params, &batch, None)?;
        let idx = batch.y_token_rows(&[t]);
        let logits = model.logits_for_rows(&mut tape, &params, h, idx)?;
        per_slot(&mut tape, &params, t, logits)?;
        let values = tape.value(logits);
        let choices = match rule {
            FeedbackRule::Greedy => argmax_rows(values, model.cfg.class_count),
            FeedbackRule::Sample => {
                let rng = rng.as_deref_mut().ok_or_else(|| {
                    TrainError::Config("sampled feedback needs an rng".into())
                })?;
                sample_rows(values, model.cfg.class_count, rng)
            }
        };
        for (f, frame_choices) in choices.chunks(n_t).enumerate() {
            let base = (f * stride + (t - pilots)) * n_t;
            det[base..base + n_t].copy_from_slice(frame_choices);
        }
    }
    Ok(det)
}

/// Decision-feedback rollout: detected indices for slots `pilots..t_len`,
/// flat `[frame][slot - pilots][antenna]`.
pub fn df_rollout(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
    pilots: usize,
    rule: FeedbackRule,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<Vec<usize>, TrainError> {
    let mut det = Vec::new();
    for chunk in frames.chunks(TRAIN_CHUNK) {
        det.extend(df_scan(
            model,
            cons,
            chunk,
            pilots,
            rule,
            rng.as_deref_mut(),
            false,
            |_, _, _, _| Ok(()),
        )?);
    }
    Ok(det)
}

/// Decision-feedback loss: cross entropy of the true symbols at each
/// non-pilot slot, with the model's own decisions as context, summed and
/// divided by `frames * t_len * n_t` (pilot slots count in the denominator,
/// so the scale is comparable with [`icl_loss`]).
pub fn df_loss(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
    pilots: usize,
    rule: FeedbackRule,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<f64, TrainError> {
    let t_len = uniform_t_len(frames);
    let denom = (frames.len() * t_len * model.cfg.n_t) as f64;
    let mut acc = 0.0f64;
    for chunk in frames.chunks(TRAIN_CHUNK) {
        df_scan(
            model,
            cons,
            chunk,
            pilots,
            rule,
            rng.as_deref_mut(),
            false,
            |tape, _, t, logits| {
                let targets = slot_targets(chunk, &[t]);
                acc += ce_sum_f64(tape.value(logits), model.cfg.class_count, &targets);
                Ok(())
            },
        )?;
    }
    Ok(acc / denom)
}

/// Accumulates `weight` times the gradient of the decision-feedback loss
/// for one chunk, normalized against `total_frames`, and returns the
/// chunk's unweighted contribution to that loss.
///
/// The decisions come from a plain inference rollout first; one recorded
/// full-sequence pass then differentiates the cross entropy at every
/// non-pilot slot. Causal masking makes each slot's logits equal to the
/// ones the rollout saw, so this is the sum of the per-slot objectives
/// without per-slot tapes (a test checks the equivalence).
pub fn df_grad(
    model: &Model,
    cons: &Constellation,
    chunk: &[PromptFrame],
    pilots: usize,
    rule: FeedbackRule,
    rng: Option<&mut ChaCha12Rng>,
    grads: &mut GradBuffer,
    weight: f64,
    total_frames: usize,
) -> Result<f64, TrainError> {
    let t_len = uniform_t_len(chunk);
    let det = df_scan(model, cons, chunk, pilots, rule, rng, false, |_, _, _, _| Ok(()))?;
    let slots: Vec<usize> = (pilots..t_len).collect();
    let batch = df_context_batch(chunk, t_len - 1, pilots, &det, cons);
    let mut tape = Tape::new(true);
    let params = model.attach(&mut tape);
    let h = model.hidden_states(&mut tape, &params, &batch, None)?;
    let idx = batch.y_token_rows(&slots);
    let logits = model.logits_for_rows(&mut tape, &params, h, idx)?;
    let targets = slot_targets(chunk, &slots);
    let loss = tape.cross_entropy_mean(logits, targets)?;
    // The tape loss is a mean over chunk_frames * (t_len - pilots) * n_t
    // rows; rescale to this chunk's share of the sum-over-slots objective
    // divided by total_frames * t_len * n_t.
    let share =
        (chunk.len() * (t_len - pilots)) as f64 / (total_frames as f64 * t_len as f64);
    let acc = tape.value(loss)[0] as f64 * share;
    tape.backward(loss, (weight * share) as f32)?;
    grads.accumulate(&tape, &params);
    Ok(acc)
}

/// Fine-tune objective: `alpha * df_loss + (1 - alpha) * icl_loss`. At
/// `alpha = 0` or `alpha = 1` this is bitwise the respective pure loss.
pub fn finetune_loss(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
    pilots: usize,
    rule: FeedbackRule,
    mut rng: Option<&mut ChaCha12Rng>,
    alpha: f64,
) -> Result<f64, TrainError> {
    let df = df_loss(model, cons, frames, pilots, rule, rng.as_deref_mut())?;
    let icl = icl_loss(model, cons, frames)?;
    Ok(alpha * df + (1.0 - alpha) * icl)
}

/// One line of training progress for callers that want to log it.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub phase: &'static str,
    pub phase_step: u64,
    pub phase_len: u64,
    pub global_step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub global_steps: u64,
    pub final_loss: Option<f64>,
    pub trace_path: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Runs both phases, writing a loss trace and checkpoints under `out_dir`.
/// Fully deterministic: the data stream is counter-based in the simulation
/// seed, so run N of step k sees the same frames every time.
pub fn train(
    sim: &SimConfig,
    model_cfg: ModelConfig,
    tc: &TrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepInfo),
) -> Result<TrainOutcome, TrainError> {
    sim.validate().map_err(TrainError::Config)?;
    tc.validate(sim).map_err(TrainError::Config)?;
    model_cfg.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(out_dir)?;

    let cons = Constellation::new(sim.scheme);
    let mut model = Model::new(model_cfg, tc.seed)?;
    let mut grads = GradBuffer::zeros_like(&model.store);
    let total_steps = tc.pretrain_steps + tc.finetune_steps;
    let schedule = LrSchedule {
        base: tc.lr.base,
        warmup_steps: tc.lr.warmup_steps,
        cosine_decay: tc.lr.cosine_decay,
        total_steps,
    };
    let mut aux_rng = ChaCha12Rng::seed_from_u64(tc.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let meta = |phase: &str| {
        serde_json::json!({
            "sim": sim,
            "train": tc,
            "phase": phase,
        })
    };

    let trace_path = out_dir.join("loss_trace.csv");
    let mut trace = csv::Writer::from_path(&trace_path)?;
    trace.write_record(["phase", "phase_step", "global_step", "loss", "lr"])?;

    let pretrain_ckpt = out_dir.join("pretrained.ckpt");
    let final_ckpt = out_dir.join("final.ckpt");
    if tc.pretrain_steps == 0 {
        checkpoint::save(&pretrain_ckpt, &model.store, model.cfg, 0, meta("pretrain"))?;
    }

    let mut last_loss = None;
    for global_step in 0..total_steps {
        let pretraining = global_step < tc.pretrain_steps;
        let frames: Vec<PromptFrame> = (0..tc.batch as u64)
            .map(|j| nth_frame(sim, &cons, global_step * tc.batch as u64 + j))
            .collect();
        grads.zero();
        let loss = if pretraining {
            icl_grad(&model, &cons, &frames, &mut grads, 1.0)?
        } else {
            let mut df_acc = 0.0f64;
            for chunk in frames.chunks(TRAIN_CHUNK) {
                df_acc += df_grad(
                    &model,
                    &cons,
                    chunk,
                    tc.pilots,
                    tc.feedback,
                    Some(&mut aux_rng),
                    &mut grads,
                    tc.alpha,
                    frames.len(),
                )?;
            }
            let icl = icl_grad(&model, &cons, &frames, &mut grads, 1.0 - tc.alpha)?;
            tc.alpha * df_acc + (1.0 - tc.alpha) * icl
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: global_step,
                detail: format!("loss {loss}"),
            });
        }
        let lr = schedule.lr(global_step);
        model
            .store
            .adam_step(&mut grads, lr, AdamHyper::default())
            .map_err(|e| TrainError::NonFinite {
                step: global_step,
                detail: e.to_string(),
            })?;

        let (phase, phase_step, phase_len) = if pretraining {
            ("pretrain", global_step, tc.pretrain_steps)
        } else {
            (
                "finetune",
                global_step - tc.pretrain_steps,
                tc.finetune_steps,
            )
        };
        trace.write_record([
            phase.to_string(),
            phase_step.to_string(),
            global_step.to_string(),
            loss.to_string(),
            lr.to_string(),
        ])?;
        on_step(&StepInfo {
            phase,
            phase_step,
            phase_len,
            global_step,
            loss,
            lr,
        });
        last_loss = Some(loss);

        let done = global_step + 1;
        if tc.eval_every > 0 && done % tc.eval_every == 0 && done != total_steps {
            checkpoint::save(
                &out_dir.join(format!("step_{done}.ckpt")),
                &model.store,
                model.cfg,
                done,
                meta(phase),
            )?;
        }
        if done == tc.pretrain_steps {
            checkpoint::save(&pretrain_ckpt, &model.store, model.cfg, done, meta("pretrain"))?;
        }
    }
    trace.flush()?;
    checkpoint::save(
        &final_ckpt,
        &model.store,
        model.cfg,
        total_steps,
        meta(if tc.finetune_steps > 0 { "finetune" } else { "pretrain" }),
    )?;

    Ok(TrainOutcome {
        model,
        global_steps: total_steps,
        final_loss: last_loss,
        trace_path,
        pretrain_checkpoint: pretrain_ckpt,
        final_checkpoint: final_ckpt,
    })
}
