//! Paired Monte Carlo symbol-error-rate estimation across detector arms.
//!
//! Every arm requested in one evaluation consumes the *same* frames: frame
//! `i` is regenerated from the counter-based stream `(eval seed, i)`, so
//! arm-to-arm comparisons are paired and the report carries a stream hash
//! that proves two evaluations saw identical data. Error and trial tallies
//! are plain integers merged associatively, which makes results independent
//! of how frames are partitioned across workers.
//!
//! Arms:
//! * `icl` — the model detects every slot from ground-truth context (one
//!   causal forward pass per frame yields all positions at once).
//! * `df` — the model detects slots after `k` pilots with its own prior
//!   decisions in the context (inference rollout, no gradients).
//! * `mmse` — channel estimate from the first `k` pilot slots, fixed while
//!   detecting every later slot; pooled into one point per pilot count
//!   (the classical horizontal reference line, one curve per `k`).
//! * `mmse_df` — re-estimates before each slot from pilots plus all earlier
//!   decisions, giving a curve over context length.
//! * `csi` — nearest-symbol detection with the true channel matrix, pooled
//!   into a single context-free point (the genie bound).
//!
//! The zero-context point of the `icl` arm (pure guessing) is computed but
//! kept out of the curve used for plots and CSV rows; it stays available on
//! [`SerCurve::zero_context`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{perfect_csi_detect, run_mmse, run_mmse_df, BaselineError};
use crate::channel::{frame_rng, nth_frame, PromptFrame, SimConfig};
use crate::constellation::Constellation;
use crate::model::{argmax_rows, Model, ModelError, TokenBatch};
use crate::nn::Tape;
use crate::train::{df_rollout, FeedbackRule, TrainError};

/// Frames per work unit. Tallies are integers, so the chunk size only
/// bounds peak memory; it never changes a result.
pub const EVAL_CHUNK: u64 = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("arm {0} needs a model checkpoint")]
    MissingModel(&'static str),
    #[error("gain is undefined: SER at the starting context length is zero")]
    UndefinedGain,
    #[error("curve {arm} has no point at context length {context_len}")]
    MissingPoint { arm: String, context_len: usize },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

/// Evaluation-stream settings, distinct from the training stream so test
/// frames are held out by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of Monte Carlo frames.
    pub n_prompts: u64,
    /// Seed of the evaluation frame stream.
    pub seed: u64,
    /// Pilot count `k` for the decision-feedback arms and the gain metric.
    pub pilots: usize,
    #[serde(default)]
    pub feedback: FeedbackRule,
    /// Pilot counts for the `mmse` reference points; empty means
    /// `[pilots, T - 1]`.
    #[serde(default)]
    pub mmse_pilots: Vec<usize>,
    /// Worker threads; 0 uses all available cores. Does not affect results.
    #[serde(default)]
    pub workers: usize,
}

impl EvalConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<(), String> {
        if self.n_prompts == 0 {
            return Err("n_prompts must be positive".into());
        }
        if self.pilots == 0 || self.pilots >= sim.t {
            return Err(format!(
                "pilots {} must lie in 1..{} (frame length)",
                self.pilots, sim.t
            ));
        }
        for &k in &self.mmse_pilots {
            if k == 0 || k >= sim.t {
                return Err(format!(
                    "mmse_pilots entry {k} must lie in 1..{} (frame length)",
                    sim.t
                ));
            }
        }
        Ok(())
    }

    /// Pilot counts the `mmse` arm reports, sorted and deduplicated.
    pub fn mmse_pilot_list(&self, t_len: usize) -> Vec<usize> {
        let mut ks = if self.mmse_pilots.is_empty() {
            vec![self.pilots, t_len - 1]
        } else {
            self.mmse_pilots.clone()
        };
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Detector arms. `Mmse` expands into one curve per configured pilot count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Icl,
    Df,
    Mmse,
    MmseDf,
    Csi,
}

impl ArmKind {
    pub fn label(self) -> &'static str {
        match self {
            ArmKind::Icl => "icl",
            ArmKind::Df => "df",
            ArmKind::Mmse => "mmse",
            ArmKind::MmseDf => "mmse_df",
            ArmKind::Csi => "csi",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, ArmKind::Icl | ArmKind::Df)
    }

    /// Parses a comma-separated arm list, e.g. `icl,df,mmse,mmse_df,csi`.
    pub fn parse_list(s: &str) -> Result<Vec<ArmKind>, String> {
        let mut arms = Vec::new();
        for part in s.split(',') {
            let arm = match part.trim() {
                "icl" => ArmKind::Icl,
                "df" => ArmKind::Df,
                "mmse" => ArmKind::Mmse,
                "mmse_df" => ArmKind::MmseDf,
                "csi" => ArmKind::Csi,
                other => return Err(format!("unknown arm {other:?}")),
            };
            if !arms.contains(&arm) {
                arms.push(arm);
            }
        }
        if arms.is_empty() {
            return Err("empty arm list".into());
        }
        Ok(arms)
    }
}

/// One measured point: `errors` per-antenna symbol errors out of `trials`
/// detections at context length `context_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerPoint {
    pub context_len: usize,
    pub errors: u64,
    pub trials: u64,
}

impl SerPoint {
    pub fn ser(&self) -> f64 {
        self.errors as f64 / self.trials as f64
    }

    /// Binomial standard error `sqrt(p (1 - p) / n)`; every acceptance
    /// comparison is stated in these units.
    pub fn stderr(&self) -> f64 {
        let p = self.ser();
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// SER against context length for one arm. Points are ascending in
/// `context_len` and share a trial count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerCurve {
    pub arm: String,
    pub points: Vec<SerPoint>,
    /// The zero-context measurement (guessing), excluded from plot rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_context: Option<SerPoint>,
}

impl SerCurve {
    pub fn point_at(&self, context_len: usize) -> Option<&SerPoint> {
        self.points.iter().find(|p| p.context_len == context_len)
    }

    pub fn last(&self) -> Option<&SerPoint> {
        self.points.last()
    }
}

/// Relative SER reduction from context length `k` to the curve's final
/// point: `(SER_k - SER_last) / SER_k`. Scale-free in the counts.
pub fn gain(curve: &SerCurve, k: usize) -> Result<f64, EvalError> {
    let at_k = curve.point_at(k).ok_or_else(|| EvalError::MissingPoint {
        arm: curve.arm.clone(),
        context_len: k,
    })?;
    let last = curve.last().expect("curve with a point at k is non-empty");
    let ser_k = at_k.ser();
    if ser_k == 0.0 {
        return Err(EvalError::UndefinedGain);
    }
    Ok((ser_k - last.ser()) / ser_k)
}

/// Where wrong detections land relative to the truth: how often on a
/// nearest neighbor, and the full distance-rank histogram. Compare the
/// fraction against [`Constellation::uniform_neighbor_fraction`], the
/// uniform-wrong-label null.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityTally {
    pub errors: u64,
    pub neighbor_hits: u64,
    /// `rank_counts[r]` counts errors whose detected point sits in distance
    /// tier `r` from the truth (0 = nearest, ties share a tier).
    pub rank_counts: Vec<u64>,
}

impl LocalityTally {
    pub fn new(class_count: usize) -> Self {
        LocalityTally {
            errors: 0,
            neighbor_hits: 0,
            rank_counts: vec![0; class_count.saturating_sub(1)],
        }
    }

    pub fn record(&mut self, cons: &Constellation, truth: usize, detected: usize) {
        debug_assert_ne!(truth, detected, "locality records errors only");
        self.errors += 1;
        if cons.neighbors(truth).contains(&detected) {
            self.neighbor_hits += 1;
        }
        let rank = cons.distance_ranks(truth)[detected];
        self.rank_counts[rank] += 1;
    }

    pub fn merge(&mut self, other: &LocalityTally) {
        self.errors += other.errors;
        self.neighbor_hits += other.neighbor_hits;
        for (a, b) in self.rank_counts.iter_mut().zip(&other.rank_counts) {
            *a += b;
        }
    }

    /// Fraction of errors on a nearest neighbor; `None` when no errors were
    /// observed (reported, not fatal).
    pub fn neighbor_fraction(&self) -> Option<f64> {
        (self.errors > 0).then(|| self.neighbor_hits as f64 / self.errors as f64)
    }

    /// Standard error of the neighbor fraction.
    pub fn fraction_stderr(&self) -> Option<f64> {
        self.neighbor_fraction()
            .map(|p| (p * (1.0 - p) / self.errors as f64).sqrt())
    }

    /// Mean distance tier of wrong detections (0 = all on nearest tier).
    pub fn mean_rank(&self) -> Option<f64> {
        (self.errors > 0).then(|| {
            let weighted: u64 = self
                .rank_counts
                .iter()
                .enumerate()
                .map(|(r, &c)| r as u64 * c)
                .sum();
            weighted as f64 / self.errors as f64
        })
    }
}

/// Everything one evaluation produces; the report layer serializes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub curves: Vec<SerCurve>,
    /// Gain per arm, where the curve spans `pilots..=T-1` and the gain is
    /// defined (SER at `pilots` nonzero).
    pub gains: BTreeMap<String, f64>,
    /// Error locality of the `icl` arm, pooled over context lengths >= 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<LocalityTally>,
    /// Commutative hash of every frame consumed; equal hashes across
    /// evaluations prove the arms were paired.
    pub stream_hash: u64,
    /// Frames a baseline arm skipped because its pilot system was singular
    /// (possible only at zero noise with rank-deficient pilots).
    pub skipped: BTreeMap<String, u64>,
}

impl EvalOutcome {
    pub fn curve(&self, arm: &str) -> Option<&SerCurve> {
        self.curves.iter().find(|c| c.arm == arm)
    }
}

/// Per-arm integer tallies indexed by context length.
#[derive(Clone, Debug)]
struct ArmTally {
    errors: Vec<u64>,
    trials: Vec<u64>,
    skipped: u64,
}

impl ArmTally {
    fn new(t_len: usize) -> Self {
        ArmTally {
            errors: vec![0; t_len],
            trials: vec![0; t_len],
            skipped: 0,
        }
    }

    fn merge(&mut self, other: &ArmTally) {
        for (a, b) in self.errors.iter_mut().zip(&other.errors) {
            *a += b;
        }
        for (a, b) in self.trials.iter_mut().zip(&other.trials) {
            *a += b;
        }
        self.skipped += other.skipped;
    }
}

/// Tallies from one chunk of frames; merging is associative and
/// commutative, so worker partitioning cannot change totals.
struct ChunkTally {
    arms: BTreeMap<String, ArmTally>,
    locality: Option<LocalityTally>,
    hash: u64,
}

fn score_run_at(tally: &mut ArmTally, context_len: usize, detected: &[usize], truth: &[usize]) {
    debug_assert_eq!(detected.len(), truth.len());
    tally.trials[context_len] += detected.len() as u64;
    tally.errors[context_len] += detected.iter().zip(truth).filter(|(d, t)| d != t).count() as u64;
}

/// Scores in-context detections laid out `[frame][slot][antenna]` against
/// the frames' truth; locality pools errors at context >= 1.
fn score_icl(
    frames: &[PromptFrame],
    det: &[usize],
    cons: &Constellation,
    tally: &mut ArmTally,
    locality: &mut LocalityTally,
) {
    let t_len = frames[0].t_len;
    let n_t = frames[0].task.n_t;
    assert_eq!(det.len(), frames.len() * t_len * n_t);
    for (f, frame) in frames.iter().enumerate() {
        for s in 0..t_len {
            let truth = frame.x_at(s);
            let base = (f * t_len + s) * n_t;
            let detected = &det[base..base + n_t];
            score_run_at(tally, s, detected, truth);
            if s >= 1 {
                for (&d, &t) in detected.iter().zip(truth) {
                    if d != t {
                        locality.record(cons, t, d);
                    }
                }
            }
        }
    }
}

/// Scores rollout decisions laid out `[frame][slot - pilots][antenna]`;
/// the decision for slot `t` saw `t` context pairs.
fn score_df(frames: &[PromptFrame], det: &[usize], pilots: usize, tally: &mut ArmTally) {
    let t_len = frames[0].t_len;
    let n_t = frames[0].task.n_t;
    let stride = t_len - pilots;
    assert_eq!(det.len(), frames.len() * stride * n_t);
    for (f, frame) in frames.iter().enumerate() {
        for s in pilots..t_len {
            let base = (f * stride + (s - pilots)) * n_t;
            score_run_at(tally, s, &det[base..base + n_t], frame.x_at(s));
        }
    }
}

fn icl_detections(
    model: &Model,
    cons: &Constellation,
    frames: &[PromptFrame],
) -> Result<Vec<usize>, EvalError> {
    let t_len = frames[0].t_len;
    let slots: Vec<usize> = (0..t_len).collect();
    let batch = TokenBatch::from_prompts(frames, t_len, cons);
    let mut tape = Tape::new(false);
    let params = model.attach(&mut tape);
    let h = model.hidden_states(&mut tape, &params, &batch, None)?;
    let rows = batch.y_token_rows(&slots);
    let logits = model.logits_for_rows(&mut tape, &params, h, rows)?;
    Ok(argmax_rows(tape.value(logits), cons.class_count()))
}

fn run_chunk(
    sim: &SimConfig,
    cfg: &EvalConfig,
    arms: &[ArmKind],
    model: Option<&Model>,
    cons: &Constellation,
    start: u64,
    end: u64,
) -> Result<ChunkTally, EvalError> {
    let frames: Vec<PromptFrame> = (start..end).map(|i| nth_frame(sim, cons, i)).collect();
    let t_len = sim.t;
    let hash = frames
        .iter()
        .fold(0u64, |acc, f| acc.wrapping_add(f.content_hash()));
    let mut out = ChunkTally {
        arms: BTreeMap::new(),
        locality: None,
        hash,
    };
    for &arm in arms {
        match arm {
            ArmKind::Icl => {
                let model = model.expect("checked before dispatch");
                let det = icl_detections(model, cons, &frames)?;
                let mut tally = ArmTally::new(t_len);
                let mut loc = LocalityTally::new(cons.class_count());
                score_icl(&frames, &det, cons, &mut tally, &mut loc);
                out.arms.insert("icl".into(), tally);
                out.locality = Some(loc);
            }
            ArmKind::Df => {
                let model = model.expect("checked before dispatch");
                // Chunk-local stream keyed by the first frame index, so
                // sampled feedback is identical for any partitioning.
                let mut rng = frame_rng(cfg.seed ^ 0x6466_5f73_7472_6d21, start);
                let rng_opt = match cfg.feedback {
                    FeedbackRule::Greedy => None,
                    FeedbackRule::Sample => Some(&mut rng),
                };
                let det = df_rollout(model, cons, &frames, cfg.pilots, cfg.feedback, rng_opt)?;
                let mut tally = ArmTally::new(t_len);
                score_df(&frames, &det, cfg.pilots, &mut tally);
                out.arms.insert("df".into(), tally);
            }
            ArmKind::Mmse => {
                for &k in &cfg.mmse_pilot_list(t_len) {
                    let mut tally = ArmTally::new(t_len);
                    for frame in &frames {
                        match run_mmse(frame, cons, k) {
                            Ok(run) => score_run_at(&mut tally, k, &run.detected, &run.truth),
                            Err(BaselineError::SingularSystem) => tally.skipped += 1,
                        }
                    }
                    out.arms.insert(format!("mmse_p{k}"), tally);
                }
            }
            ArmKind::MmseDf => {
                let k = cfg.pilots;
                let mut tally = ArmTally::new(t_len);
                for frame in &frames {
                    match run_mmse_df(frame, cons, k) {
                        Ok(run) => {
                            for rel in 0..run.slots() {
                                score_run_at(
                                    &mut tally,
                                    k + rel,
                                    run.detected_at(rel),
                                    run.truth_at(rel),
                                );
                            }
                        }
                        Err(BaselineError::SingularSystem) => tally.skipped += 1,
                    }
                }
                out.arms.insert("mmse_df".into(), tally);
            }
            ArmKind::Csi => {
                let mut tally = ArmTally::new(t_len);
                for frame in &frames {
                    let run = perfect_csi_detect(frame, cons);
                    // Context-free bound: pool every slot at index 0.
                    score_run_at(&mut tally, 0, &run.detected, &run.truth);
                }
                out.arms.insert("csi".into(), tally);
            }
        }
    }
    Ok(out)
}

/// Turns a merged tally into the published curve for `label`.
///
/// `icl` keeps its zero-context point aside; pooled arms (`csi`, `mmse_p*`)
/// publish their single point as-is.
fn finish_curve(label: &str, tally: &ArmTally) -> SerCurve {
    let mut points = Vec::new();
    let mut zero_context = None;
    for (t, (&e, &n)) in tally.errors.iter().zip(&tally.trials).enumerate() {
        if n == 0 {
            continue;
        }
        let point = SerPoint {
            context_len: t,
            errors: e,
            trials: n,
        };
        if t == 0 && label == "icl" {
            zero_context = Some(point);
        } else {
            points.push(point);
        }
    }
    SerCurve {
        arm: label.into(),
        points,
        zero_context,
    }
}

/// Runs the requested arms over `cfg.n_prompts` frames drawn from the
/// evaluation stream `(cfg.seed, frame index)`. `on_progress` receives
/// (frames done, frames total) as chunks complete.
pub fn evaluate(
    sim: &SimConfig,
    cfg: &EvalConfig,
    arms: &[ArmKind],
    model: Option<&Model>,
    on_progress: impl Fn(u64, u64) + Sync,
) -> Result<EvalOutcome, EvalError> {
    sim.validate().map_err(EvalError::Config)?;
    cfg.validate(sim).map_err(EvalError::Config)?;
    if arms.is_empty() {
        return Err(EvalError::Config("no arms requested".into()));
    }
    for &arm in arms {
        if arm.needs_model() && model.is_none() {
            return Err(EvalError::MissingModel(arm.label()));
        }
    }
    if let Some(m) = model {
        let c = &m.cfg;
        if c.n_r != sim.n_r || c.n_t != sim.n_t {
            return Err(EvalError::Config(format!(
                "model is {}x{} but the simulation is {}x{}",
                c.n_r, c.n_t, sim.n_r, sim.n_t
            )));
        }
        if c.class_count != sim.scheme.class_count() {
            return Err(EvalError::Config(format!(
                "model has {} classes but scheme {:?} has {}",
                c.class_count,
                sim.scheme,
                sim.scheme.class_count()
            )));
        }
        if c.t_max < sim.t {
            return Err(EvalError::Config(format!(
                "model supports prefixes up to {} but frames have {} slots",
                c.t_max, sim.t
            )));
        }
    }

    // The evaluation stream is the config's geometry re-seeded with the
    // eval seed, so test frames never collide with training frames.
    let mut stream = sim.clone();
    stream.seed = cfg.seed;
    let cons = Constellation::new(sim.scheme);

    let total = cfg.n_prompts;
    let ranges: Vec<(u64, u64)> = (0..total)
        .step_by(EVAL_CHUNK as usize)
        .map(|s| (s, (s + EVAL_CHUNK).min(total)))
        .collect();
    let done = AtomicU64::new(0);
    let work = |&(s, e): &(u64, u64)| -> Result<ChunkTally, EvalError> {
        let tally = run_chunk(&stream, cfg, arms, model, &cons, s, e)?;
        let d = done.fetch_add(e - s, Ordering::Relaxed) + (e - s);
        on_progress(d, total);
        Ok(tally)
    };
    let chunks: Vec<ChunkTally> = if cfg.workers == 1 {
        ranges.iter().map(work).collect::<Result<_, _>>()?
    } else if cfg.workers == 0 {
        ranges.par_iter().map(work).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| EvalError::Config(format!("worker pool: {e}")))?;
        pool.install(|| ranges.par_iter().map(work).collect::<Result<_, _>>())?
    };

    // Integer merges: identical totals for every partitioning above.
    let mut arms_acc: BTreeMap<String, ArmTally> = BTreeMap::new();
    let mut locality: Option<LocalityTally> = None;
    let mut stream_hash = 0u64;
    for chunk in &chunks {
        stream_hash = stream_hash.wrapping_add(chunk.hash);
        for (label, tally) in &chunk.arms {
            arms_acc
                .entry(label.clone())
                .and_modify(|t| t.merge(tally))
                .or_insert_with(|| tally.clone());
        }
        if let Some(loc) = &chunk.locality {
            match &mut locality {
                Some(acc) => acc.merge(loc),
                None => locality = Some(loc.clone()),
            }
        }
    }

    // Publish curves in request order (mmse expands over its pilot list).
    let mut curves = Vec::new();
    let mut skipped = BTreeMap::new();
    for &arm in arms {
        let labels: Vec<String> = match arm {
            ArmKind::Mmse => cfg
                .mmse_pilot_list(sim.t)
                .iter()
                .map(|k| format!("mmse_p{k}"))
                .collect(),
            other => vec![other.label().to_string()],
        };
        for label in labels {
            let tally = &arms_acc[&label];
            if tally.skipped > 0 {
                skipped.insert(label.clone(), tally.skipped);
            }
            curves.push(finish_curve(&label, tally));
        }
    }

    let mut gains = BTreeMap::new();
    for curve in &curves {
        if curve.point_at(cfg.pilots).is_some() && curve.points.len() > 1 {
            if let Ok(g) = gain(curve, cfg.pilots) {
                gains.insert(curve.arm.clone(), g);
            }
        }
    }

    Ok(EvalOutcome {
        curves,
        gains,
        locality,
        stream_hash,
        skipped,
    })
}

/// Error-locality analysis of the model under in-context testing: runs the
/// `icl` arm alone and returns where its wrong detections land.
pub fn error_locality(
    sim: &SimConfig,
    cfg: &EvalConfig,
    model: &Model,
) -> Result<LocalityTally, EvalError> {
    let outcome = evaluate(sim, cfg, &[ArmKind::Icl], Some(model), |_, _| {})?;
    Ok(outcome.locality.expect("icl arm always tallies locality"))
}
