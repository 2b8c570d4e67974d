//! Online draft alignment from verification feedback.
//!
//! Verified in-vocabulary steps whose draft/target divergence exceeds the
//! gate (or whose proposal was rejected) are stored in a replay buffer as
//! self-contained snapshots: the context prefix, the verified continuation,
//! and the target's retained top-k logits for up to `gamma` horizon steps.
//! When the buffer fills, one gradient step minimizes the curriculum-weighted
//! temperature-scaled KL between target and draft distributions on each
//! entry's retained support, updating only the draft's low-rank adapter, and
//! the buffer clears.
//!
//! The horizon weight is `w_j = exp(-beta * L_base * (j - 1))`, where
//! `L_base` is the entry's first-step cross-entropy against the verified
//! token, frozen at insertion time. High uncertainty shrinks the effective
//! supervision horizon toward next-token prediction; low uncertainty expands
//! it.

use serde::Serialize;

use crate::models::{softmax, DraftModel};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumConfig {
    pub beta: f64,
    pub gamma: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { beta: 0.3, gamma: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub t_kd: f64,
    pub k_logit: usize,
    pub learning_rate: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { t_kd: 1.0, k_logit: 32, learning_rate: 1e-5 }
    }
}

/// `w_j = exp(-beta * L_base * (j - 1))`; `w_1` is always exactly 1.
pub fn curriculum_weight(l_base: f64, j: usize, beta: f64) -> f64 {
    assert!(l_base >= 0.0, "base loss must be nonnegative");
    assert!(j >= 1, "step index starts at 1");
    (-beta * l_base * (j - 1) as f64).exp()
}

/// KL divergence between two temperature-scaled softmaxes on the same
/// retained logit support.
pub fn retained_kl(target_logits: &[f64], draft_logits: &[f64], t_kd: f64) -> f64 {
    debug_assert_eq!(target_logits.len(), draft_logits.len());
    let p = scaled_softmax(target_logits, t_kd);
    let q = scaled_softmax(draft_logits, t_kd);
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn scaled_softmax(logits: &[f64], t_kd: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / t_kd).collect();
    softmax(&scaled, 1.0)
}

/// Alignment gate: eligible when the retained-support divergence exceeds
/// `eps_align` or the draft proposal was rejected. Callers only invoke this
/// for in-vocabulary events.
pub fn gate(
    target_logits: &[f64],
    draft_logits: &[f64],
    rejected: bool,
    eps_align: f64,
    t_kd: f64,
) -> bool {
    rejected || retained_kl(target_logits, draft_logits, t_kd) > eps_align
}

/// Target logits retained for one horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedLogits {
    pub ids: Vec<TokenId>,
    pub values: Vec<f64>,
}

/// One verified trajectory snapshot. `steps.len() == emitted.len()` is the
/// horizon actually available (`gamma'`, truncated by the round end); the
/// draft's step-`j` context is `prefix ++ emitted[..j-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub prefix: Vec<TokenId>,
    pub steps: Vec<RetainedLogits>,
    pub emitted: Vec<TokenId>,
    /// First-step cross-entropy of the draft against the verified token,
    /// frozen at insertion.
    pub l_base: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { entries: Vec::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Adapter gradients, row-major `d x r` like the adapter itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdapterGradients {
    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|g| g.is_finite())
    }

    pub fn norm_a(&self) -> f64 {
        self.a.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn norm_b(&self) -> f64 {
        self.b.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    /// The optimized objective: `sum w_j * T^2 * KL` over entries and steps.
    pub loss: f64,
    /// Same sum with every weight forced to 1 — comparable across betas.
    pub unweighted_loss: f64,
    pub grads: AdapterGradients,
    /// Mean curriculum weight per horizon step over the batch.
    pub mean_weights: Vec<f64>,
}

/// Computes the batch loss and its exact analytic gradients with respect to
/// the adapter factors. Gradients flow through the draft side only; the
/// target's retained logits are constants.
pub fn distill_loss(
    buffer: &ReplayBuffer,
    draft: &DraftModel,
    curriculum: &CurriculumConfig,
    distill: &DistillConfig,
) -> Result<DistillOutput> {
    if buffer.is_empty() {
        return Err(Error::InvalidInput("distillation over an empty replay buffer".into()));
    }
    let adapter = draft.adapter();
    let d = adapter.dim();
    let r = adapter.rank();
    let scale = adapter.scaling();
    let t = distill.t_kd;
    let mut grad_a = vec![0.0; d * r];
    let mut grad_b = vec![0.0; d * r];
    let mut loss = 0.0;
    let mut unweighted = 0.0;
    let mut weight_sums = vec![0.0; curriculum.gamma];
    let mut weight_counts = vec![0usize; curriculum.gamma];

    for entry in buffer.entries() {
        let horizon = entry.steps.len().min(curriculum.gamma);
        let mut ctx = entry.prefix.clone();
        for j in 1..=horizon {
            if j > 1 {
                ctx.push(entry.emitted[j - 2]);
            }
            let step = &entry.steps[j - 1];
            let base = draft.featurize_base(&ctx)?;
            let u = adapter.project(&base);
            let h = adapter.apply(&base);
            let z_q: Vec<f64> = step.ids.iter().map(|&id| draft.logit_of(&h, id)).collect();
            let p_hat = scaled_softmax(&step.values, t);
            let q_tilde = scaled_softmax(&z_q, t);
            let kl: f64 = p_hat
                .iter()
                .zip(&q_tilde)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
                .sum();
            let w = curriculum_weight(entry.l_base, j, curriculum.beta);
            loss += w * t * t * kl;
            unweighted += t * t * kl;
            weight_sums[j - 1] += w;
            weight_counts[j - 1] += 1;

            // d(w T^2 KL)/d z_q[k] = w * T * (q~[k] - p^[k]); push through
            // z_q[k] = <head_row(id_k), base + scale * A (B^T base)>.
            let coeff = w * t;
            let mut g = vec![0.0; d];
            for (k, &id) in step.ids.iter().enumerate() {
                let c = coeff * (q_tilde[k] - p_hat[k]);
                if c == 0.0 {
                    continue;
                }
                for (gp, wv) in g.iter_mut().zip(draft.lm_head().row(id as usize)) {
                    *gp += c * wv;
                }
            }
            // grad_A += scale * g ⊗ u; grad_B += scale * base ⊗ (A^T g).
            for p in 0..d {
                let gp = scale * g[p];
                if gp != 0.0 {
                    let row = &mut grad_a[p * r..(p + 1) * r];
                    for (ga, uq) in row.iter_mut().zip(&u) {
                        *ga += gp * uq;
                    }
                }
            }
            let mut at_g = vec![0.0; r];
            for p in 0..d {
                let gp = g[p];
                if gp != 0.0 {
                    let row = &adapter.a()[p * r..(p + 1) * r];
                    for (acc, av) in at_g.iter_mut().zip(row) {
                        *acc += av * gp;
                    }
                }
            }
            for p in 0..d {
                let bp = scale * base[p];
                let row = &mut grad_b[p * r..(p + 1) * r];
                for (gb, ag) in row.iter_mut().zip(&at_g) {
                    *gb += bp * ag;
                }
            }
        }
    }

    let mean_weights = weight_sums
        .iter()
        .zip(&weight_counts)
        .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
        .collect();
    Ok(DistillOutput {
        loss,
        unweighted_loss: unweighted,
        grads: AdapterGradients { a: grad_a, b: grad_b },
        mean_weights,
    })
}

/// One JSONL record per adapter update.
#[derive(Debug, Clone, Serialize)]
pub struct UpdateTrace {
    pub step: u64,
    pub buffer_size: usize,
    pub loss: f64,
    pub unweighted_loss: f64,
    pub mean_weights: Vec<f64>,
    pub grad_norm_a: f64,
    pub grad_norm_b: f64,
    pub skipped: bool,
}

/// Replay buffer plus update policy: an update fires exactly when the buffer
/// fills, then the buffer clears. Non-finite gradients skip the update and
/// log an incident instead of corrupting the adapter.
#[derive(Debug, Clone)]
pub struct AlignmentController {
    buffer: ReplayBuffer,
    pub curriculum: CurriculumConfig,
    pub distill: DistillConfig,
    pub eps_align: f64,
    updates: u64,
    skipped: u64,
    trace: Vec<UpdateTrace>,
}

impl AlignmentController {
    pub fn new(
        buffer_capacity: usize,
        curriculum: CurriculumConfig,
        distill: DistillConfig,
        eps_align: f64,
    ) -> Self {
        Self {
            buffer: ReplayBuffer::new(buffer_capacity),
            curriculum,
            distill,
            eps_align,
            updates: 0,
            skipped: 0,
            trace: Vec::new(),
        }
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped
    }

    pub fn trace(&self) -> &[UpdateTrace] {
        &self.trace
    }

    /// Applies the gate to an in-vocabulary event and buffers an entry when
    /// eligible. Returns whether the entry was buffered.
    #[allow(clippy::too_many_arguments)]
    pub fn offer(
        &mut self,
        target_logits: &[f64],
        draft_logits: &[f64],
        rejected: bool,
        entry: ReplayEntry,
    ) -> bool {
        if gate(target_logits, draft_logits, rejected, self.eps_align, self.distill.t_kd) {
            self.buffer.push(entry);
            true
        } else {
            false
        }
    }

    /// Buffers an entry unconditionally (sweep harnesses that replay a fixed
    /// event stream bypass the gate so every arm sees identical data).
    pub fn push(&mut self, entry: ReplayEntry) {
        self.buffer.push(entry);
    }

    /// Runs an update if the buffer is full; called at step boundaries so
    /// drafting inside a step always sees one adapter version.
    pub fn maybe_update(&mut self, draft: &mut DraftModel, step: u64) -> Result<Option<UpdateTrace>> {
        if !self.buffer.is_full() {
            return Ok(None);
        }
        let out = distill_loss(&self.buffer, draft, &self.curriculum, &self.distill)?;
        let skipped = !out.grads.is_finite() || !out.loss.is_finite();
        if skipped {
            self.skipped += 1;
        } else {
            draft
                .adapter_mut()
                .step(&out.grads.a, &out.grads.b, self.distill.learning_rate)?;
            self.updates += 1;
        }
        let record = UpdateTrace {
            step,
            buffer_size: self.buffer.len(),
            loss: out.loss,
            unweighted_loss: out.unweighted_loss,
            mean_weights: out.mean_weights,
            grad_norm_a: out.grads.norm_a(),
            grad_norm_b: out.grads.norm_b(),
            skipped,
        };
        self.trace.push(record.clone());
        self.buffer.clear();
        Ok(Some(record))
    }

    pub fn write_trace_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trace {
            serde_json::to_writer(&mut w, t)
                .map_err(|e| Error::InvalidInput(format!("trace serialization: {e}")))?;
            writeln!(w)?;
        }
        Ok(())
    }
}
