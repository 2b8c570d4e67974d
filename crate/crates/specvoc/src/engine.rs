//! The speculative decoding loop.
//!
//! Each step snapshots the active vocabulary, drafts a chain of proposals
//! from the draft model restricted to that snapshot, verifies them against
//! the target (lossless rejection sampling, or greedy matching at
//! temperature zero), and emits one verification event per emitted token.
//! Out-of-vocabulary events enqueue asynchronous retrieval tasks whose
//! results are admitted to the cache at a later step boundary; in-vocabulary
//! events are offered to the alignment controller. A simulated clock modeling
//! the retrieval/decode overlap makes runs bit-reproducible; a real-threads
//! mode runs retrieval on an actual worker against the immutable index.
//!
//! Losslessness hinges on one identity: the draft distribution is exactly
//! zero outside the snapshot, so a proposal `x` is accepted with probability
//! `min(1, p(x)/q(x))` and the rejection residual `normalize(max(0, p - q))`
//! automatically re-covers every excluded token.

use std::collections::HashSet;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::alignment::{AlignmentController, ReplayEntry, RetainedLogits, UpdateTrace};
use crate::cache::ArcCache;
use crate::models::{argmax, softmax, top_k, DraftModel, SparseDistribution, TargetModel};
use crate::retrieval::{CandidateSet, RetrievalArm, RetrievalBundle};
use crate::vocab::{self, ActiveVocab, CoverageReport, StaticVocab};
use crate::{Error, Result, TokenId};

/// Per-phase timings of one speculative step, in simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub retrieval_ms: f64,
    pub step_body_ms: f64,
    pub projection_ms: f64,
    pub sampling_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { retrieval_ms: 2.07, step_body_ms: 3.754, projection_ms: 0.561, sampling_ms: 0.025 }
    }
}

impl LatencyModel {
    /// Critical-path cost of one step without retrieval interference.
    pub fn gpu_step_ms(&self) -> f64 {
        self.step_body_ms + self.projection_ms + self.sampling_ms
    }
}

/// Duration of one step given the retrieval work still outstanding at its
/// start: retrieval adds time only when it exceeds the concurrent GPU work.
pub fn simulated_step_time(latency: &LatencyModel, retrieval_remaining_ms: f64) -> f64 {
    let gpu = latency.gpu_step_ms();
    gpu + (retrieval_remaining_ms - gpu).max(0.0)
}

/// How retrieval tasks execute and when their results land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum LatencyMode {
    /// Deterministic simulated clock; tasks complete per the latency model
    /// and apply at the following step boundary.
    Simulated,
    /// Tasks apply at the same step's boundary with zero latency (unit tests).
    Sync,
    /// Tasks run on a real worker thread; results apply at whichever step
    /// boundary they have arrived by.
    RealThreads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Speculation horizon: proposals drafted per round.
    pub gamma: usize,
    /// Cap on drafted tokens per round (chains use `min(gamma, budget)`).
    pub token_budget: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Retained target logits per verification event.
    pub k_logit: usize,
    pub latency: LatencyModel,
    pub mode: LatencyMode,
    /// When set, every step records target-distribution coverage of the
    /// snapshot at this softmax temperature (1.0 mirrors the raw model).
    pub coverage_temperature: Option<f64>,
    pub coverage_ks: Vec<usize>,
    pub eps_cov: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: 6,
            token_budget: 60,
            temperature: 0.0,
            seed: 42,
            k_logit: 32,
            latency: LatencyModel::default(),
            mode: LatencyMode::Simulated,
            coverage_temperature: None,
            coverage_ks: vec![10, 50, 256],
            eps_cov: 0.05,
        }
    }
}

/// Record of one emitted position in a verification round.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationEvent {
    /// Position within the round (0-based).
    pub position: usize,
    /// The verified token actually emitted at this position.
    pub target_token: TokenId,
    pub target_topk_ids: Vec<TokenId>,
    pub target_topk_logits: Vec<f64>,
    /// Target-side hidden state from the verification pass.
    pub target_hidden: Vec<f64>,
    pub draft_proposed: Option<TokenId>,
    pub rejected: bool,
    /// Set by the engine against the step's vocabulary snapshot.
    pub oov: bool,
}

/// `min(1, p/q)` — the lossless acceptance rule.
pub fn acceptance_probability(p: f64, q: f64) -> f64 {
    debug_assert!(q > 0.0, "proposals must come from the draft support");
    (p / q).min(1.0)
}

/// `normalize(max(0, p - q))` over the full vocabulary. `q` is the draft's
/// restricted distribution scattered to dense form (zero outside the active
/// set), which is what re-covers excluded tokens on rejection.
pub fn residual_distribution(p: &[f64], q_dense: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = p.iter().zip(q_dense).map(|(pi, qi)| (pi - qi).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z <= 0.0 {
        // Unreachable when a rejection actually occurred (p != q there);
        // guard against a pathological all-zero residual from rounding.
        return p.to_vec();
    }
    for v in &mut r {
        *v /= z;
    }
    r
}

/// Inverse-CDF sampling; assumes `probs` sums to ~1.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Autoregressively drafts up to `gamma` proposals from the restricted
/// distribution, feeding each proposal back into the context, and records
/// each step's full restricted distribution for verification.
pub fn draft_chain(
    draft: &DraftModel,
    context: &[TokenId],
    active: &ActiveVocab,
    gamma: usize,
    temperature: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(TokenId, SparseDistribution)>> {
    if active.is_empty() {
        return Err(Error::InvalidInput("cannot draft from an empty active vocabulary".into()));
    }
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let h = draft.featurize(&ctx)?;
        let dist = draft.restricted_distribution(&h, active, temperature)?;
        let token = if temperature == 0.0 {
            dist.argmax()
        } else {
            dist.tokens[sample_index(&dist.probs, rng)]
        };
        ctx.push(token);
        out.push((token, dist));
    }
    Ok(out)
}

/// Everything a verification round produces.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Tokens emitted to the user, in order (accepted proposals plus the
    /// correction or bonus token).
    pub emitted: Vec<TokenId>,
    /// Number of accepted draft proposals (emitted length minus one).
    pub accepted: usize,
    pub events: Vec<VerificationEvent>,
}

/// Verifies a drafted chain against the target model.
///
/// At temperature zero proposals are accepted while they match the target
/// argmax and the first mismatch emits that argmax. At positive temperature
/// each proposal is accepted with probability `min(1, p/q)`; the first
/// rejection emits a sample from the residual `normalize(max(0, p - q))`.
/// When every proposal survives, one bonus token is drawn from the target at
/// the next position. Every emitted position yields a `VerificationEvent`
/// (the `oov` flag is filled in by the caller against its snapshot).
pub fn verify_round(
    target: &TargetModel,
    context: &[TokenId],
    proposals: &[(TokenId, SparseDistribution)],
    temperature: f64,
    domain: Option<usize>,
    k_logit: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RoundOutcome> {
    let vocab_size = target.vocab().size() as usize;
    let mut ctx = context.to_vec();
    let mut emitted = Vec::new();
    let mut events = Vec::new();
    let mut accepted = 0usize;
    let mut rejected_round = false;

    for (j, (proposal, q)) in proposals.iter().enumerate() {
        let h = target.featurize(&ctx)?;
        let logits = target.full_logits(&h, domain)?;
        let (topk_ids, topk_vals) = top_k(&logits, k_logit.min(vocab_size));
        if temperature == 0.0 {
            let best = argmax(&logits) as TokenId;
            if *proposal == best {
                accepted += 1;
                emitted.push(best);
                events.push(VerificationEvent {
                    position: j,
                    target_token: best,
                    target_topk_ids: topk_ids,
                    target_topk_logits: topk_vals,
                    target_hidden: h,
                    draft_proposed: Some(*proposal),
                    rejected: false,
                    oov: false,
                });
                ctx.push(best);
            } else {
                emitted.push(best);
                events.push(VerificationEvent {
                    position: j,
                    target_token: best,
                    target_topk_ids: topk_ids,
                    target_topk_logits: topk_vals,
                    target_hidden: h,
                    draft_proposed: Some(*proposal),
                    rejected: true,
                    oov: false,
                });
                rejected_round = true;
                break;
            }
        } else {
            let p = softmax(&logits, temperature);
            let q_prob = q.prob_of(*proposal);
            if q_prob <= 0.0 {
                return Err(Error::Invariant(format!(
                    "proposal {proposal} has zero draft probability; proposals must come from the draft support"
                )));
            }
            let alpha = acceptance_probability(p[*proposal as usize], q_prob);
            if rng.random::<f64>() < alpha {
                accepted += 1;
                emitted.push(*proposal);
                events.push(VerificationEvent {
                    position: j,
                    target_token: *proposal,
                    target_topk_ids: topk_ids,
                    target_topk_logits: topk_vals,
                    target_hidden: h,
                    draft_proposed: Some(*proposal),
                    rejected: false,
                    oov: false,
                });
                ctx.push(*proposal);
            } else {
                let residual = residual_distribution(&p, &q.to_dense(vocab_size));
                let token = sample_index(&residual, rng) as TokenId;
                emitted.push(token);
                events.push(VerificationEvent {
                    position: j,
                    target_token: token,
                    target_topk_ids: topk_ids,
                    target_topk_logits: topk_vals,
                    target_hidden: h,
                    draft_proposed: Some(*proposal),
                    rejected: true,
                    oov: false,
                });
                rejected_round = true;
                break;
            }
        }
    }

    if !rejected_round {
        // All proposals accepted: one bonus token from the target.
        let h = target.featurize(&ctx)?;
        let logits = target.full_logits(&h, domain)?;
        let (topk_ids, topk_vals) = top_k(&logits, k_logit.min(vocab_size));
        let token = if temperature == 0.0 {
            argmax(&logits) as TokenId
        } else {
            let p = softmax(&logits, temperature);
            sample_index(&p, rng) as TokenId
        };
        emitted.push(token);
        events.push(VerificationEvent {
            position: proposals.len(),
            target_token: token,
            target_topk_ids: topk_ids,
            target_topk_logits: topk_vals,
            target_hidden: h,
            draft_proposed: None,
            rejected: false,
            oov: false,
        });
    }

    Ok(RoundOutcome { emitted, accepted, events })
}

#[derive(Debug, Clone)]
struct PendingTask {
    id: u64,
    trigger: TokenId,
    hidden: Vec<f64>,
    target_topk: Vec<TokenId>,
    result: Option<CandidateSet>,
}

struct RealRetriever {
    tx: Option<mpsc::Sender<PendingTask>>,
    rx: mpsc::Receiver<(u64, TokenId, CandidateSet)>,
    handle: Option<JoinHandle<()>>,
}

impl RealRetriever {
    fn spawn(bundle: Arc<RetrievalBundle>, arm: RetrievalArm) -> Self {
        let (task_tx, task_rx) = mpsc::channel::<PendingTask>();
        let (done_tx, done_rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            while let Ok(task) = task_rx.recv() {
                if let Ok(set) = bundle.candidates_for_arm(arm, &task.target_topk, &task.hidden) {
                    if done_tx.send((task.id, task.trigger, set)).is_err() {
                        break;
                    }
                }
            }
        });
        Self { tx: Some(task_tx), rx: done_rx, handle: Some(handle) }
    }
}

impl Drop for RealRetriever {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Summary of one engine step for metrics and tests.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub emitted: Vec<TokenId>,
    pub accepted: usize,
    pub oov_events: usize,
    pub step_ms: f64,
    pub tasks_enqueued: usize,
    pub tasks_applied: usize,
    pub update: Option<UpdateTrace>,
    pub coverage: Option<CoverageReport>,
    pub dynamic_occupancy: usize,
}

impl StepOutcome {
    /// Emitted tokens per verification call: accepted proposals plus one.
    pub fn acceptance_length(&self) -> usize {
        self.emitted.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineStats {
    pub steps: u64,
    pub emitted_tokens: u64,
    pub accepted_proposals: u64,
    pub oov_events: u64,
    pub tasks_applied: u64,
    pub peak_dynamic_occupancy: usize,
    pub sim_time_ms: f64,
}

pub struct Engine {
    target: Arc<TargetModel>,
    draft: DraftModel,
    static_vocab: Arc<StaticVocab>,
    cache: ArcCache,
    retrieval: Option<Arc<RetrievalBundle>>,
    arm: RetrievalArm,
    alignment: Option<AlignmentController>,
    cfg: EngineConfig,
    context: Vec<TokenId>,
    domain: Option<usize>,
    rng: ChaCha12Rng,
    step_index: u64,
    sim_time_ms: f64,
    /// Tasks enqueued at the previous step (simulated mode).
    pending: Vec<PendingTask>,
    in_flight: HashSet<TokenId>,
    next_task_id: u64,
    real: Option<RealRetriever>,
    stats: EngineStats,
}

impl Engine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        target: Arc<TargetModel>,
        draft: DraftModel,
        static_vocab: Arc<StaticVocab>,
        cache: ArcCache,
        retrieval: Option<Arc<RetrievalBundle>>,
        arm: RetrievalArm,
        alignment: Option<AlignmentController>,
        cfg: EngineConfig,
    ) -> Result<Self> {
        if cfg.gamma == 0 || cfg.token_budget == 0 {
            return Err(Error::InvalidInput("gamma and token budget must be positive".into()));
        }
        if cfg.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be nonnegative".into()));
        }
        let real = match (cfg.mode, &retrieval) {
            (LatencyMode::RealThreads, Some(bundle)) if arm != RetrievalArm::Off => {
                Some(RealRetriever::spawn(Arc::clone(bundle), arm))
            }
            _ => None,
        };
        let rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            target,
            draft,
            static_vocab,
            cache,
            retrieval,
            arm,
            alignment,
            cfg,
            context: Vec::new(),
            domain: None,
            rng,
            step_index: 0,
            sim_time_ms: 0.0,
            pending: Vec::new(),
            in_flight: HashSet::new(),
            next_task_id: 0,
            real,
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn sim_time_ms(&self) -> f64 {
        self.sim_time_ms
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn draft(&self) -> &DraftModel {
        &self.draft
    }

    pub fn alignment(&self) -> Option<&AlignmentController> {
        self.alignment.as_ref()
    }

    pub fn dynamic_budget(&self) -> usize {
        self.cache.config().capacity
    }

    /// Resets the context for a new request; adaptation state (cache,
    /// adapter, clock) carries over.
    pub fn start_request(&mut self, prompt: &[TokenId]) -> Result<()> {
        for &t in prompt {
            self.target.vocab().check(t)?;
        }
        self.context = prompt.to_vec();
        Ok(())
    }

    pub fn set_domain(&mut self, domain: Option<usize>) {
        self.domain = domain;
    }

    fn snapshot(&mut self) -> Result<ActiveVocab> {
        let members = self.cache.members_sorted();
        let budget = self.cache.config().capacity;
        if members.len() > budget {
            return Err(Error::Invariant(format!(
                "dynamic buffer holds {} members, budget {budget}",
                members.len()
            )));
        }
        self.stats.peak_dynamic_occupancy = self.stats.peak_dynamic_occupancy.max(members.len());
        ActiveVocab::new(&self.static_vocab, &members, budget)
    }

    /// Runs one draft-verify round and returns its summary.
    pub fn step(&mut self) -> Result<StepOutcome> {
        // (1) Snapshot the active vocabulary; verification and drafting in
        // this step see exactly this set.
        let active = self.snapshot()?;

        let coverage = match self.cfg.coverage_temperature {
            Some(t) => {
                let h = self.target.featurize(&self.context)?;
                let dist = self.target.distribution(&h, t, self.domain)?;
                Some(vocab::coverage(&active, &dist, &self.cfg.coverage_ks, self.cfg.eps_cov)?)
            }
            None => None,
        };

        // (2) Draft.
        let gamma = self.cfg.gamma.min(self.cfg.token_budget);
        let proposals = draft_chain(
            &self.draft,
            &self.context,
            &active,
            gamma,
            self.cfg.temperature,
            &mut self.rng,
        )?;

        // (3) Verify.
        let round = verify_round(
            &self.target,
            &self.context,
            &proposals,
            self.cfg.temperature,
            self.domain,
            self.cfg.k_logit,
            &mut self.rng,
        )?;
        let mut events = round.events;
        for ev in &mut events {
            ev.oov = vocab::is_oov(&active, ev.target_token);
        }

        // (4) Dispatch events: Path A for OOV tokens, Path B otherwise.
        let context_before = self.context.clone();
        let mut oov_count = 0usize;
        let mut tasks_enqueued = 0usize;
        let mut new_tasks: Vec<PendingTask> = Vec::new();
        for (i, ev) in events.iter().enumerate() {
            if ev.oov {
                oov_count += 1;
                if self.arm != RetrievalArm::Off
                    && self.retrieval.is_some()
                    && !self.in_flight.contains(&ev.target_token)
                {
                    let task = PendingTask {
                        id: self.next_task_id,
                        trigger: ev.target_token,
                        hidden: ev.target_hidden.clone(),
                        target_topk: ev.target_topk_ids.clone(),
                        result: None,
                    };
                    self.next_task_id += 1;
                    self.in_flight.insert(ev.target_token);
                    tasks_enqueued += 1;
                    new_tasks.push(task);
                }
            } else if self.alignment.is_some() {
                self.offer_alignment(&active, &context_before, &round.emitted, &events, i)?;
            }
        }

        // Frequency signal: every emitted token counts as an access.
        for &t in &round.emitted {
            self.cache.touch(t, self.step_index);
        }

        // (5) Apply completed retrieval results (enqueued at an earlier
        // boundary; they become visible at the next snapshot).
        let mut tasks_applied = 0usize;
        let mut retrieval_remaining = 0.0f64;
        match self.cfg.mode {
            LatencyMode::Simulated => {
                // Tasks pending from the previous step overlap this step's
                // GPU work (in parallel with each other on the worker pool)
                // and always finish within it because the step stretches.
                if !self.pending.is_empty() {
                    retrieval_remaining = self.cfg.latency.retrieval_ms;
                }
                let done = std::mem::take(&mut self.pending);
                tasks_applied += self.apply_tasks(done)?;
                self.pending = new_tasks;
                for task in &mut self.pending {
                    let bundle = self.retrieval.as_ref().expect("tasks require a bundle");
                    task.result =
                        Some(bundle.candidates_for_arm(self.arm, &task.target_topk, &task.hidden)?);
                }
            }
            LatencyMode::Sync => {
                for task in &mut new_tasks {
                    let bundle = self.retrieval.as_ref().expect("tasks require a bundle");
                    task.result =
                        Some(bundle.candidates_for_arm(self.arm, &task.target_topk, &task.hidden)?);
                }
                tasks_applied += self.apply_tasks(new_tasks)?;
            }
            LatencyMode::RealThreads => {
                if let Some(real) = &self.real {
                    for task in new_tasks {
                        if let Some(tx) = &real.tx {
                            tx.send(task).map_err(|_| {
                                Error::Invariant("retrieval worker disappeared".into())
                            })?;
                        }
                    }
                    let mut arrived: Vec<PendingTask> = Vec::new();
                    while let Ok((id, trigger, set)) = real.rx.try_recv() {
                        arrived.push(PendingTask {
                            id,
                            trigger,
                            hidden: Vec::new(),
                            target_topk: Vec::new(),
                            result: Some(set),
                        });
                    }
                    arrived.sort_by_key(|t| t.id);
                    tasks_applied += self.apply_tasks(arrived)?;
                }
            }
        }

        // (6) Advance the simulated clock.
        let step_ms = simulated_step_time(&self.cfg.latency, retrieval_remaining);
        self.sim_time_ms += step_ms;

        // (7) Output, alignment boundary update, metrics.
        self.context.extend_from_slice(&round.emitted);
        let update = match &mut self.alignment {
            Some(ctl) => ctl.maybe_update(&mut self.draft, self.step_index)?,
            None => None,
        };
        let dynamic_occupancy = self.cache.len();
        self.stats.peak_dynamic_occupancy =
            self.stats.peak_dynamic_occupancy.max(dynamic_occupancy);
        self.stats.steps += 1;
        self.stats.emitted_tokens += round.emitted.len() as u64;
        self.stats.accepted_proposals += round.accepted as u64;
        self.stats.oov_events += oov_count as u64;
        self.stats.tasks_applied += tasks_applied as u64;
        self.stats.sim_time_ms = self.sim_time_ms;
        self.step_index += 1;

        Ok(StepOutcome {
            emitted: round.emitted,
            accepted: round.accepted,
            oov_events: oov_count,
            step_ms,
            tasks_enqueued,
            tasks_applied,
            update,
            coverage,
            dynamic_occupancy,
        })
    }

    fn apply_tasks(&mut self, tasks: Vec<PendingTask>) -> Result<usize> {
        let budget = self.cache.config().capacity;
        let mut applied = 0;
        for task in tasks {
            self.in_flight.remove(&task.trigger);
            if let Some(set) = task.result {
                self.cache.admit(&set.merged, self.step_index);
                if self.cache.len() > budget {
                    return Err(Error::Invariant(format!(
                        "cache exceeded budget after admit: {} > {budget}",
                        self.cache.len()
                    )));
                }
                applied += 1;
            }
        }
        Ok(applied)
    }

    fn offer_alignment(
        &mut self,
        active: &ActiveVocab,
        context_before: &[TokenId],
        emitted: &[TokenId],
        events: &[VerificationEvent],
        index: usize,
    ) -> Result<()> {
        let (eps_align, t_kd, gamma_cl) = {
            let ctl = self.alignment.as_ref().expect("caller checked");
            (ctl.eps_align, ctl.distill.t_kd, ctl.curriculum.gamma)
        };
        let ev = &events[index];
        let mut ctx = context_before.to_vec();
        ctx.extend_from_slice(&emitted[..index]);
        let h_draft = self.draft.featurize(&ctx)?;
        let draft_logits: Vec<f64> =
            ev.target_topk_ids.iter().map(|&t| self.draft.logit_of(&h_draft, t)).collect();
        if !crate::alignment::gate(&ev.target_topk_logits, &draft_logits, ev.rejected, eps_align, t_kd)
        {
            return Ok(());
        }
        // Self-contained snapshot: horizon steps are the remaining event
        // positions of this round, capped at gamma.
        let horizon = (events.len() - index).min(gamma_cl);
        let steps: Vec<RetainedLogits> = events[index..index + horizon]
            .iter()
            .map(|e| RetainedLogits {
                ids: e.target_topk_ids.clone(),
                values: e.target_topk_logits.clone(),
            })
            .collect();
        let entry_emitted: Vec<TokenId> = emitted[index..index + horizon].to_vec();
        // First-step cross-entropy of the draft against the verified token,
        // on the step's snapshot at T = 1, frozen at insertion.
        let dist = self.draft.restricted_distribution(&h_draft, active, 1.0)?;
        let q = dist.prob_of(ev.target_token).max(1e-300);
        let l_base = -q.ln();
        let entry = ReplayEntry { prefix: ctx, steps, emitted: entry_emitted, l_base };
        let ctl = self.alignment.as_mut().expect("caller checked");
        ctl.offer(&ev.target_topk_logits, &draft_logits, ev.rejected, entry);
        Ok(())
    }

    /// Steps until at least `n_tokens` have been emitted for the current
    /// request; returns per-round summaries.
    pub fn generate(&mut self, n_tokens: usize) -> Result<Vec<StepOutcome>> {
        let mut out = Vec::new();
        let mut emitted = 0usize;
        while emitted < n_tokens {
            let step = self.step()?;
            emitted += step.emitted.len();
            out.push(step);
        }
        Ok(out)
    }
}
