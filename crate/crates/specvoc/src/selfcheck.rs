//! Independent oracles and the built-in self test.
//!
//! Everything here deliberately avoids the production data structures it
//! checks: the reference cache simulator uses plain vectors and linear
//! scans, nearest neighbors are found by exhaustive scan, gradients by
//! central finite differences, and losslessness by exact enumeration of
//! every accept/reject outcome of a verification round.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::alignment::{distill_loss, CurriculumConfig, DistillConfig, ReplayBuffer};
use crate::cache::{ArcCache, ArcConfig};
use crate::engine::{self, draft_chain, verify_round};
use crate::models::{build_models, DraftModel, EmbeddingMatrix, ModelSpec, TargetModel};
use crate::retrieval::{build_mips_index, HnswParams};
use crate::vocab::ActiveVocab;
use crate::{Result, TokenId};

// ---------------------------------------------------------------------------
// Brute-force MIPS
// ---------------------------------------------------------------------------

/// Exact top-`n` inner-product tokens, descending, ties toward smaller id.
pub fn brute_force_mips(head: &EmbeddingMatrix, h: &[f64], n: usize) -> Vec<TokenId> {
    let mut ids: Vec<u32> = (0..head.rows() as u32).collect();
    ids.sort_by(|&a, &b| {
        head.dot_row(b as usize, h)
            .partial_cmp(&head.dot_row(a as usize, h))
            .unwrap()
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    ids
}

/// Builds a random `rows x dim` matrix, indexes it, and measures recall@`k`
/// of the index against exhaustive search over `queries` random queries.
pub fn mips_recall(rows: usize, dim: usize, queries: usize, k: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let head = EmbeddingMatrix::from_rows(data)?;
    let index = build_mips_index(&head, HnswParams { seed: seed ^ 0x1D0, ..Default::default() })?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..queries {
        let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth = brute_force_mips(&head, &h, k);
        let got = index.query(&h, k)?;
        total += truth.len();
        hits += truth.iter().filter(|t| got.contains(t)).count();
    }
    Ok(hits as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Reference adaptive replacement cache
// ---------------------------------------------------------------------------

/// Plain-vector transliteration of the cache policy, kept structurally
/// unrelated to the production implementation. Index 0 of each list is the
/// LRU end.
#[derive(Debug, Clone)]
pub struct RefArc {
    cfg: ArcConfig,
    t1: Vec<(TokenId, u64, u64)>,
    t2: Vec<(TokenId, u64, u64)>,
    b1: Vec<TokenId>,
    b2: Vec<TokenId>,
    p: usize,
    events: u64,
}

impl RefArc {
    pub fn new(cfg: ArcConfig) -> Self {
        let p = cfg.initial_target;
        Self { cfg, t1: Vec::new(), t2: Vec::new(), b1: Vec::new(), b2: Vec::new(), p, events: 0 }
    }

    pub fn touch(&mut self, token: TokenId, step: u64) -> bool {
        if let Some(i) = self.t1.iter().position(|e| e.0 == token) {
            let e = self.t1.remove(i);
            self.t2.push((e.0, e.1, step));
            true
        } else if let Some(i) = self.t2.iter().position(|e| e.0 == token) {
            let e = self.t2.remove(i);
            self.t2.push((e.0, e.1, step));
            true
        } else {
            false
        }
    }

    pub fn admit(&mut self, tokens: &[TokenId], step: u64) -> Vec<TokenId> {
        self.events += 1;
        let frozen = self.events <= self.cfg.warmup_events;
        let mut evicted = Vec::new();
        for &token in tokens {
            if self.touch(token, step) {
                continue;
            }
            if let Some(i) = self.b1.iter().position(|&t| t == token) {
                if !frozen {
                    self.p = (self.p + (self.b2.len() / self.b1.len()).max(1)).min(self.cfg.capacity);
                }
                self.b1.remove(i);
                self.evict_if_full(step, &mut evicted);
                self.t2.push((token, step, step));
            } else if let Some(i) = self.b2.iter().position(|&t| t == token) {
                if !frozen {
                    self.p = self.p.saturating_sub((self.b1.len() / self.b2.len()).max(1));
                }
                self.b2.remove(i);
                self.evict_if_full(step, &mut evicted);
                self.t2.push((token, step, step));
            } else {
                self.evict_if_full(step, &mut evicted);
                self.t1.push((token, step, step));
            }
        }
        evicted
    }

    fn evict_if_full(&mut self, step: u64, evicted: &mut Vec<TokenId>) {
        if self.t1.len() + self.t2.len() < self.cfg.capacity {
            return;
        }
        let from_t1 =
            !self.t1.is_empty() && (self.t2.is_empty() || self.t1.len() > self.p);
        let ok = |e: &(TokenId, u64, u64)| step.saturating_sub(e.1) >= self.cfg.min_residency;
        let pick_first = if from_t1 {
            self.t1.iter().position(ok)
        } else {
            self.t2.iter().position(ok)
        };
        let pick_second = if from_t1 {
            self.t2.iter().position(ok)
        } else {
            self.t1.iter().position(ok)
        };
        let (use_t1, idx) = match (pick_first, pick_second) {
            (Some(i), _) => (from_t1, i),
            (None, Some(i)) => (!from_t1, i),
            (None, None) => (from_t1, 0),
        };
        let token = if use_t1 {
            let e = self.t1.remove(idx);
            self.b1.push(e.0);
            while self.b1.len() > self.cfg.ghost_cap_recent {
                self.b1.remove(0);
            }
            e.0
        } else {
            let e = self.t2.remove(idx);
            self.b2.push(e.0);
            while self.b2.len() > self.cfg.ghost_cap_frequent {
                self.b2.remove(0);
            }
            e.0
        };
        evicted.push(token);
    }

    /// Same dump layout as the production cache, for line-level comparison.
    pub fn dump(&self) -> String {
        let res = |list: &Vec<(TokenId, u64, u64)>| {
            list.iter().map(|e| format!("{}@{}", e.0, e.2)).collect::<Vec<_>>().join(", ")
        };
        let ghost =
            |list: &Vec<TokenId>| list.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "T1: {}\nT2: {}\nB1: {}\nB2: {}\np: {}\n",
            res(&self.t1),
            res(&self.t2),
            ghost(&self.b1),
            ghost(&self.b2),
            self.p
        )
    }
}

/// One operation of a cache trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArcOp {
    Touch(TokenId),
    Admit(Vec<TokenId>),
}

/// Generates a reproducible random trace over a small token universe.
pub fn random_arc_trace(ops: usize, universe: u32, seed: u64) -> Vec<ArcOp> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..ops)
        .map(|_| {
            if rng.random_bool(0.45) {
                ArcOp::Touch(rng.random_range(0..universe))
            } else {
                let n = rng.random_range(1..8usize);
                let mut batch: Vec<TokenId> =
                    (0..n).map(|_| rng.random_range(0..universe)).collect();
                batch.sort_unstable();
                batch.dedup();
                ArcOp::Admit(batch)
            }
        })
        .collect()
}

/// Runs the trace through the production cache and the reference simulator,
/// comparing full state dumps and eviction outputs after every operation.
/// Returns the first divergence as an error string.
pub fn arc_trace_equivalence(cfg: ArcConfig, trace: &[ArcOp]) -> std::result::Result<(), String> {
    let mut real = ArcCache::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut oracle = RefArc::new(cfg);
    for (step, op) in trace.iter().enumerate() {
        let step = step as u64;
        match op {
            ArcOp::Touch(t) => {
                let a = real.touch(*t, step);
                let b = oracle.touch(*t, step);
                if a != b {
                    return Err(format!("op {step}: touch({t}) returned {a} vs oracle {b}"));
                }
            }
            ArcOp::Admit(batch) => {
                let a = real.admit(batch, step);
                let b = oracle.admit(batch, step);
                if a != b {
                    return Err(format!("op {step}: admit evicted {a:?} vs oracle {b:?}"));
                }
            }
        }
        if real.len() > real.config().capacity {
            return Err(format!("op {step}: budget violated ({})", real.len()));
        }
        let (da, db) = (real.dump(), oracle.dump());
        if da != db {
            return Err(format!("op {step}: state diverged\nreal:\n{da}\noracle:\n{db}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losslessness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LosslessnessReport {
    /// Worst total-variation distance over all checked position conditionals.
    pub max_tv: f64,
    /// Number of (prefix, position) conditionals checked.
    pub conditionals: usize,
}

/// Exactly enumerates one verification round — every draft chain, every
/// accept/reject branch with its closed-form probability, every residual and
/// bonus draw — and checks that the emitted token at each position,
/// conditioned on the emitted prefix, is distributed exactly like the target
/// model. Branch probabilities use the production acceptance and residual
/// formulas; the expectations come straight from the target distribution.
pub fn enumerate_losslessness(
    target: &TargetModel,
    draft: &DraftModel,
    active: &ActiveVocab,
    context: &[TokenId],
    gamma: usize,
    temperature: f64,
    domain: Option<usize>,
) -> Result<LosslessnessReport> {
    assert!(temperature > 0.0, "enumeration checks the sampling mode");
    let vocab_size = target.vocab().size() as usize;
    let mut terminals: HashMap<Vec<TokenId>, f64> = HashMap::new();

    // Depth-first enumeration over (emitted-prefix, mass).
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        let mut ctx = context.to_vec();
        ctx.extend_from_slice(&prefix);
        let p = {
            let h = target.featurize(&ctx)?;
            target.distribution(&h, temperature, domain)?
        };
        if prefix.len() == gamma {
            // All proposals accepted: bonus token from the target.
            for (z, &pz) in p.iter().enumerate() {
                if pz > 0.0 {
                    let mut seq = prefix.clone();
                    seq.push(z as TokenId);
                    *terminals.entry(seq).or_insert(0.0) += mass * pz;
                }
            }
            continue;
        }
        let q = {
            let h = draft.featurize(&ctx)?;
            draft.restricted_distribution(&h, active, temperature)?
        };
        let q_dense = q.to_dense(vocab_size);
        let residual = engine::residual_distribution(&p, &q_dense);
        for (xi, &qx) in q.tokens.iter().zip(&q.probs) {
            if qx <= 0.0 {
                continue;
            }
            let alpha = engine::acceptance_probability(p[*xi as usize], qx);
            if alpha > 0.0 {
                let mut accepted = prefix.clone();
                accepted.push(*xi);
                stack.push((accepted, mass * qx * alpha));
            }
            let reject_mass = mass * qx * (1.0 - alpha);
            if reject_mass > 0.0 {
                for (y, &ry) in residual.iter().enumerate() {
                    if ry > 0.0 {
                        let mut seq = prefix.clone();
                        seq.push(y as TokenId);
                        *terminals.entry(seq).or_insert(0.0) += reject_mass * ry;
                    }
                }
            }
        }
    }

    // Conditional checks per emitted position.
    let mut max_tv = 0.0f64;
    let mut conditionals = 0usize;
    for depth in 0..=gamma {
        // Group sequences longer than `depth` by their first `depth` tokens.
        let mut groups: HashMap<Vec<TokenId>, HashMap<TokenId, f64>> = HashMap::new();
        for (seq, &m) in &terminals {
            if seq.len() > depth {
                groups
                    .entry(seq[..depth].to_vec())
                    .or_default()
                    .entry(seq[depth])
                    .and_modify(|v| *v += m)
                    .or_insert(m);
            }
        }
        for (prefix, dist) in groups {
            let total: f64 = dist.values().sum();
            if total < 1e-12 {
                continue;
            }
            let mut ctx = context.to_vec();
            ctx.extend_from_slice(&prefix);
            let h = target.featurize(&ctx)?;
            let expect = target.distribution(&h, temperature, domain)?;
            let mut l1 = 0.0;
            for (t, &e) in expect.iter().enumerate() {
                let got = dist.get(&(t as TokenId)).copied().unwrap_or(0.0) / total;
                l1 += (got - e).abs();
            }
            max_tv = max_tv.max(0.5 * l1);
            conditionals += 1;
        }
    }
    Ok(LosslessnessReport { max_tv, conditionals })
}

/// Standard small fixture for the enumeration: |V| = 8, hidden 3, a reduced
/// active vocabulary of 4 tokens.
pub fn enumeration_fixture(seed: u64) -> (TargetModel, DraftModel, ActiveVocab, Vec<TokenId>) {
    let spec = ModelSpec { seed, vocab_size: 8, hidden_dim: 3, window: 3, domains: vec![] };
    let (target, draft) = build_models(&spec, 2, 2.0).expect("fixture build");
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xF1F1);
    let mut members: Vec<TokenId> = (0..8).collect();
    for i in (1..members.len()).rev() {
        members.swap(i, rng.random_range(0..=i));
    }
    members.truncate(4);
    members.sort_unstable();
    let active = ActiveVocab::from_sets(8, &members, &[], 4).expect("fixture active set");
    (target, draft, active, vec![1, 5])
}

/// Runs many independent verification rounds through the production draft
/// and verify code and measures the total-variation distance between the
/// first emitted token's empirical distribution and the target's. When
/// `corrupt_support` is set, drafted proposals are swapped for tokens outside
/// the active set — the engine must reject these traces, which the caller
/// observes as the returned error.
pub fn statistical_losslessness(
    seed: u64,
    rounds: usize,
    gamma: usize,
    corrupt_support: bool,
) -> Result<f64> {
    let spec = ModelSpec { seed, vocab_size: 20, hidden_dim: 4, window: 3, domains: vec![] };
    let (target, draft) = build_models(&spec, 2, 2.0)?;
    let members: Vec<TokenId> = vec![0, 2, 3, 7, 8, 11, 15, 19];
    let active = ActiveVocab::from_sets(20, &members, &[], 8)?;
    let context = vec![4, 9, 14];
    let temperature = 1.0;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x57A7);
    let mut counts = vec![0u64; 20];
    for _ in 0..rounds {
        let mut chain = draft_chain(&draft, &context, &active, gamma, temperature, &mut rng)?;
        if corrupt_support {
            let outside = (0..20u32).find(|t| !active.contains(*t)).expect("token outside");
            chain[0].0 = outside;
        }
        let round = verify_round(&target, &context, &chain, temperature, None, 5, &mut rng)?;
        counts[round.emitted[0] as usize] += 1;
    }
    let h = target.featurize(&context)?;
    let expect = target.distribution(&h, temperature, None)?;
    let n = rounds as f64;
    let l1: f64 = counts.iter().zip(&expect).map(|(c, e)| (*c as f64 / n - e).abs()).sum();
    Ok(0.5 * l1)
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Central finite differences of the distillation loss with respect to every
/// adapter entry.
pub fn finite_difference_grads(
    buffer: &ReplayBuffer,
    draft: &DraftModel,
    curriculum: &CurriculumConfig,
    distill: &DistillConfig,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = draft.adapter().dim();
    let r = draft.adapter().rank();
    let loss_with = |which_a: bool, idx: usize, delta: f64| -> f64 {
        let mut probe = draft.clone();
        let mut ga = vec![0.0; d * r];
        let mut gb = vec![0.0; d * r];
        if which_a {
            ga[idx] = 1.0;
        } else {
            gb[idx] = 1.0;
        }
        // A unit "gradient" with negative learning rate adds +delta.
        probe.adapter_mut().step(&ga, &gb, -delta).expect("probe step");
        distill_loss(buffer, &probe, curriculum, distill).expect("probe loss").loss
    };
    let mut fd_a = vec![0.0; d * r];
    let mut fd_b = vec![0.0; d * r];
    for i in 0..d * r {
        fd_a[i] = (loss_with(true, i, h) - loss_with(true, i, -h)) / (2.0 * h);
        fd_b[i] = (loss_with(false, i, h) - loss_with(false, i, -h)) / (2.0 * h);
    }
    (fd_a, fd_b)
}

// ---------------------------------------------------------------------------
// Self test
// ---------------------------------------------------------------------------

/// Deliberate corruption for exercising the self test's failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drafted proposals are swapped for tokens with zero draft probability.
    QSupportViolation,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the oracle suite: losslessness (enumerated and statistical),
/// gradient check, cache trace equivalence, and index recall.
pub fn run_selftest(fault: Option<Fault>) -> Vec<CheckResult> {
    let mut results = Vec::new();

    // Enumerated losslessness on the small fixture.
    let (target, draft, active, ctx) = enumeration_fixture(7);
    let check = match enumerate_losslessness(&target, &draft, &active, &ctx, 2, 1.0, None) {
        Ok(report) => CheckResult {
            name: "losslessness-enumeration",
            passed: report.max_tv < 1e-9,
            detail: format!("max TV {:.3e} over {} conditionals", report.max_tv, report.conditionals),
        },
        Err(e) => CheckResult {
            name: "losslessness-enumeration",
            passed: false,
            detail: e.to_string(),
        },
    };
    results.push(check);

    // Statistical losslessness through the production verify path.
    let corrupt = fault == Some(Fault::QSupportViolation);
    let check = match statistical_losslessness(11, 200_000, 2, corrupt) {
        Ok(tv) => CheckResult {
            name: "losslessness-statistical",
            passed: tv < 0.01,
            detail: format!("first-token TV {tv:.5} over 200000 rounds"),
        },
        Err(e) => CheckResult {
            name: "losslessness-statistical",
            passed: false,
            detail: format!("verification aborted: {e}"),
        },
    };
    results.push(check);

    // Gradient check on random small instances.
    let mut worst = 0.0f64;
    let mut grad_fail = None;
    for trial in 0..10u64 {
        let spec =
            ModelSpec { seed: 100 + trial, vocab_size: 24, hidden_dim: 5, ..Default::default() };
        let (_, draft) = match build_models(&spec, 2, 2.0) {
            Ok(x) => x,
            Err(e) => {
                grad_fail = Some(e.to_string());
                break;
            }
        };
        let mut rng = ChaCha12Rng::seed_from_u64(trial);
        let buffer = random_replay_buffer(&mut rng, 3, 24, 3);
        let curriculum = CurriculumConfig { beta: 0.3, gamma: 3 };
        let distill = DistillConfig { t_kd: [0.5, 1.0, 2.0][(trial % 3) as usize], ..Default::default() };
        match distill_loss(&buffer, &draft, &curriculum, &distill) {
            Ok(out) => {
                let (fa, fb) = finite_difference_grads(&buffer, &draft, &curriculum, &distill, 1e-5);
                for (g, f) in out.grads.a.iter().chain(out.grads.b.iter()).zip(fa.iter().chain(fb.iter()))
                {
                    let rel = (g - f).abs() / g.abs().max(f.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
            Err(e) => {
                grad_fail = Some(e.to_string());
                break;
            }
        }
    }
    results.push(match grad_fail {
        None => CheckResult {
            name: "gradient-check",
            passed: worst < 1e-4,
            detail: format!("worst relative error {worst:.3e}"),
        },
        Some(e) => CheckResult { name: "gradient-check", passed: false, detail: e },
    });

    // Cache trace equivalence.
    let cfg = ArcConfig {
        capacity: 24,
        initial_target: 12,
        ghost_cap_recent: 24,
        ghost_cap_frequent: 24,
        min_residency: 0,
        warmup_events: 0,
    };
    let trace = random_arc_trace(10_000, 96, 31);
    results.push(match arc_trace_equivalence(cfg, &trace) {
        Ok(()) => CheckResult {
            name: "arc-trace-equivalence",
            passed: true,
            detail: "10000 operations, state identical throughout".into(),
        },
        Err(e) => CheckResult { name: "arc-trace-equivalence", passed: false, detail: e },
    });

    // Index recall at the standard scale.
    results.push(match mips_recall(5000, 32, 100, 10, 99) {
        Ok(recall) => CheckResult {
            name: "mips-recall",
            passed: recall >= 0.95,
            detail: format!("recall@10 = {recall:.4} on 5000x32 / 100 queries"),
        },
        Err(e) => CheckResult { name: "mips-recall", passed: false, detail: e.to_string() },
    });

    results
}

/// Random replay entries over small retained supports, for gradient checks.
pub fn random_replay_buffer(
    rng: &mut ChaCha12Rng,
    entries: usize,
    vocab: u32,
    max_gamma: usize,
) -> ReplayBuffer {
    let mut buffer = ReplayBuffer::new(entries.max(1));
    for _ in 0..entries {
        let prefix: Vec<TokenId> =
            (0..rng.random_range(1..4usize)).map(|_| rng.random_range(0..vocab)).collect();
        let horizon = rng.random_range(1..=max_gamma);
        let mut steps = Vec::new();
        let mut emitted = Vec::new();
        for _ in 0..horizon {
            let k = rng.random_range(2..5usize);
            let mut ids: Vec<TokenId> = Vec::new();
            while ids.len() < k {
                let t = rng.random_range(0..vocab);
                if !ids.contains(&t) {
                    ids.push(t);
                }
            }
            let values: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            emitted.push(ids[0]);
            steps.push(crate::alignment::RetainedLogits { ids, values });
        }
        let l_base = rng.random_range(0.0..2.0);
        buffer.push(crate::alignment::ReplayEntry { prefix, steps, emitted, l_base });
    }
    buffer
}
