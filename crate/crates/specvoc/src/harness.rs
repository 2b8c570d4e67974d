//! Scenario generation, experiment runners, and metrics files.
//!
//! Synthetic multi-domain token streams drive every experiment: a Zipf base
//! distribution plus a per-domain hot block whose boost follows the domain's
//! bias scale, with short collocation chains inside the hot block so bigram
//! statistics carry real signal. Scenarios run the full engine request by
//! request; ablation variants disable the expansion path, parts of candidate
//! formation, or the alignment path — nothing else differs between arms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::Serialize;

use crate::alignment::{AlignmentController, ReplayEntry, RetainedLogits, UpdateTrace};
use crate::cache::ArcCache;
use crate::config::RunConfig;
use crate::engine::{Engine, StepOutcome};
use crate::models::{build_models, top_k, DomainSpec, DraftModel, TargetModel};
use crate::retrieval::{
    build_graph, build_mips_index, CandidateConfig, RetrievalArm, RetrievalBundle,
};
use crate::vocab::{self, build_static, ActiveVocab, StaticVocab};
use crate::{par, Error, Result, TokenId};

/// Probability that a hot token is followed by its collocation successor.
const CHAIN_PROB: f64 = 0.5;
/// Zipf exponent for the within-hot-block marginal.
const HOT_ZIPF_EXPONENT: f64 = 1.05;
const STATIC_CORPUS_LEN: usize = 120_000;
const GRAPH_SEGMENT_LEN: usize = 60_000;

fn subseed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic collocation successor inside the hot block: a fixed stride
/// walk, so frequent tokens chain into less-frequent ones and the bigram
/// graph can prefetch them.
pub fn chain_successor(domain: &DomainSpec, token: TokenId) -> TokenId {
    let len = domain.hot_len();
    let stride = len / 3 + 1;
    domain.hot_range.0 + ((token - domain.hot_range.0) + stride) % len
}

/// Samples a domain-flavored token stream: Zipf base mass, hot-block mass
/// proportional to `bias_scale / (1 + bias_scale)`, and collocation chains
/// within the hot block. Deterministic given the seed; a zero bias scale
/// yields plain Zipf.
pub fn gen_corpus(
    domain: &DomainSpec,
    vocab_size: u32,
    length: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if length == 0 {
        return Err(Error::InvalidInput("corpus length must be at least 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let base = Zipf::new(vocab_size as f64, domain.zipf_exponent)
        .map_err(|e| Error::InvalidInput(format!("zipf: {e}")))?;
    let hot_len = domain.hot_len();
    let p_hot = if hot_len == 0 { 0.0 } else { domain.bias_scale / (1.0 + domain.bias_scale) };
    let hot = if hot_len > 0 {
        Some(
            Zipf::new(hot_len as f64, HOT_ZIPF_EXPONENT)
                .map_err(|e| Error::InvalidInput(format!("zipf: {e}")))?,
        )
    } else {
        None
    };
    let mut out = Vec::with_capacity(length);
    let mut prev: Option<TokenId> = None;
    for _ in 0..length {
        let chained = match prev {
            Some(p) if p_hot > 0.0 && domain.is_hot(p) => rng.random_bool(CHAIN_PROB),
            _ => false,
        };
        let token = if chained {
            chain_successor(domain, prev.unwrap())
        } else if p_hot > 0.0 && rng.random_bool(p_hot) {
            let r = hot.as_ref().unwrap().sample(&mut rng) as u32;
            domain.hot_range.0 + (r - 1).min(hot_len - 1)
        } else {
            (base.sample(&mut rng) as u32 - 1).min(vocab_size - 1)
        };
        out.push(token);
        prev = Some(token);
    }
    Ok(out)
}

/// One stretch of requests from a single domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub domain_index: usize,
    pub requests: usize,
    pub tokens_per_request: usize,
    pub prompt_len: usize,
}

/// An ordered request schedule over named domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScript {
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub segments: Vec<Segment>,
}

impl ScenarioScript {
    pub fn total_requests(&self) -> usize {
        self.segments.iter().map(|s| s.requests).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidInput("scenario needs at least one segment".into()));
        }
        for s in &self.segments {
            if s.domain_index >= self.domains.len() {
                return Err(Error::InvalidInput(format!(
                    "segment references domain {} of {}",
                    s.domain_index,
                    self.domains.len()
                )));
            }
            if s.requests == 0 || s.tokens_per_request == 0 {
                return Err(Error::InvalidInput("segment requests and tokens must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        for (i, d) in self.domains.iter().enumerate() {
            let _ = writeln!(s, "domain.{i}.name = {}", d.name);
            let _ = writeln!(s, "domain.{i}.zipf = {}", d.zipf_exponent);
            let _ = writeln!(s, "domain.{i}.hot = {}..{}", d.hot_range.0, d.hot_range.1);
            let _ = writeln!(s, "domain.{i}.bias = {}", d.bias_scale);
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let _ = writeln!(s, "segment.{i}.domain = {}", self.domains[seg.domain_index].name);
            let _ = writeln!(s, "segment.{i}.requests = {}", seg.requests);
            let _ = writeln!(s, "segment.{i}.tokens = {}", seg.tokens_per_request);
            let _ = writeln!(s, "segment.{i}.prompt = {}", seg.prompt_len);
        }
        s
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut seed = 0u64;
        let mut domains: BTreeMap<usize, DomainSpec> = BTreeMap::new();
        let mut segments: BTreeMap<usize, (String, usize, usize, usize)> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("scenario line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| Error::InvalidInput(format!("scenario line {}: bad {what}: {value}", lineno + 1));
            if key == "seed" {
                seed = value.parse().map_err(|_| bad("seed"))?;
            } else if let Some(rest) = key.strip_prefix("domain.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| bad("domain key"))?;
                let idx: usize = idx.parse().map_err(|_| bad("domain index"))?;
                let d = domains.entry(idx).or_insert_with(|| DomainSpec {
                    name: String::new(),
                    zipf_exponent: 1.05,
                    hot_range: (0, 0),
                    bias_scale: 0.0,
                });
                match field {
                    "name" => d.name = value.to_string(),
                    "zipf" => d.zipf_exponent = value.parse().map_err(|_| bad("zipf"))?,
                    "bias" => d.bias_scale = value.parse().map_err(|_| bad("bias"))?,
                    "hot" => {
                        let (a, b) = value.split_once("..").ok_or_else(|| bad("hot range"))?;
                        d.hot_range = (
                            a.trim().parse().map_err(|_| bad("hot start"))?,
                            b.trim().parse().map_err(|_| bad("hot end"))?,
                        );
                    }
                    other => return Err(bad(&format!("domain field {other}"))),
                }
            } else if let Some(rest) = key.strip_prefix("segment.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| bad("segment key"))?;
                let idx: usize = idx.parse().map_err(|_| bad("segment index"))?;
                let seg = segments.entry(idx).or_insert((String::new(), 0, 0, 8));
                match field {
                    "domain" => seg.0 = value.to_string(),
                    "requests" => seg.1 = value.parse().map_err(|_| bad("requests"))?,
                    "tokens" => seg.2 = value.parse().map_err(|_| bad("tokens"))?,
                    "prompt" => seg.3 = value.parse().map_err(|_| bad("prompt"))?,
                    other => return Err(bad(&format!("segment field {other}"))),
                }
            } else {
                return Err(Error::InvalidInput(format!(
                    "scenario line {}: unknown key {key}",
                    lineno + 1
                )));
            }
        }
        let domains: Vec<DomainSpec> = domains.into_values().collect();
        let mut segs = Vec::new();
        for (_, (name, requests, tokens, prompt)) in segments {
            let domain_index = domains
                .iter()
                .position(|d| d.name == name)
                .ok_or_else(|| Error::InvalidInput(format!("segment references unknown domain {name:?}")))?;
            segs.push(Segment {
                domain_index,
                requests,
                tokens_per_request: tokens,
                prompt_len: prompt,
            });
        }
        let script = ScenarioScript { seed, domains, segments: segs };
        script.validate()?;
        Ok(script)
    }
}

/// The standard three-domain universe: a general domain whose hot block the
/// static vocabulary covers, plus two shifted domains with disjoint hot
/// blocks far outside it.
pub fn standard_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec { name: "general".into(), zipf_exponent: 1.05, hot_range: (256, 512), bias_scale: 1.0 },
        DomainSpec { name: "domain_a".into(), zipf_exponent: 1.05, hot_range: (2048, 2304), bias_scale: 4.0 },
        DomainSpec { name: "domain_b".into(), zipf_exponent: 1.05, hot_range: (3072, 3328), bias_scale: 4.0 },
    ]
}

/// The abrupt-switch schedule: general requests, then a hard transition into
/// a shifted domain at the midpoint.
pub fn topic_switch_script(seed: u64, requests_per_segment: usize) -> ScenarioScript {
    let domains = standard_domains();
    ScenarioScript {
        seed,
        domains,
        segments: vec![
            Segment { domain_index: 0, requests: requests_per_segment, tokens_per_request: 30, prompt_len: 8 },
            Segment { domain_index: 1, requests: requests_per_segment, tokens_per_request: 30, prompt_len: 8 },
        ],
    }
}

/// Ablation arms: which feedback paths run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Static vocabulary only; both paths off.
    StaticOnly,
    /// Dynamic vocabulary fed by semantic retrieval only.
    PlusHnsw,
    /// Semantic retrieval plus graph expansion of the semantic seeds.
    PlusGraph,
    /// Full candidate formation, no online alignment.
    NoAlignment,
    /// Everything on.
    Full,
}

impl Variant {
    pub fn arm(&self) -> RetrievalArm {
        match self {
            Variant::StaticOnly => RetrievalArm::Off,
            Variant::PlusHnsw => RetrievalArm::Semantic,
            Variant::PlusGraph => RetrievalArm::SemanticGraph,
            Variant::NoAlignment | Variant::Full => RetrievalArm::Full,
        }
    }

    pub fn alignment_on(&self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::StaticOnly => "static_only",
            Variant::PlusHnsw => "+hnsw",
            Variant::PlusGraph => "+graph",
            Variant::NoAlignment => "no_alignment",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static_only" => Ok(Variant::StaticOnly),
            "+hnsw" | "hnsw" => Ok(Variant::PlusHnsw),
            "+graph" | "graph" => Ok(Variant::PlusGraph),
            "no_alignment" => Ok(Variant::NoAlignment),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected static_only|+hnsw|+graph|no_alignment|full)"
            ))),
        }
    }

    pub fn all() -> [Variant; 5] {
        [Variant::StaticOnly, Variant::PlusHnsw, Variant::PlusGraph, Variant::NoAlignment, Variant::Full]
    }
}

/// Built models and retrieval structures shared by every arm of a run.
pub struct World {
    pub target: Arc<TargetModel>,
    pub draft: DraftModel,
    pub static_vocab: Arc<StaticVocab>,
    pub bundle: Arc<RetrievalBundle>,
    pub domains: Vec<DomainSpec>,
}

/// Builds the world for a config and domain set. The static vocabulary is
/// built from the first domain's corpus (the "general" build corpus); the
/// co-occurrence graph from a mixed corpus spanning every domain, so it
/// carries each domain's collocations.
pub fn build_world(cfg: &RunConfig, domains: &[DomainSpec]) -> Result<World> {
    if domains.is_empty() {
        return Err(Error::InvalidInput("world needs at least one domain".into()));
    }
    cfg.validate()?;
    let spec = cfg.model_spec(domains.to_vec());
    let (target, draft) = build_models(&spec, cfg.lora_rank, cfg.lora_alpha)?;
    let static_corpus = gen_corpus(&domains[0], cfg.vocab_size, STATIC_CORPUS_LEN, subseed(cfg.seed, 1))?;
    let static_vocab = build_static(&static_corpus, cfg.static_size, cfg.vocab_size)?;
    let mut graph_corpus = Vec::with_capacity(GRAPH_SEGMENT_LEN * domains.len());
    for (i, d) in domains.iter().enumerate() {
        graph_corpus.extend(gen_corpus(d, cfg.vocab_size, GRAPH_SEGMENT_LEN, subseed(cfg.seed, 100 + i as u64))?);
    }
    let graph = build_graph(&graph_corpus, cfg.graph_thresholds(), cfg.vocab_size)?;
    let index = build_mips_index(target.lm_head(), cfg.hnsw_params())?;
    Ok(World {
        target: Arc::new(target),
        draft,
        static_vocab: Arc::new(static_vocab),
        bundle: Arc::new(RetrievalBundle { index, graph, config: CandidateConfig::default() }),
        domains: domains.to_vec(),
    })
}

/// Wires an engine for one variant over a shared world.
pub fn engine_for_variant(world: &World, cfg: &RunConfig, variant: Variant) -> Result<Engine> {
    let alignment = variant.alignment_on().then(|| {
        AlignmentController::new(cfg.buffer_size, cfg.curriculum(), cfg.distill(), cfg.eps_align)
    });
    let retrieval = match variant.arm() {
        RetrievalArm::Off => None,
        _ => Some(Arc::clone(&world.bundle)),
    };
    Engine::new(
        Arc::clone(&world.target),
        world.draft.clone(),
        Arc::clone(&world.static_vocab),
        ArcCache::new(cfg.arc_config())?,
        retrieval,
        variant.arm(),
        alignment,
        cfg.engine_config(),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct RequestMetrics {
    pub request: usize,
    pub domain: String,
    pub mal: f64,
    pub rounds: usize,
    pub emitted: usize,
    pub oov_events: usize,
    pub updates: usize,
    /// Engine wall clock (simulated ms) at the end of this request.
    pub sim_ms: f64,
    pub covered_mass: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub variant: &'static str,
    pub seed: u64,
    pub per_request: Vec<RequestMetrics>,
    pub overall_mal: f64,
    pub emitted_tokens: usize,
    pub rounds: usize,
    pub oov_events: u64,
    pub updates: u64,
    pub peak_dynamic_occupancy: usize,
    pub sim_time_ms: f64,
    /// Emitted tokens per simulated millisecond.
    pub throughput: f64,
}

impl RunMetrics {
    /// Trailing mean of per-request acceptance length over a request window.
    pub fn trailing_mal(&self, start: usize, end: usize) -> f64 {
        let slice = &self.per_request[start.min(self.per_request.len())..end.min(self.per_request.len())];
        if slice.is_empty() {
            return 0.0;
        }
        slice.iter().map(|r| r.mal).sum::<f64>() / slice.len() as f64
    }
}

/// Runs one scenario end to end under a variant. Prompts depend only on the
/// script seed and request index, so every arm sees identical requests.
pub fn run_scenario(script: &ScenarioScript, cfg: &RunConfig, variant: Variant) -> Result<RunMetrics> {
    script.validate()?;
    let world = build_world(cfg, &script.domains)?;
    run_scenario_in_world(&world, script, cfg, variant)
}

/// As [`run_scenario`] but over a prebuilt world (shared across arms).
pub fn run_scenario_in_world(
    world: &World,
    script: &ScenarioScript,
    cfg: &RunConfig,
    variant: Variant,
) -> Result<RunMetrics> {
    let mut engine = engine_for_variant(world, cfg, variant)?;
    let mut per_request = Vec::with_capacity(script.total_requests());
    let mut request_index = 0usize;
    let mut total_emitted = 0usize;
    let mut total_rounds = 0usize;
    for segment in &script.segments {
        let domain = &script.domains[segment.domain_index];
        for _ in 0..segment.requests {
            let prompt = gen_corpus(
                domain,
                cfg.vocab_size,
                segment.prompt_len.max(1),
                subseed(script.seed, 0x5000 + request_index as u64),
            )?;
            engine.set_domain(Some(segment.domain_index));
            engine.start_request(&prompt)?;
            let outcomes = engine.generate(segment.tokens_per_request)?;
            let emitted: usize = outcomes.iter().map(|o| o.emitted.len()).sum();
            let rounds = outcomes.len();
            let oov: usize = outcomes.iter().map(|o| o.oov_events).sum();
            let updates = outcomes.iter().filter(|o| o.update.is_some()).count();
            let covered = mean_coverage(&outcomes);
            per_request.push(RequestMetrics {
                request: request_index,
                domain: domain.name.clone(),
                mal: emitted as f64 / rounds as f64,
                rounds,
                emitted,
                oov_events: oov,
                updates,
                sim_ms: engine.sim_time_ms(),
                covered_mass: covered,
            });
            total_emitted += emitted;
            total_rounds += rounds;
            request_index += 1;
        }
    }
    let stats = engine.stats();
    Ok(RunMetrics {
        variant: variant.name(),
        seed: cfg.seed,
        overall_mal: total_emitted as f64 / total_rounds.max(1) as f64,
        emitted_tokens: total_emitted,
        rounds: total_rounds,
        oov_events: stats.oov_events,
        updates: engine.alignment().map(|a| a.updates()).unwrap_or(0),
        peak_dynamic_occupancy: stats.peak_dynamic_occupancy,
        sim_time_ms: stats.sim_time_ms,
        throughput: total_emitted as f64 / stats.sim_time_ms.max(f64::MIN_POSITIVE),
        per_request,
    })
}

fn mean_coverage(outcomes: &[StepOutcome]) -> Option<f64> {
    let masses: Vec<f64> = outcomes.iter().filter_map(|o| o.coverage.as_ref().map(|c| c.covered_mass)).collect();
    if masses.is_empty() {
        None
    } else {
        Some(masses.iter().sum::<f64>() / masses.len() as f64)
    }
}

/// Runs several seeds of the same (script, variant) in parallel.
pub fn run_scenario_seeds(
    script: &ScenarioScript,
    cfg: &RunConfig,
    variant: Variant,
    seeds: &[u64],
) -> Result<Vec<RunMetrics>> {
    let runs: Vec<(u64, ScenarioScript, RunConfig)> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            let mut sc = script.clone();
            sc.seed = subseed(s, 0xC0FFEE);
            (s, sc, c)
        })
        .collect();
    par::map_indexed(&runs, |(_, sc, c)| run_scenario(sc, c, variant))
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// Coverage study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub arm: &'static str,
    pub covered_mass: f64,
    pub recalls: Vec<(usize, f64)>,
    pub oov_events: usize,
}

pub fn arm_name(arm: RetrievalArm) -> &'static str {
    match arm {
        RetrievalArm::Off => "static",
        RetrievalArm::Semantic => "static+hnsw",
        RetrievalArm::SemanticGraph => "static+hnsw+graph",
        RetrievalArm::Full => "full",
    }
}

/// Teacher-forced coverage walk: advances through a fixed domain stream,
/// measuring per-step covered mass and recall of the active vocabulary
/// against the target's next-token distribution, and driving the arm's
/// retrieval on each out-of-vocabulary stream token. Retrieval applies at
/// the step boundary after the measurement.
pub fn coverage_walk(
    world: &World,
    cfg: &RunConfig,
    arm: RetrievalArm,
    stream: &[TokenId],
    domain_index: usize,
    ks: &[usize],
) -> Result<CoverageRow> {
    let mut cache = ArcCache::new(cfg.arc_config())?;
    let budget = cfg.dyn_size;
    let mut mass_sum = 0.0f64;
    let mut recall_sums = vec![0.0f64; ks.len()];
    let mut steps = 0usize;
    let mut oov_events = 0usize;
    let start = cfg.window.min(stream.len().saturating_sub(1));
    for i in start..stream.len() {
        let step = i as u64;
        let ctx = &stream[..i];
        let h = world.target.featurize(ctx)?;
        let dist = world.target.distribution(&h, 1.0, Some(domain_index))?;
        let active = ActiveVocab::new(&world.static_vocab, &cache.members_sorted(), budget)?;
        let report = vocab::coverage(&active, &dist, ks, cfg.eps_cov)?;
        mass_sum += report.covered_mass;
        for (j, (_, r)) in report.recall_at_k.iter().enumerate() {
            recall_sums[j] += r;
        }
        steps += 1;
        let next = stream[i];
        cache.touch(next, step);
        if vocab::is_oov(&active, next) {
            oov_events += 1;
            if arm != RetrievalArm::Off {
                let logits = world.target.full_logits(&h, Some(domain_index))?;
                let (topk, _) = top_k(&logits, world.bundle.config.target_seed_n);
                let set = world.bundle.candidates_for_arm(arm, &topk, &h)?;
                cache.admit(&set.merged, step);
            }
        }
    }
    let n = steps.max(1) as f64;
    Ok(CoverageRow {
        arm: arm_name(arm),
        covered_mass: mass_sum / n,
        recalls: ks.iter().zip(&recall_sums).map(|(&k, &s)| (k, s / n)).collect(),
        oov_events,
    })
}

/// Averages coverage rows per arm over several stream seeds (in parallel).
/// The stream comes from `domains[shifted]`, the shifted-domain fixture.
pub fn coverage_study(
    cfg: &RunConfig,
    domains: &[DomainSpec],
    shifted: usize,
    arms: &[RetrievalArm],
    seeds: &[u64],
    stream_len: usize,
    ks: &[usize],
) -> Result<Vec<CoverageRow>> {
    if shifted >= domains.len() {
        return Err(Error::InvalidInput(format!(
            "shifted domain index {shifted} out of range ({} domains)",
            domains.len()
        )));
    }
    // One world per seed, shared by every arm (the index build dominates).
    let per_seed: Result<Vec<Vec<(RetrievalArm, CoverageRow)>>> =
        par::map_indexed(seeds, |&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            let world = build_world(&c, domains)?;
            let stream =
                gen_corpus(&domains[shifted], c.vocab_size, stream_len, subseed(seed, 0xC0))?;
            arms.iter()
                .map(|&arm| Ok((arm, coverage_walk(&world, &c, arm, &stream, shifted, ks)?)))
                .collect()
        })
        .into_iter()
        .collect();
    let rows: Vec<(RetrievalArm, CoverageRow)> = per_seed?.into_iter().flatten().collect();
    let mut out = Vec::new();
    for &arm in arms {
        let mine: Vec<&CoverageRow> = rows.iter().filter(|(a, _)| *a == arm).map(|(_, r)| r).collect();
        let n = mine.len().max(1) as f64;
        out.push(CoverageRow {
            arm: arm_name(arm),
            covered_mass: mine.iter().map(|r| r.covered_mass).sum::<f64>() / n,
            recalls: ks
                .iter()
                .enumerate()
                .map(|(j, &k)| (k, mine.iter().map(|r| r.recalls[j].1).sum::<f64>() / n))
                .collect(),
            oov_events: mine.iter().map(|r| r.oov_events).sum::<usize>() / mine.len().max(1),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Beta sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SweepParams {
    /// Total replay entries fed per arm (updates = entries / buffer_size).
    pub entries: usize,
    /// Distal-noise scale on shifted-domain entries.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self { entries: 2048, noise: 8.0, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaRun {
    pub beta: f64,
    pub updates: Vec<UpdateTrace>,
    /// Trailing mean of the unweighted loss over the last 20% of updates.
    pub final_smoothed: f64,
}

/// A raw synthetic supervision event; the entry's `l_base` is filled at
/// insertion time from the live draft, like the engine does.
#[derive(Debug, Clone)]
struct RawEvent {
    prefix: Vec<TokenId>,
    steps: Vec<RetainedLogits>,
    emitted: Vec<TokenId>,
}

/// Generates the high-noise stream: entries alternate between the aligned
/// general domain (clean supervision over the whole horizon) and a shifted
/// domain whose distal steps carry increasing logit noise. The stream is
/// fixed before any arm runs, so every beta sees identical data.
fn sweep_stream(world: &World, cfg: &RunConfig, params: &SweepParams) -> Result<Vec<RawEvent>> {
    let mut rng = ChaCha12Rng::seed_from_u64(subseed(params.seed, 0xBE7A));
    let gamma = cfg.gamma.min(3);
    let mut events = Vec::with_capacity(params.entries);
    let corpora: Vec<Vec<TokenId>> = world
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| gen_corpus(d, cfg.vocab_size, 4096, subseed(params.seed, 0xD0 + i as u64)))
        .collect::<Result<_>>()?;
    for n in 0..params.entries {
        // Noisy entries are the minority, so the comparable (unweighted)
        // loss is dominated by learnable signal, but their distal noise is
        // violent enough to destabilize a flat horizon.
        let noisy = n % 4 == 3;
        let domain_index = if noisy { 1 } else { 0 };
        let corpus = &corpora[domain_index];
        let at = rng.random_range(cfg.window..corpus.len() - gamma - 1);
        let prefix: Vec<TokenId> = corpus[at - cfg.window..at].to_vec();
        let mut ctx = prefix.clone();
        let mut steps = Vec::with_capacity(gamma);
        let mut emitted = Vec::with_capacity(gamma);
        for j in 0..gamma {
            let h = world.target.featurize(&ctx)?;
            let logits = world.target.full_logits(&h, Some(domain_index))?;
            let (ids, mut values) = top_k(&logits, cfg.k_logit.min(16));
            if noisy && j > 0 {
                for v in &mut values {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += params.noise * j as f64 * z;
                }
            }
            let token = corpus[at + j];
            emitted.push(token);
            steps.push(RetainedLogits { ids, values });
            ctx.push(token);
        }
        events.push(RawEvent { prefix, steps, emitted });
    }
    Ok(events)
}

/// Runs the alignment loop over the fixed stream once per beta, all other
/// settings identical, and reports loss-versus-update trajectories. The
/// stream alternates entries from `domains[0]` (clean) and `domains[1]`
/// (distal noise).
pub fn beta_sweep(
    cfg: &RunConfig,
    domains: &[DomainSpec],
    betas: &[f64],
    params: &SweepParams,
) -> Result<Vec<BetaRun>> {
    for &b in betas {
        if b < 0.0 {
            return Err(Error::Config(format!("beta must be nonnegative, got {b}")));
        }
    }
    if domains.len() < 2 {
        return Err(Error::InvalidInput("beta sweep needs a clean and a shifted domain".into()));
    }
    let world = build_world(cfg, domains)?;
    let stream = sweep_stream(&world, cfg, &params.clone())?;
    let static_active =
        ActiveVocab::new(&world.static_vocab, &[], cfg.dyn_size)?;
    let jobs: Vec<f64> = betas.to_vec();
    par::map_indexed(&jobs, |&beta| {
        let mut draft = world.draft.clone();
        let mut curriculum = cfg.curriculum();
        curriculum.beta = beta;
        let mut ctl =
            AlignmentController::new(cfg.buffer_size, curriculum, cfg.distill(), cfg.eps_align);
        for (step, raw) in stream.iter().enumerate() {
            let h = draft.featurize(&raw.prefix)?;
            let dist = draft.restricted_distribution(&h, &static_active, 1.0)?;
            let l_base = -dist.prob_of(raw.emitted[0]).max(1e-300).ln();
            ctl.push(ReplayEntry {
                prefix: raw.prefix.clone(),
                steps: raw.steps.clone(),
                emitted: raw.emitted.clone(),
                l_base,
            });
            ctl.maybe_update(&mut draft, step as u64)?;
        }
        let updates: Vec<UpdateTrace> = ctl.trace().to_vec();
        let tail = (updates.len() as f64 * 0.2).ceil().max(1.0) as usize;
        let last = &updates[updates.len().saturating_sub(tail)..];
        let final_smoothed =
            last.iter().map(|u| u.unweighted_loss).sum::<f64>() / last.len().max(1) as f64;
        Ok(BetaRun { beta, updates, final_smoothed })
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// `metrics.jsonl`: a header record with the config hash, then one record
/// per request.
pub fn write_metrics_jsonl<P: AsRef<Path>>(path: P, hash: &str, runs: &[RunMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{{\"config_hash\":\"{hash}\"}}")?;
    for run in runs {
        for r in &run.per_request {
            #[derive(Serialize)]
            struct Row<'a> {
                variant: &'a str,
                seed: u64,
                #[serde(flatten)]
                request: &'a RequestMetrics,
            }
            let row = Row { variant: run.variant, seed: run.seed, request: r };
            serde_json::to_writer(&mut f, &row)
                .map_err(|e| Error::InvalidInput(format!("metrics serialization: {e}")))?;
            writeln!(f)?;
        }
    }
    Ok(())
}

/// `summary.csv`: one aggregate row per run.
pub fn write_summary_csv<P: AsRef<Path>>(path: P, hash: &str, runs: &[RunMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={hash}")?;
    writeln!(f, "variant,seed,requests,emitted,rounds,mal,oov_events,updates,peak_dynamic,sim_ms,tokens_per_ms")?;
    for r in runs {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.per_request.len(),
            r.emitted_tokens,
            r.rounds,
            r.overall_mal,
            r.oov_events,
            r.updates,
            r.peak_dynamic_occupancy,
            r.sim_time_ms,
            r.throughput
        )?;
    }
    Ok(())
}

/// `coverage.csv`: one row per arm.
pub fn write_coverage_csv<P: AsRef<Path>>(path: P, hash: &str, rows: &[CoverageRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={hash}")?;
    let ks: Vec<String> = rows
        .first()
        .map(|r| r.recalls.iter().map(|(k, _)| format!("recall@{k}")).collect())
        .unwrap_or_default();
    writeln!(f, "arm,covered_mass,oov_events{}{}", if ks.is_empty() { "" } else { "," }, ks.join(","))?;
    for r in rows {
        let recs: Vec<String> = r.recalls.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(
            f,
            "{},{},{}{}{}",
            r.arm,
            r.covered_mass,
            r.oov_events,
            if recs.is_empty() { "" } else { "," },
            recs.join(",")
        )?;
    }
    Ok(())
}

/// `beta_sweep.csv`: long format, one row per (beta, update).
pub fn write_beta_sweep_csv<P: AsRef<Path>>(path: P, hash: &str, runs: &[BetaRun]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={hash}")?;
    writeln!(f, "beta,update,loss,unweighted_loss,final_smoothed")?;
    for run in runs {
        for (i, u) in run.updates.iter().enumerate() {
            writeln!(f, "{},{},{},{},{}", run.beta, i, u.loss, u.unweighted_loss, run.final_smoothed)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> RunConfig {
        RunConfig {
            vocab_size: 512,
            hidden_dim: 32,
            static_size: 128,
            dyn_size: 96,
            arc_p0: 48,
            hnsw_m: 8,
            hnsw_ef_construction: 60,
            hnsw_ef_search: 32,
            gamma: 3,
            k_logit: 8,
            buffer_size: 8,
            min_residency: 2,
            warmup: 5,
            ..Default::default()
        }
    }

    fn quick_domains() -> Vec<DomainSpec> {
        vec![
            DomainSpec { name: "general".into(), zipf_exponent: 1.05, hot_range: (32, 64), bias_scale: 1.0 },
            DomainSpec { name: "shift".into(), zipf_exponent: 1.05, hot_range: (256, 320), bias_scale: 4.0 },
        ]
    }

    #[test]
    fn zero_bias_corpus_is_plain_zipf() {
        let d = DomainSpec { name: "g".into(), zipf_exponent: 1.1, hot_range: (100, 200), bias_scale: 0.0 };
        let c = gen_corpus(&d, 1024, 30_000, 3).unwrap();
        let in_block = c.iter().filter(|&&t| (100..200).contains(&t)).count() as f64 / c.len() as f64;
        // Zipf(1.1) mass of ranks 101..=200 is around 6-10%; far from boosted.
        assert!(in_block < 0.15, "hot fraction {in_block}");
    }

    #[test]
    fn large_boost_concentrates_mass_in_hot_block() {
        let d = DomainSpec { name: "g".into(), zipf_exponent: 1.1, hot_range: (100, 200), bias_scale: 4.0 };
        let c = gen_corpus(&d, 1024, 100_000, 3).unwrap();
        let in_block = c.iter().filter(|&&t| (100..200).contains(&t)).count() as f64 / c.len() as f64;
        assert!(in_block > 0.5, "hot fraction {in_block}");
    }

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let d = DomainSpec { name: "g".into(), zipf_exponent: 1.2, hot_range: (10, 20), bias_scale: 2.0 };
        let a = gen_corpus(&d, 256, 500, 9).unwrap();
        let b = gen_corpus(&d, 256, 500, 9).unwrap();
        let c = gen_corpus(&d, 256, 500, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scenario_script_roundtrip() {
        let script = topic_switch_script(5, 10);
        let text = script.to_key_values();
        let back = ScenarioScript::from_key_values(&text).unwrap();
        assert_eq!(script, back);
    }

    #[test]
    fn scenario_rejects_unknown_domain() {
        let text = "seed = 1\nsegment.0.domain = nope\nsegment.0.requests = 1\nsegment.0.tokens = 4\n";
        assert!(ScenarioScript::from_key_values(text).is_err());
    }

    #[test]
    fn mal_stays_in_engine_bounds() {
        let cfg = quick_cfg();
        let script = ScenarioScript {
            seed: 3,
            domains: quick_domains(),
            segments: vec![Segment { domain_index: 0, requests: 4, tokens_per_request: 12, prompt_len: 4 }],
        };
        let metrics = run_scenario(&script, &cfg, Variant::Full).unwrap();
        for r in &metrics.per_request {
            assert!(r.mal >= 1.0 && r.mal <= (cfg.gamma + 1) as f64);
        }
        assert!(metrics.peak_dynamic_occupancy <= cfg.dyn_size);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let cfg = quick_cfg();
        let script = ScenarioScript {
            seed: 3,
            domains: quick_domains(),
            segments: vec![Segment { domain_index: 1, requests: 3, tokens_per_request: 10, prompt_len: 4 }],
        };
        let a = run_scenario(&script, &cfg, Variant::Full).unwrap();
        let b = run_scenario(&script, &cfg, Variant::Full).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn matched_domain_full_variant_tracks_full_vocab_run() {
        // Stationary general-domain traffic covered by the static set: once
        // the dynamic buffer warms up, the reduced run's trailing MAL lands
        // within 2% of the unpruned baseline.
        let cfg = quick_cfg();
        let script = ScenarioScript {
            seed: 7,
            domains: quick_domains(),
            segments: vec![Segment { domain_index: 0, requests: 32, tokens_per_request: 30, prompt_len: 6 }],
        };
        let reduced = run_scenario(&script, &cfg, Variant::Full).unwrap();
        let mut unpruned_cfg = cfg.clone();
        unpruned_cfg.static_size = unpruned_cfg.vocab_size as usize;
        let unpruned = run_scenario(&script, &unpruned_cfg, Variant::StaticOnly).unwrap();
        let (a, b) = (reduced.trailing_mal(16, 32), unpruned.trailing_mal(16, 32));
        let rel = (a - b).abs() / b;
        assert!(rel < 0.02, "reduced {a} vs full {b}");
    }

    #[test]
    fn static_only_degrades_across_a_switch() {
        let cfg = quick_cfg();
        let script = ScenarioScript {
            seed: 11,
            domains: quick_domains(),
            segments: vec![
                Segment { domain_index: 0, requests: 5, tokens_per_request: 15, prompt_len: 4 },
                Segment { domain_index: 1, requests: 5, tokens_per_request: 15, prompt_len: 4 },
            ],
        };
        let m = run_scenario(&script, &cfg, Variant::StaticOnly).unwrap();
        let pre = m.trailing_mal(0, 5);
        let post = m.trailing_mal(5, 10);
        assert!(post < pre, "post-switch {post} should fall below pre-switch {pre}");
    }

    #[test]
    fn coverage_walk_orders_arms_on_shifted_stream() {
        let cfg = quick_cfg();
        let domains = quick_domains();
        let world = build_world(&cfg, &domains).unwrap();
        let stream = gen_corpus(&domains[1], cfg.vocab_size, 600, 77).unwrap();
        let ks = [10usize];
        let st = coverage_walk(&world, &cfg, RetrievalArm::Off, &stream, 1, &ks).unwrap();
        let sem = coverage_walk(&world, &cfg, RetrievalArm::Semantic, &stream, 1, &ks).unwrap();
        let full = coverage_walk(&world, &cfg, RetrievalArm::Full, &stream, 1, &ks).unwrap();
        assert!(sem.covered_mass > st.covered_mass);
        assert!(full.covered_mass > st.covered_mass);
    }

    #[test]
    fn beta_sweep_produces_equal_update_counts() {
        let mut cfg = quick_cfg();
        cfg.lr = 0.05;
        let params = SweepParams { entries: 64, noise: 4.0, seed: 5 };
        let runs = beta_sweep(&cfg, &quick_domains(), &[0.0, 0.3], &params).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].updates.len(), runs[1].updates.len());
        assert!(runs[0].updates.len() == 64 / cfg.buffer_size);
        for r in &runs {
            for u in &r.updates {
                assert!(u.loss >= 0.0 && u.unweighted_loss >= 0.0);
            }
        }
    }

    #[test]
    fn output_files_carry_hash_header() {
        let cfg = quick_cfg();
        let script = ScenarioScript {
            seed: 3,
            domains: quick_domains(),
            segments: vec![Segment { domain_index: 0, requests: 2, tokens_per_request: 8, prompt_len: 4 }],
        };
        let m = run_scenario(&script, &cfg, Variant::StaticOnly).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("metrics.jsonl");
        let csv = dir.path().join("summary.csv");
        write_metrics_jsonl(&jsonl, "cafebabe", std::slice::from_ref(&m)).unwrap();
        write_summary_csv(&csv, "cafebabe", std::slice::from_ref(&m)).unwrap();
        let j = std::fs::read_to_string(&jsonl).unwrap();
        assert!(j.starts_with("{\"config_hash\":\"cafebabe\"}"));
        assert_eq!(j.lines().count(), 1 + m.per_request.len());
        let c = std::fs::read_to_string(&csv).unwrap();
        assert!(c.starts_with("# config_hash=cafebabe"));
    }
}
