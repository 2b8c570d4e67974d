//! Toy target and draft language models.
//!
//! Both models are linear-softmax: a deterministic featurizer (mean of the
//! last `window` token embeddings) produces a hidden vector that is projected
//! onto the vocabulary through an output-embedding matrix. The draft model
//! carries a trainable low-rank adapter on top of its frozen featurizer; the
//! target model optionally carries per-domain logit offsets used to
//! synthesize distribution shift with controllable severity.
//!
//! Model construction is a pure function of `(seed, vocab_size, hidden_dim,
//! window, domains)`, so every experiment is reproducible from its config.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::vocab::ActiveVocab;
use crate::{Error, Result, TokenId};

/// Dense integer token space of size `|V|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size must be >= 2, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "token {token} out of range for vocabulary of size {}",
                self.size
            )))
        }
    }
}

/// `|V| x d` matrix of output embeddings (one row per token), row-major f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Build("embedding matrix needs at least one row".into()));
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Build(format!(
                    "row {i} has dimension {}, expected {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Build(format!("row {i} contains non-finite entries")));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), dim, data })
    }

    pub fn from_flat(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::Build(format!(
                "flat embedding data of length {} does not match {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Build("embedding matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dot_row(&self, i: usize, h: &[f64]) -> f64 {
        self.row(i).iter().zip(h).map(|(a, b)| a * b).sum()
    }

    /// `W . h` — one logit per token.
    pub fn matvec(&self, h: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.dot_row(i, h)).collect()
    }
}

const EMBED_MAGIC: &[u8; 4] = b"SVEM";
const EMBED_VERSION: u32 = 1;

/// Writes the matrix in the portable format: 16-byte header (magic `SVEM`,
/// version, rows, cols as little-endian u32) followed by row-major f32
/// little-endian values.
pub fn save_embeddings<P: AsRef<Path>>(m: &EmbeddingMatrix, path: P) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.rows * m.dim * 4);
    out.extend_from_slice(EMBED_MAGIC);
    out.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_embeddings<P: AsRef<Path>>(path: P) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != EMBED_MAGIC {
        return Err(Error::InvalidInput("not an SVEM embedding file".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != EMBED_VERSION {
        return Err(Error::InvalidInput(format!("unsupported SVEM version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = 16 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::InvalidInput(format!(
            "SVEM payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let o = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
    }
    EmbeddingMatrix::from_flat(rows, cols, data)
}

/// Deterministic context featurizer: mean of the last `window` token
/// embeddings, or `bos` for an empty context.
#[derive(Debug, Clone)]
pub struct Featurizer {
    table: Arc<EmbeddingMatrix>,
    window: usize,
    bos: Vec<f64>,
}

impl Featurizer {
    pub fn new(table: Arc<EmbeddingMatrix>, window: usize, bos: Vec<f64>) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidInput("featurizer window must be positive".into()));
        }
        if bos.len() != table.dim() {
            return Err(Error::InvalidInput(format!(
                "bos vector has dimension {}, table has {}",
                bos.len(),
                table.dim()
            )));
        }
        Ok(Self { table, window, bos })
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn featurize(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Ok(self.bos.clone());
        }
        let take = self.window.min(context.len());
        let mut h = vec![0.0; self.table.dim()];
        for &t in &context[context.len() - take..] {
            if t as usize >= self.table.rows() {
                return Err(Error::InvalidInput(format!(
                    "context token {t} out of range ({} rows)",
                    self.table.rows()
                )));
            }
            for (acc, v) in h.iter_mut().zip(self.table.row(t as usize)) {
                *acc += v;
            }
        }
        let inv = 1.0 / take as f64;
        for v in &mut h {
            *v *= inv;
        }
        Ok(h)
    }
}

/// Trainable rank-`r` additive correction `(alpha / r) * A * B^T` applied to
/// the featurizer output. `B` starts at zero so the initial correction is
/// exactly the zero map.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    dim: usize,
    rank: usize,
    alpha: f64,
    /// d x r, row-major.
    a: Vec<f64>,
    /// d x r, row-major.
    b: Vec<f64>,
}

impl LowRankAdapter {
    pub fn new(dim: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidInput("adapter rank must be positive".into()));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidInput("adapter alpha must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = (0..dim * rank)
            .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self { dim, rank, alpha, a, b: vec![0.0; dim * rank] })
    }

    pub fn zeroed(dim: usize, rank: usize, alpha: f64) -> Result<Self> {
        let mut adapter = Self::new(dim, rank, alpha, 0)?;
        adapter.a.iter_mut().for_each(|v| *v = 0.0);
        Ok(adapter)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `B^T h` — the rank-space projection of `h`.
    pub fn project(&self, h: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.rank];
        for (i, hv) in h.iter().enumerate() {
            let row = &self.b[i * self.rank..(i + 1) * self.rank];
            for (uq, bq) in u.iter_mut().zip(row) {
                *uq += bq * hv;
            }
        }
        u
    }

    /// `h + (alpha / r) * A * (B^T h)`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let u = self.project(h);
        let s = self.scaling();
        let mut out = h.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.a[i * self.rank..(i + 1) * self.rank];
            let mut acc = 0.0;
            for (aq, uq) in row.iter().zip(&u) {
                acc += aq * uq;
            }
            *o += s * acc;
        }
        out
    }

    /// Gradient-descent step on `A` and `B` only. Gradients must be finite
    /// and shape-matched; callers enforce the skip-on-nonfinite policy.
    pub fn step(&mut self, grad_a: &[f64], grad_b: &[f64], lr: f64) -> Result<()> {
        if grad_a.len() != self.a.len() || grad_b.len() != self.b.len() {
            return Err(Error::InvalidInput(format!(
                "gradient shapes {}/{} do not match adapter {}x{}",
                grad_a.len(),
                grad_b.len(),
                self.dim,
                self.rank
            )));
        }
        for (p, g) in self.a.iter_mut().zip(grad_a) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(grad_b) {
            *p -= lr * g;
        }
        Ok(())
    }
}

/// One synthetic domain: a Zipf base distribution plus a contiguous block of
/// "hot" tokens the domain favors, with `bias_scale` controlling both the
/// corpus-side boost and the target model's logit offset on that block.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DomainSpec {
    pub name: String,
    pub zipf_exponent: f64,
    /// Half-open id range `[start, end)`; empty range means no hot block.
    pub hot_range: (u32, u32),
    pub bias_scale: f64,
}

impl DomainSpec {
    pub fn hot_len(&self) -> u32 {
        self.hot_range.1.saturating_sub(self.hot_range.0)
    }

    pub fn is_hot(&self, token: TokenId) -> bool {
        token >= self.hot_range.0 && token < self.hot_range.1
    }
}

/// Pure description of a model pair; building from it is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub seed: u64,
    pub vocab_size: u32,
    pub hidden_dim: usize,
    pub window: usize,
    pub domains: Vec<DomainSpec>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { seed: 17, vocab_size: 4096, hidden_dim: 32, window: 4, domains: Vec::new() }
    }
}

/// Hot blocks are split into this many sub-blocks, each sharing an embedding
/// direction, so semantic retrieval sees within-topic structure.
const HOT_SUBBLOCKS: u32 = 8;
/// Mixing weight of the shared sub-block direction in hot-token embeddings
/// (norm-preserving: `sqrt(1-rho^2)` noise + `rho` direction).
const HOT_DIR_MIX: f64 = 0.55;

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        if self.hidden_dim == 0 {
            return Err(Error::InvalidInput("hidden_dim must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidInput("window must be positive".into()));
        }
        for d in &self.domains {
            if d.hot_range.1 < d.hot_range.0 || d.hot_range.1 > self.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "domain {:?} hot range {:?} out of bounds",
                    d.name, d.hot_range
                )));
            }
            if d.zipf_exponent <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "domain {:?} zipf exponent must be positive",
                    d.name
                )));
            }
            if d.bias_scale < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "domain {:?} bias scale must be nonnegative",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "window = {}", self.window);
        for (i, d) in self.domains.iter().enumerate() {
            let _ = writeln!(s, "domain.{i}.name = {}", d.name);
            let _ = writeln!(s, "domain.{i}.zipf = {}", d.zipf_exponent);
            let _ = writeln!(s, "domain.{i}.hot = {}..{}", d.hot_range.0, d.hot_range.1);
            let _ = writeln!(s, "domain.{i}.bias = {}", d.bias_scale);
        }
        s
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::default();
        let mut domains: std::collections::BTreeMap<usize, DomainSpec> = Default::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("model spec line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::InvalidInput(format!("model spec line {}: bad {what}: {value}", lineno + 1))
            };
            match key {
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                "vocab_size" => spec.vocab_size = value.parse().map_err(|_| bad("vocab_size"))?,
                "hidden_dim" => spec.hidden_dim = value.parse().map_err(|_| bad("hidden_dim"))?,
                "window" => spec.window = value.parse().map_err(|_| bad("window"))?,
                _ => {
                    let rest = key.strip_prefix("domain.").ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "model spec line {}: unknown key {key}",
                            lineno + 1
                        ))
                    })?;
                    let (idx, field) = rest.split_once('.').ok_or_else(|| bad("domain key"))?;
                    let idx: usize = idx.parse().map_err(|_| bad("domain index"))?;
                    let d = domains.entry(idx).or_insert_with(|| DomainSpec {
                        name: String::new(),
                        zipf_exponent: 1.1,
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
                        other => {
                            return Err(Error::InvalidInput(format!(
                                "model spec line {}: unknown domain field {other}",
                                lineno + 1
                            )))
                        }
                    }
                }
            }
        }
        spec.domains = domains.into_values().collect();
        spec.validate()?;
        Ok(spec)
    }
}

/// The verifier. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TargetModel {
    vocab: Vocabulary,
    featurizer: Featurizer,
    lm_head: Arc<EmbeddingMatrix>,
    /// One dense logit-offset vector per domain.
    domain_bias: Vec<Vec<f64>>,
}

impl TargetModel {
    pub fn new(
        featurizer: Featurizer,
        lm_head: Arc<EmbeddingMatrix>,
        domain_bias: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let vocab = Vocabulary::new(lm_head.rows() as u32)?;
        for (i, b) in domain_bias.iter().enumerate() {
            if b.len() != lm_head.rows() {
                return Err(Error::Build(format!(
                    "domain bias {i} has length {}, expected {}",
                    b.len(),
                    lm_head.rows()
                )));
            }
        }
        Ok(Self { vocab, featurizer, lm_head, domain_bias })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.featurizer.dim()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_bias.len()
    }

    pub fn lm_head(&self) -> &Arc<EmbeddingMatrix> {
        &self.lm_head
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn featurize(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.featurizer.featurize(context)
    }

    /// Raw logits `h . W^T` plus the active domain's offset. Temperature is
    /// applied at softmax/sampling time, never here.
    pub fn full_logits(&self, h: &[f64], domain: Option<usize>) -> Result<Vec<f64>> {
        if h.len() != self.lm_head.dim() {
            return Err(Error::InvalidInput(format!(
                "hidden vector has dimension {}, head expects {}",
                h.len(),
                self.lm_head.dim()
            )));
        }
        let mut logits = self.lm_head.matvec(h);
        if let Some(d) = domain {
            let bias = self.domain_bias.get(d).ok_or_else(|| {
                Error::InvalidInput(format!("domain {d} out of range ({} domains)", self.domain_bias.len()))
            })?;
            for (l, b) in logits.iter_mut().zip(bias) {
                *l += b;
            }
        }
        Ok(logits)
    }

    /// Full-vocabulary distribution at the given temperature.
    pub fn distribution(&self, h: &[f64], temperature: f64, domain: Option<usize>) -> Result<Vec<f64>> {
        let logits = self.full_logits(h, domain)?;
        Ok(softmax(&logits, temperature))
    }

    /// Ids and raw (untempered) values of the `k` largest logits, descending,
    /// ties broken toward the smaller token id.
    pub fn topk_logits(
        &self,
        h: &[f64],
        k: usize,
        domain: Option<usize>,
    ) -> Result<(Vec<TokenId>, Vec<f64>)> {
        if k > self.vocab.size() as usize {
            return Err(Error::InvalidInput(format!(
                "k = {k} exceeds vocabulary size {}",
                self.vocab.size()
            )));
        }
        let logits = self.full_logits(h, domain)?;
        Ok(top_k(&logits, k))
    }
}

/// The proposer: frozen featurizer plus trainable low-rank adapter; the head
/// is frozen and may share storage with the target's.
#[derive(Debug, Clone)]
pub struct DraftModel {
    vocab: Vocabulary,
    featurizer: Featurizer,
    adapter: LowRankAdapter,
    lm_head: Arc<EmbeddingMatrix>,
}

impl DraftModel {
    pub fn new(
        featurizer: Featurizer,
        adapter: LowRankAdapter,
        lm_head: Arc<EmbeddingMatrix>,
    ) -> Result<Self> {
        if adapter.dim() != featurizer.dim() {
            return Err(Error::Build(format!(
                "adapter dimension {} does not match featurizer {}",
                adapter.dim(),
                featurizer.dim()
            )));
        }
        let vocab = Vocabulary::new(lm_head.rows() as u32)?;
        Ok(Self { vocab, featurizer, adapter, lm_head })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.featurizer.dim()
    }

    pub fn adapter(&self) -> &LowRankAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LowRankAdapter {
        &mut self.adapter
    }

    pub fn lm_head(&self) -> &Arc<EmbeddingMatrix> {
        &self.lm_head
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    /// Frozen featurizer output with no adapter correction.
    pub fn featurize_base(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.featurizer.featurize(context)
    }

    /// Featurizer output plus the adapter's low-rank correction.
    pub fn featurize(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.adapter.apply(&self.featurizer.featurize(context)?))
    }

    pub fn full_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.lm_head.dim() {
            return Err(Error::InvalidInput(format!(
                "hidden vector has dimension {}, head expects {}",
                h.len(),
                self.lm_head.dim()
            )));
        }
        Ok(self.lm_head.matvec(h))
    }

    /// Logit for a single token; used by alignment on retained supports.
    pub fn logit_of(&self, h: &[f64], token: TokenId) -> f64 {
        self.lm_head.dot_row(token as usize, h)
    }

    /// Softmax over the support tokens only; everything outside the support
    /// has probability exactly zero. Temperature zero is a point mass on the
    /// argmax, ties broken toward the smaller token id.
    pub fn restricted_distribution(
        &self,
        h: &[f64],
        support: &ActiveVocab,
        temperature: f64,
    ) -> Result<SparseDistribution> {
        if support.is_empty() {
            return Err(Error::InvalidInput("restricted distribution needs a nonempty support".into()));
        }
        let tokens: Vec<TokenId> = support.members().to_vec();
        let logits: Vec<f64> = tokens.iter().map(|&t| self.lm_head.dot_row(t as usize, h)).collect();
        let probs = softmax(&logits, temperature);
        Ok(SparseDistribution { tokens, probs })
    }
}

/// Probability vector on an explicit token support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDistribution {
    pub tokens: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl SparseDistribution {
    pub fn prob_of(&self, token: TokenId) -> f64 {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    /// Argmax token, ties broken toward the smaller id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best]
                || (self.probs[i] == self.probs[best] && self.tokens[i] < self.tokens[best])
            {
                best = i;
            }
        }
        self.tokens[best]
    }

    /// Scatter onto a dense `|V|`-length vector (zeros outside the support).
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut dense = vec![0.0; vocab_size];
        for (t, p) in self.tokens.iter().zip(&self.probs) {
            dense[*t as usize] = *p;
        }
        dense
    }
}

/// Numerically stable softmax at the given temperature. Temperature zero is
/// a point mass on the argmax (smallest index on ties).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    if logits.is_empty() {
        return Vec::new();
    }
    if temperature == 0.0 {
        let arg = argmax(logits);
        let mut p = vec![0.0; logits.len()];
        p[arg] = 1.0;
        return p;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    exps
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Ids and values of the `k` largest entries, descending, ties toward the
/// smaller id.
pub fn top_k(values: &[f64], k: usize) -> (Vec<TokenId>, Vec<f64>) {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        values[*b as usize]
            .partial_cmp(&values[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    let vals = idx.iter().map(|&i| values[i as usize]).collect();
    (idx, vals)
}

/// Deterministically builds a (target, draft) pair from the spec. The two
/// models share the embedding table and output head; the target additionally
/// carries the domain logit offsets, the draft the low-rank adapter.
pub fn build_models(spec: &ModelSpec, lora_rank: usize, lora_alpha: f64) -> Result<(TargetModel, DraftModel)> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let v = spec.vocab_size as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha12Rng| -> f64 { StandardNormal.sample(rng) };

    let mut rows: Vec<Vec<f64>> = (0..v)
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();

    // Give each domain's hot sub-blocks a shared direction so context vectors
    // from a domain point toward that domain's tokens.
    for dom in &spec.domains {
        let (start, end) = dom.hot_range;
        let len = end.saturating_sub(start);
        if len == 0 {
            continue;
        }
        let sub = (len / HOT_SUBBLOCKS).max(1);
        let nsub = len.div_ceil(sub);
        for s in 0..nsub {
            let mut dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut dir {
                *x /= norm;
            }
            let lo = start + s * sub;
            let hi = (lo + sub).min(end);
            let noise = (1.0 - HOT_DIR_MIX * HOT_DIR_MIX).sqrt();
            let dir_scale = HOT_DIR_MIX * (d as f64).sqrt();
            for t in lo..hi {
                let row = &mut rows[t as usize];
                for (x, u) in row.iter_mut().zip(&dir) {
                    *x = noise * *x + dir_scale * u;
                }
            }
        }
    }

    let bos: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let table = Arc::new(EmbeddingMatrix::from_rows(rows)?);

    let domain_bias: Vec<Vec<f64>> = spec
        .domains
        .iter()
        .map(|dom| {
            let mut bias = vec![0.0; v];
            for t in dom.hot_range.0..dom.hot_range.1 {
                bias[t as usize] = dom.bias_scale;
            }
            bias
        })
        .collect();

    let featurizer = Featurizer::new(Arc::clone(&table), spec.window, bos)?;
    let target = TargetModel::new(featurizer.clone(), Arc::clone(&table), domain_bias)?;
    let adapter = LowRankAdapter::new(d, lora_rank, lora_alpha, spec.seed ^ 0xA11C_E5ED)?;
    let draft = DraftModel::new(featurizer, adapter, table)?;
    Ok((target, draft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::ActiveVocab;
    use rand::Rng;

    fn tiny_table(rows: Vec<Vec<f64>>) -> Arc<EmbeddingMatrix> {
        Arc::new(EmbeddingMatrix::from_rows(rows).unwrap())
    }

    fn draft_with_table(table: Arc<EmbeddingMatrix>, window: usize) -> DraftModel {
        let d = table.dim();
        let bos = vec![0.25; d];
        let featurizer = Featurizer::new(Arc::clone(&table), window, bos).unwrap();
        let adapter = LowRankAdapter::zeroed(d, 2, 2.0).unwrap();
        DraftModel::new(featurizer, adapter, table).unwrap()
    }

    #[test]
    fn vocabulary_rejects_degenerate_sizes() {
        assert!(Vocabulary::new(0).is_err());
        assert!(Vocabulary::new(1).is_err());
        assert!(Vocabulary::new(2).is_ok());
    }

    #[test]
    fn featurize_empty_context_is_bos() {
        let table = tiny_table(vec![vec![1.0, 0.0]; 8]);
        let bos = vec![3.5, -1.0];
        let f = Featurizer::new(table, 2, bos.clone()).unwrap();
        assert_eq!(f.featurize(&[]).unwrap(), bos);
    }

    #[test]
    fn featurize_means_last_window_rows() {
        let mut rows = vec![vec![0.0, 0.0]; 8];
        rows[5] = vec![1.0, 0.0];
        rows[7] = vec![0.0, 1.0];
        let f = Featurizer::new(tiny_table(rows), 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(f.featurize(&[5, 7]).unwrap(), vec![0.5, 0.5]);
        // Longer context: only the last two rows count.
        assert_eq!(f.featurize(&[1, 2, 5, 7]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn featurize_rejects_out_of_range_tokens() {
        let f = Featurizer::new(tiny_table(vec![vec![0.0]; 4]), 2, vec![0.0]).unwrap();
        assert!(matches!(f.featurize(&[9]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_adapter_draft_matches_base_featurizer() {
        let table = tiny_table(vec![vec![0.5, 2.0], vec![1.5, -1.0], vec![0.0, 1.0]]);
        let draft = draft_with_table(table, 2);
        let ctx = [0, 2, 1];
        assert_eq!(draft.featurize(&ctx).unwrap(), draft.featurize_base(&ctx).unwrap());
    }

    #[test]
    fn adapter_initializes_to_zero_map_and_rank() {
        let adapter = LowRankAdapter::new(6, 3, 1.5, 99).unwrap();
        assert!(adapter.a().iter().any(|v| *v != 0.0), "A should start random");
        assert!(adapter.b().iter().all(|v| *v == 0.0), "B should start zero");
        let h = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        assert_eq!(adapter.apply(&h), h);
    }

    #[test]
    fn full_logits_zero_hidden_gives_zero_logits() {
        let table = tiny_table(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let target = TargetModel::new(
            Featurizer::new(Arc::clone(&table), 1, vec![0.0, 0.0]).unwrap(),
            table,
            vec![],
        )
        .unwrap();
        assert_eq!(target.full_logits(&[0.0, 0.0], None).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_logits_hand_matvec() {
        let table = tiny_table(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let target = TargetModel::new(
            Featurizer::new(Arc::clone(&table), 1, vec![0.0, 0.0]).unwrap(),
            table,
            vec![],
        )
        .unwrap();
        assert_eq!(target.full_logits(&[2.0, 3.0], None).unwrap(), vec![2.0, 3.0, 5.0]);
        assert!(target.full_logits(&[1.0], None).is_err());
    }

    #[test]
    fn softmax_normalizes_random_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..17).map(|_| rng.random_range(-8.0..8.0)).collect();
            let p = softmax(&logits, 1.0);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_logits_is_linear_in_h() {
        let spec = ModelSpec { vocab_size: 32, hidden_dim: 4, ..Default::default() };
        let (target, _) = build_models(&spec, 2, 2.0).unwrap();
        let h1 = vec![0.3, -1.0, 2.0, 0.7];
        let h2 = vec![1.1, 0.4, -0.2, 0.9];
        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
        let lc = target.full_logits(&combo, None).unwrap();
        let l1 = target.full_logits(&h1, None).unwrap();
        let l2 = target.full_logits(&h2, None).unwrap();
        for i in 0..lc.len() {
            assert!((lc[i] - (a * l1[i] + b * l2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn restricted_singleton_support_is_point_mass() {
        let table = tiny_table(vec![vec![1.0, 0.0]; 8]);
        let draft = draft_with_table(table, 1);
        let support = ActiveVocab::from_sets(8, &[3], &[], 4).unwrap();
        let dist = draft.restricted_distribution(&[0.2, 0.4], &support, 1.0).unwrap();
        assert_eq!(dist.tokens, vec![3]);
        assert_eq!(dist.probs, vec![1.0]);
    }

    #[test]
    fn restricted_symmetric_logits_split_evenly() {
        // Rows 2 and 5 identical => identical logits for any h.
        let mut rows = vec![vec![9.0, 9.0]; 8];
        rows[2] = vec![1.0, 1.0];
        rows[5] = vec![1.0, 1.0];
        let draft = draft_with_table(tiny_table(rows), 1);
        let support = ActiveVocab::from_sets(8, &[2, 5], &[], 4).unwrap();
        let dist = draft.restricted_distribution(&[1.0, 0.0], &support, 1.0).unwrap();
        assert!((dist.prob_of(2) - 0.5).abs() < 1e-12);
        assert!((dist.prob_of(5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn restricted_two_logit_softmax_matches_oracle() {
        // Logits (2, 0) on support {0, 1}.
        let rows = vec![vec![2.0], vec![0.0], vec![7.0]];
        let draft = draft_with_table(tiny_table(rows), 1);
        let support = ActiveVocab::from_sets(3, &[0, 1], &[], 2).unwrap();
        let dist = draft.restricted_distribution(&[1.0], &support, 1.0).unwrap();
        assert!((dist.prob_of(0) - 0.8808).abs() < 1e-3);
        assert!((dist.prob_of(1) - 0.1192).abs() < 1e-3);
        assert_eq!(dist.prob_of(2), 0.0);
    }

    #[test]
    fn restricted_temperature_zero_argmax_with_tie_break() {
        let rows = vec![vec![3.0], vec![3.0], vec![0.0], vec![3.0]];
        let draft = draft_with_table(tiny_table(rows), 1);
        let support = ActiveVocab::from_sets(4, &[1, 2, 3], &[], 3).unwrap();
        let dist = draft.restricted_distribution(&[1.0], &support, 0.0).unwrap();
        // Tokens 1 and 3 tie; smallest id wins.
        assert_eq!(dist.argmax(), 1);
        assert_eq!(dist.prob_of(1), 1.0);
        assert_eq!(dist.prob_of(3), 0.0);
    }

    #[test]
    fn restricted_empty_support_is_input_error() {
        let draft = draft_with_table(tiny_table(vec![vec![1.0]; 4]), 1);
        let support = ActiveVocab::from_sets(4, &[], &[], 2).unwrap();
        assert!(draft.restricted_distribution(&[1.0], &support, 1.0).is_err());
    }

    #[test]
    fn restricted_matches_renormalized_full_softmax() {
        // Brute-force cross-check on random models, |V| <= 64.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..30 {
            let v = 4 + (trial % 61) as u32;
            let spec = ModelSpec { seed: trial, vocab_size: v.max(4), hidden_dim: 6, ..Default::default() };
            let (_, draft) = build_models(&spec, 2, 2.0).unwrap();
            let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let size = spec.vocab_size;
            let members: Vec<TokenId> =
                (0..size).filter(|_| rng.random_bool(0.4)).collect();
            if members.is_empty() {
                continue;
            }
            let support = ActiveVocab::from_sets(size, &members, &[], size as usize).unwrap();
            let dist = draft.restricted_distribution(&h, &support, 1.0).unwrap();
            let full = softmax(&draft.full_logits(&h).unwrap(), 1.0);
            let mass: f64 = members.iter().map(|&t| full[t as usize]).sum();
            for &t in &members {
                let expect = full[t as usize] / mass;
                assert!((dist.prob_of(t) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn restricted_argmax_invariant_to_constant_logit_shift() {
        // Adding a constant to every logit is adding c * (1,...,1) row-wise;
        // emulate by shifting h along a direction all rows share.
        let rows = vec![vec![1.0, 0.4], vec![1.0, -0.3], vec![1.0, 0.9], vec![1.0, 0.1]];
        let draft = draft_with_table(tiny_table(rows), 1);
        let support = ActiveVocab::from_sets(4, &[0, 1, 2, 3], &[], 4).unwrap();
        let a = draft.restricted_distribution(&[0.0, 1.0], &support, 0.0).unwrap();
        // h += (c, 0) shifts every logit by c since column 0 is all ones.
        let b = draft.restricted_distribution(&[5.0, 1.0], &support, 0.0).unwrap();
        assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn topk_full_retention_is_permutation() {
        let spec = ModelSpec { vocab_size: 16, hidden_dim: 4, ..Default::default() };
        let (target, _) = build_models(&spec, 2, 2.0).unwrap();
        let h = target.featurize(&[3, 9]).unwrap();
        let (ids, _) = target.topk_logits(&h, 16, None).unwrap();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn topk_orders_and_tie_breaks() {
        let (ids, vals) = top_k(&[2.0, 3.0, 5.0], 2);
        assert_eq!(ids, vec![2, 1]);
        assert_eq!(vals, vec![5.0, 3.0]);
        let (ids, _) = top_k(&[5.0, 5.0, 0.0], 1);
        assert_eq!(ids, vec![0]);
    }

    #[test]
    fn draft_and_target_agree_with_zero_adapter_and_no_bias() {
        let spec = ModelSpec { vocab_size: 64, hidden_dim: 8, ..Default::default() };
        let (target, built) = build_models(&spec, 4, 4.0).unwrap();
        let draft = DraftModel::new(
            built.featurizer().clone(),
            LowRankAdapter::zeroed(8, 4, 4.0).unwrap(),
            Arc::clone(built.lm_head()),
        )
        .unwrap();
        let ctx = [5, 40, 7];
        let ht = target.featurize(&ctx).unwrap();
        let hd = draft.featurize(&ctx).unwrap();
        assert_eq!(ht, hd);
        assert_eq!(target.full_logits(&ht, None).unwrap(), draft.full_logits(&hd).unwrap());
    }

    #[test]
    fn embedding_file_roundtrip() {
        let rows = vec![vec![1.5, -2.25, 0.5], vec![0.0, 3.75, -1.0]];
        let m = EmbeddingMatrix::from_rows(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.svem");
        save_embeddings(&m, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        // Values chosen exactly representable in f32.
        assert_eq!(m, back);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"SVEM");
        assert_eq!(bytes.len(), 16 + 2 * 3 * 4);
    }

    #[test]
    fn embedding_matrix_rejects_non_finite() {
        assert!(EmbeddingMatrix::from_rows(vec![vec![f64::NAN]]).is_err());
        assert!(EmbeddingMatrix::from_rows(vec![vec![1.0], vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn model_spec_key_value_roundtrip() {
        let spec = ModelSpec {
            seed: 7,
            vocab_size: 128,
            hidden_dim: 16,
            window: 3,
            domains: vec![
                DomainSpec { name: "base".into(), zipf_exponent: 1.1, hot_range: (8, 16), bias_scale: 0.0 },
                DomainSpec { name: "shift".into(), zipf_exponent: 1.2, hot_range: (64, 96), bias_scale: 4.0 },
            ],
        };
        let text = spec.to_key_values();
        let back = ModelSpec::from_key_values(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec { vocab_size: 64, hidden_dim: 8, ..Default::default() };
        let (t1, _) = build_models(&spec, 2, 2.0).unwrap();
        let (t2, _) = build_models(&spec, 2, 2.0).unwrap();
        assert_eq!(t1.lm_head().row(13), t2.lm_head().row(13));
    }
}
