//! Flat run configuration: defaults, key-value config files, command-line
//! overrides, and the resolved-config hash stamped into every output file.
//!
//! Precedence is flag > file > default, tracked per key. The hash is a
//! SHA-256 over the canonical serialization of every resolved key, so two
//! invocations with the same hash are guaranteed the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::alignment::{CurriculumConfig, DistillConfig};
use crate::cache::ArcConfig;
use crate::engine::{EngineConfig, LatencyMode, LatencyModel};
use crate::models::ModelSpec;
use crate::retrieval::{GraphThresholds, HnswParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gamma: usize,
    pub token_budget: usize,
    pub temperature: f64,
    pub static_size: usize,
    pub dyn_size: usize,
    pub hnsw_m: usize,
    pub hnsw_ef_construction: usize,
    pub hnsw_ef_search: usize,
    pub graph_tau: f64,
    pub graph_min_count: u64,
    pub graph_max_degree: usize,
    pub buffer_size: usize,
    pub lr: f64,
    pub t_kd: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub beta: f64,
    pub arc_p0: usize,
    pub ghost_caps: (usize, usize),
    pub min_residency: u64,
    pub warmup: u64,
    pub k_logit: usize,
    pub eps_align: f64,
    pub eps_cov: f64,
    pub seed: u64,
    pub vocab_size: u32,
    pub hidden_dim: usize,
    pub window: usize,
    pub latency_retrieval_ms: f64,
    pub latency_step_body_ms: f64,
    pub latency_projection_ms: f64,
    pub latency_sampling_ms: f64,
    pub latency_mode: LatencyMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 6,
            token_budget: 60,
            temperature: 0.0,
            static_size: 1024,
            dyn_size: 256,
            hnsw_m: 32,
            hnsw_ef_construction: 200,
            hnsw_ef_search: 64,
            graph_tau: 1e-4,
            graph_min_count: 5,
            graph_max_degree: 64,
            buffer_size: 32,
            lr: 1e-5,
            t_kd: 1.0,
            lora_rank: 32,
            lora_alpha: 32.0,
            beta: 0.3,
            arc_p0: 128,
            ghost_caps: (256, 256),
            min_residency: 8,
            warmup: 50,
            k_logit: 32,
            eps_align: 0.05,
            eps_cov: 0.05,
            seed: 42,
            vocab_size: 4096,
            hidden_dim: 32,
            window: 4,
            latency_retrieval_ms: 2.07,
            latency_step_body_ms: 3.754,
            latency_projection_ms: 0.561,
            latency_sampling_ms: 0.025,
            latency_mode: LatencyMode::Simulated,
        }
    }
}

impl RunConfig {
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {what}: cannot parse value {value:?}"));
        match key {
            "gamma" => self.gamma = value.parse().map_err(|_| bad(key))?,
            "token_budget" => self.token_budget = value.parse().map_err(|_| bad(key))?,
            "temperature" => self.temperature = value.parse().map_err(|_| bad(key))?,
            "static_size" => self.static_size = value.parse().map_err(|_| bad(key))?,
            "dyn_size" => self.dyn_size = value.parse().map_err(|_| bad(key))?,
            "hnsw_m" => self.hnsw_m = value.parse().map_err(|_| bad(key))?,
            "hnsw_ef_construction" => {
                self.hnsw_ef_construction = value.parse().map_err(|_| bad(key))?
            }
            "hnsw_ef_search" => self.hnsw_ef_search = value.parse().map_err(|_| bad(key))?,
            "graph_tau" => self.graph_tau = value.parse().map_err(|_| bad(key))?,
            "graph_min_count" => self.graph_min_count = value.parse().map_err(|_| bad(key))?,
            "graph_max_degree" => self.graph_max_degree = value.parse().map_err(|_| bad(key))?,
            "buffer_size" => self.buffer_size = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "t_kd" => self.t_kd = value.parse().map_err(|_| bad(key))?,
            "lora_rank" => self.lora_rank = value.parse().map_err(|_| bad(key))?,
            "lora_alpha" => self.lora_alpha = value.parse().map_err(|_| bad(key))?,
            "beta" => self.beta = value.parse().map_err(|_| bad(key))?,
            "arc_p0" => self.arc_p0 = value.parse().map_err(|_| bad(key))?,
            "ghost_caps" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("ghost_caps wants \"recent,frequent\", got {value:?}")))?;
                self.ghost_caps = (
                    a.trim().parse().map_err(|_| bad(key))?,
                    b.trim().parse().map_err(|_| bad(key))?,
                );
            }
            "min_residency" => self.min_residency = value.parse().map_err(|_| bad(key))?,
            "warmup" => self.warmup = value.parse().map_err(|_| bad(key))?,
            "k_logit" => self.k_logit = value.parse().map_err(|_| bad(key))?,
            "eps_align" => self.eps_align = value.parse().map_err(|_| bad(key))?,
            "eps_cov" => self.eps_cov = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "vocab_size" => self.vocab_size = value.parse().map_err(|_| bad(key))?,
            "hidden_dim" => self.hidden_dim = value.parse().map_err(|_| bad(key))?,
            "window" => self.window = value.parse().map_err(|_| bad(key))?,
            "latency.retrieval_ms" => {
                self.latency_retrieval_ms = value.parse().map_err(|_| bad(key))?
            }
            "latency.step_body_ms" => {
                self.latency_step_body_ms = value.parse().map_err(|_| bad(key))?
            }
            "latency.projection_ms" => {
                self.latency_projection_ms = value.parse().map_err(|_| bad(key))?
            }
            "latency.sampling_ms" => {
                self.latency_sampling_ms = value.parse().map_err(|_| bad(key))?
            }
            "latency.mode" => {
                self.latency_mode = match value {
                    "simulated" => LatencyMode::Simulated,
                    "sync" => LatencyMode::Sync,
                    "real" => LatencyMode::RealThreads,
                    other => {
                        return Err(Error::Config(format!(
                            "latency.mode must be simulated|sync|real, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("token_budget", self.token_budget),
            ("static_size", self.static_size),
            ("dyn_size", self.dyn_size),
            ("hnsw_m", self.hnsw_m),
            ("buffer_size", self.buffer_size),
            ("lora_rank", self.lora_rank),
            ("k_logit", self.k_logit),
            ("hidden_dim", self.hidden_dim),
            ("window", self.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.static_size > self.vocab_size as usize {
            return Err(Error::Config(format!(
                "static_size {} exceeds vocab_size {}",
                self.static_size, self.vocab_size
            )));
        }
        if self.arc_p0 > self.dyn_size {
            return Err(Error::Config(format!(
                "arc_p0 {} exceeds dyn_size {}",
                self.arc_p0, self.dyn_size
            )));
        }
        if self.lora_alpha <= 0.0 || self.t_kd <= 0.0 {
            return Err(Error::Config("lora_alpha and t_kd must be positive".into()));
        }
        if self.eps_align < 0.0 || !(0.0..=1.0).contains(&self.eps_cov) {
            return Err(Error::Config("eps_align must be >= 0 and eps_cov in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn to_key_values(&self) -> String {
        let mode = match self.latency_mode {
            LatencyMode::Simulated => "simulated",
            LatencyMode::Sync => "sync",
            LatencyMode::RealThreads => "real",
        };
        let mut pairs: Vec<(String, String)> = vec![
            ("gamma".into(), self.gamma.to_string()),
            ("token_budget".into(), self.token_budget.to_string()),
            ("temperature".into(), self.temperature.to_string()),
            ("static_size".into(), self.static_size.to_string()),
            ("dyn_size".into(), self.dyn_size.to_string()),
            ("hnsw_m".into(), self.hnsw_m.to_string()),
            ("hnsw_ef_construction".into(), self.hnsw_ef_construction.to_string()),
            ("hnsw_ef_search".into(), self.hnsw_ef_search.to_string()),
            ("graph_tau".into(), self.graph_tau.to_string()),
            ("graph_min_count".into(), self.graph_min_count.to_string()),
            ("graph_max_degree".into(), self.graph_max_degree.to_string()),
            ("buffer_size".into(), self.buffer_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("t_kd".into(), self.t_kd.to_string()),
            ("lora_rank".into(), self.lora_rank.to_string()),
            ("lora_alpha".into(), self.lora_alpha.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("arc_p0".into(), self.arc_p0.to_string()),
            ("ghost_caps".into(), format!("{},{}", self.ghost_caps.0, self.ghost_caps.1)),
            ("min_residency".into(), self.min_residency.to_string()),
            ("warmup".into(), self.warmup.to_string()),
            ("k_logit".into(), self.k_logit.to_string()),
            ("eps_align".into(), self.eps_align.to_string()),
            ("eps_cov".into(), self.eps_cov.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("window".into(), self.window.to_string()),
            ("latency.retrieval_ms".into(), self.latency_retrieval_ms.to_string()),
            ("latency.step_body_ms".into(), self.latency_step_body_ms.to_string()),
            ("latency.projection_ms".into(), self.latency_projection_ms.to_string()),
            ("latency.sampling_ms".into(), self.latency_sampling_ms.to_string()),
            ("latency.mode".into(), mode.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    // Conversions into per-module configurations.

    pub fn model_spec(&self, domains: Vec<crate::models::DomainSpec>) -> ModelSpec {
        ModelSpec {
            seed: self.seed,
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            window: self.window,
            domains,
        }
    }

    pub fn arc_config(&self) -> ArcConfig {
        ArcConfig {
            capacity: self.dyn_size,
            initial_target: self.arc_p0,
            ghost_cap_recent: self.ghost_caps.0,
            ghost_cap_frequent: self.ghost_caps.1,
            min_residency: self.min_residency,
            warmup_events: self.warmup,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            gamma: self.gamma,
            token_budget: self.token_budget,
            temperature: self.temperature,
            seed: self.seed,
            k_logit: self.k_logit,
            latency: LatencyModel {
                retrieval_ms: self.latency_retrieval_ms,
                step_body_ms: self.latency_step_body_ms,
                projection_ms: self.latency_projection_ms,
                sampling_ms: self.latency_sampling_ms,
            },
            mode: self.latency_mode,
            coverage_temperature: None,
            coverage_ks: vec![10, 50, 256],
            eps_cov: self.eps_cov,
        }
    }

    pub fn hnsw_params(&self) -> HnswParams {
        HnswParams {
            m: self.hnsw_m,
            ef_construction: self.hnsw_ef_construction,
            ef_search: self.hnsw_ef_search,
            seed: self.seed ^ 0x9E37_79B9,
        }
    }

    pub fn graph_thresholds(&self) -> GraphThresholds {
        GraphThresholds {
            min_count: self.graph_min_count,
            tau: self.graph_tau,
            max_out_degree: self.graph_max_degree,
        }
    }

    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig { beta: self.beta, gamma: self.gamma }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig { t_kd: self.t_kd, k_logit: self.k_logit, learning_rate: self.lr }
    }
}

/// Where each key's resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Default => write!(f, "default"),
            Provenance::File => write!(f, "file"),
            Provenance::Flag => write!(f, "flag"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Provenance>,
    pub hash: String,
}

impl ResolvedConfig {
    /// Applies file keys over defaults, then flag overrides, validates, and
    /// hashes the result.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut provenance = BTreeMap::new();
        if let Some(text) = file_text {
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line {}: expected key = value", lineno + 1))
                })?;
                let key = k.trim();
                config.set_key(key, v.trim())?;
                provenance.insert(key.to_string(), Provenance::File);
            }
        }
        for (k, v) in overrides {
            config.set_key(k, v)?;
            provenance.insert(k.clone(), Provenance::Flag);
        }
        config.validate()?;
        let hash = config_hash(&config);
        Ok(Self { config, provenance, hash })
    }

    pub fn provenance_of(&self, key: &str) -> Provenance {
        self.provenance.get(key).copied().unwrap_or(Provenance::Default)
    }

    /// The banner printed before every run: each key, value, provenance.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# resolved config (hash {})", self.hash);
        for line in self.config.to_key_values().lines() {
            let key = line.split(" = ").next().unwrap_or("");
            let _ = writeln!(out, "{line}  [{}]", self.provenance_of(key));
        }
        out
    }
}

pub fn config_hash(config: &RunConfig) -> String {
    let digest = Sha256::digest(config.to_key_values().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
