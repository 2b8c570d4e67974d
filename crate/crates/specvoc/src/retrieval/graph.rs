//! Pruned token co-occurrence graph built from bigram statistics.
//!
//! Edge `u -> v` means `v` immediately followed `u` in the build corpus; the
//! weight is the empirical conditional probability `p(v|u)` over *all*
//! observed successors of `u`. Offline filtering applies, in order: minimum
//! raw bigram count, probability threshold `tau`, and a per-source out-degree
//! cap keeping the highest-probability successors (ties toward the smaller
//! id). Successor lists are stored sorted by descending probability.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphThresholds {
    pub min_count: u64,
    pub tau: f64,
    pub max_out_degree: usize,
}

impl Default for GraphThresholds {
    fn default() -> Self {
        Self { min_count: 5, tau: 1e-4, max_out_degree: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub dst: TokenId,
    pub prob: f64,
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct CooccurrenceGraph {
    vocab_size: u32,
    /// Successor lists indexed by source token, descending probability.
    successors: Vec<Vec<Edge>>,
    thresholds: GraphThresholds,
}

/// Counts adjacent pairs, converts to conditional probabilities, and filters.
pub fn build_graph(
    corpus: &[TokenId],
    thresholds: GraphThresholds,
    vocab_size: u32,
) -> Result<CooccurrenceGraph> {
    if corpus.len() < 2 {
        return Err(Error::Build(format!(
            "co-occurrence graph needs a corpus of at least 2 tokens, got {}",
            corpus.len()
        )));
    }
    for &t in corpus {
        if t >= vocab_size {
            return Err(Error::Build(format!("corpus token {t} out of range ({vocab_size})")));
        }
    }
    let mut bigrams: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut totals: HashMap<TokenId, u64> = HashMap::new();
    for w in corpus.windows(2) {
        *bigrams.entry((w[0], w[1])).or_insert(0) += 1;
        *totals.entry(w[0]).or_insert(0) += 1;
    }
    let mut successors: Vec<Vec<Edge>> = vec![Vec::new(); vocab_size as usize];
    for ((u, v), count) in bigrams {
        let prob = count as f64 / totals[&u] as f64;
        if count >= thresholds.min_count && prob >= thresholds.tau {
            successors[u as usize].push(Edge { dst: v, prob, count });
        }
    }
    for list in &mut successors {
        list.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap().then(a.dst.cmp(&b.dst)));
        list.truncate(thresholds.max_out_degree);
    }
    Ok(CooccurrenceGraph { vocab_size, successors, thresholds })
}

impl CooccurrenceGraph {
    /// An empty graph: expansion contributes nothing.
    pub fn empty(vocab_size: u32) -> Self {
        Self {
            vocab_size,
            successors: vec![Vec::new(); vocab_size as usize],
            thresholds: GraphThresholds::default(),
        }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn thresholds(&self) -> GraphThresholds {
        self.thresholds
    }

    pub fn successors(&self, token: TokenId) -> &[Edge] {
        &self.successors[token as usize]
    }

    pub fn edge_count(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }

    /// For each seed in order, appends its top `per_seed` successors by
    /// stored probability order, deduplicating on first occurrence. Seeds
    /// are not auto-included and unknown seeds contribute nothing.
    pub fn expand(&self, seeds: &[TokenId], per_seed: usize) -> Vec<TokenId> {
        let mut seen = vec![false; self.vocab_size as usize];
        let mut out = Vec::new();
        for &s in seeds {
            if s >= self.vocab_size {
                continue;
            }
            for e in self.successors(s).iter().take(per_seed) {
                if !seen[e.dst as usize] {
                    seen[e.dst as usize] = true;
                    out.push(e.dst);
                }
            }
        }
        out
    }

    /// CSV rows `src,dst,prob,count`, sources ascending then stored order.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "src,dst,prob,count")?;
        for (src, list) in self.successors.iter().enumerate() {
            for e in list {
                writeln!(f, "{src},{},{},{}", e.dst, e.prob, e.count)?;
            }
        }
        Ok(())
    }

    pub fn load_csv<P: AsRef<Path>>(path: P, vocab_size: u32) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut successors: Vec<Vec<Edge>> = vec![Vec::new(); vocab_size as usize];
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "src,dst,prob,count" {
                    return Err(Error::InvalidInput("graph csv missing header".into()));
                }
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != 4 {
                return Err(Error::InvalidInput(format!("graph csv line {}: {line}", i + 1)));
            }
            let bad = || Error::InvalidInput(format!("graph csv line {}: {line}", i + 1));
            let src: TokenId = parts[0].parse().map_err(|_| bad())?;
            let dst: TokenId = parts[1].parse().map_err(|_| bad())?;
            let prob: f64 = parts[2].parse().map_err(|_| bad())?;
            let count: u64 = parts[3].parse().map_err(|_| bad())?;
            if src >= vocab_size || dst >= vocab_size {
                return Err(bad());
            }
            successors[src as usize].push(Edge { dst, prob, count });
        }
        for list in &mut successors {
            list.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap().then(a.dst.cmp(&b.dst)));
        }
        Ok(Self { vocab_size, successors, thresholds: GraphThresholds::default() })
    }
}
