//! Candidate generation for vocabulary expansion.
//!
//! On an out-of-vocabulary trigger the runtime rule forms a seed set from the
//! target's top candidates and the semantic neighbors of the trigger's hidden
//! state, expands each seed through the co-occurrence graph, deduplicates in
//! formation order (target, then semantic, then graph), and caps the batch.
//! The index and graph are immutable after build, so queries are safe from
//! any number of worker threads.

pub mod graph;
pub mod hnsw;
pub mod mips;

pub use graph::{build_graph, CooccurrenceGraph, Edge, GraphThresholds};
pub use hnsw::{Hnsw, HnswParams};
pub use mips::{build_mips_index, MipsIndex};

use crate::{Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateConfig {
    /// Target-side seeds taken from the verification top-k.
    pub target_seed_n: usize,
    /// Semantic neighbors retrieved per trigger.
    pub sem_top_n: usize,
    /// Graph successors taken per seed.
    pub graph_per_seed: usize,
    /// Hard cap on insertions per failure event.
    pub cap: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { target_seed_n: 10, sem_top_n: 10, graph_per_seed: 8, cap: 32 }
    }
}

/// Which retrieval sources feed the dynamic vocabulary. The reduced arms
/// exist for coverage ablations; the engine's runtime rule is `Full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum RetrievalArm {
    /// No dynamic retrieval at all.
    Off,
    /// Semantic neighbors only.
    Semantic,
    /// Semantic neighbors plus graph expansion of those neighbors.
    SemanticGraph,
    /// Target top-k seeds, semantic neighbors, then graph expansion.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    /// Semantic neighbors in retrieval order (`S_sem`).
    pub semantic: Vec<TokenId>,
    /// Graph expansion results in formation order (`S_graph`).
    pub graph: Vec<TokenId>,
    /// Deduplicated union in formation order, truncated to `cap`.
    pub merged: Vec<TokenId>,
    pub cap: usize,
}

/// Immutable retrieval state shared by the engine and its workers.
#[derive(Debug, Clone)]
pub struct RetrievalBundle {
    pub index: MipsIndex,
    pub graph: CooccurrenceGraph,
    pub config: CandidateConfig,
}

impl RetrievalBundle {
    /// The runtime candidate-formation rule (the `Full` arm): seeds are the
    /// deduplicated union of the target's top candidates and the semantic
    /// neighbors of `h`; every seed is expanded through the graph; the merge
    /// keeps formation order under the insertion cap.
    pub fn form_candidates(&self, target_topk: &[TokenId], h: &[f64]) -> Result<CandidateSet> {
        self.candidates_for_arm(RetrievalArm::Full, target_topk, h)
    }

    pub fn candidates_for_arm(
        &self,
        arm: RetrievalArm,
        target_topk: &[TokenId],
        h: &[f64],
    ) -> Result<CandidateSet> {
        let cfg = self.config;
        let mut seeds: Vec<TokenId> = Vec::new();
        let mut semantic: Vec<TokenId> = Vec::new();
        match arm {
            RetrievalArm::Off => {}
            RetrievalArm::Semantic | RetrievalArm::SemanticGraph => {
                semantic = self.index.query(h, cfg.sem_top_n.min(self.index.len()))?;
                seeds = dedupe(semantic.iter().copied());
            }
            RetrievalArm::Full => {
                semantic = self.index.query(h, cfg.sem_top_n.min(self.index.len()))?;
                seeds = dedupe(
                    target_topk
                        .iter()
                        .take(cfg.target_seed_n)
                        .copied()
                        .chain(semantic.iter().copied()),
                );
            }
        }
        let graph_part = match arm {
            RetrievalArm::Off | RetrievalArm::Semantic => Vec::new(),
            RetrievalArm::SemanticGraph | RetrievalArm::Full => {
                self.graph.expand(&seeds, cfg.graph_per_seed)
            }
        };
        let mut merged = dedupe(seeds.iter().copied().chain(graph_part.iter().copied()));
        merged.truncate(cfg.cap);
        Ok(CandidateSet { semantic, graph: graph_part, merged, cap: cfg.cap })
    }
}

fn dedupe(iter: impl Iterator<Item = TokenId>) -> Vec<TokenId> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for t in iter {
        if seen.insert(t) {
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EmbeddingMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn bundle(vocab: u32, dim: usize, corpus: Option<&[TokenId]>) -> RetrievalBundle {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..vocab)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let head = EmbeddingMatrix::from_rows(rows).unwrap();
        let index = build_mips_index(&head, HnswParams { m: 8, ..Default::default() }).unwrap();
        let graph = match corpus {
            Some(c) => {
                build_graph(c, GraphThresholds { min_count: 1, tau: 0.0, max_out_degree: 8 }, vocab)
                    .unwrap()
            }
            None => CooccurrenceGraph::empty(vocab),
        };
        RetrievalBundle { index, graph, config: CandidateConfig::default() }
    }

    #[test]
    fn empty_graph_merged_is_seed_set() {
        let b = bundle(64, 4, None);
        let h = [0.2, -0.4, 0.9, 0.1];
        let set = b.form_candidates(&[1, 2, 3], &h).unwrap();
        assert!(set.graph.is_empty());
        assert!(set.merged.len() <= 20);
        assert_eq!(&set.merged[..3], &[1, 2, 3]);
        for s in &set.semantic {
            assert!(set.merged.contains(s));
        }
    }

    #[test]
    fn overlapping_target_and_semantic_seeds_do_not_duplicate() {
        let b = bundle(64, 4, None);
        let h = [0.2, -0.4, 0.9, 0.1];
        let sem = b.index.query(&h, 10).unwrap();
        let set = b.form_candidates(&sem, &h).unwrap();
        let mut dedup = set.merged.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), set.merged.len());
        assert_eq!(set.merged.len(), sem.len());
    }

    #[test]
    fn cap_truncates_in_formation_order() {
        // Corpus where every token has 8 distinct successors.
        let mut corpus = Vec::new();
        for round in 0..9u32 {
            for t in 0..40u32 {
                corpus.push(t);
                corpus.push((t + 13 + round * 3) % 40);
            }
        }
        let b = bundle(40, 4, Some(&corpus));
        let h = [0.2, -0.4, 0.9, 0.1];
        let target: Vec<TokenId> = (0..10).collect();
        let set = b.form_candidates(&target, &h).unwrap();
        assert!(set.merged.len() <= 32);
        // Target seeds always survive the cap (formation order).
        for t in 0..10u32 {
            assert!(set.merged.contains(&t));
        }
        if set.merged.len() == 32 {
            let seeds = set.merged.iter().filter(|t| target.contains(t) || set.semantic.contains(t)).count();
            assert!(seeds >= 10);
        }
    }

    #[test]
    fn merged_never_exceeds_cap_or_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let corpus: Vec<TokenId> = (0..2000).map(|_| rng.random_range(0..64)).collect();
        let b = bundle(64, 4, Some(&corpus));
        for _ in 0..25 {
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target: Vec<TokenId> = (0..rng.random_range(0..15)).map(|_| rng.random_range(0..64)).collect();
            for arm in [RetrievalArm::Semantic, RetrievalArm::SemanticGraph, RetrievalArm::Full] {
                let set = b.candidates_for_arm(arm, &target, &h).unwrap();
                assert!(set.merged.len() <= set.cap);
                let mut sorted = set.merged.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), set.merged.len(), "duplicates in merged");
                assert!(set.merged.iter().all(|&t| t < 64));
            }
        }
    }

    #[test]
    fn off_arm_yields_nothing() {
        let b = bundle(32, 4, None);
        let set = b.candidates_for_arm(RetrievalArm::Off, &[1, 2], &[0.0; 4]).unwrap();
        assert!(set.merged.is_empty() && set.semantic.is_empty() && set.graph.is_empty());
    }

    #[test]
    fn semantic_arm_ignores_target_seeds() {
        let b = bundle(64, 4, None);
        let h = [0.9, 0.1, -0.3, 0.5];
        let set = b.candidates_for_arm(RetrievalArm::Semantic, &[63, 62, 61], &h).unwrap();
        assert_eq!(set.merged, set.semantic);
    }

    #[test]
    fn identical_builds_answer_identically() {
        let corpus: Vec<TokenId> = (0..500).map(|i| (i % 50) as u32).collect();
        let a = bundle(64, 4, Some(&corpus));
        let b = bundle(64, 4, Some(&corpus));
        let h = [0.4, 0.4, -0.2, 0.0];
        assert_eq!(
            a.form_candidates(&[5, 6], &h).unwrap(),
            b.form_candidates(&[5, 6], &h).unwrap()
        );
    }
}
