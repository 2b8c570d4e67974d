//! Static frequency core, the active vocabulary view, and coverage metrics.
//!
//! The active vocabulary at a decoding step is the union of an immutable
//! static core (the most frequent tokens of a build corpus) and a dynamic
//! buffer managed by the replacement cache. The engine takes one snapshot per
//! step; the budget `|V_t \ V_static| <= N_dyn` is enforced at snapshot time.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::{Error, Result, TokenId};

/// The `K_static` most frequent tokens of a build corpus (ties broken toward
/// the smaller id). Immutable after build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticVocab {
    members: Vec<TokenId>,
    counts: Vec<u64>,
    vocab_size: u32,
}

impl StaticVocab {
    pub fn members(&self) -> &[TokenId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.members.binary_search(&token).is_ok()
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Selection-time frequency count of each member, aligned with `members`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        for t in &self.members {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P, vocab_size: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut members = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: TokenId = line
                .parse()
                .map_err(|_| Error::InvalidInput(format!("static vocab line {}: {line}", i + 1)))?;
            if t >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "static vocab token {t} out of range ({vocab_size})"
                )));
            }
            members.push(t);
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != members.len() {
            return Err(Error::InvalidInput("static vocab file contains duplicates".into()));
        }
        let counts = vec![0; sorted.len()];
        Ok(Self { members: sorted, counts, vocab_size })
    }
}

/// Selects the `k_static` highest-count tokens of the corpus; ties broken
/// toward the smaller id. Deterministic given the corpus.
pub fn build_static(corpus: &[TokenId], k_static: usize, vocab_size: u32) -> Result<StaticVocab> {
    if corpus.is_empty() {
        return Err(Error::Build("cannot build a static vocabulary from an empty corpus".into()));
    }
    if k_static == 0 || k_static > vocab_size as usize {
        return Err(Error::Build(format!(
            "k_static = {k_static} must be in [1, {vocab_size}]"
        )));
    }
    let mut counts = vec![0u64; vocab_size as usize];
    for &t in corpus {
        if t >= vocab_size {
            return Err(Error::Build(format!("corpus token {t} out of range ({vocab_size})")));
        }
        counts[t as usize] += 1;
    }
    let mut ids: Vec<TokenId> = (0..vocab_size).collect();
    ids.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    ids.truncate(k_static);
    ids.sort_unstable();
    let member_counts = ids.iter().map(|&t| counts[t as usize]).collect();
    Ok(StaticVocab { members: ids, counts: member_counts, vocab_size })
}

/// Per-step snapshot of the restricted support `V_t`: static core plus the
/// dynamic buffer. Membership is O(1) via a bitmask; iteration yields static
/// members then dynamic members, each ascending, with overlaps deduplicated.
#[derive(Debug, Clone)]
pub struct ActiveVocab {
    members: Vec<TokenId>,
    mask: Vec<bool>,
    dynamic_len: usize,
    budget: usize,
}

impl ActiveVocab {
    /// Builds the union view. `dynamic` must already respect the budget; a
    /// violation here means the cache failed its job and is reported as an
    /// invariant error, not silently truncated.
    pub fn new(static_vocab: &StaticVocab, dynamic: &[TokenId], budget: usize) -> Result<Self> {
        Self::from_sets(static_vocab.vocab_size(), static_vocab.members(), dynamic, budget)
    }

    /// As [`ActiveVocab::new`] but from raw id sets; `static_members` must be
    /// sorted ascending and in range.
    pub fn from_sets(
        vocab_size: u32,
        static_members: &[TokenId],
        dynamic: &[TokenId],
        budget: usize,
    ) -> Result<Self> {
        if dynamic.len() > budget {
            return Err(Error::Invariant(format!(
                "dynamic buffer holds {} tokens, budget is {budget}",
                dynamic.len()
            )));
        }
        let mut mask = vec![false; vocab_size as usize];
        let mut members = Vec::with_capacity(static_members.len() + dynamic.len());
        for &t in static_members {
            if t >= vocab_size {
                return Err(Error::InvalidInput(format!("static token {t} out of range")));
            }
            mask[t as usize] = true;
            members.push(t);
        }
        let static_len = members.len();
        let mut dyn_sorted: Vec<TokenId> = dynamic.to_vec();
        dyn_sorted.sort_unstable();
        dyn_sorted.dedup();
        for &t in &dyn_sorted {
            if t >= vocab_size {
                return Err(Error::InvalidInput(format!("dynamic token {t} out of range")));
            }
            if !mask[t as usize] {
                mask[t as usize] = true;
                members.push(t);
            }
        }
        let dynamic_len = members.len() - static_len;
        Ok(Self { members, mask, dynamic_len, budget })
    }

    /// Full vocabulary as the active set (the unpruned baseline).
    pub fn full(vocab_size: u32) -> Self {
        let members: Vec<TokenId> = (0..vocab_size).collect();
        Self { mask: vec![true; vocab_size as usize], dynamic_len: 0, budget: 0, members }
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.mask.len() && self.mask[token as usize]
    }

    /// Distinct members: static ascending, then dynamic-only ascending.
    pub fn members(&self) -> &[TokenId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of members outside the static core (`|V_t \ V_static|`).
    pub fn dynamic_len(&self) -> usize {
        self.dynamic_len
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn vocab_size(&self) -> u32 {
        self.mask.len() as u32
    }
}

/// True iff the token is outside the active union — the trigger signal for
/// asynchronous vocabulary expansion.
pub fn is_oov(vocab: &ActiveVocab, token: TokenId) -> bool {
    !vocab.contains(token)
}

/// Coverage of a target distribution by the active vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Probability mass of the target distribution inside `V_t`.
    pub covered_mass: f64,
    /// `|V_t ∩ top-k(target)| / k` per requested k.
    pub recall_at_k: Vec<(usize, f64)>,
    /// Tolerated mass loss used for flagging.
    pub epsilon_cov: f64,
}

impl CoverageReport {
    /// True when the step lost more mass than tolerated.
    pub fn below_threshold(&self) -> bool {
        self.covered_mass < 1.0 - self.epsilon_cov
    }
}

/// Computes covered mass and Recall@k against a full-vocabulary target
/// distribution (top-k ties broken toward the smaller id).
pub fn coverage(
    vocab: &ActiveVocab,
    target_dist: &[f64],
    ks: &[usize],
    epsilon_cov: f64,
) -> Result<CoverageReport> {
    if target_dist.len() != vocab.vocab_size() as usize {
        return Err(Error::InvalidInput(format!(
            "distribution length {} does not match vocabulary {}",
            target_dist.len(),
            vocab.vocab_size()
        )));
    }
    let sum: f64 = target_dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "target distribution sums to {sum}, expected 1 within 1e-6"
        )));
    }
    let covered_mass = vocab.members().iter().map(|&t| target_dist[t as usize]).sum();
    let max_k = ks.iter().copied().max().unwrap_or(0).min(target_dist.len());
    let mut order: Vec<u32> = (0..target_dist.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        target_dist[*b as usize]
            .partial_cmp(&target_dist[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    };
    if max_k < order.len() {
        order.select_nth_unstable_by(max_k, cmp);
        order.truncate(max_k);
    }
    order.sort_by(cmp);
    let mut recall_at_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let k_eff = k.min(order.len());
        if k == 0 {
            recall_at_k.push((k, 0.0));
            continue;
        }
        let hits = order[..k_eff].iter().filter(|&&t| vocab.contains(t)).count();
        recall_at_k.push((k, hits as f64 / k as f64));
    }
    Ok(CoverageReport { covered_mass, recall_at_k, epsilon_cov })
}

const CORPUS_MAGIC: &[u8; 4] = b"SVTK";

/// On-disk corpus encodings: newline-delimited decimal ids, or a raw
/// little-endian u32 stream behind an `SVTK` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Text,
    Binary,
}

pub fn write_corpus<P: AsRef<Path>>(path: P, corpus: &[TokenId], format: CorpusFormat) -> Result<()> {
    match format {
        CorpusFormat::Text => {
            let mut out = String::with_capacity(corpus.len() * 5);
            for t in corpus {
                out.push_str(&t.to_string());
                out.push('\n');
            }
            std::fs::write(path, out)?;
        }
        CorpusFormat::Binary => {
            let mut out = Vec::with_capacity(8 + corpus.len() * 4);
            out.extend_from_slice(CORPUS_MAGIC);
            out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
            for t in corpus {
                out.extend_from_slice(&t.to_le_bytes());
            }
            let mut f = std::fs::File::create(path)?;
            f.write_all(&out)?;
        }
    }
    Ok(())
}

pub fn read_corpus<P: AsRef<Path>>(path: P, format: CorpusFormat) -> Result<Vec<TokenId>> {
    match format {
        CorpusFormat::Text => {
            let file = std::fs::File::open(path)?;
            let mut corpus = Vec::new();
            for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                corpus.push(line.parse().map_err(|_| {
                    Error::InvalidInput(format!("corpus line {}: not a token id: {line}", i + 1))
                })?);
            }
            Ok(corpus)
        }
        CorpusFormat::Binary => {
            let mut bytes = Vec::new();
            std::fs::File::open(path)?.read_to_end(&mut bytes)?;
            if bytes.len() < 8 || &bytes[0..4] != CORPUS_MAGIC {
                return Err(Error::InvalidInput("not an SVTK corpus file".into()));
            }
            let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
            if bytes.len() != 8 + count * 4 {
                return Err(Error::InvalidInput(format!(
                    "SVTK payload is {} bytes, expected {}",
                    bytes.len(),
                    8 + count * 4
                )));
            }
            Ok((0..count)
                .map(|i| u32::from_le_bytes(bytes[8 + i * 4..12 + i * 4].try_into().unwrap()))
                .collect())
        }
    }
}

/// Histogram of token frequencies, used by build tooling and tests.
pub fn token_counts(corpus: &[TokenId]) -> BTreeMap<TokenId, u64> {
    let mut counts = BTreeMap::new();
    for &t in corpus {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_static_unique_mode() {
        let v = build_static(&[1, 1, 2], 1, 8).unwrap();
        assert_eq!(v.members(), &[1]);
    }

    #[test]
    fn build_static_hand_counts() {
        // counts: 1 -> 2, 2 -> 2, 3 -> 1
        let v = build_static(&[1, 2, 1, 2, 3], 2, 8).unwrap();
        assert_eq!(v.members(), &[1, 2]);
    }

    #[test]
    fn build_static_tie_breaks_to_smaller_id() {
        let v = build_static(&[9, 4], 1, 16).unwrap();
        assert_eq!(v.members(), &[4]);
    }

    #[test]
    fn build_static_empty_corpus_fails() {
        assert!(matches!(build_static(&[], 1, 8), Err(Error::Build(_))));
    }

    #[test]
    fn build_static_full_width_contains_all_corpus_tokens() {
        let corpus = [3, 5, 7, 3, 1];
        let v = build_static(&corpus, 8, 8).unwrap();
        for t in corpus {
            assert!(v.contains(t));
        }
    }

    fn static_0_to_9() -> StaticVocab {
        build_static(&(0..10).flat_map(|t| std::iter::repeat_n(t, 10 - t as usize)).collect::<Vec<_>>(), 10, 32)
            .unwrap()
    }

    #[test]
    fn active_union_membership() {
        let s = static_0_to_9();
        let v = ActiveVocab::new(&s, &[12, 15], 4).unwrap();
        assert!(v.contains(3));
        assert!(v.contains(12));
        assert!(v.contains(15));
        assert!(!v.contains(11));
    }

    #[test]
    fn active_union_empty_dynamic_is_static() {
        let s = static_0_to_9();
        let v = ActiveVocab::new(&s, &[], 4).unwrap();
        assert_eq!(v.members(), s.members());
        assert_eq!(v.dynamic_len(), 0);
    }

    #[test]
    fn active_union_overlap_is_idempotent() {
        let s = static_0_to_9();
        let v = ActiveVocab::new(&s, &[3], 4).unwrap();
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn active_union_budget_violation_is_invariant_error() {
        let s = static_0_to_9();
        assert!(matches!(ActiveVocab::new(&s, &[10, 11, 12], 2), Err(Error::Invariant(_))));
    }

    #[test]
    fn active_union_iteration_order() {
        let s = static_0_to_9();
        let v = ActiveVocab::new(&s, &[20, 12], 4).unwrap();
        let members = v.members();
        assert_eq!(&members[..10], s.members());
        assert_eq!(&members[10..], &[12, 20]);
    }

    #[test]
    fn is_oov_cases() {
        let s = static_0_to_9();
        let v = ActiveVocab::new(&s, &[], 4).unwrap();
        assert!(is_oov(&v, 12));
        assert!(!is_oov(&v, 3));
        let v = ActiveVocab::new(&s, &[12], 4).unwrap();
        assert!(!is_oov(&v, 12));
    }

    #[test]
    fn coverage_full_vocabulary() {
        let v = ActiveVocab::full(4);
        let r = coverage(&v, &[0.5, 0.25, 0.125, 0.125], &[1, 2, 4], 0.05).unwrap();
        assert_eq!(r.covered_mass, 1.0);
        for (_, rec) in r.recall_at_k {
            assert_eq!(rec, 1.0);
        }
    }

    #[test]
    fn coverage_hand_example() {
        // p = (0.5, 0.3, 0.2), V_t = {0, 2}: mass 0.7; top-2 = {0,1} so recall@2 = 0.5.
        let v = ActiveVocab::from_sets(3, &[0, 2], &[], 1).unwrap();
        let r = coverage(&v, &[0.5, 0.3, 0.2], &[2], 0.05).unwrap();
        assert!((r.covered_mass - 0.7).abs() < 1e-12);
        assert_eq!(r.recall_at_k, vec![(2, 0.5)]);
        assert!(r.below_threshold());
    }

    #[test]
    fn coverage_disjoint_support_is_zero() {
        let v = ActiveVocab::from_sets(4, &[2, 3], &[], 1).unwrap();
        let r = coverage(&v, &[0.6, 0.4, 0.0, 0.0], &[1], 0.05).unwrap();
        assert_eq!(r.covered_mass, 0.0);
    }

    #[test]
    fn coverage_rejects_unnormalized_input() {
        let v = ActiveVocab::full(2);
        assert!(coverage(&v, &[0.9, 0.3], &[1], 0.05).is_err());
    }

    #[test]
    fn coverage_monotone_under_dynamic_insertion() {
        let s = static_0_to_9();
        let p = {
            let mut p = vec![0.0; 32];
            for (i, v) in p.iter_mut().enumerate() {
                *v = (i as f64 + 1.0).recip();
            }
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            p
        };
        let mut prev = coverage(&ActiveVocab::new(&s, &[], 8).unwrap(), &p, &[4], 0.05)
            .unwrap()
            .covered_mass;
        let mut dynamic = Vec::new();
        for t in [14, 23, 11, 30] {
            dynamic.push(t);
            let now = coverage(&ActiveVocab::new(&s, &dynamic, 8).unwrap(), &p, &[4], 0.05)
                .unwrap()
                .covered_mass;
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn recall_bounds_hold() {
        let v = ActiveVocab::from_sets(8, &[1, 5], &[7], 2).unwrap();
        let mut p = vec![0.125; 8];
        p[0] = 0.125;
        let r = coverage(&v, &p, &[1, 3, 8], 0.05).unwrap();
        for (_, rec) in r.recall_at_k {
            assert!((0.0..=1.0).contains(&rec));
        }
    }

    #[test]
    fn corpus_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let corpus: Vec<TokenId> = vec![0, 7, 42, 7, 99999];
        for (name, fmt) in [("c.txt", CorpusFormat::Text), ("c.svtk", CorpusFormat::Binary)] {
            let path = dir.path().join(name);
            write_corpus(&path, &corpus, fmt).unwrap();
            assert_eq!(read_corpus(&path, fmt).unwrap(), corpus);
        }
        let bytes = std::fs::read(dir.path().join("c.svtk")).unwrap();
        assert_eq!(&bytes[0..4], b"SVTK");
    }

    #[test]
    fn static_vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_static(&[5, 5, 2, 9], 3, 16).unwrap();
        let path = dir.path().join("static.txt");
        v.save(&path).unwrap();
        let back = StaticVocab::load(&path, 16).unwrap();
        assert_eq!(back.members(), v.members());
    }
}
