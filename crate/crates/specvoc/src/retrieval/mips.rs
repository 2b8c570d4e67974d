//! Maximum inner product search over output-embedding rows.
//!
//! The standard norm-augmentation reduction: every row `w` becomes
//! `(w, sqrt(M^2 - |w|^2))` where `M` is the largest row norm, and a query
//! `h` becomes `(h, 0)`. On the augmented points every pair satisfies
//! `|q - x|^2 = |h|^2 + M^2 - 2<h, w>`, so ascending L2 order equals
//! descending inner-product order exactly. The augmented points are indexed
//! with a seeded HNSW graph; the index is rebuilt from the embedding file
//! rather than serialized.

use super::hnsw::{Hnsw, HnswParams};
use crate::models::EmbeddingMatrix;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone)]
pub struct MipsIndex {
    dim: usize,
    /// `|V|` rows of dimension `dim + 1`, norm-augmented.
    augmented: Vec<f64>,
    max_norm: f64,
    hnsw: Hnsw,
    params: HnswParams,
}

/// Builds the augmented-space index over every row of the head matrix.
/// Deterministic given `params.seed`.
pub fn build_mips_index(lm_head: &EmbeddingMatrix, params: HnswParams) -> Result<MipsIndex> {
    let n = lm_head.rows();
    let d = lm_head.dim();
    let mut max_sq = 0.0f64;
    for i in 0..n {
        let row = lm_head.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Build(format!("embedding row {i} contains non-finite values")));
        }
        let sq: f64 = row.iter().map(|v| v * v).sum();
        if sq > max_sq {
            max_sq = sq;
        }
    }
    let max_norm = max_sq.sqrt();
    let mut augmented = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        let row = lm_head.row(i);
        augmented.extend_from_slice(row);
        let sq: f64 = row.iter().map(|v| v * v).sum();
        // Clamp at zero: rows at the max norm pick up no imaginary slack
        // from rounding.
        augmented.push((max_sq - sq).max(0.0).sqrt());
    }
    let hnsw = Hnsw::build(&augmented, d + 1, params);
    Ok(MipsIndex { dim: d, augmented, max_norm, hnsw, params })
}

impl MipsIndex {
    pub fn len(&self) -> usize {
        self.hnsw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hnsw.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn augmented_point(&self, token: TokenId) -> &[f64] {
        let i = token as usize * (self.dim + 1);
        &self.augmented[i..i + self.dim + 1]
    }

    /// Approximate top-`n` inner-product tokens for hidden state `h`,
    /// descending by inner product (ascending augmented L2), ties toward the
    /// smaller id. Uses the index's configured `ef_search`.
    pub fn query(&self, h: &[f64], n: usize) -> Result<Vec<TokenId>> {
        self.query_with_ef(h, n, self.params.ef_search)
    }

    pub fn query_with_ef(&self, h: &[f64], n: usize, ef: usize) -> Result<Vec<TokenId>> {
        if h.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "query has dimension {}, index expects {}",
                h.len(),
                self.dim
            )));
        }
        if n > self.len() {
            return Err(Error::InvalidInput(format!(
                "requested {n} neighbors from an index of {} points",
                self.len()
            )));
        }
        let mut q = Vec::with_capacity(self.dim + 1);
        q.extend_from_slice(h);
        q.push(0.0);
        Ok(self.hnsw.search(&q, n, ef).into_iter().map(|(id, _)| id).collect())
    }
}
