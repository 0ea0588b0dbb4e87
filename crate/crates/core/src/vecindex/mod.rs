//! Approximate nearest-neighbor search over unit vectors.
//!
//! [`IvfPqIndex`] partitions vectors with a k-means coarse quantizer and stores
//! each one as a product-quantized residual. Searches scan the `nprobe`
//! nearest lists with asymmetric distance tables. [`search_exact`] is the
//! brute-force reference.
//!
//! All inputs are expected to be unit length, so cosine similarity is
//! recovered from squared distance as `1 - d^2 / 2`.

mod ivfpq;
pub mod kmeans;
mod persist;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::vector::dot;
use crate::{Error, Result};

pub use ivfpq::{train_ivfpq, IvfPqIndex, IvfPqParams};
pub use kmeans::{kmeans, KMeans};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub ordinal: usize,
    pub similarity: f64,
}

/// Result order: similarity descending, then ordinal ascending.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.ordinal.cmp(&b.ordinal))
}

pub(crate) fn sort_and_truncate(mut hits: Vec<SearchHit>, r: usize) -> Vec<SearchHit> {
    if hits.len() > r {
        if r == 0 {
            return Vec::new();
        }
        hits.select_nth_unstable_by(r - 1, hit_order);
        hits.truncate(r);
    }
    hits.sort_unstable_by(hit_order);
    hits
}

/// Exact top-`r` cosine scan over `vectors` (`n * dim`, unit rows).
pub fn search_exact(vectors: &[f32], dim: usize, query: &[f32], r: usize) -> Result<Vec<SearchHit>> {
    if dim == 0 || query.len() != dim || !vectors.len().is_multiple_of(dim) {
        return Err(Error::Argument(format!(
            "dimension mismatch: query {} vs dim {dim} over {} values",
            query.len(),
            vectors.len()
        )));
    }
    let hits = vectors
        .chunks_exact(dim)
        .enumerate()
        .map(|(ordinal, v)| SearchHit { ordinal, similarity: dot(v, query) })
        .collect();
    Ok(sort_and_truncate(hits, r))
}
