//! Glue from retrieval to training data: for each query, its retrieved wild
//! posts and the consensus comments drawn from them.

use rayon::prelude::*;

use crate::consensus::{select_top_n, CommentPool, ConsensusSet};
use crate::corpus::PostRecord;
use crate::xsearch::{retrieve_similar_posts, FusionWeights, RetrievalIndex, RetrievalResult, SearchParams};
use crate::{Error, Result};

/// A query post with its retrieved neighbors and consensus comments.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub query: PostRecord,
    pub retrieved: Vec<PostRecord>,
    pub consensus: ConsensusSet,
}

/// Top-`n` consensus comments over the retrieved posts' comments. When none
/// of them has comments, the query's own comments form the pool instead.
pub fn consensus_with_fallback(query: &PostRecord, retrieved: &[PostRecord], n: usize) -> Result<ConsensusSet> {
    let pool = CommentPool::from_posts(retrieved);
    if !pool.is_empty() {
        return select_top_n(&pool, n);
    }
    if !query.comments.is_empty() {
        log::warn!("query {:?}: retrieved posts carry no comments; using its own", query.id);
    }
    select_top_n(&CommentPool::from_posts([query]), n)
}

impl QueryContext {
    pub fn from_result(query: &PostRecord, result: &RetrievalResult, index: &RetrievalIndex, n: usize) -> Result<Self> {
        let retrieved = result
            .hits
            .iter()
            .map(|h| {
                index
                    .ordinal_of(&h.post_id)
                    .map(|o| index.posts()[o].clone())
                    .ok_or_else(|| Error::Data(format!("retrieved id {:?} is not in the wild set", h.post_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let consensus = consensus_with_fallback(query, &retrieved, n)?;
        Ok(Self { query: query.clone(), retrieved, consensus })
    }
}

/// Retrieval plus consensus selection for every query, in parallel; output
/// order follows `queries`.
pub fn build_contexts(
    queries: &[&PostRecord],
    index: &RetrievalIndex,
    weights: &FusionWeights,
    params: &SearchParams,
    n: usize,
) -> Result<Vec<QueryContext>> {
    queries
        .par_iter()
        .map(|q| {
            let result = retrieve_similar_posts(q, index, weights, params)?;
            QueryContext::from_result(q, &result, index, n)
        })
        .collect()
}
