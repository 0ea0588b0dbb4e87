//! Consensus comments: the comments of retrieved posts that agree most with
//! the rest of the pool.
//!
//! A comment's consensus score is its mean cosine similarity to every comment
//! in the pool, itself included. With unit vectors that mean equals the dot
//! product with the pool's mean vector, which is how it is computed here.

use crate::corpus::{CommentRecord, PostRecord};
use crate::{Error, Result};

/// Comments gathered from a query's retrieved posts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommentPool {
    pub comments: Vec<CommentRecord>,
    /// Post each comment came from, parallel to `comments`.
    pub source_post_ids: Vec<String>,
}

impl CommentPool {
    pub fn from_posts<'a>(posts: impl IntoIterator<Item = &'a PostRecord>) -> Self {
        let mut pool = Self::default();
        for post in posts {
            for c in &post.comments {
                pool.comments.push(c.clone());
                pool.source_post_ids.push(post.id.clone());
            }
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.comments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusEntry {
    pub comment: CommentRecord,
    pub score: f64,
}

/// Top-N comments by consensus score, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSet {
    pub entries: Vec<ConsensusEntry>,
    pub requested: usize,
}

impl ConsensusSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn comments(&self) -> impl Iterator<Item = &CommentRecord> + '_ {
        self.entries.iter().map(|e| &e.comment)
    }
}

/// One consensus score per pool comment, in pool order.
pub fn consensus_scores(pool: &CommentPool) -> Result<Vec<f64>> {
    let first = pool.comments.first().ok_or_else(|| Error::Argument("empty comment pool".into()))?;
    let dim = first.vec.len();
    if pool.comments.iter().any(|c| c.vec.len() != dim) {
        return Err(Error::Argument("comment vectors differ in length".into()));
    }
    let mut mean = vec![0.0f64; dim];
    for c in &pool.comments {
        for (m, &x) in mean.iter_mut().zip(&c.vec) {
            *m += x as f64;
        }
    }
    let inv = 1.0 / pool.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(pool.comments.iter().map(|c| c.vec.iter().zip(&mean).map(|(&x, m)| x as f64 * m).sum()).collect())
}

/// The `n` highest-scoring comments; ties go to the smaller comment id.
pub fn select_top_n(pool: &CommentPool, n: usize) -> Result<ConsensusSet> {
    if n == 0 {
        return Err(Error::Argument("N must be at least 1".into()));
    }
    if pool.is_empty() {
        return Ok(ConsensusSet { entries: Vec::new(), requested: n });
    }
    let scores = consensus_scores(pool)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| pool.comments[a].id.cmp(&pool.comments[b].id)).then(a.cmp(&b))
    });
    let entries = order
        .into_iter()
        .take(n)
        .map(|i| ConsensusEntry { comment: pool.comments[i].clone(), score: scores[i] })
        .collect();
    Ok(ConsensusSet { entries, requested: n })
}
