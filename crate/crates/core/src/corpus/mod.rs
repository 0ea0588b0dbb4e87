//! Posts, comments and their embeddings.
//!
//! A [`Corpus`] holds labeled posts (train/val/test) and the unlabeled "wild"
//! pool used for retrieval in one structure; the [`Split`] tag tells them
//! apart. Vectors are loaded as-is and only become unit length after
//! [`normalize_vectors`], which everything downstream assumes.

mod io;
pub mod sidecar;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::vector;
use crate::{Error, Result};

pub use io::{load_corpus, save_corpus, save_corpus_with_sidecars};
pub use synth::{generate_synthetic_corpus, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Wild,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Wild];

    pub fn is_labeled(self) -> bool {
        self != Split::Wild
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Wild => "wild",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "wild" => Ok(Split::Wild),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A reader comment; its embedding lives in the text space.
#[derive(Debug, Clone, PartialEq)]
pub struct CommentRecord {
    pub id: String,
    pub text: String,
    pub vec: Vec<f32>,
}

/// One image-text post.
#[derive(Debug, Clone, PartialEq)]
pub struct PostRecord {
    pub id: String,
    pub text: String,
    pub image_vec: Vec<f32>,
    pub text_vec: Vec<f32>,
    pub comments: Vec<CommentRecord>,
    pub label: Option<usize>,
    pub split: Split,
}

/// Embedding widths: image and text (comments share the text width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub image: usize,
    pub text: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub wild: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub posts: Vec<PostRecord>,
    pub dims: Dims,
    pub class_count: usize,
}

impl Corpus {
    /// Builds a corpus after checking every invariant.
    pub fn new(dims: Dims, class_count: usize, posts: Vec<PostRecord>) -> Result<Self> {
        let corpus = Self { posts, dims, class_count };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn stats(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for post in &self.posts {
            match post.split {
                Split::Train => counts.train += 1,
                Split::Val => counts.val += 1,
                Split::Test => counts.test += 1,
                Split::Wild => counts.wild += 1,
            }
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PostRecord> + '_ {
        self.posts.iter().filter(move |p| p.split == split)
    }

    /// Checks ids, dimensions, labels and vector validity.
    pub fn validate(&self) -> Result<()> {
        if self.dims.image == 0 || self.dims.text == 0 {
            return Err(Error::Schema("embedding dimensions must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.posts.len());
        for post in &self.posts {
            if !seen.insert(post.id.as_str()) {
                return Err(Error::Schema(format!("duplicate post id {:?}", post.id)));
            }
            self.validate_post(post)?;
        }
        Ok(())
    }

    pub(crate) fn validate_post(&self, post: &PostRecord) -> Result<()> {
        let id = &post.id;
        check_vec(&post.image_vec, self.dims.image, || format!("post {id:?} image_vec"))?;
        check_vec(&post.text_vec, self.dims.text, || format!("post {id:?} text_vec"))?;
        for c in &post.comments {
            check_vec(&c.vec, self.dims.text, || format!("post {id:?} comment {:?}", c.id))?;
        }
        match (post.split.is_labeled(), post.label) {
            (true, None) => return Err(Error::Schema(format!("post {id:?} in split {} has no label", post.split))),
            (false, Some(_)) => return Err(Error::Schema(format!("wild post {id:?} must not carry a label"))),
            (_, Some(y)) if y >= self.class_count => {
                return Err(Error::Schema(format!("post {id:?} label {y} outside [0, {})", self.class_count)))
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_vec(v: &[f32], dim: usize, what: impl Fn() -> String) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Schema(format!("{}: length {} != {dim}", what(), v.len())));
    }
    if !vector::is_valid_embedding(v) {
        return Err(Error::Data(format!("{}: non-finite or zero-norm vector", what())));
    }
    Ok(())
}

/// Scales every image, text and comment vector to unit L2 norm.
pub fn normalize_vectors(mut corpus: Corpus) -> Result<Corpus> {
    for post in &mut corpus.posts {
        let id = &post.id;
        let zero = |what: &str| Error::Data(format!("post {id:?}: zero-norm {what}"));
        if !vector::normalize(&mut post.image_vec) {
            return Err(zero("image_vec"));
        }
        if !vector::normalize(&mut post.text_vec) {
            return Err(zero("text_vec"));
        }
        for c in &mut post.comments {
            if !vector::normalize(&mut c.vec) {
                return Err(zero("comment vector"));
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, image: Vec<f32>, text: Vec<f32>) -> PostRecord {
        PostRecord {
            id: id.into(),
            text: String::new(),
            image_vec: image,
            text_vec: text,
            comments: vec![],
            label: Some(0),
            split: Split::Train,
        }
    }

    fn dims() -> Dims {
        Dims { image: 2, text: 2 }
    }

    #[test]
    fn normalizes_three_four_five() {
        let c = Corpus::new(dims(), 2, vec![post("a", vec![3.0, 4.0], vec![0.0, 2.0])]).unwrap();
        let c = normalize_vectors(c).unwrap();
        let v = &c.posts[0].image_vec;
        assert!((v[0] - 0.6).abs() <= 1e-6 && (v[1] - 0.8).abs() <= 1e-6);
        assert_eq!(c.posts[0].text_vec, vec![0.0, 1.0]);
    }

    #[test]
    fn unit_vectors_unchanged() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let c = Corpus::new(dims(), 2, vec![post("a", vec![s, s], vec![1.0, 0.0])]).unwrap();
        let n = normalize_vectors(c.clone()).unwrap();
        for (a, b) in c.posts[0].image_vec.iter().zip(&n.posts[0].image_vec) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_bad_records() {
        let dup = Corpus::new(
            dims(),
            2,
            vec![post("a", vec![1.0, 0.0], vec![1.0, 0.0]), post("a", vec![1.0, 0.0], vec![1.0, 0.0])],
        );
        assert!(matches!(dup, Err(Error::Schema(_))));

        let wrong_dim = Corpus::new(dims(), 2, vec![post("a", vec![1.0], vec![1.0, 0.0])]);
        assert!(matches!(wrong_dim, Err(Error::Schema(_))));

        let zero = Corpus::new(dims(), 2, vec![post("a", vec![0.0, 0.0], vec![1.0, 0.0])]);
        assert!(matches!(zero, Err(Error::Data(_))));

        let mut wild = post("w", vec![1.0, 0.0], vec![1.0, 0.0]);
        wild.split = Split::Wild;
        assert!(matches!(Corpus::new(dims(), 2, vec![wild.clone()]), Err(Error::Schema(_))));
        wild.label = None;
        assert!(Corpus::new(dims(), 2, vec![wild]).is_ok());

        let mut unlabeled = post("u", vec![1.0, 0.0], vec![1.0, 0.0]);
        unlabeled.label = None;
        assert!(matches!(Corpus::new(dims(), 2, vec![unlabeled]), Err(Error::Schema(_))));

        let out_of_range = Corpus::new(
            dims(),
            2,
            vec![{
                let mut p = post("a", vec![1.0, 0.0], vec![1.0, 0.0]);
                p.label = Some(2);
                p
            }],
        );
        assert!(matches!(out_of_range, Err(Error::Schema(_))));
    }
}
