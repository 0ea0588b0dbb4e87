//! Deterministic synthetic corpora with class structure in every modality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CommentRecord, Corpus, Dims, PostRecord, Split};
use crate::{Error, Result};

/// Shape of a synthetic corpus.
///
/// Every class gets one random unit "center" per modality. Post vectors are
/// `center + spread * g / sqrt(d)` with `g` standard normal, so `spread` is
/// roughly the noise norm relative to the unit center. Comment vectors are
/// `comment_signal * text_center + comment_noise * g / sqrt(d_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub wild_per_class: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub spread: f64,
    pub comment_signal: f64,
    pub comment_noise: f64,
    pub max_comments: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            train_per_class: 40,
            val_per_class: 10,
            test_per_class: 50,
            wild_per_class: 200,
            image_dim: 64,
            text_dim: 32,
            spread: 1.0,
            comment_signal: 1.0,
            comment_noise: 1.0,
            max_comments: 5,
        }
    }
}

impl SynthConfig {
    pub fn per_split(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
            Split::Wild => self.wild_per_class,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if Split::ALL.iter().all(|&s| self.per_split(s) == 0) {
            return Err(Error::Config("synthetic corpus must contain at least one post".into()));
        }
        if self.max_comments == 0 {
            return Err(Error::Config("max_comments must be positive".into()));
        }
        for (name, v) in
            [("spread", self.spread), ("comment_signal", self.comment_signal), ("comment_noise", self.comment_noise)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.comment_signal == 0.0 && self.comment_noise == 0.0 {
            return Err(Error::Config("comment_signal and comment_noise cannot both be zero".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let g = gaussian(rng, dim);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn around(rng: &mut impl Rng, center: &[f64], signal: f64, noise: f64) -> Vec<f32> {
    let scale = noise / (center.len() as f64).sqrt();
    let g = gaussian(rng, center.len());
    let v: Vec<f32> = center.iter().zip(&g).map(|(c, z)| (signal * c + scale * z) as f32).collect();
    if v.iter().all(|&x| x == 0.0) {
        // Measure-zero draw; nudge to keep the positive-norm invariant.
        return around(rng, center, signal, noise);
    }
    v
}

/// Generates a labeled + wild corpus. A pure function of `(config, seed)`.
/// Vectors are not normalized.
pub fn generate_synthetic_corpus(config: &SynthConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_centers: Vec<Vec<f64>> = (0..config.classes).map(|_| unit(&mut rng, config.image_dim)).collect();
    let text_centers: Vec<Vec<f64>> = (0..config.classes).map(|_| unit(&mut rng, config.text_dim)).collect();

    let mut posts = Vec::new();
    for split in Split::ALL {
        for i in 0..config.per_split(split) * config.classes {
            let class = i % config.classes;
            let id = format!("{split}-{i:05}");
            let image_vec = around(&mut rng, &image_centers[class], 1.0, config.spread);
            let text_vec = around(&mut rng, &text_centers[class], 1.0, config.spread);
            let n_comments = rng.random_range(1..=config.max_comments);
            let comments = (0..n_comments)
                .map(|j| CommentRecord {
                    id: format!("{id}-c{j}"),
                    text: format!("comment {j} on {id}"),
                    vec: around(&mut rng, &text_centers[class], config.comment_signal, config.comment_noise),
                })
                .collect();
            posts.push(PostRecord {
                text: format!("synthetic {split} post {i}"),
                id,
                image_vec,
                text_vec,
                comments,
                label: split.is_labeled().then_some(class),
                split,
            });
        }
    }
    Corpus::new(Dims { image: config.image_dim, text: config.text_dim }, config.classes, posts)
}

/// Per-class unit centers for one modality, recovered by the same draws the
/// generator makes. Test-only helper for oracle classifiers.
#[cfg(test)]
pub(crate) fn centers(config: &SynthConfig, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = (0..config.classes).map(|_| unit(&mut rng, config.image_dim)).collect();
    let text = (0..config.classes).map(|_| unit(&mut rng, config.text_dim)).collect();
    (image, text)
}
