//! The comment-aware fusion classifier.
//!
//! Shared base: `h_f = W2 tanh(W1 [image ; text] + b1) + b2`.
//!
//! Early scheme: the image is projected to `p`, each comment state is
//! `h_c = tanh(Wc [p ; comment] + bc)`, `u = attend(h_f, h_c)` and the head
//! reads `[h_f ; u]`.
//!
//! Late scheme: image and text are projected separately to `h_v`, `h_t`;
//! comment states are `h_c = tanh(Wc comment + bc)`; `v = attend(h_v, h_c)`,
//! `t = attend(h_t, h_c)` with separate scorers, and the head reads
//! `[v ; t ; h_f]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend_backward, attend_forward, AttentionCache, Scorer};
use super::layers::{add_into, concat, tanh_backward, tanh_in_place, Layout, Linear};
use super::loss::Target;
use crate::corpus::{CommentRecord, PostRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Early,
    Late,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Scheme::Early),
            "late" => Ok(Scheme::Late),
            other => Err(Error::Argument(format!("unknown fusion scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Early => "early",
            Scheme::Late => "late",
        })
    }
}

/// Shapes of a [`FusionClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scheme: Scheme,
    pub image_dim: usize,
    pub text_dim: usize,
    /// H: width of every hidden representation.
    pub hidden: usize,
    /// A: hidden width of the attention scorer.
    pub attn_hidden: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(scheme: Scheme, image_dim: usize, text_dim: usize, classes: usize) -> Self {
        Self { scheme, image_dim, text_dim, hidden: 16, attn_hidden: 32, classes }
    }

    fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 || self.hidden == 0 || self.attn_hidden == 0 {
            return Err(Error::Model(format!("all model widths must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Model("a classifier needs at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Branch {
    Early { image_proj: Linear, comment: Linear, scorer: Scorer },
    Late { image_proj: Linear, text_proj: Linear, comment: Linear, image_scorer: Scorer, text_scorer: Scorer },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Architecture {
    base1: Linear,
    base2: Linear,
    branch: Branch,
    head: Linear,
    layout: Layout,
}

impl Architecture {
    fn new(c: &ModelConfig) -> Self {
        let (h, a) = (c.hidden, c.attn_hidden);
        let mut layout = Layout::default();
        let base1 = layout.linear("base.hidden", h, c.image_dim + c.text_dim);
        let base2 = layout.linear("base.out", h, h);
        let (branch, head_in) = match c.scheme {
            Scheme::Early => {
                let image_proj = layout.linear("early.image_proj", h, c.image_dim);
                let comment = layout.linear("early.comment", h, h + c.text_dim);
                let scorer = Scorer::new(&mut layout, "early.attn", h, a);
                (Branch::Early { image_proj, comment, scorer }, 2 * h)
            }
            Scheme::Late => {
                let image_proj = layout.linear("late.image_proj", h, c.image_dim);
                let text_proj = layout.linear("late.text_proj", h, c.text_dim);
                let comment = layout.linear("late.comment", h, c.text_dim);
                let image_scorer = Scorer::new(&mut layout, "late.image_attn", h, a);
                let text_scorer = Scorer::new(&mut layout, "late.text_attn", h, a);
                (Branch::Late { image_proj, text_proj, comment, image_scorer, text_scorer }, 3 * h)
            }
        };
        let head = layout.linear("head", c.classes, head_in);
        Self { base1, base2, branch, head, layout }
    }
}

/// One example's inputs in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub comments: Vec<Vec<f64>>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl ModelInput {
    pub fn new<'a>(post: &PostRecord, comments: impl IntoIterator<Item = &'a CommentRecord>) -> Self {
        Self {
            image: widen(&post.image_vec),
            text: widen(&post.text_vec),
            comments: comments.into_iter().map(|c| widen(&c.vec)).collect(),
        }
    }

    /// The same post with only the comments at `keep`.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            image: self.image.clone(),
            text: self.text.clone(),
            comments: keep.iter().map(|&i| self.comments[i].clone()).collect(),
        }
    }
}

/// Logits plus attention weights over the comments. The late scheme has a
/// second set of weights for the text-anchored attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub betas: Vec<f64>,
    pub text_betas: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum BranchCache {
    Early { proj: Vec<f64>, states: Vec<Vec<f64>>, attn: AttentionCache },
    Late { hv: Vec<f64>, ht: Vec<f64>, states: Vec<Vec<f64>>, image_attn: AttentionCache, text_attn: AttentionCache },
}

#[derive(Debug, Clone)]
struct Cache {
    x: Vec<f64>,
    a1: Vec<f64>,
    hf: Vec<f64>,
    branch: BranchCache,
    head_in: Vec<f64>,
    logits: Vec<f64>,
}

/// Parameters and shapes of the classifier. All parameters live in one flat
/// buffer; [`FusionClassifier::blocks`] names its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionClassifier {
    config: ModelConfig,
    arch: Architecture,
    params: Vec<f64>,
}

impl FusionClassifier {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.layout.total];
        for (name, span) in &arch.layout.blocks {
            if name.ends_with(".bias") {
                continue;
            }
            let bound = 1.0 / (span.cols as f64).sqrt();
            for p in &mut params[span.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, arch, params })
    }

    /// Wraps existing parameters; the length must match the layout.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        if params.len() != arch.layout.total {
            return Err(Error::Model(format!("{} parameters for a layout of {}", params.len(), arch.layout.total)));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Model("parameters must be finite".into()));
        }
        Ok(Self { config, arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Named parameter blocks: `(name, offset, rows, cols)`.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, usize, usize, usize)> + '_ {
        self.arch.layout.blocks.iter().map(|(n, s)| (n.as_str(), s.offset, s.rows, s.cols))
    }

    pub fn block_of(&self, i: usize) -> &str {
        self.arch.layout.block_of(i)
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        if input.image.len() != c.image_dim || input.text.len() != c.text_dim {
            return Err(Error::Model(format!(
                "input widths ({}, {}) do not match model ({}, {})",
                input.image.len(),
                input.text.len(),
                c.image_dim,
                c.text_dim
            )));
        }
        if input.comments.is_empty() {
            return Err(Error::Argument("the classifier needs at least one comment".into()));
        }
        if input.comments.iter().any(|v| v.len() != c.text_dim) {
            return Err(Error::Model("comment width does not match the text width".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, input: &ModelInput) -> Result<Cache> {
        self.check_input(input)?;
        let p = &self.params[..];
        let a = &self.arch;
        let x = concat(&input.image, &input.text);
        let mut a1 = a.base1.forward(p, &x);
        tanh_in_place(&mut a1);
        let hf = a.base2.forward(p, &a1);
        let (branch, head_in) = match &a.branch {
            Branch::Early { image_proj, comment, scorer } => {
                let proj = image_proj.forward(p, &input.image);
                let states: Vec<Vec<f64>> = input
                    .comments
                    .iter()
                    .map(|c| {
                        let mut s = comment.forward(p, &concat(&proj, c));
                        tanh_in_place(&mut s);
                        s
                    })
                    .collect();
                let attn = attend_forward(scorer, p, &hf, &states)?;
                let head_in = concat(&hf, &attn.out.u);
                (BranchCache::Early { proj, states, attn }, head_in)
            }
            Branch::Late { image_proj, text_proj, comment, image_scorer, text_scorer } => {
                let hv = image_proj.forward(p, &input.image);
                let ht = text_proj.forward(p, &input.text);
                let states: Vec<Vec<f64>> = input
                    .comments
                    .iter()
                    .map(|c| {
                        let mut s = comment.forward(p, c);
                        tanh_in_place(&mut s);
                        s
                    })
                    .collect();
                let image_attn = attend_forward(image_scorer, p, &hv, &states)?;
                let text_attn = attend_forward(text_scorer, p, &ht, &states)?;
                let head_in = concat(&concat(&image_attn.out.u, &text_attn.out.u), &hf);
                (BranchCache::Late { hv, ht, states, image_attn, text_attn }, head_in)
            }
        };
        let logits = a.head.forward(p, &head_in);
        Ok(Cache { x, a1, hf, branch, head_in, logits })
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let cache = self.forward_cached(input)?;
        let (betas, text_betas) = match cache.branch {
            BranchCache::Early { attn, .. } => (attn.out.betas, None),
            BranchCache::Late { image_attn, text_attn, .. } => (image_attn.out.betas, Some(text_attn.out.betas)),
        };
        Ok(ForwardOutput { logits: cache.logits, betas, text_betas })
    }

    /// Backpropagates `dL/dlogits` and accumulates parameter gradients into `g`.
    fn backward(&self, input: &ModelInput, cache: &Cache, dlogits: &[f64], g: &mut [f64]) {
        let p = &self.params[..];
        let a = &self.arch;
        let h = self.config.hidden;
        let d_head_in = a.head.backward(p, g, &cache.head_in, dlogits);
        let mut d_hf = vec![0.0; h];
        match (&a.branch, &cache.branch) {
            (Branch::Early { image_proj, comment, scorer }, BranchCache::Early { proj, states, attn }) => {
                add_into(&mut d_hf, &d_head_in[..h]);
                let du = &d_head_in[h..];
                let mut d_states = vec![vec![0.0; h]; states.len()];
                attend_backward(scorer, p, g, &cache.hf, states, attn, du, &mut d_hf, &mut d_states);
                let mut d_proj = vec![0.0; h];
                for ((s, ds), c) in states.iter().zip(&d_states).zip(&input.comments) {
                    let d_pre = tanh_backward(s, ds);
                    let d_in = comment.backward(p, g, &concat(proj, c), &d_pre);
                    add_into(&mut d_proj, &d_in[..h]);
                }
                image_proj.backward(p, g, &input.image, &d_proj);
            }
            (
                Branch::Late { image_proj, text_proj, comment, image_scorer, text_scorer },
                BranchCache::Late { hv, ht, states, image_attn, text_attn },
            ) => {
                let dv = &d_head_in[..h];
                let dt = &d_head_in[h..2 * h];
                add_into(&mut d_hf, &d_head_in[2 * h..]);
                let mut d_states = vec![vec![0.0; h]; states.len()];
                let mut d_hv = vec![0.0; h];
                let mut d_ht = vec![0.0; h];
                attend_backward(image_scorer, p, g, hv, states, image_attn, dv, &mut d_hv, &mut d_states);
                attend_backward(text_scorer, p, g, ht, states, text_attn, dt, &mut d_ht, &mut d_states);
                for ((s, ds), c) in states.iter().zip(&d_states).zip(&input.comments) {
                    comment.backward(p, g, c, &tanh_backward(s, ds));
                }
                image_proj.backward(p, g, &input.image, &d_hv);
                text_proj.backward(p, g, &input.text, &d_ht);
            }
            _ => unreachable!("cache built by the same architecture"),
        }
        let d_a1 = a.base2.backward(p, g, &cache.a1, &d_hf);
        a.base1.backward(p, g, &cache.x, &tanh_backward(&cache.a1, &d_a1));
    }

    /// Weighted sum of per-example losses and its gradient. Examples are
    /// processed in order, so the reduction is deterministic.
    pub fn loss_and_grad(&self, batch: &[WeightedExample<'_>]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for ex in batch {
            let cache = self.forward_cached(ex.input)?;
            let (loss, mut dlogits) = ex.target.loss_and_grad(&cache.logits)?;
            total += ex.weight * loss;
            dlogits.iter_mut().for_each(|d| *d *= ex.weight);
            self.backward(ex.input, &cache, &dlogits, &mut grad);
        }
        Ok((total, grad))
    }

    /// Loss only; used by finite differences.
    pub fn loss(&self, batch: &[WeightedExample<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let out = self.forward(ex.input)?;
            total += ex.weight * ex.target.loss_and_grad(&out.logits)?.0;
        }
        Ok(total)
    }
}

/// One term of a training objective: `weight * loss(target, model(input))`.
#[derive(Debug, Clone)]
pub struct WeightedExample<'a> {
    pub input: &'a ModelInput,
    pub target: Target,
    pub weight: f64,
}

/// Logits and attention weights for `post` with the given comments.
pub fn forward_classifier<'a>(
    model: &FusionClassifier,
    post: &PostRecord,
    comments: impl IntoIterator<Item = &'a CommentRecord>,
) -> Result<ForwardOutput> {
    model.forward(&ModelInput::new(post, comments))
}
