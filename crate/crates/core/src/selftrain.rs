//! Teacher-student self-training: a teacher trained on labeled posts
//! soft-labels retrieved unlabeled posts, a fresh student learns from both
//! with comment dropout, and the student becomes the next teacher.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusSet;
use crate::corpus::PostRecord;
use crate::metrics::{compute_metrics, MetricsReport, ValidationMetric};
use crate::neural::{
    adamw_step, argmax, softmax, AdamW, AdamWState, FusionClassifier, ModelConfig, ModelInput, Scheme, SoftLabel,
    Target, WeightedExample,
};
use crate::pipeline::QueryContext;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub post: PostRecord,
    pub label: usize,
    pub consensus: ConsensusSet,
}

/// Labeled posts with their consensus comments.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub items: Vec<LabeledItem>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(items: Vec<LabeledItem>, classes: usize) -> Result<Self> {
        for item in &items {
            if item.label >= classes {
                return Err(Error::Data(format!(
                    "post {:?}: label {} out of range for {classes} classes",
                    item.post.id, item.label
                )));
            }
            if item.consensus.is_empty() {
                return Err(Error::Data(format!("post {:?} has no consensus comments", item.post.id)));
            }
        }
        Ok(Self { items, classes })
    }

    /// One item per labeled query.
    pub fn from_contexts(contexts: &[QueryContext], classes: usize) -> Result<Self> {
        let items = contexts
            .iter()
            .map(|c| {
                let label = c.query.label.ok_or_else(|| Error::Data(format!("query {:?} has no label", c.query.id)))?;
                Ok(LabeledItem { post: c.query.clone(), label, consensus: c.consensus.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, classes)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledItem {
    pub post: PostRecord,
    /// Inherited from the query that retrieved this post.
    pub consensus: ConsensusSet,
    pub source_query: String,
    pub soft_label: Option<SoftLabel>,
}

/// Retrieved posts, pseudo-labeled once a teacher exists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnlabeledSet {
    pub items: Vec<UnlabeledItem>,
}

impl UnlabeledSet {
    /// Every retrieved post of every query, sharing that query's consensus
    /// comments. Gold labels of retrieved posts are never copied.
    pub fn from_contexts(contexts: &[QueryContext]) -> Self {
        let items = contexts
            .iter()
            .flat_map(|c| {
                c.retrieved.iter().map(|p| UnlabeledItem {
                    post: PostRecord { label: None, ..p.clone() },
                    consensus: c.consensus.clone(),
                    source_query: c.query.id.clone(),
                    soft_label: None,
                })
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub post_id: String,
    pub input: ModelInput,
    pub label: usize,
}

/// Held-out posts with full consensus comments, for model selection and
/// testing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
    pub classes: usize,
}

impl EvalSet {
    pub fn from_labeled(set: &LabeledSet) -> Self {
        let items = set
            .items
            .iter()
            .map(|i| EvalItem {
                post_id: i.post.id.clone(),
                input: ModelInput::new(&i.post, i.consensus.comments()),
                label: i.label,
            })
            .collect();
        Self { items, classes: set.classes }
    }

    pub fn from_contexts(contexts: &[QueryContext], classes: usize) -> Result<Self> {
        Ok(Self::from_labeled(&LabeledSet::from_contexts(contexts, classes)?))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Predicted class per item, in order.
pub fn predict(model: &FusionClassifier, inputs: &[&ModelInput]) -> Result<Vec<usize>> {
    inputs.par_iter().map(|x| Ok(argmax(&model.forward(x)?.logits))).collect()
}

pub fn evaluate(model: &FusionClassifier, set: &EvalSet) -> Result<MetricsReport> {
    let inputs: Vec<&ModelInput> = set.items.iter().map(|i| &i.input).collect();
    let preds = predict(model, &inputs)?;
    let golds: Vec<usize> = set.items.iter().map(|i| i.label).collect();
    compute_metrics(&preds, &golds, set.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub iterations: usize,
    pub epochs_per_phase: usize,
    /// Retrieved posts per query.
    pub k: usize,
    /// Consensus comments per query.
    pub n: usize,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    pub validation_metric: ValidationMetric,
    /// Weight of the distillation term relative to cross-entropy.
    pub kl_weight: f64,
    pub scheme: Scheme,
    pub hidden: usize,
    pub attn_hidden: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            epochs_per_phase: 10,
            k: 5,
            n: 5,
            dropout_rate: 0.5,
            batch_size: 16,
            optimizer: AdamW::default(),
            seed: 0,
            validation_metric: ValidationMetric::MacroF1,
            kl_weight: 1.0,
            scheme: Scheme::Late,
            hidden: 16,
            attn_hidden: 32,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.k == 0 || self.n == 0 {
            return Err(Error::Config("K and N must be positive".into()));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight must be finite and non-negative, got {}", self.kl_weight)));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        Ok(())
    }

    pub fn model_config(&self, image_dim: usize, text_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            attn_hidden: self.attn_hidden,
            ..ModelConfig::new(self.scheme, image_dim, text_dim, classes)
        }
    }

    /// Model shapes for the posts in `set`.
    pub fn model_config_for(&self, set: &LabeledSet) -> Result<ModelConfig> {
        let first = set.items.first().ok_or_else(|| Error::Training("labeled set is empty".into()))?;
        Ok(self.model_config(first.post.image_vec.len(), first.post.text_vec.len(), set.classes))
    }
}

/// Indices of the comments that survive dropout: each is dropped
/// independently with probability `rate`; if none survive, one is kept
/// uniformly at random.
pub fn dropout_keep(n: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Argument("cannot drop comments from an empty set".into()));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let keep: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() >= rate).collect();
    if keep.is_empty() {
        return Ok(vec![rng.random_range(0..n)]);
    }
    Ok(keep)
}

pub fn drop_comments(comments: &ConsensusSet, rate: f64, rng: &mut impl Rng) -> Result<ConsensusSet> {
    let keep = dropout_keep(comments.len(), rate, rng)?;
    Ok(ConsensusSet {
        entries: keep.into_iter().map(|i| comments.entries[i].clone()).collect(),
        requested: comments.requested,
    })
}

/// Soft labels from `teacher` with full comment sets. Items without
/// comments are dropped from the result and counted.
pub fn pseudo_label(teacher: &FusionClassifier, unlabeled: &UnlabeledSet) -> Result<(UnlabeledSet, usize)> {
    let labeled: Vec<Option<UnlabeledItem>> = unlabeled
        .items
        .par_iter()
        .map(|item| {
            if item.consensus.is_empty() {
                return Ok(None);
            }
            let out = teacher.forward(&ModelInput::new(&item.post, item.consensus.comments()))?;
            let probs = softmax(&out.logits);
            Ok(Some(UnlabeledItem { soft_label: Some(SoftLabel { probs }), ..item.clone() }))
        })
        .collect::<Result<_>>()?;
    let skipped = labeled.iter().filter(|x| x.is_none()).count();
    if skipped > 0 {
        log::warn!("pseudo-labeling skipped {skipped} unlabeled items with no consensus comments");
    }
    Ok((UnlabeledSet { items: labeled.into_iter().flatten().collect() }, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub iteration: usize,
    pub phase: Role,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when there is no validation data.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: FusionClassifier,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_LABELED_ORDER: u64 = 2;
const STREAM_UNLABELED_ORDER: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

fn maybe_drop(input: &ModelInput, rate: f64, rng: &mut ChaCha8Rng) -> Result<ModelInput> {
    let keep = dropout_keep(input.comments.len(), rate, rng)?;
    Ok(input.subset(&keep))
}

/// Trains `model` for `config.epochs_per_phase` epochs and returns the epoch
/// checkpoint with the best validation score (earliest on ties; the last
/// epoch when `validation` is empty).
///
/// Teachers see full comment sets and plain cross-entropy on `labeled`.
/// Students add `kl_weight` times the mean KL to the teacher's soft labels
/// over an unlabeled batch, and see dropped comments on every training
/// input. Each epoch has `ceil(|L| / batch_size)` steps; unlabeled batches
/// are sized so the same number of steps covers `unlabeled` once.
pub fn train_phase(
    model: FusionClassifier,
    labeled: &LabeledSet,
    unlabeled: Option<&UnlabeledSet>,
    validation: &EvalSet,
    config: &SelfTrainConfig,
    role: Role,
    iteration: usize,
) -> Result<PhaseOutcome> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Training("labeled set is empty".into()));
    }
    if role == Role::Teacher && unlabeled.is_some() {
        return Err(Error::State("a teacher trains on labeled data only".into()));
    }
    let unlabeled = unlabeled.map(|u| u.items.as_slice()).unwrap_or(&[]);
    let soft: Vec<&SoftLabel> = unlabeled
        .iter()
        .map(|u| {
            u.soft_label
                .as_ref()
                .ok_or_else(|| Error::State(format!("unlabeled post {:?} has no pseudo-label", u.post.id)))
        })
        .collect::<Result<_>>()?;
    if config.epochs_per_phase == 0 {
        return Ok(PhaseOutcome { model, history: Vec::new(), best_epoch: None, best_val: None });
    }

    let l_inputs: Vec<ModelInput> =
        labeled.items.iter().map(|i| ModelInput::new(&i.post, i.consensus.comments())).collect();
    let u_inputs: Vec<ModelInput> =
        unlabeled.iter().map(|i| ModelInput::new(&i.post, i.consensus.comments())).collect();
    let rate = if role == Role::Student { config.dropout_rate } else { 0.0 };

    let it = iteration as u64;
    let mut l_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_LABELED_ORDER, it));
    let mut u_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_UNLABELED_ORDER, it));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_DROPOUT, it));

    let steps = labeled.len().div_ceil(config.batch_size);
    let u_batch = u_inputs.len().div_ceil(steps);
    let mut l_order: Vec<usize> = (0..l_inputs.len()).collect();
    let mut u_order: Vec<usize> = (0..u_inputs.len()).collect();

    let mut model = model;
    let mut opt_state = AdamWState::new(model.num_params());
    let mut history = Vec::with_capacity(config.epochs_per_phase);
    let mut best: Option<(FusionClassifier, usize, Option<f64>)> = None;

    for epoch in 1..=config.epochs_per_phase {
        l_order.shuffle(&mut l_rng);
        u_order.shuffle(&mut u_rng);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let l_idx = &l_order[step * config.batch_size..((step + 1) * config.batch_size).min(l_order.len())];
            let u_lo = (step * u_batch).min(u_order.len());
            let u_idx = &u_order[u_lo..(u_lo + u_batch).min(u_order.len())];

            let mut inputs = Vec::with_capacity(l_idx.len() + u_idx.len());
            for &i in l_idx {
                inputs.push(if rate > 0.0 {
                    maybe_drop(&l_inputs[i], rate, &mut drop_rng)?
                } else {
                    l_inputs[i].clone()
                });
            }
            for &i in u_idx {
                inputs.push(maybe_drop(&u_inputs[i], rate, &mut drop_rng)?);
            }
            let l_weight = 1.0 / l_idx.len() as f64;
            let u_weight = if u_idx.is_empty() { 0.0 } else { config.kl_weight / u_idx.len() as f64 };
            let batch: Vec<WeightedExample<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(j, input)| {
                    if j < l_idx.len() {
                        WeightedExample {
                            input,
                            target: Target::Label(labeled.items[l_idx[j]].label),
                            weight: l_weight,
                        }
                    } else {
                        let u = u_idx[j - l_idx.len()];
                        WeightedExample { input, target: Target::Soft(soft[u].clone()), weight: u_weight }
                    }
                })
                .collect();

            let (loss, grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} ({role:?}, iteration {iteration}, epoch {epoch}, step {step})"
                )));
            }
            adamw_step(model.params_mut(), &grad, &mut opt_state, &config.optimizer)?;
            loss_sum += loss;
        }

        let val = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, validation)?.get(config.validation_metric))
        };
        let train_loss = loss_sum / steps as f64;
        log::debug!("{role:?} iteration {iteration} epoch {epoch}: loss {train_loss:.6} val {val:?}");
        history.push(EpochRecord { iteration, phase: role, epoch, train_loss, val_metric: val });

        let improved = match (&best, val) {
            (None, _) => true,
            (Some((_, _, Some(b))), Some(v)) => v > *b,
            (Some(_), None) => true,
            (Some((_, _, None)), Some(_)) => true,
        };
        if improved {
            best = Some((model.clone(), epoch, val));
        }
    }
    let (model, epoch, val) = best.expect("at least one epoch ran");
    Ok(PhaseOutcome { model, history, best_epoch: Some(epoch), best_val: val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub teacher_val: Option<f64>,
    pub student_val: Option<f64>,
    pub pseudo_labeled: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub model: FusionClassifier,
    pub iterations: Vec<IterationReport>,
    pub history: Vec<EpochRecord>,
}

/// Fresh parameters for the model trained at `slot`: 0 is the first teacher,
/// `i + 1` the student of iteration `i`.
pub fn initial_model(model_config: ModelConfig, config: &SelfTrainConfig, slot: usize) -> Result<FusionClassifier> {
    FusionClassifier::new(model_config, derive_seed(config.seed, STREAM_INIT, slot as u64))
}

/// Teacher on `labeled`, then `config.iterations` rounds of pseudo-labeling
/// and student training; each round's best student becomes the next
/// teacher and is fine-tuned on `labeled` before labeling again. With zero
/// iterations the result is the first teacher.
pub fn self_train_loop(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    validation: &EvalSet,
    config: &SelfTrainConfig,
) -> Result<SelfTrainOutcome> {
    config.validate()?;
    let model_config = config.model_config_for(labeled)?;
    let mut history = Vec::new();
    let mut reports = Vec::with_capacity(config.iterations);

    let first = initial_model(model_config, config, 0)?;
    let phase = train_phase(first, labeled, None, validation, config, Role::Teacher, 0)?;
    history.extend(phase.history);
    let mut teacher = phase.model;
    let mut teacher_val = phase.best_val;

    for iteration in 0..config.iterations {
        if iteration > 0 {
            let phase = train_phase(teacher, labeled, None, validation, config, Role::Teacher, iteration)?;
            history.extend(phase.history);
            teacher = phase.model;
            teacher_val = phase.best_val;
        }
        let (pseudo, skipped) = pseudo_label(&teacher, unlabeled)?;
        let student = initial_model(model_config, config, iteration + 1)?;
        let phase = train_phase(student, labeled, Some(&pseudo), validation, config, Role::Student, iteration)?;
        history.extend(phase.history);
        reports.push(IterationReport {
            iteration,
            teacher_val,
            student_val: phase.best_val,
            pseudo_labeled: pseudo.len(),
            skipped,
        });
        teacher = phase.model;
    }
    Ok(SelfTrainOutcome { model: teacher, iterations: reports, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::ConsensusEntry;
    use crate::corpus::{generate_synthetic_corpus, CommentRecord, Split, SynthConfig};
    use crate::neural::kl_loss;

    fn set_of(n: usize) -> ConsensusSet {
        ConsensusSet {
            entries: (0..n)
                .map(|i| ConsensusEntry {
                    comment: CommentRecord { id: format!("c{i}"), text: String::new(), vec: vec![1.0, 0.0] },
                    score: 1.0,
                })
                .collect(),
            requested: n,
        }
    }

    /// Labeled, unlabeled and validation sets where each post's consensus
    /// is its own comments and each labeled post "retrieves" two wild posts.
    fn toy_data(seed: u64) -> (LabeledSet, UnlabeledSet, EvalSet) {
        let cfg = SynthConfig {
            train_per_class: 12,
            val_per_class: 6,
            test_per_class: 0,
            wild_per_class: 12,
            image_dim: 8,
            text_dim: 6,
            max_comments: 3,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, seed).unwrap();
        let wild: Vec<PostRecord> = corpus.split(Split::Wild).cloned().collect();
        let ctx = |split: Split| -> Vec<QueryContext> {
            corpus
                .split(split)
                .enumerate()
                .map(|(i, p)| {
                    let retrieved = vec![wild[(2 * i) % wild.len()].clone(), wild[(2 * i + 1) % wild.len()].clone()];
                    let consensus = crate::pipeline::consensus_with_fallback(p, std::slice::from_ref(p), 5).unwrap();
                    QueryContext { query: p.clone(), retrieved, consensus }
                })
                .collect()
        };
        let train = ctx(Split::Train);
        let labeled = LabeledSet::from_contexts(&train, 2).unwrap();
        let unlabeled = UnlabeledSet::from_contexts(&train);
        let val = EvalSet::from_contexts(&ctx(Split::Val), 2).unwrap();
        (labeled, unlabeled, val)
    }

    fn small_config() -> SelfTrainConfig {
        SelfTrainConfig {
            iterations: 1,
            epochs_per_phase: 3,
            batch_size: 8,
            hidden: 4,
            attn_hidden: 4,
            optimizer: AdamW { lr: 1e-2, ..AdamW::default() },
            seed: 3,
            ..SelfTrainConfig::default()
        }
    }

    #[test]
    fn dropout_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = set_of(5);
        assert_eq!(drop_comments(&s, 0.0, &mut rng).unwrap(), s);
        for rate in [0.0, 0.5, 0.99] {
            assert_eq!(drop_comments(&set_of(1), rate, &mut rng).unwrap(), set_of(1));
        }
        assert!(matches!(drop_comments(&set_of(0), 0.5, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(drop_comments(&s, 1.0, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(drop_comments(&s, -0.1, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_keeps_order_and_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = dropout_keep(5, 0.5, &mut rng).unwrap();
            assert!(!k.is_empty());
            assert!(k.windows(2).all(|w| w[0] < w[1]));
            assert!(k.iter().all(|&i| i < 5));
        }
    }

    #[test]
    fn unlabeled_items_share_their_query_consensus() {
        let (labeled, unlabeled, _) = toy_data(1);
        assert_eq!(unlabeled.len(), 2 * labeled.len());
        for u in &unlabeled.items {
            let q = labeled.items.iter().find(|l| l.post.id == u.source_query).unwrap();
            let ids = |s: &ConsensusSet| s.comments().map(|c| c.id.clone()).collect::<Vec<_>>();
            assert_eq!(ids(&u.consensus), ids(&q.consensus));
            assert!(u.post.label.is_none() && u.soft_label.is_none());
        }
    }

    #[test]
    fn pseudo_labels_match_direct_forward() {
        let (labeled, unlabeled, _) = toy_data(2);
        let cfg = small_config();
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let (out, skipped) = pseudo_label(&model, &unlabeled).unwrap();
        assert_eq!((out.len(), skipped), (unlabeled.len(), 0));
        for (item, src) in out.items.iter().zip(&unlabeled.items) {
            let t = &item.soft_label.as_ref().unwrap().probs;
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-6 && t.iter().all(|&p| p >= 0.0));
            let direct = softmax(&model.forward(&ModelInput::new(&src.post, src.consensus.comments())).unwrap().logits);
            for (a, b) in t.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pseudo_label_skips_items_without_comments() {
        let (labeled, mut unlabeled, _) = toy_data(2);
        unlabeled.items[0].consensus = set_of(0);
        let cfg = small_config();
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let (out, skipped) = pseudo_label(&model, &unlabeled).unwrap();
        assert_eq!((out.len(), skipped), (unlabeled.len() - 1, 1));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (labeled, _, val) = toy_data(3);
        let cfg = SelfTrainConfig { epochs_per_phase: 0, ..small_config() };
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let out = train_phase(model.clone(), &labeled, None, &val, &cfg, Role::Teacher, 0).unwrap();
        assert_eq!(out.model.params(), model.params());
        assert!(out.history.is_empty());
    }

    #[test]
    fn student_without_unlabeled_data_or_dropout_matches_teacher() {
        let (labeled, _, val) = toy_data(4);
        let cfg = SelfTrainConfig { dropout_rate: 0.0, ..small_config() };
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let t = train_phase(model.clone(), &labeled, None, &val, &cfg, Role::Teacher, 0).unwrap();
        let empty = UnlabeledSet::default();
        let s = train_phase(model, &labeled, Some(&empty), &val, &cfg, Role::Student, 0).unwrap();
        assert_eq!(t.model.params(), s.model.params());
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.epoch, r.train_loss, r.val_metric)).collect::<Vec<_>>();
        assert_eq!(strip(&t.history), strip(&s.history));
    }

    #[test]
    fn teacher_training_reduces_cross_entropy() {
        let (labeled, _, _) = toy_data(5);
        let cfg = SelfTrainConfig { epochs_per_phase: 10, ..small_config() };
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let ce = |m: &FusionClassifier| {
            let inputs: Vec<ModelInput> =
                labeled.items.iter().map(|i| ModelInput::new(&i.post, i.consensus.comments())).collect();
            let w = 1.0 / inputs.len() as f64;
            let batch: Vec<WeightedExample<'_>> = inputs
                .iter()
                .zip(&labeled.items)
                .map(|(input, i)| WeightedExample { input, target: Target::Label(i.label), weight: w })
                .collect();
            m.loss(&batch).unwrap()
        };
        let before = ce(&model);
        let out = train_phase(model, &labeled, None, &EvalSet::default(), &cfg, Role::Teacher, 0).unwrap();
        assert!(ce(&out.model) < before);
        assert_eq!(out.best_epoch, Some(10));
    }

    #[test]
    fn returned_checkpoint_is_the_best_validation_epoch() {
        let (labeled, _, val) = toy_data(6);
        let cfg = SelfTrainConfig { epochs_per_phase: 6, ..small_config() };
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let out = train_phase(model, &labeled, None, &val, &cfg, Role::Teacher, 0).unwrap();
        let scores: Vec<f64> = out.history.iter().map(|r| r.val_metric.unwrap()).collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == best).unwrap() + 1;
        assert_eq!(out.best_epoch, Some(first));
        assert_eq!(evaluate(&out.model, &val).unwrap().macro_f1, best);
    }

    #[test]
    fn phase_errors() {
        let (labeled, unlabeled, val) = toy_data(7);
        let cfg = small_config();
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let empty = LabeledSet { items: vec![], classes: 2 };
        assert!(matches!(
            train_phase(model.clone(), &empty, None, &val, &cfg, Role::Teacher, 0),
            Err(Error::Training(_))
        ));
        assert!(matches!(
            train_phase(model.clone(), &labeled, Some(&unlabeled), &val, &cfg, Role::Student, 0),
            Err(Error::State(_))
        ));
        assert!(matches!(
            train_phase(model, &labeled, Some(&UnlabeledSet::default()), &val, &cfg, Role::Teacher, 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn labeled_set_validation() {
        let (labeled, _, _) = toy_data(8);
        let mut items = labeled.items.clone();
        items[0].consensus = set_of(0);
        assert!(matches!(LabeledSet::new(items, 2), Err(Error::Data(_))));
        let mut items = labeled.items;
        items[0].label = 2;
        assert!(matches!(LabeledSet::new(items, 2), Err(Error::Data(_))));
    }

    #[test]
    fn zero_iterations_is_the_base_teacher() {
        let (labeled, unlabeled, val) = toy_data(9);
        let cfg = SelfTrainConfig { iterations: 0, ..small_config() };
        let out = self_train_loop(&labeled, &unlabeled, &val, &cfg).unwrap();
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let base = train_phase(model, &labeled, None, &val, &cfg, Role::Teacher, 0).unwrap();
        assert_eq!(out.model.params(), base.model.params());
        assert!(out.iterations.is_empty());
    }

    #[test]
    fn loop_promotes_the_student_and_is_deterministic() {
        let (labeled, unlabeled, val) = toy_data(10);
        let cfg = SelfTrainConfig { iterations: 2, ..small_config() };
        let a = self_train_loop(&labeled, &unlabeled, &val, &cfg).unwrap();
        let b = self_train_loop(&labeled, &unlabeled, &val, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history, b.history);
        assert_eq!(a.iterations.len(), 2);
        // Replay the last iteration by hand: the result is its student.
        let mc = cfg.model_config_for(&labeled).unwrap();
        let mut teacher =
            train_phase(initial_model(mc, &cfg, 0).unwrap(), &labeled, None, &val, &cfg, Role::Teacher, 0)
                .unwrap()
                .model;
        for it in 0..2 {
            if it > 0 {
                teacher = train_phase(teacher, &labeled, None, &val, &cfg, Role::Teacher, it).unwrap().model;
            }
            let (pseudo, _) = pseudo_label(&teacher, &unlabeled).unwrap();
            let student = initial_model(mc, &cfg, it + 1).unwrap();
            teacher = train_phase(student, &labeled, Some(&pseudo), &val, &cfg, Role::Student, it).unwrap().model;
        }
        assert_eq!(teacher.params(), a.model.params());
        let phases: Vec<(usize, Role)> =
            a.history.iter().filter(|r| r.epoch == 1).map(|r| (r.iteration, r.phase)).collect();
        assert_eq!(phases, vec![(0, Role::Teacher), (0, Role::Student), (1, Role::Teacher), (1, Role::Student)]);
    }

    #[test]
    fn kl_term_only_adds_to_the_objective() {
        let (labeled, unlabeled, _) = toy_data(11);
        let cfg = small_config();
        let model = initial_model(cfg.model_config_for(&labeled).unwrap(), &cfg, 0).unwrap();
        let (pseudo, _) =
            pseudo_label(&initial_model(model.config().to_owned(), &cfg, 9).unwrap(), &unlabeled).unwrap();
        for u in &pseudo.items {
            let logits = model.forward(&ModelInput::new(&u.post, u.consensus.comments())).unwrap().logits;
            assert!(kl_loss(u.soft_label.as_ref().unwrap(), &logits) >= 0.0);
        }
    }
}
