use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use xmc_core::consensus::{ConsensusEntry, ConsensusSet};
use xmc_core::corpus::{generate_synthetic_corpus, normalize_vectors, save_corpus, save_corpus_with_sidecars};
use xmc_core::neural::{grad_check, AdamW, ModelInput, SoftLabel, Target, WeightedExample};
use xmc_core::pipeline::consensus_with_fallback;
use xmc_core::selftrain::{evaluate, self_train_loop, EpochRecord, IterationReport};
use xmc_core::vecindex::IvfPqIndex;
use xmc_core::xsearch::{build_modality_index, estimate_alpha, retrieve_batch, Scan};
use xmc_core::{
    CommentRecord, Corpus, Error, EvalSet, FusionClassifier, FusionWeights, IvfPqParams, LabeledSet, MetricsReport,
    ModelConfig, PostRecord, QueryContext, Result, RetrievalIndex, RetrievalResult, Scheme, SearchParams,
    SelfTrainConfig, Split, SynthConfig, UnlabeledSet,
};

use crate::config::ConfigFile;
use crate::files::{
    load_normalized, open_output, post_lookup, read_json, read_jsonl, write_json, write_jsonl, AttentionLine,
    ConsensusItem, ConsensusLine,
};
use crate::*;

pub(crate) fn dispatch(command: Command, cfg: &ConfigFile) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, cfg),
        Command::Ingest(a) => ingest(a),
        Command::BuildIndex(a) => build_index(a, cfg),
        Command::EstimateAlpha(a) => estimate(a, cfg),
        Command::Retrieve(a) => retrieve(a, cfg),
        Command::Consensus(a) => consensus(a, cfg),
        Command::Train(a) => {
            if a.iterations.is_some() {
                return Err(Error::Argument("`train` has no iterations; use `selftrain`".into()));
            }
            train(a, cfg, Some(0))
        }
        Command::Selftrain(a) => train(a, cfg, None),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a, cfg),
    }
}

fn save(corpus: &Corpus, out: &Path, sidecars: bool) -> Result<()> {
    if sidecars {
        save_corpus_with_sidecars(corpus, out)
    } else {
        save_corpus(corpus, out)
    }
}

fn synth(a: SynthArgs, cfg: &ConfigFile) -> Result<()> {
    let d = SynthConfig::default();
    let sc = SynthConfig {
        classes: cfg.pick(a.classes, "classes", d.classes)?,
        train_per_class: cfg.pick(a.train_per_class, "train_per_class", d.train_per_class)?,
        val_per_class: cfg.pick(a.val_per_class, "val_per_class", d.val_per_class)?,
        test_per_class: cfg.pick(a.test_per_class, "test_per_class", d.test_per_class)?,
        wild_per_class: cfg.pick(a.wild_per_class, "wild_per_class", d.wild_per_class)?,
        image_dim: cfg.pick(a.image_dim, "image_dim", d.image_dim)?,
        text_dim: cfg.pick(a.text_dim, "text_dim", d.text_dim)?,
        spread: cfg.pick(a.spread, "spread", d.spread)?,
        comment_signal: cfg.pick(a.comment_signal, "comment_signal", d.comment_signal)?,
        comment_noise: cfg.pick(a.comment_noise, "comment_noise", d.comment_noise)?,
        max_comments: cfg.pick(a.max_comments, "max_comments", d.max_comments)?,
    };
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let corpus = normalize_vectors(generate_synthetic_corpus(&sc, seed)?)?;
    save(&corpus, &a.out, a.sidecars)?;
    log::info!("wrote {} posts to {}", corpus.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let corpus = load_normalized(&a.input)?;
    save(&corpus, &a.out, a.sidecars)?;
    write_json(None, &corpus.stats())?;
    Ok(())
}

fn wild_posts(corpus: &Corpus) -> Vec<PostRecord> {
    corpus.split(Split::Wild).cloned().collect()
}

fn build_index(a: BuildIndexArgs, cfg: &ConfigFile) -> Result<()> {
    let corpus = load_normalized(&a.corpus)?;
    let wild = wild_posts(&corpus);
    if wild.is_empty() {
        return Err(Error::Data("the corpus has no wild posts to index".into()));
    }
    let d = IvfPqParams::default();
    let params = IvfPqParams {
        nlist: cfg.pick(a.nlist, "nlist", d.nlist)?,
        m: cfg.pick(a.m, "m", d.m)?,
        ks: cfg.pick(a.ks, "ks", d.ks)?,
        kmeans_iters: cfg.pick(a.kmeans_iters, "kmeans_iters", d.kmeans_iters)?,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
    };
    let (dim, vectors): (usize, Vec<f32>) = match a.modality {
        Modality::Image => (corpus.dims.image, wild.iter().flat_map(|p| p.image_vec.iter().copied()).collect()),
        Modality::Text => (corpus.dims.text, wild.iter().flat_map(|p| p.text_vec.iter().copied()).collect()),
    };
    let index = build_modality_index(&vectors, dim, &params)?;
    index.save(&a.out)?;
    log::info!("indexed {} {:?} vectors into {} lists", index.len(), a.modality, index.nlist());
    Ok(())
}

fn open_index(inputs: &IndexInputs) -> Result<(Corpus, RetrievalIndex)> {
    let corpus = load_normalized(&inputs.corpus)?;
    let image = IvfPqIndex::load(&inputs.image_index)?;
    let text = IvfPqIndex::load(&inputs.text_index)?;
    let index = RetrievalIndex::new(wild_posts(&corpus), image, text)?;
    Ok((corpus, index))
}

fn search_params(
    flags: &SearchFlags,
    cfg: &ConfigFile,
    index: &RetrievalIndex,
    exact_rescore: bool,
) -> Result<SearchParams> {
    let d = SearchParams::default();
    let nlist = index.image_index().nlist().min(index.text_index().nlist());
    Ok(SearchParams {
        k: cfg.pick(flags.k, "k", d.k)?,
        r: cfg.pick(flags.r, "r", d.r)?,
        // The built-in default adapts to small indexes; explicit values are checked.
        nprobe: cfg.pick(flags.nprobe, "nprobe", d.nprobe.min(nlist))?,
        exact_rescore,
    })
}

fn parse_splits(list: &str) -> Result<Vec<Split>> {
    let splits = list
        .split(',')
        .map(|s| s.trim().parse::<Split>().map_err(|e| Error::Argument(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if splits.is_empty() {
        return Err(Error::Argument("no splits given".into()));
    }
    Ok(splits)
}

fn queries_in<'a>(corpus: &'a Corpus, splits: &[Split]) -> Vec<&'a PostRecord> {
    corpus.posts.iter().filter(|p| splits.contains(&p.split)).collect()
}

fn estimate(a: EstimateAlphaArgs, cfg: &ConfigFile) -> Result<()> {
    let (corpus, index) = open_index(&a.inputs)?;
    let params = search_params(&a.search, cfg, &index, false)?;
    let scan = match cfg.pick(a.scan, "scan", "ann".to_string())?.as_str() {
        "ann" => Scan::Ann,
        "exact" => Scan::Exact,
        other => return Err(Error::Argument(format!("unknown scan {other:?}; expected ann or exact"))),
    };
    let queries = queries_in(&corpus, &parse_splits(&a.splits)?);
    let weights = estimate_alpha(&queries, &index, &params, scan)?;
    eprintln!("alpha = {:.6} (image mean {:.6}, text mean {:.6})", weights.alpha, weights.i_mean, weights.t_mean);
    write_json(a.out.as_deref(), &weights)
}

fn retrieve(a: RetrieveArgs, cfg: &ConfigFile) -> Result<()> {
    let (corpus, index) = open_index(&a.inputs)?;
    let exact_rescore = cfg.pick(a.exact_rescore, "exact_rescore", true)?;
    let params = search_params(&a.search, cfg, &index, exact_rescore)?;
    let weights = match (cfg.pick_opt(a.alpha, "alpha")?, &a.weights) {
        (Some(alpha), _) => FusionWeights::fixed(alpha)?,
        (None, Some(path)) => read_json::<FusionWeights>(path)?,
        (None, None) => return Err(Error::Argument("retrieve needs --weights or --alpha".into())),
    };
    let queries = queries_in(&corpus, &parse_splits(&a.splits)?);
    let results = retrieve_batch(&queries, &index, &weights, &params)?;
    log::info!("retrieved for {} queries with alpha {:.6}", results.len(), weights.alpha);
    write_jsonl(a.out.as_deref(), &results)
}

fn lookup<'a>(posts: &HashMap<&str, &'a PostRecord>, id: &str) -> Result<&'a PostRecord> {
    posts.get(id).copied().ok_or_else(|| Error::Data(format!("post {id:?} is not in the corpus")))
}

fn consensus(a: ConsensusArgs, cfg: &ConfigFile) -> Result<()> {
    let corpus = load_normalized(&a.corpus)?;
    let posts = post_lookup(&corpus);
    let n = cfg.pick(a.n, "n", 5)?;
    let results: Vec<RetrievalResult> = read_jsonl(&a.retrieval)?;
    let lines = results
        .par_iter()
        .map(|r| {
            let query = lookup(&posts, &r.query_id)?;
            let retrieved = r.hits.iter().map(|h| lookup(&posts, &h.post_id).cloned()).collect::<Result<Vec<_>>>()?;
            let set = consensus_with_fallback(query, &retrieved, n)?;
            Ok(ConsensusLine {
                query_id: r.query_id.clone(),
                consensus: set
                    .entries
                    .iter()
                    .map(|e| ConsensusItem {
                        comment_id: e.comment.id.clone(),
                        text: e.comment.text.clone(),
                        q: e.score,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(a.out.as_deref(), &lines)
}

/// Comments by id across the corpus; `None` marks ids shared by different
/// comments.
type CommentIndex<'a> = HashMap<&'a str, Option<&'a CommentRecord>>;

fn comment_index(corpus: &Corpus) -> CommentIndex<'_> {
    let mut index: CommentIndex<'_> = HashMap::new();
    for c in corpus.posts.iter().flat_map(|p| &p.comments) {
        index
            .entry(c.id.as_str())
            .and_modify(|seen| {
                if seen.is_some_and(|s| s != c) {
                    *seen = None;
                }
            })
            .or_insert(Some(c));
    }
    index
}

/// Rebuilds a consensus set from its file form. Comments are looked up
/// among the query's and retrieved posts' comments first, then corpus-wide.
fn resolve_consensus(
    line: &ConsensusLine,
    query: &PostRecord,
    retrieved: &[PostRecord],
    all: &CommentIndex<'_>,
    n: usize,
) -> Result<ConsensusSet> {
    let local: HashMap<&str, &CommentRecord> =
        query.comments.iter().chain(retrieved.iter().flat_map(|p| &p.comments)).map(|c| (c.id.as_str(), c)).collect();
    let entries = line
        .consensus
        .iter()
        .map(|item| {
            let id = item.comment_id.as_str();
            let comment = match (local.get(id), all.get(id)) {
                (Some(c), _) | (None, Some(Some(c))) => *c,
                (None, Some(None)) => {
                    return Err(Error::Data(format!(
                        "query {:?}: consensus comment id {id:?} is ambiguous in the corpus",
                        line.query_id
                    )))
                }
                (None, None) => {
                    return Err(Error::Data(format!("query {:?}: consensus comment {id:?} not found", line.query_id)))
                }
            };
            Ok(ConsensusEntry { comment: comment.clone(), score: item.q })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusSet { entries, requested: n })
}

struct PipelineFiles<'a> {
    posts: HashMap<&'a str, &'a PostRecord>,
    comments: CommentIndex<'a>,
    retrieval: HashMap<String, RetrievalResult>,
    consensus: HashMap<String, ConsensusLine>,
}

impl<'a> PipelineFiles<'a> {
    fn load(corpus: &'a Corpus, retrieval: Option<&Path>, consensus: &Path) -> Result<Self> {
        let retrieval = match retrieval {
            Some(p) => read_jsonl::<RetrievalResult>(p)?.into_iter().map(|r| (r.query_id.clone(), r)).collect(),
            None => HashMap::new(),
        };
        let consensus = read_jsonl::<ConsensusLine>(consensus)?.into_iter().map(|c| (c.query_id.clone(), c)).collect();
        Ok(Self { posts: post_lookup(corpus), comments: comment_index(corpus), retrieval, consensus })
    }

    /// Contexts for every post of `split`, or `None` when the files cover
    /// none of them. Partial coverage is an error.
    fn contexts(
        &self,
        corpus: &Corpus,
        split: Split,
        with_retrieved: bool,
        n: usize,
    ) -> Result<Option<Vec<QueryContext>>> {
        let queries: Vec<&PostRecord> = corpus.split(split).collect();
        let covered = queries.iter().filter(|q| self.consensus.contains_key(&q.id)).count();
        if covered == 0 {
            return Ok(None);
        }
        if covered < queries.len() {
            return Err(Error::Data(format!("consensus file covers {covered} of {} {split} posts", queries.len())));
        }
        queries
            .into_iter()
            .map(|q| {
                let retrieved = if with_retrieved {
                    let r = self
                        .retrieval
                        .get(&q.id)
                        .ok_or_else(|| Error::Data(format!("no retrieval results for query {:?}", q.id)))?;
                    r.hits.iter().map(|h| lookup(&self.posts, &h.post_id).cloned()).collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                let consensus = resolve_consensus(&self.consensus[&q.id], q, &retrieved, &self.comments, n)?;
                Ok(QueryContext { query: q.clone(), retrieved, consensus })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    iterations: usize,
    best_val: Option<f64>,
    test_metrics: Option<MetricsReport>,
    per_iteration: &'a [IterationReport],
}

fn train(a: TrainArgs, cfg: &ConfigFile, forced_iterations: Option<usize>) -> Result<()> {
    let corpus = load_normalized(&a.corpus)?;
    let d = SelfTrainConfig::default();
    let config = SelfTrainConfig {
        iterations: match forced_iterations {
            Some(i) => i,
            None => cfg.pick(a.iterations, "iterations", d.iterations)?,
        },
        epochs_per_phase: cfg.pick(a.epochs, "epochs", d.epochs_per_phase)?,
        k: cfg.pick(None, "k", d.k)?,
        n: cfg.pick(None, "n", d.n)?,
        dropout_rate: cfg.pick(a.dropout_rate, "dropout_rate", d.dropout_rate)?,
        batch_size: cfg.pick(a.batch_size, "batch_size", d.batch_size)?,
        optimizer: AdamW {
            lr: cfg.pick(a.lr, "lr", d.optimizer.lr)?,
            weight_decay: cfg.pick(a.weight_decay, "weight_decay", d.optimizer.weight_decay)?,
            ..d.optimizer
        },
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        validation_metric: cfg.pick(
            a.validation_metric.map(|s| s.parse()).transpose()?,
            "validation_metric",
            d.validation_metric,
        )?,
        kl_weight: cfg.pick(a.kl_weight, "kl_weight", d.kl_weight)?,
        scheme: cfg.pick(a.scheme.map(|s| s.parse()).transpose()?, "scheme", d.scheme)?,
        hidden: cfg.pick(a.hidden, "hidden", d.hidden)?,
        attn_hidden: cfg.pick(a.attn_hidden, "attn_hidden", d.attn_hidden)?,
    };
    config.validate()?;

    let files = PipelineFiles::load(&corpus, Some(&a.retrieval), &a.consensus)?;
    let classes = corpus.class_count;
    let train = files
        .contexts(&corpus, Split::Train, true, config.n)?
        .ok_or_else(|| Error::Data("no consensus entries for the train split".into()))?;
    let labeled = LabeledSet::from_contexts(&train, classes)?;
    let unlabeled = UnlabeledSet::from_contexts(&train);
    let eval_set = |split| -> Result<Option<EvalSet>> {
        files.contexts(&corpus, split, false, config.n)?.map(|c| EvalSet::from_contexts(&c, classes)).transpose()
    };
    let val = eval_set(Split::Val)?.unwrap_or_default();
    let test = eval_set(Split::Test)?;
    if val.is_empty() {
        log::warn!("no validation data; each phase keeps its last epoch");
    }
    log::info!(
        "training on {} labeled and {} unlabeled posts, {} iterations",
        labeled.len(),
        unlabeled.len(),
        config.iterations
    );

    let outcome = self_train_loop(&labeled, &unlabeled, &val, &config)?;
    outcome.model.save(&a.out)?;

    let best_val =
        if val.is_empty() { None } else { Some(evaluate(&outcome.model, &val)?.get(config.validation_metric)) };
    let test_metrics = test.as_ref().map(|t| evaluate(&outcome.model, t)).transpose()?;
    let summary = Summary { iterations: config.iterations, best_val, test_metrics, per_iteration: &outcome.iterations };
    if let Some(path) = &a.report {
        write_report(path, &outcome.history, &summary)?;
    }
    write_json(None, &summary)
}

fn write_report(path: &Path, history: &[EpochRecord], summary: &Summary<'_>) -> Result<()> {
    let mut w = open_output(Some(path))?;
    for record in history {
        serde_json::to_writer(&mut w, record).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, summary).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let corpus = load_normalized(&a.corpus)?;
    let split: Split = a.split.parse().map_err(|e: Error| Error::Argument(e.to_string()))?;
    if !split.is_labeled() {
        return Err(Error::Argument(format!("split {split} has no labels to evaluate against")));
    }
    let model = FusionClassifier::load(&a.model)?;
    let mc = model.config();
    if (mc.image_dim, mc.text_dim, mc.classes) != (corpus.dims.image, corpus.dims.text, corpus.class_count) {
        return Err(Error::Data(format!(
            "model expects dims ({}, {}) and {} classes; corpus has ({}, {}) and {}",
            mc.image_dim, mc.text_dim, mc.classes, corpus.dims.image, corpus.dims.text, corpus.class_count
        )));
    }
    let files = PipelineFiles::load(&corpus, None, &a.consensus)?;
    let contexts = files
        .contexts(&corpus, split, false, 0)?
        .ok_or_else(|| Error::Data(format!("no consensus entries for the {split} split")))?;
    let set = EvalSet::from_contexts(&contexts, corpus.class_count)?;
    let metrics = evaluate(&model, &set)?;
    if let Some(path) = &a.attention {
        let lines = set
            .items
            .par_iter()
            .map(|item| {
                let out = model.forward(&item.input)?;
                Ok(AttentionLine { post_id: item.post_id.clone(), betas: out.betas, text_betas: out.text_betas })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(Some(path), &lines)?;
    }
    eprintln!("{split}: macro-F1 {:.4}, accuracy {:.4}", metrics.macro_f1, metrics.accuracy);
    write_json(a.out.as_deref(), &metrics)
}

fn gradcheck(a: GradcheckArgs, cfg: &ConfigFile) -> Result<()> {
    let scheme: Scheme = cfg.pick(a.scheme.map(|s| s.parse()).transpose()?, "scheme", Scheme::Late)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let config = ModelConfig {
        hidden: cfg.pick(a.hidden, "hidden", 16)?,
        attn_hidden: cfg.pick(a.attn_hidden, "attn_hidden", 32)?,
        ..ModelConfig::new(
            scheme,
            cfg.pick(a.image_dim, "image_dim", 8)?,
            cfg.pick(a.text_dim, "text_dim", 6)?,
            cfg.pick(a.classes, "classes", 3)?,
        )
    };
    if a.batch == 0 || a.comments == 0 {
        return Err(Error::Argument("batch and comments must be positive".into()));
    }
    if a.tolerance.is_nan() || a.tolerance <= 0.0 {
        return Err(Error::Argument("tolerance must be positive".into()));
    }
    let model = FusionClassifier::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut v = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let inputs: Vec<ModelInput> = (0..a.batch)
        .map(|_| ModelInput {
            image: v(config.image_dim),
            text: v(config.text_dim),
            comments: (0..a.comments).map(|_| v(config.text_dim)).collect(),
        })
        .collect();
    // Alternate hard and soft targets so both losses are exercised.
    let targets: Vec<Target> = (0..a.batch)
        .map(|i| {
            if i % 2 == 0 {
                Target::Label(i % config.classes)
            } else {
                Target::Soft(SoftLabel::from_logits(&v(config.classes)))
            }
        })
        .collect();
    let weight = 1.0 / a.batch as f64;
    let batch: Vec<WeightedExample<'_>> =
        inputs.iter().zip(targets).map(|(input, target)| WeightedExample { input, target, weight }).collect();
    let report = grad_check(&model, &batch, a.step)?;
    write_json(a.out.as_deref(), &report)?;
    if report.max_rel_error >= a.tolerance {
        return Err(Error::Training(format!(
            "gradient check failed: relative error {:.3e} at parameter {} exceeds {:.1e}",
            report.max_rel_error, report.worst_param, a.tolerance
        )));
    }
    eprintln!("gradient check passed: max relative error {:.3e}", report.max_rel_error);
    Ok(())
}
