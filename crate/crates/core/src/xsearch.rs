//! Two-modality retrieval ranked by a fused similarity.
//!
//! Each modality has its own IVFPQ index over the wild posts. A query's
//! candidates are the posts that both indexes return among their top `R`;
//! candidates are ranked by `alpha * s_img + (1 - alpha) * s_txt`, where
//! `alpha` is estimated once per run from average top-`K` similarities
//! (see [`FusionWeights`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PostRecord;
use crate::vecindex::{search_exact, train_ivfpq, IvfPqIndex, IvfPqParams, SearchHit};
use crate::vector::dot;
use crate::{Error, Result};

/// Convex combination of the two modality similarities.
pub fn fuse_score(s_img: f64, s_txt: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * s_img + (1.0 - alpha) * s_txt)
}

/// The image/text trade-off and the statistics it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    /// Mean image similarity over the `M x K` rank grid.
    pub i_mean: f64,
    /// Mean text similarity over the `M x K` rank grid.
    pub t_mean: f64,
    #[serde(rename = "M")]
    pub queries: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

impl FusionWeights {
    /// Builds weights from per-query rank grids: `image[m][k]` and `text[m][k]`
    /// are the rank-`k` similarities of query `m` in each modality.
    pub fn from_grids(image: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Self> {
        let m = image.len();
        if m == 0 || text.len() != m {
            return Err(Error::Estimation(format!("grids need M >= 1 matching rows ({m} vs {})", text.len())));
        }
        let k = image[0].len();
        if k == 0 || image.iter().chain(text).any(|row| row.len() != k) {
            return Err(Error::Estimation("every grid row must hold K >= 1 similarities".into()));
        }
        let cells = (m * k) as f64;
        let i_mean = image.iter().flatten().sum::<f64>() / cells;
        let t_mean = text.iter().flatten().sum::<f64>() / cells;
        Self::from_means(i_mean, t_mean, m, k)
    }

    pub fn from_means(i_mean: f64, t_mean: f64, queries: usize, k: usize) -> Result<Self> {
        let total = i_mean + t_mean;
        if !total.is_finite() || total == 0.0 {
            return Err(Error::Estimation(format!("degenerate statistics: I_mean + T_mean = {total}")));
        }
        let alpha = t_mean / total;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Estimation(format!(
                "degenerate statistics: I_mean={i_mean}, T_mean={t_mean} give alpha={alpha} outside [0, 1]"
            )));
        }
        Ok(Self { alpha, i_mean, t_mean, queries, k })
    }

    /// Weights with a fixed `alpha` and no backing statistics.
    pub fn fixed(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha, i_mean: 1.0 - alpha, t_mean: alpha, queries: 0, k: 0 })
    }
}

/// The wild posts with one frozen index per modality. Ordinals are positions
/// in `posts`.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    posts: Vec<PostRecord>,
    image: IvfPqIndex,
    text: IvfPqIndex,
    image_matrix: Vec<f32>,
    text_matrix: Vec<f32>,
    by_id: HashMap<String, usize>,
}

fn flatten<'a>(rows: impl Iterator<Item = &'a [f32]>) -> Vec<f32> {
    rows.flat_map(|r| r.iter().copied()).collect()
}

/// Trains one index over a modality's vectors and adds them all.
pub fn build_modality_index(vectors: &[f32], dim: usize, params: &IvfPqParams) -> Result<IvfPqIndex> {
    let mut index = train_ivfpq(vectors, dim, params)?;
    index.add_batch(0, vectors)?;
    index.freeze();
    Ok(index)
}

impl RetrievalIndex {
    /// Wraps prebuilt indexes; each must hold exactly the ordinals `0..posts.len()`.
    pub fn new(posts: Vec<PostRecord>, image: IvfPqIndex, text: IvfPqIndex) -> Result<Self> {
        for (name, index) in [("image", &image), ("text", &text)] {
            if !index.is_trained() {
                return Err(Error::State(format!("{name} index is not trained")));
            }
            if index.len() != posts.len() || (0..posts.len()).any(|o| index.code_of(o).is_none()) {
                return Err(Error::State(format!(
                    "{name} index holds {} vectors but the wild set has {} posts",
                    index.len(),
                    posts.len()
                )));
            }
        }
        if let Some(p) = posts.first() {
            if p.image_vec.len() != image.dim() || p.text_vec.len() != text.dim() {
                return Err(Error::Schema("index dimensions do not match the wild posts".into()));
            }
        }
        let image_matrix = flatten(posts.iter().map(|p| p.image_vec.as_slice()));
        let text_matrix = flatten(posts.iter().map(|p| p.text_vec.as_slice()));
        let by_id = posts.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(Self { posts, image, text, image_matrix, text_matrix, by_id })
    }

    /// Trains and fills both indexes from `posts` (unit vectors).
    pub fn build(posts: Vec<PostRecord>, image: &IvfPqParams, text: &IvfPqParams) -> Result<Self> {
        let Some(first) = posts.first() else {
            return Err(Error::Training("cannot build a retrieval index over zero posts".into()));
        };
        let (di, dt) = (first.image_vec.len(), first.text_vec.len());
        let image_matrix = flatten(posts.iter().map(|p| p.image_vec.as_slice()));
        let text_matrix = flatten(posts.iter().map(|p| p.text_vec.as_slice()));
        let image_index = build_modality_index(&image_matrix, di, image)?;
        let text_index = build_modality_index(&text_matrix, dt, text)?;
        Self::new(posts, image_index, text_index)
    }

    pub fn posts(&self) -> &[PostRecord] {
        &self.posts
    }

    pub fn image_index(&self) -> &IvfPqIndex {
        &self.image
    }

    pub fn text_index(&self) -> &IvfPqIndex {
        &self.text
    }

    pub fn ordinal_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    fn exact_image(&self, o: usize, q: &[f32]) -> f64 {
        let d = self.image.dim();
        dot(&self.image_matrix[o * d..(o + 1) * d], q)
    }

    fn exact_text(&self, o: usize, q: &[f32]) -> f64 {
        let d = self.text.dim();
        dot(&self.text_matrix[o * d..(o + 1) * d], q)
    }

    /// Top-`r` hits per modality, skipping the query itself.
    fn modality_hits(
        &self,
        query: &PostRecord,
        r: usize,
        nprobe: usize,
        exact: bool,
    ) -> Result<(Vec<SearchHit>, Vec<SearchHit>)> {
        let self_ordinal = self.ordinal_of(&query.id);
        let want = r + usize::from(self_ordinal.is_some());
        let (img, txt) = if exact {
            (
                search_exact(&self.image_matrix, self.image.dim(), &query.image_vec, want)?,
                search_exact(&self.text_matrix, self.text.dim(), &query.text_vec, want)?,
            )
        } else {
            (self.image.search(&query.image_vec, want, nprobe)?, self.text.search(&query.text_vec, want, nprobe)?)
        };
        let keep = |hits: Vec<SearchHit>| -> Vec<SearchHit> {
            hits.into_iter().filter(|h| Some(h.ordinal) != self_ordinal).take(r).collect()
        };
        Ok((keep(img), keep(txt)))
    }
}

/// Knobs shared by estimation and retrieval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    /// Final cutoff: posts per query.
    pub k: usize,
    /// Per-modality candidate depth.
    pub r: usize,
    pub nprobe: usize,
    /// Recompute final retrieval scores from raw vectors instead of ADC.
    pub exact_rescore: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { k: 5, r: 1000, nprobe: 8, exact_rescore: true }
    }
}

/// How per-modality rank lists are produced during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scan {
    /// The IVFPQ indexes, as in retrieval.
    #[default]
    Ann,
    /// Brute-force cosine over the raw wild vectors.
    Exact,
}

/// Estimates `alpha` from the top-`K` similarities of every query.
///
/// Per-query statistics are gathered in parallel and reduced in query order.
/// `params.exact_rescore` is not used here; `scan` picks the search path.
pub fn estimate_alpha(
    queries: &[&PostRecord],
    index: &RetrievalIndex,
    params: &SearchParams,
    scan: Scan,
) -> Result<FusionWeights> {
    if queries.is_empty() {
        return Err(Error::Estimation("alpha estimation needs at least one query".into()));
    }
    let k = params.k;
    if k == 0 {
        return Err(Error::Estimation("alpha estimation needs K >= 1".into()));
    }
    let r = params.r.max(k);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = queries
        .par_iter()
        .map(|q| {
            let (img, txt) = index.modality_hits(q, r, params.nprobe, scan == Scan::Exact)?;
            if img.len() < k || txt.len() < k {
                return Err(Error::Estimation(format!(
                    "query {:?} has {} image / {} text hits, fewer than K={k}",
                    q.id,
                    img.len(),
                    txt.len()
                )));
            }
            Ok((img[..k].iter().map(|h| h.similarity).collect(), txt[..k].iter().map(|h| h.similarity).collect()))
        })
        .collect::<Result<_>>()?;
    let (image, text): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    FusionWeights::from_grids(&image, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateSource {
    #[serde(rename = "intersection")]
    Intersection,
    #[serde(rename = "union-fallback")]
    UnionFallback,
}

/// Candidate ordinals for one query, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub ordinals: Vec<usize>,
    pub source: CandidateSource,
    image_adc: BTreeMap<usize, f64>,
    text_adc: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    #[serde(skip)]
    pub ordinal: usize,
    #[serde(rename = "id")]
    pub post_id: String,
    pub s_img: f64,
    pub s_txt: f64,
    pub s_fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<RetrievalHit>,
    pub source: CandidateSource,
}

/// Intersects the per-modality top-`R` ordinal sets, falling back to their
/// union when fewer than `K` posts survive.
pub fn candidate_set(query: &PostRecord, index: &RetrievalIndex, params: &SearchParams) -> Result<Candidates> {
    let (img, txt) = index.modality_hits(query, params.r, params.nprobe, false)?;
    let image_adc: BTreeMap<usize, f64> = img.iter().map(|h| (h.ordinal, h.similarity)).collect();
    let text_adc: BTreeMap<usize, f64> = txt.iter().map(|h| (h.ordinal, h.similarity)).collect();
    let image_set: BTreeSet<usize> = image_adc.keys().copied().collect();
    let text_set: BTreeSet<usize> = text_adc.keys().copied().collect();
    let inter: Vec<usize> = image_set.intersection(&text_set).copied().collect();
    let (ordinals, source) = if inter.len() >= params.k {
        (inter, CandidateSource::Intersection)
    } else {
        (image_set.union(&text_set).copied().collect(), CandidateSource::UnionFallback)
    };
    Ok(Candidates { ordinals, source, image_adc, text_adc })
}

/// Ranks the candidates of `query` by fused score and keeps the top `K`.
pub fn retrieve_similar_posts(
    query: &PostRecord,
    index: &RetrievalIndex,
    weights: &FusionWeights,
    params: &SearchParams,
) -> Result<RetrievalResult> {
    if params.k == 0 {
        return Ok(RetrievalResult {
            query_id: query.id.clone(),
            hits: Vec::new(),
            source: CandidateSource::Intersection,
        });
    }
    let cands = candidate_set(query, index, params)?;
    let mut hits = cands
        .ordinals
        .iter()
        .map(|&o| {
            let (s_img, s_txt) = if params.exact_rescore {
                (index.exact_image(o, &query.image_vec), index.exact_text(o, &query.text_vec))
            } else {
                let s_img = match cands.image_adc.get(&o) {
                    Some(&s) => s,
                    None => index.image.adc_similarity(&query.image_vec, o)?.unwrap_or(f64::NEG_INFINITY),
                };
                let s_txt = match cands.text_adc.get(&o) {
                    Some(&s) => s,
                    None => index.text.adc_similarity(&query.text_vec, o)?.unwrap_or(f64::NEG_INFINITY),
                };
                (s_img, s_txt)
            };
            Ok(RetrievalHit {
                ordinal: o,
                post_id: index.posts[o].id.clone(),
                s_img,
                s_txt,
                s_fused: fuse_score(s_img, s_txt, weights.alpha)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| b.s_fused.total_cmp(&a.s_fused).then_with(|| a.post_id.cmp(&b.post_id)));
    hits.truncate(params.k);
    Ok(RetrievalResult { query_id: query.id.clone(), hits, source: cands.source })
}

/// [`retrieve_similar_posts`] over many queries in parallel; output order
/// follows `queries`.
pub fn retrieve_batch(
    queries: &[&PostRecord],
    index: &RetrievalIndex,
    weights: &FusionWeights,
    params: &SearchParams,
) -> Result<Vec<RetrievalResult>> {
    queries.par_iter().map(|q| retrieve_similar_posts(q, index, weights, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use proptest::prelude::*;

    #[test]
    fn fuse_score_cases() {
        assert_eq!(fuse_score(0.9, 0.2, 0.0).unwrap(), 0.2);
        assert_eq!(fuse_score(0.9, 0.2, 1.0).unwrap(), 0.9);
        assert!((fuse_score(0.5, 0.25, 0.4).unwrap() - 0.35).abs() < 1e-15);
        assert!(fuse_score(0.5, 0.5, 1.5).is_err());
        assert!(fuse_score(0.5, 0.5, -0.1).is_err());
    }

    #[test]
    fn alpha_from_grids() {
        let w = FusionWeights::from_grids(&[vec![0.6]], &[vec![0.3]]).unwrap();
        assert!((w.i_mean - 0.6).abs() < 1e-15 && (w.t_mean - 0.3).abs() < 1e-15);
        assert!((w.alpha - 1.0 / 3.0).abs() < 1e-12);

        let p = vec![vec![0.9, 0.7], vec![0.8, 0.6]];
        let q = vec![vec![0.5, 0.4], vec![0.3, 0.2]];
        let w = FusionWeights::from_grids(&p, &q).unwrap();
        // Independent summation.
        let i_mean = (0.9 + 0.7 + 0.8 + 0.6) / 4.0;
        let t_mean = (0.5 + 0.4 + 0.3 + 0.2) / 4.0;
        assert!((w.i_mean - 0.75).abs() < 1e-12 && (w.t_mean - 0.35).abs() < 1e-12);
        assert!((w.alpha - t_mean / (i_mean + t_mean)).abs() < 1e-9);
        assert!((w.alpha - 0.35 / 1.10).abs() < 1e-9);

        let sym = FusionWeights::from_grids(&p, &p).unwrap();
        assert_eq!(sym.alpha, 0.5);
        assert_eq!((sym.queries, sym.k), (2, 2));
    }

    #[test]
    fn degenerate_grids() {
        assert!(matches!(FusionWeights::from_grids(&[vec![0.5]], &[vec![-0.5]]), Err(Error::Estimation(_))));
        assert!(matches!(FusionWeights::from_grids(&[vec![-0.2]], &[vec![0.5]]), Err(Error::Estimation(_))));
        assert!(FusionWeights::from_grids(&[], &[]).is_err());
        assert!(FusionWeights::from_grids(&[vec![0.1, 0.2]], &[vec![0.1]]).is_err());
    }

    fn post(id: &str, image: Vec<f32>, text: Vec<f32>) -> PostRecord {
        PostRecord {
            id: id.into(),
            text: String::new(),
            image_vec: image,
            text_vec: text,
            comments: vec![],
            label: None,
            split: Split::Wild,
        }
    }

    fn one_post_index() -> RetrievalIndex {
        let wild = vec![post("w", vec![0.6, 0.8], vec![0.3, (0.91f32).sqrt()])];
        let p = IvfPqParams { nlist: 1, m: 1, ks: 1, kmeans_iters: 1, seed: 0 };
        RetrievalIndex::build(wild, &p, &p).unwrap()
    }

    #[test]
    fn single_query_single_rank_estimation() {
        let index = one_post_index();
        let mut q = post("q", vec![1.0, 0.0], vec![1.0, 0.0]);
        q.split = Split::Train;
        q.label = Some(0);
        let params = SearchParams { k: 1, r: 10, nprobe: 1, exact_rescore: false };
        let w = estimate_alpha(&[&q], &index, &params, Scan::Ann).unwrap();
        assert!((w.i_mean - 0.6).abs() < 1e-6 && (w.t_mean - 0.3).abs() < 1e-6);
        assert!((w.alpha - 1.0 / 3.0).abs() < 1e-6);

        let too_deep = SearchParams { k: 2, ..params };
        assert!(matches!(estimate_alpha(&[&q], &index, &too_deep, Scan::Ann), Err(Error::Estimation(_))));
        assert!(estimate_alpha(&[], &index, &params, Scan::Exact).is_err());
    }

    #[test]
    fn zero_k_gives_empty_result() {
        let index = one_post_index();
        let q = post("q", vec![1.0, 0.0], vec![1.0, 0.0]);
        let r = retrieve_similar_posts(
            &q,
            &index,
            &FusionWeights::fixed(0.5).unwrap(),
            &SearchParams { k: 0, ..Default::default() },
        )
        .unwrap();
        assert!(r.hits.is_empty());
    }

    #[test]
    fn self_hits_are_excluded() {
        let index = one_post_index();
        let q = index.posts()[0].clone();
        let params = SearchParams { k: 1, r: 5, nprobe: 1, exact_rescore: true };
        let r = retrieve_similar_posts(&q, &index, &FusionWeights::fixed(0.5).unwrap(), &params).unwrap();
        assert!(r.hits.is_empty());
    }

    #[test]
    fn mismatched_index_is_rejected() {
        let index = one_post_index();
        let posts = vec![index.posts()[0].clone(), post("x", vec![1.0, 0.0], vec![1.0, 0.0])];
        assert!(matches!(
            RetrievalIndex::new(posts, index.image_index().clone(), index.text_index().clone()),
            Err(Error::State(_))
        ));
    }

    proptest! {
        #[test]
        fn fused_score_is_convex(a in -1.0f64..1.0, b in -1.0f64..1.0, alpha in 0.0f64..=1.0) {
            let s = fuse_score(a, b, alpha).unwrap();
            prop_assert!(s >= a.min(b) - 1e-15 && s <= a.max(b) + 1e-15);
        }

        #[test]
        fn estimated_alpha_satisfies_invariant(
            p in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..6),
            q in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..6),
        ) {
            let m = p.len().min(q.len());
            let w = FusionWeights::from_grids(&p[..m], &q[..m]).unwrap();
            prop_assert!((w.alpha - w.t_mean / (w.i_mean + w.t_mean)).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&w.alpha));
        }
    }
}
