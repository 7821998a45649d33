//! Gallery ranking, retrieval metrics and wikification accuracy.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::checkpoint::config_hash;
use crate::data::corpus::{Corpus, Split, Tag};
use crate::error::{Error, Result};
use crate::model::{Ablation, JointInputs, Kramt};
use crate::retrieval::{argmax, cosine, fuse_scores, FusionConfig, FusionMode};
use crate::train::{RetrievalMetrics, Tokenized};

/// Fraction of ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("recall of an empty rank list"));
    }
    if k == 0 {
        return Err(Error::invalid("recall needs k >= 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Median rank; the lower middle element for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    if ranks.is_empty() {
        return Err(Error::invalid("median of an empty rank list"));
    }
    let mut v = ranks.to_vec();
    let mid = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    Ok(*m)
}

pub fn metrics(ranks: &[usize]) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics {
        r1: recall_at_k(ranks, 1)?,
        r5: recall_at_k(ranks, 5)?,
        r10: recall_at_k(ranks, 10)?,
        mdr: median_rank(ranks)? as f64,
    })
}

/// Gallery positions by descending score, ties by ascending image id.
pub fn order_by_score(scores: &[f64], image_ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| image_ids[a].cmp(image_ids[b]))
    });
    order
}

/// 1-based rank of `gt` without sorting: one plus the number of images that
/// outrank it.
pub fn rank_of(scores: &[f64], image_ids: &[&str], gt: usize) -> usize {
    let s = scores[gt];
    1 + (0..scores.len())
        .filter(|&i| {
            i != gt && (scores[i].total_cmp(&s).is_gt() || (scores[i] == s && image_ids[i] < image_ids[gt]))
        })
        .count()
}

/// Fraction of pairs whose ground-truth entity is among the first `k`
/// entries of its fused candidate ranking. Pairs without a ground truth
/// count as misses.
pub fn wikification_accuracy(outcomes: &[LinkOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::invalid("wikification accuracy of no pairs"));
    }
    let hit = |o: &&LinkOutcome| {
        o.gt
            .as_ref()
            .is_some_and(|gt| o.ranked.iter().take(k).any(|e| e == gt))
    };
    Ok(outcomes.iter().filter(hit).count() as f64 / outcomes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Full,
    NoKnowledge,
    NoVision,
    Oracle,
    KnowledgeOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Full,
        EvalMode::NoKnowledge,
        EvalMode::NoVision,
        EvalMode::Oracle,
        EvalMode::KnowledgeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::NoKnowledge => "no_knowledge",
            EvalMode::NoVision => "no_vision",
            EvalMode::Oracle => "oracle",
            EvalMode::KnowledgeOnly => "knowledge_only",
        }
    }

    fn fusion_mode(self) -> FusionMode {
        match self {
            EvalMode::NoKnowledge => FusionMode::None,
            EvalMode::Oracle => FusionMode::Oracle,
            _ => FusionMode::Argmax,
        }
    }

    fn ablation(self) -> Ablation {
        Ablation {
            no_knowledge: self == EvalMode::NoKnowledge,
            no_vision: self == EvalMode::NoVision,
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown evaluation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub fusion: FusionConfig,
    /// Worker threads for gallery scoring; 0 uses every core.
    pub threads: usize,
    /// Images scored per forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Full,
            fusion: FusionConfig::default(),
            threads: 0,
            chunk: 64,
        }
    }
}

/// One candidate ranking produced by fusion, with the image's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutcome {
    pub ranked: Vec<String>,
    pub gt: Option<String>,
}

struct Encoded {
    features: Vec<f64>,
    mask: Vec<bool>,
    pooled: Vec<f64>,
}

struct Projected {
    features: Vec<f64>,
    mask: Vec<bool>,
}

/// Text encodings of queries and knowledge and region projections, computed
/// once per model snapshot.
pub struct FeatureCache {
    queries: HashMap<usize, Encoded>,
    knowledge: Vec<Encoded>,
    regions: HashMap<usize, Projected>,
}

fn encode_texts(model: &Kramt, seqs: &[&crate::text::TokenSequence]) -> Result<Vec<Encoded>> {
    let mut out = Vec::with_capacity(seqs.len());
    let d = model.config.d;
    for chunk in seqs.chunks(64) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let o = model.text.forward(&mut g, &p, chunk)?;
        let feats = g.value(o.features);
        let pooled = g.value(o.pooled);
        for (i, _) in chunk.iter().enumerate() {
            out.push(Encoded {
                features: feats[i * o.len * d..(i + 1) * o.len * d].to_vec(),
                mask: o.mask[i * o.len..(i + 1) * o.len].to_vec(),
                pooled: pooled[i * d..(i + 1) * d].to_vec(),
            });
        }
    }
    Ok(out)
}

impl FeatureCache {
    pub fn build(model: &Kramt, corpus: &Corpus, tokens: &Tokenized, queries: &[usize], images: &[usize]) -> Result<Self> {
        let qs: Vec<_> = queries.iter().map(|&q| &tokens.queries[q]).collect();
        let queries_enc = queries.iter().copied().zip(encode_texts(model, &qs)?).collect();
        let ks: Vec<_> = tokens.knowledge.iter().collect();
        let knowledge = encode_texts(model, &ks)?;
        let d = model.config.d;
        let n = model.config.regions;
        let mut regions = HashMap::new();
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let sets: Vec<_> = chunk.iter().map(|&i| &corpus.images[i].regions).collect();
            let (v, mask) = model.encode_regions(&mut g, &p, &sets)?;
            let vals = g.value(v);
            for (j, &img) in chunk.iter().enumerate() {
                regions.insert(
                    img,
                    Projected {
                        features: vals[j * n * d..(j + 1) * n * d].to_vec(),
                        mask: mask[j * n..(j + 1) * n].to_vec(),
                    },
                );
            }
        }
        Ok(FeatureCache {
            queries: queries_enc,
            knowledge,
            regions,
        })
    }

    /// Encodes an extra query under `key`, replacing any previous entry.
    pub fn insert_query(&mut self, model: &Kramt, key: usize, seq: &crate::text::TokenSequence) -> Result<()> {
        let enc = encode_texts(model, &[seq])?.pop().expect("one sequence");
        self.queries.insert(key, enc);
        Ok(())
    }

    /// Pooled query embedding.
    pub fn query_pooled(&self, query: usize) -> Option<&[f64]> {
        self.queries.get(&query).map(|e| e.pooled.as_slice())
    }

    pub fn knowledge_pooled(&self, entity: usize) -> &[f64] {
        &self.knowledge[entity].pooled
    }
}

/// Score and knowledge choice of one gallery image for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: usize,
    pub score: f64,
    pub selected: Option<usize>,
}

/// Fused candidate ranking for one (query, image) pair, as entity positions.
/// The oracle puts the ground truth first.
fn link(
    corpus: &Corpus,
    query_pooled: &[f64],
    knowledge_pooled: &dyn Fn(usize) -> Vec<f64>,
    image: usize,
    mode: EvalMode,
    fusion: &FusionConfig,
) -> Result<(Vec<usize>, Option<usize>)> {
    let img = &corpus.images[image];
    let ents: Vec<usize> = img
        .candidates
        .iter()
        .map(|c| corpus.entity_position(&c.entity_id).expect("validated corpus"))
        .collect();
    let sims = ents
        .iter()
        .take(fusion.top_k)
        .map(|&e| cosine(query_pooled, &knowledge_pooled(e)))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_scores(&img.candidates, &sims, fusion)?;
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| fused[b].total_cmp(&fused[a]).then(a.cmp(&b)));
    debug_assert_eq!(order.first().copied(), argmax(&fused));
    let mut ranked: Vec<usize> = order.into_iter().map(|i| ents[i]).collect();
    let gt = img.gt_entity_id.as_ref().and_then(|g| corpus.entity_position(g));
    let selected = match mode.fusion_mode() {
        FusionMode::None => None,
        FusionMode::Argmax => ranked.first().copied(),
        FusionMode::Oracle => {
            if let Some(g) = gt {
                ranked.retain(|&e| e != g);
                ranked.insert(0, g);
            }
            gt
        }
    };
    Ok((ranked, selected))
}

/// Scores every image of `images` against one query.
pub fn score_gallery(
    model: &Kramt,
    corpus: &Corpus,
    cache: &FeatureCache,
    query: usize,
    images: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<ImageScore>> {
    let c = &model.config;
    let q = cache
        .queries
        .get(&query)
        .ok_or_else(|| Error::invalid(format!("query {query} missing from the feature cache")))?;
    let kp = |e: usize| cache.knowledge[e].pooled.clone();
    let mut selected = Vec::with_capacity(images.len());
    for &img in images {
        selected.push(link(corpus, &q.pooled, &kp, img, opts.mode, &opts.fusion)?.1);
    }
    if opts.mode == EvalMode::KnowledgeOnly {
        return images
            .iter()
            .zip(&selected)
            .map(|(&image, &sel)| {
                let score = match sel {
                    Some(e) => cosine(&q.pooled, &cache.knowledge[e].pooled)?,
                    None => 0.0,
                };
                Ok(ImageScore {
                    image,
                    score,
                    selected: sel,
                })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(images.len());
    for (chunk, sel) in images.chunks(opts.chunk.max(1)).zip(selected.chunks(opts.chunk.max(1))) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let qv = g.constant(vec![c.query_len, c.d], q.features.clone())?;
        let mut k_slot: HashMap<usize, usize> = HashMap::new();
        let mut k_data = Vec::new();
        let mut k_mask = Vec::new();
        for &e in sel.iter().flatten() {
            let next = k_slot.len();
            k_slot.entry(e).or_insert_with(|| {
                k_data.extend_from_slice(&cache.knowledge[e].features);
                k_mask.extend_from_slice(&cache.knowledge[e].mask);
                next
            });
        }
        let kv = if k_slot.is_empty() {
            None
        } else {
            Some(g.constant(vec![k_slot.len() * c.knowledge_len, c.d], k_data)?)
        };
        let mut r_data = Vec::with_capacity(chunk.len() * c.regions * c.d);
        let mut r_mask = Vec::with_capacity(chunk.len() * c.regions);
        for img in chunk {
            let r = cache
                .regions
                .get(img)
                .ok_or_else(|| Error::invalid(format!("image {img} missing from the feature cache")))?;
            r_data.extend_from_slice(&r.features);
            r_mask.extend_from_slice(&r.mask);
        }
        let rv = g.constant(vec![chunk.len() * c.regions, c.d], r_data)?;
        let pairs: Vec<_> = sel
            .iter()
            .enumerate()
            .map(|(j, s)| (0, s.map(|e| k_slot[&e]), j))
            .collect();
        let inputs = JointInputs {
            query: qv,
            query_mask: &q.mask,
            knowledge: kv,
            knowledge_mask: &k_mask,
            regions: rv,
            region_mask: &r_mask,
            pairs: &pairs,
        };
        let o = model.encode_joint(&mut g, &p, &inputs, opts.mode.ablation())?;
        for ((&image, &s), &score) in chunk.iter().zip(sel).zip(g.value(o.logits)) {
            out.push(ImageScore {
                image,
                score,
                selected: s,
            });
        }
    }
    Ok(out)
}

/// Scores one (query, image) pair from scratch, without any cache.
pub fn score_pair_direct(
    model: &Kramt,
    corpus: &Corpus,
    tokens: &Tokenized,
    query: usize,
    image: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    let qs = &tokens.queries[query];
    let (_, q_pooled) = model.text.encode(&model.params, qs)?;
    let kp = |e: usize| model.text.encode(&model.params, &tokens.knowledge[e]).expect("valid tokens").1;
    let (_, sel) = link(corpus, &q_pooled, &kp, image, opts.mode, &opts.fusion)?;
    if opts.mode == EvalMode::KnowledgeOnly {
        return match sel {
            Some(e) => cosine(&q_pooled, &kp(e)),
            None => Ok(0.0),
        };
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let q = model.text.forward(&mut g, &p, &[qs])?;
    let k = match sel {
        Some(e) => Some(model.text.forward(&mut g, &p, &[&tokens.knowledge[e]])?),
        None => None,
    };
    let (r, r_mask) = model.encode_regions(&mut g, &p, &[&corpus.images[image].regions])?;
    let empty = Vec::new();
    let pairs = [(0, sel.map(|_| 0), 0)];
    let inputs = JointInputs {
        query: q.features,
        query_mask: &q.mask,
        knowledge: k.as_ref().map(|k| k.features),
        knowledge_mask: k.as_ref().map_or(&empty, |k| &k.mask),
        regions: r,
        region_mask: &r_mask,
        pairs: &pairs,
    };
    let o = model.encode_joint(&mut g, &p, &inputs, opts.mode.ablation())?;
    Ok(g.value(o.logits)[0])
}

/// Ranking of one query over the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Corpus image positions, best first.
    pub order: Vec<usize>,
    pub gt_rank: usize,
    pub scores: Vec<ImageScore>,
}

pub fn rank_gallery(
    model: &Kramt,
    corpus: &Corpus,
    cache: &FeatureCache,
    query: usize,
    gallery: &[usize],
    opts: &EvalOptions,
) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(Error::invalid("cannot rank an empty gallery"));
    }
    let scores = score_gallery(model, corpus, cache, query, gallery, opts)?;
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let ids: Vec<&str> = gallery.iter().map(|&i| corpus.images[i].image_id.as_str()).collect();
    let order: Vec<usize> = order_by_score(&values, &ids).into_iter().map(|i| gallery[i]).collect();
    let gt = corpus
        .image_position(&corpus.queries[query].image_id)
        .expect("validated corpus");
    let gt_rank = order
        .iter()
        .position(|&i| i == gt)
        .map(|p| p + 1)
        .ok_or_else(|| Error::invalid(format!("ground-truth image of {} not in the gallery", corpus.queries[query].query_id)))?;
    Ok(RankingResult { order, gt_rank, scores })
}

/// Ranking by query–knowledge similarity alone.
pub fn knowledge_only_rank(
    model: &Kramt,
    corpus: &Corpus,
    cache: &FeatureCache,
    query: usize,
    gallery: &[usize],
    fusion: &FusionConfig,
) -> Result<RankingResult> {
    let opts = EvalOptions {
        mode: EvalMode::KnowledgeOnly,
        fusion: *fusion,
        ..EvalOptions::default()
    };
    rank_gallery(model, corpus, cache, query, gallery, &opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n_queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub wikification_top1: f64,
    pub wikification_topk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub split: String,
    /// How unified numbers aggregate queries.
    pub aggregation: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub wikification_top1: f64,
    pub wikification_topk: f64,
    pub top_k: usize,
    pub n_queries: usize,
    pub gallery_size: usize,
    pub config_hash: String,
    /// Same metrics restricted to queries carrying each tag.
    pub by_tag: BTreeMap<String, SubsetMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: usize,
    pub query_id: String,
    pub gt_rank: usize,
    pub selected_entity: Option<String>,
    pub link: LinkOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub queries: Vec<QueryResult>,
}

fn subset(results: &[&QueryResult], k: usize) -> Result<SubsetMetrics> {
    let ranks: Vec<usize> = results.iter().map(|r| r.gt_rank).collect();
    let links: Vec<LinkOutcome> = results.iter().map(|r| r.link.clone()).collect();
    let m = metrics(&ranks)?;
    Ok(SubsetMetrics {
        n_queries: ranks.len(),
        r1: m.r1,
        r5: m.r5,
        r10: m.r10,
        mdr: m.mdr,
        wikification_top1: wikification_accuracy(&links, 1)?,
        wikification_topk: wikification_accuracy(&links, k)?,
    })
}

/// Ranks every query of `split` against the split's images.
pub fn evaluate(model: &Kramt, corpus: &Corpus, split: Split, opts: &EvalOptions) -> Result<Evaluation> {
    opts.fusion.validate()?;
    let tokens = Tokenized::new(corpus, &model.config)?;
    let gallery = corpus.split_images(split);
    let id_of: HashMap<&str, usize> = corpus.queries.iter().enumerate().map(|(i, q)| (q.query_id.as_str(), i)).collect();
    let queries: Vec<usize> = corpus.split_queries(split).iter().map(|q| id_of[q.query_id.as_str()]).collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid(format!("split {split} has no queries or no images")));
    }
    let cache = FeatureCache::build(model, corpus, &tokens, &queries, &gallery)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<QueryResult> = pool.install(|| {
        queries
            .par_iter()
            .map(|&q| {
                let r = rank_gallery(model, corpus, &cache, q, &gallery, opts)?;
                let gt_img = corpus.image_position(&corpus.queries[q].image_id).expect("validated");
                let kp = |e: usize| cache.knowledge[e].pooled.clone();
                let (ranked, selected) = link(corpus, &cache.queries[&q].pooled, &kp, gt_img, opts.mode, &opts.fusion)?;
                let name = |e: usize| corpus.entities[e].entity_id.clone();
                Ok(QueryResult {
                    query: q,
                    query_id: corpus.queries[q].query_id.clone(),
                    gt_rank: r.gt_rank,
                    selected_entity: selected.map(name),
                    link: LinkOutcome {
                        ranked: ranked.into_iter().map(name).collect(),
                        gt: corpus.images[gt_img].gt_entity_id.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let all: Vec<&QueryResult> = results.iter().collect();
    let total = subset(&all, opts.fusion.top_k)?;
    let mut by_tag = BTreeMap::new();
    for tag in [Tag::Commonsense, Tag::Factual, Tag::Visual] {
        let sel: Vec<&QueryResult> = results.iter().filter(|r| corpus.queries[r.query].tags.contains(&tag)).collect();
        if !sel.is_empty() {
            by_tag.insert(tag_name(tag), subset(&sel, opts.fusion.top_k)?);
        }
    }
    let report = EvalReport {
        mode: opts.mode,
        split: split.to_string(),
        aggregation: "query-weighted".into(),
        r1: total.r1,
        r5: total.r5,
        r10: total.r10,
        mdr: total.mdr,
        wikification_top1: total.wikification_top1,
        wikification_topk: total.wikification_topk,
        top_k: opts.fusion.top_k,
        n_queries: results.len(),
        gallery_size: gallery.len(),
        config_hash: config_hash(&model.config),
        by_tag,
    };
    Ok(Evaluation {
        report,
        queries: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub n_pairs: usize,
    pub top1: f64,
    pub topk: f64,
    /// Top-1 accuracy of the recogniser's own ranking.
    pub likelihood_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub split: String,
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub overall: LinkMetrics,
    pub by_tag: BTreeMap<String, LinkMetrics>,
    pub config_hash: String,
}

fn link_metrics(outcomes: &[(LinkOutcome, bool)], k: usize) -> Result<LinkMetrics> {
    let links: Vec<LinkOutcome> = outcomes.iter().map(|o| o.0.clone()).collect();
    Ok(LinkMetrics {
        n_pairs: links.len(),
        top1: wikification_accuracy(&links, 1)?,
        topk: wikification_accuracy(&links, k)?,
        likelihood_top1: outcomes.iter().filter(|o| o.1).count() as f64 / outcomes.len() as f64,
    })
}

/// Fused entity linking of every query's ground-truth image in `split`.
pub fn link_entities(model: &Kramt, corpus: &Corpus, split: Split, fusion: &FusionConfig) -> Result<LinkReport> {
    fusion.validate()?;
    let tokens = Tokenized::new(corpus, &model.config)?;
    let id_of: HashMap<&str, usize> = corpus.queries.iter().enumerate().map(|(i, q)| (q.query_id.as_str(), i)).collect();
    let queries: Vec<usize> = corpus.split_queries(split).iter().map(|q| id_of[q.query_id.as_str()]).collect();
    if queries.is_empty() {
        return Err(Error::invalid(format!("split {split} has no queries")));
    }
    let cache = FeatureCache::build(model, corpus, &tokens, &queries, &[])?;
    let kp = |e: usize| cache.knowledge[e].pooled.clone();
    let mut outcomes = Vec::with_capacity(queries.len());
    for &q in &queries {
        let img = corpus.image_position(&corpus.queries[q].image_id).expect("validated corpus");
        let (ranked, _) = link(corpus, &cache.queries[&q].pooled, &kp, img, EvalMode::Full, fusion)?;
        let image = &corpus.images[img];
        let first = image.candidates.first().map(|c| &c.entity_id);
        let baseline = image.gt_entity_id.is_some() && first == image.gt_entity_id.as_ref();
        let outcome = LinkOutcome {
            ranked: ranked.into_iter().map(|e| corpus.entities[e].entity_id.clone()).collect(),
            gt: image.gt_entity_id.clone(),
        };
        outcomes.push((q, outcome, baseline));
    }
    let all: Vec<(LinkOutcome, bool)> = outcomes.iter().map(|o| (o.1.clone(), o.2)).collect();
    let mut by_tag = BTreeMap::new();
    for tag in [Tag::Commonsense, Tag::Factual, Tag::Visual] {
        let sel: Vec<(LinkOutcome, bool)> = outcomes
            .iter()
            .filter(|o| corpus.queries[o.0].tags.contains(&tag))
            .map(|o| (o.1.clone(), o.2))
            .collect();
        if !sel.is_empty() {
            by_tag.insert(tag_name(tag), link_metrics(&sel, fusion.top_k)?);
        }
    }
    Ok(LinkReport {
        split: split.to_string(),
        top_k: fusion.top_k,
        alpha: fusion.alpha,
        beta: fusion.beta,
        overall: link_metrics(&all, fusion.top_k)?,
        by_tag,
        config_hash: config_hash(&model.config),
    })
}

fn tag_name(tag: Tag) -> String {
    match tag {
        Tag::Commonsense => "commonsense",
        Tag::Factual => "factual",
        Tag::Visual => "visual",
    }
    .to_string()
}

/// Writes `query_id,gt_rank,selected_entity` rows.
pub fn write_per_query_csv(path: &Path, results: &[QueryResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "query_id,gt_rank,selected_entity")?;
    for r in results {
        writeln!(f, "{},{},{}", r.query_id, r.gt_rank, r.selected_entity.as_deref().unwrap_or(""))?;
    }
    f.flush()?;
    Ok(())
}
