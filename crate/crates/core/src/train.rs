//! Pair sampling, MLM masking, the training step and phase schedules.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowRef, Var};
use crate::params::Bound;
use crate::data::checkpoint::save_checkpoint;
use crate::data::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{Ablation, JointInputs, Kramt, ModelConfig, RegionFeatureSet};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::retrieval::{cosine, retrieve, FusionConfig, FusionMode};
use crate::text::{pad_truncate, TokenSequence, CLS, MASK, PAD, SEP};

/// Token sequences of every query and every entity's knowledge text,
/// padded or truncated to the model's lengths.
#[derive(Clone, Debug)]
pub struct Tokenized {
    pub queries: Vec<TokenSequence>,
    pub knowledge: Vec<TokenSequence>,
}

impl Tokenized {
    pub fn new(corpus: &Corpus, config: &ModelConfig) -> Result<Self> {
        let queries = corpus
            .queries
            .iter()
            .map(|q| pad_truncate(&corpus.vocab.encode(&q.text), config.query_len))
            .collect::<Result<_>>()?;
        let knowledge = corpus
            .entities
            .iter()
            .map(|e| pad_truncate(&corpus.vocab.encode(&e.knowledge_text), config.knowledge_len))
            .collect::<Result<_>>()?;
        Ok(Tokenized { queries, knowledge })
    }
}

/// Replaces each eligible token by [`MASK`] with probability `p`.
/// Returns the masked sequence, target ids and the masked-position flags.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rng: &mut R,
    p: f64,
) -> Result<(TokenSequence, Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("mask probability {p} outside [0, 1]")));
    }
    let mut out = seq.clone();
    let mut targets = vec![PAD; seq.len()];
    let mut masked = vec![false; seq.len()];
    for i in 0..seq.len() {
        let id = seq.ids[i];
        let eligible = seq.mask[i] && ![PAD, CLS, SEP, MASK].contains(&id);
        if eligible && rng.gen_bool(p) {
            out.ids[i] = MASK;
            targets[i] = id;
            masked[i] = true;
        }
    }
    Ok((out, targets, masked))
}

/// One (query, image) pair with its alignment label. Indices refer to the
/// corpus query list and image list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub query: usize,
    pub image: usize,
    pub label: bool,
}

/// Ground-truth pairs of a split together with its images and queries.
#[derive(Clone, Debug)]
pub struct PairPool {
    pub positives: Vec<(usize, usize)>,
    pub images: Vec<usize>,
    pub queries: Vec<usize>,
    gt_image: HashMap<usize, usize>,
}

impl PairPool {
    pub fn new(positives: Vec<(usize, usize)>) -> Result<Self> {
        let images: Vec<usize> = positives.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
        let queries: Vec<usize> = positives.iter().map(|p| p.0).collect();
        if images.len() < 2 || queries.len() < 2 {
            return Err(Error::invalid("pair sampling needs at least two images and two queries"));
        }
        let gt_image = positives.iter().copied().collect();
        Ok(PairPool {
            positives,
            images,
            queries,
            gt_image,
        })
    }

    pub fn from_split(corpus: &Corpus, split: Split) -> Result<Self> {
        let wanted: BTreeSet<&str> = corpus.split_ids(split).iter().map(String::as_str).collect();
        let positives = corpus
            .queries
            .iter()
            .enumerate()
            .filter(|(_, q)| wanted.contains(q.image_id.as_str()))
            .map(|(i, q)| (i, corpus.image_position(&q.image_id).expect("validated corpus")))
            .collect();
        Self::new(positives)
    }

    pub fn is_ground_truth(&self, query: usize, image: usize) -> bool {
        self.gt_image.get(&query) == Some(&image)
    }
}

/// Emits each selected positive followed by `negative_ratio` negatives. A
/// negative swaps either the image or the query (fair coin) for a uniformly
/// drawn different one, redrawing until the pair is not a ground-truth pair.
pub fn sample_pairs<R: Rng + ?Sized>(
    pool: &PairPool,
    positives: &[usize],
    rng: &mut R,
    negative_ratio: usize,
) -> Vec<TrainingExample> {
    let mut out = Vec::with_capacity(positives.len() * (1 + negative_ratio));
    for &i in positives {
        let (q, img) = pool.positives[i];
        out.push(TrainingExample {
            query: q,
            image: img,
            label: true,
        });
        for _ in 0..negative_ratio {
            let neg = loop {
                let cand = if rng.gen_bool(0.5) {
                    (q, *pool.images.choose(rng).expect("non-empty"))
                } else {
                    (*pool.queries.choose(rng).expect("non-empty"), img)
                };
                if !pool.is_ground_truth(cand.0, cand.1) {
                    break cand;
                }
            };
            out.push(TrainingExample {
                query: neg.0,
                image: neg.1,
                label: false,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Itm,
    Mlm,
    ItmMlm,
}

impl Objective {
    pub fn itm(self) -> bool {
        matches!(self, Objective::Itm | Objective::ItmMlm)
    }

    pub fn mlm(self) -> bool {
        matches!(self, Objective::Mlm | Objective::ItmMlm)
    }
}

/// Which knowledge text accompanies an example during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// Fused selection with the current scorer.
    Selected,
    /// The image's ground-truth entity.
    GroundTruth,
    /// No knowledge; knowledge slots are zero and attention-masked.
    Absent,
    /// Ground-truth knowledge with every token replaced by [MASK].
    MlmMasked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub objective: Objective,
    pub epochs: usize,
    pub lr: f64,
    /// Examples per step, positives and negatives together.
    pub batch_size: usize,
    /// Fraction of the phase's steps spent warming the rate up linearly;
    /// the rest decays it linearly to zero.
    #[serde(default)]
    pub warmup: f64,
    /// Knowledge supplied during this phase; `None` follows the schedule.
    /// A schedule trained without knowledge ignores it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeMode>,
}

impl Phase {
    /// Knowledge mode in effect given the schedule's mode.
    pub fn knowledge_mode(&self, schedule: KnowledgeMode) -> KnowledgeMode {
        match (schedule, self.knowledge) {
            (KnowledgeMode::Absent, _) | (_, None) => schedule,
            (_, Some(k)) => k,
        }
    }

    /// Learning-rate multiplier at `step` of `total` (0-based).
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let warm = (self.warmup * total).ceil();
        let t = step as f64 + 1.0;
        if t <= warm {
            t / warm
        } else {
            ((total - t + 1.0) / (total - warm + 1.0)).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub seed: u64,
    pub knowledge: KnowledgeMode,
    pub no_vision: bool,
    pub negative_ratio: usize,
    pub mlm_prob: f64,
    /// Learning-rate multiplier of the text encoder.
    pub text_lr_scale: f64,
    /// Weight of the query–knowledge linking loss (0 disables it).
    pub link_weight: f64,
    pub link_temperature: f64,
    pub fusion: FusionConfig,
    pub adam: AdamConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::desk()
    }
}

impl TrainSchedule {
    /// Desk-scale schedule: a single joint ITM + MLM phase.
    pub fn desk() -> Self {
        TrainSchedule {
            phases: vec![Phase {
                name: "pretrain".into(),
                objective: Objective::ItmMlm,
                epochs: 60,
                lr: 1e-3,
                batch_size: 16,
                warmup: 0.05,
                knowledge: None,
            }],
            seed: 0,
            knowledge: KnowledgeMode::Selected,
            no_vision: false,
            negative_ratio: 1,
            mlm_prob: 0.15,
            text_lr_scale: 1.0,
            link_weight: 1.0,
            link_temperature: 0.1,
            fusion: FusionConfig::default(),
            adam: AdamConfig::default(),
        }
    }

    /// Full-scale phase lengths and rates with a 768-wide model in mind.
    pub fn full_scale() -> Self {
        let phase = |name: &str, objective, epochs, lr| Phase {
            name: name.into(),
            objective,
            epochs,
            lr,
            batch_size: 64,
            warmup: 0.0,
            knowledge: None,
        };
        TrainSchedule {
            phases: vec![
                phase("pretrain", Objective::ItmMlm, 42, 1e-4),
                phase("mlm", Objective::Mlm, 10, 5e-5),
                phase("align", Objective::Itm, 15, 2e-5),
            ],
            text_lr_scale: 0.1,
            ..TrainSchedule::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.phases {
            if p.epochs == 0 || !(p.lr > 0.0) || p.batch_size == 0 || !(0.0..=1.0).contains(&p.warmup) {
                return Err(Error::invalid(format!(
                    "phase {} needs epochs >= 1, lr > 0, batch_size >= 1 and warmup in [0, 1]",
                    p.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mlm_prob) {
            return Err(Error::invalid("mlm_prob must lie in [0, 1]"));
        }
        if !(self.link_temperature > 0.0) || self.link_weight < 0.0 || self.text_lr_scale < 0.0 {
            return Err(Error::invalid("link_temperature > 0, link_weight >= 0, text_lr_scale >= 0 required"));
        }
        self.fusion.validate()
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_knowledge: self.knowledge == KnowledgeMode::Absent,
            no_vision: self.no_vision,
        }
    }
}

/// Mean losses of one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub itm: f64,
    pub mlm: f64,
    pub link: f64,
    pub total: f64,
}

/// Everything a training step reads besides the model.
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub tokens: &'a Tokenized,
    pub schedule: &'a TrainSchedule,
}

#[derive(Clone, Debug)]
struct Masked {
    seq: TokenSequence,
    targets: Vec<usize>,
    positions: Vec<bool>,
}

impl Masked {
    fn plain(seq: &TokenSequence) -> Self {
        Masked {
            seq: seq.clone(),
            targets: vec![PAD; seq.len()],
            positions: vec![false; seq.len()],
        }
    }

    fn sample<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R, p: f64) -> Result<Self> {
        let (seq, targets, positions) = apply_mlm_mask(seq, rng, p)?;
        Ok(Masked {
            seq,
            targets,
            positions,
        })
    }
}

/// The random and structural part of one step: masked token sequences,
/// the deduplicated queries, knowledge texts and images, and optionally a
/// frozen knowledge choice per example.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub examples: Vec<TrainingExample>,
    pub objective: Objective,
    q_slot: HashMap<usize, usize>,
    q_masked: Vec<Masked>,
    k_slot: HashMap<usize, usize>,
    k_entities: Vec<usize>,
    k_masked: Vec<Masked>,
    images: Vec<usize>,
    r_slot: HashMap<usize, usize>,
    /// Knowledge slot per example; computed from the current scorer when
    /// `None`.
    pub chosen: Option<Vec<Option<usize>>>,
}

/// Draws MLM masks and gathers the text and images `batch` needs.
pub fn prepare_batch<R: Rng + ?Sized>(
    ctx: &TrainContext,
    batch: &[TrainingExample],
    objective: Objective,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let sch = ctx.schedule;
    let corpus = ctx.corpus;
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mlm_on = objective.mlm();
    let mask = |seq: &TokenSequence, rng: &mut R| {
        if mlm_on {
            Masked::sample(seq, rng, sch.mlm_prob)
        } else {
            Ok(Masked::plain(seq))
        }
    };

    let mut q_slot: HashMap<usize, usize> = HashMap::new();
    let mut q_masked: Vec<Masked> = Vec::new();
    for ex in batch {
        if !q_slot.contains_key(&ex.query) {
            q_slot.insert(ex.query, q_masked.len());
            q_masked.push(mask(&ctx.tokens.queries[ex.query], rng)?);
        }
    }

    // Every candidate and ground-truth entity of the batch's images.
    let mut k_slot: HashMap<usize, usize> = HashMap::new();
    let mut k_entities: Vec<usize> = Vec::new();
    if sch.knowledge != KnowledgeMode::Absent {
        for ex in batch {
            let img = &corpus.images[ex.image];
            let ents = img
                .candidates
                .iter()
                .take(sch.fusion.top_k)
                .map(|c| c.entity_id.as_str())
                .chain(img.gt_entity_id.as_deref());
            for id in ents {
                let e = corpus.entity_position(id).expect("validated corpus");
                if !k_slot.contains_key(&e) {
                    k_slot.insert(e, k_entities.len());
                    k_entities.push(e);
                }
            }
        }
    }
    let mut k_masked: Vec<Masked> = Vec::new();
    for &e in &k_entities {
        let base = &ctx.tokens.knowledge[e];
        k_masked.push(if sch.knowledge == KnowledgeMode::MlmMasked {
            let mut m = Masked::plain(base);
            for (id, &on) in m.seq.ids.iter_mut().zip(&base.mask) {
                if on {
                    *id = MASK;
                }
            }
            m
        } else {
            mask(base, rng)?
        });
    }

    let mut r_slot: HashMap<usize, usize> = HashMap::new();
    let mut images = Vec::new();
    for ex in batch {
        if !r_slot.contains_key(&ex.image) {
            r_slot.insert(ex.image, images.len());
            images.push(ex.image);
        }
    }
    Ok(PreparedBatch {
        examples: batch.to_vec(),
        objective,
        q_slot,
        q_masked,
        k_slot,
        k_entities,
        k_masked,
        images,
        r_slot,
        chosen: None,
    })
}

/// Builds the step's total loss on `g`. Returns it with the individual
/// terms and the knowledge slot each example used.
pub fn batch_loss(
    model: &Kramt,
    g: &mut Graph,
    p: &Bound,
    ctx: &TrainContext,
    prep: &PreparedBatch,
) -> Result<(Var, StepLosses, Vec<Option<usize>>)> {
    let sch = ctx.schedule;
    let cfg = &model.config;
    let corpus = ctx.corpus;
    let batch = &prep.examples;
    let objective = prep.objective;
    let entity = |id: &str| corpus.entity_position(id).expect("validated corpus");

    let q_refs: Vec<&TokenSequence> = prep.q_masked.iter().map(|m| &m.seq).collect();
    let q_out = model.text.forward(g, p, &q_refs)?;
    let k_out = if prep.k_masked.is_empty() {
        None
    } else {
        let refs: Vec<&TokenSequence> = prep.k_masked.iter().map(|m| &m.seq).collect();
        Some(model.text.forward(g, p, &refs)?)
    };

    let chosen = match &prep.chosen {
        Some(c) => c.clone(),
        None => {
            let d = cfg.d;
            let pooled_q = g.value(q_out.pooled);
            let pooled_k = k_out.as_ref().map(|k| g.value(k.pooled)).unwrap_or(&[]);
            let mut chosen = Vec::with_capacity(batch.len());
            for ex in batch {
                let img = &corpus.images[ex.image];
                let gt_slot = img.gt_entity_id.as_deref().and_then(|gt| prep.k_slot.get(&entity(gt)).copied());
                chosen.push(match sch.knowledge {
                    KnowledgeMode::Absent => None,
                    KnowledgeMode::GroundTruth | KnowledgeMode::MlmMasked => gt_slot,
                    KnowledgeMode::Selected => {
                        let qs = prep.q_slot[&ex.query];
                        let qv = &pooled_q[qs * d..(qs + 1) * d];
                        let sims = img
                            .candidates
                            .iter()
                            .take(sch.fusion.top_k)
                            .map(|c| {
                                let ks = prep.k_slot[&entity(&c.entity_id)];
                                cosine(qv, &pooled_k[ks * d..(ks + 1) * d])
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let fusion = FusionConfig {
                            mode: FusionMode::Argmax,
                            ..sch.fusion
                        };
                        retrieve(&img.candidates, &sims, None, &fusion)?.map(|s| prep.k_slot[&entity(&s.entity_id)])
                    }
                });
            }
            chosen
        }
    };
    if chosen.len() != batch.len() {
        return Err(Error::invalid("frozen knowledge choice does not match the batch"));
    }

    let sets: Vec<&RegionFeatureSet> = prep.images.iter().map(|&i| &corpus.images[i].regions).collect();
    let (regions, region_mask) = model.encode_regions(g, p, &sets)?;
    let pairs: Vec<(usize, Option<usize>, usize)> = batch
        .iter()
        .zip(&chosen)
        .map(|(ex, &k)| (prep.q_slot[&ex.query], k, prep.r_slot[&ex.image]))
        .collect();
    let empty: Vec<bool> = Vec::new();
    let inputs = JointInputs {
        query: q_out.features,
        query_mask: &q_out.mask,
        knowledge: k_out.as_ref().map(|k| k.features),
        knowledge_mask: k_out.as_ref().map_or(&empty, |k| &k.mask),
        regions,
        region_mask: &region_mask,
        pairs: &pairs,
    };
    let ablation = sch.ablation();
    let out = model.encode_joint(g, p, &inputs, ablation)?;

    let mut losses = StepLosses::default();
    let mut terms = Vec::new();
    if objective.itm() {
        let labels: Vec<f64> = batch.iter().map(|e| if e.label { 1.0 } else { 0.0 }).collect();
        let itm = g.bce_with_logits(out.logits, &labels)?;
        losses.itm = g.value(itm)[0];
        terms.push(itm);
    }
    if objective.mlm() {
        let s = cfg.seq_len();
        let mut rows: Vec<RowRef> = Vec::new();
        let mut targets = Vec::new();
        for (b, (ex, &(qs, ks, _))) in batch.iter().zip(&pairs).enumerate() {
            if !ex.label {
                continue;
            }
            let qm = &prep.q_masked[qs];
            for j in (0..cfg.query_len).filter(|&j| qm.positions[j]) {
                rows.push(Some((0, b * s + 1 + j)));
                targets.push(qm.targets[j]);
            }
            if let (Some(k), false) = (ks, ablation.no_knowledge) {
                let km = &prep.k_masked[k];
                for j in (0..cfg.knowledge_len).filter(|&j| km.positions[j]) {
                    rows.push(Some((0, b * s + cfg.query_len + 2 + j)));
                    targets.push(km.targets[j]);
                }
            }
        }
        if !rows.is_empty() {
            let t = g.gather_rows(&[out.hidden], &rows)?;
            let logits = model.mlm_head(g, p, t)?;
            let mlm = g.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
            losses.mlm = g.value(mlm)[0];
            terms.push(mlm);
        }
    }
    if let (true, KnowledgeMode::Selected, Some(k)) = (objective.itm() && sch.link_weight > 0.0, sch.knowledge, &k_out) {
        let u = prep.k_entities.len();
        let mut rows: Vec<RowRef> = Vec::new();
        let mut bias = Vec::new();
        let mut targets = Vec::new();
        for ex in batch.iter().filter(|e| e.label) {
            let img = &corpus.images[ex.image];
            let Some(gt) = img.gt_entity_id.as_deref().map(entity) else {
                continue;
            };
            let mut row = vec![-1e4; u];
            for c in img.candidates.iter().take(sch.fusion.top_k) {
                row[prep.k_slot[&entity(&c.entity_id)]] = 0.0;
            }
            row[prep.k_slot[&gt]] = 0.0;
            rows.push(Some((0, prep.q_slot[&ex.query])));
            bias.extend(row);
            targets.push(prep.k_slot[&gt]);
        }
        if !rows.is_empty() {
            let n = rows.len();
            let qv = g.gather_rows(&[q_out.pooled], &rows)?;
            let qn = g.l2_normalize_rows(qv)?;
            let kn = g.l2_normalize_rows(k.pooled)?;
            let sims = g.matmul_nt(qn, kn)?;
            let sims = g.scale(sims, 1.0 / sch.link_temperature);
            let bias = g.constant(vec![n, u], bias)?;
            let logits = g.add(sims, bias)?;
            let link = g.cross_entropy(logits, &targets, &vec![true; n])?;
            losses.link = g.value(link)[0];
            terms.push(g.scale(link, sch.link_weight));
        }
    }
    let Some(mut total) = terms.first().copied() else {
        return Err(Error::invalid("objective produced no loss term"));
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    losses.total = g.value(total)[0];
    Ok((total, losses, chosen))
}

/// Forward, backward and one Adam update over `batch`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Kramt,
    ctx: &TrainContext,
    batch: &[TrainingExample],
    state: &mut AdamState,
    objective: Objective,
    rng: &mut R,
) -> Result<StepLosses> {
    let prep = prepare_batch(ctx, batch, objective, rng)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (total, losses, _) = batch_loss(model, &mut g, &p, ctx, &prep)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {} (itm {}, mlm {}, link {}) after {} optimiser steps",
            losses.total,
            losses.itm,
            losses.mlm,
            losses.link,
            state.step_count()
        )));
    }
    let mut grads = g.backward(total)?;
    let grads = model.params.collect_grads(&mut grads, &p);
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "gradient of {} is not finite at step {}",
            model.params.ids().nth(i).map_or("?", |id| model.params.name(id)),
            state.step_count()
        )));
    }
    let scales = model.lr_scales(ctx.schedule.text_lr_scale);
    adam_step(&mut model.params, &grads, state, Some(&scales))?;
    Ok(losses)
}

/// Retrieval metrics recorded next to the losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub losses: StepLosses,
    pub metrics: Option<RetrievalMetrics>,
}

pub const LOG_HEADER: &str = "epoch,phase,itm_loss,mlm_loss,r1,r5,r10,mdr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let m = |f: fn(&RetrievalMetrics) -> f64| self.metrics.as_ref().map(|x| format!("{:.6}", f(x))).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{},{},{}",
            self.epoch,
            self.phase,
            self.losses.itm,
            self.losses.mlm,
            m(|x| x.r1),
            m(|x| x.r5),
            m(|x| x.r10),
            m(|x| x.mdr)
        )
    }
}

/// Runs every phase in order on the training split. With `out_dir`, the
/// model is checkpointed to `checkpoint.krmt` after each epoch and the log is
/// appended to `metrics.csv`. `validate` may supply retrieval metrics per
/// epoch.
pub fn run_schedule(
    model: &mut Kramt,
    corpus: &Corpus,
    schedule: &TrainSchedule,
    out_dir: Option<&Path>,
    mut validate: Option<&mut dyn FnMut(&Kramt) -> Result<RetrievalMetrics>>,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    let tokens = Tokenized::new(corpus, &model.config)?;
    let pool = PairPool::from_split(corpus, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = Vec::new();
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut epoch = 0;
    for phase in &schedule.phases {
        let phase_schedule = TrainSchedule {
            knowledge: phase.knowledge_mode(schedule.knowledge),
            ..schedule.clone()
        };
        let ctx = TrainContext {
            corpus,
            tokens: &tokens,
            schedule: &phase_schedule,
        };
        let mut state = AdamState::new(
            &model.params,
            AdamConfig {
                lr: phase.lr,
                ..schedule.adam
            },
        );
        let ratio = if phase.objective.itm() { schedule.negative_ratio } else { 0 };
        let per_batch = (phase.batch_size / (1 + ratio)).max(1);
        let total_steps = phase.epochs * pool.positives.len().div_ceil(per_batch);
        let mut step = 0;
        for _ in 0..phase.epochs {
            epoch += 1;
            let started = std::time::Instant::now();
            let mut order: Vec<usize> = (0..pool.positives.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = StepLosses::default();
            let mut steps = 0;
            for chunk in order.chunks(per_batch) {
                let batch = sample_pairs(&pool, chunk, &mut rng, ratio);
                state.config.lr = phase.lr * phase.lr_factor(step, total_steps);
                step += 1;
                let l = train_step(model, &ctx, &batch, &mut state, phase.objective, &mut rng)?;
                sum.itm += l.itm;
                sum.mlm += l.mlm;
                sum.link += l.link;
                sum.total += l.total;
                steps += 1;
            }
            let n = steps.max(1) as f64;
            let losses = StepLosses {
                itm: sum.itm / n,
                mlm: sum.mlm / n,
                link: sum.link / n,
                total: sum.total / n,
            };
            let metrics = match validate.as_mut() {
                Some(f) => Some(f(model)?),
                None => None,
            };
            log::info!(
                "epoch {epoch} [{}] itm {:.4} mlm {:.4} link {:.4} ({:.1}s){}",
                phase.name,
                losses.itm,
                losses.mlm,
                losses.link,
                started.elapsed().as_secs_f64(),
                metrics.map(|m| format!(" R@1 {:.3} R@5 {:.3} R@10 {:.3} MdR {}", m.r1, m.r5, m.r10, m.mdr)).unwrap_or_default()
            );
            let entry = EpochLog {
                epoch,
                phase: phase.name.clone(),
                losses,
                metrics,
            };
            if let (Some(f), Some(dir)) = (csv.as_mut(), out_dir) {
                writeln!(f, "{}", entry.csv_row())?;
                f.flush()?;
                save_checkpoint(model, &dir.join("checkpoint.krmt"))?;
            }
            log.push(entry);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        let seq = pad_truncate(&[7, 8, 9], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _, m) = apply_mlm_mask(&seq, &mut rng, 0.0).unwrap();
        assert_eq!((s, m.iter().filter(|&&x| x).count()), (seq.clone(), 0));
        let (s, t, m) = apply_mlm_mask(&seq, &mut rng, 1.0).unwrap();
        assert_eq!(s.ids, [MASK, MASK, MASK, PAD, PAD]);
        assert_eq!(&t[..3], [7, 8, 9]);
        assert_eq!(m, [true, true, true, false, false]);
        assert!(apply_mlm_mask(&seq, &mut rng, 1.5).is_err());
    }

    #[test]
    fn specials_are_never_masked() {
        let seq = TokenSequence {
            ids: vec![CLS, 9, SEP, 10, PAD],
            mask: vec![true, true, true, true, false],
            true_length: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, _, _) = apply_mlm_mask(&seq, &mut rng, 1.0).unwrap();
        assert_eq!(s.ids, [CLS, MASK, SEP, MASK, PAD]);
    }

    #[test]
    fn phase_knowledge_override() {
        let json = r#"{"name":"p","objective":"itm_mlm","epochs":1,"lr":0.001,"batch_size":4}"#;
        let mut phase: Phase = serde_json::from_str(json).unwrap();
        assert_eq!(phase.knowledge, None);
        assert_eq!(phase.knowledge_mode(KnowledgeMode::Selected), KnowledgeMode::Selected);
        phase.knowledge = Some(KnowledgeMode::Absent);
        assert_eq!(phase.knowledge_mode(KnowledgeMode::Selected), KnowledgeMode::Absent);
        phase.knowledge = Some(KnowledgeMode::GroundTruth);
        assert_eq!(phase.knowledge_mode(KnowledgeMode::Absent), KnowledgeMode::Absent);
    }

    #[test]
    fn pair_pool_needs_two_images() {
        assert!(PairPool::new(vec![(0, 0), (1, 0)]).is_err());
        assert!(PairPool::new(vec![(0, 0), (1, 1)]).is_ok());
    }

    #[test]
    fn negatives_are_never_ground_truth() {
        let pool = PairPool::new((0..10).map(|i| (i, i / 2)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let all: Vec<usize> = (0..10).collect();
        for _ in 0..50 {
            for ex in sample_pairs(&pool, &all, &mut rng, 2) {
                assert_eq!(ex.label, pool.is_ground_truth(ex.query, ex.image));
            }
        }
    }

    #[test]
    fn csv_row_leaves_missing_metrics_empty() {
        let e = EpochLog {
            epoch: 3,
            phase: "align".into(),
            losses: StepLosses {
                itm: 0.5,
                mlm: 0.0,
                link: 0.1,
                total: 0.6,
            },
            metrics: None,
        };
        assert_eq!(e.csv_row(), "3,align,0.500000,0.000000,,,,");
    }
}
