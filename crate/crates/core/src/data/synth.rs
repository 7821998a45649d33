//! Synthetic corpus with controllable knowledge dependence.
//!
//! Every image shows one named entity plus three scene attributes (activity,
//! object, setting), each carried by a region whose appearance is drawn
//! around a prototype. Entities come in clusters of look-alikes: their
//! prototypes share a cluster component, and the recogniser's candidates for
//! an image are the members of its entity's cluster, with the true entity on
//! top at a configurable rate. Entity regions are deliberately weak so that
//! vision alone barely identifies the entity; knowledge-dependent queries
//! name a fact that occurs only in the entity's knowledge text.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{
    region_file_name, write_jsonl, CandidateRecord, Category, EntityRecord, Manifest, QueryRecord, Splits, Tag,
};
use crate::data::regions::write_region_file;
use crate::error::{Error, Result};
use crate::model::RegionFeatureSet;
use crate::retrieval::Candidate;
use crate::text::Vocabulary;

pub const ACTIVITIES: [&str; 4] = ["running", "eating", "reading", "dancing"];
pub const OBJECTS: [&str; 4] = ["umbrella", "bicycle", "guitar", "laptop"];
pub const SETTINGS: [&str; 4] = ["beach", "street", "park", "kitchen"];
const TEMPLATE_WORDS: [&str; 24] = [
    "a", "person", "with", "at", "the", "near", "one", "known", "for", "is", "famous", "and", "many", "people",
    "also", "link", "it", "brand", "celebrity", "landmark", "place", "of", "to", "in",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_entities: usize,
    /// Training images.
    pub n_images: usize,
    /// Training queries, spread evenly over the training images.
    pub n_queries: usize,
    /// Small gallery size; its images are the first ones of the large gallery.
    pub n_gallery: usize,
    pub n_gallery_large: usize,
    pub gallery_queries_per_image: usize,
    /// Appearance feature width.
    pub d_app: usize,
    /// Region slots per image (at least 4 are always filled).
    pub n_regions: usize,
    /// Probability that a query names a knowledge-only fact.
    pub knowledge_dependence: f64,
    /// Probability that the recogniser ranks the true entity first.
    pub top1_correct: f64,
    pub n_candidates: usize,
    pub facts_per_entity: usize,
    /// Scale of the entity prototype inside its region.
    pub entity_signal: f64,
    /// Scale of attribute prototypes inside their regions.
    pub attribute_signal: f64,
    /// Standard deviation of the isotropic appearance noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 16,
            n_images: 200,
            n_queries: 400,
            n_gallery: 64,
            n_gallery_large: 128,
            gallery_queries_per_image: 2,
            d_app: 64,
            n_regions: 8,
            knowledge_dependence: 0.7,
            top1_correct: 0.6,
            n_candidates: 4,
            facts_per_entity: 4,
            entity_signal: 0.25,
            attribute_signal: 1.0,
            noise: 0.6,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("infeasible synthetic spec: {m}")));
        if self.n_entities < 2 || self.n_images < self.n_entities {
            return bad("need n_images >= n_entities >= 2");
        }
        if self.n_queries == 0 || self.n_gallery == 0 || self.n_gallery_large < self.n_gallery {
            return bad("need queries, a gallery, and n_gallery_large >= n_gallery");
        }
        if self.n_candidates == 0 || self.n_candidates > self.n_entities {
            return bad("n_candidates must lie in 1..=n_entities");
        }
        if self.n_regions < 4 || self.d_app == 0 || self.facts_per_entity == 0 {
            return bad("need n_regions >= 4, d_app >= 1 and facts_per_entity >= 1");
        }
        for (name, p) in [("knowledge_dependence", self.knowledge_dependence), ("top1_correct", self.top1_correct)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.entity_signal >= 0.0 && self.attribute_signal >= 0.0) {
            return bad("signal and noise scales must be non-negative");
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable pseudo-word from `syllables` consonant–vowel pairs, plus an
/// optional final consonant.
fn pseudo_word(mut index: usize, syllables: usize, tail: Option<char>) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    for _ in 0..syllables {
        let k = index % base;
        index /= base;
        s.push(CONSONANTS[k / VOWELS.len()] as char);
        s.push(VOWELS[k % VOWELS.len()] as char);
    }
    if let Some(t) = tail {
        s.push(t);
    }
    s
}

/// `count` distinct words of the given shape, avoiding `reserved`.
fn word_list(count: usize, syllables: usize, tail: Option<char>, stride: usize, reserved: &HashSet<String>) -> Vec<String> {
    let space = (CONSONANTS.len() * VOWELS.len()).pow(syllables as u32);
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    let mut i = 0usize;
    while out.len() < count {
        let w = pseudo_word((i * stride + 11) % space, syllables, tail);
        if !reserved.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
        i += 1;
        assert!(i < space * 2, "pseudo-word space exhausted");
    }
    out
}

/// Words that appear only in knowledge texts (entity names and facts).
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub facts: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(n_entities: usize, facts_per_entity: usize) -> Self {
        let reserved: HashSet<String> = TEMPLATE_WORDS
            .iter()
            .chain(&ACTIVITIES)
            .chain(&OBJECTS)
            .chain(&SETTINGS)
            .map(|s| s.to_string())
            .collect();
        let names = word_list(n_entities, 3, None, 7919, &reserved);
        let flat = word_list(n_entities * facts_per_entity, 2, Some('r'), 37, &reserved);
        let facts = flat.chunks(facts_per_entity).map(<[String]>::to_vec).collect();
        Lexicon { names, facts }
    }

    /// Every knowledge-exclusive word.
    pub fn exclusive_words(&self) -> HashSet<String> {
        self.names.iter().chain(self.facts.iter().flatten()).cloned().collect()
    }
}

fn category_of(i: usize) -> Category {
    [Category::Brand, Category::Celeb, Category::Landmark][i % 3]
}

fn category_word(c: Category) -> &'static str {
    match c {
        Category::Brand => "brand",
        Category::Celeb => "celebrity",
        Category::Landmark => "landmark",
        Category::Other => "place",
    }
}

fn knowledge_text(name: &str, category: Category, facts: &[String]) -> String {
    let (first, rest) = facts.split_at(facts.len().min(2));
    let mut s = format!("{name} is a famous {} known for {}", category_word(category), first.join(" and "));
    if !rest.is_empty() {
        s.push_str(&format!(" . many people also link it with {}", rest.join(" and ")));
    }
    s
}

#[derive(Clone, Copy, Debug)]
struct Scene {
    entity: usize,
    activity: usize,
    object: usize,
    setting: usize,
}

struct Prototypes {
    /// `0.8 · cluster + 0.6 · individual`.
    entity: Vec<Vec<f64>>,
    attribute: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Box extents `(min_w, max_w, min_h, max_h)` of each region role: entity,
/// person, object, scene. Filler regions get arbitrary boxes.
const ROLE_BOXES: [(f32, f32, f32, f32); 4] = [
    (0.15, 0.3, 0.15, 0.3),
    (0.2, 0.4, 0.5, 0.9),
    (0.05, 0.2, 0.05, 0.2),
    (0.9, 1.0, 0.9, 1.0),
];

fn role_box(role: Option<usize>, rng: &mut ChaCha8Rng) -> [f32; 4] {
    match role {
        Some(r) => {
            let (w0, w1, h0, h1) = ROLE_BOXES[r];
            let w = rng.gen_range(w0..=w1);
            let h = rng.gen_range(h0..=h1);
            let x = rng.gen_range(0.0..=1.0 - w);
            let y = rng.gen_range(0.0..=1.0 - h);
            [x, y, (x + w).min(1.0), (y + h).min(1.0)]
        }
        None => {
            let (x0, x1) = sorted_pair(rng);
            let (y0, y1) = sorted_pair(rng);
            [x0, y0, x1, y1]
        }
    }
}

fn regions_for(scene: &Scene, spec: &SynthSpec, protos: &Prototypes, rng: &mut ChaCha8Rng) -> RegionFeatureSet {
    let d = spec.d_app;
    let filled = rng.gen_range(4..=spec.n_regions);
    let mut rows: Vec<(Vec<f64>, [f32; 4])> = Vec::with_capacity(filled);
    let mut with = |center: Option<&[f64]>, scale: f64, role: Option<usize>, rng: &mut ChaCha8Rng| {
        let noise = gaussian(rng, d);
        let row = (0..d)
            .map(|j| center.map_or(0.0, |c| scale * c[j]) + spec.noise * noise[j])
            .collect();
        rows.push((row, role_box(role, rng)));
    };
    with(Some(&protos.entity[scene.entity]), spec.entity_signal, Some(0), rng);
    with(Some(&protos.attribute[scene.activity]), spec.attribute_signal, Some(1), rng);
    with(Some(&protos.attribute[4 + scene.object]), spec.attribute_signal, Some(2), rng);
    with(Some(&protos.attribute[8 + scene.setting]), spec.attribute_signal, Some(3), rng);
    for _ in 4..filled {
        with(None, 0.0, None, rng);
    }
    rows.shuffle(rng);
    let bbox = rows.iter().flat_map(|(_, b)| *b).collect();
    let appearance = rows.into_iter().flat_map(|(a, _)| a).map(|v| v as f32).collect();
    RegionFeatureSet::new(d, appearance, bbox).expect("generated regions are valid")
}

fn sorted_pair(rng: &mut ChaCha8Rng) -> (f32, f32) {
    let a: f32 = rng.gen();
    let b: f32 = rng.gen();
    (a.min(b), a.max(b))
}

/// Entity `e` belongs to cluster `e % n_clusters`.
pub fn n_clusters(spec: &SynthSpec) -> usize {
    spec.n_entities.div_ceil(spec.n_candidates)
}

fn candidates_for(gt: usize, spec: &SynthSpec, entity_ids: &[String], rng: &mut ChaCha8Rng) -> Vec<Candidate> {
    let m = spec.n_candidates;
    let correct = rng.gen_bool(spec.top1_correct);
    let rank = if correct || m == 1 {
        0
    } else {
        // Near misses dominate: rank r ≥ 1 with weight 0.45^(r-1).
        let weights: Vec<f64> = (1..m).map(|r| 0.45f64.powi(r as i32 - 1)).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut r = m - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                r = i + 1;
                break;
            }
            u -= w;
        }
        r
    };
    let k = n_clusters(spec);
    let mut look_alikes: Vec<usize> = (0..entity_ids.len()).filter(|&e| e != gt && e % k == gt % k).collect();
    look_alikes.shuffle(rng);
    let mut others: Vec<usize> = (0..entity_ids.len()).filter(|&e| e % k != gt % k).collect();
    others.shuffle(rng);
    look_alikes.extend(others);
    let mut order: Vec<usize> = look_alikes[..m - 1].to_vec();
    order.insert(rank, gt);
    let mut s = if correct {
        rng.gen_range(0.45..0.95)
    } else {
        rng.gen_range(0.3..0.7)
    };
    order
        .into_iter()
        .map(|e| {
            let c = Candidate {
                entity_id: entity_ids[e].clone(),
                s_iw: (s * 1e4f64).round() / 1e4,
            };
            s *= rng.gen_range(0.35..0.8);
            c
        })
        .collect()
}

fn query_for(scene: &Scene, lex: &Lexicon, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (String, Vec<Tag>) {
    let (a, o) = (ACTIVITIES[scene.activity], OBJECTS[scene.object]);
    if rng.gen_bool(spec.knowledge_dependence) {
        let fact = lex.facts[scene.entity].choose(rng).expect("facts are non-empty");
        (format!("a person {a} with a {o} near the one known for {fact}"), vec![Tag::Factual])
    } else {
        (format!("a person {a} with a {o} at the {}", SETTINGS[scene.setting]), vec![Tag::Visual, Tag::Commonsense])
    }
}

/// Writes a complete corpus under `dir` and returns the manifest path.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = Lexicon::new(spec.n_entities, spec.facts_per_entity);
    let k = n_clusters(spec);
    let clusters: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut rng, spec.d_app)).collect();
    let protos = Prototypes {
        entity: (0..spec.n_entities)
            .map(|e| {
                let own = gaussian(&mut rng, spec.d_app);
                clusters[e % k].iter().zip(own).map(|(c, o)| 0.8 * c + 0.6 * o).collect()
            })
            .collect(),
        attribute: (0..12).map(|_| gaussian(&mut rng, spec.d_app)).collect(),
    };

    let entity_ids: Vec<String> = (0..spec.n_entities).map(|i| format!("ent{i:03}")).collect();
    let entities: Vec<EntityRecord> = (0..spec.n_entities)
        .map(|i| EntityRecord {
            entity_id: entity_ids[i].clone(),
            name: lex.names[i].clone(),
            category: category_of(i),
            knowledge_text: knowledge_text(&lex.names[i], category_of(i), &lex.facts[i]),
        })
        .collect();

    // Training scenes are independent draws; every entity appears at least once.
    let mut train: Vec<Scene> = (0..spec.n_images)
        .map(|i| Scene {
            entity: if i < spec.n_entities { i } else { rng.gen_range(0..spec.n_entities) },
            activity: rng.gen_range(0..4),
            object: rng.gen_range(0..4),
            setting: rng.gen_range(0..4),
        })
        .collect();
    train.shuffle(&mut rng);

    // Gallery scenes cycle through the 16 activity/object combinations. Within
    // a combination, settings are spread out and entities come from distinct
    // clusters, so each query has a unique answer in the small gallery and no
    // look-alike of the answer shares its combination.
    let combos = 16;
    let mut members: Vec<Vec<usize>> = (0..k).map(|c| (0..spec.n_entities).filter(|e| e % k == c).collect()).collect();
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut next = vec![0usize; k];
    let perm = |n: usize, rng: &mut ChaCha8Rng| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    };
    let cluster_perm: Vec<Vec<usize>> = (0..combos).map(|_| perm(k, &mut rng)).collect();
    let setting_perm: Vec<Vec<usize>> = (0..combos).map(|_| perm(4, &mut rng)).collect();
    let gallery: Vec<Scene> = (0..spec.n_gallery_large)
        .map(|j| {
            let (c, slot) = (j % combos, j / combos);
            let cluster = cluster_perm[c][slot % k];
            let entity = members[cluster][next[cluster] % members[cluster].len()];
            next[cluster] += 1;
            Scene {
                entity,
                activity: c / 4,
                object: c % 4,
                setting: setting_perm[c][slot % 4],
            }
        })
        .collect();

    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut cand_records = Vec::new();
    let mut queries = Vec::new();
    let mut splits = Splits::default();
    let mut emit = |id: String, scene: &Scene, n_q: usize, rng: &mut ChaCha8Rng, queries: &mut Vec<QueryRecord>| -> Result<()> {
        let regions = regions_for(scene, spec, &protos, rng);
        write_region_file(&images_dir.join(region_file_name(&id)), &regions)?;
        cand_records.push(CandidateRecord {
            image_id: id.clone(),
            gt_entity_id: Some(entity_ids[scene.entity].clone()),
            candidates: candidates_for(scene.entity, spec, &entity_ids, rng),
        });
        for _ in 0..n_q {
            let (text, tags) = query_for(scene, &lex, spec, rng);
            queries.push(QueryRecord {
                query_id: format!("q{:05}", queries.len()),
                text,
                image_id: id.clone(),
                tags,
            });
        }
        Ok(())
    };
    for (i, scene) in train.iter().enumerate() {
        let n_q = spec.n_queries / spec.n_images + usize::from(i < spec.n_queries % spec.n_images);
        let id = format!("train{i:04}");
        emit(id.clone(), scene, n_q, &mut rng, &mut queries)?;
        splits.train.push(id);
    }
    for (j, scene) in gallery.iter().enumerate() {
        let id = format!("gal{j:04}");
        emit(id.clone(), scene, spec.gallery_queries_per_image, &mut rng, &mut queries)?;
        if j < spec.n_gallery {
            splits.gallery_small.push(id.clone());
        }
        splits.gallery_large.push(id);
    }

    let texts: Vec<&str> = entities
        .iter()
        .map(|e| e.knowledge_text.as_str())
        .chain(queries.iter().map(|q| q.text.as_str()))
        .collect();
    let vocab = Vocabulary::build(&texts, 1)?;
    vocab.save(&dir.join("vocab.txt"))?;
    write_jsonl(&dir.join("entities.jsonl"), &entities)?;
    write_jsonl(&dir.join("candidates.jsonl"), &cand_records)?;
    write_jsonl(&dir.join("queries.jsonl"), &queries)?;
    std::fs::write(dir.join("synth_spec.json"), serde_json::to_string_pretty(spec)?)?;
    let manifest = Manifest {
        entities: "entities.jsonl".into(),
        images_dir: "images".into(),
        candidates: "candidates.jsonl".into(),
        queries: "queries.jsonl".into(),
        vocab: "vocab.txt".into(),
        splits,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
